import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import AttentionParams, AttentionRecord, EncoderParams, RelPosTable, encoder_layer
from .config import ModelConfig
from .exceptions import ContractError, DimensionError
from .lcf import FusionParams, SrdProfile, apply_lcf, cdw_weights, fuse_local_global, local_srd_profile
from .tensor import Tensor
from .types import CLASS_LABELS, CLS_ID, SEP_ID, AspectSpan, LcfMode, Polarity

logger = logging.getLogger(__name__)

INIT_STD = 0.02


@dataclass
class AttentionTrace:
    """Attention weights per branch, layer and head, plus the LCF inputs of one example"""

    global_: AttentionRecord = field(default_factory=list)
    local: AttentionRecord = field(default_factory=list)
    fusion: AttentionRecord = field(default_factory=list)
    srd: SrdProfile | None = None
    lcf_vector: np.ndarray | None = None


@dataclass
class DebertaLcfModel:
    config: ModelConfig
    embeddings: Tensor
    rel: RelPosTable
    pos_query: list[Tensor]
    pos_key: list[Tensor]
    layers: list[EncoderParams]
    fusion: FusionParams
    classifier: Tensor
    classifier_bias: Tensor

    def named_parameters(self) -> dict[str, Tensor]:
        params = {"embeddings": self.embeddings, "rel.embeddings": self.rel.embeddings}
        for head in range(self.config.heads):
            params[f"rel.pos_query.{head}"] = self.pos_query[head]
            params[f"rel.pos_key.{head}"] = self.pos_key[head]
        for index, layer in enumerate(self.layers):
            params.update(layer.named_parameters(f"layers.{index}"))
        params["fusion.weight"] = self.fusion.weight
        params["fusion.bias"] = self.fusion.bias
        params.update(self.fusion.encoder.named_parameters("fusion.encoder"))
        params["classifier"] = self.classifier
        params["classifier_bias"] = self.classifier_bias
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()


class _Initializer:
    def __init__(self, seed: int) -> None:
        self.rng = np.random.default_rng(seed)

    def normal(self, *shape: int) -> Tensor:
        return Tensor(self.rng.normal(0.0, INIT_STD, size=shape), requires_grad=True)

    @staticmethod
    def zeros(*shape: int) -> Tensor:
        return Tensor(np.zeros(shape), requires_grad=True)

    @staticmethod
    def ones(*shape: int) -> Tensor:
        return Tensor(np.ones(shape), requires_grad=True)


def _build_encoder(
    init: _Initializer, config: ModelConfig, pos_query: list[Tensor], pos_key: list[Tensor]
) -> EncoderParams:
    d, d_head, heads = config.d_model, config.head_dim, config.heads
    attention = AttentionParams(
        query=[init.normal(d, d_head) for _ in range(heads)],
        key=[init.normal(d, d_head) for _ in range(heads)],
        value=[init.normal(d, d_head) for _ in range(heads)],
        pos_query=pos_query,
        pos_key=pos_key,
        output=init.normal(d, d),
        output_bias=init.zeros(d),
        terms=config.terms,
    )
    return EncoderParams(
        attention=attention,
        ffn_in=init.normal(d, config.d_ff),
        ffn_in_bias=init.zeros(config.d_ff),
        ffn_out=init.normal(config.d_ff, d),
        ffn_out_bias=init.zeros(d),
        attention_norm_gamma=init.ones(d),
        attention_norm_beta=init.zeros(d),
        ffn_norm_gamma=init.ones(d),
        ffn_norm_beta=init.zeros(d),
    )


def build(config: ModelConfig) -> DebertaLcfModel:
    """Weights ~ normal(0, 0.02), biases 0, layer-norm scale 1 / shift 0, drawn in a fixed order from `config.seed`"""
    init = _Initializer(config.seed)
    d, d_head = config.d_model, config.head_dim

    embeddings = init.normal(config.vocab_size, d)
    rel = RelPosTable(config.max_relative_distance, init.normal(2 * config.max_relative_distance, d))
    pos_query = [init.normal(d, d_head) for _ in range(config.heads)]
    pos_key = [init.normal(d, d_head) for _ in range(config.heads)]
    layers = [_build_encoder(init, config, pos_query, pos_key) for _ in range(config.layers)]
    fusion = FusionParams(
        weight=init.normal(2 * d, d),
        bias=init.zeros(d),
        encoder=_build_encoder(init, config, pos_query, pos_key),
    )
    model = DebertaLcfModel(
        config=config,
        embeddings=embeddings,
        rel=rel,
        pos_query=pos_query,
        pos_key=pos_key,
        layers=layers,
        fusion=fusion,
        classifier=init.normal(d, len(CLASS_LABELS)),
        classifier_bias=init.zeros(len(CLASS_LABELS)),
    )
    logger.debug(f"built model with {model.parameter_count()} parameters")
    return model


def _trunk(
    model: DebertaLcfModel, ids: Sequence[int], rng: np.random.Generator | None, record: AttentionRecord | None
) -> Tensor:
    config = model.config
    hidden = T.embedding_gather(model.embeddings, ids)
    for layer in model.layers:
        hidden = encoder_layer(hidden, model.rel, layer, None, config.dropout, rng, config.layer_norm_eps, record)
    return hidden


def _check_span(token_ids: Sequence[int], span: AspectSpan) -> None:
    if not token_ids:
        raise ContractError("cannot encode an empty sentence")
    span.check_within(len(token_ids))


def local_features(
    model: DebertaLcfModel,
    token_ids: Sequence[int],
    span: AspectSpan,
    rng: np.random.Generator | None = None,
    local_focus: bool = True,
    trace: AttentionTrace | None = None,
) -> Tensor:
    """Trunk output for `[CLS] sentence [SEP]` after the local context focus layer"""
    _check_span(token_ids, span)
    config = model.config
    hidden = _trunk(model, [CLS_ID, *token_ids, SEP_ID], rng, trace.local if trace is not None else None)
    if not local_focus:
        return hidden

    srd = local_srd_profile(len(token_ids), span, config.alpha)
    if trace is not None:
        trace.srd = srd
        if config.mode is LcfMode.CDM:
            trace.lcf_vector = (srd.as_array() <= config.alpha).astype(np.float64)
        else:
            trace.lcf_vector = cdw_weights(srd, config.alpha, len(srd)).data[:, 0].copy()
    return apply_lcf(hidden, config.lcf, srd)


def global_features(
    model: DebertaLcfModel,
    token_ids: Sequence[int],
    span: AspectSpan,
    rng: np.random.Generator | None = None,
    trace: AttentionTrace | None = None,
) -> Tensor:
    """Trunk output for `[CLS] sentence [SEP] aspect [SEP]`"""
    _check_span(token_ids, span)
    aspect = token_ids[span.token_start : span.token_end + 1]
    ids = [CLS_ID, *token_ids, SEP_ID, *aspect, SEP_ID]
    return _trunk(model, ids, rng, trace.global_ if trace is not None else None)


def forward_example(
    model: DebertaLcfModel,
    token_ids: Sequence[int],
    span: AspectSpan,
    rng: np.random.Generator | None = None,
    local_focus: bool = True,
    trace: AttentionTrace | None = None,
) -> Tensor:
    """Logits (1×3) for one unpadded sentence"""
    config = model.config
    local = local_features(model, token_ids, span, rng, local_focus, trace)
    global_ = global_features(model, token_ids, span, rng, trace)
    # the sentence region [CLS] sentence [SEP] is shared by both branches
    overlap = T.slice_rows(global_, 0, local.shape[0])
    fused = fuse_local_global(
        local,
        overlap,
        model.fusion,
        model.rel,
        config.dropout,
        rng,
        config.layer_norm_eps,
        trace.fusion if trace is not None else None,
    )
    pooled = T.slice_rows(fused, 0, 1)
    return T.add(T.matmul(pooled, model.classifier), model.classifier_bias)


def forward(
    model: DebertaLcfModel,
    tokens: np.ndarray,
    spans: Sequence[AspectSpan],
    pad_masks: np.ndarray,
    rng: np.random.Generator | None = None,
    local_focus: bool = True,
) -> Tensor:
    """
    Logits (B×3) for a right-padded batch.

    Each example is run at its unpadded length, so appended padding never changes its logits.
    """
    tokens = np.asarray(tokens)
    pad_masks = np.asarray(pad_masks)
    if tokens.ndim != 2 or tokens.shape != pad_masks.shape or tokens.shape[0] != len(spans):
        raise DimensionError(
            f"forward: tokens {tokens.shape}, pad masks {pad_masks.shape} and {len(spans)} spans disagree"
        )

    rows = []
    for row, mask, span in zip(tokens, pad_masks, spans):
        length = int(np.count_nonzero(mask))
        if span.token_end >= length:
            raise ContractError(
                f"aspect span [{span.token_start}, {span.token_end}] outside unpadded length {length}"
            )
        rows.append(forward_example(model, [int(i) for i in row[:length]], span, rng, local_focus))

    return rows[0] if len(rows) == 1 else T.concat(rows, axis=0)


def probabilities(logits: Tensor) -> np.ndarray:
    return T.softmax_rows(logits).numpy()


def predict(model: DebertaLcfModel, token_ids: Sequence[int], span: AspectSpan) -> tuple[Polarity, np.ndarray]:
    """Most probable polarity (lowest class index wins ties) and the three class probabilities"""
    probs = probabilities(forward_example(model, token_ids, span))[0]
    return CLASS_LABELS[int(np.argmax(probs))], probs
