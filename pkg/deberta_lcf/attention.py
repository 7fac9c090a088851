"""
Disentangled self-attention with clamped relative positions.

Scores for one head are the sum of the enabled terms

    c2c[i, j] = (H_i W_q) . (H_j W_k)
    c2p[i, j] = (H_i W_q) . (P[b(i, j)] W_kr)
    p2c[i, j] = (P[b(j, i)] W_qr) . (H_j W_k)
    p2p[i, j] = (P[b(i, j)] W_qr) . (P[b(j, i)] W_kr)

divided by sqrt(T * d_head), T being the number of enabled terms and
b(i, j) = clamp(i - j, -k, k - 1) + k.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, DimensionError
from .tensor import Tensor
from .types import AttentionTerm

AttentionRecord = list[list[np.ndarray]]


def rel_bucket(i: int, j: int, k: int) -> int:
    return min(max(i - j, -k), k - 1) + k


def relative_buckets(n: int, k: int) -> np.ndarray:
    """n×n matrix whose [i, j] entry is rel_bucket(i, j, k)"""
    positions = np.arange(n)
    return np.clip(positions[:, None] - positions[None, :], -k, k - 1) + k


@dataclass
class RelPosTable:
    max_distance: int
    embeddings: Tensor

    def __post_init__(self) -> None:
        if self.max_distance < 1:
            raise ConfigError(f"max relative distance must be >= 1, got {self.max_distance}")
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != 2 * self.max_distance:
            raise DimensionError(
                f"relative position table must have {2 * self.max_distance} rows, got shape {self.embeddings.shape}"
            )


@dataclass
class AttentionParams:
    query: list[Tensor]
    key: list[Tensor]
    value: list[Tensor]
    # shared across every layer of a model
    pos_query: list[Tensor]
    pos_key: list[Tensor]
    output: Tensor
    output_bias: Tensor
    terms: frozenset[AttentionTerm]

    def __post_init__(self) -> None:
        if not self.terms:
            raise ConfigError("at least one attention term must be enabled")
        heads = len(self.query)
        if not heads or any(len(group) != heads for group in (self.key, self.value, self.pos_query, self.pos_key)):
            raise ConfigError("every projection group needs one matrix per head")
        d_model = self.output.shape[0]
        if d_model != heads * self.head_dim:
            raise DimensionError(f"d_model ({d_model}) != heads ({heads}) * d_head ({self.head_dim})")

    @property
    def heads(self) -> int:
        return len(self.query)

    @property
    def head_dim(self) -> int:
        return self.query[0].shape[1]


@dataclass
class EncoderParams:
    attention: AttentionParams
    ffn_in: Tensor
    ffn_in_bias: Tensor
    ffn_out: Tensor
    ffn_out_bias: Tensor
    attention_norm_gamma: Tensor
    attention_norm_beta: Tensor
    ffn_norm_gamma: Tensor
    ffn_norm_beta: Tensor

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        """Own parameters only; the shared position projections are registered by the model"""
        attention = self.attention
        params: dict[str, Tensor] = {}
        for head in range(attention.heads):
            params[f"{prefix}.attention.query.{head}"] = attention.query[head]
            params[f"{prefix}.attention.key.{head}"] = attention.key[head]
            params[f"{prefix}.attention.value.{head}"] = attention.value[head]
        params[f"{prefix}.attention.output"] = attention.output
        params[f"{prefix}.attention.output_bias"] = attention.output_bias
        params[f"{prefix}.ffn_in"] = self.ffn_in
        params[f"{prefix}.ffn_in_bias"] = self.ffn_in_bias
        params[f"{prefix}.ffn_out"] = self.ffn_out
        params[f"{prefix}.ffn_out_bias"] = self.ffn_out_bias
        params[f"{prefix}.attention_norm.gamma"] = self.attention_norm_gamma
        params[f"{prefix}.attention_norm.beta"] = self.attention_norm_beta
        params[f"{prefix}.ffn_norm.gamma"] = self.ffn_norm_gamma
        params[f"{prefix}.ffn_norm.beta"] = self.ffn_norm_beta
        return params


def disentangled_terms(
    hidden: Tensor, rel: RelPosTable, params: AttentionParams, head: int
) -> dict[AttentionTerm, Tensor]:
    """Unscaled n×n score matrix of every enabled term for one head"""
    n = hidden.shape[0]
    buckets = relative_buckets(n, rel.max_distance)
    rows = np.arange(n)[:, None]
    terms = params.terms

    query = T.matmul(hidden, params.query[head])
    key = T.matmul(hidden, params.key[head])
    scores: dict[AttentionTerm, Tensor] = {}

    if AttentionTerm.C2C in terms:
        scores[AttentionTerm.C2C] = T.matmul(query, T.transpose(key))

    if AttentionTerm.C2P in terms or AttentionTerm.P2P in terms:
        pos_key = T.matmul(rel.embeddings, params.pos_key[head])
    if AttentionTerm.P2C in terms or AttentionTerm.P2P in terms:
        pos_query = T.matmul(rel.embeddings, params.pos_query[head])

    if AttentionTerm.C2P in terms:
        # [i, r] = query_i . pos_key_r, then pick r = b(i, j)
        by_bucket = T.matmul(query, T.transpose(pos_key))
        scores[AttentionTerm.C2P] = T.gather_elements(by_bucket, rows, buckets)

    if AttentionTerm.P2C in terms:
        # [j, r] = key_j . pos_query_r, pick r = b(j, i), then flip to [i, j]
        by_bucket = T.matmul(key, T.transpose(pos_query))
        scores[AttentionTerm.P2C] = T.transpose(T.gather_elements(by_bucket, rows, buckets))

    if AttentionTerm.P2P in terms:
        by_buckets = T.matmul(pos_query, T.transpose(pos_key))
        scores[AttentionTerm.P2P] = T.gather_elements(by_buckets, buckets, buckets.T)

    return scores


def disentangled_scores(hidden: Tensor, rel: RelPosTable, params: AttentionParams, head: int) -> Tensor:
    terms = disentangled_terms(hidden, rel, params, head)
    total: Tensor | None = None
    for term in AttentionTerm:
        if term in terms:
            total = terms[term] if total is None else T.add(total, terms[term])
    assert total is not None
    return T.scale(total, 1.0 / math.sqrt(len(terms) * params.head_dim))


def key_mask(pad_mask: Tensor | np.ndarray | None, n: int) -> np.ndarray:
    """n×n mask where entry [i, j] keeps key j iff position j is a real token"""
    if pad_mask is None:
        return np.ones((n, n))
    keep = pad_mask.data if isinstance(pad_mask, Tensor) else np.asarray(pad_mask, dtype=np.float64)
    if keep.shape != (n,):
        raise DimensionError(f"pad mask shape {keep.shape} does not match sequence length {n}")
    return np.broadcast_to(keep[None, :], (n, n)).copy()


def attention_weights(
    hidden: Tensor, rel: RelPosTable, params: AttentionParams, pad_mask: Tensor | np.ndarray | None = None
) -> list[Tensor]:
    mask = key_mask(pad_mask, hidden.shape[0])
    return [T.softmax_rows(disentangled_scores(hidden, rel, params, head), mask) for head in range(params.heads)]


def mhsa(
    hidden: Tensor,
    rel: RelPosTable,
    params: AttentionParams,
    pad_mask: Tensor | np.ndarray | None = None,
    record: AttentionRecord | None = None,
) -> Tensor:
    weights = attention_weights(hidden, rel, params, pad_mask)
    if record is not None:
        record.append([w.numpy() for w in weights])

    heads = [T.matmul(w, T.matmul(hidden, params.value[head])) for head, w in enumerate(weights)]
    merged = heads[0] if len(heads) == 1 else T.concat(heads, axis=1)
    return T.add(T.matmul(merged, params.output), params.output_bias)


def encoder_layer(
    hidden: Tensor,
    rel: RelPosTable,
    enc: EncoderParams,
    pad_mask: Tensor | np.ndarray | None = None,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    eps: float = 1e-12,
    record: AttentionRecord | None = None,
) -> Tensor:
    """Post-norm block: LN(H + MHSA(H)), then LN(x + FFN(x)) with a gelu feed-forward"""
    attended = T.dropout(mhsa(hidden, rel, enc.attention, pad_mask, record), dropout, rng)
    x = T.layer_norm(T.add(hidden, attended), enc.attention_norm_gamma, enc.attention_norm_beta, eps)

    inner = T.gelu(T.add(T.matmul(x, enc.ffn_in), enc.ffn_in_bias))
    projected = T.dropout(T.add(T.matmul(inner, enc.ffn_out), enc.ffn_out_bias), dropout, rng)
    return T.layer_norm(T.add(x, projected), enc.ffn_norm_gamma, enc.ffn_norm_beta, eps)
