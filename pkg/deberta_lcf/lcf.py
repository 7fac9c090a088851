"""
Local context focus: semantic-relative distance (SRD) and the two ways of
suppressing features far from the aspect.

CDM keeps row i iff srd_i <= alpha and zeroes it otherwise. CDW keeps local
rows and scales the rest by max(0, (n - (srd_i - alpha)) / n).
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionRecord, EncoderParams, RelPosTable, encoder_layer
from .config import LcfConfig
from .exceptions import ContractError, DimensionError
from .tensor import Tensor
from .types import AspectSpan, LcfMode


@dataclass(frozen=True)
class SrdProfile:
    values: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.int64)


@dataclass
class FusionParams:
    weight: Tensor
    bias: Tensor
    encoder: EncoderParams


def compute_srd(n: int, span: AspectSpan) -> SrdProfile:
    if span.token_end >= n:
        raise ContractError(f"aspect span [{span.token_start}, {span.token_end}] outside sequence of length {n}")

    values = []
    for i in range(n):
        if span.token_start <= i <= span.token_end:
            values.append(0)
        else:
            values.append(min(abs(i - span.token_start), abs(i - span.token_end)))
    return SrdProfile(tuple(values))


def local_srd_profile(n: int, span: AspectSpan, alpha: int) -> SrdProfile:
    """SRD of `[CLS] sentence [SEP]`: the special tokens sit at distance alpha, i.e. always local"""
    return SrdProfile((alpha, *compute_srd(n, span).values, alpha))


def cdm_mask(srd: SrdProfile, alpha: int, d_model: int) -> Tensor:
    local = (srd.as_array() <= alpha).astype(np.float64)
    return Tensor(np.repeat(local[:, None], d_model, axis=1))


def cdw_weights(srd: SrdProfile, alpha: int, n: int) -> Tensor:
    if n != len(srd):
        raise ContractError(f"cdw_weights: n ({n}) != SRD length ({len(srd)})")

    distances = srd.as_array()
    decayed = np.maximum(0.0, (n - (distances - alpha)) / n)
    return Tensor(np.where(distances <= alpha, 1.0, decayed)[:, None])


def apply_lcf(features: Tensor, cfg: LcfConfig, srd: SrdProfile) -> Tensor:
    n, d = features.shape
    if n != len(srd):
        raise DimensionError(f"apply_lcf: features have {n} rows but the SRD profile has {len(srd)}")

    if cfg.mode is LcfMode.CDM:
        return T.mul(features, cdm_mask(srd, cfg.alpha, d))
    return T.mul(features, cdw_weights(srd, cfg.alpha, n))


def fuse_local_global(
    local: Tensor,
    global_: Tensor,
    fusion: FusionParams,
    rel: RelPosTable,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    eps: float = 1e-12,
    record: AttentionRecord | None = None,
) -> Tensor:
    """Concatenate both branches feature-wise, project back to d_model and run one encoder layer"""
    if local.shape != global_.shape:
        raise DimensionError(f"fuse_local_global: local {local.shape} and global {global_.shape} differ")

    merged = T.concat([local, global_], axis=1)
    projected = T.add(T.matmul(merged, fusion.weight), fusion.bias)
    return encoder_layer(projected, rel, fusion.encoder, None, dropout, rng, eps, record)
