from pathlib import Path
from typing import Any, Self

from pydantic import BaseModel, ConfigDict, model_validator

from .exceptions import ConfigError
from .types import AttentionTerm, DatasetFormat, LcfMode, N_CLASSES


class _FrozenConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class LcfConfig(_FrozenConfig):
    alpha: int = 5
    mode: LcfMode = LcfMode.CDM

    @model_validator(mode="after")
    def _check(self) -> Self:
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        return self


class ModelConfig(_FrozenConfig):
    layers: int = 2
    heads: int = 2
    d_model: int = 32
    d_ff: int = 64
    max_relative_distance: int = 8
    vocab_size: int = 8
    n_classes: int = N_CLASSES
    dropout: float = 0.1
    alpha: int = 5
    mode: LcfMode = LcfMode.CDM
    use_p2p: bool = False
    layer_norm_eps: float = 1e-12
    seed: int = 42

    @model_validator(mode="after")
    def _check(self) -> Self:
        for name in ("layers", "heads", "d_model", "d_ff", "max_relative_distance", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.vocab_size < 4:
            raise ConfigError(f"vocab_size must cover the 4 reserved tokens, got {self.vocab_size}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model ({self.d_model}) must be divisible by heads ({self.heads})")
        if self.n_classes != N_CLASSES:
            raise ConfigError(f"n_classes must be {N_CLASSES}, got {self.n_classes}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must satisfy 0 <= p < 1, got {self.dropout}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.layer_norm_eps <= 0:
            raise ConfigError(f"layer_norm_eps must be > 0, got {self.layer_norm_eps}")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def terms(self) -> frozenset[AttentionTerm]:
        terms = {AttentionTerm.C2C, AttentionTerm.C2P, AttentionTerm.P2C}
        if self.use_p2p:
            terms.add(AttentionTerm.P2P)
        return frozenset(terms)

    @property
    def lcf(self) -> LcfConfig:
        return LcfConfig(alpha=self.alpha, mode=self.mode)


class TrainConfig(_FrozenConfig):
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 42
    patience: int = 0
    val_fraction: float = 0.1

    @model_validator(mode="after")
    def _check(self) -> Self:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must satisfy 0 <= beta < 1, got {getattr(self, name)}")
        if self.adam_eps <= 0:
            raise ConfigError(f"adam_eps must be > 0, got {self.adam_eps}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.patience < 0:
            raise ConfigError(f"patience must be >= 0, got {self.patience}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must satisfy 0 <= f < 1, got {self.val_fraction}")
        return self


_MODEL_KEYS = set(ModelConfig.model_fields) - {"vocab_size", "n_classes", "seed"}
_TRAIN_KEYS = set(TrainConfig.model_fields) - {"seed"}


class RunConfig(_FrozenConfig):
    """
    Flat union of everything one training run needs, as read from a `key = value` file.

    `vocab_size` is absent: it is fixed by the vocabulary built from `train_path`.
    A single `seed` drives initialisation, shuffling, dropout and the validation split.
    """

    train_path: Path
    test_path: Path | None = None
    format: DatasetFormat = DatasetFormat.SEMEVAL
    output_dir: Path = Path("runs/default")
    min_count: int = 1

    layers: int = 2
    heads: int = 2
    d_model: int = 32
    d_ff: int = 64
    max_relative_distance: int = 8
    dropout: float = 0.1
    alpha: int = 5
    mode: LcfMode = LcfMode.CDM
    use_p2p: bool = False
    layer_norm_eps: float = 1e-12

    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    patience: int = 0
    val_fraction: float = 0.1
    seed: int = 42

    @model_validator(mode="after")
    def _check(self) -> Self:
        if self.min_count < 1:
            raise ConfigError(f"min_count must be >= 1, got {self.min_count}")
        # surfaces range violations before any data is read
        self.train_config()
        self.build_model_config(vocab_size=4)
        return self

    def check_paths(self) -> None:
        for name in ("train_path", "test_path"):
            path = getattr(self, name)
            if path is not None and not path.is_file():
                raise ConfigError(f"{name} does not exist: {path}")

    def build_model_config(self, vocab_size: int) -> ModelConfig:
        values: dict[str, Any] = {key: getattr(self, key) for key in _MODEL_KEYS}
        return ModelConfig(vocab_size=vocab_size, seed=self.seed, **values)

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **{key: getattr(self, key) for key in _TRAIN_KEYS})

    def to_flat_dict(self) -> dict[str, str]:
        flat: dict[str, str] = {}
        for key, value in self.model_dump().items():
            if value is None:
                continue
            if isinstance(value, bool):
                flat[key] = "true" if value else "false"
            elif isinstance(value, float):
                flat[key] = repr(value)
            else:
                flat[key] = str(value)
        return flat
