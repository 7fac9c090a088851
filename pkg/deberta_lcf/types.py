from dataclasses import dataclass
from enum import StrEnum
from typing import NamedTuple, TypedDict

from .exceptions import ContractError


class Polarity(StrEnum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    NEUTRAL = "neutral"
    CONFLICT = "conflict"

    @property
    def class_index(self) -> int:
        """Class index used by the classifier head; conflict has none"""
        if self is Polarity.CONFLICT:
            raise ContractError("conflict polarity has no class index")
        return CLASS_LABELS.index(self)


CLASS_LABELS: tuple[Polarity, ...] = (Polarity.POSITIVE, Polarity.NEGATIVE, Polarity.NEUTRAL)
N_CLASSES = len(CLASS_LABELS)


class LcfMode(StrEnum):
    CDM = "cdm"
    CDW = "cdw"


class AttentionTerm(StrEnum):
    C2C = "c2c"
    C2P = "c2p"
    P2C = "p2c"
    P2P = "p2p"


class DatasetFormat(StrEnum):
    SEMEVAL = "semeval"
    TWITTER = "twitter"


class Token(NamedTuple):
    text: str
    start: int
    end: int


@dataclass(frozen=True)
class AspectSpan:
    token_start: int
    token_end: int
    char_from: int = 0
    char_to: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.token_start <= self.token_end:
            raise ContractError(f"invalid aspect span [{self.token_start}, {self.token_end}]")

    def check_within(self, n: int) -> None:
        if self.token_end >= n:
            raise ContractError(f"aspect span [{self.token_start}, {self.token_end}] outside sequence of length {n}")


@dataclass(frozen=True)
class RawAnnotation:
    sentence_id: str
    sentence: str
    term: str
    polarity: Polarity
    char_from: int
    char_to: int


@dataclass(frozen=True)
class Example:
    token_ids: tuple[int, ...]
    span: AspectSpan
    label: Polarity


class LabelCounts(NamedTuple):
    positive: int = 0
    negative: int = 0
    neutral: int = 0

    @property
    def total(self) -> int:
        return self.positive + self.negative + self.neutral


class EpochRecord(TypedDict):
    epoch: int
    loss: float
    train_accuracy: float
    val_macro_f1: float | None


PAD_ID, UNK_ID, CLS_ID, SEP_ID = 0, 1, 2, 3
