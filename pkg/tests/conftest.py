import os
from pathlib import Path

import numpy as np
import pytest

from deberta_lcf.config import ModelConfig, TrainConfig
from deberta_lcf.data import Vocab, build_vocab, make_examples, tokenized_corpus
from deberta_lcf.model import DebertaLcfModel, build
from deberta_lcf.types import Example, Polarity, RawAnnotation

FIXTURES_DIR = Path(__file__).parent / "fixtures"
DATA_DIR = Path(os.environ["LCF_DATA_DIR"]) if os.environ.get("LCF_DATA_DIR") else None

TOY_ASPECTS = ("food", "service", "screen", "battery")
TOY_OPINIONS = (
    ("great", Polarity.POSITIVE),
    ("awful", Polarity.NEGATIVE),
    ("okay", Polarity.NEUTRAL),
    ("good", Polarity.POSITIVE),
    ("bad", Polarity.NEGATIVE),
    ("average", Polarity.NEUTRAL),
)
TOY_TEMPLATES = ("the {aspect} is {opinion}", "honestly the {aspect} was {opinion} today")


def text_fixture(file_name: str) -> str:
    return (FIXTURES_DIR / file_name).read_text(encoding="utf-8")


def data_file(file_name: str) -> Path:
    """Official benchmark file under LCF_DATA_DIR; skips the test when it is not available"""
    if DATA_DIR is None or not (DATA_DIR / file_name).is_file():
        pytest.skip(f"{file_name} not available (set LCF_DATA_DIR)")
    return DATA_DIR / file_name


def toy_annotations(n: int = 32) -> list[RawAnnotation]:
    """Sentences whose polarity is fixed by a single opinion word"""
    annotations = []
    for index in range(n):
        aspect = TOY_ASPECTS[index % len(TOY_ASPECTS)]
        opinion, polarity = TOY_OPINIONS[(index // len(TOY_ASPECTS)) % len(TOY_OPINIONS)]
        template = TOY_TEMPLATES[(index // (len(TOY_ASPECTS) * len(TOY_OPINIONS))) % len(TOY_TEMPLATES)]
        sentence = template.format(aspect=aspect, opinion=opinion)
        start = sentence.index(aspect)
        annotations.append(RawAnnotation(str(index), sentence, aspect, polarity, start, start + len(aspect)))
    return annotations


def tiny_model_config(vocab_size: int = 10, **overrides: object) -> ModelConfig:
    values: dict[str, object] = {
        "layers": 1,
        "heads": 2,
        "d_model": 8,
        "d_ff": 16,
        "max_relative_distance": 4,
        "vocab_size": vocab_size,
        "dropout": 0.0,
        "seed": 0,
    }
    values.update(overrides)
    return ModelConfig.model_validate(values)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return tiny_model_config()


@pytest.fixture
def tiny_model(tiny_config: ModelConfig) -> DebertaLcfModel:
    return build(tiny_config)


@pytest.fixture
def toy_vocab() -> Vocab:
    return build_vocab(tokenized_corpus(toy_annotations()))


@pytest.fixture
def toy_examples(toy_vocab: Vocab) -> list[Example]:
    return make_examples(toy_annotations(), toy_vocab)


@pytest.fixture
def overfit_train_config() -> TrainConfig:
    return TrainConfig(epochs=300, batch_size=8, learning_rate=5e-3, val_fraction=0.0, seed=0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
