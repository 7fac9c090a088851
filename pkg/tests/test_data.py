from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deberta_lcf.data import (
    Vocab,
    build_vocab,
    char_span_to_token_span,
    dataset_stats,
    load_annotations,
    make_batches,
    make_examples,
    pad_batch,
    parse_semeval,
    parse_twitter,
    split_holdout,
    to_semeval_xml,
    to_twitter_text,
    tokenize,
    tokenized_corpus,
)
from deberta_lcf.exceptions import AlignmentError, DatasetFormatError, DatasetParseError, IntegrityError
from deberta_lcf.types import UNK_ID, AspectSpan, DatasetFormat, Example, LabelCounts, Polarity, RawAnnotation

from tests.conftest import FIXTURES_DIR, data_file, text_fixture, toy_annotations


def test_parse_semeval_fixture() -> None:
    annotations = parse_semeval(text_fixture("mini_semeval.xml"))

    assert [(a.sentence_id, a.term, a.polarity) for a in annotations] == [
        ("s1", "size", Polarity.POSITIVE),
        ("s1", "weight", Polarity.POSITIVE),
        ("s2", "battery life", Polarity.NEGATIVE),
        ("s2", "screen", Polarity.CONFLICT),
        ("s4", "keyboard", Polarity.NEUTRAL),
    ]
    for a in annotations:
        assert a.sentence[a.char_from : a.char_to] == a.term


def test_parse_semeval_malformed_reports_position() -> None:
    with pytest.raises(DatasetParseError) as exc_info:
        parse_semeval(text_fixture("malformed.xml"))

    assert "line 7" in str(exc_info.value)


def test_parse_semeval_offset_mismatch_names_sentence() -> None:
    with pytest.raises(IntegrityError) as exc_info:
        parse_semeval(text_fixture("mismatch.xml"))

    assert "bad-7" in str(exc_info.value)


def test_parse_semeval_bad_polarity() -> None:
    xml = '<sentences><sentence id="x"><text>ab</text><aspectTerms>'
    xml += '<aspectTerm term="a" polarity="mixed" from="0" to="1"/></aspectTerms></sentence></sentences>'

    with pytest.raises(DatasetParseError):
        parse_semeval(xml)


def test_semeval_round_trip_is_lossless() -> None:
    annotations = parse_semeval(text_fixture("mini_semeval.xml"))
    assert parse_semeval(to_semeval_xml(annotations)) == annotations


def test_parse_twitter_fixture() -> None:
    annotations = parse_twitter(text_fixture("mini_twitter.raw"))

    first = annotations[0]
    assert first.sentence == "i love the pixel so much"
    assert (first.term, first.polarity, first.char_from, first.char_to) == ("the pixel", Polarity.POSITIVE, 7, 16)
    assert [a.polarity for a in annotations] == [Polarity.POSITIVE, Polarity.NEGATIVE, Polarity.NEUTRAL]
    assert annotations[2].char_from == 23


def test_twitter_round_trip_is_lossless() -> None:
    text = text_fixture("mini_twitter.raw")
    assert to_twitter_text(parse_twitter(text)) == text


@pytest.mark.parametrize(
    "text, message",
    [
        (text_fixture("bad_label.raw"), "label '2'"),
        ("i love $T$\nthe pixel\n", "record 0: incomplete trailing record"),
        ("ok\n$T$\n1\ni love $T$\n", "record 1: incomplete trailing record"),
        ("ok\nfine\n1\ni love it\nthe pixel\n1\n", "record 0"),
    ],
)
def test_parse_twitter_format_errors(text: str, message: str) -> None:
    with pytest.raises(DatasetFormatError) as exc_info:
        parse_twitter(text)

    assert message in str(exc_info.value)


def test_load_annotations_dispatches_on_format() -> None:
    assert len(load_annotations(FIXTURES_DIR / "mini_semeval.xml", DatasetFormat.SEMEVAL)) == 5
    assert len(load_annotations(FIXTURES_DIR / "mini_twitter.raw", DatasetFormat.TWITTER)) == 3


@pytest.mark.parametrize("fmt", list(DatasetFormat))
def test_load_annotations_rejects_invalid_utf8(fmt: DatasetFormat, tmp_path: Path) -> None:
    path = tmp_path / "bad.raw"
    path.write_bytes(b"i love $T$\n\xff\xfe\n1\n")

    with pytest.raises(DatasetParseError) as exc_info:
        load_annotations(path, fmt)

    assert "not valid UTF-8 at byte 11" in str(exc_info.value)
    assert str(path) in str(exc_info.value)


def test_load_annotations_normalises_crlf(tmp_path: Path) -> None:
    path = tmp_path / "crlf.raw"
    path.write_bytes((FIXTURES_DIR / "mini_twitter.raw").read_bytes().replace(b"\n", b"\r\n"))

    assert load_annotations(path, DatasetFormat.TWITTER) == load_annotations(
        FIXTURES_DIR / "mini_twitter.raw", DatasetFormat.TWITTER
    )


@pytest.mark.parametrize(
    "text, expected",
    [
        ("Its size is ideal", ["its", "size", "is", "ideal"]),
        ("don't", ["don", "'", "t"]),
        ("", []),
        ("Battery-life: 5h!", ["battery", "-", "life", ":", "5h", "!"]),
    ],
)
def test_tokenize(text: str, expected: list[str]) -> None:
    assert [t.text for t in tokenize(text)] == expected


@given(st.text(max_size=40))
def test_tokenize_offsets_point_into_text(text: str) -> None:
    for token in tokenize(text):
        assert text[token.start : token.end].lower() == token.text


@pytest.mark.parametrize(
    "char_from, char_to, expected",
    [
        (4, 8, (1, 1)),
        (26, 32, (6, 6)),
        (5, 7, (1, 1)),
        (22, 32, (5, 6)),
    ],
)
def test_char_span_to_token_span(char_from: int, char_to: int, expected: tuple[int, int]) -> None:
    tokens = tokenize("Its size is ideal and the weight is acceptable.")
    span = char_span_to_token_span(tokens, char_from, char_to)

    assert (span.token_start, span.token_end) == expected


def test_char_span_between_tokens_fails() -> None:
    with pytest.raises(AlignmentError):
        char_span_to_token_span(tokenize("a  b"), 1, 2)


def test_build_vocab_single_word() -> None:
    vocab = build_vocab([["food", "food"], ["food"]])

    assert len(vocab) == 5
    assert vocab.encode(["food", "drinks"]) == [4, UNK_ID]


def test_build_vocab_orders_by_frequency_then_text() -> None:
    vocab = build_vocab([["b", "a", "c", "c"], ["b"]])
    assert vocab.tokens[4:] == ["b", "c", "a"]


def test_build_vocab_min_count() -> None:
    vocab = build_vocab([["rare", "common"], ["common"]], min_count=2)
    assert vocab.tokens[4:] == ["common"]


def test_vocab_round_trips() -> None:
    tokens = [t.text for t in tokenize("The Battery life is awful")]
    vocab = build_vocab([tokens])

    assert vocab.decode(vocab.encode(tokens)) == tokens
    assert Vocab.from_text(vocab.to_text()) == vocab


def test_vocab_from_text_requires_reserved_tokens() -> None:
    with pytest.raises(DatasetFormatError):
        Vocab.from_text("food\nservice\n")


def test_make_examples_drops_conflict() -> None:
    annotations = parse_semeval(text_fixture("mini_semeval.xml"))
    vocab = build_vocab(tokenized_corpus(annotations))
    examples = make_examples(annotations, vocab)

    assert [e.label for e in examples] == [Polarity.POSITIVE, Polarity.POSITIVE, Polarity.NEGATIVE, Polarity.NEUTRAL]
    battery = examples[2]
    assert battery.span == AspectSpan(1, 2, 4, 16)
    assert vocab.decode(battery.token_ids[1:3]) == ["battery", "life"]


def test_pad_batch_masks_and_padding() -> None:
    batch = pad_batch(
        [
            Example((4, 5, 6), AspectSpan(0, 0), Polarity.POSITIVE),
            Example((7,), AspectSpan(0, 0), Polarity.NEUTRAL),
        ]
    )

    assert batch.tokens.tolist() == [[4, 5, 6], [7, 0, 0]]
    assert batch.pad_mask.sum(axis=1).tolist() == [3.0, 1.0]
    assert batch.labels.tolist() == [0, 2]


def test_pad_batch_equal_lengths_has_no_padding() -> None:
    batch = pad_batch([Example((4, 5), AspectSpan(0, 0), Polarity.POSITIVE)] * 3)
    assert batch.pad_mask.all()


def test_make_batches_seeded_order() -> None:
    examples = [Example((4 + i,), AspectSpan(0, 0), Polarity.POSITIVE) for i in range(10)]

    first = make_batches(examples, 4, seed=3)
    second = make_batches(examples, 4, seed=3)
    unshuffled = make_batches(examples, 4)

    assert [len(b) for b in first] == [4, 4, 2]
    assert all(np.array_equal(a.tokens, b.tokens) for a, b in zip(first, second))
    assert unshuffled[0].tokens[:, 0].tolist() == [4, 5, 6, 7]


def test_split_holdout_is_seeded_and_disjoint() -> None:
    examples = [Example((4 + i,), AspectSpan(0, 0), Polarity.POSITIVE) for i in range(20)]

    train, held = split_holdout(examples, 0.1, seed=7)

    assert len(held) == 2 and len(train) == 18
    assert {e.token_ids for e in train}.isdisjoint({e.token_ids for e in held})
    assert split_holdout(examples, 0.1, seed=7) == (train, held)
    assert split_holdout(examples, 0.0, seed=7) == (examples, [])


def test_dataset_stats() -> None:
    annotations = parse_semeval(text_fixture("mini_semeval.xml"))

    assert dataset_stats(annotations) == LabelCounts(2, 1, 1)
    assert dataset_stats([]) == LabelCounts(0, 0, 0)
    assert dataset_stats(toy_annotations(3)) == LabelCounts(3, 0, 0)


def test_dataset_stats_two_positive_one_negative() -> None:
    annotations = [
        RawAnnotation("1", "good food", "food", Polarity.POSITIVE, 5, 9),
        RawAnnotation("2", "good wine", "wine", Polarity.POSITIVE, 5, 9),
        RawAnnotation("3", "bad tea", "tea", Polarity.NEGATIVE, 4, 7),
    ]
    assert dataset_stats(annotations) == LabelCounts(2, 1, 0)


OFFICIAL_COUNTS = [
    ("Laptop_Train_v2.xml", DatasetFormat.SEMEVAL, LabelCounts(994, 870, 464)),
    ("Restaurants_Train_v2.xml", DatasetFormat.SEMEVAL, LabelCounts(2164, 807, 637)),
    ("twitter_train.raw", DatasetFormat.TWITTER, LabelCounts(1561, 1560, 3127)),
]


@pytest.mark.parametrize("file_name, fmt, expected", OFFICIAL_COUNTS)
def test_official_train_label_counts(file_name: str, fmt: DatasetFormat, expected: LabelCounts) -> None:
    assert dataset_stats(load_annotations(data_file(file_name), fmt)) == expected


def test_official_train_total() -> None:
    totals = [dataset_stats(load_annotations(data_file(name), fmt)).total for name, fmt, _ in OFFICIAL_COUNTS]
    assert sum(totals) == 12184
