import logging
import re
import xml.etree.ElementTree as ET
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import AlignmentError, ContractError, DatasetFormatError, DatasetParseError, IntegrityError
from .types import PAD_ID, UNK_ID, AspectSpan, DatasetFormat, Example, LabelCounts, Polarity, RawAnnotation, Token

logger = logging.getLogger(__name__)

TOKEN_PATTERN = re.compile(r"\w+|[^\w\s]")
TWITTER_PLACEHOLDER = "$T$"
TWITTER_LABELS = {"-1": Polarity.NEGATIVE, "0": Polarity.NEUTRAL, "1": Polarity.POSITIVE}
RESERVED_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]")


def parse_semeval(xml_text: str) -> list[RawAnnotation]:
    """One annotation per aspectTerm element; sentences without aspect terms yield nothing"""
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        line, column = exc.position
        raise DatasetParseError(f"malformed SemEval markup at line {line}, column {column}") from exc

    annotations = []
    for sentence in root.iter("sentence"):
        sentence_id = sentence.get("id", "")
        text = sentence.findtext("text")
        if text is None:
            raise DatasetParseError(f"sentence {sentence_id!r} has no text element")

        for term in sentence.iter("aspectTerm"):
            try:
                char_from, char_to = int(term.attrib["from"]), int(term.attrib["to"])
                polarity = Polarity(term.attrib["polarity"])
                term_text = term.attrib["term"]
            except (KeyError, ValueError) as exc:
                raise DatasetParseError(f"sentence {sentence_id!r}: bad aspectTerm attributes ({exc})") from exc

            if text[char_from:char_to] != term_text:
                raise IntegrityError(
                    f"sentence {sentence_id!r}: text[{char_from}:{char_to}] = {text[char_from:char_to]!r} "
                    f"does not match term {term_text!r}"
                )
            annotations.append(RawAnnotation(sentence_id, text, term_text, polarity, char_from, char_to))

    return annotations


def parse_twitter(text: str) -> list[RawAnnotation]:
    """Records of three lines: sentence with `$T$`, target, label in {-1, 0, 1}"""
    lines = text.splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if len(lines) % 3:
        raise DatasetFormatError(
            f"record {len(lines) // 3}: incomplete trailing record ({len(lines)} lines, not a multiple of 3)"
        )

    annotations = []
    for index in range(len(lines) // 3):
        template, target, label = (line.strip() for line in lines[3 * index : 3 * index + 3])
        position = template.find(TWITTER_PLACEHOLDER)
        if position < 0:
            raise DatasetFormatError(f"record {index}: sentence has no {TWITTER_PLACEHOLDER} placeholder")
        if label not in TWITTER_LABELS:
            raise DatasetFormatError(f"record {index}: label {label!r} not in {{-1, 0, 1}}")

        sentence = template[:position] + target + template[position + len(TWITTER_PLACEHOLDER) :]
        annotations.append(
            RawAnnotation(str(index), sentence, target, TWITTER_LABELS[label], position, position + len(target))
        )

    return annotations


def to_semeval_xml(annotations: Sequence[RawAnnotation]) -> str:
    root = ET.Element("sentences")
    aspect_terms: dict[str, ET.Element] = {}
    for annotation in annotations:
        if annotation.sentence_id not in aspect_terms:
            sentence = ET.SubElement(root, "sentence", id=annotation.sentence_id)
            ET.SubElement(sentence, "text").text = annotation.sentence
            aspect_terms[annotation.sentence_id] = ET.SubElement(sentence, "aspectTerms")

        term = ET.SubElement(aspect_terms[annotation.sentence_id], "aspectTerm")
        term.set("term", annotation.term)
        term.set("polarity", annotation.polarity.value)
        term.set("from", str(annotation.char_from))
        term.set("to", str(annotation.char_to))

    return ET.tostring(root, encoding="unicode")


def to_twitter_text(annotations: Sequence[RawAnnotation]) -> str:
    labels = {polarity: label for label, polarity in TWITTER_LABELS.items()}
    lines = []
    for index, annotation in enumerate(annotations):
        if annotation.polarity not in labels:
            raise DatasetFormatError(f"record {index}: polarity {annotation.polarity} has no twitter label")
        sentence = annotation.sentence
        lines.append(sentence[: annotation.char_from] + TWITTER_PLACEHOLDER + sentence[annotation.char_to :])
        lines.append(annotation.term)
        lines.append(labels[annotation.polarity])
    return "\n".join(lines) + "\n"


def load_annotations(path: Path, fmt: DatasetFormat) -> list[RawAnnotation]:
    try:
        text = Path(path).read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DatasetParseError(f"{path}: not valid UTF-8 at byte {exc.start} ({exc.reason})") from exc
    # same newline handling as text-mode reads
    text = text.replace("\r\n", "\n").replace("\r", "\n")
    annotations = parse_semeval(text) if fmt is DatasetFormat.SEMEVAL else parse_twitter(text)
    logger.info(f"loaded {len(annotations)} annotations from {path}")
    return annotations


def tokenize(text: str) -> list[Token]:
    """Lowercased word and punctuation tokens, each with its [start, end) character span"""
    return [Token(m.group().lower(), m.start(), m.end()) for m in TOKEN_PATTERN.finditer(text)]


def char_span_to_token_span(tokens: Sequence[Token], char_from: int, char_to: int) -> AspectSpan:
    overlapping = [i for i, token in enumerate(tokens) if token.start < char_to and token.end > char_from]
    if not overlapping:
        raise AlignmentError(f"character span [{char_from}, {char_to}) overlaps no token")
    return AspectSpan(overlapping[0], overlapping[-1], char_from, char_to)


class Vocab:
    def __init__(self, tokens: Sequence[str]) -> None:
        self.tokens = [*RESERVED_TOKENS, *tokens]
        self.ids = {token: index for index, token in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise DatasetFormatError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.ids.get(token, UNK_ID) for token in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def to_text(self) -> str:
        return "\n".join(self.tokens) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Vocab":
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if tuple(lines[: len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise DatasetFormatError(f"vocabulary must start with {', '.join(RESERVED_TOKENS)}")
        return cls(lines[len(RESERVED_TOKENS) :])


def build_vocab(corpus: Iterable[Sequence[str]], min_count: int = 1) -> Vocab:
    """Tokens ordered by descending frequency, ties broken lexicographically"""
    if min_count < 1:
        raise ContractError(f"min_count must be >= 1, got {min_count}")

    counts: Counter[str] = Counter()
    for sentence in corpus:
        counts.update(sentence)
    kept = sorted((token for token, count in counts.items() if count >= min_count), key=lambda t: (-counts[t], t))
    kept = [token for token in kept if token not in RESERVED_TOKENS]
    logger.debug(f"vocabulary: {len(kept)} of {len(counts)} distinct tokens kept at min_count={min_count}")
    return Vocab(kept)


def encode_annotation(annotation: RawAnnotation, vocab: Vocab) -> Example:
    tokens = tokenize(annotation.sentence)
    span = char_span_to_token_span(tokens, annotation.char_from, annotation.char_to)
    return Example(tuple(vocab.encode(t.text for t in tokens)), span, annotation.polarity)


def make_examples(annotations: Iterable[RawAnnotation], vocab: Vocab) -> list[Example]:
    """Encode three-class annotations; conflict annotations are dropped"""
    examples, dropped = [], 0
    for annotation in annotations:
        if annotation.polarity is Polarity.CONFLICT:
            dropped += 1
            continue
        examples.append(encode_annotation(annotation, vocab))

    if dropped:
        logger.debug(f"dropped {dropped} conflict annotations")
    return examples


def tokenized_corpus(annotations: Iterable[RawAnnotation]) -> list[list[str]]:
    return [[t.text for t in tokenize(a.sentence)] for a in annotations if a.polarity is not Polarity.CONFLICT]


@dataclass
class Batch:
    tokens: np.ndarray
    pad_mask: np.ndarray
    spans: list[AspectSpan]
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.spans)


def pad_batch(examples: Sequence[Example]) -> Batch:
    width = max(len(e.token_ids) for e in examples)
    tokens = np.full((len(examples), width), PAD_ID, dtype=np.int64)
    pad_mask = np.zeros((len(examples), width))
    for row, example in enumerate(examples):
        tokens[row, : len(example.token_ids)] = example.token_ids
        pad_mask[row, : len(example.token_ids)] = 1.0

    labels = np.array([e.label.class_index for e in examples], dtype=np.int64)
    return Batch(tokens, pad_mask, [e.span for e in examples], labels)


def make_batches(examples: Sequence[Example], batch_size: int, seed: int | None = None) -> list[Batch]:
    """Right-padded batches; with a seed the example order is shuffled first"""
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")

    order = np.arange(len(examples))
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(examples))
    return [
        pad_batch([examples[i] for i in order[start : start + batch_size]])
        for start in range(0, len(examples), batch_size)
    ]


def split_holdout(examples: Sequence[Example], fraction: float, seed: int) -> tuple[list[Example], list[Example]]:
    """Seeded (train, held-out) split; the held-out part is round(fraction * n) examples"""
    held = int(round(fraction * len(examples)))
    if held == 0:
        return list(examples), []

    order = np.random.default_rng(seed).permutation(len(examples))
    held_out = sorted(order[:held].tolist())
    held_set = set(held_out)
    return [e for i, e in enumerate(examples) if i not in held_set], [examples[i] for i in held_out]


def dataset_stats(annotations: Iterable[RawAnnotation]) -> LabelCounts:
    counts = Counter(a.polarity for a in annotations)
    return LabelCounts(counts[Polarity.POSITIVE], counts[Polarity.NEGATIVE], counts[Polarity.NEUTRAL])
