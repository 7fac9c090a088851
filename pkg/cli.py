#! /usr/bin/env python3
import logging
import re
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import NoReturn

import typer
from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.markup import escape
from rich.table import Table

from deberta_lcf.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from deberta_lcf.config import RunConfig
from deberta_lcf.data import (
    build_vocab,
    char_span_to_token_span,
    dataset_stats,
    load_annotations,
    make_examples,
    tokenize,
    tokenized_corpus,
)
from deberta_lcf.exceptions import CheckpointError, ConfigError, ContractError, DatasetError
from deberta_lcf.lcf import compute_srd
from deberta_lcf.model import AttentionTrace, build, forward_example, predict
from deberta_lcf.training import Metrics, evaluate, majority_baseline, train, write_history
from deberta_lcf.types import CLASS_LABELS, DatasetFormat, Token
from deberta_lcf.utils import format_key_value_text, parse_key_value_text, write_columns_csv, write_matrix_csv

EXIT_USAGE = 2
EXIT_CHECKPOINT = 3
EXIT_INPUT = 4

app = typer.Typer(help="DeBERTa-LCF aspect sentiment classifier")
console = Console(soft_wrap=True, highlight=False)
err_console = Console(stderr=True, soft_wrap=True, highlight=False)

logger = logging.getLogger(__name__)


@app.callback()
def main(verbose: bool = typer.Option(False, "--verbose", "-v", help="Log debug output to stderr")) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(message)s",
        handlers=[RichHandler(console=err_console, show_path=False)],
        force=True,
    )


def _fail(message: str, code: int) -> NoReturn:
    err_console.print(f"[red]error:[/red] {escape(message)}")
    raise typer.Exit(code)


@contextmanager
def _exit_codes() -> Iterator[None]:
    """Translate library errors into the command exit codes"""
    try:
        yield
    except (ConfigError, ValidationError) as exc:
        _fail(str(exc), EXIT_USAGE)
    except CheckpointError as exc:
        _fail(f"checkpoint: {exc}", EXIT_CHECKPOINT)
    except (DatasetError, ContractError) as exc:
        _fail(str(exc), EXIT_INPUT)


def _require_file(path: Path, what: str) -> None:
    if not path.is_file():
        _fail(f"{what} not found: {path}", EXIT_USAGE)


def _print_metrics(metrics: Metrics, prefix: str = "") -> None:
    for line in metrics.as_lines():
        console.print(f"{prefix}{line}")


def _metrics_table(metrics: Metrics) -> Table:
    table = Table(title="per-class scores")
    for column in ("class", "precision", "recall", "f1", "support"):
        table.add_column(column)
    for index, label in enumerate(CLASS_LABELS):
        table.add_row(
            label.value,
            f"{metrics.precision[index]:.4f}",
            f"{metrics.recall[index]:.4f}",
            f"{metrics.f1[index]:.4f}",
            str(int(metrics.confusion[index].sum())),
        )
    return table


@app.command()
def stats(
    path: Path = typer.Argument(..., help="Dataset file"),
    format: DatasetFormat = typer.Option(DatasetFormat.SEMEVAL, "--format", help="Dataset file format"),
) -> None:
    """Print the label counts of a dataset file"""
    _require_file(path, "dataset")
    with _exit_codes():
        counts = dataset_stats(load_annotations(path, format))
    console.print(
        f"positive {counts.positive}, negative {counts.negative}, neutral {counts.neutral}, total {counts.total}"
    )


@app.command("train")
def train_command(config: Path = typer.Option(..., "--config", help="Run configuration (key = value)")) -> None:
    """Train a model and write model.ckpt, history.jsonl and resolved.conf to the output directory"""
    _require_file(config, "config")
    with _exit_codes():
        run = RunConfig(**parse_key_value_text(config.read_text(encoding="utf-8")))
        run.check_paths()

        annotations = load_annotations(run.train_path, run.format)
        vocab = build_vocab(tokenized_corpus(annotations), run.min_count)
        examples = make_examples(annotations, vocab)
        model = build(run.build_model_config(len(vocab)))
        logger.info(f"training on {len(examples)} examples, vocabulary {len(vocab)}")

        result = train(model, examples, run.train_config())

        run.output_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, vocab, run.output_dir / "model.ckpt")
        write_history(run.output_dir / "history.jsonl", result.history)
        (run.output_dir / "resolved.conf").write_text(
            format_key_value_text(run.to_flat_dict(), header="resolved run configuration"), encoding="utf-8"
        )
        console.print(f"best_epoch={result.best_epoch}")
        console.print(f"output_dir={run.output_dir}")

        if run.test_path is not None:
            test_examples = make_examples(load_annotations(run.test_path, run.format), vocab)
            _print_metrics(evaluate(model, test_examples, run.batch_size), prefix="test.")
            console.print(f"test.majority_baseline={majority_baseline(test_examples):.4f}")


def _load(ckpt: Path) -> Checkpoint:
    _require_file(ckpt, "checkpoint")
    try:
        return load_checkpoint(ckpt)
    except CheckpointError as exc:
        _fail(f"checkpoint: {exc}", EXIT_CHECKPOINT)


@app.command("eval")
def eval_command(
    ckpt: Path = typer.Option(..., "--ckpt", help="Checkpoint file"),
    dataset: Path = typer.Option(..., "--dataset", help="Dataset file"),
    format: DatasetFormat = typer.Option(DatasetFormat.SEMEVAL, "--format", help="Dataset file format"),
    table: bool = typer.Option(False, "--table", help="Also render the per-class scores as a table"),
) -> None:
    """Print accuracy, macro-F1 and per-class scores as key=value lines"""
    checkpoint = _load(ckpt)
    _require_file(dataset, "dataset")
    with _exit_codes():
        metrics = evaluate(checkpoint.model, make_examples(load_annotations(dataset, format), checkpoint.vocab))
    _print_metrics(metrics)
    if table:
        err_console.print(_metrics_table(metrics))


def _locate_aspect(text: str, aspect: str) -> tuple[list[Token], int, int]:
    """Tokens of `text` and the character span of the first (case-insensitive) occurrence of `aspect`"""
    if not aspect.strip():
        _fail("aspect must not be empty", EXIT_USAGE)
    matches = list(re.finditer(re.escape(aspect), text, re.IGNORECASE))
    if not matches:
        _fail(f"aspect {aspect!r} not found in text", EXIT_INPUT)

    first = matches[0]
    if len(matches) > 1:
        console.print(f"note=aspect occurs {len(matches)} times, using the first at character {first.start()}")
    return tokenize(text), first.start(), first.end()


@app.command("predict")
def predict_command(
    ckpt: Path = typer.Option(..., "--ckpt", help="Checkpoint file"),
    text: str = typer.Option(..., "--text", help="Sentence"),
    aspect: str = typer.Option(..., "--aspect", help="Aspect term occurring in the sentence"),
) -> None:
    """Print the predicted polarity of `aspect` and the three class probabilities"""
    checkpoint = _load(ckpt)
    tokens, start, end = _locate_aspect(text, aspect)
    with _exit_codes():
        span = char_span_to_token_span(tokens, start, end)
        label, probs = predict(checkpoint.model, checkpoint.vocab.encode(t.text for t in tokens), span)

    console.print(f"label={label.value}")
    for index, polarity in enumerate(CLASS_LABELS):
        console.print(f"{polarity.value}={probs[index]:.6f}")


@app.command("dump-attention")
def dump_attention(
    ckpt: Path = typer.Option(..., "--ckpt", help="Checkpoint file"),
    text: str = typer.Option(..., "--text", help="Sentence"),
    aspect: str = typer.Option(..., "--aspect", help="Aspect term occurring in the sentence"),
    out: Path = typer.Option(..., "--out", help="Output directory for the CSV files"),
) -> None:
    """Write attention weights per branch, layer and head, the SRD profile and the LCF vector as CSV"""
    checkpoint = _load(ckpt)
    model = checkpoint.model
    tokens, start, end = _locate_aspect(text, aspect)
    with _exit_codes():
        span = char_span_to_token_span(tokens, start, end)
        trace = AttentionTrace()
        forward_example(model, checkpoint.vocab.encode(t.text for t in tokens), span, trace=trace)

    words = [t.text for t in tokens]
    local_labels = ["[CLS]", *words, "[SEP]"]
    global_labels = [*local_labels, *words[span.token_start : span.token_end + 1], "[SEP]"]

    out.mkdir(parents=True, exist_ok=True)
    written = 0
    for branch, record, labels in (
        ("global", trace.global_, global_labels),
        ("local", trace.local, local_labels),
        ("fusion", trace.fusion, local_labels),
    ):
        for layer, heads in enumerate(record):
            for head, weights in enumerate(heads):
                write_matrix_csv(out / f"{branch}_layer{layer}_head{head}.csv", weights, labels, labels)
                written += 1

    write_columns_csv(out / "srd.csv", {"srd": list(compute_srd(len(tokens), span).values)}, words)
    assert trace.srd is not None and trace.lcf_vector is not None
    write_columns_csv(
        out / "lcf.csv",
        {"srd": list(trace.srd.values), model.config.mode.value: trace.lcf_vector.tolist()},
        local_labels,
    )
    console.print(f"wrote {written} attention matrices, srd.csv and lcf.csv to {out}")


if __name__ == "__main__":
    app()
