import re
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Any

import numpy as np

from .exceptions import ConfigError

CSV_FLOAT_FORMAT = "%.17g"
COMMENT_PATTERN = re.compile(r"(?:^|\s)#")


def parse_key_value_text(text: str) -> dict[str, str]:
    """
    Parse flat `key = value` text; blank lines are ignored.

    `#` starts a comment at the beginning of a line or after whitespace, so values such as
    `data/run#2.xml` are kept whole.
    """
    values: dict[str, str] = {}
    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        comment = COMMENT_PATTERN.search(raw_line)
        line = (raw_line[: comment.start()] if comment else raw_line).strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {raw_line.strip()!r}")

        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {line_no}: empty key")
        if key in values:
            raise ConfigError(f"line {line_no}: duplicate key {key!r}")
        values[key] = value

    return values


def format_key_value_text(values: Mapping[str, Any], header: str | None = None) -> str:
    lines = [f"# {header}"] if header else []
    lines.extend(f"{key} = {value}" for key, value in values.items())
    return "\n".join(lines) + "\n"


def write_matrix_csv(path: Path, matrix: np.ndarray, row_labels: Sequence[str], col_labels: Sequence[str]) -> None:
    """Write a labelled matrix as CSV with '.' decimals and '\\n' line endings"""
    import pandas as pd

    frame = pd.DataFrame(matrix, index=list(row_labels), columns=list(col_labels))
    frame.to_csv(path, float_format=CSV_FLOAT_FORMAT, lineterminator="\n", index_label="token")


def write_columns_csv(path: Path, columns: Mapping[str, Sequence[Any]], row_labels: Sequence[str]) -> None:
    import pandas as pd

    frame = pd.DataFrame(dict(columns), index=list(row_labels))
    frame.to_csv(path, float_format=CSV_FLOAT_FORMAT, lineterminator="\n", index_label="token")
