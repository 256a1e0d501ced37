"""
Utility functions for the genscl toolkit.
"""

import csv
import hashlib
import io
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError

PathLike = Union[str, Path]


def parse_key_value_text(text: str) -> Dict[str, str]:
    """
    Parse a flat ``key=value`` configuration text.

    Blank lines and lines starting with ``#`` are ignored. Keys may use
    dashes or underscores; they are normalised to underscores.

    Raises:
        ConfigError: On a line without ``=`` or a repeated key.
    """
    values: Dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"Line {line_no}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip().replace("-", "_")
        if key in values:
            raise ConfigError(f"Line {line_no}: duplicate key '{key}'")
        values[key] = value.strip()
    return values


def format_config_value(value: Any) -> str:
    """Render a config value so that re-parsing yields the same value."""
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(str(item) for item in value)
    return str(value)


def ensure_parent(path: PathLike) -> Path:
    """Create the parent directory of a path if needed."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    return target


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[str]]) -> None:
    """Write a comma-separated file with a header row and '\\n' line endings."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    ensure_parent(path).write_text(buffer.getvalue(), encoding="utf-8")


def read_csv(path: PathLike) -> Tuple[List[str], List[List[str]]]:
    """Read a CSV file into (header, rows)."""
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{path}: empty CSV file")
        return header, [row for row in reader if row]


def array_checksum(*arrays: np.ndarray) -> str:
    """SHA-256 over the little-endian float64 bytes of the given arrays."""
    digest = hashlib.sha256()
    for array in arrays:
        digest.update(np.ascontiguousarray(array, dtype="<f8").tobytes())
    return digest.hexdigest()
