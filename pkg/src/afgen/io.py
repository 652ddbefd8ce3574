"""File formats: datasets, samples, chart-state sidecars, manifests.

All writers go through :func:`atomic_write_bytes` (temp file + rename).
"""

import json
import os
import platform
import re
import struct
import subprocess
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

_STATES_MAGIC = b"AFGX"
_HEADER_RE = re.compile(r"^#\s*n\s*=\s*(\d+)\s+c\s*=\s*(\d+)\s*$")


def atomic_write_bytes(path, data):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


class DatasetFormatError(DomainError):
    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass
class Dataset:
    """Label configurations sharing ``(n, c)``; labels are 1-based."""

    n: int
    c: int
    records: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        self.records = np.asarray(self.records, dtype=int).reshape(-1, self.n)
        if self.records.shape[0] == 0:
            raise DatasetFormatError("dataset is empty")
        if self.records.min() < 1 or self.records.max() > self.c:
            raise DatasetFormatError(f"labels must lie in 1..{self.c}")

    def __len__(self):
        return self.records.shape[0]


def format_labels(records, n, c):
    lines = [f"# n={n} c={c}"]
    lines += [" ".join(str(int(a)) for a in row) for row in np.asarray(records).reshape(-1, n)]
    return "\n".join(lines) + "\n"


def parse_labels(text):
    """Parse the plain-text dataset format into ``(n, c, records)``.

    The first non-blank line must be ``# n=<n> c=<c>``; each further
    non-blank line holds ``n`` space-separated 1-based class indices.
    """
    n = c = None
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if n is None:
            m = _HEADER_RE.match(line)
            if not m:
                raise DatasetFormatError("expected header '# n=<n> c=<c>'", lineno)
            n, c = int(m.group(1)), int(m.group(2))
            continue
        if line.startswith("#"):
            continue
        try:
            row = [int(tok) for tok in line.split()]
        except ValueError:
            raise DatasetFormatError(f"non-integer label in {line!r}", lineno) from None
        if len(row) != n:
            raise DatasetFormatError(f"expected {n} labels, got {len(row)}", lineno)
        if min(row) < 1 or max(row) > c:
            raise DatasetFormatError(f"labels must lie in 1..{c}", lineno)
        rows.append(row)
    if n is None:
        raise DatasetFormatError("missing header '# n=<n> c=<c>'")
    return n, c, np.array(rows, dtype=int).reshape(-1, n)


def parse_dataset(text, provenance=""):
    n, c, records = parse_labels(text)
    return Dataset(n, c, records, provenance)


def load_dataset(path):
    with open(path, encoding="utf-8") as fh:
        return parse_dataset(fh.read(), provenance=os.fspath(path))


def save_dataset(path, dataset):
    atomic_write_text(path, format_labels(dataset.records, dataset.n, dataset.c))


def load_samples(path):
    """Read a samples file (dataset format, possibly with zero records)."""
    with open(path, encoding="utf-8") as fh:
        return parse_labels(fh.read())


def states_to_bytes(states):
    states = np.asarray(states, dtype=float)
    count, n, c = states.shape
    return _STATES_MAGIC + struct.pack("<III", count, n, c) + states.astype("<f8").tobytes()


def states_from_bytes(data):
    if len(data) < 16 or data[:4] != _STATES_MAGIC:
        raise DomainError("not an AFGX chart-state file")
    count, n, c = struct.unpack("<III", data[4:16])
    arr = np.frombuffer(data[16:], dtype="<f8")
    if arr.size != count * n * c:
        raise DomainError("AFGX payload size does not match header")
    return arr.astype(float).reshape(count, n, c)


def code_version():
    from . import __version__

    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=os.path.dirname(__file__), capture_output=True, text=True, timeout=5,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{__version__}+{rev}" if rev else __version__


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    outputs: dict = field(default_factory=dict)
    code_version: str = field(default_factory=code_version)
    started: float = field(default_factory=time.time)
    wall_seconds: float = 0.0

    def finish(self, path):
        self.wall_seconds = time.time() - self.started
        doc = {
            "command": self.command,
            "config": self.config,
            "seeds": self.seeds,
            "outputs": self.outputs,
            "code_version": self.code_version,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "started_unix": self.started,
            "wall_seconds": self.wall_seconds,
        }
        atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")
        return doc


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)
