"""Matrix files, dataset manifests and hypothesis files."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


def format_matrix(x: np.ndarray) -> str:
    x = np.asarray(x, dtype=np.float64)
    lines = [f"{x.shape[0]} {x.shape[1]}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in x]
    return "\n".join(lines) + "\n"


def parse_matrix(text: str) -> np.ndarray:
    """First line ``T D``, then T lines of D floats."""
    lines = [l for l in text.splitlines() if l.strip()]
    if not lines:
        raise DataError("empty matrix file")
    try:
        T, D = (int(v) for v in lines[0].split())
    except ValueError:
        raise DataError("matrix header must be 'T D'") from None
    if len(lines) - 1 != T:
        raise DataError(f"matrix header says {T} rows, found {len(lines) - 1}")
    out = np.empty((T, D))
    for t, line in enumerate(lines[1:]):
        fields = line.split()
        if len(fields) != D:
            raise DataError(f"matrix row {t + 1}: expected {D} values, got {len(fields)}")
        try:
            out[t] = [float(v) for v in fields]
        except ValueError:
            raise DataError(f"matrix row {t + 1}: non-numeric value") from None
    return out


def write_matrix(x: np.ndarray, path) -> None:
    with open(path, "w") as f:
        f.write(format_matrix(x))


def read_matrix(path) -> np.ndarray:
    with open(path) as f:
        return parse_matrix(f.read())


@dataclass(frozen=True)
class Utterance:
    uid: str
    path: str
    label: int


def read_manifest(path) -> list[Utterance]:
    """``utt-id<TAB>path<TAB>label-id`` lines; relative paths resolve against the manifest."""
    base = Path(path).parent
    utts = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            fields = line.rstrip("\n").split("\t")
            if len(fields) != 3:
                raise DataError(f"{path}:{lineno}: expected utt-id, path and label separated by tabs")
            try:
                label = int(fields[2])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer label {fields[2]!r}") from None
            p = fields[1] if os.path.isabs(fields[1]) else str(base / fields[1])
            utts.append(Utterance(fields[0], p, label))
    return utts


def write_manifest(utts: list[Utterance], path, relative_to=None) -> None:
    with open(path, "w") as f:
        for u in utts:
            p = os.path.relpath(u.path, relative_to) if relative_to else u.path
            f.write(f"{u.uid}\t{p}\t{u.label}\n")


def load_dataset(utts: list[Utterance], num_commands: int | None = None) -> list[tuple[str, np.ndarray, int]]:
    out = []
    for u in utts:
        if num_commands is not None and not 0 <= u.label < num_commands:
            raise DataError(f"utterance {u.uid}: label {u.label} outside [0, {num_commands})")
        if not os.path.exists(u.path):
            raise DataError(f"utterance {u.uid}: missing file {u.path}")
        out.append((u.uid, read_matrix(u.path), u.label))
    return out
