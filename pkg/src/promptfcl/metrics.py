"""Accuracy matrix bookkeeping, average accuracy and average forgetting."""

from __future__ import annotations

import warnings

import numpy as np


class AccuracyMatrix:
    """Lower-triangular ``a[t][i]``: accuracy on task i after training stage t (1-based)."""

    def __init__(self, rows=()):
        self.rows: list[list[float]] = []
        for r in rows:
            self.append(r)

    def append(self, row):
        row = [float(v) for v in row]
        if len(row) != len(self.rows) + 1:
            raise ValueError(f"stage {len(self.rows) + 1} row must have {len(self.rows) + 1} entries, got {len(row)}")
        if any(not 0.0 <= v <= 1.0 for v in row):
            raise ValueError(f"accuracies must lie in [0, 1]: {row}")
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def __getitem__(self, t):
        return self.rows[t]

    def to_list(self) -> list:
        return [list(r) for r in self.rows]

    def as_array(self) -> np.ndarray:
        T = len(self.rows)
        out = np.full((T, T), np.nan)
        for t, r in enumerate(self.rows):
            out[t, : len(r)] = r
        return out


def _rows(M) -> list:
    rows = M.rows if isinstance(M, AccuracyMatrix) else [list(r) for r in M]
    if not rows:
        raise ValueError("empty accuracy matrix")
    return rows


def average_accuracy(M) -> float:
    final = _rows(M)[-1]
    return float(sum(final) / len(final))


def average_forgetting(M) -> float:
    """Mean over tasks i < T of (best a[t][i] for t in [i, T-1]) - a[T][i]."""
    rows = _rows(M)
    T = len(rows)
    if T < 2:
        warnings.warn("average forgetting needs at least two stages; reporting 0.0", stacklevel=2)
        return 0.0
    total = 0.0
    for i in range(T - 1):
        best = max(rows[t][i] for t in range(i, T - 1))
        total += best - rows[T - 1][i]
    return float(total / (T - 1))
