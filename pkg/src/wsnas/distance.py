"""Symmetric task distance and the pairwise similarity matrix.

The distance is the cosine distance between element-wise normalized
embeddings a/(a+b) and b/(a+b).  Coordinates where a+b is zero contribute
the neutral value 0.5 to both normalized vectors (the x/(x+x) limit), which
keeps the distance defined and the common-scaling invariance intact.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .fim import TaskEmbedding

__all__ = ["d_sym", "SimilarityMatrix", "build_similarity_matrix"]


def _values(embedding) -> np.ndarray:
    if isinstance(embedding, TaskEmbedding):
        return embedding.values
    return np.asarray(embedding, dtype=np.float64)


def d_sym(a, b) -> float:
    """Cosine distance between element-wise normalized embeddings, in [0, 1]."""
    va, vb = _values(a), _values(b)
    if va.shape != vb.shape:
        raise ValueError(f"embedding lengths differ: {va.shape} vs {vb.shape}")
    if (va < 0).any() or (vb < 0).any():
        raise ValueError("embeddings must be non-negative")
    total = va + vb
    with np.errstate(invalid="ignore"):
        ua = np.where(total > 0, va / np.where(total > 0, total, 1.0), 0.5)
        ub = np.where(total > 0, vb / np.where(total > 0, total, 1.0), 0.5)
    norm = float(np.linalg.norm(ua) * np.linalg.norm(ub))
    if norm == 0.0:
        return 1.0
    cos = float(np.dot(ua, ub)) / norm
    return float(min(max(1.0 - cos, 0.0), 1.0))


@dataclass
class SimilarityMatrix:
    task_ids: list
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        n = len(self.task_ids)
        if self.values.shape != (n, n):
            raise ValueError(f"matrix shape {self.values.shape} does not fit {n} tasks")
        if len(set(self.task_ids)) != n:
            raise ValueError("task ids must be unique")
        if not np.allclose(self.values, self.values.T, atol=0):
            raise ValueError("similarity matrix must be symmetric")
        if np.abs(np.diag(self.values)).max(initial=0.0) != 0.0:
            raise ValueError("similarity matrix diagonal must be exactly zero")

    def distance(self, a: str, b: str) -> float:
        return float(self.values[self.task_ids.index(a), self.task_ids.index(b)])

    def most_similar(self, task_id: str) -> tuple:
        """Closest other task; ties resolve to the lexicographically smallest id."""
        if task_id not in self.task_ids:
            raise KeyError(f"unknown task id {task_id!r}")
        row = self.task_ids.index(task_id)
        candidates = [
            (float(self.values[row, col]), other)
            for col, other in enumerate(self.task_ids)
            if other != task_id
        ]
        if not candidates:
            raise ValueError("similarity matrix has a single task; nothing to select")
        dist, other = min(candidates, key=lambda item: (item[0], item[1]))
        return other, dist

    # -- CSV persistence (6-decimal fixed point) ------------------------------

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["task"] + list(self.task_ids))
        for i, task_id in enumerate(self.task_ids):
            writer.writerow([task_id] + [f"{v:.6f}" for v in self.values[i]])
        return out.getvalue()

    def save_csv(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv())
        return path

    @classmethod
    def from_csv(cls, text: str) -> "SimilarityMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        if len(rows) < 2:
            raise ValueError("similarity CSV needs a header row and at least one task row")
        task_ids = rows[0][1:]
        values = []
        for row in rows[1:]:
            if row[0] not in task_ids:
                raise ValueError(f"row id {row[0]!r} missing from the header")
            values.append([float(v) for v in row[1:]])
        matrix = np.asarray(values)
        order = [task_ids.index(row[0]) for row in rows[1:]]
        if order != list(range(len(task_ids))):
            raise ValueError("similarity CSV rows must appear in header order")
        return cls(task_ids=list(task_ids), values=matrix)

    @classmethod
    def load_csv(cls, path) -> "SimilarityMatrix":
        return cls.from_csv(Path(path).read_text())


def build_similarity_matrix(embeddings: Sequence[TaskEmbedding]) -> SimilarityMatrix:
    """All pairwise distances; requires a shared probe checksum."""
    if len(embeddings) < 2:
        raise ValueError("need at least 2 embeddings to build a similarity matrix")
    checksums = {e.probe_checksum for e in embeddings}
    if len(checksums) != 1:
        raise ValueError(f"embeddings come from different probes: {sorted(checksums)}")
    ids = [e.task_id for e in embeddings]
    n = len(ids)
    values = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            values[i, j] = values[j, i] = d_sym(embeddings[i], embeddings[j])
    return SimilarityMatrix(task_ids=ids, values=values)
