"""Task-free routing: match queries to enrolled tasks by nearest fused
embedding.

A task's signature is the concatenation of its mean frozen image embedding
and its mean label-text embedding.  Queries are built the same way and
matched under a distance threshold; anything unmatched falls back to the
bare backbone.  The bank holds no trainable parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, StateError
from .numerics import as_matrix, require_finite

_METRICS = ("manhattan", "euclidean")


@dataclass
class MatchResult:
    matched: bool
    task: int | None
    distance: float


def fused_embedding(img_emb, txt_emb) -> np.ndarray:
    """Concat(mean image embedding, mean text embedding)."""
    img = as_matrix(img_emb)
    txt = as_matrix(txt_emb)
    if img.shape[0] == 0 or txt.shape[0] == 0:
        raise DimensionError("fused embedding needs at least one image and one text row")
    require_finite("image embeddings", img)
    require_finite("text embeddings", txt)
    return np.concatenate([img.mean(axis=0), txt.mean(axis=0)])


@dataclass
class TaskBank:
    threshold: float
    metric: str = "manhattan"
    entries: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.threshold) or self.threshold < 0.0:
            raise ConfigError(f"task_bank.match_threshold: must be >= 0, got {self.threshold}")
        if self.metric not in _METRICS:
            raise ConfigError(f"task_bank.metric: unknown metric {self.metric!r}")

    def distance(self, a: np.ndarray, b: np.ndarray) -> float:
        if a.shape != b.shape:
            raise DimensionError(f"embedding shapes differ: {a.shape} vs {b.shape}")
        if self.metric == "manhattan":
            return float(np.abs(a - b).sum())
        return float(np.linalg.norm(a - b))

    def enroll(self, task: int, img_emb, txt_emb) -> np.ndarray:
        """Store (or deterministically overwrite) the task's signature."""
        f = fused_embedding(img_emb, txt_emb)
        if self.entries:
            width = next(iter(self.entries.values())).shape[0]
            if f.shape[0] != width:
                raise DimensionError(
                    f"signature width {f.shape[0]} does not match bank width {width}"
                )
        self.entries[task] = f
        return f

    def identify(self, img_emb, txt_emb) -> MatchResult:
        """Nearest enrolled task; matched iff distance <= threshold.  Ties go
        to the lower task id."""
        if not self.entries:
            raise StateError("task bank is empty; enroll at least one task first")
        q = fused_embedding(img_emb, txt_emb)
        best_task: int | None = None
        best_dist = np.inf
        for task in sorted(self.entries):
            d = self.distance(q, self.entries[task])
            if d < best_dist:
                best_task, best_dist = task, d
        if best_dist <= self.threshold:
            return MatchResult(matched=True, task=best_task, distance=best_dist)
        return MatchResult(matched=False, task=None, distance=best_dist)


def bank_to_payload(bank: TaskBank) -> dict:
    return {
        "threshold": bank.threshold,
        "metric": bank.metric,
        "entries": [
            {"task": task, "embedding": bank.entries[task].tolist()}
            for task in sorted(bank.entries)
        ],
    }


def bank_from_payload(payload: dict) -> TaskBank:
    bank = TaskBank(threshold=payload["threshold"], metric=payload["metric"])
    for item in payload["entries"]:
        bank.entries[item["task"]] = np.asarray(item["embedding"], dtype=np.float64)
    return bank
