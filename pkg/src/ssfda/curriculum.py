"""Entropy scoring of unlabeled target images and curriculum batch plans."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autograd import CLAMP_EPS
from .segnet import ModelParams, NetConfig, predict

ENTROPY_MODES = ("paper", "binary")


@dataclass(frozen=True)
class EntropyScore:
    scene_id: int
    score: float


@dataclass
class CurriculumPlan:
    batches: list[list[int]]
    scores: dict[int, float] = field(default_factory=dict)

    @property
    def m(self) -> int:
        return len(self.batches)

    def scene_ids(self) -> list[int]:
        return [i for b in self.batches for i in b]

    def to_json(self) -> str:
        doc = {"m": self.m, "batches": self.batches}
        if self.scores:
            doc["scores"] = [[self.scores[i] for i in b] for b in self.batches]
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CurriculumPlan":
        doc = json.loads(text)
        batches = [list(map(int, b)) for b in doc["batches"]]
        scores = {}
        for b, s in zip(batches, doc.get("scores", [])):
            scores.update(zip(b, s))
        return cls(batches, scores)


def pixel_entropy(p: np.ndarray, mode: str = "paper") -> np.ndarray:
    p = np.clip(p, CLAMP_EPS, 1.0 - CLAMP_EPS)
    if mode == "paper":
        return -p * np.log(p)
    if mode == "binary":
        return -(p * np.log(p) + (1.0 - p) * np.log(1.0 - p))
    raise ValueError(f"entropy mode must be one of {ENTROPY_MODES}, got {mode!r}")


def prediction_entropy(p, mode: str = "paper") -> float:
    """Per-pixel mean entropy (nats) of a road-probability map."""
    arr = p.values if hasattr(p, "values") else np.asarray(p)
    return float(pixel_entropy(arr, mode).mean())


def score_dataset(params: ModelParams, images: np.ndarray, cfg: NetConfig, ids: Sequence[int] | None = None,
                  mode: str = "paper") -> list[EntropyScore]:
    ids = list(range(len(images))) if ids is None else list(ids)
    probs = predict(params, images, cfg)
    return [EntropyScore(i, prediction_entropy(p, mode)) for i, p in zip(ids, probs)]


def sort_and_partition(scores: Sequence[EntropyScore], m: int) -> CurriculumPlan:
    """Ascending-entropy order split into ``m`` contiguous, near-equal batches.

    Ties break on scene id; the first ``n % m`` batches take the extra element.
    """
    n = len(scores)
    if m < 1 or m > n:
        raise ValueError(f"need 1 <= m <= {n} scenes, got m={m}")
    ordered = sorted(scores, key=lambda s: (s.score, s.scene_id))
    base, extra = divmod(n, m)
    batches, start = [], 0
    for i in range(m):
        size = base + (1 if i < extra else 0)
        batches.append([s.scene_id for s in ordered[start:start + size]])
        start += size
    return CurriculumPlan(batches, {s.scene_id: s.score for s in scores})


def plan_from_severity_labels(groups: Sequence[Sequence[int]]) -> CurriculumPlan:
    """Use an externally known easy-to-hard grouping verbatim."""
    if not groups:
        raise ValueError("no groups given")
    seen: set[int] = set()
    for g in groups:
        if not g:
            raise ValueError("empty severity group")
        overlap = seen.intersection(g)
        if overlap or len(set(g)) != len(g):
            raise ValueError(f"severity groups overlap on {sorted(overlap) or 'duplicate ids'}")
        seen.update(g)
    return CurriculumPlan([list(g) for g in groups])
