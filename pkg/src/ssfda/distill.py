"""Few-image fine-tuning with a weight-space distillation penalty.

The fine-tuned weights are pulled toward a frozen anchor (the adapted model):

    L = BCE(k labeled images) + lam * distance(weights, anchor)

The distance averages over all parameter coordinates so ``lam`` keeps the same
meaning for any network size.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .segnet import ModelParams, NetConfig, forward
from .train import SgdConfig, TrainState, _batches, _step, supervised_objective

log = logging.getLogger(__name__)

DISTANCE_KINDS = ("mse", "l1")
MAX_K = 10


@dataclass(frozen=True)
class DistillConfig:
    lam: float = 1.0
    kind: str = "mse"
    k: int = 10
    epochs: int = 20
    sgd: SgdConfig = field(default_factory=lambda: SgdConfig(batch_size=5, loss_cell=32))

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.kind not in DISTANCE_KINDS:
            raise ValueError(f"distance kind must be one of {DISTANCE_KINDS}, got {self.kind!r}")
        if not 1 <= self.k <= MAX_K:
            raise ValueError(f"k must be in [1, {MAX_K}], got {self.k}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")


def model_distance(a: ModelParams, b: ModelParams, kind: str = "mse") -> Tensor:
    """Mean squared (or absolute) coordinate difference; gradient flows into ``a`` only."""
    if kind not in DISTANCE_KINDS:
        raise ValueError(f"distance kind must be one of {DISTANCE_KINDS}, got {kind!r}")
    if list(a) != list(b) or any(a[k].shape != b[k].shape for k in a):
        raise ag.ShapeError("model_distance: parameter layouts differ")
    n = a.n_coords()
    total: Tensor | None = None
    for name, t in a.items():
        diff = ag.sub(t, Tensor(b[name].values))
        term = ag.sum(ag.mul(diff, diff) if kind == "mse" else ag.abs(diff))
        total = term if total is None else ag.add(total, term)
    return ag.scale(total, 1.0 / n)


def relative_distance(a: ModelParams, b: ModelParams) -> float:
    """‖a − b‖ / ‖b‖ over the flattened coordinates."""
    fb = b.flat()
    return float(np.linalg.norm(a.flat() - fb) / max(np.linalg.norm(fb), 1e-300))


def pick_labeled(n: int, k: int, seed: int) -> list[int]:
    """k distinct indices drawn uniformly from range(n), sorted."""
    if not 1 <= k <= min(n, MAX_K):
        raise ValueError(f"cannot pick k={k} labeled images from {n}")
    rng = np.random.default_rng([seed, 0xF3E])
    return sorted(int(i) for i in rng.choice(n, size=k, replace=False))


@dataclass
class FinetuneResult:
    params: ModelParams
    epoch_losses: list[float]
    initial_ce: float
    final_ce: float


def _mean_ce(params: ModelParams, images: np.ndarray, y: np.ndarray, net_cfg: NetConfig, sgd: SgdConfig) -> float:
    frozen = params.copy(requires_grad=False)
    return float(supervised_objective(forward(frozen, Tensor(images), net_cfg), y, sgd).item())


def finetune_few(anchor: ModelParams, images: np.ndarray, labels: np.ndarray, net_cfg: NetConfig,
                 cfg: DistillConfig, seed: int = 0) -> FinetuneResult:
    """Fine-tune a copy of ``anchor`` on at most ``cfg.k`` labeled images.

    The anchor itself is never modified.
    """
    if len(images) == 0:
        raise ValueError("finetune_few: empty labeled set")
    if len(images) > cfg.k:
        raise ValueError(f"finetune_few: {len(images)} labeled images exceed k={cfg.k}")
    if len(images) != len(labels):
        raise ValueError("finetune_few: images and labels differ in count")
    frozen_anchor = anchor.copy(requires_grad=False)
    params = anchor.copy()
    state = TrainState(params, seed=seed)
    rng = np.random.default_rng([seed, 0xF3E, 1])
    y = labels[:, None].astype(np.float64)
    initial = _mean_ce(params, images, y, net_cfg, cfg.sgd)
    epoch_losses = []
    for epoch in range(cfg.epochs):
        losses = []
        for idx in _batches(len(images), cfg.sgd.batch_size, rng):
            loss = supervised_objective(forward(params, Tensor(images[idx]), net_cfg), y[idx], cfg.sgd)
            if cfg.lam > 0:
                loss = ag.add(loss, ag.scale(model_distance(params, frozen_anchor, cfg.kind), cfg.lam))
            losses.append(_step(state, loss, cfg.sgd))
        epoch_losses.append(float(np.mean(losses)))
        log.info("finetune epoch %d loss %.4f", epoch, epoch_losses[-1])
    return FinetuneResult(params, epoch_losses, initial, _mean_ce(params, images, y, net_cfg, cfg.sgd))
