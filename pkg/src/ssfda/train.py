"""SGD with momentum, supervised pretraining, and the two-step target adaptation.

Adaptation entry points take image stacks only (N×3×h×w), never labels, so the
target ground truth cannot leak into training.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .curriculum import ENTROPY_MODES, CurriculumPlan
from .segnet import ModelParams, NetConfig, bce_loss, forward, init_params

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SgdConfig:
    lr: float = 2.5e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 8
    epochs: int = 30
    loss_cell: int = 8

    def __post_init__(self):
        if self.lr < 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError(f"invalid SGD settings {self}")
        if self.batch_size < 1 or self.epochs < 0 or self.loss_cell < 1:
            raise ValueError(f"invalid batch size / epochs / loss cell {self}")


@dataclass(frozen=True)
class JitterConfig:
    """Per-image photometric jitter applied to pretraining batches.

    Brightness shifts by U(-brightness, brightness), contrast scales about the
    image mean by U(1 - contrast, 1 + contrast), and saturation blends toward
    the per-pixel gray by a factor U(1 - saturation, 1).
    """
    brightness: float = 0.1
    contrast: float = 0.2
    saturation: float = 0.7

    def __post_init__(self):
        if not (0 <= self.brightness and 0 <= self.contrast < 1 and 0 <= self.saturation <= 1):
            raise ValueError(f"invalid jitter ranges {self}")


def color_jitter(images: np.ndarray, rng: np.random.Generator, cfg: JitterConfig) -> np.ndarray:
    n = len(images)
    shape = (n, 1, 1, 1)
    a = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast, shape)
    b = rng.uniform(-cfg.brightness, cfg.brightness, shape)
    s = rng.uniform(1 - cfg.saturation, 1.0, shape)
    mean = images.mean(axis=(1, 2, 3), keepdims=True)
    x = (images - mean) * a + mean + b
    gray = x.mean(axis=1, keepdims=True)
    return np.clip(gray + (x - gray) * s, 0.0, 1.0)


def supervised_objective(p: Tensor, y: np.ndarray, cfg: SgdConfig) -> Tensor:
    """Summed BCE over the coarse loss grid, averaged over the images in the batch."""
    return ag.scale(bce_loss(p, y), 1.0 / cfg.loss_cell ** 2)


@dataclass(frozen=True)
class AdaptConfig:
    tau: float = 0.5
    step1_epochs: int = 2
    step2_epochs: int = 3
    entropy_mode: str = "paper"
    m: int = 4
    iterative_rounds: int = 3
    iterative_inner_epochs: int = 1

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ValueError(f"tau must be in (0, 1), got {self.tau}")
        if self.entropy_mode not in ENTROPY_MODES:
            raise ValueError(f"entropy_mode must be one of {ENTROPY_MODES}")
        if self.m < 1 or min(self.step1_epochs, self.step2_epochs, self.iterative_rounds, self.iterative_inner_epochs) < 0:
            raise ValueError(f"invalid adaptation budget {self}")


@dataclass
class TrainState:
    params: ModelParams
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    seed: int = 0
    losses: list[float] = field(default_factory=list)

    def __post_init__(self):
        for k, t in self.params.items():
            self.velocity.setdefault(k, np.zeros_like(t.values))


def sgd_update(state: TrainState, grads: dict[str, np.ndarray], cfg: SgdConfig) -> TrainState:
    """v <- momentum*v + (g + wd*w);  w <- w - lr*v, applied in place."""
    for name, t in state.params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(t.values)
        if g.shape != t.shape:
            raise ag.ShapeError(f"sgd_update: grad for {name} has shape {g.shape}, param {t.shape}")
        v = state.velocity[name]
        v *= cfg.momentum
        v += g + cfg.weight_decay * t.values
        t.values -= cfg.lr * v
    state.step += 1
    return state


def _grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {k: t.grad for k, t in params.items() if t.grad is not None}


def _step(state: TrainState, loss: Tensor, cfg: SgdConfig) -> float:
    state.params.zero_grad()
    ag.backward(loss)
    sgd_update(state, _grads(state.params), cfg)
    state.params.zero_grad()
    value = loss.item()
    state.losses.append(value)
    return value


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


# ---------------------------------------------------------------- stage 1


@dataclass
class PretrainResult:
    params: ModelParams
    epoch_losses: list[float]


def pretrain_supervised(images: np.ndarray, labels: np.ndarray, net_cfg: NetConfig, sgd_cfg: SgdConfig,
                        seed: int, init: ModelParams | None = None,
                        jitter: JitterConfig | None = None) -> PretrainResult:
    """Mini-batch SGD on the summed per-image BCE, averaged over each batch.

    With ``jitter`` set, every batch is photometrically perturbed from its own
    seeded stream; labels are untouched.
    """
    if len(images) == 0:
        raise ValueError("pretrain_supervised: empty dataset")
    params = init.copy() if init is not None else init_params(net_cfg, seed)
    state = TrainState(params, seed=seed)
    rng = np.random.default_rng([seed, 0x5EED, 1])
    jrng = np.random.default_rng([seed, 0x5EED, 2])
    y = labels[:, None].astype(np.float64)
    epoch_losses = []
    for epoch in range(sgd_cfg.epochs):
        losses = []
        for idx in _batches(len(images), sgd_cfg.batch_size, rng):
            x = images[idx] if jitter is None else color_jitter(images[idx], jrng, jitter)
            p = forward(params, Tensor(x), net_cfg)
            losses.append(_step(state, supervised_objective(p, y[idx], sgd_cfg), sgd_cfg))
        epoch_losses.append(float(np.mean(losses)))
        log.info("pretrain epoch %d loss %.4f", epoch, epoch_losses[-1])
    return PretrainResult(params, epoch_losses)


# ---------------------------------------------------------------- stage 2


def entropy_loss(p: Tensor) -> Tensor:
    """Mean over pixels (and images) of -P log P on clamped probabilities."""
    pc = ag.clamp_prob(p)
    return ag.scale(ag.mean(ag.mul(pc, ag.log(pc))), -1.0)


def pseudo_labels(p: np.ndarray, tau: float) -> np.ndarray:
    return (p >= tau).astype(np.float64)


def _phase_rng(seed: int, phase: int, batch_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0xADA, phase, batch_index])


def step1_entropy_min(params: ModelParams, images: np.ndarray, net_cfg: NetConfig, sgd_cfg: SgdConfig,
                      cfg: AdaptConfig, seed: int = 0, batch_index: int = 0) -> ModelParams:
    if len(images) == 0:
        raise ValueError("step1_entropy_min: empty batch")
    params = params.copy()
    state = TrainState(params, seed=seed)
    rng = _phase_rng(seed, 1, batch_index)
    for _ in range(cfg.step1_epochs):
        for idx in _batches(len(images), sgd_cfg.batch_size, rng):
            _step(state, entropy_loss(forward(params, Tensor(images[idx]), net_cfg)), sgd_cfg)
    return params


def step2_online_selftrain(params: ModelParams, images: np.ndarray, net_cfg: NetConfig, sgd_cfg: SgdConfig,
                           cfg: AdaptConfig, seed: int = 0, batch_index: int = 0,
                           on_labels: Callable[[int, np.ndarray, np.ndarray], None] | None = None) -> ModelParams:
    """Pseudo labels come from the forward pass that is about to be trained on.

    ``on_labels(step, batch_indices, labels)`` observes every label batch.
    """
    if len(images) == 0:
        raise ValueError("step2_online_selftrain: empty batch")
    params = params.copy()
    state = TrainState(params, seed=seed)
    rng = _phase_rng(seed, 2, batch_index)
    for _ in range(cfg.step2_epochs):
        for idx in _batches(len(images), sgd_cfg.batch_size, rng):
            p = forward(params, Tensor(images[idx]), net_cfg)
            y = pseudo_labels(p.values, cfg.tau)
            if on_labels is not None:
                on_labels(state.step, idx, y)
            _step(state, supervised_objective(p, y, sgd_cfg), sgd_cfg)
    return params


def iterative_selftrain_baseline(params: ModelParams, images: np.ndarray, net_cfg: NetConfig,
                                 sgd_cfg: SgdConfig, cfg: AdaptConfig, seed: int = 0, batch_index: int = 0,
                                 on_labels: Callable[[int, np.ndarray, np.ndarray], None] | None = None) -> ModelParams:
    """Round-wise self-training: labels are frozen at the start of each round."""
    if len(images) == 0:
        raise ValueError("iterative_selftrain_baseline: empty batch")
    params = params.copy()
    state = TrainState(params, seed=seed)
    rng = _phase_rng(seed, 3, batch_index)
    for _ in range(cfg.iterative_rounds):
        frozen = pseudo_labels(_predict_batched(params, images, net_cfg), cfg.tau)
        for _ in range(cfg.iterative_inner_epochs):
            for idx in _batches(len(images), sgd_cfg.batch_size, rng):
                if on_labels is not None:
                    on_labels(state.step, idx, frozen[idx])
                p = forward(params, Tensor(images[idx]), net_cfg)
                _step(state, supervised_objective(p, frozen[idx], sgd_cfg), sgd_cfg)
    return params


def _predict_batched(params: ModelParams, images: np.ndarray, net_cfg: NetConfig, bs: int = 32) -> np.ndarray:
    frozen = params.copy(requires_grad=False)
    return np.concatenate([forward(frozen, Tensor(images[i:i + bs]), net_cfg).values for i in range(0, len(images), bs)])


@dataclass
class BatchSnapshot:
    index: int
    scene_ids: list[int]
    init_digest: str
    step1_digest: str
    final_digest: str
    entropy_before: float
    entropy_after_step1: float
    entropy_after_step2: float
    metrics_after_step1: dict | None = None
    metrics_after_step2: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _mean_entropy(params: ModelParams, images: np.ndarray, net_cfg: NetConfig, mode: str) -> float:
    from .curriculum import pixel_entropy

    return float(pixel_entropy(_predict_batched(params, images, net_cfg), mode).mean())


def run_curriculum(pretrained: ModelParams, plan: CurriculumPlan, images: np.ndarray, net_cfg: NetConfig,
                   sgd_cfg: SgdConfig, cfg: AdaptConfig, seed: int = 0, selftrain: str = "online",
                   monitor: Callable[[ModelParams], dict] | None = None) -> tuple[ModelParams, list[BatchSnapshot]]:
    """Step 1 then Step 2 on each plan batch in order, carrying weights forward.

    ``images`` is indexed by the scene ids in ``plan``. ``monitor`` (optional)
    maps params to a metrics dict recorded after each step.
    """
    if plan.m == 0:
        raise ValueError("run_curriculum: empty plan")
    if selftrain not in ("online", "iterative"):
        raise ValueError(f"selftrain must be 'online' or 'iterative', got {selftrain!r}")
    step2 = step2_online_selftrain if selftrain == "online" else iterative_selftrain_baseline
    params = pretrained.copy()
    snapshots = []
    for i, ids in enumerate(plan.batches):
        batch = images[np.asarray(ids)]
        init_digest = params.digest()
        before = _mean_entropy(params, batch, net_cfg, cfg.entropy_mode)
        p1 = step1_entropy_min(params, batch, net_cfg, sgd_cfg, cfg, seed, i)
        snap_mid = monitor(p1) if monitor else None
        p2 = step2(p1, batch, net_cfg, sgd_cfg, cfg, seed, i)
        snapshots.append(BatchSnapshot(
            index=i,
            scene_ids=list(ids),
            init_digest=init_digest,
            step1_digest=p1.digest(),
            final_digest=p2.digest(),
            entropy_before=before,
            entropy_after_step1=_mean_entropy(p1, batch, net_cfg, cfg.entropy_mode),
            entropy_after_step2=_mean_entropy(p2, batch, net_cfg, cfg.entropy_mode),
            metrics_after_step1=snap_mid,
            metrics_after_step2=monitor(p2) if monitor else None,
        ))
        log.info("curriculum batch %d/%d (%d images) done", i + 1, plan.m, len(ids))
        params = p2
    return params, snapshots
