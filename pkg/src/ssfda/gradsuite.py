"""Finite-difference verification of every differentiable op and the full model."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor, grad_check
from .segnet import ModelParams, NetConfig, bce_loss, forward, init_params, self_attention

TOLERANCE = 1e-4
DEFAULT_SEEDS = 20

# Each builder maps an rng to (fn, inputs); fn returns a scalar Tensor.
Builder = Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[np.ndarray]]]


def _away_from(x: np.ndarray, points=(0.0,), margin: float = 0.05) -> np.ndarray:
    """Nudge entries that sit within ``margin`` of a kink."""
    x = x.copy()
    for p in points:
        near = np.abs(x - p) < margin
        x[near] = p + np.where(x[near] >= p, margin, -margin) * 2
    return x


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return ag.sum(ag.mul(out, Tensor(w)))


def _unary(op, sample=lambda r, s: r.standard_normal(s), shape=(3, 4)) -> Builder:
    def build(rng):
        x = sample(rng, shape)
        w = rng.standard_normal(op(Tensor(x)).shape)
        return (lambda t: _weighted(op(t), w)), [x]
    return build


def _binary(op, shape=(3, 4), b_shape=None) -> Builder:
    def build(rng):
        a = rng.standard_normal(shape)
        b = rng.standard_normal(b_shape or shape)
        w = rng.standard_normal(shape)
        return (lambda x, y: _weighted(op(x, y), w)), [a, b]
    return build


def _conv(stride: int, pad: int, bias: bool, batch: bool = False) -> Builder:
    def build(rng):
        x = rng.standard_normal((2, 2, 5, 5) if batch else (2, 5, 5))
        k = rng.standard_normal((3, 2, 3, 3))
        out_hw = ag.conv_output_size(5, 3, stride, pad)
        w = rng.standard_normal(((2,) if batch else ()) + (3, out_hw, out_hw))
        if bias:
            b = rng.standard_normal(3)
            return (lambda x_, k_, b_: _weighted(ag.conv2d(x_, k_, b_, stride=stride, pad=pad), w)), [x, k, b]
        return (lambda x_, k_: _weighted(ag.conv2d(x_, k_, stride=stride, pad=pad), w)), [x, k]
    return build


def _bilinear(factor: float) -> Builder:
    def build(rng):
        x = rng.standard_normal((2, 4, 6))
        out = (2, int(4 * factor), int(6 * factor))
        w = rng.standard_normal(out)
        return (lambda t: _weighted(ag.bilinear_resize(t, factor), w)), [x]
    return build


def _matmul(batch: bool) -> Builder:
    def build(rng):
        lead = (2,) if batch else ()
        a = rng.standard_normal(lead + (4, 5))
        b = rng.standard_normal(lead + (5, 3))
        w = rng.standard_normal(lead + (4, 3))
        return (lambda x, y: _weighted(ag.matmul(x, y), w)), [a, b]
    return build


def _reduce(op, axes) -> Builder:
    def build(rng):
        x = rng.standard_normal((2, 3, 4))
        w = rng.standard_normal(np.asarray(x.sum(axis=axes)).shape)
        return (lambda t: _weighted(op(t, axes), w)), [x]
    return build


def _attention(rng):
    c, r = 8, 8
    cq = c // r
    f = rng.standard_normal((c, 4, 4))
    q = rng.standard_normal((cq, c, 1, 1)) * 0.5
    k = rng.standard_normal((cq, c, 1, 1)) * 0.5
    v = rng.standard_normal((c, c, 1, 1)) * 0.5
    g = rng.standard_normal(1)
    w = rng.standard_normal((c, 4, 4))

    def fn(f_, q_, k_, v_, g_):
        params = ModelParams([("attn.query", q_), ("attn.key", k_), ("attn.value", v_), ("attn.gamma", g_)])
        return _weighted(self_attention(f_, params), w)
    return fn, [f, q, k, v, g]


def _bce(rng):
    p = rng.uniform(0.05, 0.95, size=(2, 1, 4, 4))
    y = (rng.uniform(size=p.shape) < 0.5).astype(np.float64)
    return (lambda t: bce_loss(t, y)), [p]


def _entropy(rng):
    from .train import entropy_loss

    p = rng.uniform(0.05, 0.95, size=(2, 1, 4, 4))
    return entropy_loss, [p]


def _distance(kind: str) -> Builder:
    def build(rng):
        from .distill import model_distance

        a = rng.standard_normal((3, 4))
        b = a - _away_from(rng.standard_normal((3, 4)))  # |a-b| has a kink at 0
        anchor = ModelParams([("w", Tensor(b))])
        return (lambda t: model_distance(ModelParams([("w", t)]), anchor, kind)), [a]
    return build


TINY_NET = NetConfig(width=8, height=8, channels=(2, 4), attention=True, reduction=4)


def _full_model(rng):
    cfg = TINY_NET
    params = init_params(cfg, int(rng.integers(2**31)))
    params["attn.gamma"].values[:] = rng.uniform(0.5, 1.5)
    for name, t in params.items():
        if name.endswith(".bias"):
            t.values[:] = rng.uniform(0.05, 0.2, size=t.shape)  # keep ReLUs mostly active
    image = rng.uniform(0, 1, size=(3, cfg.height, cfg.width))
    y = (rng.uniform(size=(1, cfg.height, cfg.width)) < 0.4).astype(np.float64)
    names = list(params)

    def fn(*tensors):
        p = ModelParams(zip(names, tensors))
        return bce_loss(forward(p, Tensor(image), cfg), y)
    return fn, [t.values.copy() for t in params.values()]


CASES: dict[str, Builder] = {
    "add": _binary(ag.add),
    "add_scalar": _binary(ag.add, b_shape=(1,)),
    "sub": _binary(ag.sub),
    "mul": _binary(ag.mul),
    "mul_scalar": _binary(ag.mul, b_shape=(1,)),
    "scale": _unary(lambda t: ag.scale(t, -1.7)),
    "relu": _unary(ag.relu, lambda r, s: _away_from(r.standard_normal(s))),
    "abs": _unary(ag.abs, lambda r, s: _away_from(r.standard_normal(s))),
    "sigmoid": _unary(ag.sigmoid, lambda r, s: 3 * r.standard_normal(s)),
    "exp": _unary(ag.exp),
    "log": _unary(ag.log, lambda r, s: r.uniform(0.2, 3.0, s)),
    "clamp": _unary(lambda t: ag.clamp(t, -0.5, 0.5), lambda r, s: _away_from(r.standard_normal(s), (-0.5, 0.5))),
    "sum": _reduce(ag.sum, (1,)),
    "sum_all": _reduce(ag.sum, None),
    "mean": _reduce(ag.mean, (0, 2)),
    "reshape": _unary(lambda t: ag.reshape(t, (2, 6))),
    "transpose": _unary(lambda t: ag.transpose(t, (2, 0, 1)), shape=(2, 3, 4)),
    "matmul": _matmul(False),
    "matmul_batched": _matmul(True),
    "softmax": _unary(lambda t: ag.softmax(t, axis=-1)),
    "softmax_axis0": _unary(lambda t: ag.softmax(t, axis=0)),
    "conv2d": _conv(1, 0, False),
    "conv2d_stride2_pad1": _conv(2, 1, True),
    "conv2d_batched": _conv(1, 1, True, batch=True),
    "bilinear_up": _bilinear(2),
    "bilinear_down": _bilinear(0.5),
    "self_attention": _attention,
    "bce_loss": _bce,
    "entropy_loss": _entropy,
    "model_distance_mse": _distance("mse"),
    "model_distance_l1": _distance("l1"),
    "full_model_8x8": _full_model,
}


@dataclass(frozen=True)
class CaseResult:
    name: str
    max_rel_error: float
    seeds: int
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error <= TOLERANCE)


def run_case(name: str, seeds: int = DEFAULT_SEEDS, base_seed: int = 0) -> CaseResult:
    build = CASES[name]
    t0 = time.perf_counter()
    worst = 0.0
    for s in range(seeds):
        fn, inputs = build(np.random.default_rng([base_seed, s, 0x96AD]))
        worst = max(worst, grad_check(fn, inputs))
    return CaseResult(name, float(worst), seeds, time.perf_counter() - t0)


def run_suite(seeds: int = DEFAULT_SEEDS, names: list[str] | None = None, base_seed: int = 0) -> list[CaseResult]:
    return [run_case(n, seeds, base_seed) for n in (names or list(CASES))]
