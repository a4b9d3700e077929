"""Self-attention segmentation autoencoder with a single-channel road head."""
from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass(frozen=True)
class NetConfig:
    width: int = 64
    height: int = 64
    channels: tuple[int, ...] = (16, 32)
    attention: bool = True
    reduction: int = 8

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels or any(c <= 0 for c in self.channels):
            raise ValueError(f"channel widths must be positive, got {self.channels}")
        f = 2 ** self.downsamplings
        if self.width % f or self.height % f:
            raise ValueError(f"input {self.width}x{self.height} not divisible by {f}")
        if self.attention and (self.reduction <= 0 or self.channels[-1] % self.reduction):
            raise ValueError(f"reduction {self.reduction} must divide bottleneck width {self.channels[-1]}")

    @property
    def downsamplings(self) -> int:
        return len(self.channels)

    @property
    def output_size(self) -> tuple[int, int]:
        return self.height, self.width

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**{**d, "channels": tuple(d.get("channels", cls.channels))})


class ModelParams(OrderedDict):
    """Ordered name -> Tensor map. Iteration order is the serialization order."""

    def copy(self, requires_grad: bool = True) -> "ModelParams":
        return ModelParams((k, Tensor(v.values.copy(), requires_grad=requires_grad)) for k, v in self.items())

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.items()}

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def n_coords(self) -> int:
        return int(sum(t.size for t in self.values()))

    def flat(self) -> np.ndarray:
        return np.concatenate([t.values.reshape(-1) for t in self.values()])

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in self.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v.values, dtype="<f8").tobytes())
        return h.hexdigest()

    def bitwise_equal(self, other: "ModelParams") -> bool:
        return list(self) == list(other) and all(
            self[k].shape == other[k].shape and np.array_equal(self[k].values, other[k].values) for k in self
        )


def param_shapes(cfg: NetConfig) -> "OrderedDict[str, tuple[int, ...]]":
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    prev = 3
    for i, c in enumerate(cfg.channels):
        shapes[f"enc{i}.weight"] = (c, prev, 3, 3)
        shapes[f"enc{i}.bias"] = (c,)
        prev = c
    if cfg.attention:
        cq = prev // cfg.reduction
        shapes["attn.query"] = (cq, prev, 1, 1)
        shapes["attn.key"] = (cq, prev, 1, 1)
        shapes["attn.value"] = (prev, prev, 1, 1)
        shapes["attn.gamma"] = (1,)
    for i, c in enumerate(_decoder_widths(cfg)):
        shapes[f"dec{i}.weight"] = (c, prev, 3, 3)
        shapes[f"dec{i}.bias"] = (c,)
        prev = c
    shapes["head.weight"] = (1, prev, 1, 1)
    shapes["head.bias"] = (1,)
    return shapes


def _decoder_widths(cfg: NetConfig) -> list[int]:
    # Mirror the encoder: stage i restores the width of encoder stage i-1.
    rev = list(reversed(cfg.channels))
    return rev[1:] + [cfg.channels[0]]


def init_params(cfg: NetConfig, seed: int) -> ModelParams:
    """Uniform init in ±sqrt(6/fan_in); biases and the attention gate start at 0."""
    rng = np.random.default_rng(seed)
    params = ModelParams()
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".bias") or name == "attn.gamma":
            values = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            values = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(values, requires_grad=True)
    return params


def self_attention(f: Tensor, params: ModelParams) -> Tensor:
    """Gated residual self-attention over spatial positions.

    ``f`` is C×H×W or N×C×H×W. With gamma == 0 the output equals ``f``.
    """
    batched = f.values.ndim == 4
    x = f if batched else ag.reshape(f, (1,) + f.shape)
    n, c, h, w = x.shape
    L = h * w
    q = ag.reshape(ag.conv2d(x, params["attn.query"]), (n, -1, L))
    k = ag.reshape(ag.conv2d(x, params["attn.key"]), (n, -1, L))
    v = ag.reshape(ag.conv2d(x, params["attn.value"]), (n, c, L))
    energy = ag.matmul(ag.transpose(q, (0, 2, 1)), k)  # N×L×L, row i = query position
    affinity = ag.softmax(energy, axis=-1)
    attended = ag.matmul(v, ag.transpose(affinity, (0, 2, 1)))  # N×C×L
    out = ag.add(ag.mul(params["attn.gamma"], ag.reshape(attended, x.shape)), x)
    return out if batched else ag.reshape(out, f.shape)


def attention_affinity(f: np.ndarray, params: ModelParams) -> np.ndarray:
    """Affinity matrix (N×L×L) for inspection; no graph is recorded."""
    x = f if f.ndim == 4 else f[None]
    n, c, h, w = x.shape
    q = np.einsum("oc,ncl->nol", params["attn.query"].values[:, :, 0, 0], x.reshape(n, c, -1))
    k = np.einsum("oc,ncl->nol", params["attn.key"].values[:, :, 0, 0], x.reshape(n, c, -1))
    e = np.einsum("nol,nom->nlm", q, k)
    e = np.exp(e - e.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def encode(params: ModelParams, image: Tensor, cfg: NetConfig) -> Tensor:
    x = image
    for i in range(cfg.downsamplings):
        x = ag.relu(ag.conv2d(x, params[f"enc{i}.weight"], params[f"enc{i}.bias"], stride=2, pad=1))
    return x


def forward(params: ModelParams, image: Tensor, cfg: NetConfig) -> Tensor:
    """Road probability map, 1×h×w (or N×1×h×w for a batched image)."""
    expect = (3, cfg.height, cfg.width)
    if tuple(image.shape[-3:]) != expect or image.values.ndim not in (3, 4):
        raise ag.ShapeError(f"forward: expected image {expect}, got {image.shape}")
    x = encode(params, image, cfg)
    if cfg.attention:
        x = self_attention(x, params)
    for i in range(len(_decoder_widths(cfg))):
        x = ag.bilinear_resize(x, 2)
        x = ag.relu(ag.conv2d(x, params[f"dec{i}.weight"], params[f"dec{i}.bias"], pad=1))
    logits = ag.conv2d(x, params["head.weight"], params["head.bias"])
    return ag.sigmoid(logits)


def predict(params: ModelParams, images: np.ndarray, cfg: NetConfig, batch_size: int = 32) -> np.ndarray:
    """Probabilities for a stack of images (N×3×h×w) without recording gradients."""
    frozen = params.copy(requires_grad=False)
    out = []
    for start in range(0, len(images), batch_size):
        out.append(forward(frozen, Tensor(images[start:start + batch_size]), cfg).values[:, 0])
    return np.concatenate(out) if out else np.zeros((0, cfg.height, cfg.width))


def _check_binary(y: np.ndarray) -> None:
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary {0,1}")


def bce_loss(p: Tensor, y, reduction: str = "sum") -> Tensor:
    """Binary cross-entropy on clamped probabilities.

    ``reduction='sum'`` sums over all pixels; ``'mean'`` divides by the pixel
    count. For batched input (N×1×h×w) the sum is taken per image and then
    averaged over the batch.
    """
    y = np.asarray(y.values if isinstance(y, Tensor) else y, dtype=np.float64)
    if y.shape != p.shape:
        raise ag.ShapeError(f"bce_loss: shape mismatch {p.shape} vs {y.shape}")
    _check_binary(y)
    pc = ag.clamp_prob(p)
    Y = Tensor(y)
    ll = ag.add(ag.mul(Y, ag.log(pc)), ag.mul(Tensor(1.0 - y), ag.log(ag.sub(1.0, pc))))
    total = ag.scale(ag.sum(ll), -1.0)
    per = p.size if reduction == "mean" else (p.shape[0] if p.values.ndim == 4 else 1)
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    return ag.scale(total, 1.0 / per) if per != 1 else total
