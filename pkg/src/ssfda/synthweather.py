"""Procedural road scenes and parametric fog / rain / night corruptions.

All functions are pure given their seed. Images are float64 arrays shaped
3×h×w in [0, 1]; labels are uint8 h×w masks with 1 = road.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autograd import Tensor, bilinear_resize

AIRLIGHT = 0.8
NEAR_DEPTH = 5.0
FAR_DEPTH = 300.0
KOSCHMIEDER = 3.912
ROAD_GRAY = (0.18, 0.35)

SEVERITY_RANGES = {
    "fog": (30.0, 750.0),
    "rain": (1.0, 200.0),
    "night": (0.0, 1.0),
}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: float

    def __post_init__(self):
        if self.kind not in SEVERITY_RANGES:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        lo, hi = SEVERITY_RANGES[self.kind]
        ok = lo < self.severity <= hi if self.kind == "night" else lo <= self.severity <= hi
        if not ok:
            raise ValueError(f"{self.kind} severity {self.severity} outside [{lo}, {hi}]")

    @property
    def tag(self) -> str:
        unit = {"fog": "m", "rain": "mm", "night": "x"}[self.kind]
        return f"{self.kind}{self.severity:g}{unit}"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "severity": self.severity}

    @classmethod
    def from_dict(cls, d: dict | None) -> "CorruptionSpec | None":
        return None if d is None else cls(d["kind"], float(d["severity"]))


@dataclass(frozen=True)
class Scene:
    image: np.ndarray
    label: np.ndarray
    seed: int
    corruption: CorruptionSpec | None = None

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]


# ---------------------------------------------------------------- geometry


@dataclass(frozen=True)
class RoadGeometry:
    """Road trapezoid: bottom edge on the image bottom, sides aimed at a vanishing point."""

    bottom_left: float
    bottom_right: float
    vanish_x: float
    vanish_y: float
    horizon: float
    height: int

    def edges_at(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        t = (self.height - y) / (self.height - self.vanish_y)
        left = self.bottom_left + (self.vanish_x - self.bottom_left) * t
        right = self.bottom_right + (self.vanish_x - self.bottom_right) * t
        return left, right

    def polygon(self) -> list[tuple[float, float]]:
        (tl,), (tr,) = self.edges_at(np.array([self.horizon]))
        return [
            (self.bottom_left, float(self.height)),
            (self.bottom_right, float(self.height)),
            (float(tr), self.horizon),
            (float(tl), self.horizon),
        ]


def rasterize_road(geom: RoadGeometry, w: int, h: int) -> np.ndarray:
    """Pixel is road when its centre lies inside the trapezoid (edges inclusive)."""
    yc = np.arange(h) + 0.5
    xc = np.arange(w) + 0.5
    left, right = geom.edges_at(yc)
    inside = (xc[None, :] >= left[:, None]) & (xc[None, :] <= right[:, None])
    inside &= (yc >= geom.horizon)[:, None]
    return inside.astype(np.uint8)


def _sample_geometry(rng: np.random.Generator, w: int, h: int) -> RoadGeometry:
    horizon = h * rng.uniform(0.30, 0.45)
    vanish_y = horizon - h * rng.uniform(0.02, 0.12)
    vanish_x = w * rng.uniform(0.30, 0.70)
    centre = w * rng.uniform(0.35, 0.65)
    half = w * rng.uniform(0.30, 0.60)
    return RoadGeometry(centre - half, centre + half, vanish_x, vanish_y, horizon, h)


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cell: int) -> np.ndarray:
    coarse = rng.standard_normal((h // cell + 2, w // cell + 2))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    a = coarse[y0][:, x0]
    b = coarse[y0][:, x0 + 1]
    c = coarse[y0 + 1][:, x0]
    d = coarse[y0 + 1][:, x0 + 1]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def generate_scene(seed: int, w: int = 64, h: int = 64) -> Scene:
    """Deterministic road scene.

    Dark textured asphalt, coloured ground, and a saturated sky gradient above
    the horizon. No bright neutral surfaces occur, so fog airlight is unfamiliar.
    """
    if w < 16 or h < 16:
        raise ValueError(f"scene must be at least 16x16, got {w}x{h}")
    rng = np.random.default_rng([seed, 0x5CE7E])
    while True:
        geom = _sample_geometry(rng, w, h)
        label = rasterize_road(geom, w, h)
        if 0.1 <= label.mean() <= 0.6:
            break
    rows = np.arange(h)[:, None] + 0.5
    sky_mask = np.broadcast_to(rows < geom.horizon, (h, w))

    ground_base = rng.uniform([0.15, 0.30, 0.05], [0.45, 0.60, 0.25])  # greens / browns
    ground_tex = 0.06 * _smooth_noise(rng, h, w, 4) + 0.03 * rng.standard_normal((h, w))
    ground = ground_base[:, None, None] + ground_tex[None]

    gray = rng.uniform(*ROAD_GRAY)
    road_tex = 0.03 * rng.standard_normal((h, w)) + 0.02 * _smooth_noise(rng, h, w, 8)
    road = np.broadcast_to(gray + road_tex, (3, h, w))

    top = rng.uniform([0.15, 0.30, 0.70], [0.30, 0.45, 0.90])
    bottom = rng.uniform([0.45, 0.60, 0.85], [0.55, 0.70, 0.95])
    frac = np.clip(rows / max(geom.horizon, 1.0), 0, 1)
    sky = top[:, None, None] * (1 - frac[None]) + bottom[:, None, None] * frac[None]
    sky = np.broadcast_to(sky, (3, h, w))

    image = np.where(label[None] == 1, road, np.where(sky_mask[None], sky, ground))
    return Scene(np.clip(image, 0.0, 1.0), label, seed)


# ---------------------------------------------------------------- corruptions


def depth_proxy(h: int) -> np.ndarray:
    """Per-row depth in metres: NEAR_DEPTH at the bottom row, FAR_DEPTH at the top row."""
    r = np.arange(h, dtype=np.float64)
    return FAR_DEPTH - (FAR_DEPTH - NEAR_DEPTH) * r / max(h - 1, 1)


def fog_transmission(depth: np.ndarray, visibility: float) -> np.ndarray:
    return np.exp(-KOSCHMIEDER / visibility * depth)


def apply_fog(image: np.ndarray, visibility: float) -> np.ndarray:
    if visibility <= 0:
        raise ValueError(f"visibility must be positive, got {visibility}")
    t = fog_transmission(depth_proxy(image.shape[-2]), visibility)[None, :, None]
    return np.clip(image * t + AIRLIGHT * (1.0 - t), 0.0, 1.0)


def rain_streak_count(mm: float, w: int, h: int) -> int:
    return int(round(mm * (w * h) / 4096))


def _segment_coverage(h: int, w: int, x0: float, y0: float, x1: float, y1: float) -> np.ndarray:
    """Anti-aliased coverage of a 1 px wide segment, from pixel-centre distance."""
    py = np.arange(h)[:, None] + 0.5
    px = np.arange(w)[None, :] + 0.5
    dx, dy = x1 - x0, y1 - y0
    t = np.clip(((px - x0) * dx + (py - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    dist = np.hypot(px - (x0 + t * dx), py - (y0 + t * dy))
    return np.clip(1.0 - dist, 0.0, 1.0)


def apply_rain(image: np.ndarray, mm: float, seed: int = 0) -> np.ndarray:
    """Blend ``round(mm·w·h/4096)`` bright streaks, then blur in proportion to mm.

    Streaks are drawn from one seeded stream, so a heavier rain always contains
    the streaks of a lighter one with the same seed.
    """
    if not 1.0 <= mm <= 200.0:
        raise ValueError(f"rain intensity must be in [1, 200] mm, got {mm}")
    _, h, w = image.shape
    rng = np.random.default_rng([seed, 0x4A1])
    out = image.copy()
    for _ in range(rain_streak_count(mm, w, h)):
        length = rng.uniform(6, 14)
        angle = np.deg2rad(rng.uniform(-15, 15))
        x0, y0 = rng.uniform(0, w), rng.uniform(-length, h)
        x1, y1 = x0 + length * np.sin(angle), y0 + length * np.cos(angle)
        alpha = 0.4 * _segment_coverage(h, w, x0, y0, x1, y1)[None]
        out = out * (1.0 - alpha) + 0.9 * alpha
    strength = mm / 200.0
    out = (1.0 - strength) * out + strength * box_blur3(out)
    return np.clip(out, 0.0, 1.0)


def box_blur3(image: np.ndarray) -> np.ndarray:
    """3×3 mean filter with edge replication, per channel."""
    p = np.pad(image, ((0, 0), (1, 1), (1, 1)), mode="edge")
    h, w = image.shape[-2:]
    acc = np.zeros_like(image)
    for dy in range(3):
        for dx in range(3):
            acc += p[:, dy:dy + h, dx:dx + w]
    return acc / 9.0


def apply_night(image: np.ndarray, factor: float, seed: int = 0, noise_std: float = 0.02) -> np.ndarray:
    if not 0.0 < factor <= 1.0:
        raise ValueError(f"night factor must be in (0, 1], got {factor}")
    rng = np.random.default_rng([seed, 0x216])
    noise = noise_std * rng.standard_normal(image.shape) if noise_std else 0.0
    return np.clip(factor * image ** 1.5 + noise, 0.0, 1.0)


def corrupt_image(image: np.ndarray, spec: CorruptionSpec, seed: int = 0) -> np.ndarray:
    if spec.kind == "fog":
        return apply_fog(image, spec.severity)
    if spec.kind == "rain":
        return apply_rain(image, spec.severity, seed)
    return apply_night(image, spec.severity, seed)


def corrupt(scene: Scene, spec: CorruptionSpec | None) -> Scene:
    """Corrupted copy of ``scene``; the label is carried over untouched."""
    if spec is None:
        return scene
    return replace(scene, image=corrupt_image(scene.image, spec, scene.seed), corruption=spec)


# ---------------------------------------------------------------- resampling


def downsample_image(image: np.ndarray) -> np.ndarray:
    return bilinear_resize(Tensor(image), 0.5).values


def downsample_label(label: np.ndarray) -> np.ndarray:
    h, w = label.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"downsample_label: odd size {h}x{w}")
    return np.ascontiguousarray(label[..., ::2, ::2])


def stack_images(scenes) -> np.ndarray:
    return np.stack([s.image for s in scenes]) if scenes else np.zeros((0, 3, 0, 0))


def stack_labels(scenes) -> np.ndarray:
    return np.stack([s.label for s in scenes]) if scenes else np.zeros((0, 0, 0), dtype=np.uint8)
