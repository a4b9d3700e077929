"""Experiment configuration and seed-stream derivation."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .distill import DistillConfig
from .segnet import NetConfig
from .synthweather import CorruptionSpec
from .train import AdaptConfig, JitterConfig, SgdConfig

# Stable integer tags; changing one changes every derived stream.
PURPOSES = {
    "data": 1,
    "init": 2,
    "shuffle": 3,
    "kselect": 4,
    "adapt": 5,
    "finetune": 6,
}


def derive_seed(seed: int, purpose: str) -> int:
    """Independent 31-bit seed for one purpose, fixed by (seed, purpose)."""
    if purpose not in PURPOSES:
        raise KeyError(f"unknown seed purpose {purpose!r}")
    state = np.random.SeedSequence([int(seed), PURPOSES[purpose]]).generate_state(1, np.uint32)
    return int(state[0] & 0x7FFFFFFF)


@dataclass(frozen=True)
class DatasetRecipe:
    width: int = 64
    height: int = 64
    n_train: int = 200
    n_holdout: int = 40
    fog_ladder: tuple[float, ...] = (375.0, 150.0, 75.0, 30.0)
    n_per_severity: int = 16
    # mixed-corruption target for few-shot fine-tuning
    mixed: tuple[tuple[str, float], ...] = (
        ("fog", 150.0), ("fog", 50.0), ("rain", 50.0), ("rain", 200.0), ("night", 0.5), ("night", 0.25),
    )
    n_mixed_per_kind: int = 6

    def __post_init__(self):
        object.__setattr__(self, "fog_ladder", tuple(float(v) for v in self.fog_ladder))
        object.__setattr__(self, "mixed", tuple((str(k), float(s)) for k, s in self.mixed))
        if min(self.width, self.height) < 16:
            raise ValueError("scenes must be at least 16x16")
        if min(self.n_train, self.n_holdout, self.n_per_severity, self.n_mixed_per_kind) < 1:
            raise ValueError("every split needs at least one scene")
        if not self.fog_ladder or list(self.fog_ladder) != sorted(self.fog_ladder, reverse=True):
            raise ValueError("fog ladder must list visibilities from light to heavy (decreasing)")
        for v in self.fog_ladder:
            CorruptionSpec("fog", v)
        for k, s in self.mixed:
            CorruptionSpec(k, s)

    def fog_specs(self) -> list[CorruptionSpec]:
        return [CorruptionSpec("fog", v) for v in self.fog_ladder]

    def mixed_specs(self) -> list[CorruptionSpec]:
        return [CorruptionSpec(k, s) for k, s in self.mixed]


def _adapt_sgd_default() -> SgdConfig:
    return SgdConfig(loss_cell=32)


def _adapt_default() -> AdaptConfig:
    # Step 2 budget of 15 epochs per batch; the frozen-label baseline gets the same 5 x 3.
    return AdaptConfig(tau=0.4, step2_epochs=15, iterative_rounds=5, iterative_inner_epochs=3)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    net: NetConfig = field(default_factory=NetConfig)
    pretrain_sgd: SgdConfig = field(default_factory=lambda: SgdConfig(epochs=8))
    pretrain_jitter: JitterConfig | None = field(default_factory=JitterConfig)
    adapt_sgd: SgdConfig = field(default_factory=_adapt_sgd_default)
    adapt: AdaptConfig = field(default_factory=_adapt_default)
    distill: DistillConfig = field(default_factory=DistillConfig)
    data: DatasetRecipe = field(default_factory=DatasetRecipe)
    output_dir: str = "runs/default"

    def __post_init__(self):
        if (self.net.width, self.net.height) != (self.data.width, self.data.height):
            raise ValueError("net input size must match the dataset scene size")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["net"] = self.net.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        if "net" in kw:
            kw["net"] = NetConfig.from_dict(kw["net"])
        for key in ("pretrain_sgd", "adapt_sgd"):
            if key in kw:
                kw[key] = SgdConfig(**kw[key])
        if kw.get("pretrain_jitter") is not None:
            kw["pretrain_jitter"] = JitterConfig(**kw["pretrain_jitter"])
        if "adapt" in kw:
            kw["adapt"] = AdaptConfig(**kw["adapt"])
        if "distill" in kw:
            dd = dict(kw["distill"])
            if "sgd" in dd:
                dd["sgd"] = SgdConfig(**dd["sgd"])
            kw["distill"] = DistillConfig(**dd)
        if "data" in kw:
            dd = dict(kw["data"])
            if "mixed" in dd:
                dd["mixed"] = tuple(tuple(x) for x in dd["mixed"])
            kw["data"] = DatasetRecipe(**dd)
        return cls(**kw)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")


def worker_count(default: int | None = None) -> int:
    """Worker cap from SSFDA_THREADS (>= 1); falls back to the CPU count."""
    raw = os.environ.get("SSFDA_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(f"SSFDA_THREADS must be an integer, got {raw!r}") from None
        return max(1, n)
    return max(1, default if default is not None else (os.cpu_count() or 1))
