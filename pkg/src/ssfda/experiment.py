"""Library-level experiment pipeline shared by the CLI and the acceptance tests."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from .config import ExperimentConfig, derive_seed, worker_count
from .curriculum import CurriculumPlan, prediction_entropy, score_dataset, sort_and_partition
from .distill import DistillConfig, FinetuneResult, finetune_few, pick_labeled
from .io import Split
from .metrics import evaluate
from .segnet import ModelParams, NetConfig, predict
from .synthweather import CorruptionSpec, Scene, corrupt, generate_scene
from .train import BatchSnapshot, pretrain_supervised, run_curriculum

SPLIT_CODES = {"train": 1, "holdout": 2, "fog": 3, "mixed": 4, "mixed_holdout": 5}


def scene_seed(data_seed: int, split: str, index: int) -> int:
    state = np.random.SeedSequence([data_seed, SPLIT_CODES[split], index]).generate_state(1, np.uint32)
    return int(state[0] & 0x7FFFFFFF)


def _make(args) -> Scene:
    seed, w, h, spec = args
    return corrupt(generate_scene(seed, w, h), spec)


def _generate(jobs: list[tuple[int, int, int, CorruptionSpec | None]]) -> list[Scene]:
    n = worker_count()
    if n == 1 or len(jobs) < 2:
        return [_make(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(_make, jobs))  # map keeps input order


def build_splits(cfg: ExperimentConfig) -> dict[str, list[Scene]]:
    """Every split the experiments use, generated from the config's data stream.

    The fog target shares one set of base scenes across the whole ladder, so the
    severity groups differ only in the corruption.
    """
    r = cfg.data
    ds = derive_seed(cfg.seed, "data")
    jobs: dict[str, list] = {
        "train": [(scene_seed(ds, "train", i), r.width, r.height, None) for i in range(r.n_train)],
        "holdout": [(scene_seed(ds, "holdout", i), r.width, r.height, None) for i in range(r.n_holdout)],
        "fog": [(scene_seed(ds, "fog", i), r.width, r.height, spec)
                for spec in r.fog_specs() for i in range(r.n_per_severity)],
        "mixed": [(scene_seed(ds, "mixed", j * r.n_mixed_per_kind + i), r.width, r.height, spec)
                  for j, spec in enumerate(r.mixed_specs()) for i in range(r.n_mixed_per_kind)],
        "mixed_holdout": [(scene_seed(ds, "mixed_holdout", j * r.n_mixed_per_kind + i), r.width, r.height, spec)
                          for j, spec in enumerate(r.mixed_specs()) for i in range(r.n_mixed_per_kind)],
    }
    return {name: _generate(j) for name, j in jobs.items()}


# ---------------------------------------------------------------- evaluation


def _eval_group(args):
    params, images, labels, net = args
    probs = predict(params, images, net)
    return evaluate(probs, labels), prediction_entropy(probs)


def evaluate_split(params: ModelParams, split: Split, net: NetConfig, dataset: str = "") -> list[dict]:
    """One metrics row per corruption group, in first-seen order, plus an 'all' row."""
    groups = split.groups()
    images, labels = split.images, split.labels
    tasks = [(params, images[idx], labels[idx], net) for idx in groups.values()]
    n = worker_count()
    if n > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(_eval_group, tasks))
    else:
        results = [_eval_group(t) for t in tasks]
    probs = np.concatenate([predict(params, images[idx], net) for idx in groups.values()])
    order = np.concatenate([np.asarray(idx) for idx in groups.values()])
    overall = (evaluate(probs, labels[order]), prediction_entropy(probs))
    rows = []
    for sev, (rep, ent) in zip(list(groups) + ["all"], results + [overall]):
        rows.append({"dataset": dataset or split.name, "severity": sev, **rep.to_dict(), "mean_entropy": ent})
    return rows


def miou_of(params: ModelParams, images: np.ndarray, labels: np.ndarray, net: NetConfig) -> float | None:
    return evaluate(predict(params, images, net), labels).miou


# ---------------------------------------------------------------- stages


def pretrain(cfg: ExperimentConfig, train: Split) -> tuple[ModelParams, list[float]]:
    init_seed = derive_seed(cfg.seed, "init")
    from .segnet import init_params

    result = pretrain_supervised(train.images, train.labels, cfg.net, cfg.pretrain_sgd,
                                 seed=derive_seed(cfg.seed, "shuffle"), init=init_params(cfg.net, init_seed),
                                 jitter=cfg.pretrain_jitter)
    return result.params, result.epoch_losses


def make_plan(params: ModelParams, images: np.ndarray, cfg: ExperimentConfig, m: int | None = None) -> CurriculumPlan:
    scores = score_dataset(params, images, cfg.net, mode=cfg.adapt.entropy_mode)
    return sort_and_partition(scores, cfg.adapt.m if m is None else m)


def adapt(cfg: ExperimentConfig, pretrained: ModelParams, images: np.ndarray, *, m: int | None = None,
          selftrain: str = "online", monitor=None) -> tuple[ModelParams, CurriculumPlan, list[BatchSnapshot]]:
    """Entropy-ordered curriculum adaptation on unlabeled ``images``; m=1 disables the curriculum."""
    plan = make_plan(pretrained, images, cfg, m)
    params, snaps = run_curriculum(pretrained, plan, images, cfg.net, cfg.adapt_sgd, cfg.adapt,
                                   seed=derive_seed(cfg.seed, "adapt"), selftrain=selftrain, monitor=monitor)
    return params, plan, snaps


def finetune(cfg: ExperimentConfig, anchor: ModelParams, pool: Split, k: int | None = None,
             lam: float | None = None) -> tuple[FinetuneResult, list[int]]:
    dcfg: DistillConfig = cfg.distill
    if k is not None:
        dcfg = replace(dcfg, k=k)
    if lam is not None:
        dcfg = replace(dcfg, lam=lam)
    idx = pick_labeled(len(pool.scenes), dcfg.k, derive_seed(cfg.seed, "kselect"))
    res = finetune_few(anchor, pool.images[idx], pool.labels[idx], cfg.net, dcfg,
                       seed=derive_seed(cfg.seed, "finetune"))
    return res, idx
