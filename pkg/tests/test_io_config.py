import json
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssfda.config import PURPOSES, DatasetRecipe, ExperimentConfig, derive_seed, worker_count
from ssfda.experiment import build_splits
from ssfda.io import (CheckpointError, Split, checkpoint_bytes, load_checkpoint, parse_checkpoint, read_manifest,
                      read_split, save_checkpoint, write_dataset, write_json)
from ssfda.segnet import NetConfig, init_params
from ssfda.train import AdaptConfig

CFG = NetConfig(width=16, height=16, channels=(8, 16))


def tiny_experiment(seed=0):
    return ExperimentConfig(seed=seed, net=CFG,
                            data=DatasetRecipe(width=16, height=16, n_train=3, n_holdout=2, n_per_severity=2,
                                               n_mixed_per_kind=1))


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    params = init_params(CFG, 0)
    path = tmp_path / "m.ssfd"
    save_checkpoint(path, params)
    back = load_checkpoint(path, CFG)
    assert back.bitwise_equal(params)
    assert checkpoint_bytes(back) == path.read_bytes()


def test_checkpoint_header_layout():
    params = init_params(CFG, 0)
    data = checkpoint_bytes(params)
    assert data[:4] == b"SSFD"
    version, count = struct.unpack_from("<HI", data, 4)
    assert (version, count) == (1, len(params))
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])
    # header + per-param tables + payload + crc
    table = sum(4 + len(k.encode()) + 4 + 4 * t.values.ndim for k, t in params.items())
    assert len(data) == 10 + table + 8 * params.n_coords() + 4


@pytest.mark.parametrize("pos", [0, 5, 40, -10, -2])
def test_single_byte_corruption_is_detected(pos):
    data = bytearray(checkpoint_bytes(init_params(CFG, 1)))
    data[pos] ^= 0x01
    with pytest.raises(CheckpointError):
        parse_checkpoint(bytes(data))


def test_truncation_and_bad_version():
    data = checkpoint_bytes(init_params(CFG, 1))
    with pytest.raises(CheckpointError):
        parse_checkpoint(data[:-7])
    body = bytearray(data[:-4])
    body[4:6] = struct.pack("<H", 2)
    with pytest.raises(CheckpointError, match="version"):
        parse_checkpoint(bytes(body) + struct.pack("<I", zlib.crc32(bytes(body))))


def test_shape_mismatch_is_rejected(tmp_path):
    path = tmp_path / "m.ssfd"
    save_checkpoint(path, init_params(CFG, 0))
    with pytest.raises(CheckpointError):
        load_checkpoint(path, NetConfig(width=16, height=16, channels=(4, 8)))


# ---------------------------------------------------------------- datasets


def test_dataset_round_trip_matches_generation(tmp_path):
    cfg = tiny_experiment()
    splits = build_splits(cfg)
    write_dataset(tmp_path, splits, {"config": cfg.to_dict()})
    manifest = read_manifest(tmp_path)
    assert manifest["format"] == "ssfda-scenes/1"
    for name, scenes in splits.items():
        assert manifest["splits"][name]["count"] == len(scenes)
        back = read_split(tmp_path, name)
        assert len(back.scenes) == len(scenes)
        for a, b in zip(back.scenes, scenes):
            assert np.array_equal(a.image, b.image) and np.array_equal(a.label, b.label)
            assert a.seed == b.seed and a.corruption == b.corruption


def test_fog_split_shares_base_scenes():
    splits = build_splits(tiny_experiment())
    fog = Split("fog", splits["fog"])
    groups = list(fog.groups().values())
    assert len(groups) == 4
    seeds = [[fog.scenes[i].seed for i in g] for g in groups]
    assert all(s == seeds[0] for s in seeds)
    assert all(np.array_equal(fog.scenes[groups[0][j]].label, fog.scenes[g[j]].label)
               for g in groups for j in range(len(g)))


def test_generation_independent_of_thread_count(monkeypatch):
    cfg = tiny_experiment(3)
    monkeypatch.setenv("SSFDA_THREADS", "1")
    a = build_splits(cfg)
    monkeypatch.setenv("SSFDA_THREADS", "4")
    b = build_splits(cfg)
    for name in a:
        assert all(np.array_equal(x.image, y.image) for x, y in zip(a[name], b[name]))


def test_dataset_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_manifest(tmp_path)
    write_dataset(tmp_path, {"train": build_splits(tiny_experiment())["train"]})
    with pytest.raises(KeyError):
        read_split(tmp_path, "fog")
    raw = (tmp_path / "train.bin").read_bytes()
    (tmp_path / "train.bin").write_bytes(raw + b"\x00")
    with pytest.raises(ValueError):
        read_split(tmp_path, "train")
    (tmp_path / "manifest.json").write_text(json.dumps({"format": "other"}))
    with pytest.raises(ValueError):
        read_manifest(tmp_path)


def test_write_json_sanitises(tmp_path):
    write_json(tmp_path / "r.json", {"b": np.float64(0.5), "a": float("nan"), "c": [np.int64(3)]})
    text = (tmp_path / "r.json").read_text()
    assert json.loads(text) == {"a": None, "b": 0.5, "c": [3]}
    assert text.index('"a"') < text.index('"b"')


# ---------------------------------------------------------------- config and seeds


def test_config_json_round_trip(tmp_path):
    cfg = ExperimentConfig(seed=7, adapt=AdaptConfig(tau=0.45, m=5))
    path = tmp_path / "c.json"
    cfg.save(path)
    assert ExperimentConfig.load(path) == cfg
    assert ExperimentConfig.from_dict(json.loads(cfg.to_json())).to_json() == cfg.to_json()


def test_config_rejects_bad_input():
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"sed": 1})
    with pytest.raises(ValueError):
        ExperimentConfig(net=CFG)  # 16x16 net against 64x64 scenes
    with pytest.raises(ValueError):
        DatasetRecipe(fog_ladder=(30.0, 375.0))


def test_derive_seed_streams():
    assert derive_seed(0, "data") == derive_seed(0, "data")
    streams = {derive_seed(s, p) for s in range(5) for p in PURPOSES}
    assert len(streams) == 5 * len(PURPOSES)
    with pytest.raises(KeyError):
        derive_seed(0, "other")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(sorted(PURPOSES)))
def test_derived_seeds_are_31_bit(seed, purpose):
    assert 0 <= derive_seed(seed, purpose) < 2**31


def test_worker_count(monkeypatch):
    monkeypatch.setenv("SSFDA_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("SSFDA_THREADS", "0")
    assert worker_count() == 1
    monkeypatch.setenv("SSFDA_THREADS", "many")
    with pytest.raises(ValueError):
        worker_count()
    monkeypatch.delenv("SSFDA_THREADS")
    assert worker_count() >= 1
