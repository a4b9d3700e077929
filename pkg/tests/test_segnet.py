import numpy as np
import pytest

from ssfda import autograd as ag
from ssfda.autograd import Tensor, grad_check
from ssfda.gradsuite import TINY_NET, run_case
from ssfda.segnet import (ModelParams, NetConfig, attention_affinity, bce_loss, forward, init_params, param_shapes,
                          predict, self_attention)
from ssfda.train import SgdConfig, TrainState, sgd_update


def test_config_validation():
    with pytest.raises(ValueError):
        NetConfig(width=30, height=32)  # not divisible by 4
    with pytest.raises(ValueError):
        NetConfig(channels=(16, 12), reduction=8)
    with pytest.raises(ValueError):
        NetConfig(channels=())


def test_param_table_default_config():
    shapes = param_shapes(NetConfig())
    assert shapes["enc0.weight"] == (16, 3, 3, 3)
    assert shapes["enc1.weight"] == (32, 16, 3, 3)
    assert shapes["attn.query"] == (4, 32, 1, 1)
    assert shapes["attn.value"] == (32, 32, 1, 1)
    assert shapes["attn.gamma"] == (1,)
    assert shapes["dec0.weight"] == (16, 32, 3, 3)
    assert shapes["dec1.weight"] == (16, 16, 3, 3)
    assert shapes["head.weight"] == (1, 16, 1, 1)


def test_init_deterministic_bounded_gamma_zero():
    cfg = NetConfig()
    a, b = init_params(cfg, 7), init_params(cfg, 7)
    assert a.bitwise_equal(b) and a.digest() == b.digest()
    assert a["attn.gamma"].values.item() == 0.0
    for name, t in a.items():
        if t.values.ndim == 4:
            bound = np.sqrt(6.0 / np.prod(t.shape[1:]))
            assert np.abs(t.values).max() <= bound
    assert not a.bitwise_equal(init_params(cfg, 8))


def test_attention_gamma_zero_is_identity():
    params = init_params(NetConfig(), 0)
    f = Tensor(np.random.default_rng(0).standard_normal((32, 4, 4)))
    assert np.array_equal(self_attention(f, params).values, f.values)


def test_attention_single_position():
    rng = np.random.default_rng(1)
    c = 8
    params = ModelParams([
        ("attn.query", Tensor(rng.standard_normal((1, c, 1, 1)))),
        ("attn.key", Tensor(rng.standard_normal((1, c, 1, 1)))),
        ("attn.value", Tensor(rng.standard_normal((c, c, 1, 1)))),
        ("attn.gamma", Tensor([0.7])),
    ])
    x = rng.standard_normal((c, 1, 1))
    out = self_attention(Tensor(x), params).values
    expect = 0.7 * params["attn.value"].values[:, :, 0, 0] @ x[:, 0, 0] + x[:, 0, 0]
    assert np.allclose(out[:, 0, 0], expect, atol=1e-12)
    assert np.allclose(attention_affinity(x, params), 1.0)


def test_attention_grad_check():
    assert run_case("self_attention", seeds=3).max_rel_error <= 1e-5


def test_affinity_rows_are_distributions():
    rng = np.random.default_rng(2)
    params = init_params(NetConfig(), 3)
    aff = attention_affinity(rng.standard_normal((2, 32, 4, 4)), params)
    assert aff.shape == (2, 16, 16)
    assert np.allclose(aff.sum(axis=-1), 1.0, atol=1e-9)


def test_forward_contract():
    cfg = NetConfig()
    params = init_params(cfg, 0)
    img = np.random.default_rng(3).uniform(size=(3, 64, 64))
    p = forward(params, Tensor(img), cfg)
    assert p.shape == (1, 64, 64)
    assert np.all((p.values > 0) & (p.values < 1))
    assert forward(params, Tensor(img), cfg).values.tobytes() == p.values.tobytes()
    with pytest.raises(ag.ShapeError):
        forward(params, Tensor(np.zeros((3, 32, 32))), cfg)


def test_gamma_zero_matches_attention_free_network():
    with_attn = NetConfig(width=16, height=16, channels=(8, 16))
    without = NetConfig(width=16, height=16, channels=(8, 16), attention=False)
    params = init_params(with_attn, 4)
    plain = ModelParams((k, v) for k, v in params.items() if not k.startswith("attn."))
    img = Tensor(np.random.default_rng(5).uniform(size=(3, 16, 16)))
    assert np.array_equal(forward(params, img, with_attn).values, forward(plain, img, without).values)


def test_predict_matches_forward():
    cfg = NetConfig(width=16, height=16, channels=(8, 16))
    params = init_params(cfg, 5)
    imgs = np.random.default_rng(6).uniform(size=(5, 3, 16, 16))
    got = predict(params, imgs, cfg, batch_size=2)
    ref = np.stack([forward(params, Tensor(im), cfg).values[0] for im in imgs])
    assert np.allclose(got, ref, atol=1e-12)


def test_bce_examples():
    n = 12
    y = (np.arange(n) % 2).astype(float).reshape(1, 3, 4)
    assert np.isclose(bce_loss(Tensor(np.full((1, 3, 4), 0.5)), y).item(), n * np.log(2))
    assert bce_loss(Tensor(y), y).item() == pytest.approx(n * np.log(1 / (1 - 1e-7)), rel=1e-6)
    two = bce_loss(Tensor([0.9, 0.2]), np.array([1.0, 0.0])).item()
    assert two == pytest.approx(-(np.log(0.9) + np.log(0.8)), abs=1e-12)
    assert two == pytest.approx(0.3285, abs=1e-4)
    mean = bce_loss(Tensor([0.9, 0.2]), np.array([1.0, 0.0]), reduction="mean").item()
    assert mean == pytest.approx(two / 2)


def test_bce_rejects_bad_labels():
    with pytest.raises(ValueError):
        bce_loss(Tensor([0.5, 0.5]), np.array([1.0, 0.3]))
    with pytest.raises(ag.ShapeError):
        bce_loss(Tensor([0.5, 0.5]), np.array([1.0]))


def test_bce_decreases_fitting_one_pair():
    from ssfda.synthweather import generate_scene

    cfg = NetConfig(width=16, height=16, channels=(8, 16))
    params = init_params(cfg, 0)
    s = generate_scene(0, 16, 16)
    y = s.label[None].astype(float)
    state = TrainState(params)
    sgd = SgdConfig(lr=1e-2, momentum=0.0, weight_decay=0.0)
    losses = []
    for _ in range(50):
        loss = bce_loss(forward(params, Tensor(s.image), cfg), y, reduction="mean")
        losses.append(loss.item())
        params.zero_grad()
        ag.backward(loss)
        sgd_update(state, {k: t.grad for k, t in params.items()}, sgd)
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert all(v >= 0 for v in losses)


def test_full_model_grad_check_tiny_net():
    assert TINY_NET.width == 8
    assert run_case("full_model_8x8", seeds=2).max_rel_error <= 1e-4
