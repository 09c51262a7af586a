import numpy as np
import pytest

from flowseg import tensor as T
from flowseg.config import ConfigError, NetworkConfig
from flowseg.net import (
    forward,
    forward_graph,
    guided_velocity,
    init_params,
    sinusoidal_features,
    time_embed,
)
from flowseg.tensor import ShapeError, Tensor

from .helpers import perturbed

CFG16 = NetworkConfig(mask_channels=1, cond_channels=1, size=16, width=16, depth=2, temb_dim=32)


def test_init_deterministic_and_seed_dependent():
    a, b, c = init_params(CFG16, 3), init_params(CFG16, 3), init_params(CFG16, 4)
    assert all(a.tensors[k].tobytes() == b.tensors[k].tobytes() for k in a.tensors)
    assert any(not np.array_equal(a.tensors[k], c.tensors[k]) for k in a.tensors)


def test_param_count_closed_form():
    # by hand for C_S=1, C_X=1, width 16, depth 2, temb 32; channels 16, 32, 64
    e = 32

    def block(cin, cout):
        return 9 * cin * cout + cout + e * cout + cout + 9 * cout * cout + cout

    expected = (
        e * e + e  # time MLP
        + block(2, 16)  # down0
        + block(16, 32)  # down1
        + block(32, 64)  # mid
        + block(64 + 32, 32)  # up1
        + block(32 + 16, 16)  # up0
        + 9 * 16 * 1 + 1  # output conv
    )
    assert init_params(CFG16, 0).count() == expected == 124593


def test_biases_and_output_layer_zero():
    p = init_params(CFG16, 0)
    for k, v in p.tensors.items():
        if k.endswith(".b") or k.startswith("out."):
            assert not v.any(), k


@pytest.mark.parametrize(
    "bad",
    [
        dict(size=18),
        dict(width=0),
        dict(depth=0),
        dict(temb_dim=7),
    ],
)
def test_invalid_config_rejected(bad):
    with pytest.raises(ConfigError):
        init_params(NetworkConfig(**{**CFG16.__dict__, **bad}), 0)


def test_sinusoid_at_zero_and_embedding_distinct():
    f0 = sinusoidal_features(0.0, 32)[0]
    assert np.array_equal(f0[:16], np.zeros(16)) and np.array_equal(f0[16:], np.ones(16))
    p = perturbed(CFG16)
    e = [time_embed(p, t)[0] for t in (0.0, 0.5, 1.0)]
    assert np.array_equal(time_embed(p, 0.5), time_embed(p, 0.5))
    for i in range(3):
        for j in range(i + 1, 3):
            assert not np.array_equal(e[i], e[j])
    assert all(np.all(np.isfinite(x)) for x in e)


@pytest.mark.parametrize("t", [-0.1, 1.01, float("nan")])
def test_time_out_of_range_rejected(t):
    with pytest.raises(ValueError):
        sinusoidal_features(t, 8)


def test_forward_shapes_and_zero_params():
    p = init_params(CFG16, 0)
    for k in p.tensors:
        p.tensors[k] = np.zeros_like(p.tensors[k])
    S = np.random.default_rng(0).standard_normal((2, 1, 16, 16))
    u = forward(p, 0.3, S, np.ones((2, 1, 16, 16)))
    assert u.shape == (2, 1, 16, 16) and not u.any()


def test_forward_rejects_bad_shapes():
    p = init_params(CFG16, 0)
    with pytest.raises(ShapeError):
        forward(p, 0.3, np.zeros((2, 1, 8, 8)), None)
    with pytest.raises(ShapeError):
        forward(p, 0.3, np.zeros((2, 1, 16, 16)), np.zeros((2, 3, 16, 16)))
    with pytest.raises(ShapeError):
        forward(p, np.zeros(3), np.zeros((2, 1, 16, 16)), None)


def test_null_condition_equals_zero_image():
    p = perturbed(CFG16)
    S = np.random.default_rng(1).standard_normal((2, 1, 16, 16))
    a = forward(p, 0.4, S, None)
    b = forward(p, 0.4, S, np.zeros((2, 1, 16, 16)))
    assert a.tobytes() == b.tobytes()


def test_guidance_identities():
    p = perturbed(CFG16)
    rng = np.random.default_rng(2)
    S, X = rng.standard_normal((2, 1, 16, 16)), rng.random((2, 1, 16, 16))
    u_c = forward(p, 0.7, S, X)
    assert guided_velocity(p, 0.7, S, X, 0.0).tobytes() == u_c.tobytes()
    u_u = forward(p, 0.7, S, None)
    assert np.array_equal(guided_velocity(p, 0.7, S, X, 0.3), u_c + 0.3 * (u_c - u_u))
    # zero params: both branches vanish, so any w gives u_c
    z = init_params(CFG16, 0)
    for w in (0.0, 0.3, 5.0):
        assert np.array_equal(guided_velocity(z, 0.7, S, X, w), forward(z, 0.7, S, X))


def test_guidance_scalar_probe():
    # substitute the branch outputs directly: u_c = 1, u_u = 0, w = 0.3
    u_c, u_u, w = 1.0, 0.0, 0.3
    assert u_c + w * (u_c - u_u) == pytest.approx(1.3)


def test_batched_times_match_per_element():
    p = perturbed(CFG16)
    rng = np.random.default_rng(3)
    S, X = rng.standard_normal((3, 1, 16, 16)), rng.random((3, 1, 16, 16))
    ts = np.array([0.1, 0.5, 0.9])
    batched = forward(p, ts, S, X)
    for i in range(3):
        single = forward(p, ts[i], S[i : i + 1], X[i : i + 1])
        assert np.allclose(batched[i], single[0], rtol=0, atol=1e-12)


def test_output_gradient_matches_finite_differences():
    cfg = NetworkConfig(size=8, width=2, depth=1, temb_dim=4)
    p = perturbed(cfg, 5)
    rng = np.random.default_rng(6)
    S, X = rng.standard_normal((1, 1, 8, 8)), rng.random((1, 1, 8, 8))
    probe = rng.standard_normal((1, 1, 8, 8))

    def scalar(tensors):
        leaves = {k: Tensor(v) for k, v in tensors.items()}
        return float(np.sum(forward_graph(leaves, cfg, 0.6, S, X).data * probe))

    leaves = {k: Tensor(v, requires_grad=True) for k, v in p.tensors.items()}
    T.backward(T.mean(T.multiply(forward_graph(leaves, cfg, 0.6, S, X), Tensor(probe))))
    for name in ("down0.conv1.w", "mid.temb.w", "time.w", "out.w"):

        def f(x, name=name):
            return scalar({**p.tensors, name: x}) / 64.0

        fd = T.finite_difference_gradient(f, p.tensors[name], 1e-5)
        assert T.max_relative_error(leaves[name].grad, fd, floor=1e-6) < 1e-4, name
