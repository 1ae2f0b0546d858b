import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dso2d import flow
from dso2d.errors import InputError
from dso2d.flow import (GuidanceConfig, PretrainConfig, corrupt, draw_noise, fm_loss, pretrain,
                        sample, sample_batch, sample_time, sq_error)
from dso2d.nn import MlpModel


def constant_velocity_model(c, latent_dim=3, cond_dim=2):
    m = MlpModel.init(latent_dim, cond_dim, (5,), time_dim=4)
    for layer in m.layers:
        layer.weight.data[...] = 0.0
        layer.bias.data[...] = 0.0
    m.layers[-1].bias.data[...] = c
    return m


def test_corrupt_endpoints_and_velocity():
    rng = np.random.default_rng(0)
    x0, eps = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    np.testing.assert_array_equal(corrupt(x0, np.zeros(4), eps), x0)
    np.testing.assert_array_equal(corrupt(x0, np.ones(4), eps), eps)
    h = 1e-6
    t = np.full(4, 0.3)
    slope = (corrupt(x0, t + h, eps) - corrupt(x0, t - h, eps)) / (2 * h)
    np.testing.assert_allclose(slope, eps - x0, atol=1e-8)
    with pytest.raises(InputError):
        corrupt(x0, t, eps[:, :2])


def test_time_distribution_is_logit_normal():
    t = sample_time(20000, seed=1)
    z = np.log(t / (1 - t))
    assert (t > 0).all() and (t < 1).all()
    assert abs(z.mean() - 1.0) < 0.03 and abs(z.std() - 1.0) < 0.03
    np.testing.assert_array_equal(t, sample_time(20000, seed=1))


def test_draw_noise_drop_rate():
    _, eps, keep = draw_noise(3, 10000, 4, drop_prob=0.1)
    assert eps.shape == (10000, 4)
    assert abs((~keep).mean() - 0.1) < 0.01
    assert draw_noise(3, 5, 4, 0.0)[2].all()


def test_perfect_predictor_has_zero_error(monkeypatch):
    rng = np.random.default_rng(2)
    x0, eps = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    t = rng.uniform(0.1, 0.9, 6)
    model = constant_velocity_model(0.0)
    from dso2d.tensor import Tensor
    monkeypatch.setattr(flow, "forward", lambda m, a, xt, c, tt: Tensor(eps - x0))
    assert sq_error(model, None, x0, rng.normal(size=(6, 2)), t, eps).data.max() == 0.0


def test_fm_loss_matches_manual_mean():
    model = MlpModel.init(3, 2, (6,), time_dim=4, seed=1)
    rng = np.random.default_rng(4)
    x0, cond = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))
    t, eps, _ = draw_noise(77, 5, 3)
    manual = sq_error(model, None, x0, cond, t, eps).data.mean()
    assert fm_loss(model, None, x0, cond, seed=77).item() == manual


def test_fm_loss_gradient_reaches_every_parameter():
    model = MlpModel.init(3, 2, (6,), time_dim=4, seed=1)
    model.set_trainable(True)
    rng = np.random.default_rng(4)
    fm_loss(model, None, rng.normal(size=(5, 3)), rng.normal(size=(5, 2)), seed=0).backward()
    assert all(p.grad is not None and np.abs(p.grad).sum() > 0 for p in model.parameters())


@pytest.mark.parametrize("steps", [1, 4, 12])
def test_constant_velocity_sampling_is_exact(steps):
    c = np.array([0.5, -1.0, 2.0])
    model = constant_velocity_model(c)
    x, valid = sample_batch(model, None, np.zeros((2, 2)), [10, 11], steps=steps)
    x_ref, _ = sample_batch(constant_velocity_model(0.0), None, np.zeros((2, 2)), [10, 11], steps=steps)
    np.testing.assert_allclose(x, x_ref - c, atol=1e-12)
    assert valid.all()


def test_guidance_combines_velocities(monkeypatch):
    model = constant_velocity_model(0.0)

    def fake_velocity(m, a, x, cond, t):
        return np.repeat(cond.sum(axis=1, keepdims=True), x.shape[1], axis=1) + 1.0

    monkeypatch.setattr(flow, "velocity", fake_velocity)
    conds = np.array([[1.0, 2.0]])
    x1, _ = sample_batch(model, None, conds, [0], steps=1, guidance=GuidanceConfig(scale=1.0))
    x3, _ = sample_batch(model, None, conds, [0], steps=1, guidance=GuidanceConfig(scale=3.0))
    noise, _ = sample_batch(model, None, np.zeros((1, 2)), [0], steps=1)
    noise = noise + 1.0  # undo the unconditional velocity of 1
    # v = vu + s (vc - vu) with vu = 1, vc = 4
    np.testing.assert_allclose(x1, noise - 4.0)
    np.testing.assert_allclose(x3, noise - (1.0 + 3.0 * 3.0))


def test_sampling_is_per_row_seeded():
    model = MlpModel.init(3, 2, (6,), time_dim=4, seed=1)
    conds = np.random.default_rng(0).normal(size=(3, 2))
    x, _ = sample_batch(model, None, conds, [5, 6, 7])
    single, ok = sample(model, None, conds[1], seed=6)
    np.testing.assert_allclose(single, x[1], atol=1e-13)
    assert ok


def test_nonfinite_rows_are_flagged():
    model = constant_velocity_model(np.array([np.inf, 0.0, 0.0]))
    _, valid = sample_batch(model, None, np.zeros((2, 2)), [1, 2])
    assert not valid.any()


def test_guidance_config_validation():
    with pytest.raises(InputError):
        GuidanceConfig(drop_prob=1.0)
    with pytest.raises(InputError):
        GuidanceConfig(scale=-1.0)
    with pytest.raises(InputError):
        sample_batch(constant_velocity_model(0.0), None, np.zeros((1, 2)), [0], steps=0)


def test_pretrain_learns_and_is_deterministic():
    rng = np.random.default_rng(5)
    cond = rng.normal(size=(200, 2))
    x0 = np.concatenate([cond, cond[:, :1]], axis=1)
    cfg = PretrainConfig(steps=300, batch_size=32, lr=3e-3, warmup_steps=20, hidden=(32, 32),
                         time_dim=8, seed=3)
    model, log = pretrain(x0, cond, cfg)
    first = np.mean([r["loss"] for r in log[:30]])
    last = np.mean([r["loss"] for r in log[-30:]])
    assert last < 0.7 * first
    again, log2 = pretrain(x0, cond, cfg)
    assert [r["loss"] for r in log] == [r["loss"] for r in log2]
    for (_, a), (_, b) in zip(model.named_tensors(), again.named_tensors()):
        np.testing.assert_array_equal(a, b)


@given(hnp.arrays(np.float64, (3, 2), elements=st.floats(-5, 5)),
       hnp.arrays(np.float64, (3, 2), elements=st.floats(-5, 5)),
       st.floats(0, 1))
def test_corrupt_is_convex_combination(x0, eps, t):
    xt = corrupt(x0, np.full(3, t), eps)
    assert (xt >= np.minimum(x0, eps) - 1e-12).all()
    assert (xt <= np.maximum(x0, eps) + 1e-12).all()


@pytest.fixture(scope="module")
def one_point_model():
    x_star = np.array([0.8, -0.3, 0.5, 0.1])
    cond = np.tile([1.0, 0.0], (64, 1))
    cfg = PretrainConfig(steps=600, batch_size=32, lr=3e-3, warmup_steps=20, hidden=(32, 32),
                         time_dim=8, drop_prob=0.0, seed=1)
    model, _ = pretrain(np.tile(x_star, (64, 1)), cond, cfg)
    return model, x_star


def test_overfit_single_point(one_point_model):
    from dso2d.evalkit import geometry_scores
    from dso2d.geometry import decode_shape
    model, x_star = one_point_model
    x, valid = sample_batch(model, None, np.tile([1.0, 0.0], (4, 1)), [1, 2, 3, 4])
    assert valid.all()
    for row in x:
        cd, _ = geometry_scores(decode_shape(row), decode_shape(x_star), seed=0)
        assert cd < 0.05


def test_euler_refinement_converges(one_point_model):
    model, _ = one_point_model
    conds = np.array([[1.0, 0.0], [0.3, -0.2]])
    runs = {n: sample_batch(model, None, conds, [7, 8], steps=n)[0] for n in (4, 8, 16, 32, 64)}
    gaps = [np.linalg.norm(runs[n] - runs[2 * n]) for n in (4, 8, 16, 32)]
    assert gaps == sorted(gaps, reverse=True)


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 1))
def test_corrupt_is_affine(a, b, t):
    rng = np.random.default_rng(0)
    x0, eps = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    tt = np.full(2, t)
    lhs = corrupt(a * x0 + b * eps, tt, a * eps + b * x0)
    rhs = a * corrupt(x0, tt, eps) + b * corrupt(eps, tt, x0)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)
    np.testing.assert_allclose(corrupt(x0, tt, np.zeros_like(x0)), (1 - t) * x0)
