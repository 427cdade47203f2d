import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trustsampling.datasets import DatasetSpec, generate
from trustsampling.denoiser import (
    CHECKPOINT_MAGIC,
    CheckpointError,
    DenoiserModel,
    TrainConfig,
    TrainingDivergedError,
    closed_form_point_mass_eps,
    load_checkpoint,
    save_checkpoint,
    smoothed,
    time_embedding,
    train,
)
from trustsampling.diffusion import forward_diffuse, linear_beta_schedule

from .conftest import central_diff, rel_err

POINT_MASS_CFG = TrainConfig(epochs=60, batch_size=256, learning_rate=3e-3, seed=0, hidden=(64, 64), time_embed_dim=16)


@pytest.fixture(scope="module")
def point_mass(schedule):
    data = generate(DatasetSpec("point_mass", 2048, seed=0))
    return data, train(data, schedule, POINT_MASS_CFG)


def test_layer_dims_contract():
    m = DenoiserModel.init(5, hidden=(7, 9), time_embed_dim=4, seed=0)
    assert m.layer_dims[0] == 5 + 4 and m.layer_dims[-1] == 5
    assert m.forward(np.ones(5), 10).shape == (5,)
    assert m.forward(np.ones((3, 5)), 10).shape == (3, 5)
    with pytest.raises(ValueError):
        m.forward(np.ones(4), 10)


def test_zero_weights_give_zero_output():
    m = DenoiserModel.zeros(3, hidden=(8, 8), time_embed_dim=4)
    x = np.random.default_rng(0).standard_normal((10, 3))
    assert np.all(m.forward(x, 500) == 0.0)


def test_time_embedding_shape_and_range():
    e = time_embedding([1, 500, 1000], 32)
    assert e.shape == (3, 32) and np.all(np.abs(e) <= 1.0)
    assert not np.allclose(e[0], e[1])


def test_forward_finite_on_bounded_inputs(random_model):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((500, 3))
    x *= (100 * rng.random(500) / np.linalg.norm(x, axis=1))[:, None]
    out = random_model.forward(x, rng.integers(1, 1001, 500))
    assert np.all(np.isfinite(out))


def test_vjp_matches_finite_differences(random_model):
    rng = np.random.default_rng(7)
    for _ in range(20):
        x = rng.standard_normal(3)
        t = int(rng.integers(1, 1001))
        v = rng.standard_normal(3)
        fd = central_diff(lambda z: float(v @ random_model.forward(z, t)), x, h=1e-5)
        assert rel_err(random_model.vjp_input(x, t, v), fd) < 1e-4


def test_vjp_zero_cotangent(random_model):
    assert np.all(random_model.vjp_input(np.ones(3), 5, np.zeros(3)) == 0.0)


def test_vjp_of_single_linear_layer():
    rng = np.random.default_rng(2)
    d, e = 3, 4
    W = rng.standard_normal((d + e, d))
    b = rng.standard_normal(d)
    m = DenoiserModel([d + e, d], [W], [b], time_embed_dim=e)
    v = rng.standard_normal(d)
    np.testing.assert_allclose(m.vjp_input(rng.standard_normal(d), 17, v), W[:d] @ v, rtol=1e-14)


def test_forward_with_vjp_fn_matches_separate_calls(random_model):
    x = np.random.default_rng(3).standard_normal((4, 3))
    eps, vjp = random_model.forward_with_vjp_fn(x, 40)
    v = np.ones((4, 3))
    assert eps.tobytes() == random_model.forward(x, 40).tobytes()
    np.testing.assert_array_equal(vjp(v), random_model.vjp_input(x, 40, v))


def test_parameter_grads_match_finite_differences():
    m = DenoiserModel.init(2, hidden=(5,), time_embed_dim=4, seed=1)
    rng = np.random.default_rng(4)
    h, _ = m._inputs(rng.standard_normal((6, 2)), rng.integers(1, 100, 6))
    target = rng.standard_normal((6, 2))
    _, gW, gb = m.parameter_grads(h, target)

    def loss_at(W0):
        m2 = m.copy()
        m2.weights[0][...] = W0
        return m2.parameter_grads(h, target)[0]

    fd = central_diff(loss_at, m.weights[0].copy(), h=1e-6)
    assert rel_err(gW[0], fd) < 1e-6
    assert gb[-1].shape == (2,)


def test_zero_learning_rate_leaves_weights(schedule):
    data = np.random.default_rng(0).standard_normal((64, 2))
    m0 = DenoiserModel.init(2, hidden=(8,), time_embed_dim=4, seed=5)
    res = train(data, schedule, TrainConfig(epochs=3, batch_size=16, learning_rate=0.0), model=m0)
    assert res.model.flat_parameters().tobytes() == m0.flat_parameters().tobytes()
    assert len(res.loss_history) == 3 * 4


def test_training_is_bitwise_reproducible(schedule):
    data = np.random.default_rng(0).standard_normal((128, 2))
    cfg = TrainConfig(epochs=4, batch_size=32, learning_rate=1e-3, seed=9, hidden=(8, 8), time_embed_dim=4)
    a, b = train(data, schedule, cfg), train(data, schedule, cfg)
    assert a.model.flat_parameters().tobytes() == b.model.flat_parameters().tobytes()
    assert a.loss_history == b.loss_history


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_divergence_is_reported(schedule):
    data = np.full((64, 2), 1e200)
    with pytest.raises(TrainingDivergedError):
        train(data, schedule, TrainConfig(epochs=1, batch_size=16, learning_rate=1e-3, hidden=(4,), time_embed_dim=4))


def test_training_rejects_empty_dataset(schedule):
    with pytest.raises(ValueError):
        train(np.zeros((0, 2)), schedule, TrainConfig(epochs=1))


def test_train_config_validation():
    for kw in ({"epochs": 0}, {"batch_size": 0}, {"learning_rate": -1.0}, {"lr_decay": "step"}):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


def test_point_mass_training(point_mass, schedule):
    data, res = point_mass
    assert res.final_loss < 0.05
    # the learned eps approaches the closed form on forward-process samples
    rng = np.random.default_rng(11)
    t = rng.integers(1, 1001, 2000)
    eps = rng.standard_normal((2000, 2))
    c = data[0]
    x_t = np.stack([forward_diffuse(c, int(ti), e, schedule) for ti, e in zip(t, eps)])
    pred = res.model.forward(x_t, t)
    exact = np.stack([closed_form_point_mass_eps(x, int(ti), c, schedule) for x, ti in zip(x_t, t)])
    np.testing.assert_allclose(exact, eps, atol=1e-9)
    assert np.mean((pred - exact) ** 2) < 0.05


def test_smoothed_loss_decreases(point_mass):
    _, res = point_mass
    chunks = [np.mean(c) for c in np.array_split(res.loss_history, 5)]
    assert all(a >= b for a, b in zip(chunks, chunks[1:]))
    s = smoothed(res.loss_history, 50)
    assert s[-1] < s[0]


def test_checkpoint_round_trip(tmp_path, random_model, schedule):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, random_model, schedule, {"seed": 123456789012, "epochs": 77, "final_loss": 0.125})
    ck = load_checkpoint(path)
    x = np.random.default_rng(0).standard_normal((100, 3))
    t = np.random.default_rng(1).integers(1, 1001, 100)
    assert ck.model.forward(x, t).tobytes() == random_model.forward(x, t).tobytes()
    assert ck.metadata == {"seed": 123456789012, "epochs": 77, "final_loss": 0.125}
    np.testing.assert_array_equal(ck.schedule.beta, schedule.beta)
    assert path.read_bytes()[:8] == CHECKPOINT_MAGIC


def test_checkpoint_bytes_are_deterministic(tmp_path, random_model, schedule):
    a, b = tmp_path / "a", tmp_path / "b"
    save_checkpoint(a, random_model, schedule, {"seed": 1})
    save_checkpoint(b, random_model.copy(), schedule, {"seed": 1})
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_errors(tmp_path, random_model, schedule):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, random_model, schedule)
    raw = path.read_bytes()
    bad = tmp_path / "bad"
    bad.write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    bad.write_bytes(raw[:-8])
    with pytest.raises(CheckpointError, match="payload"):
        load_checkpoint(bad)
    hlen = int.from_bytes(raw[8:16], "little")
    header = raw[16:16 + hlen].replace(b'"version": 1', b'"version": 9')
    bad.write_bytes(raw[:16] + header + raw[16 + hlen:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(bad)
    # layer_dims that disagree with the payload length
    header = raw[16:16 + hlen].replace(b'"layer_dims": [11, 16, 16, 3]', b'"layer_dims": [11, 16, 17, 3]')
    assert header != raw[16:16 + hlen]
    bad.write_bytes(raw[:8] + len(header).to_bytes(8, "little") + header + raw[16 + hlen:])
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), t=st.integers(1, 1000))
def test_vjp_is_linear_in_cotangent(random_model, seed, t):
    rng = np.random.default_rng(seed)
    x, u, v = rng.standard_normal((3, 3))
    lhs = random_model.vjp_input(x, t, 2.0 * u - v)
    rhs = 2.0 * random_model.vjp_input(x, t, u) - random_model.vjp_input(x, t, v)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12 * (1 + np.abs(rhs).max()))
