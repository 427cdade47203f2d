import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trustsampling.datasets import (
    DatasetError,
    DatasetSpec,
    InfeasibleTaskError,
    TaskSpec,
    build_constraint,
    generate,
    load_dataset,
    make_task,
    mixture_centers,
    save_dataset,
    split_heldout,
)


def test_single_component_zero_std():
    x = generate(DatasetSpec("gaussian_mixture", 50, 3, {"k": 1, "radius": 2.0, "std": 0.0}))
    np.testing.assert_array_equal(x, np.tile([2.0, 0.0], (50, 1)))


def test_mixture_component_means():
    x = generate(DatasetSpec("gaussian_mixture", 8000, 1, {"k": 8, "radius": 4.0, "std": 0.1}))
    centers = mixture_centers(8, 4.0)
    label = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    for j in range(8):
        assert np.linalg.norm(x[label == j].mean(0) - centers[j]) < 0.05
    assert np.all(np.bincount(label, minlength=8) > 800)


@pytest.mark.parametrize("kind", ["gaussian_mixture", "swiss_roll", "trajectory", "point_mass"])
def test_generation_is_deterministic(kind):
    a = generate(DatasetSpec(kind, 100, 7))
    b = generate(DatasetSpec(kind, 100, 7))
    assert a.tobytes() == b.tobytes()
    assert a.shape == (100, DatasetSpec(kind, 1).dim)
    assert not np.array_equal(a, generate(DatasetSpec(kind, 100, 8))) or kind == "point_mass"


def test_trajectory_layout():
    spec = DatasetSpec("trajectory", 500, 0)
    x = generate(spec).reshape(500, 32, 2)
    assert spec.dim == 64
    assert np.all(x[:, :, 1] >= 0.2)
    # horizontal coordinate drifts forward on average
    assert np.mean(x[:, -1, 0] - x[:, 0, 0]) > 0.4


@pytest.mark.parametrize("kind,params", [("gaussian_mixture", {"k": 0}), ("gaussian_mixture", {"std": -1}),
                                         ("swiss_roll", {"scale": 0}), ("trajectory", {"frames": 1})])
def test_invalid_params(kind, params):
    with pytest.raises(DatasetError):
        generate(DatasetSpec(kind, 10, 0, params))


def test_invalid_spec():
    with pytest.raises(DatasetError):
        DatasetSpec("moons", 10)
    with pytest.raises(DatasetError):
        DatasetSpec("swiss_roll", 0)


def test_split_heldout():
    x = np.arange(200.0).reshape(100, 2)
    tr, ho = split_heldout(x, 0.1, seed=3)
    assert tr.shape == (90, 2) and ho.shape == (10, 2)
    assert sorted(np.concatenate([tr, ho])[:, 0].tolist()) == x[:, 0].tolist()
    tr2, ho2 = split_heldout(x, 0.1, seed=3)
    assert tr.tobytes() == tr2.tobytes() and ho.tobytes() == ho2.tobytes()


def test_dataset_file_round_trip(tmp_path):
    spec = DatasetSpec("swiss_roll", 40, 2)
    x = generate(spec)
    p = tmp_path / "d.txt"
    save_dataset(p, x, spec)
    y, header = load_dataset(p)
    assert y.tobytes() == x.tobytes()
    assert header["kind"] == "swiss_roll" and header["n"] == 40 and header["dim"] == 2 and header["seed"] == 2


def test_dataset_file_errors(tmp_path):
    with pytest.raises(DatasetError, match="not found"):
        load_dataset(tmp_path / "missing.txt")
    p = tmp_path / "bad.txt"
    p.write_text("1 2\n3 4\n")
    with pytest.raises(DatasetError):
        load_dataset(p)
    p.write_text('# {"n": 3, "dim": 2}\n1 2\n3 4\n')
    with pytest.raises(DatasetError):
        load_dataset(p)


def test_pin_task_from_heldout():
    ho = generate(DatasetSpec("gaussian_mixture", 50, 9))
    task = make_task(TaskSpec("pin_x0", {"kind": "mask", "indices": [0]}, heldout_index=4), ho)
    assert task.constraint.loss(ho[4]) == 0.0
    np.testing.assert_array_equal(task.witness, ho[4])


def test_min_height_feasibility():
    data = generate(DatasetSpec("trajectory", 2000, 0))
    heights = data.reshape(2000, 32, 2)[:, :, 1]
    assert heights.max(axis=1).min() < 0.6 < heights.max(axis=1).max()
    frames = list(range(32))
    task = make_task(TaskSpec("jump", {"kind": "min_height", "threshold": 0.6, "frames": [16]}), data[:200], dataset=data)
    assert task.constraint.loss(task.witness) == 0.0
    with pytest.raises(InfeasibleTaskError):
        make_task(TaskSpec("jump", {"kind": "min_height", "threshold": 2.0, "frames": frames}), data[:200], dataset=data)


def test_obstacle_off_manifold_is_satisfied():
    data = generate(DatasetSpec("trajectory", 300, 0))
    con = build_constraint({"kind": "obstacle", "centers": [[50.0, 50.0]], "radii": 1.0, "channels": 2}, 64)
    assert np.all(con.loss(data) == 0.0)


@pytest.mark.parametrize("desc", [
    {"kind": "average", "factor": 4, "channels": 2},
    {"kind": "blur", "sigma": 1.5, "channels": 2},
    {"kind": "endpoints", "channels": 2},
    {"kind": "composite", "parts": [{"kind": "endpoints", "channels": 2},
                                     {"kind": "min_height", "threshold": 0.25, "channels": 2}]},
    {"kind": "lower_bound", "indices": [1, 3], "threshold": 0.1},
    {"kind": "angular_momentum", "threshold": -10.0, "channels": 2},
])
def test_trajectory_tasks_have_witnesses(desc):
    data = generate(DatasetSpec("trajectory", 300, 1))
    tr, ho = split_heldout(data, 0.1, 0)
    task = make_task(TaskSpec("t", desc, heldout_index=0), ho, dataset=tr)
    assert task.constraint.loss(task.witness) < 1e-6


def test_unknown_constraint_kind():
    with pytest.raises(ValueError):
        build_constraint({"kind": "teleport"}, 2)
    with pytest.raises(ValueError):
        build_constraint({"kind": "mask", "indices": [0], "target": "oracle"}, 2, np.zeros(2))
    with pytest.raises(ValueError):
        build_constraint({"kind": "mask", "indices": [0]}, 2)


def test_random_heldout_index_uses_rng():
    ho = generate(DatasetSpec("gaussian_mixture", 50, 9))
    t = TaskSpec("p", {"kind": "mask", "indices": [1]})
    a = make_task(t, ho, np.random.default_rng(5))
    b = make_task(t, ho, np.random.default_rng(5))
    np.testing.assert_array_equal(a.reference, b.reference)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 300), frac=st.floats(0.01, 0.9), seed=st.integers(0, 1000))
def test_split_sizes(n, frac, seed):
    tr, ho = split_heldout(np.zeros((n, 2)), frac, seed)
    assert tr.shape[0] + ho.shape[0] == n and ho.shape[0] >= 1
