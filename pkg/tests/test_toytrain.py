import json

import numpy as np
import pytest

from kappatune.errors import ConfigError, DivergenceError
from kappatune.rng import make_rng
from kappatune.selection import TrainabilityMask, apply_plan_mask, eligible_tensors, make_plan
from kappatune.spectral import summarize_view
from kappatune.tensor_io import load_checkpoint
from kappatune.toytrain import (
    Dataset,
    ExperimentConfig,
    Hyper,
    SyntheticTask,
    build_mlp,
    default_config_path,
    finite_difference_gradients,
    forgetting_experiment,
    gradients,
    loss_value,
    make_synthetic_task,
    model_from_view,
    train_task,
)


def rel_err(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / scale


def small_config(**overrides):
    raw = {
        "layer_sizes": [4, 8, 8, 3],
        "task_a": {"input_dim": 4, "output_dim": 3, "n_train": 64, "n_eval": 64, "seed": 1, "hidden": 8},
        "task_b": {"input_dim": 4, "output_dim": 3, "n_train": 64, "n_eval": 64, "seed": 2, "hidden": 8},
        "seeds": [0, 1, 2],
        "pretrain": {"lr": 0.2, "epochs": 100},
        "finetune": {"lr": 0.05, "epochs": 30},
    }
    raw.update(overrides)
    return ExperimentConfig.from_dict(raw)


# -- model -------------------------------------------------------------------------


def test_build_deterministic():
    a = build_mlp([4, 8, 2], seed=3)
    b = build_mlp([4, 8, 2], seed=3)
    assert all(a.params[n].tobytes() == b.params[n].tobytes() for n in a.params)
    c = build_mlp([4, 8, 2], seed=4)
    assert a.params["layers.0.weight"].tobytes() != c.params["layers.0.weight"].tobytes()


def test_build_names_and_shapes():
    m = build_mlp([4, 8, 2])
    assert m.param_names() == ["layers.0.weight", "layers.0.bias", "layers.1.weight", "layers.1.bias"]
    assert m.params["layers.0.weight"].shape == (8, 4)
    assert m.params["layers.1.bias"].shape == (2,)
    assert np.all(np.abs(m.params["layers.0.weight"]) <= 0.5)


def test_build_rejects_single_size():
    with pytest.raises(ConfigError):
        build_mlp([4])


def test_checkpoint_summaries_weights_only(tmp_path):
    m = build_mlp([16, 32, 32, 32, 8])
    m.save(tmp_path / "m.ktan")
    view = load_checkpoint(tmp_path / "m.ktan")
    names = eligible_tensors(view)
    assert names == [f"layers.{i}.weight" for i in range(4)]
    assert len(summarize_view(view, names)) == 4


def test_checkpoint_reload_same_model(tmp_path):
    m = build_mlp([4, 8, 2], seed=1)
    m.save(tmp_path / "m.ktan")
    back = model_from_view(load_checkpoint(tmp_path / "m.ktan"), [4, 8, 2])
    x = make_rng(0).normal(size=(5, 4))
    np.testing.assert_array_equal(back(x), m(x))


def test_forward_last_layer_linear():
    m = build_mlp([2, 3], activation="tanh")
    x = np.array([[10.0, -10.0]])
    np.testing.assert_allclose(m(x), x @ m.params["layers.0.weight"].T + m.params["layers.0.bias"])


# -- data --------------------------------------------------------------------------


def test_task_deterministic():
    t = SyntheticTask(seed=5)
    a, b = make_synthetic_task(t), make_synthetic_task(t)
    np.testing.assert_array_equal(a.x_train, b.x_train)
    np.testing.assert_array_equal(a.y_eval, b.y_eval)
    c = make_synthetic_task(SyntheticTask(seed=6))
    assert not np.array_equal(a.x_train, c.x_train)


def test_regression_shapes():
    d = make_synthetic_task(SyntheticTask(input_dim=5, output_dim=3, n_train=10, n_eval=7))
    assert d.x_train.shape == (10, 5)
    assert d.y_train.shape == (10, 3)
    assert d.x_eval.shape == (7, 5)
    assert d.loss == "mse"


def test_blobs_learnable():
    task = SyntheticTask("classification_blobs", input_dim=4, output_dim=2, n_train=128, seed=0)
    d = make_synthetic_task(task)
    assert set(np.unique(d.y_train)) == {0, 1}
    m = build_mlp([4, 8, 2], seed=0)
    rep = train_task(m, d, None, Hyper(lr=0.5, epochs=300, loss="cross_entropy"))
    assert rep.final_loss < 0.05


def test_task_config_errors():
    with pytest.raises(ConfigError):
        SyntheticTask("spirals")
    with pytest.raises(ConfigError):
        SyntheticTask("classification_blobs", output_dim=1)


# -- gradients -------------------------------------------------------------------


@pytest.mark.parametrize("loss,activation", [
    ("mse", "tanh"), ("mse", "sigmoid"), ("cross_entropy", "tanh"), ("cross_entropy", "softplus"),
])
def test_gradient_check(loss, activation):
    rng = make_rng(17)
    m = build_mlp([3, 5, 4], activation, seed=2)
    x = rng.normal(size=(6, 3))
    y = rng.integers(0, 4, 6) if loss == "cross_entropy" else rng.normal(size=(6, 4))
    _, analytic = gradients(m, x, y, loss)
    numeric = finite_difference_gradients(m, x, y, loss)
    for name in m.params:
        assert rel_err(analytic[name], numeric[name]) <= 1e-6, name


def test_loss_examples():
    m = build_mlp([2, 2])
    m.params["layers.0.weight"][:] = 0.0
    m.params["layers.0.bias"][:] = 0.0
    x = np.zeros((3, 2))
    assert loss_value(m, x, np.ones((3, 2)), "mse") == pytest.approx(1.0)
    assert loss_value(m, x, np.array([0, 1, 0]), "cross_entropy") == pytest.approx(np.log(2))


# -- training --------------------------------------------------------------------


@pytest.fixture
def regression():
    return make_synthetic_task(SyntheticTask(input_dim=4, output_dim=2, n_train=64, n_eval=32, hidden=8, seed=3))


def test_all_frozen_is_noop(regression):
    m = build_mlp([4, 8, 2], seed=0)
    before = m.copy()
    rep = train_task(m, regression, TrainabilityMask.all(m.param_names(), False), Hyper(epochs=20))
    assert all(m.params[n].tobytes() == before.params[n].tobytes() for n in m.params)
    assert rep.epoch_losses == [rep.initial_loss] * 20
    assert rep.trainable == []


def test_all_trainable_decreases(regression):
    m = build_mlp([4, 8, 2], seed=0)
    rep = train_task(m, regression, None, Hyper(lr=0.1, epochs=50))
    assert rep.final_loss < rep.initial_loss


def test_single_tensor_changes(regression):
    m = build_mlp([4, 8, 2], seed=0)
    before = m.copy()
    mask = TrainabilityMask({n: n == "layers.1.weight" for n in m.param_names()})
    train_task(m, regression, mask, Hyper(epochs=5))
    changed = [n for n in m.params if m.params[n].tobytes() != before.params[n].tobytes()]
    assert changed == ["layers.1.weight"]


def test_minibatch_deterministic(regression):
    runs = []
    for _ in range(2):
        m = build_mlp([4, 8, 2], seed=0)
        runs.append(train_task(m, regression, None, Hyper(epochs=5, batch=16, seed=9)).epoch_losses)
    assert runs[0] == runs[1]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises(regression):
    m = build_mlp([4, 8, 2], seed=0)
    with pytest.raises(DivergenceError):
        train_task(m, regression, None, Hyper(lr=1e6, epochs=50))


def test_unknown_mask_name(regression):
    m = build_mlp([4, 8, 2])
    with pytest.raises(ConfigError):
        train_task(m, regression, {"nope": True}, Hyper(epochs=1))


def test_plan_mask_on_model(tmp_path, regression):
    m = build_mlp([4, 8, 8, 2], seed=0)
    m.save(tmp_path / "m.ktan")
    plan = make_plan(load_checkpoint(tmp_path / "m.ktan"), k=1)
    mask = apply_plan_mask(m.param_names(), plan)
    assert mask.trainable == plan.names


# -- experiment config and harness -----------------------------------------------


def test_default_config_loads():
    cfg = ExperimentConfig.load(default_config_path())
    assert cfg.layer_sizes == [16, 32, 32, 32, 8]
    assert cfg.budget_fraction == 0.25
    assert len(cfg.seeds) == 10
    assert cfg.strategies[:2] == ["lowest_kappa", "highest_kappa"]


@pytest.mark.parametrize("patch", [
    {"strategies": ["lowest_kappa"]},
    {"strategies": ["lowest_kappa", "sideways"]},
    {"layer_sizes": [4]},
    {"budget_fraction": 1.5},
    {"seeds": []},
    {"bogus": 1},
    {"pretrain": {"lr": -1}},
])
def test_config_errors(patch):
    with pytest.raises(ConfigError):
        small_config(**patch)


def test_config_load_bad_json(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "c.json")


def test_experiment_deterministic():
    a = forgetting_experiment(small_config())
    b = forgetting_experiment(small_config())
    assert a.to_json() == b.to_json()
    assert a.to_csv() == b.to_csv()
    assert a.frozen_intact
    doc = json.loads(a.to_json())
    assert doc["claim"] in ("holds", "violated")
    assert len(doc["runs"]) == 6


def test_budget_zero_freezes_everything():
    rep = forgetting_experiment(small_config(budget_fraction=0.0))
    for r in rep.runs:
        assert r.forgetting == 0.0
        assert r.loss_b_final == r.loss_b_before
        assert r.selected == []
        assert r.frozen_intact


def test_full_budget_strategies_coincide():
    rep = forgetting_experiment(small_config(budget_fraction=1.0))
    by = {(r.seed, r.strategy): r for r in rep.runs}
    for s in (0, 1, 2):
        assert sorted(by[s, "lowest_kappa"].selected) == sorted(by[s, "highest_kappa"].selected)
        assert by[s, "lowest_kappa"].loss_a_after_b == by[s, "highest_kappa"].loss_a_after_b


def test_single_seed_flagged(caplog):
    rep = forgetting_experiment(small_config(seeds=[0]))
    assert rep.claim() == "insufficient seeds for median claim"
    assert "seed" in caplog.text


def test_dataset_is_plain_container():
    d = Dataset(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)), "mse")
    assert d.loss == "mse"
