import csv
import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from model_helpers import beam_inputs, path_inputs, tiny_config, unit_normalizer, with_loads
from twolevel_mgn.autodiff import ShapeError, Tensor
from twolevel_mgn.model import GraphInputs, ModelConfig, TwoLevelMGN
from twolevel_mgn.training import (AdamState, CheckpointError, NumericalError, TrainConfig, adam_step,
                                   evaluate_mse, fit_normalizer, l2_loss, load_checkpoint, normalized_mse,
                                   save_checkpoint, sensitivity_map, stream_seed, train, write_sensitivity_csv)


def small_set(n=4):
    return [beam_inputs((5, 2), k_pe=2, angle_deg=a) for a in np.linspace(-20, 20, n)]


# ---------------------------------------------------------------- normalizer

def test_normalizer_two_values():
    inp = path_inputs(n=2)
    nm = fit_normalizer([replace(inp, response=np.array([[0.0], [2.0]]))])
    assert nm.out_mean.tolist() == [1.0] and nm.out_std.tolist() == [1.0]
    assert nm.normalize_output(np.array([[0.0], [2.0]])).ravel().tolist() == [-1.0, 1.0]


def test_normalizer_constant_channel_and_errors():
    inp = path_inputs(n=4)
    nm = fit_normalizer([replace(inp, response=np.full((4, 1), 3.0))])
    assert nm.out_std.tolist() == [1e-8]
    assert np.all(nm.normalize_output(np.full((4, 1), 3.0)) == 0)
    with pytest.raises(ValueError, match="empty"):
        fit_normalizer([])
    with pytest.raises(ValueError, match="response"):
        fit_normalizer([replace(inp, response=None)])


def test_normalizer_pools_over_samples():
    sets = small_set(3)
    nm = fit_normalizer(sets)
    allresp = np.concatenate([s.response for s in sets])
    assert np.allclose(nm.out_mean, allresp.mean(axis=0), rtol=1e-14)
    assert np.allclose(nm.out_std, allresp.std(axis=0), rtol=1e-14)


# ---------------------------------------------------------------- loss

def test_l2_loss_examples():
    assert float(l2_loss(Tensor([[1.0], [2.0]]), np.array([[1.0], [2.0]])).data) == 0.0
    assert float(l2_loss(Tensor([[1.0], [-1.0]]), np.zeros((2, 1))).data) == 1.0
    with pytest.raises(ShapeError):
        l2_loss(Tensor(np.zeros((2, 1))), np.zeros((3, 1)))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_l2_loss_nonnegative_and_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(7, 2)), rng.normal(size=(7, 2))
    ab = float(l2_loss(Tensor(a), b).data)
    assert ab >= 0 and ab == float(l2_loss(Tensor(b), a).data)


# ---------------------------------------------------------------- adam

def test_adam_first_step_by_hand():
    p = Tensor(np.array([0.5]), requires_grad=True)
    p.grad = np.array([1.0])
    st_ = adam_step({"p": p}, AdamState(), lr=1e-3)
    # m_hat = v_hat = 1, so the step is lr / (1 + eps)
    assert p.data[0] - 0.5 == pytest.approx(-1e-3 / (1 + 1e-8), abs=1e-15)
    assert abs(p.data[0] - 0.5 + 9.99999e-4) < 1e-9
    assert st_.step == 1


def test_adam_matches_reference_loop():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(5, 3))
    p = Tensor(np.zeros(3), requires_grad=True)
    state = AdamState()
    m = v = np.zeros(3)
    theta = np.zeros(3)
    for t, g in enumerate(grads, start=1):
        p.grad = g.copy()
        adam_step({"p": p}, state, lr=0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta = theta - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.allclose(p.data, theta, rtol=1e-13, atol=1e-16)


def test_adam_zero_grad_and_nonfinite():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    s = adam_step({"p": p}, AdamState(), lr=1e-3)
    assert p.data.tolist() == [1.0, 2.0] and s.step == 1
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(NumericalError, match="p"):
        adam_step({"p": p}, s, lr=1e-3)


def test_train_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1)
    with pytest.raises(ValueError):
        TrainConfig(beta1=1.0)
    with pytest.raises(ValueError):
        TrainConfig(eval_every=0)


def test_stream_seeds_are_distinct_and_stable():
    assert stream_seed(0, "init") == stream_seed(0, "init")
    assert stream_seed(0, "init") != stream_seed(0, "shuffle")
    assert stream_seed(0, "init") != stream_seed(1, "init")


# ---------------------------------------------------------------- training loop

def test_lr_zero_keeps_loss_and_params():
    data = small_set(3)
    model = TwoLevelMGN(tiny_config(), seed=0)
    before = {k: v.data.copy() for k, v in model.params.items()}
    nm = fit_normalizer(data)
    r = train(model, data, [], TrainConfig(learning_rate=0.0, max_steps=6, eval_every=3), nm)
    assert all(np.array_equal(before[k], model.params[k].data) for k in before)
    # every sample is visited twice with identical loss
    assert sorted(r.train_losses[:3]) == sorted(r.train_losses[3:])


def test_training_reduces_loss_and_is_reproducible(tmp_path):
    data = small_set(4)

    def run(out):
        model = TwoLevelMGN(tiny_config(), seed=1)
        cfg = TrainConfig(learning_rate=3e-3, max_steps=60, eval_every=20, seed=2, checkpoint_dir=str(out))
        return train(model, data, data[:2], cfg)

    a = run(tmp_path / "a")
    run(tmp_path / "b")
    assert np.mean(a.train_losses[-8:]) < np.mean(a.train_losses[:8])
    for name in ("best.json", "last.json", "metrics.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "a" / "metrics.csv")))
    assert [int(r["step"]) for r in rows] == [20, 40, 60]
    assert list(rows[0]) == ["step", "train_loss", "val_mse"]


def test_best_checkpoint_not_worse_than_final(tmp_path):
    data = small_set(4)
    model = TwoLevelMGN(tiny_config(), seed=3)
    cfg = TrainConfig(learning_rate=1e-2, max_steps=80, eval_every=10, seed=0, checkpoint_dir=str(tmp_path))
    r = train(model, data, data[2:], cfg)
    best, nm, _, extra = load_checkpoint(tmp_path / "best.json")
    final_val = evaluate_mse(model, data[2:], r.normalizer)["mean"]
    best_val = evaluate_mse(best, data[2:], nm)["mean"]
    assert best_val <= final_val
    assert best_val == pytest.approx(min(m["val_mse"] for m in r.metrics), rel=1e-12)
    assert extra["step"] == r.best_step


def test_resume_is_bit_identical(tmp_path):
    data = small_set(3)
    full = TwoLevelMGN(tiny_config(), seed=4)
    cfg = dict(learning_rate=2e-3, eval_every=5, seed=9)
    train(full, data, [], TrainConfig(max_steps=10, **cfg))

    part = TwoLevelMGN(tiny_config(), seed=4)
    r = train(part, data, [], TrainConfig(max_steps=5, checkpoint_dir=str(tmp_path), **cfg))
    model, nm, state, _ = load_checkpoint(tmp_path / "last.json")
    assert state.step == 5
    train(model, data, [], TrainConfig(max_steps=10, **cfg), nm, state=state)
    assert r.normalizer.out_std == nm.out_std
    assert all(np.array_equal(full.params[k].data, model.params[k].data) for k in full.params)


def test_nonfinite_loss_names_sample():
    data = small_set(2)
    nm = fit_normalizer(data)
    bad = replace(data[0], name="broken", response=np.full_like(data[0].response, np.inf))
    with pytest.raises(NumericalError, match="non-finite loss on sample 'broken'"):
        train(TwoLevelMGN(tiny_config(), seed=0), [bad], [], TrainConfig(max_steps=1), nm)
    # relu masks the NaN embeddings, so only the gradient is non-finite here
    bad = replace(data[0], name="broken", loads=np.full_like(data[0].loads, np.inf))
    with np.errstate(invalid="ignore"), pytest.raises(NumericalError, match="gradient.*'broken'"):
        train(TwoLevelMGN(tiny_config(), seed=0), [bad], [], TrainConfig(max_steps=1), nm)


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_and_errors(tmp_path):
    data = small_set(2)
    model = TwoLevelMGN(tiny_config(), seed=0)
    nm = fit_normalizer(data)
    save_checkpoint(tmp_path / "c.json", model, nm)
    back, nm2, state, _ = load_checkpoint(tmp_path / "c.json")
    assert state is None
    assert np.array_equal(back.forward(data[0], nm2).data, model.forward(data[0], nm).data)
    doc = json.loads((tmp_path / "c.json").read_text())
    doc["params"]["dec.0.W"]["shape"] = [3, 3]
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="dec.0.W"):
        load_checkpoint(tmp_path / "bad.json")
    doc["format_version"] = 99
    (tmp_path / "v.json").write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="format_version"):
        load_checkpoint(tmp_path / "v.json")
    (tmp_path / "junk.json").write_text("{")
    with pytest.raises(CheckpointError, match="line 1"):
        load_checkpoint(tmp_path / "junk.json")


# ---------------------------------------------------------------- evaluation

class Oracle(TwoLevelMGN):
    """Predicts a fixed per-sample field regardless of parameters."""

    def __init__(self, fields):
        super().__init__(tiny_config(), seed=0)
        self.fields = fields

    def predict(self, inp, normalizer):
        return self.fields[inp.name]


def test_evaluate_mse_examples():
    data = small_set(3)
    data = [replace(d, name=f"s{i}") for i, d in enumerate(data)]
    nm = fit_normalizer(data)
    exact = Oracle({d.name: d.response for d in data})
    r = evaluate_mse(exact, data, nm)
    assert r["mean"] == 0.0 and r["per_sample"] == [0.0] * 3
    # a constant prediction at the pooled mean scores the per-sample second moment about that mean
    const = Oracle({d.name: np.full_like(d.response, nm.out_mean[0]) for d in data})
    r = evaluate_mse(const, data, nm)
    expect = [float(np.mean((d.response - nm.out_mean) ** 2)) for d in data]
    assert np.allclose(r["per_sample"], expect, rtol=1e-13)
    assert r["mean"] == pytest.approx(np.mean(expect), rel=1e-14)
    # equal node counts: the sample mean is the pooled target variance
    assert r["mean"] == pytest.approx(float(nm.out_std[0] ** 2), rel=1e-12)
    with pytest.raises(ValueError, match="no response"):
        evaluate_mse(exact, [replace(data[0], response=None)], nm)


def test_normalized_mse_scales_physical_mse():
    data = small_set(2)
    nm = fit_normalizer(data)
    model = TwoLevelMGN(tiny_config(), seed=0)
    phys = evaluate_mse(model, data, nm)["mean"]
    assert normalized_mse(model, data, nm) == pytest.approx(phys / nm.out_std[0] ** 2, rel=1e-10)


# ---------------------------------------------------------------- sensitivity

def test_sensitivity_locality_and_reach():
    inp = path_inputs(n=20, k_pe=4)
    nm = unit_normalizer()
    local = TwoLevelMGN(ModelConfig(M=2, hidden=16, heads=2, k_pe=4, block_order="GBK_only"), seed=7)
    g = sensitivity_map(local, inp, nm, 0)
    assert np.all(g[3:] == 0) and np.all(g[:3] > 0)
    glob = TwoLevelMGN(ModelConfig(M=2, hidden=16, heads=2, k_pe=4), seed=7)
    assert np.all(sensitivity_map(glob, inp, nm, 0)[3:] > 0)


def test_sensitivity_matches_finite_differences():
    inp = path_inputs(n=8, k_pe=2, group=4)
    nm = unit_normalizer()
    model = TwoLevelMGN(tiny_config(), seed=2)
    g = sensitivity_map(model, inp, nm, 5)
    num = np.zeros((8, 2))
    for i in range(8):
        for d in range(2):
            lp, lm = inp.loads.copy(), inp.loads.copy()
            lp[i, d] += 1e-6
            lm[i, d] -= 1e-6
            num[i, d] = (model.forward(with_loads(inp, lp), nm).data[5, 0]
                         - model.forward(with_loads(inp, lm), nm).data[5, 0]) / 2e-6
    assert np.allclose(g, np.linalg.norm(num, axis=1), atol=1e-7)


def test_sensitivity_zero_model_and_bad_node(tmp_path):
    inp = path_inputs(n=6, k_pe=2, group=3)
    model = TwoLevelMGN(tiny_config(), seed=0)
    for p in model.params.values():
        p.data[...] = 0.0
    g = sensitivity_map(model, inp, unit_normalizer(), 0)
    assert np.all(g == 0)
    with pytest.raises(IndexError):
        sensitivity_map(model, inp, unit_normalizer(), 6)
    write_sensitivity_csv(tmp_path / "s.csv", inp, g)
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == ["node", "x", "y", "grad_mag"] and len(rows) == 7


def test_graph_inputs_type():
    assert isinstance(small_set(1)[0], GraphInputs)
