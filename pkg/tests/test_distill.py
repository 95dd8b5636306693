import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import jitter, random_split
from mope import experiments
from mope import numerics as nx
from mope.distill import (
    AdamW,
    DistillConfig,
    LossError,
    batch_losses,
    feat_loss,
    hidden_loss,
    itc_loss,
    layer_map,
    lr_at,
    sim_loss,
    teacher_forward,
    total_loss,
    train_distill,
    warmup_steps,
)
from mope.model import ModelConfig, ModuleId, encode, init_model, structural_prune
from mope.numerics import grad_check


def softmax(row):
    e = [math.exp(v - max(row)) for v in row]
    return [x / sum(e) for x in e]


def itc_oracle(fv, fl, scale):
    logits = math.exp(scale) * fv @ fl.T
    n = len(logits)
    i2t = sum(-math.log(softmax(list(logits[i]))[i]) for i in range(n)) / n
    t2i = sum(-math.log(softmax(list(logits[:, i]))[i]) for i in range(n)) / n
    return (i2t + t2i) / 2


def sce_oracle(s, t):
    def rows(a, b):
        return sum(-sum(p * math.log(q) for p, q in zip(softmax(list(bt)), softmax(list(at)))) for at, bt in zip(a, b)) / len(a)

    return (rows(s, t) + rows(s.T, t.T)) / 2


def unit(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.fixture
def micro():
    cfg = ModelConfig(d=8, n_heads=2, d_ff=8, n_layers_v=2, n_layers_t=2, vocab_v=6, vocab_t=6, seq_v=3, seq_t=3, e=4, seed=3)
    return jitter(init_model(cfg), 0.3, seed=2)


# -- itc ----------------------------------------------------------------------------------


def test_itc_identical_pairs_at_zero_scale_is_ln2():
    f = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert itc_loss(f, f, 0.0).item() == pytest.approx(math.log(2), abs=1e-15)


def test_itc_orthonormal_large_scale_tends_to_zero():
    f = np.eye(3)
    assert itc_loss(f, f, math.log(100.0)).item() < 1e-40
    assert itc_loss(f, f, 1.0).item() > itc_loss(f, f, 3.0).item()


def test_itc_matches_direct_oracle():
    rng = np.random.default_rng(0)
    fv, fl = unit(rng.standard_normal((5, 4))), unit(rng.standard_normal((5, 4)))
    assert abs(itc_loss(fv, fl, 1.3).item() - itc_oracle(fv, fl, 1.3)) < 1e-12


def test_itc_needs_two_pairs():
    with pytest.raises(LossError):
        itc_loss(np.ones((1, 3)), np.ones((1, 3)), 0.0)


# -- sim ----------------------------------------------------------------------------------


def test_sim_two_by_two_identity_by_hand():
    s = np.eye(2)
    p = math.e / (math.e + 1)
    entropy = -(p * math.log(p) + (1 - p) * math.log(1 - p))
    assert sim_loss(s, s).item() == pytest.approx(entropy, abs=1e-15)


@given(st.integers(0, 10_000))
def test_sim_is_stationary_at_the_teacher(seed):
    t = np.random.default_rng(seed).uniform(-1, 1, (4, 4))
    for bidirectional in (True, False):
        s = nx.param(t.copy())
        loss = sim_loss(s, t, bidirectional)
        nx.backward(loss)
        assert np.max(np.abs(s.grad)) < 1e-15
    assert sim_loss(t, t).item() == pytest.approx(sce_oracle(t, t), abs=1e-12)


def test_sim_matches_oracle_off_the_optimum():
    rng = np.random.default_rng(1)
    s, t = rng.uniform(-1, 1, (3, 3)), rng.uniform(-1, 1, (3, 3))
    assert abs(sim_loss(s, t).item() - sce_oracle(s, t)) < 1e-12
    assert sim_loss(s, t).item() > sim_loss(t, t).item()


def test_sim_shape_mismatch():
    with pytest.raises(LossError):
        sim_loss(np.eye(2), np.eye(3))


# -- feat and hidden ----------------------------------------------------------------------


def test_feat_constant_offset():
    rng = np.random.default_rng(2)
    fv, fl = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    eps = 0.125
    assert feat_loss(fv + eps, fl, fv, fl).item() == pytest.approx(0.5 * eps**2, abs=1e-15)
    assert feat_loss(fv, fl, fv, fl).item() == 0.0


def test_feat_matches_direct_mse():
    rng = np.random.default_rng(3)
    a, b, c, d = (rng.standard_normal((3, 5)) for _ in range(4))
    mse = lambda x, y: sum((p - q) ** 2 for p, q in zip(x.ravel(), y.ravel())) / x.size  # noqa: E731
    assert abs(feat_loss(a, b, c, d).item() - 0.5 * (mse(a, c) + mse(b, d))) < 1e-12


def test_hidden_single_layer_offset():
    h = np.random.default_rng(4).standard_normal((2, 3, 5))
    eps = 0.5
    got = hidden_loss({"vision": [nx.const(h + eps)], "text": [nx.const(h)]}, {"vision": [h], "text": [h]},
                      {"vision": [0], "text": [0]})
    assert got.item() == pytest.approx(0.5 * eps**2, abs=1e-15)


def test_hidden_four_to_three_map_by_hand(micro):
    cfg = ModelConfig(d=8, n_heads=2, d_ff=8, n_layers_v=4, n_layers_t=4, vocab_v=6, vocab_t=6, seq_v=3, seq_t=3, e=4, seed=3)
    teacher = jitter(init_model(cfg), 0.3, seed=5)
    student = jitter(structural_prune(teacher, [ModuleId.whole_layer("vision", 2), ModuleId.whole_layer("text", 2)]), 0.1, 6)
    lmap = layer_map(student, teacher)
    assert lmap == {"vision": [0, 1, 3], "text": [0, 1, 3]}

    split = random_split(cfg, 4, seed=1)
    t = teacher_forward(teacher, split.vision, split.text)
    sh = {enc: encode(student, enc, getattr(split, enc)).hiddens for enc in ("vision", "text")}
    towers = []
    for enc in ("vision", "text"):
        terms = [np.mean((sh[enc][m].value - t.hiddens[enc][k]) ** 2) for m, k in ((0, 0), (1, 1), (2, 3))]
        towers.append(terms[0] + terms[1] + terms[2])
    assert abs(hidden_loss(sh, t.hiddens, lmap).item() - 0.5 * sum(towers)) < 1e-12


def test_hidden_map_length_mismatch():
    h = np.zeros((1, 2, 3))
    with pytest.raises(LossError):
        hidden_loss({"vision": [nx.const(h)], "text": [nx.const(h)]}, {"vision": [h], "text": [h]},
                    {"vision": [0, 1], "text": [0]})


# -- total --------------------------------------------------------------------------------


def test_total_weighted_sum():
    cfg = DistillConfig()
    comps = {"itc": 0.5, "sim": 0.2, "feat": 0.001, "hidn": 0.3}
    assert total_loss(comps, cfg) == pytest.approx(2.0, abs=1e-12)
    assert total_loss(comps, replace(cfg, beta=0.0)) == pytest.approx(1.0, abs=1e-12)
    nodes = {k: nx.const(v) for k, v in comps.items()}
    assert total_loss(nodes, cfg).item() == pytest.approx(2.0, abs=1e-12)


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        DistillConfig(beta=-1.0)


# -- gradients ----------------------------------------------------------------------------


def _loss_fn(student, teacher, split, cfg, names, component=None):
    t_out = teacher_forward(teacher, split.vision, split.text)
    lmap = layer_map(student, teacher)

    def f(*nodes):
        weights = {k: nx.const(v) for k, v in student.params.items()}
        weights.update(zip(names, nodes))
        comps = batch_losses(student, weights, split.vision, split.text, cfg, t_out, lmap)
        return comps[component] if component else total_loss(comps, cfg)

    return f


@pytest.mark.parametrize("component", ["itc", "sim", "feat", "hidn", None])
def test_losses_pass_gradient_check_on_two_layer_model(micro, component):
    teacher = jitter(micro, 0.2, seed=9)
    split = random_split(micro.config, 4, seed=2)
    # key biases shift every attention logit in a row equally, so their gradient is exactly zero
    # and a finite difference only measures rounding noise; they are left out
    names = sorted(k for k in micro.params if not k.endswith(".bk"))
    f = _loss_fn(micro, teacher, split, DistillConfig(), names, component)
    err = grad_check(f, [micro.params[k] for k in names], max_entries=6, seed=1)
    assert err < (1e-3 if component is None else 1e-4), f"{component}: {err:.2e}"


# -- training -----------------------------------------------------------------------------


def test_zero_epochs_leave_student_unchanged(micro):
    out, rep = train_distill(micro, None, random_split(micro.config, 8), DistillConfig(epochs=0))
    assert out.param_hash() == micro.param_hash()
    assert rep.steps == []


def test_teacher_is_never_modified(micro):
    teacher = jitter(micro, 0.1, seed=4)
    before = teacher.param_hash()
    student = structural_prune(teacher, [ModuleId.head("vision", 0, 1)])
    train_distill(student, teacher, random_split(micro.config, 8), DistillConfig(epochs=2, batch_size=4))
    assert teacher.param_hash() == before


def test_self_distillation_starts_at_the_entropy_floor(micro):
    split = random_split(micro.config, 8, seed=3)
    cfg = DistillConfig(epochs=1, batch_size=8)
    _, rep = train_distill(micro, micro, split, cfg)
    first = rep.steps[0]
    assert first["feat"] == 0.0 and first["hidn"] == 0.0
    # one batch holds the whole split in shuffled order; the entropy floor is permutation invariant
    t = teacher_forward(micro, split.vision, split.text)
    s = t.fv @ t.fl.T
    assert first["sim"] == pytest.approx(sce_oracle(s, s), abs=1e-12)
    assert first["total"] == pytest.approx(first["itc"] + cfg.alpha * first["sim"], abs=1e-12)


def test_loss_ledger_identity(micro):
    teacher = jitter(micro, 0.1, seed=4)
    student = structural_prune(teacher, [ModuleId.group("text", 1, 0)])
    cfg = DistillConfig(epochs=2, batch_size=4)
    _, rep = train_distill(student, teacher, random_split(micro.config, 8), cfg)
    for s in rep.steps:
        assert abs(s["total"] - (s["itc"] + cfg.alpha * s["sim"] + cfg.beta * s["feat"] + cfg.gamma * s["hidn"])) < 1e-9


def test_training_is_deterministic(micro):
    split = random_split(micro.config, 12, seed=5)
    cfg = DistillConfig(epochs=2, batch_size=4, seed=7)
    a, ra = train_distill(micro, None, split, cfg)
    b, rb = train_distill(micro, None, split, cfg)
    assert a.param_hash() == b.param_hash()
    assert ra.to_dict() == rb.to_dict()
    c, _ = train_distill(micro, None, split, replace(cfg, seed=8))
    assert c.param_hash() != a.param_hash()


def test_training_reduces_contrastive_loss(micro):
    split = random_split(micro.config, 8, seed=6)
    cfg = DistillConfig(epochs=30, batch_size=8, lr=1e-2)
    _, rep = train_distill(micro, None, split, cfg)
    assert rep.epochs[-1]["itc"] < rep.epochs[0]["itc"]


def test_schedule_warms_up_then_decays():
    cfg = DistillConfig(lr=1e-3, warmup_ratio=0.1)
    total = 100
    warm = warmup_steps(total, cfg.warmup_ratio)
    lrs = [lr_at(s, total, cfg) for s in range(total)]
    assert warm == 10
    assert lrs[0] == pytest.approx(1e-3 / 10, rel=1e-15)
    assert all(b > a for a, b in zip(lrs[:warm], lrs[1:warm]))
    assert lrs[warm - 1] == pytest.approx(1e-3) and lrs[warm] == pytest.approx(1e-3)
    assert all(b <= a for a, b in zip(lrs[warm:], lrs[warm + 1 :]))
    assert lrs[-1] < 1e-3 * 1e-2
    assert lrs == [lr_at(s, total, cfg) for s in range(total)]


def test_weight_decay_touches_matrices_only():
    params = {"w": np.ones((2, 2)), "b": np.ones(2)}
    opt = AdamW(params, weight_decay=0.5)
    opt.step(params, {"w": np.zeros((2, 2)), "b": np.zeros(2)}, lr=0.1)
    assert np.allclose(params["w"], 0.95) and np.array_equal(params["b"], np.ones(2))


def test_logit_scale_can_be_frozen(micro):
    split = random_split(micro.config, 8, seed=6)
    out, _ = train_distill(micro, None, split, DistillConfig(epochs=2, batch_size=4, freeze_logit_scale=True))
    assert out.params["logit_scale"] == micro.params["logit_scale"]


@pytest.mark.slow
def test_distillation_improves_pruned_students(teacher_runs):
    """Width-pruned student, 30 epochs: validation recall mean above its pre-retraining value."""
    wins = 0
    for seed, run in sorted(teacher_runs.items()):
        student = experiments.width_student(run)
        res = experiments.loss_trial(run, student, replace(experiments.STUDENT_TRAINING, epochs=30))
        wins += res["full"] > res["pre"]
    assert wins >= 2
