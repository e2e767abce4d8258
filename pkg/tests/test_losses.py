import math

import numpy as np
import pytest
import torch

from medcl.gradcheck import autograd_grad, numeric_grad, rel_err
from medcl.losses import (
    LossDivergedError, anatomy_consistency_loss, anatomy_consistency_terms, category_loss, cluster_loss,
    mix_consistency_loss, neg_cos, scribble_loss, total_loss,
)
from medcl.mixing import SubsetSchedule, sample_subsets

f64 = dict(dtype=torch.float64)


def t(x):
    return torch.as_tensor(np.asarray(x, float))


def ref_neg_cos(a, b):
    a, b = np.ravel(a), np.ravel(b)
    na, nb = math.sqrt(sum(v * v for v in a)), math.sqrt(sum(v * v for v in b))
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return -sum(x * y for x, y in zip(a, b)) / (na * nb)


def ref_ac(pred, protos, schedule):
    m = schedule.m
    total = 0.0
    for k in range(2, m + 1):
        j = m + k - 2
        members = [c - 1 for c in schedule.subset(k)]
        total += ref_neg_cos(pred[j], sum(pred[i] for i in members))
        total += ref_neg_cos(protos[j], sum(protos[i] for i in members))
    return total


def consistent_prediction(rng, m, schedule, shape=(6, 6)):
    singles = rng.random((m, *shape))
    combined = [singles[[c - 1 for c in schedule.subset(k)]].sum(axis=0) for k in range(2, m + 1)]
    return np.concatenate([singles, np.stack(combined)])


def test_neg_cos_cases():
    assert neg_cos(t([1.0, 2.0]), t([1.0, 2.0])).item() == pytest.approx(-1.0, abs=1e-15)
    assert neg_cos(t([1.0, 0.0]), t([0.0, 3.0])).item() == 0.0
    assert neg_cos(t([1.0, 0.0]), t([1.0, 1.0])).item() == pytest.approx(-1 / math.sqrt(2), abs=1e-12)
    assert neg_cos(t([0.0, 0.0]), t([1.0, 1.0])).item() == 0.0


def test_mix_consistency_cases():
    rng = np.random.default_rng(0)
    y = t(rng.random((5, 4, 4)))
    assert mix_consistency_loss(y, y).item() == pytest.approx(-1.0, abs=1e-12)
    ind = np.zeros((1, 4, 4))
    ind[0, :2] = 1
    assert mix_consistency_loss(t(1 - ind), t(ind)).item() == 0.0
    with pytest.raises(ValueError):
        mix_consistency_loss(y, y[:3])


def test_mix_consistency_detaches_target():
    p = torch.rand(3, 4, 4, **f64, requires_grad=True)
    q = torch.rand(3, 4, 4, **f64, requires_grad=True)
    mix_consistency_loss(p, q).backward()
    assert q.grad is None and p.grad is not None
    mix_consistency_loss(p, q, detach_target=False).backward()
    assert q.grad is not None


def test_cluster_loss_closed_form():
    v = t([[[1.0, 0.0], [0.0, 1.0]]])
    expected = -math.log(2 * math.exp(10) / (2 * math.exp(10) + 2))
    assert cluster_loss(v, 0.1).item() == pytest.approx(expected, rel=1e-10)
    assert cluster_loss(v, 0.1).item() == pytest.approx(4.54e-5, rel=1e-3)


def test_cluster_loss_single_class_is_zero():
    v = t(np.tile([[1.0, 2.0, 3.0]], (4, 1, 1)))
    assert cluster_loss(v).item() == 0.0


def test_cluster_loss_scale_invariance():
    rng = np.random.default_rng(1)
    v = rng.random((3, 3, 5))
    # one factor per class keeps every center direction; per-sample factors would move the centers
    scaled = v * rng.uniform(0.1, 10, size=(1, 3, 1))
    assert cluster_loss(t(v)).item() == pytest.approx(cluster_loss(t(scaled)).item(), abs=1e-12)
    single = v[:1] * rng.uniform(0.1, 10, size=(1, 3, 1))
    assert cluster_loss(t(v[:1])).item() == pytest.approx(cluster_loss(t(single)).item(), abs=1e-12)


@pytest.mark.parametrize("m", [2, 3, 4])
def test_ac_fixed_point(m):
    rng = np.random.default_rng(m)
    sched = sample_subsets(m, rng)
    pred = consistent_prediction(rng, m, sched)
    protos = consistent_prediction(rng, m, sched, shape=(5,))
    seg, proto = anatomy_consistency_terms(t(pred), t(protos), sched)
    assert seg.item() == pytest.approx(-(m - 1), abs=1e-9)
    assert proto.item() == pytest.approx(-(m - 1), abs=1e-9)
    assert anatomy_consistency_loss(t(pred), t(protos), sched).item() == pytest.approx(-2 * (m - 1), abs=1e-9)
    # positive rescaling of a combined channel keeps the optimum
    pred[m] *= 3.0
    assert anatomy_consistency_loss(t(pred), t(protos), sched).item() == pytest.approx(-2 * (m - 1), abs=1e-9)


def test_ac_orthogonal_is_zero():
    sched = SubsetSchedule((1, 2))
    pred = np.zeros((3, 2, 2))
    pred[0, 0, 0] = pred[1, 0, 1] = 1.0
    pred[2, 1, 1] = 1.0
    protos = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
    assert anatomy_consistency_loss(t(pred), t(protos), sched).item() == 0.0


def test_ac_matches_scalar_reference():
    rng = np.random.default_rng(2)
    for _ in range(20):
        m = int(rng.integers(2, 5))
        sched = sample_subsets(m, rng)
        pred, protos = rng.random((2 * m - 1, 4, 3)), rng.normal(size=(2 * m - 1, 6))
        got = anatomy_consistency_loss(t(pred), t(protos), sched).item()
        assert got == pytest.approx(ref_ac(pred, protos, sched), abs=1e-10)


def test_ac_batched_averages_segmentation_term():
    rng = np.random.default_rng(3)
    sched = sample_subsets(3, rng)
    preds, protos = rng.random((4, 5, 3, 3)), rng.random((5, 4))
    seg_b, proto_b = anatomy_consistency_terms(t(preds), t(protos), sched, batched=True)
    seg_each = [anatomy_consistency_terms(t(p), t(protos), sched)[0].item() for p in preds]
    assert seg_b.item() == pytest.approx(np.mean(seg_each), abs=1e-12)


def test_scribble_loss_cases():
    probs = np.zeros((3, 2, 2))
    probs[1] = 1.0
    scr = np.full((2, 2), 255)
    scr[0, 0] = scr[1, 1] = 1
    loss, sup = scribble_loss(t(probs), scr)
    assert sup and loss.item() == pytest.approx(-1.0, abs=1e-12)
    probs = np.full((2, 1, 1), 0.5)
    loss, _ = scribble_loss(t(probs), np.array([[0]]))
    assert loss.item() == pytest.approx(0.02648, abs=1e-5)
    assert loss.item() == pytest.approx(-(math.log(0.5) + 2 * 0.5 / 1.5), abs=1e-12)


def test_scribble_loss_ignores_unannotated_pixels():
    rng = np.random.default_rng(4)
    probs = rng.dirichlet(np.ones(4), size=(5, 5)).transpose(2, 0, 1)
    scr = np.full((5, 5), 255)
    scr[1, 2], scr[3, 3] = 2, 0
    base = scribble_loss(t(probs), scr)[0].item()
    other = rng.dirichlet(np.ones(4), size=(5, 5)).transpose(2, 0, 1)
    keep = scr != 255
    other[:, keep] = probs[:, keep]
    assert scribble_loss(t(other), scr)[0].item() == base


def test_scribble_loss_unsupervised():
    loss, sup = scribble_loss(torch.rand(3, 4, 4, **f64), np.full((4, 4), 255))
    assert not sup and loss.item() == 0.0


def test_category_loss_cases():
    probs = np.zeros((4, 2, 2))
    probs[0, 0], probs[2, 1] = 1.0, 1.0
    assert category_loss(t(probs), {2}).item() == 0.0
    half = np.array([0.25, 0.25, 0.5]).reshape(3, 1, 1)
    assert category_loss(t(half), {1}).item() == pytest.approx(math.log(2), abs=1e-12)
    assert category_loss(t(half), set()).item() == pytest.approx(math.log(4), abs=1e-12)


def test_category_loss_decreases_when_absent_mass_moves():
    p = np.array([0.2, 0.3, 0.4, 0.1]).reshape(4, 1, 1)
    before = category_loss(t(p), {1}).item()
    for target in (0, 1):
        q = p.copy()
        q[target] += 0.2
        q[3] -= 0.1
        q[2] -= 0.1
        assert category_loss(t(q), {1}).item() < before


def test_total_loss_arithmetic():
    terms = dict(zip(("mix", "cluster", "ac", "map", "scribble", "category"), (1.0, 2, 3, 4, 5, 6)))
    assert total_loss(terms).total == 21
    zero = total_loss(terms, {k: 0 for k in terms})
    assert zero.total == 0 and zero.as_dict()["l_mix"] == 0.0
    out = total_loss({k: torch.tensor(float(v)) for k, v in terms.items()}, {"ac": 0})
    assert out.total == pytest.approx(18) and out.ac == 0.0
    assert out.objective.item() == pytest.approx(18)


def test_total_loss_diverged_names_term():
    with pytest.raises(LossDivergedError, match="cluster") as err:
        total_loss({"mix": 1.0, "cluster": float("nan")})
    assert err.value.term == "cluster"
    # a disabled term is never inspected
    assert total_loss({"cluster": float("inf")}, {"cluster": 0}).total == 0


# finite-difference checks, 20 random double-precision points per loss

def _check(f, x):
    return rel_err(autograd_grad(f, x), numeric_grad(f, x))


def test_grad_mix_consistency():
    rng = np.random.default_rng(10)
    for _ in range(20):
        target = t(rng.random((3, 4, 4)))
        assert _check(lambda p: mix_consistency_loss(p, target), t(rng.random((3, 4, 4)))) <= 1e-5


def test_grad_cluster():
    rng = np.random.default_rng(11)
    for _ in range(20):
        assert _check(lambda v: cluster_loss(v, 0.5), t(rng.normal(size=(2, 3, 4)))) <= 1e-5


def test_grad_anatomy_consistency():
    rng = np.random.default_rng(12)
    sched = sample_subsets(3, 0)
    for _ in range(20):
        pred, protos = t(rng.random((5, 3, 3))), t(rng.normal(size=(5, 4)))
        assert _check(lambda p: anatomy_consistency_loss(p, protos, sched), pred) <= 1e-5
        assert _check(lambda a: anatomy_consistency_loss(pred, a, sched), protos) <= 1e-5


def test_grad_scribble():
    rng = np.random.default_rng(13)
    for _ in range(20):
        probs = t(rng.uniform(0.05, 1, size=(4, 3, 3)))
        scr = np.where(rng.random((3, 3)) < 0.5, rng.integers(0, 4, size=(3, 3)), 255)
        scr[0, 0] = 1
        assert _check(lambda p: scribble_loss(p, scr)[0], probs) <= 1e-5


def test_grad_category():
    rng = np.random.default_rng(14)
    for _ in range(20):
        probs = t(rng.uniform(0.05, 1, size=(4, 3, 3)))
        psi = {int(c) for c in rng.choice([1, 2, 3], size=int(rng.integers(0, 3)), replace=False)}
        assert _check(lambda p: category_loss(p, psi), probs) <= 1e-5
