"""Fast correctness checks against independent oracles, run by ``medcl selfcheck``."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import torch

from . import losses as L
from .evalkit import dice, hausdorff
from .gradcheck import autograd_grad, numeric_grad, rel_err
from .mixing import BoundingBoxMask, MixedSample, SubsetSchedule, inter_mix, intra_mix, sample_bbox, sample_subsets
from .sinkhorn import compute_scores, mapping_loss, normalize_prototypes, sinkhorn

FAULTS = ("sinkhorn-normalization",)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float

    def to_json(self) -> dict:
        return {"name": self.name, "passed": self.passed, "detail": self.detail, "seconds": round(self.seconds, 3)}


def _faulty_sinkhorn(scores, eps=0.05, niters=3):
    # drops the final per-pixel normalization, as a broken implementation would
    Q = sinkhorn(scores, eps, niters)
    return Q * torch.linspace(0.9, 1.1, Q.shape[0], dtype=Q.dtype)[:, None]


def _uv_reference(scores: np.ndarray, eps: float, iters: int) -> np.ndarray:
    d, n = scores.shape
    K = np.exp((scores - scores.max()) / eps)
    u, v = np.ones(d), np.ones(n)
    for _ in range(iters):
        u = (1.0 / d) / (K @ v)
        v = (1.0 / n) / (K.T @ u)
    plan = u[:, None] * K * v[None, :]
    return (plan / plan.sum(axis=0, keepdims=True)).T


def check_row_stochasticity(sk) -> str:
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        d, n = rng.integers(2, 9, size=2)
        Q = sk(torch.as_tensor(rng.normal(size=(d, n))))
        worst = max(worst, float((Q.sum(dim=1) - 1).abs().max()))
    assert worst <= 1e-6, f"row sums off by {worst:.2e}"
    return f"max |row sum - 1| = {worst:.1e}"


def check_marginals(sk) -> str:
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(20):
        d, n = rng.integers(2, 9, size=2)
        a = normalize_prototypes(torch.as_tensor(rng.normal(size=(3, d))))
        Q = sk(compute_scores(a, torch.as_tensor(rng.random((3, n)))), 0.05, 1000)
        worst = max(worst, float((Q.mean(dim=0) - 1.0 / d).abs().max()))
    assert worst <= 1e-3, f"prototype marginals off by {worst:.2e}"
    return f"max marginal error = {worst:.1e}"


def check_sinkhorn_reference(sk) -> str:
    s = np.array([[10.0, 0.0], [0.0, 10.0]])
    err = float(np.abs(sk(torch.as_tensor(s), 0.05, 200).numpy() - _uv_reference(s, 0.05, 10_000)).max())
    assert err <= 1e-6, f"2x2 plan differs from the long-run reference by {err:.2e}"
    return f"2x2 error = {err:.1e}"


def check_loss_gradients(sk) -> str:
    rng = np.random.default_rng(2)
    t = lambda x: torch.as_tensor(np.asarray(x, float))
    sched = sample_subsets(3, 0)
    worst = {}
    for _ in range(5):
        s = t(rng.normal(size=(3, 4)))
        Q = sk(s)
        target, protos = t(rng.random((5, 3, 3))), t(rng.normal(size=(5, 4)))
        scr = np.where(rng.random((3, 3)) < 0.5, rng.integers(0, 4, size=(3, 3)), 255)
        scr[0, 0] = 1
        cases = {
            "mapping": (lambda x: mapping_loss(x, Q, 0.5), s),
            "mix": (lambda p: L.mix_consistency_loss(p, target), t(rng.random((5, 3, 3)))),
            "cluster": (lambda v: L.cluster_loss(v, 0.5), t(rng.normal(size=(2, 3, 4)))),
            "ac": (lambda p: L.anatomy_consistency_loss(p, protos, sched), t(rng.random((5, 3, 3)))),
            "scribble": (lambda p: L.scribble_loss(p, scr)[0], t(rng.uniform(0.05, 1, size=(4, 3, 3)))),
            "category": (lambda p: L.category_loss(p, {2}), t(rng.uniform(0.05, 1, size=(4, 3, 3)))),
        }
        for name, (f, x) in cases.items():
            worst[name] = max(worst.get(name, 0.0), rel_err(autograd_grad(f, x), numeric_grad(f, x)))
    bad = [k for k, v in worst.items() if v > 1e-5]
    assert not bad, "gradient mismatch in " + ", ".join(f"{k} ({worst[k]:.1e})" for k in bad)
    return f"worst relative error {max(worst.values()):.1e}"


def check_mix_identities(sk) -> str:
    rng = np.random.default_rng(3)
    for _ in range(50):
        x = rng.random((12, 12))
        ib = sample_bbox(12, 12, (0.1, 0.5), rng).mask
        theta = rng.uniform(-15, 15)
        assert np.array_equal(intra_mix(x, ib, 1.0, theta), x), "beta'=1 changed the image"
        assert np.array_equal(intra_mix(x, np.ones_like(x), rng.random(), theta), x), "full box changed the image"
        assert np.abs(intra_mix(x, ib, rng.random(), 0.0) - x).max() <= 1e-12, "theta=0 changed the image"
        sched = SubsetSchedule((1, 2))
        s1 = MixedSample(x, BoundingBoxMask(ib, (0, 0, 1, 1)), sched)
        s2 = MixedSample(rng.random((12, 12)), BoundingBoxMask(ib, (0, 0, 1, 1)), sched)
        assert np.array_equal(inter_mix(s1, s2, 1.0).image, x), "inter-mix with beta=1 changed x'_1"
    return "50 random inputs"


def _brute_boundary(mask):
    h, w = mask.shape
    out = []
    for i, j in zip(*np.nonzero(mask)):
        if any(not (0 <= i + di < h and 0 <= j + dj < w) or not mask[i + di, j + dj]
               for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1))):
            out.append((i, j))
    return out


def _brute_hd(a, b):
    if not a.any() or not b.any():
        return None
    pa, pb = _brute_boundary(a), _brute_boundary(b)
    dmin = lambda p, pts: min(math.hypot(p[0] - q[0], p[1] - q[1]) for q in pts)
    return max(max(dmin(p, pb) for p in pa), max(dmin(q, pa) for q in pb))


def check_metric_oracles(sk) -> str:
    a = np.zeros((6, 6), bool)
    b = np.zeros_like(a)
    a[1:3, 1:3], b[1:3, 2:4] = True, True
    assert dice(a, b) == 0.5, "block-shift Dice is not 0.5"
    p, q = np.zeros((8, 8), bool), np.zeros((8, 8), bool)
    p[0, 0], q[3, 4] = True, True
    assert hausdorff(p, q) == 5.0, "3-4-5 Hausdorff is not 5"
    rng = np.random.default_rng(4)
    for _ in range(50):
        a, b = rng.random((16, 16)) < 0.3, rng.random((16, 16)) < 0.3
        ref = 2 * (a & b).sum() / (a.sum() + b.sum()) if a.any() or b.any() else 1.0
        assert dice(a, b) == ref, "Dice differs from brute force"
        assert hausdorff(a, b) == _brute_hd(a, b), "Hausdorff differs from brute force"
    return "50 random mask pairs"


CHECKS = (
    ("sinkhorn row-stochasticity", check_row_stochasticity),
    ("sinkhorn marginals", check_marginals),
    ("sinkhorn long-run reference", check_sinkhorn_reference),
    ("loss gradients", check_loss_gradients),
    ("mix identities", check_mix_identities),
    ("metric oracles", check_metric_oracles),
)


def run_checks(fault: str | None = None) -> list[CheckResult]:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}")
    sk = _faulty_sinkhorn if fault == "sinkhorn-normalization" else sinkhorn
    results = []
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            detail, ok = fn(sk), True
        except AssertionError as err:
            detail, ok = str(err), False
        results.append(CheckResult(name, ok, detail, time.perf_counter() - t0))
    return results
