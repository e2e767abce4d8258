import csv
import math

import numpy as np
import pytest

from medcl.config import TrainConfig
from medcl.evalkit import (
    CSV_HEADER, EvalSummary, MetricsRecord, RunResult, SweepResult, ablate, dice, evaluate, evaluate_model,
    format_sweep, hausdorff, sensitivity_sweep, spearman, summarize, write_csv,
)
from medcl.phantom import PhantomSpec, generate_sample, write_dataset
from medcl.trainer import Dataset, init_state, save_state


def brute_dice(a, b):
    inter = sa = sb = 0
    for x, y in zip(a.ravel(), b.ravel()):
        inter += bool(x and y)
        sa += bool(x)
        sb += bool(y)
    return 1.0 if sa + sb == 0 else 2 * inter / (sa + sb)


def brute_boundary(mask):
    h, w = mask.shape
    pts = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ni, nj = i + di, j + dj
                if not (0 <= ni < h and 0 <= nj < w) or not mask[ni, nj]:
                    pts.append((i, j))
                    break
    return pts


def brute_hd(a, b):
    if not a.any() or not b.any():
        return None
    pa, pb = brute_boundary(a), brute_boundary(b)
    dist = lambda p, q: math.sqrt((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2)
    d_ab = max(min(dist(p, q) for q in pb) for p in pa)
    d_ba = max(min(dist(p, q) for q in pa) for p in pb)
    return max(d_ab, d_ba)


def test_dice_cases():
    a = np.zeros((6, 6), bool)
    a[1:3, 1:3] = True
    assert dice(a, a) == 1.0
    b = np.zeros_like(a)
    b[1:3, 2:4] = True
    assert dice(a, b) == 0.5
    c = np.zeros_like(a)
    c[4:, 4:] = True
    assert dice(a, c) == 0.0
    assert dice(np.zeros_like(a), np.zeros_like(a)) == 1.0
    with pytest.raises(ValueError):
        dice(a, a[:3])


def test_hausdorff_cases():
    a = np.zeros((8, 8), bool)
    b = np.zeros_like(a)
    a[0, 0], b[3, 4] = True, True
    assert hausdorff(a, b) == 5.0
    assert hausdorff(a, a) == 0.0
    assert hausdorff(a, np.zeros_like(a)) is None
    with pytest.raises(ValueError):
        hausdorff(a, a[:4])


def test_metrics_match_brute_force():
    rng = np.random.default_rng(0)
    for i in range(200):
        p = rng.uniform(0.05, 0.7)
        a, b = rng.random((16, 16)) < p, rng.random((16, 16)) < p
        if i % 20 == 0:
            b[:] = False
        assert dice(a, b) == brute_dice(a, b)
        assert hausdorff(a, b) == brute_hd(a, b)


def test_summary_mean_matches_records():
    rng = np.random.default_rng(1)
    recs = [MetricsRecord(f"c{i}", {1: rng.random(), 2: rng.random()}, {1: rng.random() * 5, 2: None})
            for i in range(7)]
    s = summarize(recs, [1, 2])
    assert abs(s.dice_mean["avg"] - np.mean([r.mean_dice for r in recs])) <= 1e-12
    assert abs(s.dice_mean[1] - np.mean([r.dice[1] for r in recs])) <= 1e-12
    assert s.hd_mean[2] is None and s.hd_undefined[2] == 7
    assert "Avg" in s.table() and "class 2: 7" in s.table()


@pytest.fixture(scope="module")
def disk_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    spec = PhantomSpec(16, 16, 2)
    for split, base, n in (("train", 0, 4), ("val", 100, 2), ("test", 200, 3)):
        write_dataset([generate_sample(spec, base + i, 0.1) for i in range(n)], None, root / split,
                      split=split, spec=spec, coverage=0.1)
    return root


def tiny_config(dataset, **ov):
    base = {"dataset": str(dataset), "model.width": 4, "model.depth": 2, "trainer.batch_size": 2,
            "trainer.steps_per_epoch": 2, "trainer.lr": 1e-3, "loss.num_prototypes": 4, "trainer.scribble_sources": 2}
    return TrainConfig().with_overrides({**base, **ov})


def test_evaluate_checkpoint(disk_dataset, tmp_path):
    cfg = tiny_config(disk_dataset)
    state = init_state(cfg, 2, 16)
    save_state(tmp_path / "a.ckpt", state, cfg)
    recs, summ = evaluate(tmp_path / "a.ckpt", disk_dataset, "test")
    assert len(recs) == 3 and recs[0].case_id.startswith("test_")
    again, _ = evaluate(tmp_path / "a.ckpt", disk_dataset, "test")
    assert [r.dice for r in again] == [r.dice for r in recs]
    # m mismatch
    state3 = init_state(cfg, 3, 16)
    save_state(tmp_path / "b.ckpt", state3, cfg)
    with pytest.raises(ValueError, match="m=3"):
        evaluate(tmp_path / "b.ckpt", disk_dataset, "test")


def test_ablation_bookkeeping(disk_dataset, tmp_path):
    ds = Dataset.load(disk_dataset)
    res = ablate(tiny_config(disk_dataset), rows=["1", "full"], seeds=(0, 1, 2), dataset=ds, out_dir=tmp_path)
    assert len(res.runs) == 6
    assert set(res.points("val")) == {"#1", "MedCL"}
    by_row = {r.row: r.loss_means for r in res.runs}
    assert all(by_row["full"][f"l_{t}_nonzero"] for t in ("mix", "cluster", "ac", "scribble", "category"))
    assert not any(by_row["1"][f"l_{t}_nonzero"] for t in ("mix", "cluster", "ac"))
    rows = list(csv.reader(open(tmp_path / "ablation.csv")))
    assert tuple(rows[0]) == CSV_HEADER
    assert {r[1] for r in rows[1:]} == {"1", "full"}


def test_row2_has_no_cluster_terms(disk_dataset):
    ds = Dataset.load(disk_dataset)
    res = ablate(tiny_config(disk_dataset), rows=["2", "3"], seeds=(0,), dataset=ds)
    row2 = next(r for r in res.runs if r.row == "2").loss_means
    assert row2["l_mix_nonzero"] and not row2["l_cluster_nonzero"] and not row2["l_ac_nonzero"]
    with pytest.raises(ValueError):
        ablate(tiny_config(disk_dataset), rows=["1"], dataset=ds)


def test_sweep_outputs(disk_dataset, tmp_path):
    ds = Dataset.load(disk_dataset)
    res = sensitivity_sweep(tiny_config(disk_dataset), counts=(0, 4), seeds=(0,), dataset=ds, out_dir=tmp_path)
    assert sorted(res.points()) == [0, 4]
    assert (tmp_path / "sensitivity.png").read_bytes()[:4] == b"\x89PNG"
    assert (tmp_path / "sensitivity.csv").exists()
    assert "scribble_count" in format_sweep(res)
    with pytest.raises(ValueError):
        sensitivity_sweep(tiny_config(disk_dataset), counts=(5,), dataset=ds)


def _summary(v):
    s = EvalSummary([1])
    s.dice_mean = {1: v, "avg": v}
    s.dice_std = {1: 0.0, "avg": 0.0}
    return s


def test_spearman_and_csv(tmp_path):
    runs = [RunResult("full", c, seed, None, _summary(0.1 * c + 0.01 * seed), {}) for c in (1, 3, 5) for seed in (0, 1)]
    res = SweepResult("scribble_count", runs)
    assert spearman(res) == pytest.approx(1.0)
    write_csv(res, tmp_path / "s.csv", "sensitivity")
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert len(rows) == 1 + 6 * 2 * 2
