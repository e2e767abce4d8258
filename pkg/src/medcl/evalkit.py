"""Segmentation metrics, checkpoint evaluation, and the ablation / supervision-sweep harnesses."""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, stats
from scipy.spatial import cKDTree

from .config import TrainConfig
from .phantom import PhantomSample
from .segnet import SegNet

log = logging.getLogger(__name__)

_CROSS = ndimage.generate_binary_structure(2, 1)

# loss toggles of the unsupervised terms for each ablation row; supervised terms stay on
ABLATION_ROWS = {
    "1": {"mix": 0.0, "cluster": 0.0, "ac": 0.0},
    "2": {"mix": 1.0, "cluster": 0.0, "ac": 0.0},
    "3": {"mix": 0.0, "cluster": 1.0, "ac": 0.0},
    "4": {"mix": 1.0, "cluster": 1.0, "ac": 0.0},
    "full": {"mix": 1.0, "cluster": 1.0, "ac": 1.0},
}
ROW_LABELS = {"1": "#1", "2": "#2", "3": "#3", "4": "#4", "full": "MedCL"}

CSV_HEADER = ("experiment", "row", "axis_value", "split", "class", "metric", "seed", "value")


def dice(pred, gt) -> float:
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((pred & gt).sum()) / denom


def boundary(mask) -> np.ndarray:
    """Mask pixels with a 4-neighbour outside the mask (the image frame counts as outside)."""
    mask = np.asarray(mask, bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)


def hausdorff(pred, gt, percentile: float | None = None) -> float | None:
    """Symmetric Hausdorff distance between boundary pixel sets, in pixels; None if either mask is empty."""
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if not pred.any() or not gt.any():
        return None
    a = np.argwhere(boundary(pred)).astype(np.float64)
    b = np.argwhere(boundary(gt)).astype(np.float64)
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    if percentile is None:
        return float(max(d_ab.max(), d_ba.max()))
    return float(max(np.percentile(d_ab, percentile), np.percentile(d_ba, percentile)))


@dataclass
class MetricsRecord:
    case_id: str
    dice: dict[int, float]
    hd: dict[int, float | None]

    @property
    def mean_dice(self) -> float:
        return float(np.mean(list(self.dice.values())))

    @property
    def mean_hd(self) -> float | None:
        vals = [v for v in self.hd.values() if v is not None]
        return float(np.mean(vals)) if vals else None


@dataclass
class EvalSummary:
    classes: list[int]
    dice_mean: dict = field(default_factory=dict)  # class id or "avg" -> mean
    dice_std: dict = field(default_factory=dict)
    hd_mean: dict = field(default_factory=dict)
    hd_std: dict = field(default_factory=dict)
    hd_undefined: dict = field(default_factory=dict)  # class id -> cases without an HD

    def table(self) -> str:
        head = "metric  " + "  ".join(f"{'class ' + str(c):>13}" for c in self.classes) + f"  {'Avg':>13}"
        rows = [head]
        for name, mean, std in (("Dice", self.dice_mean, self.dice_std), ("HD", self.hd_mean, self.hd_std)):
            cells = []
            for key in self.classes + ["avg"]:
                mu, sd = mean.get(key), std.get(key)
                cells.append(f"{'n/a':>13}" if mu is None else f"{mu:>6.3f}±{sd:<6.3f}")
            rows.append(f"{name:<6}  " + "  ".join(cells))
        if any(self.hd_undefined.values()):
            rows.append("HD undefined (empty mask) cases: "
                        + ", ".join(f"class {c}: {n}" for c, n in self.hd_undefined.items() if n))
        return "\n".join(rows)


def _mean_std(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals))


def summarize(records: list[MetricsRecord], classes: list[int]) -> EvalSummary:
    s = EvalSummary(list(classes))
    for c in classes:
        s.dice_mean[c], s.dice_std[c] = _mean_std([r.dice[c] for r in records])
        s.hd_mean[c], s.hd_std[c] = _mean_std([r.hd[c] for r in records])
        s.hd_undefined[c] = sum(r.hd[c] is None for r in records)
    s.dice_mean["avg"], s.dice_std["avg"] = _mean_std([r.mean_dice for r in records])
    s.hd_mean["avg"], s.hd_std["avg"] = _mean_std([r.mean_hd for r in records])
    return s


def evaluate_model(model: SegNet, samples: list[PhantomSample], ids: list[str] | None = None
                   ) -> tuple[list[MetricsRecord], EvalSummary]:
    from .trainer import predict_labels

    m = model.spec.num_classes
    if samples and int(max(s.labels.max() for s in samples)) > m:
        raise ValueError(f"model predicts {m} classes but the dataset has more")
    preds = predict_labels(model, [s.image for s in samples])
    classes = list(range(1, m + 1))
    records = []
    for i, (pred, s) in enumerate(zip(preds, samples)):
        cid = ids[i] if ids else f"case_{i:04d}"
        records.append(MetricsRecord(
            cid,
            {c: dice(pred == c, s.labels == c) for c in classes},
            {c: hausdorff(pred == c, s.labels == c) for c in classes},
        ))
    return records, summarize(records, classes)


def evaluate(checkpoint, dataset_dir, split: str = "test") -> tuple[list[MetricsRecord], EvalSummary]:
    from .phantom import read_dataset
    from .trainer import load_state

    state, _ = load_state(checkpoint)
    root = Path(dataset_dir)
    split_dir = root / split if (root / split / "manifest.json").exists() else root
    samples, manifest = read_dataset(split_dir)
    if manifest.spec.num_classes != state.model.spec.num_classes:
        raise ValueError(f"checkpoint has m={state.model.spec.num_classes} but dataset has "
                         f"m={manifest.spec.num_classes}")
    return evaluate_model(state.model, samples, [e.id for e in manifest.entries])


# ---------------------------------------------------------------- sweeps


@dataclass
class RunResult:
    row: str
    axis_value: object
    seed: int
    val: EvalSummary | None
    test: EvalSummary | None
    loss_means: dict


@dataclass
class SweepResult:
    axis: str
    runs: list[RunResult]

    def points(self, split: str = "test") -> dict:
        """axis value -> (mean, std) over seeds of mean foreground Dice."""
        grouped: dict = {}
        for r in self.runs:
            summ = getattr(r, split)
            if summ is not None:
                grouped.setdefault(r.axis_value, []).append(summ.dice_mean["avg"])
        return {k: (float(np.mean(v)), float(np.std(v)), v) for k, v in grouped.items()}


def _run_one(args) -> RunResult:
    from .trainer import Dataset, train_model

    config, row, axis_value, seed, dataset = args
    if dataset is None:
        dataset = Dataset.load(config.dataset, config.trainer.max_train_samples)
    model, train_log = train_model(config, dataset)
    val = evaluate_model(model, dataset.val)[1] if dataset.val else None
    test = evaluate_model(model, dataset.test)[1] if dataset.test else None
    keys = [k for k in train_log.records[0] if k.startswith("l_")] if train_log.records else []
    loss_means = {k: float(np.mean([r[k] for r in train_log.records])) for k in keys}
    loss_means.update({f"{k}_nonzero": bool(any(r[k] != 0 for r in train_log.records)) for k in keys})
    log.info("run row=%s axis=%s seed=%d test dice=%.4f", row, axis_value, seed,
             test.dice_mean["avg"] if test else float("nan"))
    return RunResult(row, axis_value, seed, val, test, loss_means)


def _execute(jobs: list, n_jobs: int) -> list[RunResult]:
    if n_jobs <= 1:
        return [_run_one(j) for j in jobs]
    # worker processes reload the dataset from disk rather than receiving it pickled
    jobs = [(c, r, a, s, None) for c, r, a, s, _ in jobs]
    with ProcessPoolExecutor(n_jobs) as pool:
        return list(pool.map(_run_one, jobs))


def _seeded(config: TrainConfig, seed: int, overrides: dict) -> TrainConfig:
    return config.with_overrides({"trainer.seed": seed, "model.seed": seed, **overrides})


def ablate(base: TrainConfig, rows=("1", "2", "3", "4", "full"), seeds=(0, 1, 2), dataset=None,
           out_dir=None, jobs: int = 1) -> SweepResult:
    rows = [str(r).lstrip("#") for r in rows]
    if len(rows) < 2:
        raise ValueError("an ablation needs at least two rows")
    for r in rows:
        if r not in ABLATION_ROWS:
            raise ValueError(f"unknown ablation row {r!r}; choose from {sorted(ABLATION_ROWS)}")
    runs = []
    for r in rows:
        for seed in seeds:
            ov = {f"loss.{k}": v for k, v in ABLATION_ROWS[r].items()}
            runs.append((_seeded(base, seed, ov), r, ROW_LABELS[r], seed, dataset))
    result = SweepResult("row", _execute(runs, jobs))
    if out_dir is not None:
        write_csv(result, Path(out_dir) / "ablation.csv", "ablation")
    return result


def sensitivity_sweep(base: TrainConfig, counts=(1, 3, 5, 10), seeds=(0, 1, 2), dataset=None,
                      out_dir=None, jobs: int = 1) -> SweepResult:
    from .trainer import Dataset

    n_train = len((dataset or Dataset.load(base.dataset, base.trainer.max_train_samples)).train)
    for c in counts:
        if c > n_train:
            raise ValueError(f"scribble count {c} exceeds the {n_train} training images")
    runs = [(_seeded(base, seed, {"trainer.scribble_sources": int(c)}), "full", int(c), seed, dataset)
            for c in counts for seed in seeds]
    result = SweepResult("scribble_count", _execute(runs, jobs))
    if out_dir is not None:
        out = Path(out_dir)
        write_csv(result, out / "sensitivity.csv", "sensitivity")
        plot_sweep(result, out / "sensitivity.png")
    return result


def spearman(result: SweepResult, split: str = "test") -> float:
    pts = result.points(split)
    xs = sorted(pts)
    ys = [pts[x][0] for x in xs]
    if len(set(ys)) < 2:
        return float("nan")  # undefined for a flat curve
    return float(stats.spearmanr(xs, ys).statistic)


def write_csv(result: SweepResult, path, experiment: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        wr = csv.writer(f)
        wr.writerow(CSV_HEADER)
        for r in result.runs:
            for split in ("val", "test"):
                summ = getattr(r, split)
                if summ is None:
                    continue
                for key in summ.classes + ["avg"]:
                    for metric, table in (("dice", summ.dice_mean), ("hd", summ.hd_mean)):
                        value = table.get(key)
                        wr.writerow([experiment, r.row, r.axis_value, split, key, metric, r.seed,
                                     "" if value is None else f"{value:.6f}"])
    return path


def plot_sweep(result: SweepResult, path, split: str = "test") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pts = result.points(split)
    xs = sorted(pts)
    fig, ax = plt.subplots(figsize=(4.5, 3.2), dpi=120)
    ax.errorbar(xs, [pts[x][0] for x in xs], yerr=[pts[x][1] for x in xs], marker="o", capsize=3)
    ax.set_xlabel("scribble-annotated training images")
    ax.set_ylabel(f"mean {split} Dice")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def format_sweep(result: SweepResult, split: str = "test") -> str:
    pts = result.points(split)
    lines = [f"{result.axis:>16}  {'mean Dice':>9}  {'std':>6}  n"]
    for k in pts:
        mu, sd, vals = pts[k]
        lines.append(f"{str(k):>16}  {mu:9.4f}  {sd:6.4f}  {len(vals)}")
    return "\n".join(lines)
