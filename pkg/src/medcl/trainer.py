"""Training loop: batch assembly, loss evaluation, optimization, checkpoint/resume, logging."""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .config import TrainConfig
from .mixing import (
    Crop, MixedSample, SubsetSchedule, as_rng, crop_sample, epoch_units, inter_mix, make_intra_mixed,
    sample_bbox, sample_mix_ratio, sample_subsets,
)
from .phantom import UNLABELED, PhantomSample, read_dataset
from .segnet import ModelSpec, SegNet, load_checkpoint, save_checkpoint
from .sinkhorn import aggregate_prototype_vectors, compute_scores, init_prototypes, mapping_loss, normalize_prototypes, sinkhorn

log = logging.getLogger(__name__)


def deterministic_mode(config: TrainConfig | None = None) -> bool:
    env = os.environ.get("MEDCL_DETERMINISTIC")
    if env is not None:
        return env not in ("", "0", "false", "False")
    return bool(config.trainer.deterministic) if config is not None else False


def set_determinism(enabled: bool) -> None:
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------- data


@dataclass
class Dataset:
    train: list[PhantomSample]
    val: list[PhantomSample]
    test: list[PhantomSample]
    num_classes: int
    size: int

    @classmethod
    def load(cls, root, max_train: int | None = None) -> "Dataset":
        root = Path(root)
        splits = {}
        spec = None
        for name in ("train", "val", "test"):
            if (root / name / "manifest.json").exists():
                samples, manifest = read_dataset(root / name)
                splits[name] = samples
                spec = manifest.spec
            else:
                splits[name] = []
        if spec is None:
            # a bare split directory
            samples, manifest = read_dataset(root)
            splits["train"], spec = samples, manifest.spec
        if max_train is not None:
            splits["train"] = splits["train"][:max_train]
        return cls(splits["train"], splits["val"], splits["test"], spec.num_classes, spec.height)


@dataclass
class BatchPair:
    crops: tuple[Crop, Crop]
    mixed: tuple[MixedSample, MixedSample]
    inter: MixedSample
    beta: float
    scribbles: tuple[np.ndarray, np.ndarray]
    present: tuple[frozenset, frozenset]
    sources: tuple[int, int]


@dataclass
class Batch:
    pairs: list[BatchPair]
    schedule: SubsetSchedule
    epoch: int
    step: int

    @property
    def supervised(self) -> bool:
        return any((s != UNLABELED).any() for p in self.pairs for s in p.scribbles)


def run_schedule(config: TrainConfig, m: int) -> SubsetSchedule:
    # the network has no subset conditioning, so one schedule serves the whole run
    return sample_subsets(m, np.random.default_rng([config.trainer.seed, 7919]))


def _pick_source(rng, n: int, n_scribbled: int, scribbled_fraction: float | None) -> int:
    if scribbled_fraction is not None and 0 < n_scribbled < n:
        if rng.uniform() < scribbled_fraction:
            return int(rng.integers(n_scribbled))
        return int(n_scribbled + rng.integers(n - n_scribbled))
    return int(rng.integers(n))


def build_batch(dataset: Dataset, config: TrainConfig, epoch: int, step: int,
                schedule: SubsetSchedule | None = None) -> Batch:
    """Crops -> intra-mix -> paired inter-mix, fully determined by (seed, epoch, step).

    Only the first ``scribble_sources`` training images keep their scribbles; every crop keeps
    its image-level class set.
    """
    if not dataset.train:
        raise ValueError("training split is empty")
    t, mc = config.trainer, config.mix
    rng = np.random.default_rng([t.seed, epoch, step])
    schedule = schedule or run_schedule(config, dataset.num_classes)
    n = len(dataset.train)
    n_scribbled = min(t.scribble_sources, n)
    p_global = mc.global_count / max(1, mc.global_count + mc.local_count)
    out = dataset.size
    pairs = []
    for _ in range(t.batch_size // 2):
        crops, mixed, scribbles, present, sources = [], [], [], [], []
        for _member in range(2):
            sid = _pick_source(rng, n, n_scribbled, t.scribbled_fraction)
            sample = dataset.train[sid]
            kind = "global" if rng.uniform() < p_global else "local"
            scale = mc.global_scale if kind == "global" else mc.local_scale
            h, w = sample.image.shape
            crop = crop_sample(sample, sample_bbox(h, w, tuple(scale), rng).box, (out, out), kind)
            crops.append(crop)
            mixed.append(make_intra_mixed(crop.image, schedule, rng, alpha=mc.alpha, max_angle=mc.max_angle,
                                          box_area=tuple(mc.box_area), use_box=mc.use_box,
                                          use_rotation=mc.use_rotation, source=sid))
            scribbles.append(crop.scribbles if sid < n_scribbled else np.full_like(crop.scribbles, UNLABELED))
            present.append(crop.present_classes)
            sources.append(sid)
        beta = sample_mix_ratio(mc.alpha, rng) if mc.use_inter else 1.0
        pairs.append(BatchPair(tuple(crops), tuple(mixed), inter_mix(mixed[0], mixed[1], beta), beta,
                               tuple(scribbles), tuple(present), tuple(sources)))
    return Batch(pairs, schedule, epoch, step)


# ---------------------------------------------------------------- state


@dataclass
class TrainState:
    model: SegNet
    prototypes: torch.nn.Parameter
    optimizer: torch.optim.Optimizer
    step: int = 0
    epoch: int = 0
    best_val: float = -1.0

    def parameters(self) -> list[torch.Tensor]:
        return list(self.model.parameters()) + [self.prototypes]


def _make_optimizer(params, config: TrainConfig) -> torch.optim.Optimizer:
    o = config.trainer.optimizer
    if o.kind == "adam":
        return torch.optim.Adam(params, lr=config.trainer.lr, betas=tuple(o.betas), eps=o.eps,
                                weight_decay=o.weight_decay)
    return torch.optim.SGD(params, lr=config.trainer.lr, weight_decay=o.weight_decay)


def init_state(config: TrainConfig, num_classes: int, size: int, dtype=torch.float32) -> TrainState:
    spec = ModelSpec(size, config.model.width, config.model.depth, num_classes, config.model.seed)
    model = SegNet(spec, dtype)
    protos = torch.nn.Parameter(init_prototypes(2 * num_classes - 1, config.loss.num_prototypes,
                                                seed=config.model.seed + 1, dtype=dtype))
    opt = _make_optimizer(list(model.parameters()) + [protos], config)
    return TrainState(model, protos, opt)


def save_state(path, state: TrainState, config: TrainConfig, extra: dict | None = None) -> None:
    arrays = {"model": state.model.flat_parameters().double().numpy(),
              "prototypes": state.prototypes.detach().double().numpy()}
    params = state.parameters()
    opt_meta = []
    for i, p in enumerate(params):
        st = state.optimizer.state.get(p, {})
        keys = []
        for k, v in sorted(st.items()):
            if isinstance(v, torch.Tensor):
                arrays[f"optim.{i}.{k}"] = v.detach().double().numpy()
                keys.append(k)
        opt_meta.append(keys)
    header = {
        "kind": "medcl-train-state",
        "model_spec": asdict(state.model.spec),
        "layout": state.model.layout(),
        "step": state.step, "epoch": state.epoch, "best_val": state.best_val,
        "optimizer": {"kind": config.trainer.optimizer.kind, "state_keys": opt_meta},
        "config": config.to_dict(),
        **(extra or {}),
    }
    save_checkpoint(path, arrays, header)


def load_state(path, config: TrainConfig | None = None, dtype=torch.float32) -> tuple[TrainState, TrainConfig]:
    arrays, header = load_checkpoint(path)
    config = config or TrainConfig.from_dict(header["config"])
    spec = ModelSpec(**header["model_spec"])
    state = init_state(config, spec.num_classes, spec.input_size, dtype)
    state.model.load_flat_parameters(torch.from_numpy(arrays["model"]))
    with torch.no_grad():
        state.prototypes.copy_(torch.from_numpy(arrays["prototypes"]).to(dtype))
    for i, (p, keys) in enumerate(zip(state.parameters(), header.get("optimizer", {}).get("state_keys", []))):
        if keys:
            st = {}
            for k in keys:
                v = torch.from_numpy(arrays[f"optim.{i}.{k}"])
                st[k] = v.to(torch.float32) if k == "step" else v.to(dtype)
            state.optimizer.state[p] = st
    state.step, state.epoch, state.best_val = header["step"], header["epoch"], header.get("best_val", -1.0)
    return state, config


# ---------------------------------------------------------------- step


def _stack(arrays, dtype) -> torch.Tensor:
    return torch.as_tensor(np.stack(arrays), dtype=dtype)


def compute_losses(state: TrainState, batch: Batch, config: TrainConfig) -> L.LossBreakdown:
    """Forward every branch of ``batch`` and evaluate the enabled loss terms."""
    weights = config.loss_weights()
    lc = config.loss
    model = state.model
    dtype = model.head.weight.dtype
    m = model.spec.num_classes
    P = len(batch.pairs)
    use_mix_branch = weights["mix"] > 0
    need_protos = weights["cluster"] > 0 or weights["ac"] > 0 or weights["map"] > 0

    images = [c.image for p in batch.pairs for c in p.crops]
    if use_mix_branch:
        images += [s.image for p in batch.pairs for s in p.mixed]
        images += [p.inter.image for p in batch.pairs]
    out = model(_stack(images, dtype))
    y_hat = out.y_hat
    probs_u = out.probs[: 2 * P]

    terms: dict = {}
    supervised = True
    if weights["scribble"] > 0:
        scrib = torch.as_tensor(np.stack([s for p in batch.pairs for s in p.scribbles]).astype(np.int64))
        terms["scribble"], supervised = L.scribble_loss(probs_u, scrib, UNLABELED)
    else:
        supervised = batch.supervised
    if weights["category"] > 0:
        terms["category"] = L.category_loss(probs_u, [c for p in batch.pairs for c in p.present])

    if use_mix_branch:
        y_mixed = y_hat[2 * P: 4 * P]
        y_inter = y_hat[4 * P:]
        betas = torch.tensor([p.beta for p in batch.pairs], dtype=dtype)[:, None, None, None]
        if config.mix.use_inter:
            target = betas * y_mixed[0::2] + (1 - betas) * y_mixed[1::2]
        else:
            # no partner image: the mixed view must agree with its unmixed source
            target = y_hat[0: 2 * P: 2]
        terms["mix"] = L.mix_consistency_loss(y_inter, target.clamp(0, 1), detach_target=lc.detach_mix_target,
                                              per_channel=lc.per_channel_mix)
        cluster_feats = y_hat[2 * P:]
    else:
        cluster_feats = y_hat[: 2 * P]

    if need_protos:
        Bc, C = cluster_feats.shape[:2]
        flat = cluster_feats.reshape(Bc, C, -1)
        n = flat.shape[-1]
        all_pix = flat.permute(1, 0, 2).reshape(C, Bc * n)
        scores = compute_scores(state.prototypes, all_pix)
        Q = sinkhorn(scores, lc.eps, lc.niters)
        if weights["map"] > 0:
            terms["map"] = mapping_loss(scores, Q, lc.w)
        vecs = torch.stack([aggregate_prototype_vectors(flat[b], Q[b * n:(b + 1) * n]) for b in range(Bc)])
        if weights["cluster"] > 0:
            terms["cluster"] = L.cluster_loss(vecs[:, :m], lc.tau)
        if weights["ac"] > 0:
            terms["ac"] = L.anatomy_consistency_loss(cluster_feats, vecs.mean(dim=0), batch.schedule, batched=True)
    return L.total_loss(terms, weights, supervised)


def train_step(state: TrainState, batch: Batch, config: TrainConfig) -> tuple[TrainState, L.LossBreakdown]:
    state.optimizer.zero_grad(set_to_none=True)
    breakdown = compute_losses(state, batch, config)
    if breakdown.objective is not None and breakdown.objective.requires_grad:
        breakdown.objective.backward()
        state.optimizer.step()
        with torch.no_grad():
            state.prototypes.copy_(normalize_prototypes(state.prototypes))
    state.step += 1
    return state, breakdown


# ---------------------------------------------------------------- loop


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    validation: list[dict] = field(default_factory=list)
    timings: list[float] = field(default_factory=list)

    def __eq__(self, other):
        # wall-clock timings are not part of the reproducible content
        return isinstance(other, TrainLog) and self.records == other.records and self.validation == other.validation

    def to_json(self) -> dict:
        return {"records": self.records, "validation": self.validation, "timings": self.timings}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "TrainLog":
        doc = json.loads(Path(path).read_text())
        return cls(doc["records"], doc["validation"], doc.get("timings", []))


def steps_per_epoch(config: TrainConfig, n_train: int) -> int:
    if config.trainer.steps_per_epoch:
        return int(config.trainer.steps_per_epoch)
    mc = config.mix
    units = epoch_units(n_train, mc.global_count, mc.local_count, mc.pairs_per_crop)
    per_step = config.trainer.batch_size + config.trainer.batch_size // 2
    return max(1, math.ceil(units / per_step))


@torch.no_grad()
def predict_labels(model: SegNet, images: list[np.ndarray], chunk: int = 16) -> np.ndarray:
    dtype = model.head.weight.dtype
    out = []
    for i in range(0, len(images), chunk):
        probs = model(_stack(images[i:i + chunk], dtype)).probs
        out.append(probs.argmax(dim=1).numpy().astype(np.uint8))
    return np.concatenate(out) if out else np.zeros((0,), dtype=np.uint8)


def mean_foreground_dice(model: SegNet, samples: list[PhantomSample]) -> float:
    from .evalkit import dice

    if not samples:
        return float("nan")
    preds = predict_labels(model, [s.image for s in samples])
    m = model.spec.num_classes
    scores = [dice(pred == c, s.labels == c) for pred, s in zip(preds, samples) for c in range(1, m + 1)]
    return float(np.mean(scores))


class Trainer:
    """Owns a TrainState and drives it through ``config``; checkpoints go to ``run_dir``."""

    def __init__(self, config: TrainConfig, dataset: Dataset | None = None, run_dir=None, state: TrainState | None = None):
        self.config = config
        set_determinism(deterministic_mode(config))
        self.dataset = dataset or Dataset.load(config.dataset, config.trainer.max_train_samples)
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.state = state or init_state(config, self.dataset.num_classes, self.dataset.size)
        if self.state.model.spec.num_classes != self.dataset.num_classes:
            raise ValueError("checkpoint class count does not match the dataset")
        self.schedule = run_schedule(config, self.dataset.num_classes)
        self.steps_per_epoch = steps_per_epoch(config, len(self.dataset.train))
        self.total_steps = config.trainer.epochs * self.steps_per_epoch
        self.log = TrainLog()

    @classmethod
    def resume(cls, checkpoint, config: TrainConfig | None = None, dataset: Dataset | None = None, run_dir=None):
        state, config = load_state(checkpoint, config)
        return cls(config, dataset, run_dir, state)

    def save(self, name: str) -> Path | None:
        if self.run_dir is None:
            return None
        path = self.run_dir / name
        save_state(path, self.state, self.config, {"schedule": list(self.schedule.perm)})
        return path

    def step(self) -> L.LossBreakdown:
        s = self.state
        epoch = s.step // self.steps_per_epoch
        batch = build_batch(self.dataset, self.config, epoch, s.step, self.schedule)
        t0 = time.perf_counter()
        _, breakdown = train_step(s, batch, self.config)
        self.log.timings.append(time.perf_counter() - t0)
        self.log.records.append({"step": s.step, "epoch": epoch, **breakdown.as_dict(),
                                 "supervised": breakdown.supervised})
        s.epoch = epoch
        return breakdown

    def validate(self, epoch: int) -> float:
        score = mean_foreground_dice(self.state.model, self.dataset.val)
        self.log.validation.append({"epoch": epoch, "step": self.state.step, "dice": score})
        if not math.isnan(score) and score > self.state.best_val:
            self.state.best_val = score
            self.save("best.ckpt")
        return score

    def run(self, max_steps: int | None = None) -> TrainLog:
        t = self.config.trainer
        stop = self.total_steps if max_steps is None else min(self.total_steps, max_steps)
        if self.state.step == 0:
            self.save("init.ckpt")
        while self.state.step < stop:
            breakdown = self.step()
            step = self.state.step
            if step % 50 == 0 or step == stop:
                log.info("step %d/%d total=%.4f %s", step, stop, breakdown.total,
                         " ".join(f"{k}={v:.4f}" for k, v in breakdown.as_dict().items() if k != "total"))
            if t.checkpoint_every and step % t.checkpoint_every == 0:
                self.save(f"step_{step:06d}.ckpt")
            if step % self.steps_per_epoch == 0:
                epoch = step // self.steps_per_epoch
                if t.val_every and epoch % t.val_every == 0 and self.dataset.val:
                    self.validate(epoch)
        self.save("last.ckpt")
        if self.run_dir is not None:
            self.log.save(self.run_dir / "train_log.json")
        return self.log


def train(config: TrainConfig, run_dir=None, dataset: Dataset | None = None) -> tuple[Path | None, TrainLog]:
    """Full training run; returns the last checkpoint path (None without a run dir) and the log."""
    if run_dir is not None:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        config.save(Path(run_dir) / "config.json")
    trainer = Trainer(config, dataset, run_dir)
    train_log = trainer.run()
    return (Path(run_dir) / "last.ckpt" if run_dir is not None else None), train_log


def train_model(config: TrainConfig, dataset: Dataset) -> tuple[SegNet, TrainLog]:
    """In-memory variant of :func:`train` used by the evaluation harness."""
    trainer = Trainer(config, dataset)
    train_log = trainer.run()
    return trainer.state.model, train_log
