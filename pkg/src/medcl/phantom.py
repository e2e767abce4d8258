"""Procedural cardiac-like phantoms with scribble annotations, and their on-disk format."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

UNLABELED = 255
FORMAT_VERSION = 1
MAX_CLASSES = 8

# per-class base intensities: background, LV blood pool, myocardium, RV, then extras
_BASE_LEVELS = (0.12, 0.80, 0.32, 0.62, 0.95, 0.50, 0.22, 0.72, 0.42)


class PhantomError(ValueError):
    pass


class DatasetError(Exception):
    """Base class for dataset I/O failures; ``code`` distinguishes the failure kind."""

    code = "dataset_error"

    def __init__(self, message: str, path: str | Path | None = None):
        super().__init__(message)
        self.path = str(path) if path is not None else None


class MissingFileError(DatasetError):
    code = "missing_file"


class ChecksumMismatchError(DatasetError):
    code = "checksum_mismatch"


class ShapeMismatchError(DatasetError):
    code = "shape_mismatch"


class FormatVersionError(DatasetError):
    code = "unknown_format_version"


class InvalidLabelError(DatasetError):
    code = "invalid_label_value"


@dataclass(frozen=True)
class PhantomSpec:
    height: int = 64
    width: int = 64
    num_classes: int = 3
    mode: str = "structure"
    noise_sigma: float = 0.08
    bias_field_strength: float = 0.3
    shape_jitter: float = 0.5

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise PhantomError(f"phantom must be at least 16x16, got {self.height}x{self.width}")
        if not 1 <= self.num_classes <= MAX_CLASSES:
            raise PhantomError(f"num_classes must be in [1, {MAX_CLASSES}], got {self.num_classes}")
        if self.mode not in ("structure", "pathology"):
            raise PhantomError(f"unknown phantom mode {self.mode!r}")
        if not 0.0 <= self.noise_sigma < 1.0:
            raise PhantomError("noise_sigma must lie in [0, 1)")
        if not 0.0 <= self.bias_field_strength <= 1.0:
            raise PhantomError("bias_field_strength must lie in [0, 1]")
        if not 0.0 <= self.shape_jitter <= 1.0:
            raise PhantomError("shape_jitter must lie in [0, 1]")


@dataclass
class PhantomSample:
    image: np.ndarray  # float64 (h, w) in [0, 1], quantized to 1/65535
    labels: np.ndarray  # uint8 (h, w)
    scribbles: np.ndarray  # uint8 (h, w), UNLABELED where not annotated
    present_classes: frozenset[int] = field(default_factory=frozenset)
    seed: int = 0
    warnings: list[str] = field(default_factory=list)

    def __eq__(self, other):
        if not isinstance(other, PhantomSample):
            return NotImplemented
        return (
            np.array_equal(self.image, other.image)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.scribbles, other.scribbles)
            and self.present_classes == other.present_classes
            and self.seed == other.seed
        )


def present_classes(labels: np.ndarray) -> frozenset[int]:
    return frozenset(int(c) for c in np.unique(labels) if c != 0)


def _quantize(image: np.ndarray) -> np.ndarray:
    # images are stored as 16-bit PNG, so keep them on that grid in memory too
    return np.round(np.clip(image, 0.0, 1.0) * 65535.0) / 65535.0


def _jittered_ellipse(yy, xx, cy, cx, ry, rx, angle, jitter, rng) -> np.ndarray:
    """Boolean ellipse whose radius is modulated by a few low-order harmonics."""
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    rho = np.hypot(u, v)
    phi = np.arctan2(v, u)
    wobble = np.ones_like(rho)
    for k in (2, 3, 4):
        amp = jitter * 0.06 * rng.uniform(-1.0, 1.0)
        wobble += amp * np.cos(k * phi + rng.uniform(0.0, 2 * np.pi))
    return rho <= wobble


def _bias_field(h: int, w: int, strength: float, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    y = 2.0 * yy / (h - 1) - 1.0
    x = 2.0 * xx / (w - 1) - 1.0
    coef = rng.uniform(-1.0, 1.0, size=5)
    field = coef[0] * x + coef[1] * y + coef[2] * x * y + coef[3] * x**2 + coef[4] * y**2
    peak = np.abs(field).max()
    if peak > 0:
        field = field / peak
    return 1.0 + strength * 0.5 * field


def _render(labels: np.ndarray, spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = labels.shape
    levels = np.array(_BASE_LEVELS[: spec.num_classes + 1])
    levels = levels + spec.shape_jitter * 0.08 * rng.uniform(-1.0, 1.0, size=levels.shape)
    image = levels[labels]
    image = image * _bias_field(h, w, spec.bias_field_strength, rng)
    noise = rng.normal(0.0, 1.0, size=(h, w))
    image = image + spec.noise_sigma * noise
    return _quantize(image)


def _structure_labels(spec: PhantomSpec, n_struct: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Return (labels, annulus mask). n_struct counts the nested classes actually drawn (1..3)."""
    h, w = spec.height, spec.width
    size = min(h, w)
    jit = spec.shape_jitter
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    cy = h / 2 + jit * 0.06 * h * rng.uniform(-1, 1)
    cx = w / 2 + 0.05 * w + jit * 0.06 * w * rng.uniform(-1, 1)
    r_in = size * (0.13 + jit * 0.03 * rng.uniform(-1, 1))
    thick = max(3.0, size * (0.07 + jit * 0.015 * rng.uniform(-1, 1)))
    r_out = r_in + thick
    ecc = 1.0 + jit * 0.12 * rng.uniform(-1, 1)
    angle = rng.uniform(0, np.pi) if jit > 0 else 0.0

    inner = _jittered_ellipse(yy, xx, cy, cx, r_in * ecc, r_in / ecc, angle, jit, rng)
    # the outer boundary must clear the inner one by >= 3 px everywhere
    dist_from_inner = ndimage.distance_transform_edt(~inner)
    outer = _jittered_ellipse(yy, xx, cy, cx, r_out * ecc, r_out / ecc, angle, jit, rng)
    outer |= dist_from_inner <= 3.0
    annulus = outer & ~inner

    labels = np.zeros((h, w), dtype=np.uint8)
    if n_struct == 1:
        # cavity stays background; the ring itself is class 1
        labels[annulus] = 1
        return labels, annulus
    labels[inner] = 1
    labels[annulus] = 2
    if n_struct >= 3:
        side = -1.0 if rng.uniform() < 0.5 or jit == 0 else -0.85
        rv_cy = cy + jit * 0.05 * size * rng.uniform(-1, 1)
        rv_cx = cx + side * r_out * 0.95
        rv = _jittered_ellipse(
            yy, xx, rv_cy, rv_cx, r_out * 1.35, r_out * 0.95, np.pi / 2 + jit * 0.2 * rng.uniform(-1, 1), jit, rng
        )
        rv &= ~outer
        # keep only the component that touches the myocardium so it forms one crescent
        touching = ndimage.binary_dilation(outer, iterations=1)
        comp, n = ndimage.label(rv)
        if n > 1:
            keep = [i for i in range(1, n + 1) if np.any(touching & (comp == i))]
            rv = np.isin(comp, keep)
        labels[rv] = 3
    return labels, annulus


def _place_extra_ellipses(labels: np.ndarray, first_class: int, last_class: int, spec: PhantomSpec, rng) -> None:
    h, w = labels.shape
    size = min(h, w)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for c in range(first_class, last_class + 1):
        occupied = ndimage.binary_dilation(labels > 0, iterations=2)
        for _ in range(200):
            r = size * rng.uniform(0.05, 0.09)
            cy = rng.uniform(r + 1, h - r - 2)
            cx = rng.uniform(r + 1, w - r - 2)
            blob = _jittered_ellipse(yy, xx, cy, cx, r * rng.uniform(0.7, 1.0), r, rng.uniform(0, np.pi), spec.shape_jitter, rng)
            if blob.sum() >= 4 and not np.any(blob & occupied):
                labels[blob] = c
                break
        else:
            # no free room: shrink to a small disk in the least crowded spot
            free = ~occupied
            dist = ndimage.distance_transform_edt(free)
            py, px = np.unravel_index(np.argmax(dist), dist.shape)
            rad = max(1.0, min(dist[py, px] - 1.0, size * 0.05))
            labels[((yy - py) ** 2 + (xx - px) ** 2 <= rad**2) & free] = c


def gen_structure_sample(spec: PhantomSpec, seed: int, coverage: float = 0.05) -> PhantomSample:
    if spec.mode != "structure":
        raise PhantomError("gen_structure_sample requires mode='structure'")
    if spec.num_classes < 2:
        raise PhantomError("structure mode needs num_classes >= 2 (class 2 must enclose class 1)")
    rng = np.random.default_rng([seed, 0])
    labels, _ = _structure_labels(spec, min(spec.num_classes, 3), rng)
    if spec.num_classes > 3:
        _place_extra_ellipses(labels, 4, spec.num_classes, spec, rng)
    return _finish(labels, spec, seed, coverage, rng)


def _pathology_layout(m: int) -> tuple[int, list[int]]:
    """Split m classes into (nested host classes, pathology class ids)."""
    n_path = max(1, m - 3)
    n_host = m - n_path
    return n_host, list(range(n_host + 1, m + 1))


def _random_walk_blob(region: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    ys, xs = np.nonzero(region)
    blob = np.zeros_like(region)
    if len(ys) == 0:
        return blob
    i = rng.integers(len(ys))
    y, x = int(ys[i]), int(xs[i])
    h, w = region.shape
    steps = ((-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1))
    for _ in range(size):
        blob[y, x] = True
        dy, dx = steps[rng.integers(len(steps))]
        ny, nx = y + dy, x + dx
        if 0 <= ny < h and 0 <= nx < w and region[ny, nx]:
            y, x = ny, nx
    blob = ndimage.binary_dilation(blob, iterations=1)
    return blob & region


def gen_pathology_sample(spec: PhantomSpec, seed: int, coverage: float = 0.05) -> PhantomSample:
    if spec.mode != "pathology":
        raise PhantomError("gen_pathology_sample requires mode='pathology'")
    if spec.num_classes < 2:
        raise PhantomError("pathology mode needs num_classes >= 2")
    rng = np.random.default_rng([seed, 1])
    n_host, path_classes = _pathology_layout(spec.num_classes)
    labels, annulus = _structure_labels(spec, n_host, rng)
    n_pix = int(annulus.sum())
    for c in path_classes:
        if rng.uniform() >= 0.7:
            continue
        blob = _random_walk_blob(annulus, max(4, int(n_pix * rng.uniform(0.05, 0.15))), rng)
        labels[blob] = c
    return _finish(labels, spec, seed, coverage, rng)


def generate_sample(spec: PhantomSpec, seed: int, coverage: float = 0.05) -> PhantomSample:
    if spec.mode == "structure":
        return gen_structure_sample(spec, seed, coverage)
    return gen_pathology_sample(spec, seed, coverage)


def _finish(labels, spec, seed, coverage, rng) -> PhantomSample:
    image = _render(labels, spec, rng)
    scribbles, warns = synthesize_scribbles(labels, coverage, seed)
    return PhantomSample(image, labels, scribbles, present_classes(labels), seed, warns)


_STEPS = np.array([(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)])


def _scribble_walk(region: np.ndarray, target: int, rng: np.random.Generator) -> np.ndarray:
    """Momentum random walk confined to ``region``; visits exactly ``target`` pixels when room allows.

    The walk prefers unvisited pixels that keep its heading, so the trace stays one stroke wide.
    When it boxes itself in it restarts from a pixel it already visited, which keeps the set connected.
    """
    h, w = region.shape
    depth = ndimage.distance_transform_edt(region)
    ys, xs = np.nonzero(depth >= max(1.0, depth.max() / 2))
    k = rng.integers(len(ys))
    y, x = int(ys[k]), int(xs[k])
    heading = int(rng.integers(8))
    visited = np.zeros_like(region)
    visited[y, x] = True
    trail = [(y, x)]
    count = 1
    stalls = 0
    while count < target and stalls < 50 * target:
        options = []
        for turn in (0, 1, -1, 2, -2):
            d = (heading + turn) % 8
            ny, nx = y + _STEPS[d, 0], x + _STEPS[d, 1]
            if 0 <= ny < h and 0 <= nx < w and region[ny, nx] and not visited[ny, nx]:
                # discourage hugging the region boundary
                weight = (4.0 if turn == 0 else 1.0 if abs(turn) == 1 else 0.3) * min(depth[ny, nx], 3.0)
                options.append((d, ny, nx, weight))
        if not options:
            stalls += 1
            y, x = trail[rng.integers(len(trail))]
            heading = int(rng.integers(8))
            continue
        weights = np.array([o[3] for o in options])
        d, y, x, _ = options[rng.choice(len(options), p=weights / weights.sum())]
        heading = d
        visited[y, x] = True
        trail.append((y, x))
        count += 1
    return visited


def synthesize_scribbles(labels: np.ndarray, coverage: float = 0.05, seed: int = 0) -> tuple[np.ndarray, list[str]]:
    """Draw one connected stroke per class present in ``labels`` (background included).

    Returns the scribble map (UNLABELED elsewhere) and a list of warnings for classes
    whose region is too small to annotate.
    """
    if not 0.0 < coverage <= 0.5:
        raise PhantomError(f"coverage must lie in (0, 0.5], got {coverage}")
    rng = np.random.default_rng([seed, 2])
    scribbles = np.full(labels.shape, UNLABELED, dtype=np.uint8)
    warns: list[str] = []
    for c in np.unique(labels):
        region = labels == c
        area = int(region.sum())
        if area < 3:
            warns.append(f"class {int(c)}: region of {area} px is too small to scribble")
            continue
        target = max(3, int(round(coverage * area)))
        stroke = _scribble_walk(region, target, rng)
        scribbles[stroke] = c
    for msg in warns:
        log.warning(msg)
    return scribbles, warns


# ---------------------------------------------------------------- dataset I/O


@dataclass
class ManifestEntry:
    id: str
    image: str
    label: str
    scribble: str
    present_classes: list[int]
    seed: int
    shape: list[int]
    sha256: dict[str, str]


@dataclass
class DatasetManifest:
    split: str
    spec: PhantomSpec
    entries: list[ManifestEntry]
    coverage: float = 0.05
    format_version: int = FORMAT_VERSION

    def to_json(self) -> dict:
        return {
            "format_version": self.format_version,
            "split": self.split,
            "generator": asdict(self.spec),
            "scribble_coverage": self.coverage,
            "entries": [asdict(e) for e in self.entries],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DatasetManifest":
        return cls(
            split=doc["split"],
            spec=PhantomSpec(**doc["generator"]),
            entries=[ManifestEntry(**e) for e in doc["entries"]],
            coverage=doc.get("scribble_coverage", 0.05),
            format_version=doc["format_version"],
        )


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_png16(path: Path, image: np.ndarray) -> None:
    data = np.round(image * 65535.0).astype(np.uint16)
    Image.fromarray(data).save(path)


def _write_png8(path: Path, grid: np.ndarray) -> None:
    Image.fromarray(grid.astype(np.uint8), mode="L").save(path)


def _read_png(path: Path) -> np.ndarray:
    if not path.exists():
        raise MissingFileError(f"missing file: {path}", path)
    with Image.open(path) as im:
        return np.array(im)


def write_dataset(samples: list[PhantomSample], manifest: DatasetManifest | None, directory, *, split: str = "train",
                  spec: PhantomSpec | None = None, coverage: float = 0.05) -> DatasetManifest:
    """Write samples under ``directory`` and return the manifest that now describes them.

    When ``manifest`` is given its split/spec/coverage are reused; entries are always rebuilt
    from what was actually written.
    """
    if not samples:
        raise DatasetError("refusing to write an empty dataset")
    root = Path(directory)
    for sub in ("images", "labels", "scribbles"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    if manifest is not None:
        split, spec, coverage = manifest.split, manifest.spec, manifest.coverage
    if spec is None:
        raise DatasetError("a PhantomSpec is needed to describe the dataset")
    entries = []
    for i, s in enumerate(samples):
        sid = f"{split}_{i:04d}"
        paths = {"image": f"images/{sid}.png", "label": f"labels/{sid}.png", "scribble": f"scribbles/{sid}.png"}
        _write_png16(root / paths["image"], s.image)
        _write_png8(root / paths["label"], s.labels)
        _write_png8(root / paths["scribble"], s.scribbles)
        entries.append(ManifestEntry(
            id=sid, **paths,
            present_classes=sorted(s.present_classes), seed=int(s.seed),
            shape=list(s.image.shape),
            sha256={k: _sha256(root / p) for k, p in paths.items()},
        ))
    out = DatasetManifest(split, spec, entries, coverage)
    (root / "manifest.json").write_text(json.dumps(out.to_json(), indent=2))
    return out


def read_dataset(directory) -> tuple[list[PhantomSample], DatasetManifest]:
    root = Path(directory)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise MissingFileError(f"missing file: {mpath}", mpath)
    doc = json.loads(mpath.read_text())
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"unknown format_version {version!r} (expected {FORMAT_VERSION})", mpath)
    manifest = DatasetManifest.from_json(doc)
    if not manifest.entries:
        raise DatasetError("manifest lists no samples", mpath)
    m = manifest.spec.num_classes
    samples = []
    for e in manifest.entries:
        arrays = {}
        for key in ("image", "label", "scribble"):
            path = root / getattr(e, key)
            arr = _read_png(path)
            if tuple(arr.shape) != tuple(e.shape):
                raise ShapeMismatchError(f"{path}: shape {arr.shape} != manifest {tuple(e.shape)}", path)
            arrays[key] = arr
        labels = arrays["label"].astype(np.uint8)
        if labels.max() > m:
            raise InvalidLabelError(f"{root / e.label}: invalid label value {int(labels.max())}", root / e.label)
        scrib = arrays["scribble"].astype(np.uint8)
        bad = (scrib != UNLABELED) & (scrib > m)
        if bad.any():
            raise InvalidLabelError(f"{root / e.scribble}: invalid label value {int(scrib[bad][0])}", root / e.scribble)
        for key in ("image", "label", "scribble"):
            path = root / getattr(e, key)
            if e.sha256 and _sha256(path) != e.sha256.get(key):
                raise ChecksumMismatchError(f"{path}: checksum does not match manifest", path)
        image = arrays["image"].astype(np.float64) / 65535.0
        samples.append(PhantomSample(image, labels, scrib, frozenset(e.present_classes), e.seed))
    return samples, manifest


SPLITS = ("train", "val", "test")


def generate_splits(spec: PhantomSpec, counts: dict[str, int], seed: int = 0,
                    coverage: float = 0.05) -> dict[str, list[PhantomSample]]:
    """Samples for each split; per-sample seeds are drawn from a stream keyed by (seed, split)."""
    out = {}
    for index, split in enumerate(SPLITS):
        n = counts.get(split, 0)
        seeds = np.random.SeedSequence([seed, index]).generate_state(n) if n > 0 else []
        out[split] = [generate_sample(spec, int(s), coverage) for s in seeds]
    return out
