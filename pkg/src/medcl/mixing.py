"""Intra-/inter-image mixing, class-subset schedules and multi-crop amplification."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .phantom import PhantomSample, present_classes

# defaults for the free parameters the method leaves open
DEFAULT_ALPHA = 1.0
DEFAULT_MAX_ANGLE = 15.0
DEFAULT_BOX_AREA = (0.1, 0.4)
DEFAULT_GLOBAL_CROPS = 4
DEFAULT_LOCAL_CROPS = 6
DEFAULT_GLOBAL_SCALE = (0.6, 1.0)
DEFAULT_LOCAL_SCALE = (0.2, 0.5)
DEFAULT_PAIRS_PER_CROP = 3


class MixingError(ValueError):
    pass


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class BoundingBoxMask:
    mask: np.ndarray
    box: tuple[int, int, int, int]  # row0, col0, row1, col1 (exclusive ends)

    @classmethod
    def from_box(cls, h: int, w: int, box: tuple[int, int, int, int]) -> "BoundingBoxMask":
        r0, c0, r1, c1 = box
        if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
            raise MixingError(f"box {box} does not fit a {h}x{w} image")
        mask = np.zeros((h, w), dtype=np.float64)
        mask[r0:r1, c0:c1] = 1.0
        return cls(mask, (r0, c0, r1, c1))

    @property
    def area(self) -> int:
        r0, c0, r1, c1 = self.box
        return (r1 - r0) * (c1 - c0)


@dataclass(frozen=True)
class SubsetSchedule:
    """Random class order ``perm``; ``subsets[k - 2]`` is the first k classes of it (k = 2..m)."""

    perm: tuple[int, ...]

    @property
    def m(self) -> int:
        return len(self.perm)

    @property
    def subsets(self) -> tuple[frozenset[int], ...]:
        return tuple(frozenset(self.perm[:k]) for k in range(2, self.m + 1))

    def subset(self, k: int) -> frozenset[int]:
        return frozenset(self.perm[:k])


@dataclass
class MixedSample:
    image: np.ndarray
    bbox: BoundingBoxMask
    schedule: SubsetSchedule
    provenance: dict = field(default_factory=dict)


@dataclass
class MixTarget:
    target: object  # (2m-1, h, w) array or tensor
    beta: float


def sample_mix_ratio(alpha: float = DEFAULT_ALPHA, seed=None) -> float:
    if not alpha > 0:
        raise MixingError(f"Beta concentration must be positive, got {alpha}")
    return float(as_rng(seed).beta(alpha, alpha))


def _center_coords(h: int, w: int, theta: float) -> tuple[np.ndarray, np.ndarray]:
    t = np.deg2rad(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    # inverse map: output pixel samples the input at the pixel rotated by -theta
    src_y = cy + np.cos(t) * dy - np.sin(t) * dx
    src_x = cx + np.sin(t) * dy + np.cos(t) * dx
    return src_y, src_x


def rotate(image: np.ndarray, theta: float) -> np.ndarray:
    """Bilinear rotation by ``theta`` degrees about the image center, edges replicated."""
    if abs(theta) > 45:
        raise MixingError(f"rotation angle must satisfy |theta| <= 45, got {theta}")
    image = np.asarray(image, dtype=np.float64)
    if theta == 0:
        return image.copy()
    src_y, src_x = _center_coords(*image.shape, theta)
    return ndimage.map_coordinates(image, [src_y, src_x], order=1, mode="nearest")


def intra_mix(x: np.ndarray, box_mask: np.ndarray, beta_prime: float, theta: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    ib = np.asarray(box_mask, dtype=np.float64)
    if x.shape != ib.shape:
        raise MixingError(f"image {x.shape} and box mask {ib.shape} differ in shape")
    out = ib * x + (1.0 - ib) * (beta_prime * x + (1.0 - beta_prime) * rotate(x, theta))
    return np.clip(out, 0.0, 1.0)


def sample_bbox(h: int, w: int, area_range=DEFAULT_BOX_AREA, seed=None) -> BoundingBoxMask:
    """Uniformly placed box whose pixel-area fraction lies inside ``area_range``."""
    lo, hi = area_range
    if not 0 < lo <= hi <= 1:
        raise MixingError(f"area range must lie in (0, 1], got {area_range}")
    rng = as_rng(seed)
    total = h * w
    min_px, max_px = int(np.ceil(lo * total - 1e-9)), int(np.floor(hi * total + 1e-9))
    max_px = max(max_px, min_px)
    heights = []
    for bh in range(1, h + 1):
        wmin = max(1, -(-min_px // bh))
        wmax = min(w, max_px // bh)
        if wmin <= wmax:
            heights.append((bh, wmin, wmax))
    if not heights:
        raise MixingError(f"no box in a {h}x{w} image has area fraction in {area_range}")
    bh, wmin, wmax = heights[rng.integers(len(heights))]
    bw = int(rng.integers(wmin, wmax + 1))
    r0 = int(rng.integers(0, h - bh + 1))
    c0 = int(rng.integers(0, w - bw + 1))
    return BoundingBoxMask.from_box(h, w, (r0, c0, r0 + bh, c0 + bw))


def sample_subsets(m: int, seed=None) -> SubsetSchedule:
    if m < 2:
        raise MixingError(f"class subsets need m >= 2, got {m}")
    perm = as_rng(seed).permutation(np.arange(1, m + 1))
    return SubsetSchedule(tuple(int(c) for c in perm))


def make_intra_mixed(image: np.ndarray, schedule: SubsetSchedule, seed=None, *, alpha: float = DEFAULT_ALPHA,
                     max_angle: float = DEFAULT_MAX_ANGLE, box_area=DEFAULT_BOX_AREA,
                     use_box: bool = True, use_rotation: bool = True, source=None) -> MixedSample:
    rng = as_rng(seed)
    h, w = image.shape
    beta_p = sample_mix_ratio(alpha, rng)
    theta = float(rng.uniform(-max_angle, max_angle)) if use_rotation else 0.0
    if use_box:
        bbox = sample_bbox(h, w, box_area, rng)
    else:
        # an empty box is not a valid BoundingBoxMask; mix everywhere via a zero mask
        bbox = BoundingBoxMask(np.zeros((h, w)), (0, 0, 0, 0))
    mixed = intra_mix(image, bbox.mask, beta_p, theta)
    prov = {"sources": [source], "beta_prime": beta_p, "theta": theta, "beta": None}
    return MixedSample(mixed, bbox, schedule, prov)


def inter_mix(s1: MixedSample, s2: MixedSample, beta: float) -> MixedSample:
    if s1.schedule != s2.schedule:
        raise MixingError("inter-mix pair must share one subset schedule")
    if s1.image.shape != s2.image.shape:
        raise MixingError(f"inter-mix shapes differ: {s1.image.shape} vs {s2.image.shape}")
    image = np.clip(beta * s1.image + (1.0 - beta) * s2.image, 0.0, 1.0)
    mask = np.maximum(s1.bbox.mask, s2.bbox.mask)
    rows, cols = np.nonzero(mask)
    if len(rows):
        box = (int(rows.min()), int(cols.min()), int(rows.max()) + 1, int(cols.max()) + 1)
    else:
        box = (0, 0, 0, 0)
    prov = {
        "sources": list(s1.provenance.get("sources", [])) + list(s2.provenance.get("sources", [])),
        "beta_prime": (s1.provenance.get("beta_prime"), s2.provenance.get("beta_prime")),
        "theta": (s1.provenance.get("theta"), s2.provenance.get("theta")),
        "beta": beta,
    }
    # the union is generally not a rectangle; ``box`` is its bounding rectangle
    return MixedSample(image, BoundingBoxMask(mask, box), s1.schedule, prov)


def mix_targets(y1, y2, beta: float) -> MixTarget:
    """Channelwise convex combination of two predictions (numpy arrays or torch tensors)."""
    out = beta * y1 + (1.0 - beta) * y2
    out = out.clip(0.0, 1.0)
    return MixTarget(out, beta)


# ---------------------------------------------------------------- multi-crop


@dataclass
class Crop:
    image: np.ndarray
    labels: np.ndarray
    scribbles: np.ndarray
    present_classes: frozenset[int]
    box: tuple[int, int, int, int]
    kind: str  # "global" or "local"


def _resize(grid: np.ndarray, out_h: int, out_w: int, order: int) -> np.ndarray:
    h, w = grid.shape
    if (h, w) == (out_h, out_w):
        return grid.copy()
    # pixel-center alignment
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    if order == 0:
        yi = np.clip(np.floor(ys + 0.5).astype(int), 0, h - 1)
        xi = np.clip(np.floor(xs + 0.5).astype(int), 0, w - 1)
        return grid[np.ix_(yi, xi)]
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(grid.astype(np.float64), [yy, xx], order=1, mode="nearest")


def crop_sample(sample: PhantomSample, box, out_size: tuple[int, int], kind: str = "global") -> Crop:
    r0, c0, r1, c1 = box
    oh, ow = out_size
    img = _resize(sample.image[r0:r1, c0:c1], oh, ow, order=1)
    lab = _resize(sample.labels[r0:r1, c0:c1], oh, ow, order=0)
    scr = _resize(sample.scribbles[r0:r1, c0:c1], oh, ow, order=0)
    return Crop(np.clip(img, 0, 1), lab, scr, present_classes(lab), tuple(box), kind)


def multi_crop(sample: PhantomSample, global_count: int = DEFAULT_GLOBAL_CROPS, local_count: int = DEFAULT_LOCAL_CROPS,
               global_scale=DEFAULT_GLOBAL_SCALE, local_scale=DEFAULT_LOCAL_SCALE, seed=None,
               out_size: tuple[int, int] | None = None) -> list[Crop]:
    if global_count < 0 or local_count < 0:
        raise MixingError("crop counts must be non-negative")
    rng = as_rng(seed)
    h, w = sample.image.shape
    out_size = out_size or (h, w)
    crops = []
    for kind, count, scale in (("global", global_count, global_scale), ("local", local_count, local_scale)):
        for _ in range(count):
            bbox = sample_bbox(h, w, scale, rng)
            crops.append(crop_sample(sample, bbox.box, out_size, kind))
    return crops


def epoch_units(n_sources: int, global_count: int = DEFAULT_GLOBAL_CROPS, local_count: int = DEFAULT_LOCAL_CROPS,
                pairs_per_crop: int = DEFAULT_PAIRS_PER_CROP) -> int:
    """Training units per epoch: every crop once intra-mixed plus ``pairs_per_crop`` inter-mixes."""
    return n_sources * (global_count + local_count) * (1 + pairs_per_crop)


def amplify_epoch(samples: list[PhantomSample], schedule: SubsetSchedule, seed=None, *,
                  global_count: int = DEFAULT_GLOBAL_CROPS, local_count: int = DEFAULT_LOCAL_CROPS,
                  pairs_per_crop: int = DEFAULT_PAIRS_PER_CROP, alpha: float = DEFAULT_ALPHA,
                  out_size: tuple[int, int] | None = None) -> list[MixedSample]:
    """Materialize one epoch of mixed units (intra-mixed crops followed by inter-mixed pairs)."""
    rng = as_rng(seed)
    intra = []
    for sid, s in enumerate(samples):
        for crop in multi_crop(s, global_count, local_count, seed=rng, out_size=out_size):
            intra.append(make_intra_mixed(crop.image, schedule, rng, alpha=alpha, source=sid))
    units = list(intra)
    for i, first in enumerate(intra):
        for _ in range(pairs_per_crop):
            j = int(rng.integers(len(intra) - 1)) if len(intra) > 1 else 0
            j = j + 1 if j >= i and len(intra) > 1 else j
            units.append(inter_mix(first, intra[j], sample_mix_ratio(alpha, rng)))
    return units
