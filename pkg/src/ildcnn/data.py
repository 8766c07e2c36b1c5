"""Patch pipeline: HU windowing, polygon-ROI patch extraction, augmentation,
stratified splitting, k-fold assignment and a synthetic texture dataset.

On-disk formats
---------------

Raw dataset directory (input of ``extract``)::

    <root>/<scan_id>/slices/<slice_id>.png   16-bit grayscale, HU = stored - 1024
    <root>/<scan_id>/annotations.txt         one ROI per line

Annotation lines are ``<slice_id> <label> x1,y1 x2,y2 x3,y3 ...`` with the
label one of ``H GG EM MN FB`` and vertices in pixel coordinates (x to the
right, y down; pixel ``(row, col)`` has its center at ``(col + 0.5, row + 0.5)``).
Blank lines and lines starting with ``#`` are ignored. ``.npy`` slices holding
HU values directly are accepted as well.

Patch store (output of ``extract``/``synthesize``, input of training)::

    <store>/patches.npy    float32 array N x 32 x 32 x 3, values in [0, 1]
    <store>/manifest.tsv   header + one tab-separated record per patch:
                           index label label_name scan slice row col transform
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError

CLASS_NAMES = ("H", "GG", "EM", "MN", "FB")
CLASS_TITLES = ("Healthy", "Ground Glass", "Emphysema", "Micronodules", "Fibrosis")

HU_MIN, HU_MAX = -1024, 3071
HU_OFFSET = 1024
PATCH_SIZE = 32
ORIGINAL = "original"


# -- domain types ----------------------------------------------------------


@dataclass
class SliceImage:
    hu_values: np.ndarray
    scan_id: str = ""
    slice_id: str = ""

    def __post_init__(self):
        hu = np.asarray(self.hu_values, dtype=np.float64)
        if hu.ndim != 2:
            raise DataError(f"slice must be a 2-D HU matrix, got shape {hu.shape}")
        self.hu_values = np.clip(hu, HU_MIN, HU_MAX)

    @property
    def height(self) -> int:
        return self.hu_values.shape[0]

    @property
    def width(self) -> int:
        return self.hu_values.shape[1]

    @classmethod
    def from_stored(cls, stored: np.ndarray, scan_id="", slice_id="") -> "SliceImage":
        return cls(np.asarray(stored, dtype=np.float64) - HU_OFFSET, scan_id, slice_id)


@dataclass
class ROIAnnotation:
    polygon: np.ndarray
    label: str
    slice_id: str = ""

    def __post_init__(self):
        self.polygon = np.asarray(self.polygon, dtype=np.float64)
        if self.polygon.ndim != 2 or self.polygon.shape[1] != 2 or len(self.polygon) < 3:
            raise DataError(f"polygon needs at least 3 (x, y) vertices, got shape {self.polygon.shape}")
        if self.label not in CLASS_NAMES:
            raise DataError(f"unknown label {self.label!r}; expected one of {CLASS_NAMES}")

    @property
    def class_index(self) -> int:
        return CLASS_NAMES.index(self.label)


@dataclass(frozen=True)
class HUWindowSpec:
    """Three ``(lo, hi)`` HU windows, one per output channel."""

    windows: tuple = ((-1400.0, -950.0), (-1000.0, 200.0), (-160.0, 240.0))

    def __post_init__(self):
        w = tuple((float(lo), float(hi)) for lo, hi in self.windows)
        if len(w) != 3:
            raise ConfigError(f"need exactly three HU windows, got {len(w)}")
        for lo, hi in w:
            if not lo < hi:
                raise ConfigError(f"HU window ({lo}, {hi}) must have lo < hi")
        object.__setattr__(self, "windows", w)


@dataclass(frozen=True)
class Provenance:
    scan: str
    slice: str
    row: int
    col: int
    transform: str = ORIGINAL

    @property
    def source_key(self) -> tuple:
        """Identity of the source cell, shared by all its augmented variants."""
        return (self.scan, self.slice, self.row, self.col)


@dataclass
class Patch:
    pixels: np.ndarray
    label: int
    provenance: Provenance

    def __post_init__(self):
        if self.pixels.shape != (PATCH_SIZE, PATCH_SIZE, 3):
            raise DataError(f"patch must be 32 x 32 x 3, got {self.pixels.shape}")


@dataclass
class PatchDataset:
    """Column-oriented patch collection: images N x 32 x 32 x 3, labels N."""

    images: np.ndarray
    labels: np.ndarray
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1:] != (PATCH_SIZE, PATCH_SIZE, 3):
            raise DataError(f"images must be N x 32 x 32 x 3, got {self.images.shape}")
        if not (len(self.images) == len(self.labels) == len(self.provenance)):
            raise DataError("images, labels and provenance lengths differ")

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def empty(cls) -> "PatchDataset":
        return cls(np.zeros((0, PATCH_SIZE, PATCH_SIZE, 3), np.float32), np.zeros(0, np.int64), [])

    @classmethod
    def from_patches(cls, patches: list[Patch]) -> "PatchDataset":
        if not patches:
            return cls.empty()
        return cls(
            np.stack([p.pixels for p in patches]),
            np.array([p.label for p in patches]),
            [p.provenance for p in patches],
        )

    def patch(self, i: int) -> Patch:
        return Patch(self.images[i], int(self.labels[i]), self.provenance[i])

    def subset(self, indices) -> "PatchDataset":
        idx = np.asarray(indices, dtype=np.intp)
        return PatchDataset(self.images[idx], self.labels[idx], [self.provenance[i] for i in idx])

    def concat(self, other: "PatchDataset") -> "PatchDataset":
        return PatchDataset(
            np.concatenate([self.images, other.images]),
            np.concatenate([self.labels, other.labels]),
            self.provenance + other.provenance,
        )

    def class_counts(self, num_classes: int = len(CLASS_NAMES)) -> list[int]:
        return np.bincount(self.labels, minlength=num_classes).tolist()


# -- windowing -------------------------------------------------------------


def hu_window(slice_: SliceImage, spec: HUWindowSpec = HUWindowSpec()) -> np.ndarray:
    """Map a HU slice to an H x W x 3 float32 image in [0, 1], one window per channel."""
    hu = slice_.hu_values if isinstance(slice_, SliceImage) else np.asarray(slice_, np.float64)
    chans = [np.clip((hu - lo) / (hi - lo), 0.0, 1.0) for lo, hi in spec.windows]
    return np.stack(chans, axis=-1).astype(np.float32)


# -- patch extraction ------------------------------------------------------


def points_in_polygon(px: np.ndarray, py: np.ndarray, polygon) -> np.ndarray:
    """Even-odd ray casting; points on an edge or vertex count as inside."""
    poly = np.asarray(polygon, dtype=np.float64)
    xa, ya = poly[:, 0], poly[:, 1]
    xb, yb = np.roll(xa, -1), np.roll(ya, -1)
    inside = np.zeros(np.shape(px), dtype=bool)
    on_edge = np.zeros(np.shape(px), dtype=bool)
    for x0, y0, x1, y1 in zip(xa, ya, xb, yb):
        straddles = (y0 > py) != (y1 > py)
        if y1 != y0:
            x_cross = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
            inside ^= straddles & (px < x_cross)
        cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
        scale = max(abs(x1 - x0), abs(y1 - y0), 1.0)
        on_edge |= (
            (np.abs(cross) <= 1e-9 * scale)
            & (px >= min(x0, x1)) & (px <= max(x0, x1))
            & (py >= min(y0, y1)) & (py <= max(y0, y1))
        )
    return inside | on_edge


def polygon_mask(height: int, width: int, polygon) -> np.ndarray:
    """Boolean H x W mask of pixels whose centers fall inside ``polygon``."""
    poly = np.asarray(polygon, dtype=np.float64)
    mask = np.zeros((height, width), dtype=bool)
    c0 = max(int(np.floor(poly[:, 0].min() - 0.5)), 0)
    c1 = min(int(np.ceil(poly[:, 0].max() - 0.5)) + 1, width)
    r0 = max(int(np.floor(poly[:, 1].min() - 0.5)), 0)
    r1 = min(int(np.ceil(poly[:, 1].max() - 0.5)) + 1, height)
    if c0 >= c1 or r0 >= r1:
        return mask
    py, px = np.mgrid[r0:r1, c0:c1].astype(np.float64) + 0.5
    mask[r0:r1, c0:c1] = points_in_polygon(px, py, poly)
    return mask


def extract_patches(
    image: np.ndarray,
    annotations: list[ROIAnnotation],
    patch_size: int = PATCH_SIZE,
    coverage: float = 0.80,
    scan_id: str = "",
    slice_id: str = "",
) -> list[Patch]:
    """Cut non-overlapping ``patch_size`` grid cells (anchored at the origin)
    that are at least ``coverage`` inside an annotation polygon.

    A cell claimed by several annotations goes to the one covering it most
    (earliest annotation on ties), so no two patches share pixels.
    """
    h, w = image.shape[:2]
    if patch_size > h or patch_size > w:
        raise DataError(f"patch size {patch_size} exceeds slice {h}x{w}")
    if not 0.0 < coverage <= 1.0:
        raise ConfigError(f"coverage must lie in (0, 1], got {coverage}")
    gh, gw = h // patch_size, w // patch_size
    need = coverage * patch_size * patch_size
    best = np.full((gh, gw), -1.0)
    owner = np.full((gh, gw), -1, dtype=np.int64)
    for a_idx, ann in enumerate(annotations):
        mask = polygon_mask(gh * patch_size, gw * patch_size, ann.polygon)
        counts = mask.reshape(gh, patch_size, gw, patch_size).sum(axis=(1, 3))
        take = (counts >= need - 1e-9) & (counts > best)
        best[take] = counts[take]
        owner[take] = a_idx

    patches = []
    for r, c in zip(*np.nonzero(owner >= 0)):
        ann = annotations[owner[r, c]]
        pix = image[r * patch_size : (r + 1) * patch_size, c * patch_size : (c + 1) * patch_size]
        if patch_size != PATCH_SIZE:
            pix = _resize(pix, PATCH_SIZE)
        patches.append(
            Patch(
                np.clip(pix, 0.0, 1.0).astype(np.float32),
                ann.class_index,
                Provenance(scan_id, slice_id or ann.slice_id, int(r), int(c)),
            )
        )
    return patches


# -- augmentation ----------------------------------------------------------


@dataclass(frozen=True)
class AugmentRanges:
    max_shift: int = 4
    max_rotation_deg: float = 15.0
    scale: tuple = (0.9, 1.1)
    shading: tuple = (0.8, 1.2)
    crop_size: int = 28
    max_shear: float = 0.1


TRANSFORMS = ("translation", "horizontal_flip", "rotation", "scaling", "shading", "cropping", "affine")
_CENTER = (PATCH_SIZE - 1) / 2.0


def _warp(img: np.ndarray, matrix: np.ndarray, offset: np.ndarray, order: int = 1) -> np.ndarray:
    """Resample each channel at input coords ``matrix @ out + offset`` (row, col)."""
    out = np.empty_like(img)
    for ch in range(img.shape[2]):
        out[..., ch] = ndimage.affine_transform(
            img[..., ch], matrix, offset=offset, order=order, mode="nearest", output=img.dtype
        )
    return out


def _about_center(matrix: np.ndarray, img: np.ndarray, order: int) -> np.ndarray:
    c = np.full(2, _CENTER)
    return _warp(img, matrix, c - matrix @ c, order)


def _resize(img: np.ndarray, size: int, order: int = 1) -> np.ndarray:
    h, w = img.shape[:2]
    m = np.diag([(h - 1) / (size - 1), (w - 1) / (size - 1)])
    out = np.empty((size, size, img.shape[2]), dtype=img.dtype)
    for ch in range(img.shape[2]):
        out[..., ch] = ndimage.affine_transform(
            img[..., ch], m, output_shape=(size, size), order=order, mode="nearest", output=img.dtype
        )
    return out


def translate(img, dx: int, dy: int):
    """Shift right by ``dx`` and down by ``dy`` pixels, replicating edges."""
    h, w = img.shape[:2]
    rows = np.clip(np.arange(h) - dy, 0, h - 1)
    cols = np.clip(np.arange(w) - dx, 0, w - 1)
    return img[rows][:, cols]


def horizontal_flip(img):
    return img[:, ::-1].copy()


def rotate(img, degrees: float, order: int = 1):
    t = np.deg2rad(degrees)
    m = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    return _about_center(m, img, order)


def scale(img, factor: float, order: int = 1):
    return _about_center(np.eye(2) / factor, img, order)


def shade(img, factor: float):
    return img * img.dtype.type(factor)


def crop(img, top: int, left: int, size: int, order: int = 1):
    return _resize(img[top : top + size, left : left + size], img.shape[0], order)


def shear(img, k: float, order: int = 1):
    return _about_center(np.array([[1.0, 0.0], [k, 1.0]]), img, order)


def draw_params(transform: str, rng: np.random.Generator, ranges: AugmentRanges = AugmentRanges()) -> dict:
    if transform == "translation":
        return {"dx": int(rng.integers(-ranges.max_shift, ranges.max_shift + 1)),
                "dy": int(rng.integers(-ranges.max_shift, ranges.max_shift + 1))}
    if transform == "horizontal_flip":
        return {}
    if transform == "rotation":
        return {"degrees": float(rng.uniform(-ranges.max_rotation_deg, ranges.max_rotation_deg))}
    if transform == "scaling":
        return {"factor": float(rng.uniform(*ranges.scale))}
    if transform == "shading":
        return {"factor": float(rng.uniform(*ranges.shading))}
    if transform == "cropping":
        slack = PATCH_SIZE - ranges.crop_size
        return {"top": int(rng.integers(0, slack + 1)), "left": int(rng.integers(0, slack + 1)),
                "size": ranges.crop_size}
    if transform == "affine":
        return {"k": float(rng.uniform(-ranges.max_shear, ranges.max_shear))}
    raise ConfigError(f"unknown transform {transform!r}; choose from {TRANSFORMS}")


_APPLY = {
    "translation": lambda img, p, o: translate(img, p["dx"], p["dy"]),
    "horizontal_flip": lambda img, p, o: horizontal_flip(img),
    "rotation": lambda img, p, o: rotate(img, p["degrees"], o),
    "scaling": lambda img, p, o: scale(img, p["factor"], o),
    "shading": lambda img, p, o: shade(img, p["factor"]),
    "cropping": lambda img, p, o: crop(img, p["top"], p["left"], p["size"], o),
    "affine": lambda img, p, o: shear(img, p["k"], o),
}


def augment(
    patch: Patch,
    transform: str,
    seed: int = 0,
    params: dict | None = None,
    ranges: AugmentRanges = AugmentRanges(),
    interpolation: str = "bilinear",
    tag: str | None = None,
) -> Patch:
    """Apply one label-preserving transform; parameters come from ``seed``
    unless given explicitly. Output values are clamped to [0, 1]."""
    if transform not in _APPLY:
        raise ConfigError(f"unknown transform {transform!r}; choose from {TRANSFORMS}")
    order = {"bilinear": 1, "nearest": 0}.get(interpolation)
    if order is None:
        raise ConfigError(f"interpolation must be 'bilinear' or 'nearest', got {interpolation!r}")
    if params is None:
        params = draw_params(transform, np.random.default_rng(seed), ranges)
    img = np.asarray(patch.pixels, dtype=np.float32)
    out = np.clip(_APPLY[transform](img, params, order), 0.0, 1.0).astype(np.float32)
    return Patch(out, patch.label, replace(patch.provenance, transform=tag or transform))


def sample_seed(base_seed: int, key, variant: int = 0) -> int:
    """Per-sample seed from a base seed and a stable sample key."""
    digest = hashlib.blake2b(repr(key).encode(), digest_size=8).digest()
    ss = np.random.SeedSequence([int(base_seed), int.from_bytes(digest, "little"), int(variant)])
    return int(ss.generate_state(1, np.uint64)[0])


def expand_training_set(
    dataset: PatchDataset,
    transforms=TRANSFORMS,
    factor: int = 7,
    seed: int = 0,
    keep_originals: bool = False,
    ranges: AugmentRanges = AugmentRanges(),
    interpolation: str = "bilinear",
) -> PatchDataset:
    """Give every source patch ``factor`` augmented variants, cycling through
    ``transforms``. ``factor == 0`` returns the dataset unchanged."""
    if factor < 0:
        raise ConfigError("augmentation factor must be non-negative")
    if factor == 0:
        return dataset
    transforms = tuple(transforms)
    for t in transforms:
        if t not in _APPLY:
            raise ConfigError(f"unknown transform {t!r}; choose from {TRANSFORMS}")
    out = []
    for i in range(len(dataset)):
        src = dataset.patch(i)
        for j in range(factor):
            name = transforms[j % len(transforms)]
            rep = j // len(transforms)
            tag = name if rep == 0 else f"{name}#{rep}"
            s = sample_seed(seed, src.provenance.source_key + (src.provenance.transform,), j)
            out.append(augment(src, name, s, ranges=ranges, interpolation=interpolation, tag=tag))
    augmented = PatchDataset.from_patches(out)
    return dataset.concat(augmented) if keep_originals else augmented


# -- splitting -------------------------------------------------------------


def stratified_split(dataset: PatchDataset, test_per_class: int = 150, seed: int = 0, num_classes: int = 5):
    """Hold out ``test_per_class`` distinct source cells per class.

    Returns ``(train, test)``. Test holds one sample per chosen source (the
    original when present); train holds every sample whose source was not
    chosen, so no variant of a test source reaches training.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 4]))
    groups: dict[tuple, list[int]] = {}
    for i, p in enumerate(dataset.provenance):
        groups.setdefault(p.source_key, []).append(i)
    test_keys = set()
    test_idx = []
    for c in range(num_classes):
        keys = sorted({dataset.provenance[i].source_key for i in np.flatnonzero(dataset.labels == c)}, key=repr)
        if len(keys) < test_per_class:
            raise DataError(
                f"class {c} ({CLASS_NAMES[c] if c < len(CLASS_NAMES) else c}) has {len(keys)} source patches, "
                f"{test_per_class} needed for the test split"
            )
        for k in rng.choice(len(keys), size=test_per_class, replace=False):
            key = keys[k]
            test_keys.add(key)
            members = groups[key]
            originals = [i for i in members if dataset.provenance[i].transform == ORIGINAL]
            test_idx.append((originals or members)[0])
    train_idx = [i for i, p in enumerate(dataset.provenance) if p.source_key not in test_keys]
    return dataset.subset(sorted(train_idx)), dataset.subset(sorted(test_idx))


@dataclass
class FoldAssignment:
    folds: np.ndarray
    k: int
    stratified: bool

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.folds == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.folds != fold)

    def sizes(self) -> list[int]:
        return np.bincount(self.folds, minlength=self.k).tolist()


def kfold(labels, k: int = 5, stratified: bool = True, seed: int = 0) -> FoldAssignment:
    """Assign each sample a fold in ``range(k)``.

    Stratified: each class is shuffled and dealt round-robin, the dealing
    offset carried over between classes so total fold sizes also stay
    within one of each other.

    Given a :class:`PatchDataset`, folds are dealt per source cell and every
    augmented variant follows its source, so a fold never splits a source.
    """
    if isinstance(labels, PatchDataset):
        ds = labels
        keys = [p.source_key for p in ds.provenance]
        first: dict[tuple, int] = {}
        for i, key in enumerate(keys):
            first.setdefault(key, i)
        if len(first) == len(ds):
            return kfold(ds.labels, k, stratified, seed)
        order = sorted(first, key=repr)
        per_source = kfold(ds.labels[[first[key] for key in order]], k, stratified, seed)
        fold_of = dict(zip(order, per_source.folds))
        return FoldAssignment(np.array([fold_of[key] for key in keys], dtype=np.int64), k, stratified)
    labels = np.asarray(labels)
    if k < 2:
        raise ConfigError("k must be at least 2")
    if labels.size < k:
        raise DataError(f"cannot split {labels.size} samples into {k} folds")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 5]))
    folds = np.empty(labels.size, dtype=np.int64)
    if not stratified:
        order = rng.permutation(labels.size)
        folds[order] = np.arange(labels.size) % k
        return FoldAssignment(folds, k, False)
    offset = 0
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        folds[idx] = (offset + np.arange(idx.size)) % k
        offset = (offset + idx.size) % k
    return FoldAssignment(folds, k, True)


# -- synthetic data --------------------------------------------------------

# Per-class texture families: dominant orientation (degrees), spatial
# frequency (cycles/pixel), per-channel base intensity.
_SYNTH_FAMILIES = (
    (0.0, 0.06, (0.40, 0.48, 0.45)),
    (36.0, 0.10, (0.46, 0.52, 0.47)),
    (72.0, 0.14, (0.38, 0.44, 0.52)),
    (108.0, 0.20, (0.48, 0.45, 0.42)),
    (144.0, 0.28, (0.42, 0.54, 0.52)),
)


def synthesize_dataset(n_per_class: int = 100, seed: int = 0) -> PatchDataset:
    """Five seeded, balanced 32 x 32 x 3 oriented-texture classes.

    Each sample is a base color plus an oriented sinusoid (jittered angle,
    frequency and phase), a brightness offset and pixel noise.
    """
    if n_per_class < 0:
        raise ConfigError("n_per_class must be non-negative")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 6]))
    yy, xx = np.mgrid[0:PATCH_SIZE, 0:PATCH_SIZE].astype(np.float64)
    images, labels, prov = [], [], []
    for c, (angle, freq, base) in enumerate(_SYNTH_FAMILIES):
        n = n_per_class
        theta = np.deg2rad(angle + rng.normal(0.0, 6.0, n))[:, None, None]
        f = (freq * rng.uniform(0.9, 1.1, n))[:, None, None]
        phase = rng.uniform(0, 2 * np.pi, n)[:, None, None]
        amp = rng.uniform(0.12, 0.2, n)[:, None, None, None]
        wave = np.sin(2 * np.pi * f * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        offset = rng.normal(0.0, 0.025, (n, 1, 1, 1))
        noise = rng.normal(0.0, 0.12, (n, PATCH_SIZE, PATCH_SIZE, 3))
        img = np.asarray(base)[None, None, None, :] + amp * wave[..., None] + offset + noise
        images.append(np.clip(img, 0.0, 1.0).astype(np.float32))
        labels.append(np.full(n, c))
        prov += [Provenance("synthetic", CLASS_NAMES[c], i, 0) for i in range(n)]
    return PatchDataset(np.concatenate(images), np.concatenate(labels), prov)


# -- on-disk formats -------------------------------------------------------

MANIFEST_FIELDS = ("index", "label", "label_name", "scan", "slice", "row", "col", "transform")


def save_dataset(ds: PatchDataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    np.save(d / "patches.npy", ds.images.astype(np.float32))
    lines = ["\t".join(MANIFEST_FIELDS)]
    for i, (lab, p) in enumerate(zip(ds.labels, ds.provenance)):
        lines.append("\t".join(map(str, (i, lab, CLASS_NAMES[lab], p.scan, p.slice, p.row, p.col, p.transform))))
    (d / "manifest.tsv").write_text("\n".join(lines) + "\n")


def load_dataset(directory) -> PatchDataset:
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"patch store {d} does not exist")
    try:
        images = np.load(d / "patches.npy")
        rows = (d / "manifest.tsv").read_text().splitlines()
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read patch store {d}: {e}") from None
    if not rows or tuple(rows[0].split("\t")) != MANIFEST_FIELDS:
        raise DataError(f"{d / 'manifest.tsv'}: bad header")
    labels, prov = [], []
    for n, line in enumerate(rows[1:], start=2):
        parts = line.split("\t")
        if len(parts) != len(MANIFEST_FIELDS):
            raise DataError(f"{d / 'manifest.tsv'}:{n}: expected {len(MANIFEST_FIELDS)} fields")
        _, lab, _, scan, sl, r, c, t = parts
        labels.append(int(lab))
        prov.append(Provenance(scan, sl, int(r), int(c), t))
    if len(labels) != len(images):
        raise DataError(f"{d}: manifest lists {len(labels)} patches, array holds {len(images)}")
    return PatchDataset(images, np.array(labels, dtype=np.int64), prov)


def parse_annotations(text: str, source: str = "<annotations>") -> list[ROIAnnotation]:
    anns = []
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 5:
            raise DataError(f"{source}:{n}: need slice id, label and at least 3 vertices")
        try:
            verts = [tuple(float(v) for v in tok.split(",")) for tok in parts[2:]]
            if any(len(v) != 2 for v in verts):
                raise ValueError
        except ValueError:
            raise DataError(f"{source}:{n}: vertices must be x,y pairs") from None
        try:
            anns.append(ROIAnnotation(np.array(verts), parts[1], parts[0]))
        except DataError as e:
            raise DataError(f"{source}:{n}: {e}") from None
    return anns


def format_annotations(anns: list[ROIAnnotation]) -> str:
    lines = []
    for a in anns:
        verts = " ".join(f"{x:g},{y:g}" for x, y in a.polygon)
        lines.append(f"{a.slice_id} {a.label} {verts}")
    return "\n".join(lines) + "\n"


def read_slice(path) -> np.ndarray:
    """HU matrix from a 16-bit PNG (stored - 1024) or a ``.npy`` of HU values."""
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path).astype(np.float64)
    from PIL import Image

    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim != 2:
        raise DataError(f"{path}: expected a single-channel image")
    return arr.astype(np.float64) - HU_OFFSET


def write_slice(path, hu: np.ndarray) -> None:
    """Store a HU matrix as 16-bit grayscale PNG using the +1024 offset."""
    from PIL import Image

    stored = np.clip(np.rint(np.asarray(hu) + HU_OFFSET), 0, 65535).astype(np.uint16)
    Image.fromarray(stored).save(Path(path))


def iter_scan_directory(root):
    """Yield ``(SliceImage, [ROIAnnotation])`` for every annotated slice under ``root``."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    scans = sorted(p for p in root.iterdir() if p.is_dir())
    if not scans:
        raise DataError(f"dataset directory {root} contains no scan folders")
    for scan in scans:
        ann_file = scan / "annotations.txt"
        if not ann_file.exists():
            raise DataError(f"{scan}: missing annotations.txt")
        by_slice: dict[str, list[ROIAnnotation]] = {}
        for a in parse_annotations(ann_file.read_text(), str(ann_file)):
            by_slice.setdefault(a.slice_id, []).append(a)
        for slice_id in sorted(by_slice):
            candidates = [scan / "slices" / f"{slice_id}{ext}" for ext in (".png", ".npy")]
            path = next((c for c in candidates if c.exists()), None)
            if path is None:
                raise DataError(f"{scan}: slice {slice_id} referenced by annotations not found")
            yield SliceImage(read_slice(path), scan.name, slice_id), by_slice[slice_id]
