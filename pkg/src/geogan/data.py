"""Dataset model, disk layout, and a procedural toy-CT generator.

The toy generator draws lung-like dark ellipses on brighter tissue and, for
infected samples, plants 1-3 soft blobs per pathology label inside the lungs.
Each label carries its own intensity/texture signature and a geometric rule
(effusion hugs the lung boundary, consolidation is denser than ground-glass),
so both crop-level appearance and inter-label geometry are learnable. Masks
are exact by construction and every sample is a pure function of (args, seed).

Disk layout:
    root/{train,val,test}/{images,masks}/<id>.png
    root/scheme.json            label names (index = integer encoding)
    root/labels.csv             id,class_label over all splits
Images are 8-bit grayscale PNG (intensities mapped to [0,1] on load); masks
are 8-bit paletted PNG holding one label index per pixel.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

SPLITS = ("train", "val", "test")

# Mean intensity per region; margins >= 0.1 keep crop appearance separable.
TEXTURE_LEVELS = {
    "tissue": 0.62,
    "lung": 0.22,
    "ggo": 0.42,
    "consolidation": 0.80,
    "effusion": 0.52,
}

_PALETTE = [
    (0, 0, 0),
    (220, 60, 60),
    (60, 200, 60),
    (70, 110, 240),
    (230, 200, 50),
    (200, 80, 220),
    (90, 210, 210),
    (240, 140, 40),
]


class DatasetError(ValueError):
    """Raised when a dataset on disk violates the layout or label contract."""


@dataclass(frozen=True)
class LabelScheme:
    """Label names; a name's list index is its integer encoding (0 = background)."""

    names: tuple[str, ...]

    def __post_init__(self):
        if len(self.names) < 2:
            raise ValueError("scheme needs background plus at least one label")
        if len(set(self.names)) != len(self.names):
            raise ValueError("label names must be unique")

    @property
    def n(self) -> int:
        return len(self.names)

    @property
    def encoding(self) -> dict[str, int]:
        return {name: k for k, name in enumerate(self.names)}

    @property
    def pathology_labels(self) -> tuple[int, ...]:
        return tuple(range(1, self.n))

    def validate_mask(self, mask: np.ndarray) -> None:
        mask = np.asarray(mask)
        if mask.min(initial=0) < 0 or mask.max(initial=0) >= self.n:
            bad = sorted(set(np.unique(mask)) - set(range(self.n)))
            raise DatasetError(f"mask contains unregistered labels {bad}")

    def to_json(self) -> str:
        return json.dumps({"names": list(self.names)}, indent=2)

    @staticmethod
    def from_json(text: str) -> "LabelScheme":
        return LabelScheme(tuple(json.loads(text)["names"]))

    def digest(self) -> str:
        return hashlib.sha256(",".join(self.names).encode()).hexdigest()[:16]


def default_scheme() -> LabelScheme:
    return LabelScheme(("background", "ggo", "consolidation", "effusion"))


@dataclass
class ImageSample:
    id: str
    image: np.ndarray  # H×W float in [0,1]
    mask: np.ndarray  # H×W integer labels
    class_label: int  # 1 = infected, 0 = not infected

    def validate(self, scheme: LabelScheme) -> None:
        if self.image.shape != self.mask.shape:
            raise DatasetError(
                f"sample {self.id}: image {self.image.shape} vs mask {self.mask.shape}"
            )
        scheme.validate_mask(self.mask)
        if self.class_label == 0 and (self.mask > 0).any():
            raise DatasetError(f"sample {self.id}: not-infected but mask has labels")


@dataclass(frozen=True)
class GridSpec:
    """N×N instance grid; dims must divide evenly."""

    n: int = 4

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("grid N must be >= 1")

    def cell_shape(self, h: int, w: int) -> tuple[int, int]:
        if h % self.n or w % self.n:
            raise ValueError(f"dims {h}x{w} not divisible by grid N={self.n}")
        return h // self.n, w // self.n


@dataclass
class InstanceBag:
    """One image as a bag of N² row-major grid crops."""

    instances: list[np.ndarray]
    bag_label: int
    source_id: str

    def __post_init__(self):
        if not self.instances:
            raise ValueError("bag must hold at least one instance")
        shapes = {i.shape for i in self.instances}
        if len(shapes) != 1:
            raise ValueError(f"instances of mixed shapes {shapes}")


@dataclass
class DatasetSplit:
    train: list[str]
    val: list[str]
    test: list[str]
    seed: int

    def validate(self) -> None:
        groups = [set(self.train), set(self.val), set(self.test)]
        total = sum(len(g) for g in groups)
        union = set().union(*groups)
        if total != len(union):
            raise ValueError("split lists overlap")


@dataclass
class Dataset:
    scheme: LabelScheme
    splits: dict[str, list[ImageSample]] = field(default_factory=dict)

    def all_samples(self) -> list[ImageSample]:
        return [s for split in SPLITS for s in self.splits.get(split, [])]


# ------------------------------------------------------------- grid slicing
def cell_view(arr: np.ndarray, n: int) -> list[np.ndarray]:
    """Row-major list of the N² grid cells of a 2-D array (views, not copies)."""
    h, w = arr.shape
    ch, cw = GridSpec(n).cell_shape(h, w)
    return [
        arr[r * ch : (r + 1) * ch, c * cw : (c + 1) * cw]
        for r in range(n)
        for c in range(n)
    ]


def reassemble_cells(cells: list[np.ndarray], n: int) -> np.ndarray:
    if len(cells) != n * n:
        raise ValueError(f"expected {n * n} cells, got {len(cells)}")
    rows = [np.concatenate(cells[r * n : (r + 1) * n], axis=1) for r in range(n)]
    return np.concatenate(rows, axis=0)


def split_into_instances(sample: ImageSample, grid: GridSpec) -> InstanceBag:
    crops = [c.copy() for c in cell_view(sample.image, grid.n)]
    return InstanceBag(crops, sample.class_label, sample.id)


# --------------------------------------------------------------- generation
def _lung_regions(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean lung map: two jittered ellipses, left/right."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    lung = np.zeros((h, w), dtype=bool)
    for cx_frac in (0.28, 0.72):
        cy = h * (0.50 + rng.uniform(-0.03, 0.03))
        cx = w * (cx_frac + rng.uniform(-0.02, 0.02))
        ry = h * (0.36 + rng.uniform(-0.03, 0.03))
        rx = w * (0.20 + rng.uniform(-0.015, 0.015))
        lung |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return lung


def _gaussian_blob(
    h: int, w: int, center: tuple[float, float], rng: np.random.Generator,
    sigma_range: tuple[float, float],
) -> np.ndarray:
    """Sum of 1-3 anisotropic Gaussians around `center`, thresholded at half max."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    total = np.zeros((h, w), dtype=np.float64)
    for _ in range(int(rng.integers(1, 4))):
        cy = center[0] + rng.uniform(-2.5, 2.5)
        cx = center[1] + rng.uniform(-2.5, 2.5)
        sy = rng.uniform(*sigma_range)
        sx = rng.uniform(*sigma_range)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dy * np.cos(theta) + dx * np.sin(theta)
        v = -dy * np.sin(theta) + dx * np.cos(theta)
        total += np.exp(-0.5 * ((u / sy) ** 2 + (v / sx) ** 2))
    return total >= 0.5 * total.max()


def _interior_point(region: np.ndarray, rng: np.random.Generator) -> tuple[float, float]:
    ys, xs = np.nonzero(region)
    k = int(rng.integers(len(ys)))
    return float(ys[k]), float(xs[k])


def _vertical_band(region: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Rows [lo, hi) of the region's vertical extent; whole region if empty."""
    ys, _ = np.nonzero(region)
    y0, y1 = int(ys.min()), int(ys.max()) + 1
    banded = region.copy()
    banded[: y0 + int(lo * (y1 - y0))] = False
    banded[y0 + int(np.ceil(hi * (y1 - y0))) :] = False
    return banded if banded.any() else region


def _boundary_point(lung: np.ndarray, rng: np.random.Generator,
                    band: tuple[float, float]) -> tuple[float, float]:
    interior = gaussian_filter(lung.astype(np.float64), 2.0) > 0.95
    ring = lung & ~interior
    return _interior_point(_vertical_band(ring if ring.any() else lung, *band), rng)


def _place_label_blobs(
    mask: np.ndarray, lung: np.ndarray, label: int, rng: np.random.Generator,
    boundary: bool, sigma_range: tuple[float, float],
    band: tuple[float, float],
) -> None:
    """Write 1-2 blobs of `label` onto free lung pixels; guarantees >= 1 pixel.

    `band` restricts blob centers to a vertical slice of the lung, giving each
    label a characteristic arrangement (ground-glass apical, consolidation
    basal, effusion along the dependent boundary) that inter-label geometry
    models can exploit.
    """
    h, w = mask.shape
    n_blobs = int(rng.integers(1, 3))
    placed = 0
    for _ in range(n_blobs):
        for _attempt in range(25):
            center = (
                _boundary_point(lung, rng, band) if boundary
                else _interior_point(_vertical_band(lung, *band), rng)
            )
            blob = _gaussian_blob(h, w, center, rng, sigma_range) & lung & (mask == 0)
            if blob.sum() >= 90:
                mask[blob] = label
                placed += 1
                break
    if placed == 0:
        # Degenerate fallback: claim a small disc at any free lung pixel.
        free = lung & (mask == 0)
        cy, cx = _interior_point(free, rng)
        yy, xx = np.mgrid[0:h, 0:w]
        disc = ((yy - cy) ** 2 + (xx - cx) ** 2 <= 9) & free
        mask[disc] = label


def _smooth_noise(shape, rng: np.random.Generator, sigma: float) -> np.ndarray:
    return gaussian_filter(rng.normal(0.0, 1.0, shape), sigma)


def _render_image(
    mask: np.ndarray, lung: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Compose intensities with per-sample level jitter around TEXTURE_LEVELS.

    The jitter makes label appearance overlap across samples (effusion can
    match another sample's ground-glass level), so segmentation must combine
    intensity with texture and context instead of thresholding. Pathology
    regions carry a strong fine-grain speckle (sigma-1 band) that background
    lacks, making even a small crop locally classifiable; all bands stay
    band-limited so bilinear resampling preserves their statistics.
    """
    h, w = mask.shape
    tissue_mu = TEXTURE_LEVELS["tissue"] + rng.uniform(-0.09, 0.09)
    lung_mu = TEXTURE_LEVELS["lung"] + rng.uniform(-0.08, 0.08)
    ggo_mu = lung_mu + rng.uniform(0.13, 0.25)
    cons_mu = TEXTURE_LEVELS["consolidation"] + rng.uniform(-0.08, 0.08)
    eff_mu = tissue_mu - rng.uniform(0.05, 0.16)
    amp = rng.uniform(0.9, 2.0)

    img = tissue_mu + 0.06 * amp * _smooth_noise((h, w), rng, 3.0)
    img += 0.02 * amp * _smooth_noise((h, w), rng, 0.8)
    lung_tex = lung_mu + 0.04 * amp * _smooth_noise((h, w), rng, 2.0)
    lung_tex += 0.012 * amp * _smooth_noise((h, w), rng, 0.8)
    img = np.where(lung, lung_tex, img)

    ggo = ggo_mu + 0.16 * amp * _smooth_noise((h, w), rng, 1.0)
    img = np.where(mask == 1, ggo, img)
    cons = cons_mu + 0.10 * amp * _smooth_noise((h, w), rng, 1.0)
    img = np.where(mask == 2, cons, img)
    yy = np.mgrid[0:h, 0:w][0].astype(np.float64)
    eff = eff_mu + 0.03 * (yy / h - 0.5)
    eff = eff + 0.12 * amp * _smooth_noise((h, w), rng, 1.0)
    img = np.where(mask == 3, eff, img)

    img = np.clip(img, 0.0, 1.0)
    return np.round(img * 255.0) / 255.0  # 8-bit quantization up front


def generate_toy_dataset(
    count: int,
    dims: tuple[int, int] = (64, 64),
    scheme: LabelScheme | None = None,
    infected_fraction: float = 0.5,
    seed: int = 0,
    id_prefix: str = "toy",
) -> list[ImageSample]:
    """Procedural toy-CT samples with exact masks; pure function of arguments.

    Exactly round(count * infected_fraction) samples are infected; each
    infected sample carries 1-3 blobs of every pathology label in the scheme.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if not 0.0 <= infected_fraction <= 1.0:
        raise ValueError("infected_fraction must lie in [0,1]")
    h, w = dims
    if h < 32 or w < 32 or (h & (h - 1)) or (w & (w - 1)):
        raise ValueError("dims must be powers of two >= 32")
    scheme = scheme or default_scheme()

    n_infected = int(round(count * infected_fraction))
    flags = np.zeros(count, dtype=np.int64)
    order = np.random.default_rng([seed, 0xD5]).permutation(count)
    flags[order[:n_infected]] = 1

    sigma_by_label = {1: (6.5, 11.0), 2: (6.0, 10.0), 3: (5.5, 9.5)}
    band_by_label = {1: (0.0, 0.5), 2: (0.45, 1.0), 3: (0.5, 1.0)}
    samples = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        lung = _lung_regions(h, w, rng)
        mask = np.zeros((h, w), dtype=np.int64)
        if flags[i] == 1:
            for label in scheme.pathology_labels:
                _place_label_blobs(
                    mask, lung, label, rng,
                    boundary=(scheme.names[label] == "effusion"),
                    sigma_range=sigma_by_label.get(label, (5.0, 8.5)),
                    band=band_by_label.get(label, (0.0, 1.0)),
                )
        image = _render_image(mask, lung, rng)
        sample = ImageSample(f"{id_prefix}{i:04d}", image, mask, int(flags[i]))
        sample.validate(scheme)
        samples.append(sample)
    return samples


# ---------------------------------------------------------------------- IO
def _palette_bytes(n: int) -> bytes:
    table = [_PALETTE[k % len(_PALETTE)] for k in range(max(n, 1))]
    flat = [c for rgb in table for c in rgb]
    flat += [0] * (768 - len(flat))
    return bytes(flat)


def save_image_png(image: np.ndarray, path: Path) -> None:
    arr = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def save_mask_png(mask: np.ndarray, path: Path, n_labels: int) -> None:
    img = Image.fromarray(mask.astype(np.uint8), mode="P")
    img.putpalette(_palette_bytes(n_labels))
    img.save(path)


def load_image_png(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0


def load_mask_png(path: Path) -> np.ndarray:
    img = Image.open(path)
    if img.mode not in ("P", "L"):
        raise DatasetError(f"{path}: mask must be paletted or grayscale PNG")
    return np.asarray(img, dtype=np.int64)


def save_dataset(dataset: Dataset, root: Path) -> None:
    """Write the full tree: per-split images/masks, scheme.json, labels.csv."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "scheme.json").write_text(dataset.scheme.to_json())
    rows = []
    for split, samples in dataset.splits.items():
        img_dir = root / split / "images"
        msk_dir = root / split / "masks"
        img_dir.mkdir(parents=True, exist_ok=True)
        msk_dir.mkdir(parents=True, exist_ok=True)
        for s in samples:
            save_image_png(s.image, img_dir / f"{s.id}.png")
            save_mask_png(s.mask, msk_dir / f"{s.id}.png", dataset.scheme.n)
            rows.append((s.id, s.class_label))
    with open(root / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "class_label"])
        writer.writerows(rows)


def load_dataset(
    root: Path, splits: tuple[str, ...] = SPLITS, validate_class: bool = True
) -> Dataset:
    """Read a dataset tree back; empty directories yield empty splits."""
    root = Path(root)
    scheme_path = root / "scheme.json"
    if not scheme_path.exists():
        raise DatasetError(f"missing {scheme_path}")
    scheme = LabelScheme.from_json(scheme_path.read_text())

    labels: dict[str, int] = {}
    labels_path = root / "labels.csv"
    if labels_path.exists():
        with open(labels_path, newline="") as fh:
            for row in csv.DictReader(fh):
                labels[row["id"]] = int(row["class_label"])

    dataset = Dataset(scheme=scheme)
    for split in splits:
        img_dir = root / split / "images"
        samples: list[ImageSample] = []
        if img_dir.is_dir():
            for img_path in sorted(img_dir.glob("*.png")):
                sid = img_path.stem
                mask_path = root / split / "masks" / f"{sid}.png"
                if not mask_path.exists():
                    raise DatasetError(f"sample {sid}: missing mask file {mask_path}")
                image = load_image_png(img_path)
                mask = load_mask_png(mask_path)
                if image.shape != mask.shape:
                    raise DatasetError(
                        f"sample {sid}: image {image.shape} vs mask {mask.shape}"
                    )
                scheme.validate_mask(mask)
                sample = ImageSample(sid, image, mask, labels.get(sid, int((mask > 0).any())))
                if validate_class:
                    sample.validate(scheme)
                samples.append(sample)
        dataset.splits[split] = samples
    return dataset


def make_toy_dataset_tree(
    root: Path,
    counts: dict[str, int],
    dims: tuple[int, int] = (64, 64),
    infected_fraction: float = 0.5,
    seed: int = 0,
    scheme: LabelScheme | None = None,
) -> Dataset:
    """Generate per-split toy data (derived per-split seeds) and write the tree."""
    scheme = scheme or default_scheme()
    dataset = Dataset(scheme=scheme)
    for k, split in enumerate(SPLITS):
        n = counts.get(split, 0)
        if n > 0:
            dataset.splits[split] = generate_toy_dataset(
                n, dims, scheme, infected_fraction, seed=seed * 31 + k,
                id_prefix=f"{split}_",
            )
        else:
            dataset.splits[split] = []
    save_dataset(dataset, root)
    return dataset
