"""Dataset model, on-disk format, preprocessing, splitting, and synthetic data.

On disk a dataset is a directory with a ``manifest.json`` at its root plus one
raw binary file per array: images as little-endian float32, masks as uint8,
both row-major with no header (shapes live in the manifest).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1

IMAGE_DTYPE = np.dtype("<f4")
MASK_DTYPE = np.dtype("|u1")


@dataclass
class Sample:
    """One 2D case: source image, optional privileged target image, lesion mask.

    Images are float32 in [-1, 1]; the mask is uint8 in {0, 1}. All arrays
    share the same height/width. ``spacing`` is (row_mm, col_mm).
    """

    id: str
    source: np.ndarray
    mask: np.ndarray
    target: np.ndarray | None = None
    spacing: tuple[float, float] = (1.0, 1.0)

    def validate(self) -> None:
        if self.source.ndim != 2:
            raise DataError(f"sample {self.id!r}: source must be 2D")
        if self.mask.shape != self.source.shape:
            raise DataError(
                f"sample {self.id!r}: mask shape {self.mask.shape} != "
                f"source shape {self.source.shape}"
            )
        if self.target is not None and self.target.shape != self.source.shape:
            raise DataError(
                f"sample {self.id!r}: target shape {self.target.shape} != "
                f"source shape {self.source.shape}"
            )
        for name, img in (("source", self.source), ("target", self.target)):
            if img is None:
                continue
            if not np.isfinite(img).all():
                raise DataError(f"sample {self.id!r}: {name} has non-finite values")
            if img.min() < -1.0 or img.max() > 1.0:
                raise DataError(
                    f"sample {self.id!r}: {name} values outside [-1, 1] "
                    f"(min {img.min():.4g}, max {img.max():.4g})"
                )
        bad = np.setdiff1d(np.unique(self.mask), [0, 1])
        if bad.size:
            raise DataError(
                f"sample {self.id!r}: mask contains values {bad.tolist()} outside {{0, 1}}"
            )
        if len(self.spacing) != 2 or any(s <= 0 for s in self.spacing):
            raise DataError(f"sample {self.id!r}: spacing must be two positive floats")

    @property
    def patient_key(self) -> str:
        """Grouping key for leakage-safe splits: id prefix before the first '_'."""
        return self.id.split("_", 1)[0]


Dataset = list[Sample]


@dataclass(frozen=True)
class SplitSpec:
    """Deterministic split of a training set into translator/predictor halves."""

    seed: int
    fraction_translator: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.fraction_translator < 1.0:
            raise ValueError("fraction_translator must be in (0, 1)")


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the paired-modality synthetic lesion generator.

    Each sample consists of a smooth background texture with random elliptical
    lesions. The lesion interior is raised by ``source_lesion_contrast`` in the
    source image and by ``target_lesion_contrast`` in the target image, so a
    contrast of 0 makes lesions invisible in that modality. Gaussian pixel
    noise of ``noise_sigma`` is added to both modalities independently before
    re-clipping to [-1, 1]. Identical spec + seed gives bit-identical output.
    """

    n_samples: int
    image_size: tuple[int, int] = (64, 64)
    lesion_count_range: tuple[int, int] = (1, 3)
    lesion_radius_range: tuple[float, float] = (4.0, 9.0)
    source_lesion_contrast: float = 0.15
    target_lesion_contrast: float = 0.8
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 0:
            raise ValueError("n_samples must be >= 0")
        if not (0.0 <= self.source_lesion_contrast <= 1.0):
            raise ValueError("source_lesion_contrast must be in [0, 1]")
        if not (0.0 <= self.target_lesion_contrast <= 1.0):
            raise ValueError("target_lesion_contrast must be in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.lesion_count_range[0] > self.lesion_count_range[1]:
            raise ValueError("lesion_count_range must be (min, max) with min <= max")
        if self.lesion_radius_range[0] > self.lesion_radius_range[1]:
            raise ValueError("lesion_radius_range must be (min, max) with min <= max")
        h, w = self.image_size
        if 2 * self.lesion_radius_range[1] >= min(h, w):
            raise ValueError(
                f"lesion radius {self.lesion_radius_range[1]} too large for "
                f"image size {self.image_size}"
            )

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown synthetic spec keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("image_size", "lesion_count_range", "lesion_radius_range"):
            if key in d:
                d[key] = tuple(d[key])
        try:
            return cls(**d)
        except (TypeError, ValueError) as e:
            raise DataError(f"invalid synthetic spec: {e}") from e


# ---------------------------------------------------------------------------
# Raw array IO
# ---------------------------------------------------------------------------

def read_array(path: Path, dtype: np.dtype, shape: tuple[int, int]) -> np.ndarray:
    """Read one raw row-major array; the single choke point for array reads."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"array file not found: {path}")
    expected = int(np.prod(shape)) * dtype.itemsize
    data = path.read_bytes()
    if len(data) != expected:
        raise DataError(
            f"array file {path} has {len(data)} bytes, expected {expected} "
            f"for shape {shape} dtype {dtype.name}"
        )
    return np.frombuffer(data, dtype=dtype).reshape(shape).copy()


def write_array(path: Path, array: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if array.dtype.kind == "f":
        out = np.ascontiguousarray(array, dtype=IMAGE_DTYPE)
    else:
        out = np.ascontiguousarray(array, dtype=MASK_DTYPE)
    path.write_bytes(out.tobytes())


# ---------------------------------------------------------------------------
# Manifest load/save
# ---------------------------------------------------------------------------

def load_dataset(manifest_path: Path | str, load_targets: bool = True) -> Dataset:
    """Load and validate a dataset from its manifest.

    With ``load_targets=False`` the target entries are ignored entirely:
    target files are neither checked for existence nor opened, so a dataset
    whose target files were deleted still loads.
    """
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DataError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text("utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"manifest {manifest_path} is not valid JSON: {e}") from e

    version = manifest.get("version")
    if version != MANIFEST_VERSION:
        raise DataError(f"unsupported manifest version {version!r}")
    try:
        h, w = manifest["image_size"]
        entries = manifest["samples"]
    except (KeyError, ValueError) as e:
        raise DataError(f"manifest {manifest_path} missing required key: {e}") from e

    root = manifest_path.parent
    samples: Dataset = []
    seen: set[str] = set()
    for entry in entries:
        sid = entry.get("id")
        if not sid:
            raise DataError("manifest entry without an id")
        if sid in seen:
            raise DataError(f"duplicate sample id {sid!r} in manifest")
        seen.add(sid)
        try:
            source = read_array(root / entry["source_path"], IMAGE_DTYPE, (h, w))
            mask = read_array(root / entry["mask_path"], MASK_DTYPE, (h, w))
            target = None
            if load_targets and entry.get("target_path"):
                target = read_array(root / entry["target_path"], IMAGE_DTYPE, (h, w))
        except DataError as e:
            raise DataError(f"sample {sid!r}: {e}") from e
        spacing = tuple(float(v) for v in entry.get("spacing", (1.0, 1.0)))
        sample = Sample(id=sid, source=source, mask=mask, target=target, spacing=spacing)
        sample.validate()
        samples.append(sample)
    return samples


def save_dataset(samples: Dataset, out_dir: Path | str) -> Path:
    """Write a dataset directory (manifest + raw arrays); returns manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if samples:
        h, w = samples[0].source.shape
    else:
        h, w = 0, 0
    entries = []
    for s in samples:
        s.validate()
        if s.source.shape != (h, w):
            raise DataError(f"sample {s.id!r}: shape {s.source.shape} != dataset shape {(h, w)}")
        source_rel = f"arrays/{s.id}.source.f32"
        mask_rel = f"arrays/{s.id}.mask.u8"
        write_array(out_dir / source_rel, s.source)
        write_array(out_dir / mask_rel, s.mask)
        target_rel = None
        if s.target is not None:
            target_rel = f"arrays/{s.id}.target.f32"
            write_array(out_dir / target_rel, s.target)
        entries.append(
            {
                "id": s.id,
                "source_path": source_rel,
                "target_path": target_rel,
                "mask_path": mask_rel,
                "spacing": list(s.spacing),
            }
        )
    manifest = {"version": MANIFEST_VERSION, "image_size": [h, w], "samples": entries}
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", "utf-8")
    return path


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def normalize_slice(image: np.ndarray, lo_pct: float = 1.0, hi_pct: float = 99.0) -> np.ndarray:
    """Percentile-clip a slice and map the clip bounds to [-1, 1].

    Constant images (or degenerate percentile windows) map to all zeros.
    """
    if not (0.0 <= lo_pct < hi_pct <= 100.0):
        raise ValueError("need 0 <= lo_pct < hi_pct <= 100")
    image = np.asarray(image, dtype=np.float64)
    if image.size == 0:
        raise DataError("cannot normalize an empty image")
    lo, hi = np.percentile(image, [lo_pct, hi_pct])
    if hi <= lo:
        return np.zeros_like(image, dtype=np.float32)
    clipped = np.clip(image, lo, hi)
    return (2.0 * (clipped - lo) / (hi - lo) - 1.0).astype(np.float32)


def center_crop(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Centered crop; an odd margin drops the extra row/column on the high-index side."""
    h, w = size
    if h > image.shape[0] or w > image.shape[1]:
        raise ValueError(f"crop size {size} exceeds image shape {image.shape}")
    r0 = (image.shape[0] - h) // 2
    c0 = (image.shape[1] - w) // 2
    return image[r0 : r0 + h, c0 : c0 + w]


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

def split_train(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Partition a training set into (translator split, predictor split).

    Samples sharing a patient key (id prefix before the first '_') always land
    in the same subset. Deterministic for a given seed.
    """
    if not dataset:
        raise DataError("cannot split an empty dataset")
    groups: dict[str, list[Sample]] = {}
    for s in dataset:
        groups.setdefault(s.patient_key, []).append(s)
    keys = sorted(groups)
    rng = np.random.default_rng(spec.seed)
    rng.shuffle(keys)
    target_n = round(len(dataset) * spec.fraction_translator)
    translator_split: Dataset = []
    predictor_split: Dataset = []
    for key in keys:
        if len(translator_split) < target_n:
            translator_split.extend(groups[key])
        else:
            predictor_split.extend(groups[key])
    # restore manifest order within each subset
    order = {s.id: i for i, s in enumerate(dataset)}
    translator_split.sort(key=lambda s: order[s.id])
    predictor_split.sort(key=lambda s: order[s.id])
    return translator_split, predictor_split


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

def _smooth_texture(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    """Zero-mean smooth background made of a handful of broad Gaussian bumps."""
    h, w = shape
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    tex = np.zeros(shape, dtype=np.float64)
    n_bumps = int(rng.integers(4, 8))
    for _ in range(n_bumps):
        cy = rng.uniform(0, h)
        cx = rng.uniform(0, w)
        sigma = rng.uniform(0.10, 0.25) * min(h, w)
        amp = rng.uniform(-0.22, 0.22)
        tex += amp * np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2 * sigma**2))
    return tex - tex.mean()


def _random_lesion_mask(rng: np.random.Generator, spec: SyntheticSpec) -> np.ndarray:
    h, w = spec.image_size
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    mask = np.zeros((h, w), dtype=bool)
    n = int(rng.integers(spec.lesion_count_range[0], spec.lesion_count_range[1] + 1))
    r_lo, r_hi = spec.lesion_radius_range
    for _ in range(n):
        ra = rng.uniform(r_lo, r_hi)
        rb = rng.uniform(r_lo, r_hi)
        margin = math.ceil(max(ra, rb)) + 1
        cy = rng.uniform(margin, h - margin)
        cx = rng.uniform(margin, w - margin)
        angle = rng.uniform(0, np.pi)
        ca, sa = np.cos(angle), np.sin(angle)
        u = (rows - cy) * ca + (cols - cx) * sa
        v = -(rows - cy) * sa + (cols - cx) * ca
        mask |= (u / ra) ** 2 + (v / rb) ** 2 <= 1.0
    return mask


# Baseline intensity of each modality's background; the target sits lower and
# carries a compressed copy of the source texture so translation is learnable.
_SOURCE_BASE = -0.30
_TARGET_BASE = -0.45
_TARGET_TEXTURE_GAIN = 0.5


def generate_synthetic_dataset(spec: SyntheticSpec) -> Dataset:
    """Generate a paired-modality synthetic lesion dataset.

    Lesion placement is independent of the background texture, so with
    ``source_lesion_contrast=0`` the source image carries no information about
    lesion location.
    """
    rng = np.random.default_rng(spec.seed)
    samples: Dataset = []
    for k in range(spec.n_samples):
        tex = _smooth_texture(rng, spec.image_size)
        lesions = _random_lesion_mask(rng, spec)
        noise_s = rng.standard_normal(spec.image_size)
        noise_t = rng.standard_normal(spec.image_size)
        source = _SOURCE_BASE + tex + spec.source_lesion_contrast * lesions
        target = _TARGET_BASE + _TARGET_TEXTURE_GAIN * tex + spec.target_lesion_contrast * lesions
        source = np.clip(source + spec.noise_sigma * noise_s, -1.0, 1.0)
        target = np.clip(target + spec.noise_sigma * noise_t, -1.0, 1.0)
        sample = Sample(
            id=f"case{k:04d}_s0",
            source=source.astype(np.float32),
            target=target.astype(np.float32),
            mask=lesions.astype(np.uint8),
            spacing=(1.0, 1.0),
        )
        sample.validate()
        samples.append(sample)
    return samples
