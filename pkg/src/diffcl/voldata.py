"""Synthetic and on-disk volumes, splits, patch cropping and augmentation."""
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import ConfigError, VolumeFormatError, VolumeIOError

CT_WINDOW = (-120.0, 240.0)


@dataclass
class VolumeSample:
    image: np.ndarray
    label: Optional[np.ndarray] = None
    id: str = ""
    spacing: tuple = (1.0, 1.0, 1.0)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.ndim != 3:
            raise VolumeFormatError(self.id or "<memory>", f"image must be 3-D, got {self.image.shape}")
        if self.label is not None and self.label.shape != self.image.shape:
            raise ValueError(f"label shape {self.label.shape} != image shape {self.image.shape}")

    @property
    def shape(self):
        return self.image.shape


@dataclass
class DatasetSplit:
    labeled: list
    unlabeled: list
    seed: int
    # ground truth of the unlabeled pool, kept for evaluation only
    heldout_labels: dict = field(default_factory=dict)


@dataclass
class SyntheticSpec:
    grid: tuple = (16, 16, 16)
    count: int = 40
    num_classes: int = 2
    noise: float = 0.35
    blur_sigma: float = 1.0
    radius_range: tuple = (3.0, 5.0)
    anisotropy: float = 0.3
    contrast_range: tuple = (0.6, 1.4)
    bias_amplitude: float = 0.3
    seed: int = 0
    prefix: str = "syn"

    def validate(self):
        g = tuple(int(v) for v in self.grid)
        if len(g) != 3 or min(g) < 8:
            raise ConfigError("grid", f"need three axes of at least 8 voxels, got {self.grid}")
        if self.num_classes < 2:
            raise ConfigError("num_classes", f"need at least 2 classes, got {self.num_classes}")
        if self.count < 1:
            raise ConfigError("count", f"need at least one sample, got {self.count}")
        lo, hi = self.radius_range
        if lo < 0 or hi < lo:
            raise ConfigError("radius_range", f"invalid range {self.radius_range}")
        reach = hi * (1.0 + self.anisotropy)
        if 2 * reach + 2 > min(g):
            raise ConfigError(
                "radius_range",
                f"max radius {hi} (x{1 + self.anisotropy:g} anisotropy) does not fit in grid {g}",
            )
        if self.noise < 0 or self.blur_sigma < 0:
            raise ConfigError("noise", "noise and blur_sigma must be nonnegative")


def normalize(image):
    image = image.astype(np.float64)
    std = image.std()
    out = image - image.mean()
    if std > 0:
        out = out / std
    return out.astype(np.float32)


def apply_ct_window(image, window=CT_WINDOW):
    """Clip CT intensities to a HU window. Only used for real CT input."""
    return np.clip(image, window[0], window[1])


def _ellipsoid_mask(shape, center, semi_axes):
    if min(semi_axes) <= 0:
        return np.zeros(shape, dtype=bool)
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    r = sum(((g - c) / s) ** 2 for g, c, s in zip(grids, center, semi_axes))
    return r <= 1.0


def gen_synthetic_dataset(spec: SyntheticSpec):
    """Volumes with 1..C-1 blurred ellipsoids each; labels are the sharp masks.

    Pure function of ``spec`` (the seed lives in it).
    """
    spec.validate()
    shape = tuple(int(v) for v in spec.grid)
    C = spec.num_classes
    out = []
    for i in range(spec.count):
        rng = np.random.default_rng([spec.seed, i])
        n_struct = int(rng.integers(1, C))
        label = np.zeros(shape, dtype=np.int64)
        intensity = np.zeros(shape, dtype=np.float64)
        placed = []
        for s in range(n_struct):
            cls = s + 1
            radius = rng.uniform(*spec.radius_range)
            axes = radius * (1.0 + rng.uniform(-spec.anisotropy, spec.anisotropy, size=3))
            margin = np.minimum(np.ceil(axes) + 1, (np.array(shape) - 1) / 2.0)
            center = [rng.uniform(m, n - 1 - m) for m, n in zip(margin, shape)]
            mask = _ellipsoid_mask(shape, center, axes)
            label[mask] = cls
            placed.append({"cls": cls, "center": [float(v) for v in center],
                           "semi_axes": [float(v) for v in axes]})
            level = cls * rng.uniform(*spec.contrast_range)
            intensity[mask] = level
        if spec.blur_sigma > 0:
            intensity = ndimage.gaussian_filter(intensity, spec.blur_sigma, mode="nearest")
        if spec.bias_amplitude > 0:
            grids = np.meshgrid(*[np.linspace(-1, 1, n) for n in shape], indexing="ij")
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            intensity = intensity + spec.bias_amplitude * sum(d * g for d, g in zip(direction, grids))
        intensity = intensity + spec.noise * rng.normal(size=shape)
        out.append(
            VolumeSample(
                image=normalize(intensity),
                label=label,
                id=f"{spec.prefix}{i:04d}",
                spacing=(1.0, 1.0, 1.0),
                meta={"source": "synthetic", "structures": placed},
            )
        )
    return out


def split_dataset(samples, labeled_count, seed):
    n = len(samples)
    if not 1 <= labeled_count < n:
        raise ConfigError("labeled_count", f"must be in [1, {n - 1}], got {labeled_count}")
    order = np.random.default_rng(seed).permutation(n)
    labeled = [samples[i] for i in order[:labeled_count]]
    unlabeled, held = [], {}
    for i in order[labeled_count:]:
        s = samples[i]
        held[s.id] = s.label
        unlabeled.append(replace(s, label=None))
    return DatasetSplit(labeled=labeled, unlabeled=unlabeled, seed=seed, heldout_labels=held)


def crop_patch(sample, patch_size, mode="random", seed=0):
    shape = sample.image.shape
    patch_size = tuple(int(p) for p in patch_size)
    if any(p > n for p, n in zip(patch_size, shape)):
        raise ValueError(f"patch {patch_size} larger than volume {shape}")
    if mode == "center":
        offset = tuple((n - p) // 2 for n, p in zip(shape, patch_size))
    elif mode == "random":
        rng = np.random.default_rng(seed)
        offset = tuple(int(rng.integers(0, n - p + 1)) for n, p in zip(shape, patch_size))
    else:
        raise ValueError(f"unknown crop mode {mode!r}")
    sl = tuple(slice(o, o + p) for o, p in zip(offset, patch_size))
    label = None if sample.label is None else sample.label[sl].copy()
    return replace(sample, image=sample.image[sl].copy(), label=label,
                   meta={**sample.meta, "crop_offset": offset})


def random_transform(shape, rng):
    """Draw (flip_axes, rot_k, rot_plane). Rotations only in planes with equal sides."""
    flips = tuple(ax for ax in range(3) if rng.random() < 0.5)
    planes = [(a, b) for a, b in ((0, 1), (0, 2), (1, 2)) if shape[a] == shape[b]]
    if planes:
        plane = planes[int(rng.integers(len(planes)))]
        k = int(rng.integers(4))
    else:
        plane, k = (0, 1), 0
    return flips, k, plane


def apply_transform(arr, flips, k, plane):
    out = arr
    for ax in flips:
        out = np.flip(out, axis=ax)
    if k:
        out = np.rot90(out, k=k, axes=plane)
    return np.ascontiguousarray(out)


def augment(sample, seed):
    """Random axis flips plus a 90-degree rotation, applied to image and label alike."""
    rng = np.random.default_rng(seed)
    flips, k, plane = random_transform(sample.image.shape, rng)
    image = apply_transform(sample.image, flips, k, plane)
    label = None if sample.label is None else apply_transform(sample.label, flips, k, plane)
    return replace(sample, image=image, label=label)


def _nifti_path(path):
    name = str(path)
    if not (name.endswith(".nii") or name.endswith(".nii.gz")):
        raise VolumeFormatError(path, "expected a .nii or .nii.gz file")
    return Path(path)


def save_volume(sample, path, label_path=None):
    import nibabel as nib

    path = _nifti_path(path)
    affine = np.diag(list(sample.spacing) + [1.0])
    img = nib.Nifti1Image(np.asarray(sample.image), affine)
    img.header.set_zooms(tuple(float(s) for s in sample.spacing))
    nib.save(img, str(path))
    if label_path is not None and sample.label is not None:
        lab = nib.Nifti1Image(np.asarray(sample.label, dtype=np.int16), affine)
        lab.header.set_zooms(tuple(float(s) for s in sample.spacing))
        nib.save(lab, str(_nifti_path(label_path)))


def _read(path):
    import nibabel as nib

    path = _nifti_path(path)
    try:
        img = nib.load(str(path))
        data = np.asarray(img.dataobj)
    except FileNotFoundError:
        raise VolumeIOError(path, "no such file")
    except Exception as exc:
        raise VolumeIOError(path, f"cannot read NIfTI ({exc})")
    if data.ndim != 3:
        raise VolumeFormatError(path, f"expected a 3-D payload, got {data.ndim}-D shape {data.shape}")
    return data, tuple(float(z) for z in img.header.get_zooms()[:3])


def load_volume(path, label_path=None, sample_id=None, normalize_image=False):
    data, spacing = _read(path)
    label = None
    if label_path is not None:
        lab, _ = _read(label_path)
        label = np.asarray(lab).astype(np.int64)
    image = np.asarray(data)
    if normalize_image:
        image = normalize(image)
    name = sample_id or Path(path).name.split(".nii")[0]
    return VolumeSample(image=image, label=label, id=name, spacing=spacing,
                        meta={"source": str(path)})


def write_manifest(path, entries, extra=None):
    """entries: list of dicts with id, image, label (optional), split."""
    doc = {"format": "diffcl-dataset", "version": 1, "volumes": entries}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def read_manifest(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise VolumeIOError(path, "dataset manifest not found")
    except json.JSONDecodeError as exc:
        raise VolumeIOError(path, f"malformed manifest ({exc})")
    if doc.get("format") != "diffcl-dataset":
        raise VolumeIOError(path, "not a diffcl dataset manifest")
    return doc


def load_split_from_manifest(path, split_name):
    doc = read_manifest(path)
    root = Path(path).parent
    out = []
    for e in doc["volumes"]:
        if e["split"] != split_name:
            continue
        label = root / e["label"] if e.get("label") else None
        out.append(load_volume(root / e["image"], label, sample_id=e["id"],
                               normalize_image=doc.get("normalize_on_load", False)))
    return out

