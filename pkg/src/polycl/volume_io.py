"""CT volume loading, window-leveling, middle-slice extraction and phantoms.

Volumes use the ``(H, W, D)`` convention: the slice axis is the third array
axis, exactly as NIfTI files store it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

DEFAULT_CENTER = 40.0
DEFAULT_WIDTH = 400.0
DEFAULT_RESOLUTION = 256


class VolumeNotFoundError(FileNotFoundError):
    pass


class NotA3DVolumeError(ValueError):
    pass


class LabelShapeMismatchError(ValueError):
    pass


class AlreadyNormalizedError(ValueError):
    pass


class PhantomGeometryError(ValueError):
    pass


@dataclass
class Volume:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    label: np.ndarray | None = None
    scan_id: str = "scan"
    normalized: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.voxels.ndim != 3:
            raise NotA3DVolumeError(f"expected a 3D array, got shape {self.voxels.shape}")
        h, w, d = self.voxels.shape
        if h < 8 or w < 8 or d < 1:
            raise NotA3DVolumeError(f"volume shape {self.voxels.shape} too small (need H, W >= 8)")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if self.label is not None:
            if self.label.shape != self.voxels.shape:
                raise LabelShapeMismatchError(
                    f"label shape {self.label.shape} != image shape {self.voxels.shape}"
                )
            self.label = self.label.astype(bool)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)  # type: ignore[return-value]

    @property
    def depth(self) -> int:
        return self.voxels.shape[2]


@dataclass(frozen=True, eq=False)
class SliceRecord:
    """One 2D slice with its provenance.

    ``organ_present`` is ``None`` when the source scan carries no label.
    """

    scan_id: str
    slice_index: int
    pixels: np.ndarray
    organ_present: bool | None = None
    mask: np.ndarray | None = None

    @property
    def record_id(self) -> str:
        return f"{self.scan_id}:{self.slice_index}"


def _strip_nifti_suffix(name: str) -> str:
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return name


def sibling_label_path(path: Path) -> Path | None:
    """Return ``labels/<id>`` next to ``images/<id>`` when it exists."""
    if path.parent.name != "images":
        return None
    candidate = path.parent.parent / "labels" / path.name
    return candidate if candidate.exists() else None


def load_volume(path: str | Path, label_path: str | Path | None = None) -> Volume:
    """Load a NIfTI CT scan (raw HU) and its binary label if one is available.

    Without an explicit ``label_path`` the ``images/<id>.nii.gz`` /
    ``labels/<id>.nii.gz`` layout is probed. Any nonzero label value counts as
    foreground.
    """
    import nibabel as nib

    path = Path(path)
    if not path.exists():
        raise VolumeNotFoundError(f"no such volume: {path}")
    img = nib.load(str(path))
    data = np.asarray(img.dataobj)
    if data.ndim == 4 and data.shape[3] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise NotA3DVolumeError(f"{path} holds a {data.ndim}D image, expected 3D")
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])

    if label_path is None:
        label_path = sibling_label_path(path)
    label = None
    if label_path is not None:
        label_path = Path(label_path)
        if not label_path.exists():
            raise VolumeNotFoundError(f"no such label: {label_path}")
        label = np.asarray(nib.load(str(label_path)).dataobj)
        if label.shape != data.shape:
            raise LabelShapeMismatchError(
                f"label shape {label.shape} != image shape {data.shape} for {path.name}"
            )
        label = label > 0

    return Volume(
        voxels=data.astype(np.float32),
        spacing=spacing,  # type: ignore[arg-type]
        label=label,
        scan_id=_strip_nifti_suffix(path.name),
    )


def save_volume(volume: Volume, root: str | Path) -> Path:
    """Write ``images/<id>.nii.gz`` (and ``labels/<id>.nii.gz``) under ``root``."""
    import nibabel as nib

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    affine = np.diag([*volume.spacing, 1.0])
    out = root / "images" / f"{volume.scan_id}.nii.gz"
    nib.save(nib.Nifti1Image(volume.voxels.astype(np.float32), affine), str(out))
    if volume.label is not None:
        (root / "labels").mkdir(parents=True, exist_ok=True)
        nib.save(
            nib.Nifti1Image(volume.label.astype(np.uint8), affine),
            str(root / "labels" / f"{volume.scan_id}.nii.gz"),
        )
    return out


def save_mask(mask: np.ndarray, path: str | Path, spacing=(1.0, 1.0, 1.0)) -> None:
    import nibabel as nib

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    nib.save(nib.Nifti1Image(mask.astype(np.uint8), np.diag([*spacing, 1.0])), str(path))


def load_mask(path: str | Path) -> np.ndarray:
    import nibabel as nib

    path = Path(path)
    if not path.exists():
        raise VolumeNotFoundError(f"no such mask: {path}")
    return np.asarray(nib.load(str(path)).dataobj) > 0


def list_dataset(root: str | Path) -> list[Path]:
    images = Path(root) / "images"
    if not images.is_dir():
        raise VolumeNotFoundError(f"{root} has no images/ directory")
    return sorted(p for p in images.iterdir() if p.name.endswith((".nii", ".nii.gz")))


def window_level(v: Volume, center: float = DEFAULT_CENTER, width: float = DEFAULT_WIDTH) -> Volume:
    """Clip HU to ``[center - width/2, center + width/2]`` and map onto ``[0, 1]``."""
    if width <= 0:
        raise ValueError(f"window width must be positive, got {width}")
    if v.normalized:
        raise AlreadyNormalizedError(f"volume {v.scan_id} is already window-leveled")
    lo = center - width / 2.0
    hi = center + width / 2.0
    voxels = (np.clip(v.voxels.astype(np.float64), lo, hi) - lo) / (hi - lo)
    return replace(v, voxels=voxels.astype(np.float32), normalized=True, meta=dict(v.meta))


def middle_slice_indices(depth: int, fraction: float) -> list[int]:
    """Contiguous indices of the middle ``fraction`` of ``depth`` slices.

    The block holds ``ceil(fraction * depth)`` slices centered on
    ``depth // 2``; for an even count the extra slice goes on the low side.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    # tolerance absorbs float products such as 0.3 * 10 = 3.0000000000000004
    count = min(depth, max(1, math.ceil(fraction * depth - 1e-9)))
    start = depth // 2 - count // 2
    start = min(max(start, 0), depth - count)
    return list(range(start, start + count))


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    if image.shape == (size, size):
        return image.astype(np.float32, copy=True)
    zoom = (size / image.shape[0], size / image.shape[1])
    out = ndimage.zoom(image.astype(np.float64), zoom, order=1, mode="nearest", grid_mode=True)
    return np.clip(out, image.min(), image.max()).astype(np.float32)


def resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    if mask.shape == (size, size):
        return mask.astype(bool, copy=True)
    zoom = (size / mask.shape[0], size / mask.shape[1])
    return ndimage.zoom(mask.astype(np.uint8), zoom, order=0, mode="nearest", grid_mode=True) > 0


def extract_middle_slices(
    v: Volume, fraction: float = 0.3, resolution: int = DEFAULT_RESOLUTION
) -> list[SliceRecord]:
    if not v.normalized:
        raise ValueError(f"volume {v.scan_id} must be window-leveled before slicing")
    records = []
    for s in middle_slice_indices(v.depth, fraction):
        pixels = resize_image(v.voxels[:, :, s], resolution)
        mask = None
        organ = None
        if v.label is not None:
            mask = resize_mask(v.label[:, :, s], resolution)
            organ = bool(mask.any())
        records.append(SliceRecord(v.scan_id, s, pixels, organ, mask))
    return records


def to_uint8_frame(image: np.ndarray) -> np.ndarray:
    """Per-frame min/max rescale onto the 0..255 integer range."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = float(image.min()), float(image.max())
    if hi <= lo:
        return np.zeros(image.shape, dtype=np.uint8)
    return np.rint((image - lo) / (hi - lo) * 255.0).astype(np.uint8)


def _ellipsoid(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    acc = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return acc <= 1.0


def _phantom_once(seed: int, shape, organ_radius_range, distractor_hu) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    h, w, d = shape
    lo_r, hi_r = organ_radius_range

    # body cross-section: soft tissue inside an elliptical cylinder, air outside
    yy, xx = np.ogrid[:h, :w]
    body2d = ((yy - h / 2) / (0.46 * h)) ** 2 + ((xx - w / 2) / (0.48 * w)) ** 2 <= 1.0
    hu = np.where(body2d[..., None], 20.0, -1000.0) * np.ones((1, 1, d))

    # spine: bright disk near the posterior wall, present on every slice
    spine = ((yy - 0.78 * h) ** 2 + (xx - w / 2) ** 2) <= (0.07 * min(h, w)) ** 2
    hu[spine] = 700.0

    # distractor structure; darker than the target unless ``distractor_hu`` says otherwise
    dr = rng.uniform(lo_r, hi_r, size=3) * 0.6
    dc = [rng.uniform(dr[i] + 1, shape[i] - dr[i] - 1) for i in range(3)]
    distractor = _ellipsoid(shape, dc, dr)
    hu[distractor & body2d[..., None]] = rng.uniform(*distractor_hu)

    radii = rng.uniform(lo_r, hi_r, size=3)
    center = [rng.uniform(radii[i], shape[i] - 1 - radii[i]) for i in range(3)]
    organ = _ellipsoid(shape, center, radii) & body2d[..., None]
    hu[organ] = rng.uniform(110.0, 170.0)

    hu = hu + rng.normal(0.0, 15.0, size=shape)
    return hu.astype(np.float32), organ


def make_phantom(
    seed: int,
    shape: tuple[int, int, int] = (64, 64, 40),
    organ_radius_range: tuple[float, float] = (5.0, 10.0),
    max_retries: int = 100,
    distractor_hu: tuple[float, float] = (-60.0, -20.0),
) -> Volume:
    """Deterministic synthetic abdomen: one ellipsoidal target organ in HU.

    The organ intensity sits inside the default CT window. If the drawn organ
    occupies every slice or none, the next seed is tried and both seeds are
    kept in ``meta``.
    """
    h, w, d = shape
    lo_r, hi_r = organ_radius_range
    if not 0 < lo_r <= hi_r:
        raise PhantomGeometryError(f"invalid radius range {organ_radius_range}")
    if 2 * hi_r + 2 > min(h, w, d):
        raise PhantomGeometryError(f"radius {hi_r} does not fit inside shape {shape}")

    for attempt in range(max_retries):
        used = seed + attempt
        voxels, label = _phantom_once(used, shape, organ_radius_range, distractor_hu)
        present = label.any(axis=(0, 1))
        if present.any() and not present.all():
            return Volume(
                voxels=voxels,
                spacing=(1.0, 1.0, 1.0),
                label=label,
                scan_id=f"phantom_{seed:04d}",
                meta={"seed_requested": seed, "seed_used": used},
            )
    raise PhantomGeometryError(f"no valid phantom within {max_retries} seeds from {seed}")


def preprocess(
    v: Volume,
    fraction: float = 0.3,
    resolution: int = DEFAULT_RESOLUTION,
    center: float = DEFAULT_CENTER,
    width: float = DEFAULT_WIDTH,
) -> list[SliceRecord]:
    """Window-level then extract the middle slices."""
    if not v.normalized:
        v = window_level(v, center, width)
    return extract_middle_slices(v, fraction, resolution)
