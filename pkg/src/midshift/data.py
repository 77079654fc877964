"""Core data types, CT slice preprocessing, and dataset serialization.

Coordinate convention used throughout the package: pixel positions are
``(row, col)`` with row increasing downward; displacement vectors follow the
same ordering and are measured in pixels.
"""
from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .arrays import read_array, write_array

_RANGE_TOL = 1e-5
_MANIFEST_NAME = "manifest.json"


@dataclass
class LandmarkAnnotation:
    """A single annotated landmark with its displacement toward the normal position."""

    slice_index: int
    landmark: tuple[float, float]
    displacement: tuple[float, float]

    def displacement_norm(self) -> float:
        return math.hypot(self.displacement[0], self.displacement[1])


@dataclass
class ImageSlice:
    pixels: np.ndarray
    pixel_size_mm: float
    slice_index: int

    def validate(self) -> None:
        if not isinstance(self.pixels, np.ndarray) or self.pixels.ndim != 2:
            raise ValueError("slice pixels must be a 2-d array")
        if self.pixels.size == 0:
            raise ValueError("slice pixels must be non-empty")
        if not np.issubdtype(self.pixels.dtype, np.floating):
            raise ValueError(f"slice pixels must be floating point, got {self.pixels.dtype}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError(f"slice {self.slice_index}: non-finite pixel values")
        lo, hi = float(self.pixels.min()), float(self.pixels.max())
        if lo < -1.0 - _RANGE_TOL or hi > 1.0 + _RANGE_TOL:
            raise ValueError(
                f"slice {self.slice_index}: values [{lo:.4g}, {hi:.4g}] outside [-1, 1]"
            )
        if not self.pixel_size_mm > 0:
            raise ValueError(f"pixel_size_mm must be positive, got {self.pixel_size_mm}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape  # type: ignore[return-value]


@dataclass
class Volume:
    """One case: ordered axial slices plus case-level shift ground truth."""

    case_id: str
    slices: list[ImageSlice]
    annotations: list[LandmarkAnnotation]
    is_mls: bool
    case_mls_mm: float

    def validate(self) -> None:
        if not self.case_id:
            raise ValueError("case_id must be non-empty")
        if not self.slices:
            raise ValueError(f"{self.case_id}: volume has no slices")
        indices = [s.slice_index for s in self.slices]
        if sorted(set(indices)) != indices:
            raise ValueError(f"{self.case_id}: slice indices not strictly increasing")
        shapes = {s.pixels.shape for s in self.slices}
        if len(shapes) != 1:
            raise ValueError(f"{self.case_id}: inconsistent slice shapes {shapes}")
        sizes = {round(s.pixel_size_mm, 9) for s in self.slices}
        if len(sizes) != 1:
            raise ValueError(f"{self.case_id}: inconsistent pixel sizes {sizes}")
        for s in self.slices:
            s.validate()
        if not (math.isfinite(self.case_mls_mm) and self.case_mls_mm >= 0):
            raise ValueError(f"{self.case_id}: bad case_mls_mm {self.case_mls_mm}")
        if not self.is_mls:
            if self.annotations:
                raise ValueError(f"{self.case_id}: negative case carries annotations")
            if self.case_mls_mm != 0:
                raise ValueError(f"{self.case_id}: negative case with case_mls_mm != 0")
        index_set = set(indices)
        h, w = self.slices[0].pixels.shape
        ps = self.slices[0].pixel_size_mm
        for a in self.annotations:
            if a.slice_index not in index_set:
                raise ValueError(
                    f"{self.case_id}: annotation references missing slice {a.slice_index}"
                )
            r, c = a.landmark
            if not (0 <= r <= h - 1 and 0 <= c <= w - 1):
                raise ValueError(f"{self.case_id}: landmark {a.landmark} outside grid")
            if a.displacement_norm() * ps > self.case_mls_mm + 1e-6:
                raise ValueError(
                    f"{self.case_id}: annotation shift "
                    f"{a.displacement_norm() * ps:.4f} mm exceeds case_mls_mm"
                )

    def slice_by_index(self, slice_index: int) -> ImageSlice:
        for s in self.slices:
            if s.slice_index == slice_index:
                return s
        raise KeyError(f"{self.case_id}: no slice with index {slice_index}")

    def annotated_indices(self) -> list[int]:
        return sorted({a.slice_index for a in self.annotations})


@dataclass
class PreprocessConfig:
    window: tuple[float, float] = (0.0, 80.0)
    target_pixel_size_mm: float = 0.86
    target_size: int = 256
    clip_percentiles: tuple[float, float] = (0.5, 99.5)
    discard_head: int = 8
    discard_tail: int = 5


def _resample_bilinear(image: np.ndarray, scale: float) -> np.ndarray:
    """Centre-aligned bilinear resample by a uniform scale factor."""
    if scale == 1.0:
        return image
    in_h, in_w = image.shape
    out_h = max(1, int(round(in_h * scale)))
    out_w = max(1, int(round(in_w * scale)))
    rows = (np.arange(out_h) - (out_h - 1) / 2.0) / scale + (in_h - 1) / 2.0
    cols = (np.arange(out_w) - (out_w - 1) / 2.0) / scale + (in_w - 1) / 2.0
    grid = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(image, grid, order=1, mode="nearest")


def _center_crop_pad(image: np.ndarray, size: int, fill: float) -> np.ndarray:
    out = np.full((size, size), fill, dtype=image.dtype)
    in_h, in_w = image.shape
    # source window
    r0 = max(0, (in_h - size) // 2)
    c0 = max(0, (in_w - size) // 2)
    rr = min(size, in_h)
    cc = min(size, in_w)
    # destination offset
    dr = max(0, (size - in_h) // 2)
    dc = max(0, (size - in_w) // 2)
    out[dr : dr + rr, dc : dc + cc] = image[r0 : r0 + rr, c0 : c0 + cc]
    return out


def preprocess_slice(
    raw: np.ndarray,
    raw_pixel_size_mm: float,
    cfg: PreprocessConfig | None = None,
    *,
    slice_index: int = 0,
) -> ImageSlice:
    """Run the slice pipeline: window, resample, crop/pad, clip, normalize.

    ``raw`` holds Hounsfield-like intensities at ``raw_pixel_size_mm`` spacing;
    the output is a ``cfg.target_size`` square at ``cfg.target_pixel_size_mm``
    with values normalized to [-1, 1].
    """
    cfg = cfg or PreprocessConfig()
    img = np.asarray(raw, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"raw slice must be a non-empty 2-d array, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("raw slice contains non-finite values")
    if not raw_pixel_size_mm > 0:
        raise ValueError(f"raw_pixel_size_mm must be positive, got {raw_pixel_size_mm}")
    lo, hi = cfg.window
    if not hi > lo:
        raise ValueError(f"window must be increasing, got {cfg.window}")

    img = np.clip(img, lo, hi)
    if img.max() == img.min():
        # zero-range content carries no signal; padding follows the convention
        img = np.zeros((cfg.target_size, cfg.target_size), dtype=np.float64)
    else:
        img = _resample_bilinear(img, raw_pixel_size_mm / cfg.target_pixel_size_mm)
        img = _center_crop_pad(img, cfg.target_size, fill=lo)
        p_lo, p_hi = np.percentile(img, cfg.clip_percentiles)
        img = np.clip(img, p_lo, p_hi)
        vmin, vmax = img.min(), img.max()
        if vmax > vmin:
            img = (img - vmin) / (vmax - vmin) * 2.0 - 1.0
        else:
            img = np.zeros_like(img)
    out = ImageSlice(
        pixels=img.astype(np.float32),
        pixel_size_mm=cfg.target_pixel_size_mm,
        slice_index=slice_index,
    )
    out.validate()
    return out


def select_slices(volume: Volume, cfg: PreprocessConfig | None = None) -> Volume:
    """Drop unreliable head/tail slices; annotations on dropped slices are removed."""
    cfg = cfg or PreprocessConfig()
    n = len(volume.slices)
    if n <= cfg.discard_head + cfg.discard_tail:
        raise ValueError(
            f"{volume.case_id}: {n} slices cannot cover discard_head="
            f"{cfg.discard_head} + discard_tail={cfg.discard_tail}"
        )
    kept = volume.slices[cfg.discard_head : n - cfg.discard_tail]
    kept_indices = {s.slice_index for s in kept}
    kept_ann = [a for a in volume.annotations if a.slice_index in kept_indices]
    dropped = [a.slice_index for a in volume.annotations if a.slice_index not in kept_indices]
    if dropped:
        warnings.warn(
            f"{volume.case_id}: dropped annotations on discarded slices {sorted(dropped)}",
            stacklevel=2,
        )
    return replace(volume, slices=list(kept), annotations=kept_ann)


def _rotation_matrix(angle_degrees: float) -> np.ndarray:
    t = math.radians(angle_degrees)
    return np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])


def rotate_image(pixels: np.ndarray, angle_degrees: float, fill: float = -1.0) -> np.ndarray:
    """Rotate about the image centre, bilinear, constant fill outside."""
    rot = _rotation_matrix(angle_degrees)
    center = (np.asarray(pixels.shape, dtype=np.float64) - 1.0) / 2.0
    inv = rot.T  # inverse of an orthonormal rotation
    offset = center - inv @ center
    return ndimage.affine_transform(
        pixels, inv, offset=offset, order=1, mode="constant", cval=fill
    )


def rotate_point(point: tuple[float, float], shape: tuple[int, int], angle_degrees: float) -> tuple[float, float]:
    rot = _rotation_matrix(angle_degrees)
    center = (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0
    out = rot @ (np.asarray(point, dtype=np.float64) - center) + center
    return (float(out[0]), float(out[1]))


def augment_rotation(
    image_slice: ImageSlice,
    annotations: list[LandmarkAnnotation],
    angle_degrees: float,
) -> tuple[ImageSlice, list[LandmarkAnnotation]]:
    """Rotate a slice and its annotations by the same angle.

    Positive angles rotate counterclockwise in (row, col) coordinates (which
    reads as clockwise when row 0 is displayed at the top). Landmarks rotate
    about the image centre; displacement vectors rotate without translation.
    """
    pixels = rotate_image(image_slice.pixels, angle_degrees).astype(image_slice.pixels.dtype)
    rot = _rotation_matrix(angle_degrees)
    out_ann = []
    for a in annotations:
        landmark = rotate_point(a.landmark, image_slice.pixels.shape, angle_degrees)
        disp = rot @ np.asarray(a.displacement, dtype=np.float64)
        out_ann.append(
            LandmarkAnnotation(
                slice_index=a.slice_index,
                landmark=landmark,
                displacement=(float(disp[0]), float(disp[1])),
            )
        )
    return replace(image_slice, pixels=pixels), out_ann


# --- dataset serialization ---------------------------------------------------


def save_volume(volume: Volume, case_dir: str | os.PathLike) -> None:
    volume.validate()
    case_dir = Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "case_id": volume.case_id,
        "is_mls": volume.is_mls,
        "case_mls_mm": volume.case_mls_mm,
        "annotations": [
            {
                "slice": a.slice_index,
                "landmark": [a.landmark[0], a.landmark[1]],
                "displacement": [a.displacement[0], a.displacement[1]],
            }
            for a in volume.annotations
        ],
    }
    with open(case_dir / _MANIFEST_NAME, "w", encoding="ascii") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    for s in volume.slices:
        write_array(case_dir / f"slice_{s.slice_index}.arr", s.pixels, s.pixel_size_mm)


def load_volume(case_dir: str | os.PathLike) -> Volume:
    case_dir = Path(case_dir)
    manifest_path = case_dir / _MANIFEST_NAME
    try:
        with open(manifest_path, encoding="ascii") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise FileNotFoundError(f"no manifest at {manifest_path}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"{manifest_path}: invalid JSON ({exc})") from exc
    for key in ("case_id", "is_mls", "case_mls_mm", "annotations"):
        if key not in manifest:
            raise ValueError(f"{manifest_path}: missing key {key!r}")
    slices = []
    paths = sorted(
        case_dir.glob("slice_*.arr"), key=lambda p: int(p.stem.split("_", 1)[1])
    )
    if not paths:
        raise ValueError(f"{case_dir}: no slice files found")
    for p in paths:
        pixels, pixel_size = read_array(p)
        slices.append(
            ImageSlice(
                pixels=pixels.astype(np.float32, copy=False),
                pixel_size_mm=pixel_size,
                slice_index=int(p.stem.split("_", 1)[1]),
            )
        )
    annotations = [
        LandmarkAnnotation(
            slice_index=int(a["slice"]),
            landmark=(float(a["landmark"][0]), float(a["landmark"][1])),
            displacement=(float(a["displacement"][0]), float(a["displacement"][1])),
        )
        for a in manifest["annotations"]
    ]
    volume = Volume(
        case_id=str(manifest["case_id"]),
        slices=slices,
        annotations=annotations,
        is_mls=bool(manifest["is_mls"]),
        case_mls_mm=float(manifest["case_mls_mm"]),
    )
    volume.validate()
    return volume


def save_dataset(volumes: list[Volume], root: str | os.PathLike) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for v in volumes:
        save_volume(v, root / v.case_id)


def load_dataset(root: str | os.PathLike) -> list[Volume]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    case_dirs = sorted(p for p in root.iterdir() if (p / _MANIFEST_NAME).is_file())
    if not case_dirs:
        raise ValueError(f"no cases found under {root}")
    return [load_volume(p) for p in case_dirs]
