"""Synthetic head phantoms with exact shift ground truth.

Each case is a stack of schematic axial slices: an elliptical head with a
bright rim, a bright midline curve, two dark paraventricular blobs, and
smooth random texture. Positive cases are produced by warping the normal
slice with a known lateral field ``u(row, col) = (0, -sign * m_s * g(row))``
whose column displacement depends only on the row (a shear). Such fields
satisfy ``u(p - u(p)) = u(p)``, so warping the shifted slice by ``-u``
recovers the normal slice up to interpolation error, and the Jacobian
determinant is exactly 1 everywhere (no folding at any magnitude). The peak
magnitude, its slice, and its landmark are recorded exactly.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .arrays import read_array, write_array
from .data import ImageSlice, LandmarkAnnotation, Volume, save_dataset
from .deformation import warp


@dataclass
class PhantomSpec:
    image_size: int = 256
    slices_per_case: int = 17
    labeled_slices_per_case: int = 4
    positive_fraction: float = 0.75
    shift_range_px: tuple[float, float] = (2.0, 20.0)
    sigma_range_px: tuple[float, float] = (10.0, 30.0)
    profile_sigma_slices: tuple[float, float] = (1.5, 3.0)
    texture_amplitude: float = 0.08
    pixel_size_mm: float = 0.86

    def validate(self) -> None:
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")
        if not 0 < self.labeled_slices_per_case <= self.slices_per_case:
            raise ValueError("labeled_slices_per_case must be in [1, slices_per_case]")
        if not 0 <= self.positive_fraction <= 1:
            raise ValueError("positive_fraction must be in [0, 1]")
        lo, hi = self.shift_range_px
        if not 0 < lo <= hi:
            raise ValueError(f"bad shift_range_px {self.shift_range_px}")
        # beyond this the head cannot keep a lateral margin wide enough for the
        # shear to stay clear of the frame border (see _case_anatomy)
        usable = self.image_size / 2.0 - 3.0 * max(1.7, self.image_size * 0.007)
        if hi > min(self.image_size / 4.0, usable - 0.126 * self.image_size):
            raise ValueError("maximum shift too large for the image size")
        slo, shi = self.sigma_range_px
        if not 0 < slo <= shi:
            raise ValueError(f"bad sigma_range_px {self.sigma_range_px}")


@dataclass
class PhantomCase:
    """A generated case plus the internal ground truth the tests consume."""

    volume: Volume
    fields: list[np.ndarray]
    normal_slices: list[np.ndarray]
    shift_px: list[float]
    landmark_row: float
    shift_sign: int
    sigma_px: float


def _smoothstep(x: np.ndarray) -> np.ndarray:
    t = np.clip(x, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _normal_slice(
    n: int, rng_texture: np.random.Generator, anatomy: dict, z_weight: float
) -> np.ndarray:
    """Render one undeformed slice in [-1, 1]. ``z_weight`` in (0, 1] scales anatomy."""
    center = (n - 1) / 2.0
    rows = np.arange(n, dtype=np.float64)[:, None] - center
    cols = np.arange(n, dtype=np.float64)[None, :] - center

    head_scale = math.sqrt(max(0.35, z_weight))
    a_r = anatomy["head_r"] * head_scale
    a_c = anatomy["head_c"] * head_scale
    rho = np.sqrt((rows / a_r) ** 2 + (cols / a_c) ** 2)

    img = np.full((n, n), -1.0)
    brain = rho < 0.92
    rim = (rho >= 0.92) & (rho <= 1.05)
    img[brain] = 0.0
    # soften the interior boundary a touch
    img += 0.15 * _smoothstep((0.92 - rho) / 0.08) - 0.15 * brain
    img[rim] = 0.95

    texture = ndimage.gaussian_filter(
        rng_texture.standard_normal((n, n)), sigma=max(1.5, n * 0.012)
    )
    texture *= anatomy["texture_amp"] / max(texture.std(), 1e-9)
    img[brain] += texture[brain]

    # midline: bright curve through the brain along rows
    mid_col = center + anatomy["mid_offset"] + anatomy["mid_bow"] * np.sin(
        math.pi * (rows[:, 0] + center) / (n - 1)
    )
    dist = np.abs(cols + center - mid_col[:, None])
    line = np.exp(-(dist**2) / (2.0 * anatomy["mid_width"] ** 2))
    img += 0.7 * line * _smoothstep((0.88 - rho) / 0.05)

    # paired dark ventricle blobs beside the midline
    vr = anatomy["vent_row"]
    vd = anatomy["vent_sep"]
    var = anatomy["vent_r"] * max(0.4, z_weight)
    vac = anatomy["vent_c"] * max(0.4, z_weight)
    for side in (-1.0, 1.0):
        vc = center + anatomy["mid_offset"] + side * vd
        vrho = np.sqrt(((rows - (vr - center)) / var) ** 2 + ((cols - (vc - center)) / vac) ** 2)
        img -= 0.6 * _smoothstep((1.0 - vrho) / 0.35)

    img = np.clip(img, -1.0, 1.0)
    # Band-limit so bilinear warp round-trips stay cheap: resampling twice
    # smears each pixel by at most a [a, 1-2a, a] kernel, so the residual is
    # bounded by the image's second differences. Smoothing here keeps those
    # small; values stay in [-1, 1] because the kernel is convex.
    return ndimage.gaussian_filter(img, sigma=max(1.7, n * 0.007))


def _case_anatomy(
    n: int, rng: np.random.Generator, texture_amplitude: float, max_shift_px: float
) -> dict:
    # The lateral shear pushes content sideways by up to max_shift_px. Keep the
    # head (rim at 1.05x the semi-axis, plus the band-limit tail) that far from
    # the left/right frame edges, otherwise the border clamp of the warp makes
    # the negated field an inexact inverse near the edges.
    margin = max_shift_px + 3.0 * max(1.7, n * 0.007)
    cap = (n / 2.0 - margin) / (1.05 * n)
    hi_c = min(0.38, cap)
    lo_c = min(0.32, 0.85 * hi_c)
    head_c = n * rng.uniform(lo_c, hi_c)
    return {
        "head_r": n * rng.uniform(0.40, 0.46),
        "head_c": head_c,
        "mid_offset": n * rng.uniform(-0.015, 0.015),
        "mid_bow": n * rng.uniform(-0.012, 0.012),
        "mid_width": max(0.9, n * 0.006),
        "vent_row": (n - 1) / 2.0 + n * rng.uniform(-0.04, 0.04),
        "vent_sep": head_c * rng.uniform(0.16, 0.24),
        "vent_r": n * rng.uniform(0.085, 0.115),
        "vent_c": head_c * rng.uniform(0.09, 0.13),
        "texture_amp": texture_amplitude * rng.uniform(0.7, 1.3),
    }


def _shear_field(n: int, magnitude: float, sign: int, row0: float, sigma: float) -> np.ndarray:
    rows = np.arange(n, dtype=np.float64)
    g = np.exp(-((rows - row0) ** 2) / (2.0 * sigma**2))
    out = np.zeros((2, n, n), dtype=np.float64)
    out[1] = np.repeat((-sign * magnitude * g)[:, None], n, axis=1)
    return out


def _warp_numpy(image: np.ndarray, disp: np.ndarray) -> np.ndarray:
    img = torch.from_numpy(np.ascontiguousarray(image))[None, None]
    d = torch.from_numpy(np.ascontiguousarray(disp))[None]
    return warp(img, d)[0, 0].numpy()


def generate_case(spec: PhantomSpec, case_index: int, seed: int, is_positive: bool) -> PhantomCase:
    """Build one deterministic case; the same (spec, index, seed) reproduces it exactly."""
    spec.validate()
    n = spec.image_size
    rng = np.random.default_rng([seed, case_index, 0x9E3779B9])
    anatomy = _case_anatomy(n, rng, spec.texture_amplitude, spec.shift_range_px[1])
    center = (n - 1) / 2.0

    n_slices = spec.slices_per_case
    if is_positive:
        # magnitudes are rounded to float32 at the draw so the fields stored as
        # float32 carry them without loss and case_mls_mm stays bit-exact
        magnitude = float(np.float32(rng.uniform(*spec.shift_range_px)))
        sigma = rng.uniform(*spec.sigma_range_px)
        sign = -1 if rng.uniform() < 0.5 else 1
        # integer row so the shear profile hits exactly 1.0 on the pixel grid:
        # the stored field then attains ||u|| == magnitude at the landmark and
        # case_mls_mm is exact, not off by a sub-pixel profile sample
        landmark_row = float(round(center + n * rng.uniform(-0.05, 0.05)))
        peak_slice = int(rng.integers(n_slices // 3, n_slices - n_slices // 3))
        profile_sigma = rng.uniform(*spec.profile_sigma_slices)
        shift_px = [
            float(np.float32(magnitude * math.exp(-((s - peak_slice) ** 2) / (2.0 * profile_sigma**2))))
            for s in range(n_slices)
        ]
        shift_px[peak_slice] = magnitude  # exact at the peak
    else:
        magnitude = 0.0
        sigma = float(np.mean(spec.sigma_range_px))
        sign = 1
        landmark_row = center
        shift_px = [0.0] * n_slices

    slices, fields, normals = [], [], []
    half = (n_slices - 1) / 2.0
    for s in range(n_slices):
        z_weight = 1.0 - 0.5 * ((s - half) / max(half, 1.0)) ** 2
        tex_rng = np.random.default_rng([seed, case_index, s, 0x51ED2701])
        normal = _normal_slice(n, tex_rng, anatomy, z_weight)
        disp = _shear_field(n, shift_px[s], sign, landmark_row, sigma)
        observed = _warp_numpy(normal, disp) if shift_px[s] > 0 else normal.copy()
        slices.append(
            ImageSlice(
                pixels=np.clip(observed, -1.0, 1.0).astype(np.float32),
                pixel_size_mm=spec.pixel_size_mm,
                slice_index=s,
            )
        )
        fields.append(disp.astype(np.float32))
        normals.append(normal)

    annotations = []
    if is_positive:
        ranked = sorted(range(n_slices), key=lambda s: (-shift_px[s], s))
        mid_col = anatomy["mid_offset"] + center
        for s in sorted(ranked[: spec.labeled_slices_per_case]):
            # observed midline position at the landmark row for this slice
            bow = anatomy["mid_bow"] * math.sin(math.pi * landmark_row / (n - 1))
            annotations.append(
                LandmarkAnnotation(
                    slice_index=s,
                    landmark=(landmark_row, mid_col + bow + sign * shift_px[s]),
                    displacement=(0.0, -sign * shift_px[s]),
                )
            )

    volume = Volume(
        case_id=f"case_{case_index:04d}",
        slices=slices,
        annotations=annotations,
        is_mls=is_positive,
        case_mls_mm=magnitude * spec.pixel_size_mm,
    )
    volume.validate()
    return PhantomCase(
        volume=volume,
        fields=fields,
        normal_slices=normals,
        shift_px=shift_px,
        landmark_row=landmark_row,
        shift_sign=sign,
        sigma_px=sigma,
    )


def generate_dataset(spec: PhantomSpec, n_cases: int, seed: int) -> list[PhantomCase]:
    """Generate ``n_cases`` cases with positives spread evenly through the index range."""
    if n_cases < 1:
        raise ValueError("n_cases must be positive")
    f = spec.positive_fraction
    cases = []
    for i in range(n_cases):
        is_positive = math.floor((i + 1) * f) - math.floor(i * f) == 1
        cases.append(generate_case(spec, i, seed, is_positive))
    return cases


def truth_field_path(root: str | os.PathLike, case_id: str, slice_index: int) -> Path:
    return Path(root) / "truth" / f"field_{case_id}_{slice_index}.arr"


def export_dataset(cases: list[PhantomCase], root: str | os.PathLike) -> None:
    """Write the standard dataset layout plus ground-truth fields under ``truth/``."""
    root = Path(root)
    save_dataset([c.volume for c in cases], root)
    (root / "truth").mkdir(parents=True, exist_ok=True)
    for case in cases:
        ps = case.volume.slices[0].pixel_size_mm
        for s, disp in zip(case.volume.slices, case.fields):
            write_array(truth_field_path(root, case.volume.case_id, s.slice_index), disp, ps)


def load_truth_field(root: str | os.PathLike, case_id: str, slice_index: int) -> np.ndarray:
    arr, _ = read_array(truth_field_path(root, case_id, slice_index))
    return arr
