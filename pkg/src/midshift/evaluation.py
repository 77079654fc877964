"""Accuracy metrics against ground truth and qualitative overlay rendering."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .data import Volume  # noqa: E402
from .training import VolumePrediction  # noqa: E402


@dataclass
class CaseMetrics:
    case_id: str
    truth_mm: float
    predicted_mm: float

    @property
    def abs_error_mm(self) -> float:
        return abs(self.predicted_mm - self.truth_mm)


@dataclass
class EvalSummary:
    volume_mae_mm: float
    volume_rmse_mm: float
    slice_mae_mm: float | None
    slice_rmse_mm: float | None
    n_cases: int
    n_slices: int
    per_case: list[CaseMetrics]


def _mae_rmse(errors: list[float]) -> tuple[float, float]:
    mae = float(np.mean(np.abs(errors)))
    rmse = float(math.sqrt(np.mean(np.square(errors))))
    return mae, rmse


def evaluate(predictions: list[VolumePrediction], volumes: list[Volume]) -> EvalSummary:
    """Volume-wise metrics over all predicted cases, slice-wise over annotated slices.

    A prediction whose ``case_id`` has no ground-truth volume raises KeyError.
    """
    if not predictions:
        raise ValueError("no predictions to evaluate")
    truth = {v.case_id: v for v in volumes}
    per_case = []
    volume_errors = []
    slice_errors = []
    for pred in predictions:
        if pred.case_id not in truth:
            raise KeyError(f"prediction references unknown case_id {pred.case_id!r}")
        vol = truth[pred.case_id]
        per_case.append(
            CaseMetrics(
                case_id=pred.case_id,
                truth_mm=vol.case_mls_mm,
                predicted_mm=pred.volume_mls_mm,
            )
        )
        volume_errors.append(pred.volume_mls_mm - vol.case_mls_mm)
        ps = vol.slices[0].pixel_size_mm
        for a in vol.annotations:
            if a.slice_index not in pred.slice_mls_mm:
                raise KeyError(
                    f"{pred.case_id}: prediction missing slice {a.slice_index}"
                )
            slice_errors.append(
                pred.slice_mls_mm[a.slice_index] - a.displacement_norm() * ps
            )
    volume_mae, volume_rmse = _mae_rmse(volume_errors)
    slice_mae, slice_rmse = _mae_rmse(slice_errors) if slice_errors else (None, None)
    assert volume_rmse >= volume_mae - 1e-12, "power-mean inequality violated"
    assert slice_rmse is None or slice_rmse >= slice_mae - 1e-12
    return EvalSummary(
        volume_mae_mm=volume_mae,
        volume_rmse_mm=volume_rmse,
        slice_mae_mm=slice_mae,
        slice_rmse_mm=slice_rmse,
        n_cases=len(per_case),
        n_slices=len(slice_errors),
        per_case=per_case,
    )


def write_summary(
    summary: EvalSummary,
    csv_path: str | os.PathLike | None = None,
    json_path: str | os.PathLike | None = None,
) -> None:
    """Write per-case rows as CSV and the aggregate summary as JSON."""
    if csv_path is not None:
        Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["case_id", "predicted_mm", "truth_mm", "abs_error_mm"])
            for c in summary.per_case:
                writer.writerow([c.case_id, f"{c.predicted_mm:.6f}", f"{c.truth_mm:.6f}", f"{c.abs_error_mm:.6f}"])
    if json_path is not None:
        Path(json_path).parent.mkdir(parents=True, exist_ok=True)
        payload = asdict(summary)
        payload["per_case"] = [
            dict(asdict(c), abs_error_mm=c.abs_error_mm) for c in summary.per_case
        ]
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")


def render_overlay(
    pixels: np.ndarray,
    field: np.ndarray,
    predicted_mm: float,
    truth_mm: float | None,
    out_path: str | os.PathLike,
    stride: int = 8,
    min_arrow_px: float = 0.5,
) -> dict:
    """Save a PNG: slice, displacement quiver, and a box at the peak location.

    Returns a dict with the number of arrows drawn and the highlighted
    (row, col) peak so callers can sanity-check the figure contents.
    """
    if field.shape[0] != 2 or field.shape[1:] != pixels.shape:
        raise ValueError(
            f"field {tuple(field.shape)} does not match image {tuple(pixels.shape)}"
        )
    h, w = pixels.shape
    mag = np.hypot(field[0], field[1])
    peak = np.unravel_index(int(mag.argmax()), mag.shape)

    fig, ax = plt.subplots(figsize=(6, 6))
    ax.imshow(pixels, cmap="gray", vmin=-1, vmax=1)
    rr, cc = np.mgrid[0:h:stride, 0:w:stride]
    sub = mag[rr, cc] >= min_arrow_px
    if sub.any():
        ax.quiver(
            cc[sub],
            rr[sub],
            field[1][rr, cc][sub],
            field[0][rr, cc][sub],
            color="tab:orange",
            angles="xy",
            scale_units="xy",
            scale=1.0,
            width=0.004,
        )
    half = max(4, min(h, w) // 32)
    ax.add_patch(
        plt.Rectangle(
            (peak[1] - half, peak[0] - half),
            2 * half,
            2 * half,
            fill=False,
            edgecolor="tab:red",
            linewidth=1.5,
        )
    )
    title = f"predicted {predicted_mm:.2f} mm"
    if truth_mm is not None:
        title += f" / truth {truth_mm:.2f} mm"
    ax.set_title(title)
    ax.set_axis_off()
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, bbox_inches="tight", dpi=120)
    plt.close(fig)
    return {"n_arrows": int(sub.sum()), "peak": (int(peak[0]), int(peak[1]))}
