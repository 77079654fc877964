"""Metric math, summary serialization, and overlay rendering."""
from __future__ import annotations

import csv
import json
import math

import numpy as np
import pytest

from midshift.data import ImageSlice, LandmarkAnnotation, Volume
from midshift.evaluation import evaluate, render_overlay, write_summary
from midshift.training import VolumePrediction


def make_volume(case_id: str, truth_mm: float, ps: float = 0.5, annotations=None) -> Volume:
    pixels = np.zeros((8, 8), dtype=np.float32)
    return Volume(
        case_id=case_id,
        slices=[ImageSlice(pixels=pixels, pixel_size_mm=ps, slice_index=0)],
        annotations=annotations or [],
        is_mls=truth_mm > 0,
        case_mls_mm=truth_mm,
    )


def make_prediction(case_id: str, mm: float, slice_mm=None) -> VolumePrediction:
    slice_mm = {0: mm} if slice_mm is None else slice_mm
    return VolumePrediction(
        case_id=case_id,
        volume_mls_mm=mm,
        slice_mls_mm=slice_mm,
        slice_peak={s: (0, 0) for s in slice_mm},
        fields={s: np.zeros((2, 8, 8), dtype=np.float32) for s in slice_mm},
    )


class TestEvaluate:
    def test_hand_computed_errors(self):
        volumes = [make_volume("a", 4.0), make_volume("b", 6.0)]
        preds = [make_prediction("a", 5.0), make_prediction("b", 3.0)]
        summary = evaluate(preds, volumes)
        assert summary.volume_mae_mm == pytest.approx(2.0)
        assert summary.volume_rmse_mm == pytest.approx(math.sqrt(5.0))
        assert summary.n_cases == 2
        assert [c.case_id for c in summary.per_case] == ["a", "b"]
        assert summary.per_case[0].abs_error_mm == pytest.approx(1.0)

    def test_slice_metrics_use_annotations(self):
        ann = LandmarkAnnotation(slice_index=0, landmark=(4.0, 4.0), displacement=(0.0, -2.0))
        volumes = [make_volume("a", 1.0, ps=0.5, annotations=[ann])]
        preds = [make_prediction("a", 1.5)]
        summary = evaluate(preds, volumes)
        # annotated truth: ||(0,-2)|| px * 0.5 mm/px = 1.0 mm, predicted 1.5 mm
        assert summary.slice_mae_mm == pytest.approx(0.5)
        assert summary.slice_rmse_mm == pytest.approx(0.5)
        assert summary.n_slices == 1

    def test_no_annotations_slice_metrics_absent(self):
        summary = evaluate([make_prediction("a", 0.0)], [make_volume("a", 0.0)])
        assert summary.slice_mae_mm is None
        assert summary.slice_rmse_mm is None
        assert summary.n_slices == 0

    def test_prediction_order_invariance(self):
        volumes = [make_volume(f"c{i}", float(i)) for i in range(5)]
        preds = [make_prediction(f"c{i}", float(i) + 0.25 * i) for i in range(5)]
        fwd = evaluate(preds, volumes)
        rev = evaluate(list(reversed(preds)), volumes)
        assert fwd.volume_mae_mm == rev.volume_mae_mm
        assert fwd.volume_rmse_mm == rev.volume_rmse_mm

    def test_subset_of_volumes_is_fine(self):
        volumes = [make_volume("a", 2.0), make_volume("b", 3.0)]
        summary = evaluate([make_prediction("b", 3.5)], volumes)
        assert summary.n_cases == 1
        assert summary.per_case[0].case_id == "b"

    def test_rmse_dominates_mae(self):
        rng = np.random.default_rng(0)
        volumes, preds = [], []
        for i in range(20):
            truth = float(rng.uniform(0.5, 8.0))
            volumes.append(make_volume(f"c{i}", truth))
            preds.append(make_prediction(f"c{i}", truth + float(rng.normal(0, 2))))
        summary = evaluate(preds, volumes)
        assert summary.volume_rmse_mm >= summary.volume_mae_mm

    def test_unknown_case_raises_with_name(self):
        with pytest.raises(KeyError, match="ghost"):
            evaluate([make_prediction("ghost", 1.0)], [make_volume("a", 1.0)])

    def test_missing_slice_raises(self):
        ann = LandmarkAnnotation(slice_index=3, landmark=(4.0, 4.0), displacement=(0.0, -2.0))
        volumes = [make_volume("a", 1.0, annotations=[ann])]
        with pytest.raises(KeyError, match="slice 3"):
            evaluate([make_prediction("a", 1.0)], volumes)

    def test_empty_predictions_rejected(self):
        with pytest.raises(ValueError):
            evaluate([], [make_volume("a", 1.0)])


class TestWriteSummary:
    @pytest.fixture()
    def summary(self):
        volumes = [make_volume("a", 4.0), make_volume("b", 6.0)]
        preds = [make_prediction("a", 5.0), make_prediction("b", 3.0)]
        return evaluate(preds, volumes)

    def test_csv_schema_and_order(self, summary, tmp_path):
        path = tmp_path / "per_case.csv"
        write_summary(summary, csv_path=path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["case_id", "predicted_mm", "truth_mm", "abs_error_mm"]
        assert [r[0] for r in rows[1:]] == ["a", "b"]
        assert rows[1][1:] == ["5.000000", "4.000000", "1.000000"]

    def test_json_round_trip(self, summary, tmp_path):
        path = tmp_path / "summary.json"
        write_summary(summary, json_path=path)
        payload = json.loads(path.read_text())
        assert payload["volume_mae_mm"] == pytest.approx(2.0)
        assert payload["n_cases"] == 2
        assert payload["per_case"][1]["abs_error_mm"] == pytest.approx(3.0)

    def test_paths_are_optional(self, summary, tmp_path):
        write_summary(summary)
        assert list(tmp_path.iterdir()) == []


class TestRenderOverlay:
    def test_zero_field_draws_no_arrows(self, tmp_path):
        out = tmp_path / "overlay.png"
        info = render_overlay(
            pixels=np.zeros((64, 64), dtype=np.float32),
            field=np.zeros((2, 64, 64), dtype=np.float32),
            predicted_mm=0.0,
            truth_mm=None,
            out_path=out,
        )
        assert info["n_arrows"] == 0
        assert info["peak"] == (0, 0)
        assert out.read_bytes()[:4] == b"\x89PNG"

    def test_peak_box_and_arrow_count(self, tmp_path):
        field = np.ones((2, 64, 64), dtype=np.float32)
        field[0, 17, 23] = 5.0
        info = render_overlay(
            pixels=np.zeros((64, 64), dtype=np.float32),
            field=field,
            predicted_mm=2.0,
            truth_mm=1.5,
            out_path=tmp_path / "overlay.png",
        )
        # default stride 8 on a 64 grid: every sampled arrow clears the
        # 0.5 px floor because the background field is constant 1
        assert info["n_arrows"] == 64
        assert info["peak"] == (17, 23)

    def test_rejects_shape_mismatch(self, tmp_path):
        with pytest.raises(ValueError, match="does not match"):
            render_overlay(
                pixels=np.zeros((32, 32), dtype=np.float32),
                field=np.zeros((2, 16, 16), dtype=np.float32),
                predicted_mm=0.0,
                truth_mm=None,
                out_path=tmp_path / "x.png",
            )
