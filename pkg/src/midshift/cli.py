"""Command-line interface.

Subcommands cover the full pipeline: ``gen-data`` (synthetic phantoms),
``train-diffusion``, ``train-deform``, ``infer``, ``eval``, ``plot``, and
``ablate`` (parameter sweeps with one summary CSV per sweep). Every command
accepts ``--config FILE`` (JSON or TOML, defaulting to ``$MIDSHIFT_CONFIG``
when that is set) plus repeated ``--set key=value`` dotted overrides, and
writes a ``run.json`` provenance record into its output directory. Exit
codes: 0 success, 2 validation/usage error, 1 runtime error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
import traceback
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .arrays import write_array
from .config import (
    GenConfig,
    TrainConfig,
    apply_overrides,
    config_to_dict,
    load_config_file,
    load_gen_config,
    load_train_config,
    update_config,
)
from .data import load_dataset
from .evaluation import evaluate, render_overlay, write_summary
from .synthetic import export_dataset, generate_dataset
from .training import (
    VolumePrediction,
    build_schedule,
    compute_representation,
    infer_volume,
    load_deform_checkpoint,
    load_pair_checkpoint,
    pretrain_diffusion,
    train_deformation,
)

_REPR_T_DEFAULT = (200, 400, 600, 800)
_FRACTION_DEFAULT = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
_NEG_MULTIPLE_DEFAULT = (1, 5, 10)


def _write_run_record(out_dir: Path, command: str, argv: list[str], config: dict, t0: float) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "argv": argv,
        "config": config,
        "started_utc": datetime.fromtimestamp(t0, tz=timezone.utc).isoformat(),
        "elapsed_seconds": round(time.time() - t0, 3),
        "versions": {
            "midshift": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "torch": torch.__version__,
        },
    }
    with open(out_dir / "run.json", "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2)
        fh.write("\n")


def _progress_printer(prefix: str):
    def callback(*args):
        print(f"[{prefix}]", *args, flush=True)

    return callback


def _load_pair_if_needed(args, cfg: TrainConfig):
    needs_pair = cfg.deformation.use_representation or cfg.deformation.unlabeled_fraction > 0
    if getattr(args, "diffusion", None):
        pair, _, _ = load_pair_checkpoint(args.diffusion)
        return pair
    if needs_pair:
        raise ValueError(
            "--diffusion checkpoint directory is required unless "
            "use_representation=false and unlabeled_fraction=0"
        )
    return None


def _predictions_to_json(predictions: list[VolumePrediction]) -> dict:
    return {
        p.case_id: {
            "volume_mls_mm": p.volume_mls_mm,
            "slices": {str(k): v for k, v in sorted(p.slice_mls_mm.items())},
            "peaks": {str(k): list(v) for k, v in sorted(p.slice_peak.items())},
        }
        for p in predictions
    }


def _predictions_from_json(payload: dict) -> list[VolumePrediction]:
    out = []
    for case_id, rec in payload.items():
        slices = {int(k): float(v) for k, v in rec["slices"].items()}
        peaks = {int(k): tuple(v) for k, v in rec.get("peaks", {}).items()}
        out.append(
            VolumePrediction(
                case_id=case_id,
                volume_mls_mm=float(rec["volume_mls_mm"]),
                slice_mls_mm=slices,
                slice_peak=peaks,
                fields={},
            )
        )
    return out


def _infer_all(volumes, net, pair, cfg) -> list[VolumePrediction]:
    schedule = build_schedule(cfg)
    return [infer_volume(v, net, pair, cfg, schedule) for v in volumes]


# --- subcommand handlers --------------------------------------------------------


def _cmd_gen_data(args) -> int:
    t0 = time.time()
    cfg: GenConfig = load_gen_config(args.config, args.set)
    cases = generate_dataset(cfg.spec, cfg.n_cases, cfg.seed)
    out = Path(args.out)
    export_dataset(cases, out)
    n_pos = sum(c.volume.is_mls for c in cases)
    print(f"wrote {len(cases)} cases ({n_pos} positive) to {out}")
    _write_run_record(out, "gen-data", sys.argv[1:], config_to_dict(cfg), t0)
    return 0


def _cmd_train_diffusion(args) -> int:
    t0 = time.time()
    cfg = load_train_config(args.config, args.set)
    volumes = load_dataset(args.data)
    out = Path(args.out)
    pretrain_diffusion(volumes, cfg, out, progress=_progress_printer("diffusion"))
    print(f"diffusion pair saved to {out}")
    _write_run_record(out, "train-diffusion", sys.argv[1:], config_to_dict(cfg), t0)
    return 0


def _cmd_train_deform(args) -> int:
    t0 = time.time()
    cfg = load_train_config(args.config, args.set)
    volumes = load_dataset(args.data)
    pair = _load_pair_if_needed(args, cfg)
    out = Path(args.out)
    train_deformation(volumes, pair, cfg, out, progress=_progress_printer("deform"))
    print(f"deformation net saved to {out}")
    _write_run_record(out, "train-deform", sys.argv[1:], config_to_dict(cfg), t0)
    return 0


def _cmd_infer(args) -> int:
    t0 = time.time()
    net, cfg, _ = load_deform_checkpoint(args.model)
    if args.config:
        update_config(cfg, load_config_file(args.config))
    apply_overrides(cfg, args.set)
    volumes = load_dataset(args.data)
    pair = None
    if cfg.deformation.use_representation:
        if not args.diffusion:
            raise ValueError("--diffusion is required when use_representation=true")
        pair, _, _ = load_pair_checkpoint(args.diffusion)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    predictions = _infer_all(volumes, net, pair, cfg)
    with open(out / "predictions.json", "w", encoding="utf-8") as fh:
        json.dump(_predictions_to_json(predictions), fh, indent=2)
        fh.write("\n")
    if args.save_fields:
        (out / "fields").mkdir(exist_ok=True)
        for v, p in zip(volumes, predictions):
            ps = v.slices[0].pixel_size_mm
            for idx, disp in p.fields.items():
                write_array(out / "fields" / f"field_{p.case_id}_{idx}.arr", disp, ps)
    if args.dump_repr:
        if pair is None:
            raise ValueError("--dump-repr requires the diffusion pair")
        (out / "repr").mkdir(exist_ok=True)
        for v in volumes:
            maps = compute_representation(v, pair, cfg)
            ps = v.slices[0].pixel_size_mm
            for idx, rep in maps.items():
                write_array(out / "repr" / f"repr_{v.case_id}_{idx}.arr", rep, ps)
    for p in predictions:
        print(f"{p.case_id}: {p.volume_mls_mm:.3f} mm")
    _write_run_record(out, "infer", sys.argv[1:], config_to_dict(cfg), t0)
    return 0


def _cmd_eval(args) -> int:
    t0 = time.time()
    volumes = load_dataset(args.data)
    with open(args.predictions, encoding="utf-8") as fh:
        predictions = _predictions_from_json(json.load(fh))
    summary = evaluate(predictions, volumes)
    out = Path(args.out)
    write_summary(summary, csv_path=out / "per_case.csv", json_path=out / "summary.json")
    print(
        f"volume MAE {summary.volume_mae_mm:.3f} mm, RMSE {summary.volume_rmse_mm:.3f} mm "
        f"({summary.n_cases} cases)"
    )
    if summary.slice_mae_mm is not None:
        print(
            f"slice  MAE {summary.slice_mae_mm:.3f} mm, RMSE {summary.slice_rmse_mm:.3f} mm "
            f"({summary.n_slices} annotated slices)"
        )
    _write_run_record(out, "eval", sys.argv[1:], {}, t0)
    return 0


def _cmd_plot(args) -> int:
    t0 = time.time()
    net, cfg, _ = load_deform_checkpoint(args.model)
    volumes = load_dataset(args.data)
    by_id = {v.case_id: v for v in volumes}
    if args.case not in by_id:
        raise KeyError(f"case {args.case!r} not in dataset")
    volume = by_id[args.case]
    pair = None
    if cfg.deformation.use_representation:
        if not args.diffusion:
            raise ValueError("--diffusion is required when use_representation=true")
        pair, _, _ = load_pair_checkpoint(args.diffusion)
    pred = infer_volume(volume, net, pair, cfg)
    if args.slice is not None:
        idx = args.slice
        if idx not in pred.slice_mls_mm:
            raise KeyError(f"slice {idx} not in case {args.case!r}")
    else:
        idx = max(pred.slice_mls_mm, key=lambda k: pred.slice_mls_mm[k])
    truth = volume.case_mls_mm if volume.is_mls else 0.0
    out = Path(args.out)
    render_overlay(
        volume.slice_by_index(idx).pixels,
        pred.fields[idx],
        pred.slice_mls_mm[idx],
        truth,
        out,
    )
    print(f"wrote {out} (case {args.case}, slice {idx})")
    _write_run_record(out.parent, "plot", sys.argv[1:], config_to_dict(cfg), t0)
    return 0


def _parse_values(raw: str | None, default: tuple, cast) -> list:
    if raw is None:
        return list(default)
    try:
        return [cast(v) for v in raw.split(",") if v.strip()]
    except ValueError as exc:
        raise ValueError(f"bad --values list {raw!r}: {exc}") from exc


def _sweep_rows_to_csv(path: Path, key: str, rows: list[tuple]) -> None:
    import csv as _csv

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow([key, "volume_mae_mm", "volume_rmse_mm", "slice_mae_mm", "slice_rmse_mm"])
        for value, summary in rows:
            writer.writerow(
                [
                    value,
                    f"{summary.volume_mae_mm:.6f}",
                    f"{summary.volume_rmse_mm:.6f}",
                    "" if summary.slice_mae_mm is None else f"{summary.slice_mae_mm:.6f}",
                    "" if summary.slice_rmse_mm is None else f"{summary.slice_rmse_mm:.6f}",
                ]
            )


def _cmd_ablate(args) -> int:
    t0 = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    eval_volumes = load_dataset(args.eval_data)

    if args.sweep == "repr-t":
        values = _parse_values(args.values, _REPR_T_DEFAULT, int)
        if not args.model:
            raise ValueError("--model is required for the repr-t sweep")
        net, cfg, _ = load_deform_checkpoint(args.model)
        if args.config:
            update_config(cfg, load_config_file(args.config))
        apply_overrides(cfg, args.set)
        pair, _, _ = load_pair_checkpoint(args.diffusion) if args.diffusion else (None, None, None)
        rows = []
        for t in values:
            cfg.deformation.repr_t_inference = int(t)
            summary = evaluate(_infer_all(eval_volumes, net, pair, cfg), eval_volumes)
            rows.append((t, summary))
            print(f"repr_t={t}: volume MAE {summary.volume_mae_mm:.3f} mm")
        _sweep_rows_to_csv(out / "ablate_repr_t.csv", "repr_t", rows)
    elif args.sweep == "unlabeled-fraction":
        values = _parse_values(args.values, _FRACTION_DEFAULT, float)
        if not args.train_data:
            raise ValueError("--train-data is required for the unlabeled-fraction sweep")
        train_volumes = load_dataset(args.train_data)
        pair, _, _ = load_pair_checkpoint(args.diffusion) if args.diffusion else (None, None, None)
        rows = []
        for frac in values:
            cfg = load_train_config(args.config, args.set)
            cfg.deformation.unlabeled_fraction = float(frac)
            run_dir = out / f"unlabeled_{frac:g}"
            net = train_deformation(train_volumes, pair, cfg, run_dir)
            summary = evaluate(_infer_all(eval_volumes, net, pair, cfg), eval_volumes)
            rows.append((frac, summary))
            print(f"unlabeled_fraction={frac:g}: volume MAE {summary.volume_mae_mm:.3f} mm")
        _sweep_rows_to_csv(out / "ablate_unlabeled_fraction.csv", "unlabeled_fraction", rows)
    else:  # negative-multiple
        values = _parse_values(args.values, _NEG_MULTIPLE_DEFAULT, int)
        if not args.train_data:
            raise ValueError("--train-data is required for the negative-multiple sweep")
        train_volumes = load_dataset(args.train_data)
        rows = []
        for mult in values:
            cfg = load_train_config(args.config, args.set)
            positives = [v for v in train_volumes if v.is_mls]
            negatives = [v for v in train_volumes if not v.is_mls]
            rng = np.random.default_rng(mult)
            n_keep = min(len(negatives), mult * max(1, len(positives)))
            keep_idx = rng.permutation(len(negatives))[:n_keep]
            subset = positives + [negatives[i] for i in sorted(keep_idx)]
            run_dir = out / f"negmult_{mult}"
            pair = pretrain_diffusion(subset, cfg, run_dir / "diffusion")
            net = train_deformation(subset, pair, cfg, run_dir / "deform")
            summary = evaluate(_infer_all(eval_volumes, net, pair, cfg), eval_volumes)
            rows.append((mult, summary))
            print(f"negative_multiple={mult}: volume MAE {summary.volume_mae_mm:.3f} mm")
        _sweep_rows_to_csv(out / "ablate_negative_multiple.csv", "negative_multiple", rows)
    _write_run_record(out, f"ablate:{args.sweep}", sys.argv[1:], {}, t0)
    return 0


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="midshift",
        description="Midline shift quantification via diffusion-guided deformation fields.",
    )
    parser.add_argument("--version", action="version", version=f"midshift {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument(
            "--config",
            default=os.environ.get("MIDSHIFT_CONFIG") or None,
            help="JSON or TOML config file (default: $MIDSHIFT_CONFIG if set)",
        )
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="dotted config override, e.g. deformation.epochs=5 (repeatable)",
        )

    p = sub.add_parser("gen-data", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train-diffusion", help="pretrain the paired denoisers")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=_cmd_train_diffusion)

    p = sub.add_parser("train-deform", help="train the displacement network")
    p.add_argument("--data", required=True)
    p.add_argument("--diffusion", help="diffusion checkpoint directory")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=_cmd_train_deform)

    p = sub.add_parser("infer", help="predict per-slice and per-volume shift")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="deformation checkpoint directory")
    p.add_argument("--diffusion", help="diffusion checkpoint directory")
    p.add_argument("--out", required=True)
    p.add_argument("--save-fields", action="store_true", help="write displacement fields")
    p.add_argument("--dump-repr", action="store_true", help="write evidence maps")
    common(p)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--data", required=True)
    p.add_argument("--predictions", required=True, help="predictions.json from infer")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("plot", help="render a slice overlay PNG")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--diffusion")
    p.add_argument("--case", required=True)
    p.add_argument("--slice", type=int)
    p.add_argument("--out", required=True, help="output PNG path")
    common(p)
    p.set_defaults(func=_cmd_plot)

    p = sub.add_parser("ablate", help="run a parameter sweep, one summary CSV per sweep")
    p.add_argument(
        "--sweep",
        required=True,
        choices=["repr-t", "unlabeled-fraction", "negative-multiple"],
    )
    p.add_argument("--eval-data", required=True)
    p.add_argument("--train-data", help="training dataset (retraining sweeps)")
    p.add_argument("--model", help="deformation checkpoint (repr-t sweep)")
    p.add_argument("--diffusion", help="diffusion checkpoint directory")
    p.add_argument("--values", help="comma-separated sweep values overriding the defaults")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=_cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
