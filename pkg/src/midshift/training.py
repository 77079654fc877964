"""Training loops, volume inference, and checkpoint I/O.

Both stages are deterministic for a fixed config seed: every random draw
comes from generators derived by hashing (seed, purpose, ...) so runs
reproduce bit-for-bit on the same software stack, and inference noise depends
only on (seed, case_id, slice_index), not on batching.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig, config_to_dict, update_config
from .data import ImageSlice, Volume, augment_rotation, rotate_image
from .deformation import DeformNet, integrate, max_displacement, sample_field
from .diffusion import (
    DiffusionPair,
    NoiseSchedule,
    diffusion_train_step,
    generate_negative,
    score_difference,
)
from .losses import (
    ceiling_loss,
    combine_losses,
    huber_loss,
    smoothness_loss,
    warp_consistency_loss,
)

_METRIC_FIELDS = ("step", "l_huber", "l_smooth", "l_mse", "l_ceil", "u", "total")


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary printable parts."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def _torch_generator(*parts) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(*parts))
    return gen


def build_schedule(cfg: TrainConfig) -> NoiseSchedule:
    s = cfg.schedule
    return NoiseSchedule.linear(s.t_train, s.beta_start, s.beta_end)


def _write_metrics(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_METRIC_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


# --- diffusion pretraining ----------------------------------------------------


def _gather_slices(volumes: list[Volume]) -> list[tuple[ImageSlice, bool]]:
    return [(s, v.is_mls) for v in volumes for s in v.slices]


def sampling_weights(positive_flags, upsample: float) -> np.ndarray:
    """Per-slice draw weights; upsample=1 keeps classes proportional to counts."""
    if upsample <= 0:
        raise ValueError(f"positive_upsample must be positive, got {upsample}")
    return np.array([upsample if f else 1.0 for f in positive_flags], dtype=float)


def _train_denoiser(
    model,
    slices: list[ImageSlice],
    weights: np.ndarray,
    cfg: TrainConfig,
    schedule: NoiseSchedule,
    tag: str,
    out_dir: Path | None = None,
    progress=None,
) -> list[dict]:
    dcfg = cfg.diffusion
    optimizer = torch.optim.AdamW(model.parameters(), lr=dcfg.learning_rate)
    gen = _torch_generator(cfg.seed, "diffusion", tag)
    rng = np.random.default_rng(derive_seed(cfg.seed, "diffusion-data", tag))
    p = weights / weights.sum()
    rows = []
    for step in range(dcfg.iterations):
        idx = rng.choice(len(slices), size=dcfg.batch_size, replace=True, p=p)
        batch = []
        for j in idx:
            pixels = slices[j].pixels
            if dcfg.augment_degrees > 0:
                angle = rng.uniform(-dcfg.augment_degrees, dcfg.augment_degrees)
                pixels = rotate_image(pixels, angle).astype(np.float32)
            batch.append(pixels)
        x0 = torch.from_numpy(np.stack(batch))[:, None]
        loss = diffusion_train_step(model, x0, schedule, optimizer, gen)
        if not math.isfinite(loss):
            raise RuntimeError(f"diffusion ({tag}): non-finite loss {loss} at step {step}")
        if step % dcfg.log_every == 0 or step == dcfg.iterations - 1:
            rows.append({"step": step, "loss": loss})
            if progress is not None:
                progress(tag, step, loss)
        if (
            out_dir is not None
            and dcfg.checkpoint_every > 0
            and (step + 1) % dcfg.checkpoint_every == 0
            and step + 1 < dcfg.iterations
        ):
            torch.save(model.state_dict(), out_dir / f"{tag}_step{step + 1}.pt")
    return rows


def pretrain_diffusion(
    volumes: list[Volume], cfg: TrainConfig, out_dir: str | os.PathLike, progress=None
) -> DiffusionPair:
    """Train the mixed (all scans, positives upsampled) and normal (non-shift) models."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    schedule = build_schedule(cfg)
    pool = _gather_slices(volumes)
    if not pool:
        raise ValueError("no slices to train on")
    negatives = [s for s, positive in pool if not positive]
    if not negatives:
        raise ValueError("training the normal model requires at least one negative case")

    torch.manual_seed(derive_seed(cfg.seed, "init-diffusion"))
    pair = DiffusionPair(cfg.denoiser)

    weights_mixed = sampling_weights(
        [positive for _, positive in pool], cfg.diffusion.positive_upsample
    )
    rows = _train_denoiser(
        pair.mixed, [s for s, _ in pool], weights_mixed, cfg, schedule, "mixed",
        out_dir, progress,
    )
    _write_metrics_simple(out_dir / "diffusion_mixed_metrics.csv", rows)
    rows = _train_denoiser(
        pair.normal, negatives, np.ones(len(negatives)), cfg, schedule, "normal",
        out_dir, progress,
    )
    _write_metrics_simple(out_dir / "diffusion_normal_metrics.csv", rows)

    save_pair_checkpoint(out_dir, pair, cfg, {"iterations": cfg.diffusion.iterations})
    return pair


def _write_metrics_simple(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=("step", "loss"))
        writer.writeheader()
        writer.writerows(rows)


# --- deformation training -----------------------------------------------------


@dataclass
class _LabeledItem:
    image_slice: ImageSlice
    annotations: list
    ceiling_px: float


@dataclass
class _UnlabeledItem:
    image_slice: ImageSlice
    ceiling_px: float


def _deformation_pools(
    volumes: list[Volume], cfg: TrainConfig
) -> tuple[list[_LabeledItem], list[_UnlabeledItem]]:
    labeled: list[_LabeledItem] = []
    unlabeled: list[_UnlabeledItem] = []
    positives = [v for v in volumes if v.is_mls]
    rng = np.random.default_rng(derive_seed(cfg.seed, "unlabeled-volumes"))
    frac = cfg.deformation.unlabeled_fraction
    if not 0.0 <= frac <= 1.0:
        raise ValueError(f"unlabeled_fraction must be in [0, 1], got {frac}")
    keep = set()
    if positives and frac > 0:
        order = rng.permutation(len(positives))
        keep = {positives[i].case_id for i in order[: int(round(frac * len(positives)))]}
    for v in positives:
        by_slice: dict[int, list] = {}
        for a in v.annotations:
            by_slice.setdefault(a.slice_index, []).append(a)
        if v.case_id in keep and v.case_mls_mm <= 0:
            # the ceiling hinge on unannotated slices needs a per-case bound
            raise ValueError(
                f"case {v.case_id!r} contributes unlabeled slices but has no "
                f"positive case_mls_mm to bound them"
            )
        ceiling_px = v.case_mls_mm / v.slices[0].pixel_size_mm
        for s in v.slices:
            if s.slice_index in by_slice:
                labeled.append(_LabeledItem(s, by_slice[s.slice_index], ceiling_px))
            elif v.case_id in keep:
                unlabeled.append(_UnlabeledItem(s, ceiling_px))
    if not labeled:
        raise ValueError("deformation training requires annotated positive slices")
    return labeled, unlabeled


def train_deformation(
    volumes: list[Volume],
    pair: DiffusionPair | None,
    cfg: TrainConfig,
    out_dir: str | os.PathLike,
    progress=None,
) -> DeformNet:
    """Semi-supervised displacement training against a frozen diffusion pair.

    Labeled batches carry landmark and smoothness terms; unlabeled positive
    slices add warp-consistency against a freshly generated non-shift image
    and the ceiling hinge, both scaled by the ramped weight. With
    ``unlabeled_fraction = 0`` (or no unlabeled slices) the loop degrades to
    plain supervised training.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dcfg = cfg.deformation
    schedule = build_schedule(cfg)
    use_repr = dcfg.use_representation

    expected_in = 2 if use_repr else 1
    if cfg.deform_net.in_channels != expected_in:
        raise ValueError(
            f"deform_net.in_channels={cfg.deform_net.in_channels} inconsistent with "
            f"use_representation={use_repr} (expected {expected_in})"
        )

    labeled, unlabeled = _deformation_pools(volumes, cfg)
    if (use_repr or unlabeled) and pair is None:
        raise ValueError(
            "train_deformation needs the diffusion pair for representations and "
            "counterfactual generation"
        )
    if pair is not None:
        pair.eval()
        pair.requires_grad_(False)
    torch.manual_seed(derive_seed(cfg.seed, "init-deform"))
    net = DeformNet(cfg.deform_net)
    optimizer = torch.optim.AdamW(net.parameters(), lr=dcfg.learning_rate)

    rng = np.random.default_rng(derive_seed(cfg.seed, "deform-data"))
    gen_repr = _torch_generator(cfg.seed, "deform-repr")
    gen_cf = _torch_generator(cfg.seed, "deform-counterfactual")

    per_l = dcfg.batch_size // 2 if unlabeled else dcfg.batch_size
    per_l = max(1, min(per_l, len(labeled)))
    steps_per_epoch = math.ceil(len(labeled) / per_l)
    total_steps = dcfg.epochs * steps_per_epoch
    ramp_total = max(1, total_steps - 1)

    rows = []
    step = 0
    for epoch in range(dcfg.epochs):
        order = rng.permutation(len(labeled))
        for start in range(0, len(order), per_l):
            chunk = order[start : start + per_l]
            l_items, l_anns = [], []
            for j in chunk:
                item = labeled[j]
                sl, anns = item.image_slice, item.annotations
                if dcfg.augment_degrees > 0:
                    angle = rng.uniform(-dcfg.augment_degrees, dcfg.augment_degrees)
                    sl, anns = augment_rotation(sl, anns, angle)
                l_items.append(sl.pixels)
                l_anns.append(anns)
            n_l = len(l_items)
            n_u = min(n_l, len(unlabeled)) if unlabeled else 0
            u_pixels, u_ceils = [], []
            if n_u:
                for j in rng.choice(len(unlabeled), size=n_u, replace=len(unlabeled) < n_u):
                    item = unlabeled[j]
                    pixels = item.image_slice.pixels
                    if dcfg.augment_degrees > 0:
                        angle = rng.uniform(-dcfg.augment_degrees, dcfg.augment_degrees)
                        pixels = rotate_image(pixels, angle).astype(np.float32)
                    u_pixels.append(pixels)
                    u_ceils.append(item.ceiling_px)

            x = torch.from_numpy(np.stack(l_items + u_pixels))[:, None]
            with torch.no_grad():
                counterfactual = None
                if n_u:
                    counterfactual = generate_negative(
                        pair, x[n_l:], cfg.guidance, schedule, gen_cf
                    )
                if use_repr:
                    t_r = torch.randint(
                        0, schedule.t_train, (x.shape[0],), generator=gen_repr
                    )
                    noise = torch.randn(x.shape, generator=gen_repr, dtype=x.dtype)
                    rep = score_difference(pair, x, t_r, noise, schedule)
                    inp = torch.cat([x, rep], dim=1)
                else:
                    inp = x

            velocity = net(inp)
            disp = integrate(velocity, cfg.deform_net.integrate_steps)

            preds, targets = [], []
            size_r, size_c = disp.shape[-2:]
            for j, anns in enumerate(l_anns):
                # rotation augmentation can push edge landmarks off the grid
                pts = [
                    (min(max(a.landmark[0], 0.0), size_r - 1.0),
                     min(max(a.landmark[1], 0.0), size_c - 1.0))
                    for a in anns
                ]
                preds.append(sample_field(disp[j], pts).reshape(-1, 2))
                targets.append(torch.tensor([a.displacement for a in anns], dtype=disp.dtype))
            pred_t = torch.cat(preds)
            target_t = torch.cat(targets)
            l_huber = huber_loss(pred_t, target_t, cfg.weights.huber_cutoff).mean()
            l_smooth = smoothness_loss(disp).mean()
            if n_u:
                l_mse = warp_consistency_loss(x[n_l:], counterfactual, disp[n_l:]).mean()
                l_ceil = ceiling_loss(disp[n_l:], torch.tensor(u_ceils, dtype=disp.dtype)).mean()
            else:
                l_mse = torch.zeros((), dtype=disp.dtype)
                l_ceil = torch.zeros((), dtype=disp.dtype)
            total, u = combine_losses(
                l_huber, l_smooth, l_mse, l_ceil, cfg.weights, step, ramp_total
            )
            terms = {
                "l_huber": float(l_huber.detach()),
                "l_smooth": float(l_smooth.detach()),
                "l_mse": float(l_mse.detach()),
                "l_ceil": float(l_ceil.detach()),
            }
            if not math.isfinite(float(total.detach())):
                raise RuntimeError(f"non-finite deformation loss at step {step}: {terms}")
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            if dcfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(net.parameters(), dcfg.grad_clip)
            optimizer.step()

            rows.append({"step": step, **terms, "u": u, "total": float(total.detach())})
            step += 1
        if progress is not None:
            progress(epoch, rows[-1])

    _write_metrics(out_dir / "deform_metrics.csv", rows)
    save_deform_checkpoint(out_dir, net, cfg, {"epochs": dcfg.epochs, "steps": step})
    return net


# --- inference ----------------------------------------------------------------


@dataclass
class VolumePrediction:
    case_id: str
    volume_mls_mm: float
    slice_mls_mm: dict[int, float]
    slice_peak: dict[int, tuple[int, int]]
    fields: dict[int, np.ndarray]


def infer_volume(
    volume: Volume,
    net: DeformNet,
    pair: DiffusionPair | None,
    cfg: TrainConfig,
    schedule: NoiseSchedule | None = None,
) -> VolumePrediction:
    """Per-slice displacement fields and shift estimates; volume takes the max.

    The representation noise for a slice is derived from
    ``(seed, case_id, slice_index)`` alone, so results do not depend on how
    slices are batched.
    """
    net.eval()
    use_repr = cfg.deformation.use_representation
    if use_repr and pair is None:
        raise ValueError("inference with use_representation=True requires the diffusion pair")
    if pair is not None:
        pair.eval()
    schedule = schedule or build_schedule(cfg)
    ps = volume.slices[0].pixel_size_mm
    t_repr = cfg.deformation.repr_t_inference
    if not 0 <= t_repr < schedule.t_train:
        raise ValueError(f"repr_t_inference {t_repr} outside [0, {schedule.t_train})")

    slice_mls: dict[int, float] = {}
    peaks: dict[int, tuple[int, int]] = {}
    fields: dict[int, np.ndarray] = {}
    batch = max(1, cfg.deformation.infer_batch)
    with torch.no_grad():
        for start in range(0, len(volume.slices), batch):
            chunk = volume.slices[start : start + batch]
            x = torch.from_numpy(np.stack([s.pixels for s in chunk]))[:, None]
            if use_repr:
                noise = torch.stack(
                    [
                        torch.randn(
                            x.shape[1:],
                            generator=_torch_generator(
                                cfg.seed, "infer", volume.case_id, s.slice_index
                            ),
                            dtype=x.dtype,
                        )
                        for s in chunk
                    ]
                )
                rep = score_difference(pair, x, t_repr, noise, schedule)
                inp = torch.cat([x, rep], dim=1)
            else:
                inp = x
            disp = integrate(net(inp), cfg.deform_net.integrate_steps)
            for j, s in enumerate(chunk):
                magnitude, loc = max_displacement(disp[j])
                slice_mls[s.slice_index] = magnitude * ps
                peaks[s.slice_index] = loc
                fields[s.slice_index] = disp[j].numpy().astype(np.float32)

    return VolumePrediction(
        case_id=volume.case_id,
        volume_mls_mm=max(slice_mls.values()),
        slice_mls_mm=slice_mls,
        slice_peak=peaks,
        fields=fields,
    )


def compute_representation(
    volume: Volume, pair: DiffusionPair, cfg: TrainConfig, schedule: NoiseSchedule | None = None
) -> dict[int, np.ndarray]:
    """Per-slice evidence maps at the inference timestep (for debugging dumps)."""
    schedule = schedule or build_schedule(cfg)
    pair.eval()
    out: dict[int, np.ndarray] = {}
    with torch.no_grad():
        for s in volume.slices:
            x = torch.from_numpy(s.pixels)[None, None]
            noise = torch.randn(
                x.shape,
                generator=_torch_generator(cfg.seed, "infer", volume.case_id, s.slice_index),
                dtype=x.dtype,
            )
            rep = score_difference(pair, x, cfg.deformation.repr_t_inference, noise, schedule)
            out[s.slice_index] = rep[0, 0].numpy().astype(np.float32)
    return out


# --- checkpoints ----------------------------------------------------------------


def _write_sidecar(path: Path, cfg: TrainConfig, metadata: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"config": config_to_dict(cfg), "metadata": metadata}, fh, indent=2)
        fh.write("\n")


def _read_sidecar(path: Path) -> tuple[TrainConfig, dict]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    cfg = TrainConfig()
    update_config(cfg, payload["config"])
    return cfg, payload.get("metadata", {})


def save_pair_checkpoint(
    out_dir: str | os.PathLike, pair: DiffusionPair, cfg: TrainConfig, metadata: dict
) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.save(pair.mixed.state_dict(), out_dir / "mixed.pt")
    torch.save(pair.normal.state_dict(), out_dir / "normal.pt")
    _write_sidecar(out_dir / "diffusion.json", cfg, metadata)


def load_pair_checkpoint(out_dir: str | os.PathLike) -> tuple[DiffusionPair, TrainConfig, dict]:
    out_dir = Path(out_dir)
    cfg, metadata = _read_sidecar(out_dir / "diffusion.json")
    pair = DiffusionPair(cfg.denoiser)
    pair.mixed.load_state_dict(torch.load(out_dir / "mixed.pt", weights_only=True))
    pair.normal.load_state_dict(torch.load(out_dir / "normal.pt", weights_only=True))
    return pair, cfg, metadata


def save_deform_checkpoint(
    out_dir: str | os.PathLike, net: DeformNet, cfg: TrainConfig, metadata: dict
) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.save(net.state_dict(), out_dir / "deform.pt")
    _write_sidecar(out_dir / "deform.json", cfg, metadata)


def load_deform_checkpoint(out_dir: str | os.PathLike) -> tuple[DeformNet, TrainConfig, dict]:
    out_dir = Path(out_dir)
    cfg, metadata = _read_sidecar(out_dir / "deform.json")
    net = DeformNet(cfg.deform_net)
    net.load_state_dict(torch.load(out_dir / "deform.pt", weights_only=True))
    return net, cfg, metadata
