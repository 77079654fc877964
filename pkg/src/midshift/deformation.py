"""Dense displacement fields: warping, velocity integration, and the field network.

Fields are tensors shaped ``[2, H, W]`` (or batched ``[B, 2, H, W]``) whose
channel 0 is the row displacement and channel 1 the column displacement, in
pixels. ``warp(image, disp)`` samples ``image`` at ``p + disp(p)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "warp",
    "integrate",
    "sample_field",
    "max_displacement",
    "DeformNetConfig",
    "DeformNet",
]


def _as_batched(t: torch.Tensor, ndim: int) -> tuple[torch.Tensor, bool]:
    if t.dim() == ndim - 1:
        return t.unsqueeze(0), True
    if t.dim() == ndim:
        return t, False
    raise ValueError(f"expected a {ndim - 1}-d or {ndim}-d tensor, got shape {tuple(t.shape)}")


def _gather_bilinear(source: torch.Tensor, rows: torch.Tensor, cols: torch.Tensor) -> torch.Tensor:
    """Sample ``source`` [B,C,H,W] at float positions, border-clamped.

    Exact at integer positions: the interpolation weights degenerate to 0/1 so
    no arithmetic blending occurs beyond multiplication by exact constants.
    """
    b, ch, h, w = source.shape
    r = rows.clamp(0.0, float(h - 1))
    c = cols.clamp(0.0, float(w - 1))
    r0f = r.floor().clamp(0.0, float(max(h - 2, 0)))
    c0f = c.floor().clamp(0.0, float(max(w - 2, 0)))
    wr = (r - r0f).unsqueeze(1)
    wc = (c - c0f).unsqueeze(1)
    r0 = r0f.long()
    c0 = c0f.long()
    r1 = (r0 + 1).clamp(max=h - 1)
    c1 = (c0 + 1).clamp(max=w - 1)

    flat = source.reshape(b, ch, h * w)

    def take(ri: torch.Tensor, ci: torch.Tensor) -> torch.Tensor:
        idx = (ri * w + ci).reshape(b, 1, h * w).expand(b, ch, h * w)
        return torch.gather(flat, 2, idx).reshape(b, ch, h, w)

    top = take(r0, c0) * (1.0 - wc) + take(r0, c1) * wc
    bottom = take(r1, c0) * (1.0 - wc) + take(r1, c1) * wc
    return top * (1.0 - wr) + bottom * wr


def _base_grid(h: int, w: int, dtype: torch.dtype, device: torch.device) -> tuple[torch.Tensor, torch.Tensor]:
    rows = torch.arange(h, dtype=dtype, device=device).view(1, h, 1)
    cols = torch.arange(w, dtype=dtype, device=device).view(1, 1, w)
    return rows, cols


def warp(image: torch.Tensor, disp: torch.Tensor) -> torch.Tensor:
    """Warp ``image`` by a displacement field: ``out(p) = image(p + disp(p))``.

    Bilinear interpolation with border clamping; differentiable with respect
    to both arguments. ``image`` is ``[C, H, W]`` or ``[B, C, H, W]``; ``disp``
    is ``[2, H, W]`` or ``[B, 2, H, W]`` in pixel units.
    """
    img, img_sq = _as_batched(image, 4)
    d, d_sq = _as_batched(disp, 4)
    if d.shape[1] != 2:
        raise ValueError(f"displacement must have 2 channels, got {d.shape[1]}")
    if img.shape[2:] != d.shape[2:]:
        raise ValueError(f"image {tuple(img.shape)} and field {tuple(d.shape)} grids differ")
    if img.shape[0] != d.shape[0]:
        if d.shape[0] == 1:
            d = d.expand(img.shape[0], -1, -1, -1)
        elif img.shape[0] == 1:
            img = img.expand(d.shape[0], -1, -1, -1)
            img_sq = False
        else:
            raise ValueError("batch sizes of image and field do not match")
    h, w = img.shape[2:]
    base_r, base_c = _base_grid(h, w, d.dtype, d.device)
    out = _gather_bilinear(img.to(d.dtype), base_r + d[:, 0], base_c + d[:, 1])
    return out.squeeze(0) if (img_sq and d_sq) else out


def integrate(velocity: torch.Tensor, steps: int = 7) -> torch.Tensor:
    """Integrate a stationary velocity field by scaling and squaring.

    The field is scaled by ``1 / 2**steps`` and self-composed ``steps`` times:
    ``disp <- disp + warp(disp, disp)``. ``steps = 0`` returns the velocity
    unchanged (as a fresh tensor).
    """
    if not isinstance(steps, int) or steps < 0:
        raise ValueError(f"steps must be a non-negative integer, got {steps!r}")
    v, squeeze = _as_batched(velocity, 4)
    if v.shape[1] != 2:
        raise ValueError(f"velocity must have 2 channels, got {v.shape[1]}")
    disp = v / (2.0**steps) if steps > 0 else v.clone()
    for _ in range(steps):
        disp = disp + warp(disp, disp)
    return disp.squeeze(0) if squeeze else disp


def sample_field(field: torch.Tensor, points) -> torch.Tensor:
    """Bilinearly sample a ``[2, H, W]`` field at (row, col) points.

    ``points`` is a single ``(row, col)`` pair or an array of shape ``[K, 2]``,
    every point inside the grid bounds. Returns ``[2]`` for a single point,
    else ``[K, 2]``. Differentiable in the field values.
    """
    if field.dim() != 3 or field.shape[0] != 2:
        raise ValueError(f"field must be [2, H, W], got {tuple(field.shape)}")
    pts = torch.as_tensor(points, dtype=field.dtype, device=field.device)
    single = pts.dim() == 1
    if single:
        pts = pts.unsqueeze(0)
    if pts.dim() != 2 or pts.shape[1] != 2:
        raise ValueError(f"points must be [K, 2], got {tuple(pts.shape)}")
    h, w = field.shape[1:]
    r = pts[:, 0]
    c = pts[:, 1]
    if bool((r < 0).any() or (r > h - 1).any() or (c < 0).any() or (c > w - 1).any()):
        raise ValueError("sample points must lie inside the field grid")
    r0f = r.floor().clamp(0.0, float(max(h - 2, 0)))
    c0f = c.floor().clamp(0.0, float(max(w - 2, 0)))
    wr = r - r0f
    wc = c - c0f
    r0 = r0f.long()
    c0 = c0f.long()
    r1 = (r0 + 1).clamp(max=h - 1)
    c1 = (c0 + 1).clamp(max=w - 1)
    top = field[:, r0, c0] * (1.0 - wc) + field[:, r0, c1] * wc
    bottom = field[:, r1, c0] * (1.0 - wc) + field[:, r1, c1] * wc
    out = (top * (1.0 - wr) + bottom * wr).transpose(0, 1)
    return out[0] if single else out


def max_displacement(field: torch.Tensor) -> tuple[float, tuple[int, int]]:
    """Largest Euclidean displacement and its location.

    Ties are broken by the smallest (row, col) in lexicographic order. Returns
    ``(magnitude_px, (row, col))``.
    """
    if field.dim() != 3 or field.shape[0] != 2:
        raise ValueError(f"field must be [2, H, W], got {tuple(field.shape)}")
    if not torch.isfinite(field).all():
        raise ValueError("field contains non-finite values")
    with torch.no_grad():
        mag = (field[0] * field[0] + field[1] * field[1]).sqrt()
        peak = mag.max()
        loc = (mag == peak).nonzero()[0]
    return float(peak), (int(loc[0]), int(loc[1]))


@dataclass
class DeformNetConfig:
    in_channels: int = 2
    levels: int = 4
    base_channels: int = 16
    convs_per_level: int = 2
    leaky_slope: float = 0.2
    integrate_steps: int = 7

    def channels(self, level: int) -> int:
        return self.base_channels * (2**level)


class DeformNet(nn.Module):
    """U-Net that maps image (and optional feature channels) to a velocity field.

    Encoder-decoder with skip connections; every decoder scale emits a
    2-channel velocity head, and the heads are aggregated coarse-to-fine by
    repeated x2 bilinear upsampling and summation. All head convolutions are
    zero-initialized so an untrained network yields the identity deformation.
    """

    def __init__(self, cfg: DeformNetConfig | None = None):
        super().__init__()
        self.cfg = cfg or DeformNetConfig()
        c = self.cfg
        if c.levels < 2:
            raise ValueError("need at least 2 resolution levels")

        def block(cin: int, cout: int) -> nn.Sequential:
            layers: list[nn.Module] = []
            for i in range(c.convs_per_level):
                layers.append(nn.Conv2d(cin if i == 0 else cout, cout, 3, padding=1))
                layers.append(nn.LeakyReLU(c.leaky_slope, inplace=True))
            return nn.Sequential(*layers)

        self.encoders = nn.ModuleList(
            block(c.in_channels if lv == 0 else c.channels(lv - 1), c.channels(lv))
            for lv in range(c.levels)
        )
        self.pool = nn.MaxPool2d(2)
        self.decoders = nn.ModuleList(
            block(c.channels(lv + 1) + c.channels(lv), c.channels(lv))
            for lv in reversed(range(c.levels - 1))
        )
        heads = [nn.Conv2d(c.channels(c.levels - 1), 2, 3, padding=1)]
        heads += [
            nn.Conv2d(c.channels(lv), 2, 3, padding=1) for lv in reversed(range(c.levels - 1))
        ]
        for head in heads:
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
        self.heads = nn.ModuleList(heads)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        c = self.cfg
        if x.dim() != 4 or x.shape[1] != c.in_channels:
            raise ValueError(
                f"expected input [B, {c.in_channels}, H, W], got {tuple(x.shape)}"
            )
        stride = 2 ** (c.levels - 1)
        if x.shape[2] % stride or x.shape[3] % stride:
            raise ValueError(
                f"input size {tuple(x.shape[2:])} not divisible by {stride} "
                f"(levels={c.levels})"
            )
        skips = []
        for lv, enc in enumerate(self.encoders):
            x = enc(self.pool(x) if lv > 0 else x)
            skips.append(x)
        velocity = self.heads[0](skips[-1])
        feat = skips[-1]
        for i, dec in enumerate(self.decoders):
            skip = skips[-(i + 2)]
            feat = F.interpolate(feat, scale_factor=2, mode="bilinear", align_corners=False)
            feat = dec(torch.cat([feat, skip], dim=1))
            velocity = F.interpolate(
                velocity, scale_factor=2, mode="bilinear", align_corners=False
            )
            velocity = velocity + self.heads[i + 1](feat)
        return velocity

    def predict_displacement(self, x: torch.Tensor) -> torch.Tensor:
        return integrate(self.forward(x), self.cfg.integrate_steps)
