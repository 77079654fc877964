"""Denoising diffusion machinery: schedule, paired models, guided editing.

Two denoisers with identical architecture are trained separately, one on all
scans (``mixed``) and one on scans without a shift (``normal``). Their noise
predictions on a shared corrupted input provide the per-pixel evidence map
used as an extra input channel downstream, and their guided combination
drives the deterministic editor that removes the shift from an image.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule; ``alphas_bar`` is the running product of ``1 - beta``."""

    betas: torch.Tensor
    alphas_bar: torch.Tensor

    def __post_init__(self) -> None:
        if self.betas.dim() != 1 or self.betas.shape != self.alphas_bar.shape:
            raise ValueError("betas and alphas_bar must be 1-d and equal length")
        if not ((self.betas > 0) & (self.betas < 1)).all():
            raise ValueError("betas must lie strictly inside (0, 1)")
        if not ((self.alphas_bar > 0) & (self.alphas_bar < 1)).all():
            raise ValueError("alphas_bar must lie strictly inside (0, 1)")
        if not (self.alphas_bar[1:] < self.alphas_bar[:-1]).all():
            raise ValueError("alphas_bar must be strictly decreasing")

    @property
    def t_train(self) -> int:
        return int(self.betas.shape[0])

    @classmethod
    def linear(
        cls, t_train: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2
    ) -> "NoiseSchedule":
        if t_train < 2:
            raise ValueError(f"t_train must be >= 2, got {t_train}")
        if not 0 < beta_start < beta_end < 1:
            raise ValueError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
        betas = torch.linspace(beta_start, beta_end, t_train, dtype=torch.float64)
        alphas_bar = torch.cumprod(1.0 - betas, dim=0)
        return cls(betas=betas, alphas_bar=alphas_bar)


def _t_tensor(t, batch: int, device: torch.device) -> torch.Tensor:
    tt = torch.as_tensor(t, dtype=torch.long, device=device)
    if tt.dim() == 0:
        tt = tt.expand(batch)
    if tt.shape != (batch,):
        raise ValueError(f"t must be a scalar or [B], got shape {tuple(tt.shape)}")
    return tt


def add_noise(x0: torch.Tensor, t, noise: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """One-shot forward corruption ``sqrt(ab_t) x0 + sqrt(1 - ab_t) noise``."""
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != x0 shape {tuple(x0.shape)}")
    batched = x0.dim() == 4
    tt = _t_tensor(t, x0.shape[0] if batched else 1, x0.device)
    if (tt < 0).any() or (tt >= schedule.t_train).any():
        raise ValueError(f"t out of range [0, {schedule.t_train})")
    ab = schedule.alphas_bar.to(x0.device)[tt].to(x0.dtype)
    ab = ab.view(-1, 1, 1, 1) if batched else ab[0]
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape ``[B, dim]``."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / half
    )
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


@dataclass
class DenoiserConfig:
    """Architecture knobs. ``image_size`` fixes where attention lands.

    Resolution halves once per entry of ``channel_mults`` past the first, so
    level ``i`` runs at ``image_size / 2**i``; a level gets self-attention when
    that size is listed in ``attention_resolutions`` (the bottleneck always
    attends).
    """

    image_size: int = 256
    in_channels: int = 1
    base_channels: int = 64
    channel_mults: tuple[int, ...] = (1, 2, 4)
    res_blocks: int = 2
    attention_resolutions: tuple[int, ...] = (16,)
    groups: int = 8


class _ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int, groups: int, attend: bool):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, cout)
        self.norm2 = nn.GroupNorm(min(groups, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()
        self.attn = _Attention(cout, groups) if attend else None

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        out = h + self.skip(x)
        return self.attn(out) if self.attn is not None else out


class _Attention(nn.Module):
    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(min(groups, channels), channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(b, c, h, w)
        return x + self.proj(out)


class Denoiser(nn.Module):
    """Compact noise-prediction U-Net with sinusoidal timestep conditioning."""

    def __init__(self, cfg: DenoiserConfig | None = None):
        super().__init__()
        self.cfg = cfg or DenoiserConfig()
        c = self.cfg
        if c.image_size % 2 ** (len(c.channel_mults) - 1):
            raise ValueError(
                f"image_size {c.image_size} not divisible by 2**{len(c.channel_mults) - 1}"
            )
        base = c.base_channels
        self.time_dim = base * 4
        self.time_mlp = nn.Sequential(
            nn.Linear(base, self.time_dim), nn.SiLU(), nn.Linear(self.time_dim, self.time_dim)
        )
        self.stem = nn.Conv2d(c.in_channels, base, 3, padding=1)

        chans = [base * m for m in c.channel_mults]
        sizes = [c.image_size // 2**lv for lv in range(len(chans))]
        attend = [s in c.attention_resolutions for s in sizes]

        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        cur = base
        skip_chans = [cur]
        for lv, ch in enumerate(chans):
            blocks = nn.ModuleList()
            for _ in range(c.res_blocks):
                blocks.append(_ResBlock(cur, ch, self.time_dim, c.groups, attend[lv]))
                cur = ch
                skip_chans.append(cur)
            self.down_blocks.append(blocks)
            if lv < len(chans) - 1:
                self.downsamples.append(nn.Conv2d(cur, cur, 3, stride=2, padding=1))
                skip_chans.append(cur)

        self.mid1 = _ResBlock(cur, cur, self.time_dim, c.groups, attend=True)
        self.mid2 = _ResBlock(cur, cur, self.time_dim, c.groups, attend=False)

        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for lv in reversed(range(len(chans))):
            ch = chans[lv]
            blocks = nn.ModuleList()
            for _ in range(c.res_blocks + 1):
                blocks.append(
                    _ResBlock(cur + skip_chans.pop(), ch, self.time_dim, c.groups, attend[lv])
                )
                cur = ch
            self.up_blocks.append(blocks)
            if lv > 0:
                self.upsamples.append(nn.Conv2d(cur, cur, 3, padding=1))

        self.out_norm = nn.GroupNorm(min(c.groups, cur), cur)
        self.out_conv = nn.Conv2d(cur, c.in_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        c = self.cfg
        if x.dim() != 4 or x.shape[1] != c.in_channels:
            raise ValueError(f"expected [B, {c.in_channels}, H, W], got {tuple(x.shape)}")
        if x.shape[2] != c.image_size or x.shape[3] != c.image_size:
            raise ValueError(
                f"denoiser built for {c.image_size}x{c.image_size}, got {tuple(x.shape[2:])}"
            )
        tt = _t_tensor(t, x.shape[0], x.device)
        temb = self.time_mlp(timestep_embedding(tt, c.base_channels).to(x.dtype))

        h = self.stem(x)
        skips = [h]
        for lv, blocks in enumerate(self.down_blocks):
            for block in blocks:
                h = block(h, temb)
                skips.append(h)
            if lv < len(self.downsamples):
                h = self.downsamples[lv](h)
                skips.append(h)

        h = self.mid2(self.mid1(h, temb), temb)

        for lv, blocks in enumerate(self.up_blocks):
            for block in blocks:
                h = block(torch.cat([h, skips.pop()], dim=1), temb)
            if lv < len(self.upsamples):
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsamples[lv](h)

        return self.out_conv(F.silu(self.out_norm(h)))


class DiffusionPair(nn.Module):
    """Same-architecture denoisers: ``mixed`` sees all scans, ``normal`` only non-shift scans."""

    def __init__(self, cfg: DenoiserConfig | None = None):
        super().__init__()
        cfg = cfg or DenoiserConfig()
        self.mixed = Denoiser(cfg)
        self.normal = Denoiser(cfg)

    @property
    def cfg(self) -> DenoiserConfig:
        return self.mixed.cfg


def score_difference(
    pair, x0: torch.Tensor, t, noise: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Difference of the two models' noise predictions on one shared corruption.

    Both models see the identical ``x_t`` built from ``(x0, t, noise)``; the
    result is antisymmetric under swapping the models.
    """
    if x0.dim() != 4:
        raise ValueError("score_difference expects batched [B, C, H, W] input")
    x_t = add_noise(x0, t, noise, schedule)
    tt = _t_tensor(t, x_t.shape[0], x_t.device)
    return pair.mixed(x_t, tt) - pair.normal(x_t, tt)


def guided_noise(pair, x_t: torch.Tensor, t, guidance_weight: float) -> torch.Tensor:
    """Classifier-free combination: ``w * normal + (1 - w) * mixed``.

    ``w = 1`` returns the normal model's prediction exactly and ``w = 0`` the
    mixed model's; in between (and beyond) the output is affine in ``w``.
    """
    tt = _t_tensor(t, x_t.shape[0], x_t.device)
    if guidance_weight == 1.0:
        return pair.normal(x_t, tt)
    if guidance_weight == 0.0:
        return pair.mixed(x_t, tt)
    return guidance_weight * pair.normal(x_t, tt) + (1.0 - guidance_weight) * pair.mixed(x_t, tt)


@dataclass
class GuidanceConfig:
    guidance_weight: float = 2.0
    ddim_steps: int = 50
    start_step: int = 15
    clamp: tuple[float, float] = (-1.0, 1.0)


def ddim_timesteps(t_train: int, n_steps: int) -> torch.Tensor:
    """Ascending integer sub-schedule: ``n_steps`` values evenly spaced over [0, t_train)."""
    if not 1 <= n_steps <= t_train:
        raise ValueError(f"n_steps must be in [1, {t_train}], got {n_steps}")
    if n_steps == 1:
        return torch.zeros(1, dtype=torch.long)
    return torch.linspace(0, t_train - 1, n_steps, dtype=torch.float64).round().long()


def generate_negative(
    pair,
    x0: torch.Tensor,
    guidance: GuidanceConfig,
    schedule: NoiseSchedule,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Edit an image toward the non-shift class by partial corruption.

    ``x0`` is corrupted to the sub-schedule timestep indexed by
    ``guidance.start_step`` with a single Gaussian draw (the only source of
    randomness), then brought back to step 0 by the deterministic reverse
    update using the guided noise estimate, and finally clamped to
    ``guidance.clamp``. ``start_step = 0`` returns ``x0`` unchanged.
    """
    if x0.dim() != 4:
        raise ValueError(f"expected batched [B, C, H, W] input, got {tuple(x0.shape)}")
    ts = ddim_timesteps(schedule.t_train, guidance.ddim_steps)
    k = guidance.start_step
    if not 0 <= k < guidance.ddim_steps:
        raise ValueError(f"start_step must be in [0, {guidance.ddim_steps}), got {k}")
    if k == 0:
        return x0.clone()
    noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype, device=x0.device)
    x = add_noise(x0, int(ts[k]), noise, schedule)
    alphas_bar = schedule.alphas_bar.to(device=x0.device)

    def ab(step_index: int) -> torch.Tensor:
        return alphas_bar[int(ts[step_index])].to(x0.dtype)

    for i in range(k, 0, -1):
        eps = guided_noise(pair, x, int(ts[i]), guidance.guidance_weight)
        ab_cur, ab_prev = ab(i), ab(i - 1)
        x0_hat = (x - (1.0 - ab_cur).sqrt() * eps) / ab_cur.sqrt()
        x = ab_prev.sqrt() * x0_hat + (1.0 - ab_prev).sqrt() * eps
    eps = guided_noise(pair, x, int(ts[0]), guidance.guidance_weight)
    ab0 = ab(0)
    x = (x - (1.0 - ab0).sqrt() * eps) / ab0.sqrt()
    return x.clamp(guidance.clamp[0], guidance.clamp[1])


def diffusion_train_step(
    model: nn.Module,
    batch: torch.Tensor,
    schedule: NoiseSchedule,
    optimizer: torch.optim.Optimizer,
    generator: torch.Generator | None = None,
) -> float:
    """One denoising step: sample t and noise, regress the noise, update."""
    if batch.dim() != 4:
        raise ValueError(f"expected batched [B, C, H, W] input, got {tuple(batch.shape)}")
    b = batch.shape[0]
    t = torch.randint(0, schedule.t_train, (b,), generator=generator, device=batch.device)
    noise = torch.randn(batch.shape, generator=generator, dtype=batch.dtype, device=batch.device)
    x_t = add_noise(batch, t, noise, schedule)
    pred = model(x_t, t)
    loss = F.mse_loss(pred, noise)
    if not torch.isfinite(loss):
        raise RuntimeError(
            f"non-finite denoising loss {float(loss.detach())} at t={t.tolist()}"
        )
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())
