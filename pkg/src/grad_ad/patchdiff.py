"""PatchDiff: a DDPM whose denoiser sees only an n x n neighbourhood.

The denoiser is a flat stack of (n - 1) / 2 same-padded 3x3 convolutions
(stride 1, no attention), each followed by SiLU and a per-channel
scale/shift computed from the step embedding, and a final 1x1 projection
to RGB.  Its input is the noisy image concatenated with a 2-channel
coordinate map, which is never noised.

Training adds a spatially constant per-channel offset ``eps_g`` to the
noisy input while still regressing only the per-pixel noise.  Sampling is
plain ancestral DDPM sampling and has no knowledge of ``eps_g``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import receptive

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step DDPM coefficients, stored in float64.  Index ``t - 1`` holds step ``t``."""

    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor
    sigma: torch.Tensor
    beta_start: float
    beta_end: float

    @property
    def T(self) -> int:
        return len(self.beta)

    def params(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule from ``beta_start`` to ``beta_end`` over ``T`` steps."""
    if not isinstance(T, int) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=torch.cumprod(alpha, 0),
                         sigma=beta.sqrt(), beta_start=beta_start, beta_end=beta_end)


def _gather(coef: torch.Tensor, t: torch.Tensor | int, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, device=coef.device).long().reshape(-1)
    return coef[t - 1].to(like.dtype).to(like.device).view(-1, *([1] * (like.dim() - 1)))


def _check_steps(t: torch.Tensor | int, sched: NoiseSchedule) -> None:
    t = torch.as_tensor(t)
    if (t < 1).any() or (t > sched.T).any():
        raise ValueError(f"step out of range 1..{sched.T}: {t.tolist()}")


def global_noise(batch: int, channels: int, sigma_g: float, generator: torch.Generator | None = None,
                 dtype=torch.float32) -> torch.Tensor:
    """Draw one offset per (image, channel); shape (B, C, 1, 1) so it broadcasts over pixels."""
    return sigma_g * torch.randn(batch, channels, 1, 1, generator=generator, dtype=dtype)


def forward_diffuse(x0: torch.Tensor, t: torch.Tensor | int, eps1: torch.Tensor,
                    eps_g: torch.Tensor | float, sched: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps1 + eps_g."""
    _check_steps(t, sched)
    ab = _gather(sched.alpha_bar, t, x0)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps1 + eps_g


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10_000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None].to(t.device)
    return torch.cat([args.sin(), args.cos()], dim=1)


class Denoiser(nn.Module):
    """Noise predictor with a receptive field of exactly ``level`` x ``level`` pixels."""

    def __init__(self, level: int, width: int = 64, in_channels: int = 5, out_channels: int = 3,
                 emb_dim: int = 64):
        super().__init__()
        if level < 3 or level % 2 == 0:
            raise ValueError(f"level must be odd and >= 3, got {level}")
        self.level = level
        self.width = width
        self.depth = (level - 1) // 2
        self.emb_dim = emb_dim
        self.convs = nn.ModuleList(
            nn.Conv2d(in_channels if i == 0 else width, width, 3, stride=1, padding=1)
            for i in range(self.depth)
        )
        self.time_mlp = nn.Sequential(
            nn.Linear(emb_dim, 2 * emb_dim), nn.SiLU(),
            nn.Linear(2 * emb_dim, 2 * width * self.depth),
        )
        self.out = nn.Conv2d(width, out_channels, 1)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, device=x.device).reshape(-1).expand(x.shape[0])
        mod = self.time_mlp(timestep_embedding(t, self.emb_dim).to(x.dtype))
        mod = mod.view(x.shape[0], self.depth, 2, self.width, 1, 1)
        h = x
        for i, conv in enumerate(self.convs):
            h = F.silu(conv(h))
            h = h * (1 + mod[:, i, 0]) + mod[:, i, 1]
        return self.out(h)


def _with_coord(x: torch.Tensor, coord: torch.Tensor) -> torch.Tensor:
    if coord.dim() == 3:
        coord = coord.unsqueeze(0)
    coord = coord.to(x.dtype).to(x.device).expand(x.shape[0], -1, -1, -1)
    return torch.cat([x, coord], dim=1)


def training_step_loss(denoiser: Callable, x0: torch.Tensor, coord: torch.Tensor,
                       sched: NoiseSchedule, sigma_g: float,
                       generator: torch.Generator | None = None,
                       t: torch.Tensor | None = None) -> torch.Tensor:
    """Noise-regression loss with global noise, averaged over all elements.

    The regression target is ``eps1`` only; ``eps_g`` merely perturbs the
    network input.
    """
    b = x0.shape[0]
    if t is None:
        t = torch.randint(1, sched.T + 1, (b,), generator=generator)
    eps1 = torch.randn(x0.shape, generator=generator, dtype=x0.dtype).to(x0.device)
    eps_g = global_noise(b, x0.shape[1], sigma_g, generator, dtype=x0.dtype).to(x0.device)
    xt = forward_diffuse(x0, t, eps1, eps_g, sched)
    pred = denoiser(_with_coord(xt, coord), t.to(x0.device))
    return F.mse_loss(pred, eps1)


@torch.no_grad()
def sample(denoiser: Callable, sched: NoiseSchedule, coord: torch.Tensor,
           out_shape: tuple[int, ...], generator: torch.Generator | None = None,
           dtype: torch.dtype | None = None, device: torch.device | str = "cpu",
           callback: Callable[[int, torch.Tensor], None] | None = None) -> torch.Tensor:
    """Ancestral DDPM sampling from x_T ~ N(0, I) down to x_0.

    ``callback(t, x)`` is invoked with x_T (t = T) and after every update with
    x_{t-1}.  The result is clamped to [-1, 1] only at the very end.
    """
    if dtype is None:
        dtype = next(denoiser.parameters()).dtype if isinstance(denoiser, nn.Module) else torch.float32
    x = torch.randn(out_shape, generator=generator, dtype=dtype).to(device)
    if callback is not None:
        callback(sched.T, x)
    for t in range(sched.T, 0, -1):
        alpha = sched.alpha[t - 1].item()
        ab = sched.alpha_bar[t - 1].item()
        eps = denoiser(_with_coord(x, coord), torch.full((out_shape[0],), t, dtype=torch.long, device=device))
        x = (x - (1 - alpha) / math.sqrt(1 - ab) * eps) / math.sqrt(alpha)
        if t > 1:
            z = torch.randn(out_shape, generator=generator, dtype=dtype).to(device)
            x = x + sched.sigma[t - 1].item() * z
        if callback is not None:
            callback(t - 1, x)
    if not torch.isfinite(x).all():
        raise FloatingPointError("sampler produced non-finite values; check the denoiser weights")
    return x.clamp(-1.0, 1.0)


def receptive_field_probe(denoiser: Denoiser, level: int | None = None, strict: bool = True,
                          seed: int = 0) -> receptive.RFReport:
    """Check that the centre output pixel depends on exactly a level x level window."""
    n = denoiser.level if level is None else level
    size = n + 4  # a two-pixel ring on each side catches any leak
    center = size // 2
    step = torch.tensor([1], dtype=torch.long)
    return receptive.probe(
        denoiser, expected=n, in_channels=denoiser.convs[0].in_channels, size=size,
        out_index=(center, center), window_origin=(center - n // 2, center - n // 2),
        forward=lambda m, b: m(b, step), seed=seed, strict=strict,
    )


# -- training ----------------------------------------------------------------

def random_crops(images: torch.Tensor, coord: torch.Tensor, size: int, count: int,
                 generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample ``count`` (image, coord) crops, image and coords cut at the same position."""
    n, _, h, w = images.shape
    idx = torch.randint(0, n, (count,), generator=generator)
    if size <= 0 or (size >= h and size >= w):
        return images[idx], coord.unsqueeze(0).expand(count, -1, -1, -1)
    tops = torch.randint(0, h - size + 1, (count,), generator=generator)
    lefts = torch.randint(0, w - size + 1, (count,), generator=generator)
    xs = torch.stack([images[i, :, a:a + size, b:b + size] for i, a, b in zip(idx, tops, lefts)])
    cs = torch.stack([coord[:, a:a + size, b:b + size] for a, b in zip(tops, lefts)])
    return xs, cs


def train_patchdiff(images: torch.Tensor, level: int, gcfg, generator: torch.Generator,
                    device: str | torch.device = "cpu",
                    log: Callable[[int, float, float], None] | None = None) -> tuple[Denoiser, list[float]]:
    """Train one level-``level`` denoiser on ``images`` (N, 3, H, W) in [-1, 1].

    ``gcfg`` is a :class:`grad_ad.config.GeneratorConfig`.  Because the
    receptive field is bounded, training on random crops of image and
    coordinate map is equivalent to full-image training away from borders.
    """
    from .detector import one_cycle
    from .patchset import make_coordinate_map

    sched = build_schedule(gcfg.steps, gcfg.beta_start, gcfg.beta_end)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=generator)))
        model = Denoiser(level, gcfg.width).to(device)
    opt = torch.optim.AdamW(model.parameters(), lr=gcfg.lr, weight_decay=gcfg.weight_decay)
    lr_sched = one_cycle(opt, gcfg.train_steps)
    coord = make_coordinate_map(images.shape[-1], images.shape[-2])
    losses = []
    model.train()
    for step in range(gcfg.train_steps):
        x0, c = random_crops(images, coord, gcfg.train_crop, gcfg.batch_size, generator)
        loss = training_step_loss(model, x0.to(device), c.to(device), sched, gcfg.sigma_g, generator)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite generator loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        lr_sched.step()
        losses.append(loss.item())
        if log is not None:
            log(step, loss.item(), opt.param_groups[0]["lr"])
    model.eval()
    return model, losses


def save_checkpoint(path: str | Path, model: Denoiser, sched: NoiseSchedule, **meta) -> None:
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "kind": "patchdiff",
        "level": model.level,
        "width": model.width,
        "schedule": sched.params(),
        "state_dict": model.state_dict(),
        **meta,
    }, path)


def load_checkpoint(path: str | Path, map_location="cpu") -> tuple[Denoiser, NoiseSchedule, dict]:
    ckpt = torch.load(path, map_location=map_location, weights_only=False)
    if ckpt.get("kind") != "patchdiff" or ckpt.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path} is not a version-{CHECKPOINT_VERSION} PatchDiff checkpoint")
    model = Denoiser(ckpt["level"], ckpt["width"])
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    s = ckpt["schedule"]
    return model, build_schedule(s["T"], s["beta_start"], s["beta_end"]), ckpt
