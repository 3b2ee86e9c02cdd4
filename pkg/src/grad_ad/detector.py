"""Lightweight fully-convolutional patch detector and its training loop."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import receptive
from .config import DetectorConfig, LossConfig
from .patchset import PATCH, build_batch
from .reweighting import MemoryBank, WeightDump, noisy_weight, rbce_loss, tail_weights

CHECKPOINT_VERSION = 1

# (kernel, stride, out_channels); no padding anywhere, ReLU after all but the last.
DETECTOR_LAYERS = (
    (4, 2, 64), (4, 2, 128), (3, 1, 256), (3, 1, 512),
    (3, 1, 256), (1, 1, 256), (1, 1, 256), (1, 1, 1),
)
FEATURE_DIM = 256
DECODER_WIDTHS = (256, 256, 256, 5 * PATCH * PATCH)


@dataclass(frozen=True)
class LevelConfig:
    detector_level: int
    input_size: int
    patchdiff_levels: tuple[int, ...]

    @property
    def effective_level(self) -> int:
        return PATCH * 256 // self.input_size


LEVEL_CONFIGS = {
    34: LevelConfig(34, 256, (5, 9, 13)),
    68: LevelConfig(68, 128, (5, 9, 13)),
    136: LevelConfig(136, 64, (9, 13, 17)),
}


def output_size(n: int) -> int:
    """Spatial size of the logit map for an n-pixel input side."""
    for k, s, _ in DETECTOR_LAYERS:
        n = (n - k) // s + 1
    return n


class PatchDetector(nn.Module):
    def __init__(self, in_channels: int = 5):
        super().__init__()
        layers, c = [], in_channels
        for k, s, out in DETECTOR_LAYERS:
            layers.append(nn.Conv2d(c, out, k, stride=s, padding=0))
            c = out
        self.layers = nn.ModuleList(layers)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Output of layer 7 (after ReLU): the last latent representation, 256 channels."""
        if x.shape[-1] < PATCH or x.shape[-2] < PATCH:
            raise ValueError(f"input {tuple(x.shape[-2:])} is smaller than {PATCH}x{PATCH}")
        for conv in self.layers[:-1]:
            x = F.relu(conv(x))
        return x

    def forward_with_features(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        z = self.features(x)
        return self.layers[-1](z), z

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_with_features(x)[0]


class PatchDecoder(nn.Module):
    """1x1-conv MLP mapping a 256-d feature back to a 5x34x34 patch."""

    def __init__(self):
        super().__init__()
        widths = (FEATURE_DIM,) + DECODER_WIDTHS
        self.layers = nn.ModuleList(nn.Conv2d(a, b, 1) for a, b in zip(widths[:-1], widths[1:]))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() == 2:
            z = z[:, :, None, None]
        for conv in self.layers[:-1]:
            z = F.relu(conv(z))
        z = self.layers[-1](z)
        return z.reshape(z.shape[0], 5, PATCH, PATCH)


def forward_logits(detector: PatchDetector, x: torch.Tensor) -> torch.Tensor:
    squeeze = x.dim() == 3
    out = detector(x[None] if squeeze else x)
    return out[0] if squeeze else out


def extract_features(detector: PatchDetector, x: torch.Tensor) -> torch.Tensor:
    squeeze = x.dim() == 3
    out = detector.features(x[None] if squeeze else x)
    return out[0] if squeeze else out


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def receptive_field_probe(detector: PatchDetector, strict: bool = True, seed: int = 0) -> receptive.RFReport:
    """Probe the centre logit of a 3x3 map (42x42 input): its window starts at pixel 4."""
    return receptive.probe(detector, expected=PATCH, in_channels=detector.layers[0].in_channels,
                           size=PATCH + 8, out_index=(1, 1), window_origin=(4, 4),
                           seed=seed, strict=strict)


# -- losses --------------------------------------------------------------------

def feat_reg_loss(detector: PatchDetector, decoder: PatchDecoder, patches: torch.Tensor,
                  sigma_c: float, sigma_z: float, generator: torch.Generator | None = None) -> torch.Tensor:
    """Denoising-autoencoder loss: mean over patches of ||R(Z(c + e_c) + e_z) - c||^2."""
    noisy = patches + sigma_c * torch.randn(patches.shape, generator=generator).to(patches)
    z = detector.features(noisy)
    z = z + sigma_z * torch.randn(z.shape, generator=generator).to(z)
    recon = decoder(z)
    return (recon - patches).pow(2).flatten(1).sum(1).mean()


def grad_reg_loss(detector: Callable, pos_patches: torch.Tensor,
                  decision: Callable[[torch.Tensor], torch.Tensor] = torch.sigmoid,
                  create_graph: bool = True) -> torch.Tensor:
    """Mean over positive patches of ||d f(c) / d c||^2, with f = decision(detector(c)).

    With ``create_graph`` the result is differentiable w.r.t. the detector
    weights (double backpropagation).
    """
    x = pos_patches.detach().requires_grad_(True)
    f = decision(detector(x))
    (grad,) = torch.autograd.grad(f.sum(), x, create_graph=create_graph)
    loss = grad.pow(2).flatten(1).sum(1).mean()
    if create_graph and isinstance(detector, nn.Module) and not loss.requires_grad:
        raise RuntimeError("gradient penalty is not differentiable w.r.t. the detector weights")
    return loss


def total_loss(l_rbce, l_feat, l_grad, alpha_feat: float, alpha_grad: float):
    return l_rbce + alpha_feat * l_feat + alpha_grad * l_grad


def one_cycle(optimizer: torch.optim.Optimizer, total_steps: int, warmup_frac: float = 0.1,
              final_div: float = 100.0) -> torch.optim.lr_scheduler.LambdaLR:
    """Linear warmup from peak/final_div to peak, then cosine decay back to peak/final_div."""
    warm = max(1, round(warmup_frac * total_steps))
    floor = 1.0 / final_div

    def factor(step: int) -> float:
        if step < warm:
            return floor + (1 - floor) * step / warm
        progress = min(1.0, (step - warm) / max(1, total_steps - warm))
        return floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * progress))

    return torch.optim.lr_scheduler.LambdaLR(optimizer, factor)


# -- training ------------------------------------------------------------------

@dataclass
class TrainResult:
    detector: PatchDetector
    decoder: PatchDecoder
    steps: int
    history: list[dict] = field(default_factory=list)


def steps_per_epoch(n_normal: int, images_per_group: int) -> int:
    return max(1, math.ceil(n_normal / images_per_group))


def train_detector(level_cfg: LevelConfig, normal_set: list[torch.Tensor],
                   generated_sets: dict[int, list[torch.Tensor]], dcfg: DetectorConfig,
                   generator: torch.Generator, device: str | torch.device = "cpu",
                   log: Callable[[dict], None] | None = None,
                   weight_dump: WeightDump | None = None,
                   total_steps: int | None = None) -> TrainResult:
    """Train one detector for ``dcfg.epochs`` epochs.

    One epoch is ``ceil(len(normal_set) / images_per_group)`` steps.  Each step
    builds a fresh batch, scores it, weights it against the memory banks as
    they were before the step, takes an optimiser step, and then pushes the
    batch features into the banks.
    """
    missing = [lv for lv in level_cfg.patchdiff_levels if lv not in generated_sets]
    if missing:
        raise ValueError(f"detector level {level_cfg.detector_level} needs generated levels {missing}")
    sources = {lv: generated_sets[lv] for lv in level_cfg.patchdiff_levels}
    lc: LossConfig = dcfg.loss
    if total_steps is None:
        total_steps = dcfg.epochs * steps_per_epoch(len(normal_set), dcfg.images_per_group)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=generator)))
        detector = PatchDetector().to(device)
        decoder = PatchDecoder().to(device)
    params = list(detector.parameters()) + list(decoder.parameters())
    opt = torch.optim.AdamW(params, lr=dcfg.lr, weight_decay=dcfg.weight_decay)
    sched = one_cycle(opt, total_steps, dcfg.warmup_frac, dcfg.final_div)
    bank_pos = MemoryBank(dcfg.bank_size, FEATURE_DIM)
    bank_neg = MemoryBank(dcfg.bank_size, FEATURE_DIM)
    history = []

    detector.train()
    decoder.train()
    for step in range(total_steps):
        batch = build_batch(normal_set, sources, generator, input_size=level_cfg.input_size,
                            augment_normal=dcfg.augment_normal, augment_generated=dcfg.augment_generated,
                            patches_per_group=dcfg.patches_per_group, images_per_group=dcfg.images_per_group)
        x = batch.patches.to(device)
        pos = batch.positive.to(device)
        logits, feats = detector.forward_with_features(x)
        probs = torch.sigmoid(logits.flatten())
        z = feats.flatten(1).detach().cpu()
        pos_cpu = pos.cpu()
        zp, zn = z[pos_cpu], z[~pos_cpu]
        beta, cold = lc.beta_density, lc.cold_start
        ones_p, ones_n = torch.ones(len(zp)), torch.ones(len(zn))
        w_tail_pos = tail_weights(zp, bank_pos, beta, cold) if lc.use_tail else ones_p
        w_tail_neg = tail_weights(zn, bank_neg, beta, cold) if lc.use_tail else ones_n
        w_noisy_neg = noisy_weight(zn, bank_pos, beta, cold) if lc.use_noisy else ones_n

        l_rbce = rbce_loss(probs[pos], probs[~pos], w_tail_pos.to(device), w_tail_neg.to(device),
                           w_noisy_neg.to(device))
        zero = l_rbce.new_zeros(())
        l_feat = (feat_reg_loss(detector, decoder, x, lc.sigma_c, lc.sigma_z, generator)
                  if lc.alpha_feat > 0 else zero)
        l_grad = grad_reg_loss(detector, x[pos]) if lc.alpha_grad > 0 else zero
        loss = total_loss(l_rbce, l_feat, l_grad, lc.alpha_feat, lc.alpha_grad)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite detector loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        lr = opt.param_groups[0]["lr"]
        sched.step()

        if weight_dump is not None:
            w_noisy = torch.ones(len(z))
            w_tail = torch.ones(len(z))
            w_noisy[~pos_cpu] = w_noisy_neg
            w_tail[pos_cpu], w_tail[~pos_cpu] = w_tail_pos, w_tail_neg
            weight_dump.write(step, batch.provenance, w_noisy, w_tail)
        bank_pos.push(zp)
        bank_neg.push(zn)
        row = {"step": step, "l_rbce": l_rbce.item(), "l_feat": l_feat.item(), "l_grad": l_grad.item(),
               "lr": lr}
        history.append(row)
        if log is not None:
            log(row)

    detector.eval()
    decoder.eval()
    return TrainResult(detector, decoder, total_steps, history)


def save_checkpoint(path: str | Path, detector: PatchDetector, level_cfg: LevelConfig,
                    dcfg: DetectorConfig, steps: int, **meta) -> None:
    """Write the inference artifact.  The decoder is deliberately not included."""
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "kind": "detector",
        "level_config": asdict(level_cfg),
        "loss_config": asdict(dcfg.loss),
        "optimizer": {"name": "AdamW", "lr": dcfg.lr, "weight_decay": dcfg.weight_decay,
                      "schedule": "one-cycle", "warmup_frac": dcfg.warmup_frac,
                      "final_div": dcfg.final_div},
        "steps": steps,
        "state_dict": detector.state_dict(),
        **meta,
    }, path)


def load_checkpoint(path: str | Path, map_location="cpu") -> tuple[PatchDetector, LevelConfig, dict]:
    ckpt = torch.load(path, map_location=map_location, weights_only=False)
    if ckpt.get("kind") != "detector" or ckpt.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path} is not a version-{CHECKPOINT_VERSION} detector checkpoint")
    det = PatchDetector()
    det.load_state_dict(ckpt["state_dict"])
    det.eval()
    lc = ckpt["level_config"]
    return det, LevelConfig(lc["detector_level"], lc["input_size"], tuple(lc["patchdiff_levels"])), ckpt
