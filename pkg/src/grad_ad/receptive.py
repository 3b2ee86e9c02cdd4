"""Empirical receptive-field measurement by single-pixel perturbation."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Callable

import torch


class ReceptiveFieldError(AssertionError):
    pass


@dataclass
class RFReport:
    expected: int
    measured: int  # side of the bounding box of influencing pixels
    outside_changes: int  # pixels beyond the expected window that moved the output
    inside_silent: int  # pixels inside the window that did not
    passed: bool

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} receptive field: measured {self.measured}, expected {self.expected} "
                f"(outside changes={self.outside_changes}, silent inside={self.inside_silent})")


@torch.no_grad()
def influence_mask(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
                   out_index: tuple[int, int], delta: torch.Tensor, chunk: int = 64) -> torch.Tensor:
    """Return an (H, W) bool map of input pixels whose perturbation changes ``fn(x)`` at ``out_index``.

    ``x`` has shape (C, H, W).  Every pixel is perturbed by ``delta`` (shape (C,))
    in its own copy of the input; the comparison is exact (no tolerance).
    """
    c, h, w = x.shape
    i, j = out_index
    changed = torch.zeros(h * w, dtype=torch.bool)
    for start in range(0, h * w, chunk):
        idx = torch.arange(start, min(start + chunk, h * w))
        # row 0 stays unperturbed: kernels may round differently at other batch sizes
        batch = x.expand(len(idx) + 1, c, h, w).clone()
        batch[torch.arange(1, len(idx) + 1), :, idx // w, idx % w] += delta
        out = fn(batch)[:, :, i, j]
        changed[idx] = (out[1:] != out[:1]).any(dim=1)
    return changed.view(h, w)


def probe(model: torch.nn.Module, expected: int, in_channels: int, size: int,
          out_index: tuple[int, int], window_origin: tuple[int, int],
          forward: Callable[[torch.nn.Module, torch.Tensor], torch.Tensor] | None = None,
          seed: int = 0, strict: bool = True) -> RFReport:
    """Measure which pixels of a ``size`` x ``size`` input influence one output unit.

    The model is copied to float64 so that every output element is computed
    by a direct summation over its own receptive field only; some float32
    convolution kernels (Winograd tiles) mix neighbouring inputs into rounding.
    """
    gen = torch.Generator().manual_seed(seed)
    m = copy.deepcopy(model).double().eval()
    x = torch.randn(in_channels, size, size, generator=gen, dtype=torch.float64)
    delta = 0.5 + torch.rand(in_channels, generator=gen, dtype=torch.float64)
    fn = (lambda b: forward(m, b)) if forward is not None else m
    mask = influence_mask(fn, x, out_index, delta)

    window = torch.zeros_like(mask)
    r0, c0 = window_origin
    window[r0:r0 + expected, c0:c0 + expected] = True
    rows = mask.any(dim=1).nonzero()
    cols = mask.any(dim=0).nonzero()
    measured = 0
    if len(rows):
        measured = int(max(rows[-1] - rows[0] + 1, cols[-1] - cols[0] + 1))
    outside = int((mask & ~window).sum())
    silent = int((window & ~mask).sum())
    report = RFReport(expected, measured, outside, silent,
                      passed=(measured == expected and outside == 0 and silent == 0))
    if strict and not report.passed:
        raise ReceptiveFieldError(str(report))
    return report
