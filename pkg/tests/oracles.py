"""Independent reference implementations used as test oracles."""

from __future__ import annotations

import itertools
import math

import numpy as np
import torch
import torch.nn.functional as F

# -- detector --------------------------------------------------------------------

DETECTOR_TABLE = [  # (kernel, stride, in, out), straight from the architecture table
    (4, 2, 5, 64), (4, 2, 64, 128), (3, 1, 128, 256), (3, 1, 256, 512),
    (3, 1, 512, 256), (1, 1, 256, 256), (1, 1, 256, 256), (1, 1, 256, 1),
]


def detector_param_count() -> int:
    return sum(k * k * cin * cout + cout for k, _, cin, cout in DETECTOR_TABLE)


def detector_out_side(n: int) -> int:
    n = (n - 4) // 2 + 1
    n = (n - 4) // 2 + 1
    return n - 2 - 2 - 2


def _relu_pattern(detector, x):
    pattern, z = [], x
    for conv in detector.layers[:-1]:
        z = conv(z)
        pattern.append((z > 0).flatten())
        z = F.relu(z)
    return torch.cat(pattern)


@torch.no_grad()
def finite_difference_check(detector, x: torch.Tensor, grad: torch.Tensor, n_coords: int,
                            generator: torch.Generator, h: float = 1e-3):
    """Compare ``grad`` (d sigmoid(logit) / dx) with central differences at random coordinates.

    Central differences only approximate the derivative where the network is
    smooth on [x - h, x + h]; coordinates whose perturbation flips any ReLU
    are skipped and redrawn.  Returns (relative errors, number skipped).
    """
    detector = detector.double()
    x = x.double()
    base = _relu_pattern(detector, x)
    errors, skipped = [], 0
    while len(errors) < n_coords:
        i = int(torch.randint(0, x.numel(), (1,), generator=generator))
        e = torch.zeros(x.numel(), dtype=torch.float64)
        e[i] = h
        e = e.view_as(x)
        if not (torch.equal(_relu_pattern(detector, x + e), base)
                and torch.equal(_relu_pattern(detector, x - e), base)):
            skipped += 1
            continue
        fd = (torch.sigmoid(detector(x + e)) - torch.sigmoid(detector(x - e))).item() / (2 * h)
        g = grad.flatten()[i].item()
        errors.append(abs(fd - g) / max(abs(g), abs(fd), 1e-300) if fd != g else 0.0)
        if skipped > 20 * n_coords:
            raise RuntimeError("could not find enough smooth coordinates")
    return np.array(errors), skipped


# -- diffusion ----------------------------------------------------------------------

@torch.no_grad()
def reference_ddpm(eps_model, betas: torch.Tensor, coord: torch.Tensor, shape, generator: torch.Generator):
    """Ancestral DDPM sampling written in posterior-mean form.

    x0_hat = (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)
    mu     = sqrt(abar_{t-1}) beta_t / (1 - abar_t) * x0_hat
             + sqrt(alpha_t) (1 - abar_{t-1}) / (1 - abar_t) * x_t
    x_{t-1} = mu + sqrt(beta_t) z   (no noise at the last step)

    Returns the trajectory [x_T, ..., x_0] without any clamping.
    """
    betas = betas.double()
    T = len(betas)
    abar = [1.0]
    for b in betas.tolist():
        abar.append(abar[-1] * (1 - b))
    x = torch.randn(shape, generator=generator, dtype=torch.float64)
    c = coord.double().unsqueeze(0).expand(shape[0], -1, -1, -1)
    traj = [x]
    for t in range(T, 0, -1):
        beta = betas[t - 1].item()
        a, ab, ab_prev = 1 - beta, abar[t], abar[t - 1]
        eps = eps_model(torch.cat([x, c], 1), torch.full((shape[0],), t, dtype=torch.long))
        x0_hat = (x - math.sqrt(1 - ab) * eps) / math.sqrt(ab)
        mu = (math.sqrt(ab_prev) * beta / (1 - ab)) * x0_hat + (math.sqrt(a) * (1 - ab_prev) / (1 - ab)) * x
        if t > 1:
            x = mu + math.sqrt(beta) * torch.randn(shape, generator=generator, dtype=torch.float64)
        else:
            x = mu
        traj.append(x)
    return traj


# -- AU-ROC -------------------------------------------------------------------------

def mann_whitney(normal, anomalous) -> float:
    """P(s_a > s_n) + 0.5 P(s_a = s_n) by enumerating every pair."""
    wins = 0.0
    for a, n in itertools.product(anomalous, normal):
        wins += 1.0 if a > n else 0.5 if a == n else 0.0
    return wins / (len(normal) * len(anomalous))


# -- synthetic grammar ----------------------------------------------------------------

def classify_glyph(mask: np.ndarray) -> str:
    """Name a binary glyph silhouette: rings have a hole; the rest differ in bounding-box fill."""
    from scipy import ndimage

    filled = ndimage.binary_fill_holes(mask)
    if filled.sum() - mask.sum() > 0.1 * filled.sum():
        return "ring"
    ys, xs = np.nonzero(mask)
    fill = mask.sum() / ((np.ptp(ys) + 1) * (np.ptp(xs) + 1))
    # ideal fills: square 1, disc pi/4, diamond 1/2
    return min({"square": 1.0, "circle": math.pi / 4, "diamond": 0.5}.items(),
               key=lambda kv: abs(kv[1] - fill))[0]


def grammar_violations(img: np.ndarray, grid: int, palette: np.ndarray, shapes: tuple[str, ...],
                       background: np.ndarray) -> list[str]:
    """Check the glyph grammar of an (H, W, 3) uint8 image from its pixels alone.

    Every cell must hold exactly one glyph near its centre, coloured with the
    palette entry of its row and shaped as the entry of its column.
    """
    from scipy import ndimage

    cell = img.shape[0] / grid
    rgb = img.astype(np.float64) / 255
    fg = np.abs(rgb - background).max(axis=-1) > 0.15
    problems = []
    for r in range(grid):
        for c in range(grid):
            y0, y1, x0, x1 = int(r * cell), int((r + 1) * cell), int(c * cell), int((c + 1) * cell)
            mask = fg[y0:y1, x0:x1]
            labels, n = ndimage.label(mask)
            sizes = ndimage.sum(mask, labels, range(1, n + 1)) if n else []
            big = [i + 1 for i, sz in enumerate(sizes) if sz > 0.02 * cell * cell]
            if len(big) != 1:
                problems.append(f"cell ({r},{c}) holds {len(big)} glyphs")
                continue
            glyph = labels == big[0]
            ys, xs = np.nonzero(glyph)
            if abs(ys.mean() / cell - 0.5) > 0.15 or abs(xs.mean() / cell - 0.5) > 0.15:
                problems.append(f"cell ({r},{c}) glyph off centre")
            colour = np.median(rgb[y0:y1, x0:x1][glyph], axis=0)
            if np.abs(colour - palette[r % len(palette)]).max() > 0.1:
                problems.append(f"cell ({r},{c}) colour breaks the row rule")
            shape = classify_glyph(glyph)
            if shape != shapes[c % len(shapes)]:
                problems.append(f"cell ({r},{c}) shape {shape} breaks the column rule")
    return problems
