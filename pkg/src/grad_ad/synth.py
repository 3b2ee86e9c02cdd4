"""Synthetic glyph-grid dataset with structural and logical anomalies.

Layout grammar of a normal image (grid of g x g cells):

* every cell holds exactly one glyph, near the cell centre;
* the glyph colour is fixed by its row (``PALETTE[row % 4]``);
* the glyph shape is fixed by its column (``SHAPES[col % 4]``).

Structural anomalies corrupt local texture (noise blob, scratch, stain).
Logical anomalies keep every glyph locally plausible but break the grammar
(two glyphs swapped, a glyph missing, a glyph duplicated into another row).
Masks are the pixels whose 8-bit value differs from the clean rendering.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .config import SynthConfig

SyntheticSpec = SynthConfig

PALETTE = np.array([
    [0.85, 0.20, 0.20],
    [0.20, 0.65, 0.25],
    [0.20, 0.35, 0.85],
    [0.90, 0.70, 0.10],
])
SHAPES = ("square", "circle", "diamond", "ring")
BACKGROUND = np.array([0.86, 0.84, 0.80])
STRUCTURAL = ("noise", "scratch", "stain")
LOGICAL = ("swap", "missing", "duplicate")
SUPERSAMPLE = 4


@dataclass
class Glyph:
    row: int
    col: int
    shape: str
    color: np.ndarray
    cx: float
    cy: float
    radius: float


def _inside(shape: str, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.85 * r
    if shape == "circle":
        return dx ** 2 + dy ** 2 <= r ** 2
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= 1.15 * r
    if shape == "ring":
        d2 = dx ** 2 + dy ** 2
        return (d2 <= r ** 2) & (d2 >= (0.5 * r) ** 2)
    raise ValueError(f"unknown shape {shape!r}")


def coverage(glyph: Glyph, size: int) -> np.ndarray:
    """Fraction of each pixel covered by the glyph, from a supersampled grid."""
    cov = np.zeros((size, size))
    r = glyph.radius * 1.2
    y0, y1 = max(0, int(glyph.cy - r) - 1), min(size, int(glyph.cy + r) + 2)
    x0, x1 = max(0, int(glyph.cx - r) - 1), min(size, int(glyph.cx + r) + 2)
    sub = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    ys = (np.arange(y0, y1)[:, None] + sub[None]).ravel()
    xs = (np.arange(x0, x1)[:, None] + sub[None]).ravel()
    hit = _inside(glyph.shape, xs[None] - glyph.cx, ys[:, None] - glyph.cy, glyph.radius)
    hit = hit.reshape(y1 - y0, SUPERSAMPLE, x1 - x0, SUPERSAMPLE).mean(axis=(1, 3))
    cov[y0:y1, x0:x1] = hit
    return cov


def sample_layout(spec: SynthConfig, rng: np.random.Generator) -> list[Glyph]:
    cell = spec.image_size / spec.grid
    glyphs = []
    for row in range(spec.grid):
        for col in range(spec.grid):
            jitter = rng.uniform(-0.06, 0.06, size=2) * cell
            shade = rng.uniform(-0.03, 0.03, size=3)
            glyphs.append(Glyph(
                row, col, SHAPES[col % len(SHAPES)],
                np.clip(PALETTE[row % len(PALETTE)] + shade, 0, 1),
                (col + 0.5) * cell + jitter[0], (row + 0.5) * cell + jitter[1],
                0.28 * cell * rng.uniform(0.95, 1.05),
            ))
    return glyphs


def render(glyphs: list[Glyph], background: np.ndarray) -> np.ndarray:
    """Composite glyphs over an (H, W, 3) background; returns float RGB in [0, 1]."""
    img = background.copy()
    for g in glyphs:
        a = coverage(g, img.shape[0])[..., None]
        img = img * (1 - a) + g.color * a
    return np.clip(img, 0, 1)


def sample_background(spec: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    s = spec.image_size
    base = BACKGROUND + rng.uniform(-0.02, 0.02)
    return np.clip(base + rng.normal(0, 0.015, size=(s, s, 3)), 0, 1)


def quantize(img: np.ndarray) -> np.ndarray:
    return (img * 255).round().astype(np.uint8)


# -- anomaly injectors -------------------------------------------------------

def _ellipse(size: int, rng: np.random.Generator) -> np.ndarray:
    cy, cx = rng.uniform(0.15, 0.85, size=2) * size
    ry, rx = rng.uniform(0.05, 0.10, size=2) * size
    yy, xx = np.mgrid[:size, :size]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1


def inject_structural(img: np.ndarray, kind: str, rng: np.random.Generator) -> np.ndarray:
    size = img.shape[0]
    out = img.copy()
    if kind == "noise":
        region = _ellipse(size, rng)
        speckle = rng.uniform(0, 1, size=img.shape)
        out[region] = 0.3 * img[region] + 0.7 * speckle[region]
    elif kind == "scratch":
        length = rng.uniform(0.2, 0.35) * size
        angle = rng.uniform(0, np.pi)
        y0, x0 = rng.uniform(0.2, 0.8, size=2) * size
        t = np.linspace(0, 1, int(length * 4))
        half = max(1.0, size / 128)
        yy, xx = np.mgrid[:size, :size]
        region = np.zeros((size, size), dtype=bool)
        for py, px in zip(y0 + t * length * np.sin(angle), x0 + t * length * np.cos(angle)):
            region |= (np.abs(yy - py) <= half) & (np.abs(xx - px) <= half)
        out[region] = np.array([0.12, 0.10, 0.10]) + rng.normal(0, 0.02, size=(region.sum(), 3))
    elif kind == "stain":
        region = _ellipse(size, rng)
        tint = rng.uniform(0.2, 0.6, size=3)
        out[region] = 0.45 * img[region] + 0.55 * tint
    else:
        raise ValueError(f"unknown structural injector {kind!r}")
    return np.clip(out, 0, 1)


def inject_logical(glyphs: list[Glyph], kind: str, spec: SynthConfig,
                   rng: np.random.Generator) -> list[Glyph]:
    glyphs = [dataclasses.replace(g) for g in glyphs]
    by_cell = {(g.row, g.col): i for i, g in enumerate(glyphs)}
    g = spec.grid
    if kind == "missing":
        glyphs.pop(int(rng.integers(len(glyphs))))
    elif kind == "swap":
        r1, r2 = rng.choice(g, size=2, replace=False)
        c1, c2 = rng.choice(g, size=2, replace=False)
        a, b = glyphs[by_cell[r1, c1]], glyphs[by_cell[r2, c2]]
        a.shape, b.shape = b.shape, a.shape
        a.color, b.color = b.color, a.color
    elif kind == "duplicate":
        r1, r2 = rng.choice(g, size=2, replace=False)
        c1, c2 = rng.integers(g), rng.integers(g)
        target, source = glyphs[by_cell[r1, c1]], glyphs[by_cell[r2, c2]]
        target.shape, target.color = source.shape, source.color.copy()
    else:
        raise ValueError(f"unknown logical injector {kind!r}")
    return glyphs


def check_spec(spec: SynthConfig) -> None:
    for kind in spec.structural:
        if kind not in STRUCTURAL:
            raise ValueError(f"unknown structural injector {kind!r}")
    for kind in spec.logical:
        if kind not in LOGICAL:
            raise ValueError(f"unknown logical injector {kind!r}")
        if kind in ("swap", "duplicate") and spec.grid < 2:
            raise ValueError(f"injector {kind!r} cannot fire on a {spec.grid}x{spec.grid} grid")
    if spec.image_size < 34 or spec.grid < 1:
        raise ValueError("synthetic images must be at least 34 pixels with a grid of at least 1")
    if not 0 <= spec.anomaly_ratio <= 1:
        raise ValueError("anomaly_ratio must lie in [0, 1]")
    if spec.anomaly_ratio > 0 and not (spec.structural or spec.logical):
        raise ValueError("anomalies requested but no injectors configured")


def _save(arr: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def synth_generate(spec: SynthConfig, root: str | Path, category: str = "synthetic",
                   n_train: int | None = None, n_test: int | None = None,
                   rng: np.random.Generator | int = 0) -> Path:
    """Write an MVTec-layout dataset under ``root/category`` and return that path.

    Test images are split ``1 - anomaly_ratio`` good; the anomalous ones are
    divided between ``structural_anomalies`` and ``logical_anomalies``.
    """
    check_spec(spec)
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    n_train = spec.n_train if n_train is None else n_train
    n_test = spec.n_test if n_test is None else n_test
    base = Path(root) / category
    for i in range(n_train):
        img = render(sample_layout(spec, rng), sample_background(spec, rng))
        _save(quantize(img), base / "train" / "good" / f"{i:03d}.png")

    n_anom = int(round(n_test * spec.anomaly_ratio))
    n_struct = n_anom // 2 if spec.logical else n_anom
    if not spec.structural:
        n_struct = 0
    plan = (["good"] * (n_test - n_anom) + ["structural_anomalies"] * n_struct
            + ["logical_anomalies"] * (n_anom - n_struct))
    counters: dict[str, int] = {}
    for defect in plan:
        idx = counters.get(defect, 0)
        counters[defect] = idx + 1
        glyphs = sample_layout(spec, rng)
        bg = sample_background(spec, rng)
        clean = quantize(render(glyphs, bg))
        if defect == "good":
            _save(clean, base / "test" / "good" / f"{idx:03d}.png")
            continue
        if defect == "structural_anomalies":
            kind = spec.structural[int(rng.integers(len(spec.structural)))]
            bad = quantize(inject_structural(render(glyphs, bg), kind, rng))
        else:
            kind = spec.logical[int(rng.integers(len(spec.logical)))]
            bad = quantize(render(inject_logical(glyphs, kind, spec, rng), bg))
        mask = (bad != clean).any(axis=-1)
        _save(bad, base / "test" / defect / f"{idx:03d}.png")
        _save(mask.astype(np.uint8) * 255, base / "ground_truth" / defect / f"{idx:03d}_mask.png")
    return base
