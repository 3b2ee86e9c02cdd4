"""Pipeline stages over the output tree ``<out>/<category>/``::

    config.yaml
    generators/level-<n>.pt      generators/level-<n>.loss.csv
    generated/level-<n>/<idx>.png
    detectors/level-<L>.pt       detectors/level-<L>.curve.csv
    scores/index.json            scores/<defect>/<stem>.npz
    report.json

Every artifact records the hash of the config that produced it.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

from . import data, detector, evaluation, patchdiff
from .config import RunConfig, torch_stream
from .patchset import make_coordinate_map
from .reweighting import WeightDump

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A stage cannot run; ``code`` is a stable machine-readable tag."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def run_dir(out: str | Path, category: str) -> Path:
    return Path(out) / category


def resolve_device(name: str = "auto") -> torch.device:
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


def write_config(cfg: RunConfig, out: str | Path) -> Path:
    d = run_dir(out, cfg.category)
    d.mkdir(parents=True, exist_ok=True)
    path = d / "config.yaml"
    cfg.dump(path)
    return path


def _check_hash(found: str | None, cfg: RunConfig, what: str, force: bool) -> None:
    if found != cfg.hash() and not force:
        raise StageError("config_hash_mismatch",
                         f"{what} was produced by config {found}, current config is {cfg.hash()} "
                         "(pass --force to override)")


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def load_train_images(cfg: RunConfig, data_root: str | Path, size: int | None = None) -> list[torch.Tensor]:
    try:
        paths = data.train_images(data_root, cfg.category)
    except data.DatasetError as exc:
        raise StageError("missing_dataset", str(exc)) from exc
    if not paths:
        raise StageError("missing_dataset", f"no training images for {cfg.category}")
    return [data.load_image(p, size) for p in paths]


# -- generator ---------------------------------------------------------------

def train_generators(cfg: RunConfig, data_root, out, levels=None, device="cpu") -> list[Path]:
    g = cfg.generator
    images = torch.stack(load_train_images(cfg, data_root, g.image_size))
    sched = patchdiff.build_schedule(g.steps, g.beta_start, g.beta_end)
    dest = run_dir(out, cfg.category) / "generators"
    dest.mkdir(parents=True, exist_ok=True)
    written = []
    for level in levels or g.levels:
        t0 = time.perf_counter()
        rng = torch_stream(cfg.seed, f"train-generator-{level}")
        model, losses = patchdiff.train_patchdiff(images, level, g, rng, device)
        path = dest / f"level-{level}.pt"
        patchdiff.save_checkpoint(path, model.cpu(), sched, category=cfg.category,
                                  config_hash=cfg.hash(), train_steps=g.train_steps)
        _write_csv(dest / f"level-{level}.loss.csv",
                   [{"step": i, "loss": v} for i, v in enumerate(losses)])
        log.info("generator level-%d: loss %.4f -> %.4f in %.1fs", level, losses[0], losses[-1],
                 time.perf_counter() - t0)
        written.append(path)
    return written


def sample_generators(cfg: RunConfig, out, levels=None, device="cpu", force: bool = False) -> dict[int, Path]:
    g = cfg.generator
    base = run_dir(out, cfg.category)
    written = {}
    for level in levels or g.levels:
        ckpt = base / "generators" / f"level-{level}.pt"
        if not ckpt.exists():
            raise StageError("missing_checkpoint", f"missing generator checkpoint {ckpt}")
        model, sched, meta = patchdiff.load_checkpoint(ckpt)
        _check_hash(meta.get("config_hash"), cfg, str(ckpt), force)
        # channels-last convolutions are markedly faster on CPU for these shapes
        model.to(device, memory_format=torch.channels_last)
        coord = make_coordinate_map(g.image_size, g.image_size)
        rng = torch_stream(cfg.seed, f"sample-{level}")
        dest = base / "generated" / f"level-{level}"
        dest.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        idx = 0
        while idx < g.samples:
            n = min(g.sample_batch, g.samples - idx)
            x = patchdiff.sample(model, sched, coord, (n, 3, g.image_size, g.image_size), rng, device=device)
            for img in x:
                data.save_image(img, dest / f"{idx:04d}.png")
                idx += 1
        log.info("sampled %d level-%d images in %.1fs", idx, level, time.perf_counter() - t0)
        written[level] = dest
    return written


def load_generated(cfg: RunConfig, out, levels) -> dict[int, list[torch.Tensor]]:
    base = run_dir(out, cfg.category) / "generated"
    sets = {}
    for level in levels:
        folder = base / f"level-{level}"
        paths = sorted(folder.glob("*.png")) if folder.is_dir() else []
        if not paths:
            raise StageError("missing_generated", f"no generated images in {folder}")
        sets[level] = [data.load_image(p) for p in paths]
    return sets


# -- detector ----------------------------------------------------------------

def train_detectors(cfg: RunConfig, data_root, out, levels=None, device="cpu",
                    dump_weights: bool = False) -> list[Path]:
    d = cfg.detector
    normal = load_train_images(cfg, data_root)
    dest = run_dir(out, cfg.category) / "detectors"
    dest.mkdir(parents=True, exist_ok=True)
    written = []
    for level in levels or d.levels:
        lc = detector.LEVEL_CONFIGS[level]
        generated = load_generated(cfg, out, lc.patchdiff_levels)
        rng = torch_stream(cfg.seed, f"train-detector-{level}")
        dump = WeightDump(dest / f"level-{level}.weights.csv") if dump_weights else None
        t0 = time.perf_counter()
        try:
            result = detector.train_detector(lc, normal, generated, d, rng, device, weight_dump=dump)
        finally:
            if dump is not None:
                dump.close()
        path = dest / f"level-{level}.pt"
        detector.save_checkpoint(path, result.detector.cpu(), lc, d, result.steps,
                                 category=cfg.category, config_hash=cfg.hash())
        _write_csv(dest / f"level-{level}.curve.csv", result.history)
        h = result.history
        log.info("detector level-%d: %d steps, l_rbce %.4f -> %.4f in %.1fs", level, result.steps,
                 h[0]["l_rbce"], h[-1]["l_rbce"], time.perf_counter() - t0)
        written.append(path)
    return written


def load_detectors(cfg: RunConfig, out, levels=None, force: bool = False):
    base = run_dir(out, cfg.category) / "detectors"
    dets = {}
    for level in levels or cfg.detector.levels:
        path = base / f"level-{level}.pt"
        if not path.exists():
            raise StageError("missing_checkpoint", f"missing detector checkpoint {path}")
        det, lc, meta = detector.load_checkpoint(path)
        _check_hash(meta.get("config_hash"), cfg, str(path), force)
        dets[level] = (det, lc)
    return dets


def detect(cfg: RunConfig, data_root, out, device="cpu", force: bool = False,
           heatmaps: bool = False) -> Path:
    """Score every test image and store its per-level logit maps."""
    dets = load_detectors(cfg, out, force=force)
    for det, _ in dets.values():
        det.to(device)
    try:
        items = data.test_items(data_root, cfg.category)
    except data.DatasetError as exc:
        raise StageError("missing_dataset", str(exc)) from exc
    dest = run_dir(out, cfg.category) / "scores"
    dest.mkdir(parents=True, exist_ok=True)
    ev = cfg.evaluation
    index = []
    for item in items:
        maps = evaluation.score_image(dets, data.load_image(item.path), device)
        rel = Path(item.defect) / f"{item.path.stem}.npz"
        (dest / item.defect).mkdir(exist_ok=True)
        np.savez(dest / rel, **{f"level_{lv}": m.values for lv, m in maps.items()})
        index.append({"defect": item.defect, "image": str(item.path), "scores": str(rel),
                      "mask": str(item.mask_path) if item.mask_path else None})
        if heatmaps:
            pm = evaluation.pixel_map(maps, ev.output_size, ev.blur_kernel, ev.blur_sigma, ev.fusion)
            data.save_heatmap(pm, dest / "heatmaps" / item.defect / f"{item.path.stem}.png",
                              float(pm.min()), float(pm.max()))
    (dest / "index.json").write_text(json.dumps(
        {"config_hash": cfg.hash(), "levels": sorted(dets), "items": index}, indent=1))
    return dest


def evaluate(cfg: RunConfig, out, force: bool = False) -> dict:
    base = run_dir(out, cfg.category)
    index_path = base / "scores" / "index.json"
    if not index_path.exists():
        raise StageError("missing_score_maps", f"missing score maps: run detect first ({index_path})")
    index = json.loads(index_path.read_text())
    _check_hash(index.get("config_hash"), cfg, str(index_path), force)
    ev = cfg.evaluation
    records = []
    for it in index["items"]:
        with np.load(base / "scores" / it["scores"]) as z:
            maps = {int(k.split("_")[1]): z[k] for k in z.files}
        mask = data.load_mask(it["mask"], ev.output_size) if it["mask"] else None
        records.append((it["defect"], maps, mask))
    report = evaluation.build_report(records, ev.output_size, ev.blur_kernel, ev.blur_sigma, ev.fusion)
    report = {"category": cfg.category, **report, "config_hash": cfg.hash()}
    (base / "report.json").write_text(json.dumps(report, indent=2))
    return report


def reweight_dump(cfg: RunConfig, data_root, out, level: int, steps: int = 8, device="cpu",
                  force: bool = False) -> Path:
    """Run a trained detector over fresh batches and dump per-patch reweighting factors.

    The first half of the steps only fills the memory banks; rows are written
    for the remaining steps.
    """
    from .patchset import build_batch
    from .reweighting import MemoryBank, noisy_weight, tail_weights

    (det, lc), = load_detectors(cfg, out, [level], force).values()
    det.to(device)
    d = cfg.detector
    normal = load_train_images(cfg, data_root)
    generated = load_generated(cfg, out, lc.patchdiff_levels)
    rng = torch_stream(cfg.seed, f"reweight-dump-{level}")
    bank_pos, bank_neg = MemoryBank(d.bank_size), MemoryBank(d.bank_size)
    path = run_dir(out, cfg.category) / "detectors" / f"level-{level}.reweight.csv"
    beta = d.loss.beta_density
    with WeightDump(path) as dump, torch.no_grad():
        for step in range(steps):
            batch = build_batch(normal, generated, rng, input_size=lc.input_size,
                                patches_per_group=d.patches_per_group, images_per_group=d.images_per_group)
            z = det.features(batch.patches.to(device)).flatten(1).cpu()
            pos = batch.positive
            if step >= steps // 2:
                w_noisy = torch.ones(len(z))
                w_tail = torch.ones(len(z))
                w_noisy[~pos] = noisy_weight(z[~pos], bank_pos, beta)
                w_tail[pos] = tail_weights(z[pos], bank_pos, beta)
                w_tail[~pos] = tail_weights(z[~pos], bank_neg, beta)
                dump.write(step, batch.provenance, w_noisy, w_tail)
            bank_pos.push(z[pos])
            bank_neg.push(z[~pos])
    return path
