"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that is repeated in the terminal summary.
Criteria 7 and 8 run the full desk-profile pipeline and take several minutes.
"""

import copy
import json
import math
import time

import numpy as np
import pytest
import torch

from grad_ad import config, detector as D, evaluation as E, patchdiff, pipeline
from grad_ad.cli import cli_dispatch
from grad_ad import data as gdata
from grad_ad.patchset import make_coordinate_map
from grad_ad.reweighting import density_weight, normalize, rbce_loss

from oracles import detector_param_count, finite_difference_check, mann_whitney, reference_ddpm


def test_1_architecture(criterion):
    t0 = time.perf_counter()
    torch.manual_seed(0)
    det = D.PatchDetector().eval()
    n = D.count_parameters(det)
    with torch.no_grad():
        out = det(torch.randn(1, 5, 34, 34))
    dt = time.perf_counter() - t0
    ok = n == detector_param_count() == 2_923_457 and out.shape == (1, 1, 1, 1) and dt < 1.0
    criterion(1, "architecture fidelity", ok,
              f"{n:,} parameters, 34x34 input -> {tuple(out.shape[-2:])} output, {dt:.2f}s")


def test_2_receptive_fields(criterion):
    t0 = time.perf_counter()
    torch.manual_seed(0)
    width = config.profile("paper").generator.width
    measured = {}
    for level in (5, 9, 13, 17):
        rep = patchdiff.receptive_field_probe(patchdiff.Denoiser(level, width), strict=False)
        measured[level] = (rep.measured, rep.passed)
    rep = D.receptive_field_probe(D.PatchDetector(), strict=False)
    dt = time.perf_counter() - t0
    ok = all(m == lv and p for lv, (m, p) in measured.items()) and rep.passed and rep.measured == 34
    ok = ok and dt < 30
    detail = ", ".join(f"level-{lv}: {m}" for lv, (m, _) in measured.items())
    criterion(2, "receptive-field probes", ok, f"{detail}, detector: {rep.measured} at stride 4, {dt:.1f}s")


def test_3_reweighting_suite(criterion):
    t0 = time.perf_counter()
    gen = torch.Generator().manual_seed(0)
    failures = []
    for trial in range(1000):
        n = int(torch.randint(1, 513, (1,), generator=gen))
        dim = int(torch.randint(2, 257, (1,), generator=gen))
        beta = 0.5 + 19.5 * float(torch.rand((), generator=gen))
        bank = torch.randn(n, dim, generator=gen, dtype=torch.float64)
        q = torch.randn(8, dim, generator=gen, dtype=torch.float64)
        w = density_weight(q, bank, beta)

        # literal bound 1/(N e^beta) <= w <= e^beta / N
        if not ((w >= 1 / (n * math.exp(beta)) * (1 - 1e-12)).all()
                and (w <= math.exp(beta) / n * (1 + 1e-12)).all()):
            failures.append(f"trial {trial}: bound")

        # normalisation: each class's effective weights sum to one
        if abs(normalize(w).sum().item() - 1) > 1e-6:
            failures.append(f"trial {trial}: normalisation")

        # scale invariance of the loss
        pos = torch.rand(8, generator=gen, dtype=torch.float64) * 0.98 + 0.01
        neg = torch.rand(8, generator=gen, dtype=torch.float64) * 0.98 + 0.01
        w2 = density_weight(q.flip(0), bank, beta)
        base = rbce_loss(pos, neg, w, w2, w.flip(0))
        c1, c2 = 10 ** (6 * float(torch.rand((), generator=gen)) - 3), 10 ** (6 * float(torch.rand((), generator=gen)) - 3)
        scaled = rbce_loss(pos, neg, w * c1, w2 * c2, w.flip(0))
        if abs(scaled.item() - base.item()) > 1e-6 * abs(base.item()):
            failures.append(f"trial {trial}: scale invariance")

        # monotonicity: moving any bank entry towards the query lowers the weight
        z = q[0]
        k = int(torch.randint(0, n, (1,), generator=gen))
        for j in (k, int((bank @ z / bank.norm(dim=1)).argmax())):
            moved = bank.clone()
            b = moved[j] / moved[j].norm()
            moved[j] = b + 0.5 * z / z.norm()
            before, after = density_weight(z, bank, beta).item(), density_weight(z, moved, beta).item()
            cos_up = float(moved[j] @ z / (moved[j].norm() * z.norm())) > float(b @ z / z.norm())
            strict = j != k  # the dominant entry changes the sum visibly in float64
            if cos_up and (after > before or (strict and not after < before)):
                failures.append(f"trial {trial}: monotonicity")
    dt = time.perf_counter() - t0
    criterion(3, "reweighting suite", not failures and dt < 10,
              f"1000 random banks, {len(failures)} violations{': ' + failures[0] if failures else ''}, {dt:.1f}s")


def test_4_gradient_penalty(criterion):
    t0 = time.perf_counter()
    torch.manual_seed(1)
    det = D.PatchDetector().double()
    x = torch.rand(1, 5, 34, 34, dtype=torch.float64) * 2 - 1
    xr = x.clone().requires_grad_(True)
    (g,) = torch.autograd.grad(torch.sigmoid(det(xr)).sum(), xr)
    errors, skipped = finite_difference_check(det, x, g, 120, torch.Generator().manual_seed(2))
    penalty = D.grad_reg_loss(det, x, create_graph=False).item()
    dt = time.perf_counter() - t0
    ok = errors.max() < 1e-4 and math.isclose(penalty, g.pow(2).sum().item(), rel_tol=1e-10) and dt < 60
    criterion(4, "gradient-penalty correctness", ok,
              f"{len(errors)} coordinates, max relative error {errors.max():.2e} "
              f"({skipped} kink-crossing draws redrawn), {dt:.1f}s")


def test_5_sampler_equivalence(criterion):
    t0 = time.perf_counter()
    g = config.profile("desk").generator
    g.sigma_g, g.train_steps, g.width, g.train_crop, g.batch_size = 0.0, 30, 16, 16, 4
    images = torch.rand(4, 3, 24, 24, generator=torch.Generator().manual_seed(0)) * 2 - 1
    net, _ = patchdiff.train_patchdiff(images, 5, g, torch.Generator().manual_seed(1))
    net = net.double()
    sched = patchdiff.build_schedule(g.steps, g.beta_start, g.beta_end)
    coord = make_coordinate_map(16, 16)
    shape = (2, 3, 16, 16)
    traj = {}
    patchdiff.sample(net, sched, coord, shape, torch.Generator().manual_seed(5), dtype=torch.float64,
                     callback=lambda t, x: traj.__setitem__(t, x.clone()))
    ref = reference_ddpm(net, sched.beta, coord, shape, torch.Generator().manual_seed(5))
    worst = max((traj[sched.T - k] - r).abs().max().item() for k, r in enumerate(ref))
    dt = time.perf_counter() - t0
    ok = len(traj) == len(ref) == sched.T + 1 and worst <= 1e-6 and dt < 60
    criterion(5, "sampler equivalence", ok,
              f"{sched.T} steps, max step-wise deviation {worst:.2e}, {dt:.1f}s")


def test_6_auroc_oracle(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        n, m = rng.integers(1, 60, size=2)
        levels = rng.integers(2, 50)
        a = rng.integers(levels, size=n) / levels
        b = rng.integers(levels, size=m) / levels + rng.normal(0, 0.05) * rng.integers(2)
        worst = max(worst, abs(E.auroc(a, b) - mann_whitney(a, b)))
    dt = time.perf_counter() - t0
    criterion(6, "AU-ROC oracle", worst <= 1e-9 and dt < 10,
              f"200 score sets, max |sweep - pairwise| {worst:.1e}, {dt:.1f}s")


# -- end to end ----------------------------------------------------------------------

BUDGET_S = 30 * 60
ABLATION_LEVEL = 34  # the strongest single level on both defect families in pilot runs


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    data = out / "data"
    common = ["--profile", "desk", "--out", str(out / "runs"), "--data-root", str(data), "--seed", "0"]
    stages = ["synth-data", "train-generator", "sample", "train-detector", "detect", "evaluate"]
    times, codes = {}, {}
    t0 = time.perf_counter()
    for stage in stages:
        ts = time.perf_counter()
        codes[stage] = cli_dispatch([stage, *common])
        times[stage] = time.perf_counter() - ts
        if codes[stage] != 0:
            break
    elapsed = time.perf_counter() - t0
    cfg = config.profile("desk")
    report_path = out / "runs" / cfg.category / "report.json"
    report = json.loads(report_path.read_text()) if report_path.exists() else None
    return {"out": out / "runs", "data": data, "cfg": cfg, "elapsed": elapsed, "times": times,
            "codes": codes, "report": report}


@pytest.mark.slow
def test_7_end_to_end_desk_run(desk_run, criterion):
    rep = desk_run["report"]
    stages = ", ".join(f"{k} {v:.0f}s" for k, v in desk_run["times"].items())
    if rep is None:
        criterion(7, "end-to-end desk run", False, f"pipeline stopped: exit codes {desk_run['codes']}")
    per = rep["per_defect_image_auroc"]
    s, lg = per["structural_anomalies"], per["logical_anomalies"]
    curves = sorted((desk_run["out"] / desk_run["cfg"].category / "detectors").glob("*.curve.csv"))
    trend = []
    for path in curves:
        loss = np.genfromtxt(path, delimiter=",", names=True)["l_rbce"]
        w = max(1, len(loss) // 10)
        trend.append(loss[-w:].mean() < loss[:w].mean())
    ok = desk_run["elapsed"] < BUDGET_S and s >= 0.85 and lg >= 0.75 and len(trend) == 3 and all(trend)
    criterion(7, "end-to-end desk run", ok,
              f"structural AU-ROC {s:.3f} (>= 0.85), logical AU-ROC {lg:.3f} (>= 0.75), "
              f"total {desk_run['elapsed'] / 60:.1f} min (< 30) [{stages}], "
              f"smoothed L_RBCE fell for {sum(trend)}/{len(trend)} detectors")


def _ablation_auroc(desk_run, use_noisy: bool, use_tail: bool, seed: int) -> float:
    cfg = copy.deepcopy(desk_run["cfg"])
    dcfg = cfg.detector
    dcfg.loss.use_noisy, dcfg.loss.use_tail = use_noisy, use_tail
    lc = D.LEVEL_CONFIGS[ABLATION_LEVEL]
    normal = pipeline.load_train_images(cfg, desk_run["data"])
    generated = pipeline.load_generated(cfg, desk_run["out"], lc.patchdiff_levels)
    res = D.train_detector(lc, normal, generated, dcfg, config.torch_stream(seed, f"ablation-{ABLATION_LEVEL}"))
    good, bad = [], []
    for item in gdata.test_items(desk_run["data"], cfg.category):
        maps = E.score_image({ABLATION_LEVEL: (res.detector, lc)}, gdata.load_image(item.path))
        (bad if item.anomalous else good).append(E.image_score(maps))
    return E.auroc(good, bad)


@pytest.mark.slow
def test_8_ablation(desk_run, criterion):
    if desk_run["report"] is None:
        criterion(8, "ablation direction", False, "desk pipeline did not complete")
    # each reweighting component is toggled on its own against the unweighted baseline
    variants = {"baseline": (False, False), "+noisy": (True, False), "+tail": (False, True)}
    runs = {name: [_ablation_auroc(desk_run, noisy, tail, seed) for seed in range(3)]
            for name, (noisy, tail) in variants.items()}
    means = {name: float(np.mean(v)) for name, v in runs.items()}
    base = means["baseline"]
    ok = means["+noisy"] >= base - 0.01 and means["+tail"] >= base - 0.01
    criterion(8, "ablation direction", ok,
              f"level-{ABLATION_LEVEL} image AU-ROC over 3 seeds: "
              + ", ".join(f"{k} {means[k]:.3f} ({' '.join(f'{x:.3f}' for x in v)})" for k, v in runs.items())
              + " (each >= baseline - 0.01)")
