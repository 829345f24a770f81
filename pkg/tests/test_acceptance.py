"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

Criteria 6 and 7 share one ablation over the default toy world: five paired
seeds for each of the three matchers. ``MPOT_THREADS`` sets how many of those
runs execute in parallel.
"""

import itertools
from dataclasses import replace

import numpy as np
import pytest

from mpotseg import cli, io
from mpotseg.alignment import PipelineConfig, forward, init_model
from mpotseg.autodiff import grad_check, no_grad
from mpotseg.config import ExperimentConfig, parse_config
from mpotseg.metrics import hiou
from mpotseg.ot import (
    SinkhornConfig,
    exact_ot_oracle,
    hungarian_assignment,
    marginal_residual,
    sinkhorn_plan,
    transport_cost,
    uniform_marginals,
)
from mpotseg.synthetic import World, WorldConfig
from mpotseg.training import LossWeights, ce_loss, dice_loss, focal_loss, pseudo_label, sigmoid_bce, total_loss


@pytest.fixture
def report(capsys):
    def emit(number: int, name: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'} {name}: {detail}")

    return emit


def random_feasible_plans(rng, mu, nu, count, tol=1e-12):
    """Random positive matrices projected onto the marginal constraints."""
    p = rng.exponential(size=(count, mu.size, nu.size)) ** 3
    while True:
        p *= (mu / p.sum(axis=2))[..., None]
        p *= (nu / p.sum(axis=1))[:, None, :]
        if np.abs(p.sum(axis=2) - mu).max() < tol:
            return p


def test_c01_hiou_arithmetic(report):
    cases = [((91.9, 90.9), 91.4, 0.05), ((50.5, 72.5), 59.5, 0.05), ((38.2, 59.2), 46.5, 0.15)]
    errs = [abs(hiou(*su) - want) for su, want, _ in cases]
    ok = all(e <= tol for e, (_, _, tol) in zip(errs, cases))
    report(1, "hIoU arithmetic", ok, " ".join(f"{hiou(*su):.3f}" for su, _, _ in cases))
    assert ok


def test_c02_sinkhorn_feasibility(report):
    rng = np.random.default_rng(2)
    worst = 0.0
    for i in range(200):
        m, n = int(rng.integers(1, 257)), int(rng.integers(1, 17))
        eps = (0.05, 0.1, 0.5)[i % 3]
        cfg = SinkhornConfig(epsilon=eps, max_iter=100)
        plan = sinkhorn_plan(rng.uniform(size=(m, n)), cfg=cfg)
        worst = max(worst, marginal_residual(plan, uniform_marginals(m, n)))
    ok = worst < 1e-6
    report(2, "Sinkhorn feasibility", ok, f"worst residual {worst:.2e} over 200 instances")
    assert ok


def test_c03_oracle_agreement(report):
    rng = np.random.default_rng(3)
    cfg = SinkhornConfig(epsilon=0.01, max_iter=5000)
    gap_exact, gap_random = 0.0, -np.inf
    for _ in range(50):
        while True:
            m, n = int(rng.integers(1, 9)), int(rng.integers(1, 9))
            if m * n <= 16:
                break
        cost = rng.uniform(size=(m, n))
        mu, nu = uniform_marginals(m, n)
        value = transport_cost(sinkhorn_plan(cost, cfg=cfg), cost)
        gap_exact = max(gap_exact, abs(value - transport_cost(exact_ot_oracle(cost), cost)))
        plans = random_feasible_plans(rng, mu, nu, 1000)
        best = (plans * cost).sum(axis=(1, 2)).min()
        gap_random = max(gap_random, value - best)
    ok = gap_exact < 1e-2 and gap_random < 1e-3
    report(3, "OT oracle agreement", ok,
           f"max |sinkhorn - exact| {gap_exact:.2e}; max (sinkhorn - best random) {gap_random:.2e}")
    assert ok


def test_c04_hungarian(report):
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(100):
        c = rng.uniform(size=(4, 4))
        got = transport_cost(hungarian_assignment(c).values * 4, c)
        best = min(sum(c[i, s[i]] for i in range(4)) for s in itertools.permutations(range(4)))
        mismatches += got != pytest.approx(best, abs=1e-12)
    ok = mismatches == 0
    report(4, "Hungarian correctness", ok, f"{mismatches} mismatches out of 100")
    assert ok


def test_c05_gradient_fidelity(report):
    world = World(WorldConfig())
    rng = np.random.default_rng(5)
    model = init_model(world.cfg, rng, 0.5)
    scene = world.generate_scene(0)
    # fixed iteration count: a data-dependent stopping rule is not differentiable
    pipe = PipelineConfig(sinkhorn=SinkhornConfig(max_iter=100, tol=1e-300))
    gt = scene.labels.reshape(-1)
    mask = np.isin(gt, world.partition.seen)
    fn = lambda: total_loss(forward(scene, model, world.text_encoder, pipe), gt, mask, LossWeights())
    params = model.parameters()
    groups = {"prompts": ["prompts.contexts"], "gta": ["gta.weight", "gta.bias"],
              "decoder": ["decoder.w1", "decoder.b1", "decoder.w2", "decoder.b2"]}
    worst = {}
    for group, names in groups.items():
        picks = [(names[int(rng.integers(len(names)))],) for _ in range(50)]
        errs = []
        for name in names:
            p = params[name]
            coords = [tuple(int(rng.integers(0, s)) for s in p.shape) for pick in picks if pick[0] == name]
            if not coords:
                continue
            a, n = grad_check(fn, p, coords, h=1e-5)
            errs.extend(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8))
        worst[group] = max(errs)
    ok = all(v < 1e-4 for v in worst.values())
    report(5, "gradient fidelity", ok, " ".join(f"{g} {v:.1e}" for g, v in worst.items()))
    assert ok


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    cfg = replace(ExperimentConfig(), out=str(tmp_path_factory.mktemp("ablation")))
    rows = cli.run_ablation(cfg, workers=cli.thread_cap())
    per_seed = {}
    for r in rows:
        if r["seed"] != "mean":
            per_seed.setdefault(r["variant"], {})[r["seed"]] = r
    return per_seed


def _paired(ablation, metric, other):
    seeds = sorted(ablation["sinkhorn"])
    diff = np.array([ablation["sinkhorn"][s][metric] - ablation[other][s][metric] for s in seeds])
    return diff.mean(), diff.std(ddof=1) / np.sqrt(len(diff))


def test_c06_ablation_directionality(ablation, report):
    results = {}
    for other in ("none", "hungarian"):
        d, se = _paired(ablation, "miou_unseen", other)
        results[other] = (d, se, d > se)
    means = {v: np.mean([r["miou_unseen"] for r in rows.values()]) for v, rows in ablation.items()}
    ok = all(r[2] for r in results.values())
    detail = "; ".join(f"sinkhorn-{o} {d:+.3f} (se {se:.3f}, {'ok' if good else 'not met'})"
                       for o, (d, se, good) in results.items())
    report(6, "ablation directionality", ok,
           detail + " | unseen mIoU " + " ".join(f"{v} {m:.3f}" for v, m in means.items()))
    assert ok


def test_c07_dispersion_directionality(ablation, report):
    sink = np.mean([r["dispersion"] for r in ablation["sinkhorn"].values()])
    none = np.mean([r["dispersion"] for r in ablation["none"].values()])
    ok = sink > none
    report(7, "dispersion directionality", ok, f"sinkhorn {sink:.4f} vs none {none:.4f}")
    assert ok


def test_c08_loss_unit_values(report):
    rng = np.random.default_rng(8)
    focal_ok = True
    for _ in range(20):
        z, gt = rng.normal(0, 3, (16, 5)), rng.integers(0, 5, 16)
        focal_ok &= float(focal_loss(z, gt, gamma=0.0).data) == float(sigmoid_bce(z, gt).data)
    gt = rng.integers(0, 4, 32)
    y = np.eye(4)[gt]
    dice = float(dice_loss(y, gt).data)
    ce = [float(ce_loss(np.where(y > 0, 1 - e, e / 3), gt).data) for e in (1e-2, 1e-4, 1e-6)]
    ce_ok = ce[0] > ce[1] > ce[2] and ce[2] < 1e-5
    ok = focal_ok and dice == 0.0 and ce_ok
    report(8, "loss unit values", ok, f"focal==bce {focal_ok}; dice {dice}; ce {ce[0]:.1e}->{ce[2]:.1e}")
    assert ok


def test_c09_determinism(tmp_path, report):
    text = "schedule.total_iters=20\nschedule.eval_every=10\nseed=9\nout=" + str(tmp_path) + "\n"
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(text)
    blobs = []
    for _ in range(2):
        assert cli.main(["train", "--config", str(cfg_path)]) == cli.EXIT_OK
        blobs.append(((tmp_path / "metrics.csv").read_bytes(), (tmp_path / "checkpoint.bin").read_bytes()))
    ok = blobs[0] == blobs[1]
    report(9, "determinism", ok, f"metrics.csv {len(blobs[0][0])} B, checkpoint {len(blobs[0][1])} B identical={ok}")
    assert ok


def test_c10_transductive_contract(report):
    world = World(WorldConfig())
    rng = np.random.default_rng(10)
    model = init_model(world.cfg, rng, 0.5)
    pipe = PipelineConfig()
    w = LossWeights()
    invariant = conservative = 0
    for seed in range(100):
        scene = world.generate_scene(seed)
        gt = scene.labels.reshape(-1)
        seen = np.isin(gt, world.partition.seen)
        with no_grad():
            pred = forward(scene, model, world.text_encoder, pipe)
            if seen.any():
                base = float(total_loss(pred, gt, seen, w).data)
                noise = rng.normal(0, 10, pred.y.shape) * (~seen)[:, None]
                pred.y, pred.y_tilde = pred.y + noise, pred.y_tilde + noise[:, ::-1]
                invariant += float(total_loss(pred, gt, seen, w).data) == base
            else:
                invariant += 1
            labels = pseudo_label(rng.standard_normal(pred.y.shape), gt, world.partition)
            conservative += bool(np.all(labels[seen] == gt[seen]))
    ok = invariant == 100 and conservative == 100
    report(10, "transductive loop contract", ok,
           f"phase-1 loss invariant on {invariant}/100 scenes; seen labels kept on {conservative}/100")
    assert ok
