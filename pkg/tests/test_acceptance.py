"""Acceptance criteria, one test each, at their stated tolerances.

Every test prints a single PASS/FAIL line (also repeated in the pytest
terminal summary). Criteria 6 and 7 train full-size models and take tens of
minutes on one core; the runs are shared with ``test_pipeline``.
"""
import time
from pathlib import Path

import numpy as np
import pytest

from gtnet import autodiff as ad
from gtnet import gradcheck_suite
from gtnet.cli import main as cli_main
from gtnet.errors import ConstraintError
from gtnet.metrics import GroundTruth, compute_ap, iou
from gtnet.pipeline import Detector, ModelConfig
from gtnet.pipeline.config import load_config
from gtnet.serialization import load_model, save_model
from gtnet.tucker import TBAParams, TuckerCore, bilinear_full, bilinear_fuse, hosvd, tucker_reconstruct, tucker_to_tensor

from oracles import Det, oracle_ap, random_instance
from runs import SEEDS, experiment, median

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


def test_criterion_1_gradient_suite(verdict):
    start = time.perf_counter()
    rows = gradcheck_suite.run_all(points=3, seed=0)
    elapsed = time.perf_counter() - start
    worst_name, worst, _ = max(rows, key=lambda r: r[1])
    names = {r[0] for r in rows}
    ok = worst < 1e-4 and elapsed < 120.0 and {"ga_forward", "tba_forward"} <= names
    verdict(1, ok, f"{len(rows)} operations, worst {worst:.2e} ({worst_name}) < 1e-4, {elapsed:.1f}s < 120s")
    assert {"ga_forward", "tba_forward"} <= names
    assert worst < 1e-4, [r for r in rows if r[1] >= 1e-4]
    assert elapsed < 120.0


def test_criterion_2_factorization_equivalence(verdict):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        i, j, k = rng.integers(1, 9, size=3)
        p, q, r = rng.integers(1, 5, size=3)
        params = TBAParams(
            TuckerCore(ad.parameter(rng.normal(size=(p, q, r))), int(max(p, q))),
            ad.parameter(rng.normal(size=(i, p))),
            ad.parameter(rng.normal(size=(j, q))),
            ad.parameter(rng.normal(size=(k, r))),
            TBAParams.init(rng, 1, 1, (1, 1, 1), 1, k_out=int(k), channels=1).restore,
        )
        qv, vv = rng.normal(size=i), rng.normal(size=j)
        diff = np.abs(bilinear_fuse(qv, vv, params).value - bilinear_full(qv, vv, tucker_reconstruct(params)).value)
        worst = max(worst, float(diff.max()))
    ok = worst < 1e-10
    verdict(2, ok, f"100 random configurations, max |factored - full| = {worst:.2e} < 1e-10")
    assert ok


def test_criterion_3_hosvd(verdict):
    rng = np.random.default_rng(3)
    worst_rec = worst_orth = 0.0
    for _ in range(50):
        shape = tuple(int(s) for s in rng.integers(1, 7, size=3))
        t = rng.normal(size=shape)
        core, factors = hosvd(t, shape)
        worst_rec = max(worst_rec, np.linalg.norm(tucker_to_tensor(core, factors) - t) / np.linalg.norm(t))
        for u in factors:
            worst_orth = max(worst_orth, float(np.max(np.abs(u.T @ u - np.eye(u.shape[1])))))
    ok = worst_rec < 1e-8 and worst_orth < 1e-10
    verdict(3, ok, f"50 tensors, reconstruction {worst_rec:.2e} < 1e-8, orthonormality {worst_orth:.2e} < 1e-10")
    assert ok


def test_criterion_4_shape_contract(verdict):
    cfg = ModelConfig()
    feats = Detector(cfg, seed=0).pyramid(np.random.default_rng(4).normal(size=(1, 128, 128)))
    c = cfg.c_fpn
    expected = {
        "C2": (32, 32, 32), "C3": (64, 16, 16), "C4": (128, 8, 8), "C5": (256, 4, 4),
        "G2": (32, 32, 32), "G3": (64, 16, 16), "G4": (128, 8, 8),
        "P2": (c, 32, 32), "P3": (c, 16, 16), "P4": (c, 8, 8), "P5": (c, 4, 4),
        "R2": (c, 32, 32),
    }
    got = {k: tuple(v.shape) for k, v in feats.items()}
    ok = got == expected
    verdict(4, ok, "128x128 chain C2(32,32,32)..C5(256,4,4), G = shallow C, P at C_fpn, R2 = P2 shape")
    assert got == expected


def test_criterion_5_metrics_oracle(verdict):
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(200):
        dets, gts = random_instance(rng, n_dets=10, n_gts=5)
        if abs(compute_ap(dets, gts, 0) - oracle_ap(dets, gts, 0)) > 1e-12:
            mismatches += 1
    gt = [[GroundTruth(0, (1, 1, 5, 5))]]
    hand = [
        compute_ap([[Det(0, 0.9, (1, 1, 5, 5))]], gt, 0) == 1.0,
        compute_ap([[]], gt, 0) == 0.0,
        iou((0, 0, 2, 2), (1, 0, 3, 2)) == 1.0 / 3.0,
    ]
    ok = mismatches == 0 and all(hand)
    verdict(5, ok, f"200 random instances, {mismatches} oracle mismatches; hand cases AP=1, AP=0, IoU=1/3: {hand}")
    assert ok


CONFIGS = {"baseline": (False, False), "GA": (True, False), "TBA": (False, True), "full": (True, True)}


@pytest.mark.slow
def test_criterion_6_ablation_direction(verdict):
    small, overall, secs = {}, {}, {}
    for name, (ga, tba) in CONFIGS.items():
        runs = [experiment(seed, ga, tba) for seed in SEEDS]
        small[name] = median([r.tiers["small"] for r in runs])
        overall[name] = median([r.map for r in runs])
        secs[name] = max(r.seconds for r in runs)
        print(f"  {name:8s} small-tier AP {small[name]:.3f}  mAP {overall[name]:.3f}  slowest run {secs[name]:.0f}s")
    checks = {
        "full >= GA (small)": small["full"] >= small["GA"],
        "GA >= baseline (small)": small["GA"] >= small["baseline"],
        "full >= TBA (small)": small["full"] >= small["TBA"],
        "TBA >= baseline (small)": small["TBA"] >= small["baseline"],
        "full >= baseline (mAP)": overall["full"] >= overall["baseline"],
        "< 15 min per configuration": max(secs.values()) * len(SEEDS) < 15 * 60,
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    detail = " ".join(f"{k}={small[k]:.3f}" for k in CONFIGS) + f" (small, median of {len(SEEDS)} seeds)"
    detail += f"; mAP full={overall['full']:.3f} baseline={overall['baseline']:.3f}"
    if failed:
        detail += f"; violated: {', '.join(failed)}"
    verdict(6, ok, detail)
    assert ok, failed


@pytest.mark.slow
def test_criterion_7_sparsity_pressure(verdict):
    strong = [experiment(seed, True, True, l1_weight=1e-2).core_l1 for seed in SEEDS]
    none = [experiment(seed, True, True, l1_weight=0.0).core_l1 for seed in SEEDS]
    ok = median(strong) <= median(none)
    verdict(7, ok, f"median ||core||_1 with lambda=1e-2: {median(strong):.3f} <= lambda=0: {median(none):.3f}")
    assert ok


def test_criterion_8_determinism(verdict, tmp_path):
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text((CONFIG_DIR / "default.cfg").read_text().replace("steps = 500", "steps = 12"))
    files = []
    for k in range(2):
        out = tmp_path / f"run{k}.gtnet"
        assert cli_main(["train", "--config", str(cfg_path), "--out", str(out), "--seed", "3", "--quiet"]) == 0
        files.append(out.read_bytes())
    identical = files[0] == files[1]
    resaved = tmp_path / "resaved.gtnet"
    model = load_model(tmp_path / "run0.gtnet")
    save_model(model, resaved)
    round_trip = resaved.read_bytes() == files[0]
    ok = identical and round_trip
    verdict(8, ok, f"two train runs byte-identical: {identical}; load/save round trip bit-exact: {round_trip}")
    assert ok


def test_criterion_9_constraints(verdict):
    rejected = []
    for shape in ((6, 5, 5), (5, 6, 5), (9, 9, 1)):
        try:
            TuckerCore(ad.parameter(np.zeros(shape)), 5)
            rejected.append(False)
        except ConstraintError:
            rejected.append(True)
    try:
        TBAParams.init(np.random.default_rng(0), 64, 64, (6, 5, 5), k_cat=5)
        rejected.append(False)
    except ConstraintError:
        rejected.append(True)
    shipped = [ModelConfig()] + [load_config(p).model for p in sorted(CONFIG_DIR.glob("*.cfg"))]
    counts = []
    for cfg in shipped:
        p = TBAParams.init(np.random.default_rng(0), cfg.c_fpn, cfg.c_fpn, cfg.ranks, cfg.k_cat, cfg.k_out_resolved)
        counts.append((p.factored_size(), p.full_size()))
    compressed = all(f < full for f, full in counts)
    ok = all(rejected) and compressed
    verdict(9, ok, f"P or Q > K_cat rejected: {all(rejected)}; factored < full for {len(counts)} shipped configs: {counts}")
    assert ok
