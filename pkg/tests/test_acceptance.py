"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line
that is printed in the terminal summary.

Scenario criteria run on the shared desk benchmark from ``conftest`` (60
subjects x 10 images, seed 7; models trained with seeds 1-3) with the
default attack settings and 200 tuples per scenario.
"""

import itertools
import json
import time

import numpy as np
import pytest

from conftest import BENCH_SEED, record
from oracles import brute_force_bracket

from mtadv import autodiff as ad
from mtadv.attack import AttackConfig, DeltaWindow, StopReason, TargetSet, check_stop, fgsm, mtadv, objective, pgd
from mtadv.cli import main
from mtadv.dataset import make_pairs, save_directory
from mtadv.embedder import DefenseTransform, SystemProfile, calibrate_system, save_model
from mtadv.geometry import verify_orderings
from mtadv.metrics import DistanceKind, calibrate_eer, pairwise_dissimilarity, ssim
from mtadv.scenarios import ScenarioSpec, run_scenario

pytestmark = pytest.mark.slow

N_TUPLES = 200
UA_USERS = 10
UA_IMAGES = 10


@pytest.fixture(scope="module")
def st_report(systems, bench):
    spec = ScenarioSpec("ST", (systems[1],), n_pairs=N_TUPLES, seed=BENCH_SEED, baselines=("pgd", "fgsm"))
    return run_scenario(spec, bench)


@pytest.fixture(scope="module")
def ma_report(systems, bench):
    spec = ScenarioSpec("MA", (systems[1],), n_target_users=2, n_pairs=N_TUPLES, seed=BENCH_SEED)
    return run_scenario(spec, bench)


@pytest.fixture(scope="module")
def ua_reports(systems, bench):
    return {
        s: run_scenario(ScenarioSpec("UA", (systems[s],), n_target_users=UA_USERS, imgs_per_target=UA_IMAGES,
                                     n_pairs=N_TUPLES, seed=BENCH_SEED), bench)
        for s in sorted(systems)
    }


# 1 ---------------------------------------------------------------------------


def test_01_gradient_correctness(models, bench):
    rng = np.random.default_rng(101)
    pool = [None, DefenseTransform("gaussian_blur", 1.0), DefenseTransform("soft_quantize", 8.0, 4)]
    t0 = time.perf_counter()
    worst = 0.0
    for case in range(100):
        n_sys = int(rng.integers(1, 3))
        seeds = rng.choice(sorted(models), size=n_sys, replace=False)
        systems = [SystemProfile(models[int(s)], pool[int(rng.integers(3))],
                                 DistanceKind(rng.choice([k.value for k in DistanceKind])),
                                 tau=float(rng.uniform(0.2, 0.6))) for s in seeds]
        targets = [[bench.image(int(rng.integers(60)), int(rng.integers(10))) for _ in range(int(rng.integers(1, 4)))]
                   for _ in systems]
        x = np.clip(bench.image(int(rng.integers(60)), 0) + rng.uniform(-0.03, 0.03, (16, 16, 1)), 0, 1)
        worst = max(worst, ad.grad_check(objective(TargetSet(systems, targets)), x, h=1e-5))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 60
    record(1, "gradient correctness", ok, f"max rel err {worst:.2e} (<= 1e-4) over 100 cases in {elapsed:.1f}s")
    assert ok


# 2 ---------------------------------------------------------------------------


def test_02_ball_and_range_invariant(systems, blur_system, bench):
    rng = np.random.default_rng(202)
    pool = [systems[1], systems[2], blur_system]
    violations = 0
    for run in range(1000):
        eps = float(rng.choice([0.0, rng.uniform(0, 0.1), 0.03, 0.3]))
        alpha = float(rng.uniform(1e-4, eps)) if eps > 0 else 1e-3
        cfg = AttackConfig(epsilon=eps, alpha=alpha, t_max=int(rng.integers(1, 12)), seed=run)
        system = pool[run % 3]
        src = bench.image(int(rng.integers(60)), int(rng.integers(10)))
        ts = TargetSet([system], [bench.image(int(rng.integers(60)), int(rng.integers(10)))])
        res = (mtadv, pgd, lambda s, t, c: fgsm(s, t, c.epsilon))[run % 3](src, ts, cfg)
        inside = np.max(np.abs(res.adv - src)) <= eps + 1e-12
        in_range = res.adv.min() >= 0.0 and res.adv.max() <= 1.0
        violations += not (inside and in_range)
    record(2, "ball/range invariant", violations == 0, f"{violations} violations in 1000 fuzzed runs")
    assert violations == 0


# 3, 4 ------------------------------------------------------------------------


def test_03_white_box_st(st_report):
    row = st_report.row("ST")
    ok = row.asr_white >= 0.99
    record(3, "white-box ST ASR", ok, f"{row.asr_white:.3f} (>= 0.99) over {row.n} tuples")
    assert ok


def test_04_gray_box_st_tracks_eer(st_report):
    row = st_report.row("ST")
    gap = abs(row.asr_gray + row.eer - 1.0)
    ok = gap <= 0.05
    record(4, "gray-box ST vs EER", ok, f"ASR {row.asr_gray:.3f} + EER {row.eer:.3f} - 1 = {gap:.3f} (<= 0.05)")
    assert ok


# 5 ---------------------------------------------------------------------------


def test_05_scenario_ordering(st_report, ma_report, ua_reports):
    checks = {c.name: c for c in verify_orderings([st_report, ma_report, ua_reports[1]], slack=0.02)}
    st_g, ma_g = st_report.row("ST").asr_gray, ma_report.row("MA").asr_gray
    ua_g = ua_reports[1].row(f"UA-k{UA_IMAGES}").asr_gray
    ok = checks["gray_ST_ge_MA"].passed and checks["gray_MA_ge_UA"].passed
    record(5, "scenario ordering", ok, f"gray ST {st_g:.3f} >= MA {ma_g:.3f} - 0.02 >= UA {ua_g:.3f} - 0.04")
    assert ok


# 6 ---------------------------------------------------------------------------


def test_06_transferable_attack(systems, bench):
    rep = run_scenario(ScenarioSpec("TA", (systems[1], systems[2]), n_pairs=N_TUPLES, seed=BENCH_SEED), bench)
    rates = [r.asr_white for r in rep.rows]
    ok = all(r >= 0.95 for r in rates)
    record(6, "TA per-system white-box ASR", ok,
           ", ".join(f"{r.system_id} {r.asr_white:.3f}" for r in rep.rows) + " (each >= 0.95)")
    assert ok


# 7 ---------------------------------------------------------------------------


def test_07_counterattack(systems, blur_system, bench):
    rep = run_scenario(ScenarioSpec("CA", (systems[1], blur_system), n_pairs=N_TUPLES, seed=BENCH_SEED), bench)
    base, counter = rep.row("CA-baseline"), rep.row("CA-counter")
    ok = counter.asr_white >= 2 * base.asr_white and blur_system.eer <= 0.15
    record(7, "CA counter vs baseline", ok,
           f"white {counter.asr_white:.3f} vs 2 x {base.asr_white:.3f}; defended EER {blur_system.eer:.3f} (<= 0.15)"
           f"; gray {counter.asr_gray:.3f} vs {base.asr_gray:.3f}")
    assert ok


# 8 ---------------------------------------------------------------------------


def test_08_ua_image_count(ua_reports):
    pairs = {s: (r.row("UA-k1").asr_gray, r.row(f"UA-k{UA_IMAGES}").asr_gray) for s, r in ua_reports.items()}
    ok = len(pairs) == 3 and all(many >= one for one, many in pairs.values())
    record(8, "UA image-count effect", ok,
           "; ".join(f"seed {s}: k{UA_IMAGES} {b:.4f} >= k1 {a:.4f}" for s, (a, b) in pairs.items()))
    assert ok


# 9 ---------------------------------------------------------------------------


def test_09_baseline_ordering(st_report):
    m, p, f = (st_report.row(k) for k in ("ST", "ST-pgd", "ST-fgsm"))
    # gray box separates the iterative methods; white box separates one step from many
    ok = m.asr_gray > p.asr_gray and p.asr_white > f.asr_white and m.asr_white > f.asr_white
    record(9, "baseline ordering", ok,
           f"gray MTADV {m.asr_gray:.3f} > PGD {p.asr_gray:.3f} (FGSM {f.asr_gray:.3f}); "
           f"white PGD {p.asr_white:.3f}, MTADV {m.asr_white:.3f} > FGSM {f.asr_white:.3f}")
    assert ok


# 10 --------------------------------------------------------------------------


def _expected(deltas, t, cfg):
    if t >= cfg.t_max:
        return StopReason.MAX_STEPS
    if len(deltas) < 5:
        return None
    if all(abs(d) <= cfg.tau_conv for d in deltas):
        return StopReason.CONVERGED
    if sum(d <= 0 for d in deltas) >= 2:
        return StopReason.SETTLED
    return None


def test_10_stop_criterion_suite():
    cfg = AttackConfig()
    cases = mismatches = 0
    for length in range(6):
        for signs in itertools.product((1, -1), repeat=length):
            for mag in (1e-5, 1e-4, 1e-2):
                for t in (max(length, 1), cfg.t_max - 1, cfg.t_max):
                    w = DeltaWindow()
                    for s in signs:
                        w.push(s * mag)
                    cases += 1
                    mismatches += check_stop(w, t, cfg) != _expected([s * mag for s in signs], t, cfg)
    named = [
        ([1e-5] * 5, 10, StopReason.CONVERGED),
        ([0.01, -0.002, 0.008, -0.001, 0.01], 10, StopReason.SETTLED),
        ([0.5] * 5, cfg.t_max, StopReason.MAX_STEPS),
        ([-1e-5, -1e-5, 1e-5, 1e-5, 1e-5], 10, StopReason.CONVERGED),  # both rules hold: slim change first
        ([-1e-5] * 5, cfg.t_max, StopReason.MAX_STEPS),
        ([-1.0] * 4, 4, None),  # window not full
        ([0.0, 1.0, 1.0, 1.0, 1.0], 10, None),
    ]
    for deltas, t, want in named:
        w = DeltaWindow()
        for d in deltas:
            w.push(d)
        cases += 1
        mismatches += check_stop(w, t, cfg) != want
    record(10, "stop-criterion suite", mismatches == 0, f"{mismatches} mismatches in {cases} cases (2^5 sign patterns)")
    assert mismatches == 0


# 11 --------------------------------------------------------------------------


def test_11_metric_oracles():
    rng = np.random.default_rng(1111)
    eer_bad = 0
    for _ in range(50):
        n_g, n_i = rng.integers(5, 80, size=2)
        genuine = np.clip(rng.normal(0.3, 0.1, n_g), 0, 1)
        impostor = np.clip(rng.normal(0.3 + rng.uniform(0, 0.4), 0.1, n_i), 0, 1)
        tau, eer = calibrate_eer((genuine, impostor))
        a, b, rates = brute_force_bracket(genuine, impostor)
        eer_bad += not (a - 1e-4 - 1e-12 <= tau <= b + 1e-12 and min(rates) - 1e-12 <= eer <= max(rates) + 1e-12)
    x = rng.uniform(0, 1, (16, 16, 1))
    self_ssim = ssim(x, x)
    U = rng.standard_normal((1000, 32))
    V = rng.standard_normal((1000, 32))
    U /= np.linalg.norm(U, axis=1, keepdims=True)
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    cos = pairwise_dissimilarity(U, V, "cos_dissim")
    half = np.linalg.norm(U - V, axis=1) / 2
    ident_err = float(np.max(np.abs(cos - half ** 2)))
    ok = eer_bad == 0 and self_ssim == 1.0 and ident_err <= 1e-12
    record(11, "metric oracles", ok,
           f"EER mismatches {eer_bad}/50; ssim(x,x) = {self_ssim!r}; cos/L2 identity err {ident_err:.1e}")
    assert ok


# 12 --------------------------------------------------------------------------


def test_12_determinism(models, bench, tmp_path):
    data = tmp_path / "bench"
    save_directory(bench, data)
    m1, m2 = tmp_path / "m1.mdl", tmp_path / "m2.mdl"
    save_model(models[1], m1)
    save_model(models[2], m2)
    runs = {
        "st": ["--models", str(m1), "--baseline", "pgd,fgsm"],
        "ma": ["--models", str(m1)],
        "ua": ["--models", str(m1), "--target-users", "4", "--imgs-per-target", "3"],
        "ta": ["--models", f"{m1},{m2}"],
        "ca": ["--models", str(m1)],
    }
    differing = []
    for kind, extra in runs.items():
        base = ["attack", "--scenario", kind, "--data", str(data), "--pairs", "6", "--no-timing", *extra]
        ref = tmp_path / f"{kind}-ref"
        assert main([*base, "--threads", "1", "--out", str(ref)]) == 0
        assert main([*base, "--threads", "3", "--out", str(tmp_path / f"{kind}-par")]) == 0
        assert main(["attack", "--config", str(ref / f"{kind}.json"), "--out", str(tmp_path / f"{kind}-cfg")]) == 0
        for variant in ("par", "cfg"):
            for ext in ("csv", "json"):
                other = tmp_path / f"{kind}-{variant}" / f"{kind}.{ext}"
                if other.read_bytes() != (ref / f"{kind}.{ext}").read_bytes():
                    differing.append(f"{kind}-{variant}.{ext}")
        assert json.loads((ref / f"{kind}.json").read_text())["config"]["scenario"] == kind
    ok = not differing
    record(12, "determinism", ok, "5 scenarios: parallel and config re-runs bitwise equal to --threads 1"
           if ok else f"differs: {', '.join(differing)}")
    assert ok


# 13 --------------------------------------------------------------------------


def test_13_ssim_decreases_with_epsilon(systems, bench):
    system = systems[1]
    tuples = make_pairs(bench, "attack", seed=BENCH_SEED, n_tuples=50, box="gray")
    means = []
    for eps in (0.01, 0.03, 0.05, 0.1):
        vals = []
        for i, tp in enumerate(tuples):
            src = bench.image(tp.source_subject, tp.source_image_index)
            ts = TargetSet([system], [bench.image(tp.target_subject, tp.target_image_index)])
            vals.append(ssim(mtadv(src, ts, AttackConfig(epsilon=eps, seed=i)).adv, src))
        means.append(float(np.mean(vals)))
    ok = all(b <= a for a, b in zip(means, means[1:]))
    record(13, "SSIM vs epsilon", ok, " >= ".join(f"{m:.4f}" for m in means) + " for eps 0.01, 0.03, 0.05, 0.1")
    assert ok


def test_defended_pipeline_calibrated_independently(systems, blur_system):
    assert blur_system.model is systems[1].model
    assert blur_system.tau != systems[1].tau
