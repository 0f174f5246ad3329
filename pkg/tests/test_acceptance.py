"""Acceptance suite: one pass/fail line per criterion, printed unbuffered so
the verdicts survive output capture."""

import json
import math
import os
import time

import numpy as np

from singletsim import watches as wt
from singletsim.cli import EXIT_AUDIT, EXIT_OK, main
from singletsim.geometry import UnitVector
from singletsim.metrics import (
    chi_square_gof,
    chsh,
    chsh_analytic,
    free_will_M,
    normalization_check,
    two_sample_chi_square,
)
from singletsim.models import SettingsPair
from singletsim.optimizer import SearchOptions, config_from_angles, maximize_chsh, planar_vector
from singletsim.protocol import (
    ExperimentConfig,
    audit_locality,
    run_experiment,
    sample_joint_spin_outcomes,
)

Z = UnitVector(0.0, 0.0, 1.0)
TSIRELSON = 2.0 * math.sqrt(2.0)
THREADS = min(8, os.cpu_count() or 1)


def _theta_pairs(degs):
    return [(f"theta={d:g}", SettingsPair(Z, planar_vector(d))) for d in degs]


def verdict(capsys, ok, line):
    with capsys.disabled():
        print(f"[{'PASS' if ok else 'FAIL'}] {line}", flush=True)
    assert ok, line


def test_criterion_1_quantum_law_reproduction(capsys):
    degs = [15.0 * k for k in range(13)]
    pairs = _theta_pairs(degs)
    start = time.perf_counter()
    results = {}
    for kind in ("A", "B1", "B2"):
        cfg = ExperimentConfig(trials=1_000_000, seed=101, settings_pairs=pairs,
                               threads=THREADS)
        tables, _ = run_experiment(kind, cfg)
        n_ok = sum(chi_square_gof(tb, kind)[1] > 1e-3 for tb in tables)
        results[kind] = n_ok
    elapsed = time.perf_counter() - start
    ok = all(n >= 12 for n in results.values()) and elapsed < 60.0
    verdict(capsys, ok,
            "criterion 1: A/B1/B2 at 13 angles, N=1e6/angle, chi-square p>1e-3 at "
            f">=12/13 (got {results['A']}/{results['B1']}/{results['B2']}), "
            f"runtime {elapsed:.1f}s < 60s")


def test_criterion_2_hall_density_normalization(capsys):
    worst_q = 0.0
    worst_mc = 0.0
    rng = np.random.default_rng(7)
    for deg in (1.0, 60.0, 90.0, 179.0):
        s = SettingsPair(Z, planar_vector(deg))
        vq, _ = normalization_check(s, "quadrature")
        vm, _ = normalization_check(s, "monte_carlo", mc_samples=1_000_000, rng=rng)
        worst_q = max(worst_q, abs(vq - 1.0))
        worst_mc = max(worst_mc, abs(vm - 1.0))
    ok = worst_q <= 1e-6 and worst_mc <= 1e-3
    verdict(capsys, ok,
            "criterion 2: Hall-density normalization, quadrature within 1e-6 "
            f"(worst {worst_q:.2e}) and 1e6-sample Monte Carlo within 1e-3 "
            f"(worst {worst_mc:.2e}) at theta in {{1, 60, 90, 179}} deg")


def test_criterion_3_free_will_measure(capsys):
    generic = (
        SettingsPair(planar_vector(20.0), planar_vector(60.0)),
        SettingsPair(planar_vector(100.0), planar_vector(150.0)),
    )
    identical = (
        SettingsPair(Z, planar_vector(60.0)),
        SettingsPair(Z, planar_vector(60.0)),
    )
    shared = (
        SettingsPair(Z, planar_vector(60.0)),
        SettingsPair(Z, planar_vector(10.0)),
    )
    m_gen, _ = free_will_M("A", [generic])
    m_id, _ = free_will_M("A", [identical])
    m_sh, _ = free_will_M("A", [shared])
    ok = m_gen == 2.0 and m_id == 0.0 and m_sh == 1.0
    verdict(capsys, ok,
            "criterion 3: model A free-will measure exactly 2/0/1 for "
            f"generic/identical/one-shared settings pairs (got {m_gen}/{m_id}/{m_sh})")


def test_criterion_4_super_quantum_violation(capsys):
    cfg = config_from_angles(0.0, 270.0, 135.0, 225.0)
    e_analytic = chsh_analytic("C", cfg).E
    tables = {}
    zero_forbidden = True
    for lab, pair in cfg.pairs().items():
        tb, _ = run_experiment("C", ExperimentConfig(
            trials=100_000, seed=55, settings_pairs=[(lab, pair)], threads=THREADS))
        tables[lab] = tb[0]
        for (s, t), cnt in tb[0].counts.items():
            if tb[0].analytic(s, t) == 0.0 and cnt != 0:
                zero_forbidden = False
    e_emp = chsh(tables).E
    ok = e_analytic == 4.0 and abs(e_emp - 4.0) <= 0.02 and zero_forbidden
    verdict(capsys, ok,
            "criterion 4: mixed model at (0, 270, 135, 225) deg: analytic E = 4 "
            f"exactly (got {e_analytic}), empirical E within 0.02 "
            f"(got {e_emp:.4f}), forbidden cells empty ({zero_forbidden})")


def test_criterion_5_tsirelson_bound_behavior(capsys):
    results = {}
    ok = True
    for kind in ("A", "B1", "QM"):
        res = maximize_chsh(kind, SearchOptions(coarse_deg=1.0, refine_iters=0))
        results[kind] = res.E
        ok &= res.E >= 2.8274 and res.E <= TSIRELSON + 1e-9
    shown = ", ".join(f"{k}={v:.6f}" for k, v in results.items())
    verdict(capsys, ok,
            "criterion 5: optimizer on A/B1/QM reaches E >= 2.8274 and never "
            f"exceeds 2*sqrt(2)+1e-9 on a 1-degree coplanar scan ({shown})")


def test_criterion_6_watch_protocol_exactness(capsys):
    rng = np.random.default_rng(606)
    n = 100_000
    t = rng.uniform(0.0, 1.0e7, size=n)
    dt = rng.uniform(0.0, 1000.0, size=n)
    bank = wt.WatchBank.default()
    worst = 0.0
    for w in (bank.watch_H, bank.watch_T):
        pitcher = wt.watch_vectors_array(w, t - dt)
        batter = wt.batter_vectors_array(w.mirrored(), t, dt)
        worst = max(worst, float(np.max(np.abs(pitcher - batter))))
    # mirrored-phase conservation: cw + ccw phase = 0 (mod 1) for each hand
    worst_phase = 0.0
    for w in (bank.watch_H, bank.watch_T):
        for tau in (w.period_small, w.period_large):
            p_cw = np.mod((t - w.epoch) / tau, 1.0)
            p_ccw = np.mod(-(t - w.epoch) / tau, 1.0)
            s = np.mod(p_cw + p_ccw, 1.0)
            worst_phase = max(worst_phase, float(np.min([s, 1.0 - s], axis=0).max()))
    ok = worst <= 1e-9 and worst_phase <= 1e-12
    verdict(capsys, ok,
            "criterion 6: 1e5 watch round trips agree within 1e-9 per component "
            f"(worst {worst:.2e}); mirrored-phase conservation within 1e-12 "
            f"(worst {worst_phase:.2e})")


def test_criterion_7_locality_audit(capsys, tmp_path):
    conforming_ok = True
    for kind in ("A", "B1", "B2", "C", "QM"):
        cfg = ExperimentConfig(trials=30, seed=77, settings_pairs=_theta_pairs([60.0]),
                               log_events=True)
        _, log = run_experiment(kind, cfg)
        conforming_ok &= audit_locality(log, kind).passed

    out = tmp_path / "run"
    assert main(["simulate", "--model", "A", "--theta-deg", "60", "--trials", "30",
                 "--seed", "77", "--log-events", "--out", str(out)]) == EXIT_OK
    base = (out / "events.ndjson").read_text().splitlines()
    ball_i = next(i for i, l in enumerate(base) if json.loads(l)["kind"] == "ball")

    faults = {}
    # fault 1: direct batter-to-batter message
    forged = json.loads(base[0])
    forged.update(sender="batter_L", receiver="batter_R")
    faults["batter-to-batter"] = base + [json.dumps(forged)]
    # fault 2: setting leaked inside a ball payload
    leaked = json.loads(base[ball_i])
    leaked["payload"]["setting"] = [0.0, 0.0, 1.0]
    faults["setting-leak"] = base[:ball_i] + [json.dumps(leaked)] + base[ball_i + 1:]
    # fault 3: duplicated ball to the same batter in one trial
    faults["duplicate-ball"] = base + [base[ball_i]]

    codes = {}
    for name, lines in faults.items():
        p = tmp_path / f"{name}.ndjson"
        p.write_text("\n".join(lines) + "\n")
        codes[name] = main(["audit", "--log", str(p), "--model", "A"])
    ok = conforming_ok and all(c == EXIT_AUDIT for c in codes.values())
    verdict(capsys, ok,
            "criterion 7: conforming logs for all models audit clean "
            f"({conforming_ok}); 3 fault injections each exit 3 (got {codes})")


def test_criterion_8_b1_b2_equivalence_in_law(capsys):
    n = 1_000_000
    bins = []
    for kind in ("B1", "B2"):
        u, sig, tau = sample_joint_spin_outcomes(kind, n, seed=808)
        octant = (u[:, 0] >= 0) * 4 + (u[:, 1] >= 0) * 2 + (u[:, 2] >= 0)
        cell = octant * 4 + (1 - sig) + (1 - tau) // 2
        bins.append(np.bincount(cell, minlength=32))
    stat, p, dof = two_sample_chi_square(bins[0], bins[1])
    ok = p > 1e-3
    verdict(capsys, ok,
            "criterion 8: B1/B2 two-sample chi-square on (u octant, sigma, tau) "
            f"bins, N=1e6 per side, accepts at p > 1e-3 (p={p:.4g}, dof={dof})")


def test_criterion_9_determinism(capsys, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    base = ["simulate", "--model", "B1", "--theta-deg", "30", "105",
            "--trials", "200000", "--seed", "4242"]
    assert main(base + ["--threads", "1", "--out", str(a)]) == EXIT_OK
    assert main(base + ["--threads", str(max(2, THREADS)), "--out", str(b)]) == EXIT_OK
    identical = (a / "counts.csv").read_bytes() == (b / "counts.csv").read_bytes()
    rerun = tmp_path / "c"
    assert main(base + ["--threads", "1", "--out", str(rerun)]) == EXIT_OK
    repeat = (a / "counts.csv").read_bytes() == (rerun / "counts.csv").read_bytes()
    ok = identical and repeat
    verdict(capsys, ok,
            "criterion 9: same seed and config give byte-identical counts across "
            f"thread counts ({identical}) and across reruns ({repeat})")
