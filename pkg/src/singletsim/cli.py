"""Command-line front end.

Subcommands: simulate, verify, chsh, freewill, audit.  Exit codes are a
stable contract: 0 success, 1 usage or config error, 2 verification failure,
3 audit violation, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from . import watches as wt
from .geometry import UnitVector
from .metrics import (
    CHSH_LABELS,
    ChshConfig,
    QuadratureError,
    chi_square_gof,
    chsh,
    chsh_analytic,
    free_will_M,
    normalization_check,
    two_sample_chi_square,
)
from .models import MODEL_KINDS, SamplerFailure, SettingsPair
from .optimizer import SearchOptions, maximize_chsh, planar_vector
from .protocol import (
    ExperimentConfig,
    ProtocolIntegrityError,
    audit_locality,
    read_event_log,
    run_experiment,
    sample_joint_spin_outcomes,
    write_counts_csv,
    write_event_log,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFY = 2
EXIT_AUDIT = 3
EXIT_RUNTIME = 4

P_THRESHOLD = 1e-3


class UsageError(Exception):
    pass


def _f17(x) -> str:
    return format(float(x), ".17g")


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("SINGLET_SIM_THREADS")
    return int(env) if env else 1


def _theta_pairs(theta_list):
    """Fixed settings pairs for a list of relative angles: n_L on the z axis,
    n_R rotated by theta in the x-z plane."""
    pairs = []
    for deg in theta_list:
        pairs.append(
            (f"theta={deg:g}", SettingsPair(UnitVector(0.0, 0.0, 1.0), planar_vector(deg)))
        )
    return pairs


def _load_settings_file(path):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    pairs = []
    for i, entry in enumerate(doc):
        label = entry.get("label", f"pair{i}")
        nl = UnitVector.normalized(*entry["n_L"])
        nr = UnitVector.normalized(*entry["n_R"])
        pairs.append((label, SettingsPair(nl, nr)))
    if not pairs:
        raise UsageError(f"no settings pairs in {path}")
    return pairs


def _config_overrides(path):
    """A JSON document mirroring the experiment configuration; flags given on
    the command line take precedence."""
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _build_experiment_config(args) -> tuple[str, ExperimentConfig]:
    file_cfg = _config_overrides(args.config) if getattr(args, "config", None) else {}

    def pick(flag, key, default):
        v = getattr(args, flag, None)
        if v is not None:
            return v
        return file_cfg.get(key, default)

    model = pick("model", "model", None)
    if model is None:
        raise UsageError("--model is required (or 'model' in the config file)")
    if model not in MODEL_KINDS:
        raise UsageError(f"unknown model {model!r}; choose from {MODEL_KINDS}")
    trials = int(pick("trials", "trials", 10000))
    seed = int(pick("seed", "seed", 0))
    delta_t = float(pick("delta_t", "delta_t", 1.5))
    watch_driven = bool(pick("watch_driven", "watch_driven", False))

    if "watch_periods" in file_cfg:
        wp = file_cfg["watch_periods"]
        epoch = float(file_cfg.get("epoch", 0.0))
        bank = wt.WatchBank(
            wt.WatchSpec(*wp["H"], wt.CLOCKWISE, epoch),
            wt.WatchSpec(*wp["T"], wt.CLOCKWISE, epoch),
            wt.WatchSpec(*wp["0"], wt.CLOCKWISE, epoch) if "0" in wp else None,
        )
    else:
        bank = wt.WatchBank.default(float(file_cfg.get("epoch", 0.0)))

    if watch_driven:
        pairs = []
    elif getattr(args, "settings_file", None):
        pairs = _load_settings_file(args.settings_file)
    elif getattr(args, "theta_deg", None):
        pairs = _theta_pairs(args.theta_deg)
    elif "theta_deg" in file_cfg:
        pairs = _theta_pairs(file_cfg["theta_deg"])
    else:
        raise UsageError("need --theta-deg, --settings-file, or --watch-driven")

    return model, ExperimentConfig(
        trials=trials,
        seed=seed,
        settings_pairs=pairs,
        watch_driven=watch_driven,
        delta_t=delta_t,
        bank=bank,
        log_events=bool(getattr(args, "log_events", False)),
        threads=_threads(args),
    )


def _write_manifest(out_dir, args, extra=None):
    manifest = {
        "artifact_version": __version__,
        "command": sys.argv[1:],
        "options": {
            k: v for k, v in vars(args).items() if k != "func" and v is not None
        },
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(args) -> int:
    model, config = _build_experiment_config(args)
    os.makedirs(args.out, exist_ok=True)
    tables, log = run_experiment(model, config)
    write_counts_csv(tables, os.path.join(args.out, "counts.csv"))
    extra = {"model": model, "seed": config.seed, "trials": config.trials}
    if log is not None:
        write_event_log(log, os.path.join(args.out, "events.ndjson"))
        extra["events"] = len(log)
    _write_manifest(args.out, args, extra)
    for tb in tables:
        print(f"{model} {tb.label}: N={tb.n_total}", end="")
        for (s, t) in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
            print(f"  P({s:+d},{t:+d})={tb.frequency(s, t):.5f}", end="")
        print()
    return EXIT_OK


def _verify_model(model, grid, trials, seed, inject_bias, threads):
    degs = [180.0 * k / (grid - 1) for k in range(grid)] if grid > 1 else [90.0]
    pairs = _theta_pairs(degs)
    config = ExperimentConfig(
        trials=trials, seed=seed, settings_pairs=pairs, threads=threads
    )
    tables, _ = run_experiment(model, config)
    rows = []
    n_ok = 0
    for tb in tables:
        counts = dict(tb.counts)
        if inject_bias:
            # negative control: shift 2% of the largest cell into the smallest
            hi = max(counts, key=counts.get)
            lo = min(counts, key=counts.get)
            moved = counts[hi] // 50
            counts[hi] -= moved
            counts[lo] += moved
            tb = type(tb)(tb.label, tb.model, tb.settings, counts)
        stat, p, dof = chi_square_gof(tb, model)
        ok = p > P_THRESHOLD
        n_ok += ok
        rows.append((f"chi2 {tb.label}", f"p={p:.4g}", ok))
    # one angle is allowed to fluctuate below the threshold
    overall = n_ok >= len(tables) - 1
    return rows, overall


def _verify_watches(seed):
    rng = np.random.default_rng(seed)
    bank = wt.WatchBank.default()
    n = 10_000
    t = rng.uniform(0.0, 1.0e7, size=n)
    dt = rng.uniform(0.0, 100.0, size=n)
    worst = 0.0
    for w in (bank.watch_H, bank.watch_T):
        for i in range(n):
            p = wt.phases_to_vector(wt.read_phases(w, t[i] - dt[i])).as_array()
            b = wt.batter_vectors_array(w.mirrored(), [t[i]], float(dt[i]))[0]
            worst = max(worst, float(np.max(np.abs(p - b))))
            if worst > 1e-9:
                break
    ok = worst <= 1e-9
    return [("watch round-trip", f"max err={worst:.3e}", ok)], ok


def cmd_verify(args) -> int:
    models = args.model.split(",")
    for m in models:
        if m not in MODEL_KINDS:
            raise UsageError(f"unknown model {m!r}")
    threads = _threads(args)
    all_rows = []
    overall = True
    for m in models:
        rows, ok = _verify_model(m, args.grid, args.trials, args.seed, args.inject_bias, threads)
        all_rows += [(m,) + r for r in rows]
        overall &= ok
        if m in ("B1", "B2"):
            for deg in (1.0, 60.0, 90.0, 179.0):
                s = SettingsPair(UnitVector(0.0, 0.0, 1.0), planar_vector(deg))
                v, _ = normalization_check(s, "quadrature")
                ok_n = abs(v - 1.0) <= 1e-6
                overall &= ok_n
                all_rows.append((m, f"norm quad theta={deg:g}", f"err={abs(v - 1.0):.2e}", ok_n))
    w_rows, w_ok = _verify_watches(args.seed)
    all_rows += [("watches",) + r for r in w_rows]
    overall &= w_ok
    if "B1" in models and "B2" in models:
        n = min(args.trials, 1_000_000)
        bins = []
        for kind in ("B1", "B2"):
            u, sig, tau = sample_joint_spin_outcomes(kind, n, args.seed)
            oct_idx = (u[:, 0] >= 0) * 4 + (u[:, 1] >= 0) * 2 + (u[:, 2] >= 0)
            cell = oct_idx * 4 + (1 - sig) + (1 - tau) // 2
            bins.append(np.bincount(cell, minlength=32))
        stat, p, dof = two_sample_chi_square(bins[0], bins[1])
        ok = p > P_THRESHOLD
        overall &= ok
        all_rows.append(("B1/B2", "equivalence in law", f"p={p:.4g}", ok))
    for row in all_rows:
        status = "PASS" if row[-1] else "FAIL"
        print(f"[{status}] " + " ".join(str(x) for x in row[:-1]))
    print("overall:", "PASS" if overall else "FAIL")
    return EXIT_OK if overall else EXIT_VERIFY


def _load_chsh_config(path) -> ChshConfig:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return ChshConfig(
        UnitVector.normalized(*doc["a"]),
        UnitVector.normalized(*doc["a_prime"]),
        UnitVector.normalized(*doc["b"]),
        UnitVector.normalized(*doc["b_prime"]),
    )


def cmd_chsh(args) -> int:
    if bool(args.config) == bool(args.optimize):
        raise UsageError("exactly one of --config or --optimize is required")
    if args.model not in MODEL_KINDS:
        raise UsageError(f"unknown model {args.model!r}")
    if args.optimize:
        opts = SearchOptions(
            mode=args.mode,
            coarse_deg=args.coarse_deg,
            trials_per_eval=args.trials,
        )
        result = maximize_chsh(args.model, opts, seed=args.seed)
        cfg, e = result.config, result.E
        print(f"angles_deg: {result.angles_deg}  evaluations: {result.evaluations}")
    else:
        cfg = _load_chsh_config(args.config)
        if args.mode == "analytic":
            res = chsh_analytic(args.model, cfg)
        else:
            tables = {}
            for lab, pair in cfg.pairs().items():
                tb, _ = run_experiment(args.model, ExperimentConfig(
                    trials=args.trials, seed=args.seed, settings_pairs=[(lab, pair)],
                    threads=_threads(args)))
                tables[lab] = tb[0]
            res = chsh(tables)
        e = res.E
        for lab in CHSH_LABELS:
            print(f"C({lab}) = {res.correlators[lab]:+.6f}")
    for name, v in (("a", cfg.a), ("a'", cfg.a_prime), ("b", cfg.b), ("b'", cfg.b_prime)):
        print(f"{name:2s} = ({v.x:+.6f}, {v.y:+.6f}, {v.z:+.6f})")
    print(f"E = {_f17(e)}")
    print("bounds: Bell 2, Cirel'son 2*sqrt(2) ~ 2.8284271, algebraic 4")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump({"metric": "chsh", "model": args.model, "mode": args.mode,
                       "E": e,
                       "config": {k: [v.x, v.y, v.z] for k, v in
                                  (("a", cfg.a), ("a_prime", cfg.a_prime),
                                   ("b", cfg.b), ("b_prime", cfg.b_prime))}},
                      fh, indent=2)
            fh.write("\n")
    return EXIT_OK


def _load_pairs_file(path):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    out = []
    for entry in doc:
        sa = SettingsPair(UnitVector.normalized(*entry[0]["n_L"]),
                          UnitVector.normalized(*entry[0]["n_R"]))
        sb = SettingsPair(UnitVector.normalized(*entry[1]["n_L"]),
                          UnitVector.normalized(*entry[1]["n_R"]))
        out.append((sa, sb))
    return out


def _grid_candidate_pairs(k: int, cap: int = 256):
    """Settings-pair candidates from a coplanar angle grid, capped to a
    deterministic subset so the continuous-density quadratures stay cheap."""
    degs = [180.0 * i / k for i in range(k)]
    settings = [
        SettingsPair(planar_vector(a), planar_vector(b))
        for a in degs
        for b in degs
        if a != b
    ]
    combos = [
        (settings[i], settings[j])
        for i in range(len(settings))
        for j in range(i + 1, len(settings))
    ]
    if len(combos) > cap:
        stride = len(combos) // cap + 1
        combos = combos[::stride]
    return combos


def cmd_freewill(args) -> int:
    if args.model not in MODEL_KINDS or args.model == "QM":
        raise UsageError("freewill needs a hidden-variable model: A, B1, B2, or C")
    if args.pairs:
        candidates = _load_pairs_file(args.pairs)
    else:
        candidates = _grid_candidate_pairs(args.grid)
    m, best_i = free_will_M(args.model, candidates)
    sa, sb = candidates[best_i]
    print(f"M = {_f17(m)}  (candidate {best_i} of {len(candidates)})")
    if args.model in ("B1", "B2"):
        print("quadrature error bar: <= 1e-6")
    for name, s in (("s ", sa), ("s'", sb)):
        print(f"{name} n_L=({s.n_L.x:+.4f},{s.n_L.y:+.4f},{s.n_L.z:+.4f})"
              f" n_R=({s.n_R.x:+.4f},{s.n_R.y:+.4f},{s.n_R.z:+.4f})")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump({"metric": "free_will_M", "model": args.model, "M": m},
                      fh, indent=2)
            fh.write("\n")
    return EXIT_OK


def cmd_audit(args) -> int:
    try:
        log = read_event_log(args.log)
    except (OSError, ValueError) as exc:
        print(f"cannot read event log: {exc}", file=sys.stderr)
        return EXIT_USAGE
    report = audit_locality(log, args.model)
    if report.passed:
        print(f"audit: PASS ({len(log)} messages, 0 violations)")
        return EXIT_OK
    print(f"audit: FAIL ({len(report.violations)} violations)")
    for seq, rule, desc in report.violations:
        print(f"  rule {rule} (seq {seq}): {desc}")
    return EXIT_AUDIT


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="singletsim",
        description="Monte Carlo simulator for communication-free hidden-variable "
                    "models of singlet correlations",
    )
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run trials and write counts CSV "
                         "(columns: model, pair_label, n_L xyz, n_R xyz, sigma, "
                         "tau, count, frequency, analytic)")
    sim.add_argument("--model", choices=MODEL_KINDS)
    sim.add_argument("--theta-deg", dest="theta_deg", type=float, nargs="+")
    sim.add_argument("--settings-file", dest="settings_file")
    sim.add_argument("--trials", type=int)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--out", required=True)
    sim.add_argument("--watch-driven", dest="watch_driven", action="store_const", const=True)
    sim.add_argument("--delta-t", dest="delta_t", type=float)
    sim.add_argument("--log-events", dest="log_events", action="store_true")
    sim.add_argument("--config", help="JSON config file; flags override its values")
    sim.add_argument("--threads", type=int)
    sim.set_defaults(func=cmd_simulate)

    ver = sub.add_parser("verify", help="verification suites: goodness of fit, "
                         "density normalization, watch round trips, B1/B2 equivalence")
    ver.add_argument("--model", required=True,
                     help="model kind or comma list, e.g. B1,B2")
    ver.add_argument("--grid", type=int, default=13)
    ver.add_argument("--trials", type=int, default=100_000)
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--inject-bias", dest="inject_bias", action="store_true",
                     help="debug: corrupt the counts so the suite must fail")
    ver.add_argument("--threads", type=int)
    ver.set_defaults(func=cmd_verify)

    ch = sub.add_parser("chsh", help="evaluate or optimize the Clauser-Horne parameter")
    ch.add_argument("--model", required=True)
    ch.add_argument("--config", help="JSON file with vectors a, a_prime, b, b_prime")
    ch.add_argument("--optimize", action="store_true")
    ch.add_argument("--mode", choices=("analytic", "empirical"), default="analytic")
    ch.add_argument("--coarse-deg", dest="coarse_deg", type=float, default=5.0)
    ch.add_argument("--trials", type=int, default=100_000)
    ch.add_argument("--seed", type=int, default=0)
    ch.add_argument("--out", help="also write a JSON metrics report")
    ch.add_argument("--threads", type=int)
    ch.set_defaults(func=cmd_chsh)

    fw = sub.add_parser("freewill", help="measurement-dependence measure M")
    fw.add_argument("--model", required=True)
    fw.add_argument("--pairs", help="JSON file with candidate settings-pair pairs")
    fw.add_argument("--grid", type=int, default=8)
    fw.add_argument("--out", help="also write a JSON metrics report")
    fw.set_defaults(func=cmd_freewill)

    au = sub.add_parser("audit", help="check an event log for locality violations")
    au.add_argument("--log", required=True)
    au.add_argument("--model", default="A",
                    help="model the log came from (QM logs carry no balls)")
    au.set_defaults(func=cmd_audit)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; remap to the documented code
        return EXIT_USAGE if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SamplerFailure, QuadratureError, ProtocolIntegrityError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
