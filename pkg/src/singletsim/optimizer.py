"""Search over measurement configurations maximizing the four-correlator
CHSH parameter per model.

All model correlators depend only on pairwise dot products, so a common plane
suffices to reach the optimum and one angle can be pinned by a global
rotation: the search space is the three free coplanar angles.  The mixed
model's objective is piecewise constant, so the search is derivative-free:
a coarse grid followed by pattern-search refinement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import UnitVector
from .metrics import ChshConfig, chsh, chsh_analytic
from .models import MODEL_KINDS
from .protocol import ExperimentConfig, run_experiment

_EPS = 1e-12


@dataclass(frozen=True)
class SearchOptions:
    mode: str = "analytic"  # 'analytic' or 'empirical'
    coarse_deg: float = 15.0
    refine_iters: int = 40
    trials_per_eval: int = 10_000
    plane_restricted: bool = True
    empirical_top_k: int = 3

    def __post_init__(self):
        if self.mode not in ("analytic", "empirical"):
            raise ValueError(f"unknown search mode: {self.mode!r}")
        if abs(360.0 / self.coarse_deg - round(360.0 / self.coarse_deg)) > 1e-9:
            raise ValueError("coarse grid resolution must divide 360 degrees")
        if self.refine_iters < 0:
            raise ValueError("refinement iterations must be >= 0")
        if not self.plane_restricted:
            raise ValueError("only the coplanar parametrization is implemented")


@dataclass
class SearchResult:
    config: ChshConfig
    E: float
    angles_deg: tuple
    evaluations: int
    mode: str


def planar_vector(angle_deg: float) -> UnitVector:
    a = math.radians(angle_deg)
    return UnitVector.normalized(math.sin(a), 0.0, math.cos(a))


def config_from_angles(a, a_p, b, b_p) -> ChshConfig:
    return ChshConfig(
        planar_vector(a), planar_vector(a_p), planar_vector(b), planar_vector(b_p)
    )


def _correlator_grid(kind: str, diff_rad: np.ndarray) -> np.ndarray:
    c = np.cos(diff_rad)
    if kind == "C":
        return -np.where(c >= 0.0, 1.0, -1.0)
    return -c


def _objective(kind: str, angles_deg) -> tuple:
    """(E, margin) for one coplanar configuration; the margin is the smallest
    |cos| over the four pairs, used to break plateau ties away from the sign
    boundaries."""
    a, ap, b, bp = (math.radians(x) for x in angles_deg)
    diffs = np.array([a - b, ap - b, a - bp, ap - bp])
    cs = _correlator_grid(kind, diffs)
    e = abs(cs[0] + cs[1] + cs[2] - cs[3])
    margin = float(np.min(np.abs(np.cos(diffs))))
    return float(e), margin


def _coarse_scan(kind: str, step_deg: float):
    """Exhaustive coplanar scan with the first angle pinned at 0; returns the
    best (E, margin, angles) in deterministic lexicographic order."""
    grid = np.arange(0.0, 360.0, step_deg)
    k = grid.size
    rad = np.radians(grid)
    best = (-1.0, -1.0, (0.0, 0.0, 0.0, 0.0))
    evals = 0
    cos_b = np.cos(-rad)  # a = 0 against every b
    for ap in rad:
        c1 = _correlator_grid(kind, -rad)          # C(0, b)
        c2 = _correlator_grid(kind, ap - rad)      # C(a', b)
        c3 = _correlator_grid(kind, -rad)          # C(0, b')
        c4 = _correlator_grid(kind, ap - rad)      # C(a', b')
        e = np.abs(c1[:, None] + c2[:, None] + c3[None, :] - c4[None, :])
        m = np.minimum.reduce([
            np.abs(cos_b)[:, None] + np.zeros((1, k)),
            np.abs(np.cos(ap - rad))[:, None] + np.zeros((1, k)),
            np.zeros((k, 1)) + np.abs(cos_b)[None, :],
            np.zeros((k, 1)) + np.abs(np.cos(ap - rad))[None, :],
        ])
        evals += k * k
        # scan the plateau of the max for the largest margin, lexicographic first
        emax = e.max()
        ties = np.argwhere(e >= emax - _EPS)
        mi = ties[np.argmax(m[ties[:, 0], ties[:, 1]])]
        cand_e = float(e[mi[0], mi[1]])
        cand_m = float(m[mi[0], mi[1]])
        if cand_e > best[0] + _EPS or (
            abs(cand_e - best[0]) <= _EPS and cand_m > best[1] + _EPS
        ):
            best = (cand_e, cand_m,
                    (0.0, math.degrees(ap), float(grid[mi[0]]), float(grid[mi[1]])))
    return best, evals


def _pattern_search(kind: str, angles, step_deg: float, iters: int):
    """Coordinate pattern search on the three free angles; no derivatives."""
    x = list(angles)
    fe, fm = _objective(kind, x)
    evals = 0
    step = step_deg
    for _ in range(iters):
        improved = False
        for i in range(1, 4):
            for delta in (step, -step):
                cand = list(x)
                cand[i] = (cand[i] + delta) % 360.0
                ce, cm = _objective(kind, cand)
                evals += 1
                if ce > fe + _EPS or (abs(ce - fe) <= _EPS and cm > fm + _EPS):
                    x, fe, fm = cand, ce, cm
                    improved = True
        if not improved:
            step *= 0.5
            if step < 1e-7:
                break
    return (fe, fm, tuple(x)), evals


def _empirical_E(kind: str, config: ChshConfig, trials: int, seed: int):
    tables = {}
    for lab, pair in config.pairs().items():
        tb, _ = run_experiment(
            kind, ExperimentConfig(trials=trials, seed=seed, settings_pairs=[(lab, pair)])
        )
        tables[lab] = tb[0]
    return chsh(tables).E


def maximize_chsh(kind: str, opts: SearchOptions = SearchOptions(), seed: int = 0) -> SearchResult:
    """Best CHSH configuration found for the model, with its E.

    Analytic mode scores candidates on the model's analytic correlators;
    empirical mode re-scores the analytically best candidates end-to-end
    through the trial protocol.
    """
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind: {kind!r}")
    (e, m, angles), evals = _coarse_scan(kind, opts.coarse_deg)
    candidates = [(e, m, angles)]
    if opts.refine_iters > 0:
        refined, extra = _pattern_search(kind, angles, opts.coarse_deg / 2.0, opts.refine_iters)
        evals += extra
        candidates.append(refined)
    candidates.sort(key=lambda t: (-t[0], -t[1]))

    if opts.mode == "analytic":
        e, m, angles = candidates[0]
        cfg = config_from_angles(*angles)
        return SearchResult(cfg, chsh_analytic(kind, cfg).E, angles, evals, "analytic")

    best = None
    for e, m, angles in candidates[: opts.empirical_top_k]:
        cfg = config_from_angles(*angles)
        emp = _empirical_E(kind, cfg, opts.trials_per_eval, seed)
        evals += 4 * opts.trials_per_eval
        if best is None or emp > best[0] + _EPS:
            best = (emp, angles, cfg)
    emp, angles, cfg = best
    return SearchResult(cfg, emp, angles, evals, "empirical")
