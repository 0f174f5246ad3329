"""Synchronized-watch substrate: two-hand watches with incommensurable
periods, mirrored counterclockwise twins, the hand-phase-to-vector map, and
the time-of-flight correction that lets a receiver reconstruct the sender's
reading without any message.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from typing import Optional

from .geometry import UnitVector, from_angles

CLOCKWISE = "clockwise"
COUNTERCLOCKWISE = "counterclockwise"

# sqrt of distinct primes: pairwise irrational period ratios by construction.
DEFAULT_PERIODS = {
    "H": (60.0 * math.sqrt(2.0), 720.0 * math.sqrt(3.0)),
    "T": (60.0 * math.sqrt(5.0), 720.0 * math.sqrt(7.0)),
    "0": (60.0 * math.sqrt(11.0), 720.0 * math.sqrt(13.0)),
}


@dataclass(frozen=True)
class WatchSpec:
    """One two-hand watch: hand periods in seconds, rotation direction, and the
    epoch at which both hands sit on the conventional zero."""

    period_small: float
    period_large: float
    direction: str = CLOCKWISE
    epoch: float = 0.0

    def __post_init__(self):
        if self.period_small <= 0.0 or self.period_large <= 0.0:
            raise ValueError("hand periods must be strictly positive")
        if self.period_small == self.period_large:
            raise ValueError("hand periods must be distinct")
        if self.direction not in (CLOCKWISE, COUNTERCLOCKWISE):
            raise ValueError(f"unknown direction: {self.direction}")

    def mirrored(self) -> "WatchSpec":
        """The counterclockwise twin (or clockwise, if this watch is the twin)."""
        other = COUNTERCLOCKWISE if self.direction == CLOCKWISE else CLOCKWISE
        return WatchSpec(self.period_small, self.period_large, other, self.epoch)


@dataclass(frozen=True)
class HandPhases:
    """Fractional hand positions, each in [0, 1)."""

    phase_small: float
    phase_large: float

    def __post_init__(self):
        for p in (self.phase_small, self.phase_large):
            if not 0.0 <= p < 1.0:
                raise ValueError(f"phase outside [0, 1): {p}")


@dataclass(frozen=True)
class WatchBank:
    """The pitcher's clockwise watches: H and T for the coin-selected setting,
    plus the optional free-ticking spin watch used by the batter-conditioned
    realization."""

    watch_H: WatchSpec
    watch_T: WatchSpec
    watch_0: Optional[WatchSpec] = None

    def __post_init__(self):
        periods = [
            self.watch_H.period_small,
            self.watch_H.period_large,
            self.watch_T.period_small,
            self.watch_T.period_large,
        ]
        report = check_incommensurable(periods)
        if not report.passed:
            raise ValueError(
                "watch periods are commensurable: " + "; ".join(report.failures)
            )

    @staticmethod
    def default(epoch: float = 0.0) -> "WatchBank":
        mk = lambda k: WatchSpec(*DEFAULT_PERIODS[k], CLOCKWISE, epoch)
        return WatchBank(mk("H"), mk("T"), mk("0"))


@dataclass
class IncommensurabilityReport:
    passed: bool
    failures: list = field(default_factory=list)


def _frac(x: float) -> float:
    f = x - math.floor(x)
    return f if f < 1.0 else 0.0


def read_phases(w: WatchSpec, t: float) -> HandPhases:
    """Hand phases of watch ``w`` at simulation time ``t``.

    Counterclockwise watches run backwards, so a mirrored pair conserves
    phase_cw + phase_ccw = 0 (mod 1) for each hand at every instant.
    """
    if not math.isfinite(t):
        raise ValueError("time must be finite")
    s = 1.0 if w.direction == CLOCKWISE else -1.0
    return HandPhases(
        _frac(s * (t - w.epoch) / w.period_small),
        _frac(s * (t - w.epoch) / w.period_large),
    )


def phases_to_vector(p: HandPhases) -> UnitVector:
    """Map hand phases to a unit vector: small hand gives the azimuth, large
    hand the area-uniform polar coordinate cos(theta) = 2*phase - 1.

    This pushes the uniform torus measure to the uniform sphere measure, which
    is what the equidistribution arguments need.
    """
    phi = _frac(p.phase_small) * 2.0 * math.pi
    ct = min(1.0, max(-1.0, 2.0 * p.phase_large - 1.0))
    return from_angles(math.acos(ct), phi)


def pitcher_vector(bank: WatchBank, coin_w: str, t_pitch: float) -> UnitVector:
    """The setting vector the pitcher reads off its coin-selected watch."""
    if coin_w == "H":
        w = bank.watch_H
    elif coin_w == "T":
        w = bank.watch_T
    else:
        raise ValueError(f"coin must be 'H' or 'T', got {coin_w!r}")
    return phases_to_vector(read_phases(w, t_pitch))


def batter_vector(mirror: WatchSpec, t_arrival: float, delta_t: float) -> UnitVector:
    """Reconstruct the pitch-time vector from a mirrored watch at arrival time.

    The mirror reads r_h = frac(-(t_arrival - epoch)/tau_h); negating and
    subtracting the time of flight gives frac((t_arrival - delta_t - epoch)/tau_h),
    the clockwise pitcher phase at t_pitch = t_arrival - delta_t.  No message
    carries any of this: the correction uses only the local watch and delta_t.
    """
    if delta_t < 0.0:
        raise ValueError("time of flight must be non-negative")
    if mirror.direction != COUNTERCLOCKWISE:
        raise ValueError("batter watches must be counterclockwise mirrors")
    raw = read_phases(mirror, t_arrival)
    ps = _frac(-(raw.phase_small + delta_t / mirror.period_small))
    pl = _frac(-(raw.phase_large + delta_t / mirror.period_large))
    return phases_to_vector(HandPhases(ps, pl))


def _frac_array(x):
    f = x - np.floor(x)
    return np.where(f >= 1.0, 0.0, f)


def watch_vectors_array(w: WatchSpec, t) -> np.ndarray:
    """Vectorized pitcher-side read: setting vectors of watch ``w`` at an array
    of times, shape (n, 3)."""
    t = np.asarray(t, dtype=float)
    s = 1.0 if w.direction == CLOCKWISE else -1.0
    ps = _frac_array(s * (t - w.epoch) / w.period_small)
    pl = _frac_array(s * (t - w.epoch) / w.period_large)
    phi = 2.0 * math.pi * ps
    ct = np.clip(2.0 * pl - 1.0, -1.0, 1.0)
    st = np.sqrt(1.0 - ct * ct)
    return np.column_stack([st * np.cos(phi), st * np.sin(phi), ct])


def batter_vectors_array(mirror: WatchSpec, t_arrival, delta_t) -> np.ndarray:
    """Vectorized twin of batter_vector; delta_t may be scalar or per-element."""
    delta_t = np.asarray(delta_t, dtype=float)
    if np.any(delta_t < 0.0):
        raise ValueError("time of flight must be non-negative")
    if mirror.direction != COUNTERCLOCKWISE:
        raise ValueError("batter watches must be counterclockwise mirrors")
    t_arrival = np.asarray(t_arrival, dtype=float)
    out = []
    for tau in (mirror.period_small, mirror.period_large):
        r = _frac_array(-(t_arrival - mirror.epoch) / tau)
        out.append(_frac_array(-(r + delta_t / tau)))
    ps, pl = out
    phi = 2.0 * math.pi * ps
    ct = np.clip(2.0 * pl - 1.0, -1.0, 1.0)
    st = np.sqrt(1.0 - ct * ct)
    return np.column_stack([st * np.cos(phi), st * np.sin(phi), ct])


def check_incommensurable(
    periods, max_den: int = 64, tol: float = 1e-9
) -> IncommensurabilityReport:
    """Check that no pair of periods has a ratio within ``tol`` of a rational
    p/q with p, q <= ``max_den``.

    Failure is a report, not an exception; construction-time validation decides
    what to do with it.
    """
    periods = list(periods)
    if len(periods) < 2:
        raise ValueError("need at least two periods")
    failures = []
    for i in range(len(periods)):
        for j in range(i + 1, len(periods)):
            r = periods[i] / periods[j]
            for q in range(1, max_den + 1):
                p = round(r * q)
                if 1 <= p <= max_den and abs(r - p / q) <= tol:
                    failures.append(
                        f"periods[{i}]/periods[{j}] = {r!r} ~ {p}/{q}"
                    )
                    break
    return IncommensurabilityReport(passed=not failures, failures=failures)
