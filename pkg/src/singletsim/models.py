"""Hidden-variable models and the quantum reference law.

Model A: the spin pair is pinned to one of four setting-aligned atoms and the
         bats respond linearly in n.u.
Model B: the Hall construction, with a continuous setting-conditioned spin
         density and deterministic responses; realized either with the spin
         conditioned on the settings (B1) or the settings conditioned on a
         free-ticking spin (B2).
Model C: model A's atomic spin density combined with the deterministic
         responses, which pushes the correlator to a pure sign.
QM:      the analytic singlet law, used as reference and as a direct sampler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .geometry import UnitVector, dot, sign, sign_array, sample_uniform_sphere_array

MODEL_KINDS = ("A", "B1", "B2", "C", "QM")

FOUR_PI = 4.0 * math.pi


class SamplerFailure(RuntimeError):
    """Rejection sampler exhausted its proposal budget; the bound is broken."""


@dataclass(frozen=True)
class SettingsPair:
    """Bat orientations for the left and right stations."""

    n_L: UnitVector
    n_R: UnitVector

    def cos_angle(self) -> float:
        return dot(self.n_L, self.n_R)


@dataclass(frozen=True)
class HiddenState:
    """The pitched pair: left ball spins along u, right ball along -u.

    The partner spin is always derived, never stored, so the anti-alignment
    constraint cannot drift.
    """

    u: UnitVector

    @property
    def v(self) -> UnitVector:
        return -self.u


@dataclass(frozen=True)
class CoinPair:
    """The pitcher's two fair coins: watch choice w and pitch direction d."""

    w: str  # 'H' or 'T'
    d: int  # +1 or -1

    def __post_init__(self):
        if self.w not in ("H", "T"):
            raise ValueError(f"watch coin must be 'H' or 'T', got {self.w!r}")
        if self.d not in (1, -1):
            raise ValueError(f"direction coin must be +1 or -1, got {self.d!r}")


@dataclass(frozen=True)
class DensityEval:
    """A point evaluation of the Hall density: the sign-weighted overlap f and
    the density per steradian."""

    f: float
    value: float


def response_linear(sigma: int, n: UnitVector, u: UnitVector) -> float:
    """Probability of outcome sigma for a ball spinning along u and a bat along n."""
    return 0.5 * (1.0 + sigma * dot(n, u))


def response_deterministic(n: UnitVector, u: UnitVector) -> int:
    """Deterministic outcome sign(u.n), with the sign(0) = +1 convention."""
    return sign(dot(u, n))


def sample_hidden_A(s: SettingsPair, coins: CoinPair) -> HiddenState:
    """Model A hidden state: u = d * n_w with the index identification
    H = right, T = left.  Fair coins give each of the four atoms weight 1/4."""
    n_w = s.n_R if coins.w == "H" else s.n_L
    return HiddenState(n_w if coins.d == 1 else -n_w)


def hall_f(u: UnitVector, s: SettingsPair) -> float:
    """The sign-weighted setting overlap sgn(u.n_L) * sgn(-u.n_R) * n_L.n_R."""
    return sign(dot(u, s.n_L)) * sign(-dot(u, s.n_R)) * s.cos_angle()


def hall_g(f: float) -> float:
    """Density amplitude (1 - f) / (8 arccos f), with the limits g(1) = 0 and
    g(-1) = 1/(4 pi) taken explicitly."""
    if f >= 1.0:
        return 0.0
    if f <= -1.0:
        return 1.0 / FOUR_PI
    return (1.0 - f) / (8.0 * math.acos(f))


def hall_g_array(f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    out = np.empty_like(f)
    hi = f >= 1.0
    lo = f <= -1.0
    mid = ~(hi | lo)
    out[hi] = 0.0
    out[lo] = 1.0 / FOUR_PI
    out[mid] = (1.0 - f[mid]) / (8.0 * np.arccos(f[mid]))
    return out


def hall_density(u: UnitVector, s: SettingsPair) -> DensityEval:
    """The Hall spin density at u for settings s, per steradian."""
    f = hall_f(u, s)
    return DensityEval(f=f, value=hall_g(f))


@lru_cache(maxsize=1)
def rejection_bound() -> float:
    """Global bound on hall_g over [-1, 1], found by golden-section search and
    inflated by 1% so no proposal is ever silently truncated.

    Never hard-code this number: it is derived at runtime.
    """
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = -1.0, 1.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = hall_g(c), hall_g(d)
    while b - a > 1e-10:
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = hall_g(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = hall_g(d)
    return 1.01 * max(fc, fd)


_PROPOSAL_CAP = 10**6


def sample_hidden_B1_array(
    s: SettingsPair, rng: np.random.Generator, n: int
) -> np.ndarray:
    """n spins from the Hall density for settings s, as an (n, 3) array.

    Rejection sampling with a uniform proposal on S2; the acceptance rate is
    1/(4 pi U) ~ 0.87, so the loop terminates fast unless the bound is broken.
    """
    bound = rejection_bound()
    nl = s.n_L.as_array()
    nr = s.n_R.as_array()
    c = s.cos_angle()
    out = np.empty((n, 3))
    got = 0
    proposed = 0
    cap = _PROPOSAL_CAP * max(1, n)
    while got < n:
        batch = max(256, int(1.3 * (n - got)))
        proposed += batch
        if proposed > cap:
            raise SamplerFailure("hall-density sampler exceeded its proposal budget")
        u = sample_uniform_sphere_array(rng, batch)
        f = sign_array(u @ nl) * sign_array(-(u @ nr)) * c
        accept = rng.uniform(0.0, bound, size=batch) < hall_g_array(f)
        acc = u[accept]
        take = min(n - got, acc.shape[0])
        out[got : got + take] = acc[:take]
        got += take
    return out


def sample_hidden_B1(s: SettingsPair, rng: np.random.Generator) -> HiddenState:
    u = sample_hidden_B1_array(s, rng, 1)[0]
    return HiddenState(UnitVector.from_array(u))


def sample_settings_B2_array(
    u: UnitVector, rng: np.random.Generator, n: int
) -> tuple[np.ndarray, np.ndarray]:
    """n settings pairs from the spin-conditioned density
    (1/4 pi) * Pi(u | n_L, n_R) on S2 x S2, as two (n, 3) arrays.

    Same rejection scheme as the B1 sampler: the density differs from the
    uniform product only through hall_g, so the same bound applies.
    """
    bound = rejection_bound()
    ua = u.as_array()
    out_l = np.empty((n, 3))
    out_r = np.empty((n, 3))
    got = 0
    proposed = 0
    cap = _PROPOSAL_CAP * max(1, n)
    while got < n:
        batch = max(256, int(1.3 * (n - got)))
        proposed += batch
        if proposed > cap:
            raise SamplerFailure("settings sampler exceeded its proposal budget")
        nl = sample_uniform_sphere_array(rng, batch)
        nr = sample_uniform_sphere_array(rng, batch)
        c = np.clip(np.einsum("ij,ij->i", nl, nr), -1.0, 1.0)
        f = sign_array(nl @ ua) * sign_array(-(nr @ ua)) * c
        accept = rng.uniform(0.0, bound, size=batch) < hall_g_array(f)
        take = min(n - got, int(accept.sum()))
        out_l[got : got + take] = nl[accept][:take]
        out_r[got : got + take] = nr[accept][:take]
        got += take
    return out_l, out_r


def sample_settings_B2(u: UnitVector, rng: np.random.Generator) -> SettingsPair:
    nl, nr = sample_settings_B2_array(u, rng, 1)
    return SettingsPair(UnitVector.from_array(nl[0]), UnitVector.from_array(nr[0]))


def joint_analytic(kind: str, sigma: int, tau: int, s: SettingsPair) -> float:
    """Analytic joint outcome probability P(sigma, tau | n_L, n_R).

    Models A, B1, B2 and the quantum reference share the singlet law
    (1 - sigma tau n_L.n_R)/4; model C replaces the dot product by its sign.
    """
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind: {kind!r}")
    c = s.cos_angle()
    if kind == "C":
        c = float(sign(c))
    return 0.25 * (1.0 - sigma * tau * c)
