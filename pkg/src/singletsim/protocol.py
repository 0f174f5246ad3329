"""Three communication-free agents (pitcher, two batters) composed into
trials, plus the event log and auditor that make the no-communication claim
testable.

Two execution paths share one statistical law:

* the logged path runs trials one by one through :func:`run_trial`, with each
  agent drawing from its own counter-based stream keyed by
  (experiment_seed, trial_id, role), and records every message;
* the bulk path vectorizes whole chunks of trials per settings pair for the
  million-trial verification runs, with chunk-keyed streams.

Both are pure functions of (config, seed); the bulk path trades per-trial
stream granularity for throughput and is used only when no event log is
requested.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import watches as wt
from .geometry import UnitVector, sample_uniform_sphere, sign_array
from .models import (
    CoinPair,
    HiddenState,
    MODEL_KINDS,
    SettingsPair,
    joint_analytic,
    response_deterministic,
    response_linear,
    sample_hidden_A,
    sample_hidden_B1,
    sample_hidden_B1_array,
    sample_settings_B2,
)

PITCHER = "pitcher"
BATTER_L = "batter_L"
BATTER_R = "batter_R"
COORDINATOR = "coordinator"

OUTCOMES = ((1, 1), (1, -1), (-1, 1), (-1, -1))

SETTING_AGREEMENT_TOL = 1e-9

_CHUNK = 1 << 17


class ProtocolIntegrityError(RuntimeError):
    """Batter-side and pitcher-side setting reconstruction disagreed."""


@dataclass
class ExperimentConfig:
    """Everything a run depends on; together with the model kind this is the
    full reproducibility contract."""

    trials: int
    seed: int
    settings_pairs: list[tuple[str, SettingsPair]] = field(default_factory=list)
    watch_driven: bool = False
    delta_t: float = 1.5
    bank: wt.WatchBank = field(default_factory=wt.WatchBank.default)
    # mean spacing between pitches; much larger than any hand period so each
    # trial's hand phases are effectively fresh uniform draws, and strictly
    # increasing in trial id so the event log stays time-ordered
    pitch_gap: float = 1.0e5
    log_events: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not self.watch_driven and not self.settings_pairs:
            raise ValueError("fixed-settings mode needs at least one settings pair")


@dataclass(frozen=True)
class TrialRecord:
    trial_id: int
    model: str
    t_pitch: float
    delta_t: float
    settings: SettingsPair
    hidden: Optional[HiddenState]
    coins: Optional[CoinPair]
    outcome_L: int
    outcome_R: int
    seed: int


@dataclass(frozen=True)
class Message:
    seq: int
    t_send: float
    sender: str
    receiver: str
    kind: str  # 'ball' or 'result_report'
    payload: dict


@dataclass
class EventLog:
    messages: list = field(default_factory=list)

    def append(self, t_send: float, sender: str, receiver: str, kind: str, payload: dict):
        self.messages.append(
            Message(len(self.messages), t_send, sender, receiver, kind, payload)
        )

    def __iter__(self):
        return iter(self.messages)

    def __len__(self):
        return len(self.messages)


@dataclass
class CountTable:
    """Outcome counts for one settings pair (or one free-running stream)."""

    label: str
    model: str
    settings: Optional[SettingsPair]
    counts: dict

    @property
    def n_total(self) -> int:
        return sum(self.counts.values())

    def frequency(self, sigma: int, tau: int) -> float:
        return self.counts.get((sigma, tau), 0) / self.n_total

    def analytic(self, sigma: int, tau: int) -> float:
        # Free-running settings equidistribute to independent uniforms, whose
        # average law is flat over the four cells.
        if self.settings is None:
            return 0.25
        return joint_analytic(self.model, sigma, tau, self.settings)


@dataclass
class AuditReport:
    passed: bool
    violations: list = field(default_factory=list)


def agent_stream(seed: int, trial_id: int, role: str) -> np.random.Generator:
    """Counter-based stream for one agent in one trial: each agent's
    randomness is locally generated, never shared at runtime."""
    digest = hashlib.sha256(f"{seed}:{trial_id}:{role}".encode()).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest[:16], "little")))


def _bulk_stream(seed: int, tag: str, chunk: int) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:bulk:{tag}:{chunk}".encode()).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest[:16], "little")))


def _trial_settings(kind, config, trial_id, t_pitch):
    """Per-trial settings as seen by each side.

    Returns (pitcher_view, batter_view).  In watch-driven mode both sides
    read their own watches and must agree without any message; in fixed mode
    the pinned orientations are shared pre-trial state.
    """
    if config.watch_driven:
        t_arrival = t_pitch + config.delta_t
        b_L = UnitVector.from_array(
            wt.batter_vectors_array(config.bank.watch_T.mirrored(), [t_arrival], config.delta_t)[0]
        )
        b_R = UnitVector.from_array(
            wt.batter_vectors_array(config.bank.watch_H.mirrored(), [t_arrival], config.delta_t)[0]
        )
        p_L = wt.pitcher_vector(config.bank, "T", t_pitch)
        p_R = wt.pitcher_vector(config.bank, "H", t_pitch)
        for p, b in ((p_L, b_L), (p_R, b_R)):
            err = max(abs(p.x - b.x), abs(p.y - b.y), abs(p.z - b.z))
            if err > SETTING_AGREEMENT_TOL:
                raise ProtocolIntegrityError(
                    f"watch round-trip mismatch {err:.3e} at trial {trial_id}"
                )
        return SettingsPair(p_L, p_R), SettingsPair(b_L, b_R)
    pair = config.settings_pairs[0][1]
    return pair, pair


def run_trial(kind: str, config: ExperimentConfig, trial_id: int):
    """Execute one pitch-bat-report cycle; returns (TrialRecord, messages).

    Deterministic in (kind, config, seed, trial_id).  In fixed-settings mode
    the first configured pair is the active one; run_experiment rotates pairs
    by building per-pair configs.
    """
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind: {kind!r}")
    if trial_id < 0:
        raise ValueError("trial_id must be >= 0")
    seed = config.seed
    rng_p = agent_stream(seed, trial_id, PITCHER)
    rng_l = agent_stream(seed, trial_id, BATTER_L)
    rng_r = agent_stream(seed, trial_id, BATTER_R)
    rng_c = agent_stream(seed, trial_id, COORDINATOR)

    epoch = config.bank.watch_H.epoch
    t_pitch = epoch + (trial_id + rng_p.uniform()) * config.pitch_gap
    t_arrival = t_pitch + config.delta_t
    messages = []
    coins = None
    hidden = None

    if kind == "B2" and config.watch_driven:
        # Free-ticking spin watch gives a uniform spin; the coordinator
        # realizes the clock coupling by installing the settings into the
        # batters' watches before the trial (shared state, not a message).
        u = sample_uniform_sphere(rng_p)
        settings = sample_settings_B2(u, rng_c)
        hidden = HiddenState(u)
    else:
        pitcher_settings, batter_settings = _trial_settings(
            kind, config, trial_id, t_pitch
        )
        if kind in ("A", "C"):
            w = "H" if rng_p.integers(0, 2) == 1 else "T"
            d = 1 if rng_p.integers(0, 2) == 1 else -1
            coins = CoinPair(w, d)
            hidden = sample_hidden_A(pitcher_settings, coins)
        elif kind in ("B1", "B2"):
            # fixed-settings B2 conditions the clock coupling on the pinned
            # settings, which is the same spin law as B1
            hidden = sample_hidden_B1(pitcher_settings, rng_p)
        settings = batter_settings

    if kind == "QM":
        probs = [joint_analytic("QM", s, t, settings) for s, t in OUTCOMES]
        out_l, out_r = OUTCOMES[rng_c.choice(4, p=probs)]
        messages.append((t_arrival, BATTER_L, COORDINATOR, "result_report",
                         {"trial_id": trial_id, "outcome": out_l}))
        messages.append((t_arrival, BATTER_R, COORDINATOR, "result_report",
                         {"trial_id": trial_id, "outcome": out_r}))
    else:
        u = hidden.u
        v = hidden.v
        for receiver, spin in ((BATTER_L, u), (BATTER_R, v)):
            messages.append((t_pitch, PITCHER, receiver, "ball",
                             {"trial_id": trial_id,
                              "spin": [spin.x, spin.y, spin.z],
                              "t_pitch": t_pitch,
                              "delta_t": config.delta_t}))
        if kind == "A":
            out_l = 1 if rng_l.uniform() < response_linear(1, settings.n_L, u) else -1
            out_r = 1 if rng_r.uniform() < response_linear(1, settings.n_R, v) else -1
        else:
            out_l = response_deterministic(settings.n_L, u)
            out_r = response_deterministic(settings.n_R, v)
        messages.append((t_arrival, BATTER_L, COORDINATOR, "result_report",
                         {"trial_id": trial_id, "outcome": out_l}))
        messages.append((t_arrival, BATTER_R, COORDINATOR, "result_report",
                         {"trial_id": trial_id, "outcome": out_r}))

    record = TrialRecord(
        trial_id=trial_id,
        model=kind,
        t_pitch=t_pitch,
        delta_t=config.delta_t,
        settings=settings,
        hidden=hidden,
        coins=coins,
        outcome_L=out_l,
        outcome_R=out_r,
        seed=seed,
    )
    return record, messages


def _empty_counts():
    return {k: 0 for k in OUTCOMES}


def _bulk_counts_fixed(kind, pair, n, seed, tag, chunk0, nchunks):
    """Counts for one fixed settings pair over chunks [chunk0, chunk0+nchunks)."""
    nl = pair.n_L.as_array()
    nr = pair.n_R.as_array()
    counts = np.zeros(4, dtype=np.int64)
    done = 0
    for ci in range(nchunks):
        k = min(_CHUNK, n - done)
        done += k
        rng = _bulk_stream(seed, tag, chunk0 + ci)
        if kind in ("A", "C"):
            w = rng.integers(0, 2, size=k)  # 1 -> H (right), 0 -> T (left)
            d = np.where(rng.integers(0, 2, size=k) == 1, 1.0, -1.0)
            u = d[:, None] * np.where(w[:, None] == 1, nr, nl)
        if kind == "A":
            sig = np.where(rng.uniform(size=k) < 0.5 * (1.0 + u @ nl), 1, -1)
            tau = np.where(rng.uniform(size=k) < 0.5 * (1.0 - u @ nr), 1, -1)
        elif kind == "C":
            sig = sign_array(u @ nl)
            tau = sign_array(-(u @ nr))
        elif kind in ("B1", "B2"):
            u = sample_hidden_B1_array(pair, rng, k)
            sig = sign_array(u @ nl)
            tau = sign_array(-(u @ nr))
        elif kind == "QM":
            probs = [joint_analytic("QM", s, t, pair) for s, t in OUTCOMES]
            cells = rng.choice(4, size=k, p=probs)
            counts += np.bincount(cells, minlength=4)
            continue
        else:
            raise ValueError(f"unknown model kind: {kind!r}")
        cell = (1 - sig) + (1 - tau) // 2  # (+,+)=0 (+,-)=1 (-,+)=2 (-,-)=3
        counts += np.bincount(cell, minlength=4)
    return counts


def _bulk_counts_free(kind, config, seed, tag, chunk0, nchunks, n):
    """Counts for a free-running (watch-driven) stream of n trials."""
    bank = config.bank
    counts = np.zeros(4, dtype=np.int64)
    done = 0
    for ci in range(nchunks):
        k = min(_CHUNK, n - done)
        done += k
        rng = _bulk_stream(seed, tag, chunk0 + ci)
        ids = np.arange((chunk0 + ci) * _CHUNK, (chunk0 + ci) * _CHUNK + k)
        t = bank.watch_H.epoch + (ids + rng.uniform(size=k)) * config.pitch_gap
        t_arr = t + config.delta_t
        nl = wt.batter_vectors_array(bank.watch_T.mirrored(), t_arr, config.delta_t)
        nr = wt.batter_vectors_array(bank.watch_H.mirrored(), t_arr, config.delta_t)
        c = np.clip(np.einsum("ij,ij->i", nl, nr), -1.0, 1.0)
        if kind in ("A", "C"):
            w = rng.integers(0, 2, size=k)
            d = np.where(rng.integers(0, 2, size=k) == 1, 1.0, -1.0)
            u = d[:, None] * np.where(w[:, None] == 1, nr, nl)
        elif kind == "B1":
            u = _hall_sample_varying(nl, nr, c, rng)
        elif kind == "B2":
            u = _b2_free_sample(rng, k)
            nl, nr = _b2_settings_for(u, rng)
            c = np.clip(np.einsum("ij,ij->i", nl, nr), -1.0, 1.0)
        elif kind == "QM":
            pstack = 0.25 * (1.0 - np.outer([1.0, -1.0, -1.0, 1.0], c)).T
            cum = np.cumsum(pstack, axis=1)
            r = rng.uniform(size=k)[:, None]
            cells = (r >= cum).sum(axis=1)
            counts += np.bincount(cells, minlength=4)
            continue
        else:
            raise ValueError(f"unknown model kind: {kind!r}")
        if kind == "A":
            ul = np.einsum("ij,ij->i", u, nl)
            ur = np.einsum("ij,ij->i", u, nr)
            sig = np.where(rng.uniform(size=k) < 0.5 * (1.0 + ul), 1, -1)
            tau = np.where(rng.uniform(size=k) < 0.5 * (1.0 - ur), 1, -1)
        else:
            sig = sign_array(np.einsum("ij,ij->i", u, nl))
            tau = sign_array(-np.einsum("ij,ij->i", u, nr))
        cell = (1 - sig) + (1 - tau) // 2
        counts += np.bincount(cell, minlength=4)
    return counts


def _hall_sample_varying(nl, nr, c, rng):
    """Vectorized Hall-density rejection with per-row settings."""
    from .models import hall_g_array, rejection_bound

    bound = rejection_bound()
    k = nl.shape[0]
    u = np.empty((k, 3))
    pending = np.arange(k)
    rounds = 0
    while pending.size:
        rounds += 1
        if rounds > 10_000:
            from .models import SamplerFailure

            raise SamplerFailure("varying-settings hall sampler did not converge")
        m = pending.size
        prop = _uniform_sphere(rng, m)
        f = (
            sign_array(np.einsum("ij,ij->i", prop, nl[pending]))
            * sign_array(-np.einsum("ij,ij->i", prop, nr[pending]))
            * c[pending]
        )
        ok = rng.uniform(0.0, bound, size=m) < hall_g_array(f)
        u[pending[ok]] = prop[ok]
        pending = pending[~ok]
    return u


def _uniform_sphere(rng, n):
    from .geometry import sample_uniform_sphere_array

    return sample_uniform_sphere_array(rng, n)


def _b2_free_sample(rng, k):
    return _uniform_sphere(rng, k)


def _b2_settings_for(u, rng):
    """Per-row settings from the spin-conditioned coupling density."""
    from .models import hall_g_array, rejection_bound

    bound = rejection_bound()
    k = u.shape[0]
    nl = np.empty((k, 3))
    nr = np.empty((k, 3))
    pending = np.arange(k)
    while pending.size:
        m = pending.size
        pl = _uniform_sphere(rng, m)
        pr = _uniform_sphere(rng, m)
        c = np.clip(np.einsum("ij,ij->i", pl, pr), -1.0, 1.0)
        f = (
            sign_array(np.einsum("ij,ij->i", pl, u[pending]))
            * sign_array(-np.einsum("ij,ij->i", pr, u[pending]))
            * c
        )
        ok = rng.uniform(0.0, bound, size=m) < hall_g_array(f)
        nl[pending[ok]] = pl[ok]
        nr[pending[ok]] = pr[ok]
        pending = pending[~ok]
    return nl, nr


def sample_joint_spin_outcomes(kind: str, n: int, seed: int):
    """Joint (u, sigma, tau) samples for the Hall realizations with free
    settings, used by the equivalence-in-law test.

    B1 draws uniform independent settings and then the spin given the
    settings; B2 draws a uniform spin and then the settings given the spin.
    Identical laws, opposite causal placement.  Returns (u, sigma, tau) arrays.
    """
    if kind not in ("B1", "B2"):
        raise ValueError("joint sampling is defined for the Hall realizations only")
    rng = _bulk_stream(seed, f"joint:{kind}", 0)
    if kind == "B1":
        nl = _uniform_sphere(rng, n)
        nr = _uniform_sphere(rng, n)
        c = np.clip(np.einsum("ij,ij->i", nl, nr), -1.0, 1.0)
        u = _hall_sample_varying(nl, nr, c, rng)
    else:
        u = _uniform_sphere(rng, n)
        nl, nr = _b2_settings_for(u, rng)
    sig = sign_array(np.einsum("ij,ij->i", u, nl))
    tau = sign_array(-np.einsum("ij,ij->i", u, nr))
    return u, sig, tau


def run_experiment(kind: str, config: ExperimentConfig):
    """Run ``config.trials`` trials per settings pair (or one free-running
    stream) and aggregate counts.

    Returns (tables, log) where ``log`` is None unless event logging was
    requested.  Output is a pure function of (kind, config); the worker count
    only affects wall time.
    """
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind: {kind!r}")
    n = config.trials
    if config.log_events:
        return _run_logged(kind, config)

    nchunks = (n + _CHUNK - 1) // _CHUNK
    pair_list = (
        [("free-running", None)] if config.watch_driven else config.settings_pairs
    )
    jobs = []  # one job per (pair, chunk); merged by index, so scheduling-free
    for pi, (label, pair) in enumerate(pair_list):
        for ci in range(nchunks):
            k = min(_CHUNK, n - ci * _CHUNK)
            if pair is None:
                jobs.append((pi, _bulk_counts_free,
                             (kind, config, config.seed, f"{kind}:free:{pi}", ci, 1,
                              ci * _CHUNK + k)))
            else:
                jobs.append((pi, _bulk_counts_fixed,
                             (kind, pair, k, config.seed, f"{kind}:pair{pi}", ci, 1)))

    def run_job(job):
        _, fn, args = job
        return fn(*args)

    if config.threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as ex:
            results = list(ex.map(run_job, jobs))
    else:
        results = [run_job(j) for j in jobs]
    per_pair = np.zeros((len(pair_list), 4), dtype=np.int64)
    for (pi, _, _), counts in zip(jobs, results):
        per_pair[pi] += counts
    tables = []
    for pi, (label, pair) in enumerate(pair_list):
        tables.append(
            CountTable(label, kind, pair,
                       {OUTCOMES[i]: int(per_pair[pi, i]) for i in range(4)})
        )
    return tables, None


def _run_logged(kind: str, config: ExperimentConfig):
    log = EventLog()
    tables = []
    pair_list = (
        [("free-running", None)] if config.watch_driven else config.settings_pairs
    )
    for pi, (label, pair) in enumerate(pair_list):
        sub = config if pair is None else replace(config, settings_pairs=[(label, pair)])
        counts = _empty_counts()
        for i in range(config.trials):
            trial_id = pi * config.trials + i
            rec, msgs = run_trial(kind, sub, trial_id)
            counts[(rec.outcome_L, rec.outcome_R)] += 1
            for t_send, sender, receiver, mkind, payload in msgs:
                log.append(t_send, sender, receiver, mkind, payload)
        tables.append(CountTable(label, kind, pair, counts))
    return tables, log


def audit_locality(log: EventLog, kind: str) -> AuditReport:
    """Check the message-flow discipline that operationalizes 'no communication'.

    Rules: (1) no batter-to-batter traffic; (2) no batter-to-pitcher traffic;
    (3) ball payloads carry only the spin, pitch time, time of flight, and
    trial id, never settings; (4) exactly one ball per batter per trial
    (none for the analytic QM reference); (5) result reports flow only to the
    coordinator.
    """
    violations = []
    balls = {}
    batters = (BATTER_L, BATTER_R)
    allowed_ball_keys = {"trial_id", "spin", "t_pitch", "delta_t"}
    for m in log:
        if m.sender in batters and m.receiver in batters:
            violations.append((m.seq, 1, f"batter-to-batter message {m.sender}->{m.receiver}"))
        if m.sender in batters and m.receiver == PITCHER:
            violations.append((m.seq, 2, f"batter-to-pitcher message from {m.sender}"))
        if m.kind == "ball":
            extra = set(m.payload) - allowed_ball_keys
            if extra:
                violations.append(
                    (m.seq, 3, f"ball payload carries forbidden fields {sorted(extra)}")
                )
            key = (m.payload.get("trial_id"), m.receiver)
            balls[key] = balls.get(key, 0) + 1
        if m.kind == "result_report" and m.receiver != COORDINATOR:
            violations.append(
                (m.seq, 5, f"result report routed to {m.receiver}")
            )
    expected = 0 if kind == "QM" else 1
    if expected:
        trial_ids = {m.payload.get("trial_id") for m in log}
        for tid in sorted(t for t in trial_ids if t is not None):
            for b in batters:
                got = balls.get((tid, b), 0)
                if got != expected:
                    violations.append(
                        (-1, 4, f"trial {tid}: {got} balls to {b}, expected {expected}")
                    )
    else:
        if balls:
            violations.append((-1, 4, "analytic reference run contains ball messages"))
    return AuditReport(passed=not violations, violations=violations)


def write_event_log(log: EventLog, path):
    """One message per line, JSON-encoded with a fixed field order."""
    with open(path, "w", encoding="utf-8") as fh:
        for m in log:
            fh.write(json.dumps(
                {"seq": m.seq, "t_send": m.t_send, "sender": m.sender,
                 "receiver": m.receiver, "kind": m.kind, "payload": m.payload},
                sort_keys=False) + "\n")


def read_event_log(path) -> EventLog:
    log = EventLog()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
                log.messages.append(Message(
                    int(d["seq"]), float(d["t_send"]), str(d["sender"]),
                    str(d["receiver"]), str(d["kind"]), dict(d["payload"])))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"malformed event log at line {lineno + 1}: {exc}") from exc
    return log


def write_counts_csv(tables, path):
    """Fixed column order; floats at 17 significant digits for diff-stable output."""
    def f17(x):
        return format(float(x), ".17g")

    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("model,pair_label,nL_x,nL_y,nL_z,nR_x,nR_y,nR_z,"
                 "sigma,tau,count,frequency,analytic\n")
        for tb in tables:
            for (s, t) in OUTCOMES:
                if tb.settings is None:
                    comps = [""] * 6
                else:
                    comps = [f17(v) for v in (
                        tb.settings.n_L.x, tb.settings.n_L.y, tb.settings.n_L.z,
                        tb.settings.n_R.x, tb.settings.n_R.y, tb.settings.n_R.z)]
                fh.write(",".join(
                    [tb.model, tb.label] + comps +
                    [str(s), str(t), str(tb.counts.get((s, t), 0)),
                     f17(tb.frequency(s, t)), f17(tb.analytic(s, t))]) + "\n")
