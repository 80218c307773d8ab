"""Closed-loop simulation harness.

One scenario is a sequence of synchronous ticks. Each tick the plant turns
the implemented injections into squared voltages, the harness corrupts and
delays what the agents see, the agents commit their next state behind a
barrier, and the trace records the snapshot. Everything is deterministic
given the scenario seed: randomness (measurement noise, per-edge
communication delays, the model-error draw) comes from counter-based
Philox generators spawned from one seed sequence, so identical seeds give
bitwise-identical traces.

Delay semantics
---------------
* Measurement delay: agents read the noisy voltage of ``meas_delay`` ticks
  ago (clamped to the first tick of the run).
* Communication delay: for every directed neighbor pair and every tick, an
  independent integer lag uniform on {0..comm_delay_max} selects which
  historical broadcast value is delivered; during warm-up the tick-0 value
  (computed from the zero-initialized agent state) stands in. A bus always
  sees its own current value.
* Model error: the matrix the agents use is rebuilt once, at scenario
  start, from wrong line reactance data (one uniform factor in
  [1 - pct, 1 + pct] per line). Every entry stays within pct of truth,
  sparsity and positive definiteness are preserved; see
  ``perturb_model_lines`` versus the literal entrywise ``perturb_model``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import controller as ctrl
from . import network as netmod
from . import powerflow as pf

TRACE_SCHEMA_VERSION = 1
PROFILE_SCHEMA_VERSION = 1

_PLANTS = ("linearized", "nonlinear")


class ScenarioError(ValueError):
    """A scenario field is out of its admissible range."""


@dataclass(frozen=True)
class Profiles:
    """Loading conditions: static vectors or per-tick series (rows = ticks)."""

    p: np.ndarray
    q_exo: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float))
        object.__setattr__(self, "q_exo", np.asarray(self.q_exo, dtype=float))
        if self.p.shape != self.q_exo.shape:
            raise ScenarioError("p and q_exo profiles must have identical shapes")

    @property
    def static(self):
        return self.p.ndim == 1

    def at(self, t):
        if self.static:
            return self.p, self.q_exo
        idx = min(t, self.p.shape[0] - 1)
        return self.p[idx], self.q_exo[idx]


@dataclass(frozen=True)
class Scenario:
    """Everything that defines one closed-loop run besides the network."""

    profiles: Profiles
    horizon: int
    plant: str = "linearized"
    tick_seconds: float = 6.0
    noise_sigma: float = 0.0
    meas_delay: int = 0
    comm_delay_max: int = 0
    model_error_pct: float = 0.0
    seed: int = 0
    controllable: tuple | None = None
    include_coupling_cost: bool = False
    record_messages: bool = False

    def __post_init__(self):
        if self.plant not in _PLANTS:
            raise ScenarioError(f"plant must be one of {_PLANTS}, got {self.plant!r}")
        if self.horizon < 0:
            raise ScenarioError(f"horizon must be nonnegative, got {self.horizon}")
        if self.meas_delay < 0 or self.comm_delay_max < 0:
            raise ScenarioError("delays must be nonnegative")
        if not (0.0 <= self.model_error_pct < 1.0):
            raise ScenarioError(
                f"model_error_pct must lie in [0, 1), got {self.model_error_pct}"
            )
        if self.noise_sigma < 0:
            raise ScenarioError("noise_sigma must be nonnegative")
        if not self.tick_seconds > 0:
            raise ScenarioError("tick_seconds must be positive")
        if self.controllable is not None:
            object.__setattr__(self, "controllable", tuple(sorted(int(b) for b in self.controllable)))


@dataclass
class SimulationTrace:
    """Per-tick record of one run plus the post-run final state.

    Row t holds the snapshot at the start of tick t: the implemented
    injections q(t), the true and measured squared voltages they produced,
    the agent state of tick t and the total objective value of q(t).
    """

    v: np.ndarray
    v_meas: np.ndarray
    q: np.ndarray
    qhat: np.ndarray
    xi: np.ndarray
    lam_up: np.ndarray
    lam_low: np.ndarray
    cost: np.ndarray
    final: ctrl.AgentStates
    controllable: tuple
    tick_seconds: float
    seed: int
    messages: list = field(default_factory=list)

    @property
    def horizon(self):
        return self.v.shape[0]

    def violation_low(self, limits):
        return np.maximum(limits.v_low - self.v, 0.0)

    def violation_high(self, limits):
        return np.maximum(self.v - limits.v_high, 0.0)

    def max_violation(self, limits):
        if self.horizon == 0:
            return 0.0
        return float(
            np.maximum(self.violation_low(limits), self.violation_high(limits)).max()
        )

    def capacity_ok(self, limits):
        """Exact per-tick capacity check over the controlled buses."""
        if self.horizon == 0:
            return True
        idx = np.asarray(self.controllable, dtype=int) - 1
        lo = limits.q_low[idx]
        hi = limits.q_high[idx]
        qc = self.q[:, idx]
        return bool(((qc >= lo) & (qc <= hi)).all())


def perturb_model(Y, pct, rng):
    """Scale every nonzero entry by an independent factor in [1-pct, 1+pct].

    Entry-independent errors break the Laplacian cancellation that keeps
    the inverse-reactance matrix positive definite, so on long feeders this
    perturbation can make the agent dynamics unstable no matter how small
    the steps are; the harness therefore models wrong reactance data with
    ``perturb_model_lines`` instead and keeps this literal entrywise form
    for studies that want it.
    """
    if not (0.0 <= pct < 1.0):
        raise ScenarioError(f"model_error_pct must lie in [0, 1), got {pct}")
    Y = np.asarray(Y, dtype=float)
    if pct == 0.0:
        return Y.copy()
    factors = rng.uniform(1.0 - pct, 1.0 + pct, size=Y.shape)
    return np.where(Y != 0.0, Y * factors, 0.0)


def perturb_model_lines(net, pct, rng):
    """Agent-side inverse-reactance matrix built from wrong line data.

    Each line's inverse reactance is scaled by one factor in
    [1-pct, 1+pct], shared by the two symmetric off-diagonal entries and
    the two incident diagonals. Every matrix entry then sits within
    +-pct of its true value (diagonals are weighted averages of the line
    factors), the sparsity pattern is untouched, and the matrix stays
    positive definite, which is what keeps the perturbed loop stable.
    """
    if not (0.0 <= pct < 1.0):
        raise ScenarioError(f"model_error_pct must lie in [0, 1), got {pct}")
    n = net.n
    M = np.zeros((n, n))
    for ln in net.lines:
        w = 0.5 / ln.x * (1.0 if pct == 0.0 else float(rng.uniform(1.0 - pct, 1.0 + pct)))
        if ln.from_bus >= 1:
            M[ln.from_bus - 1, ln.to_bus - 1] -= w
            M[ln.to_bus - 1, ln.from_bus - 1] -= w
            M[ln.from_bus - 1, ln.from_bus - 1] += w
        M[ln.to_bus - 1, ln.to_bus - 1] += w
    return M


def draw_delays(rng, n, delay_max):
    """Per-edge integer lags, uniform on {0..delay_max}; self edges stay fresh."""
    delays = rng.integers(0, delay_max + 1, size=(n, n))
    np.fill_diagonal(delays, 0)
    return delays


def delayed_inbox(history, t, delays):
    """Gather the delivered value matrix from the broadcast history.

    ``history`` has one row per issue tick; entry (i, j) of the result is
    the value sender j issued ``delays[i, j]`` ticks before t, clamped to
    the oldest recorded tick.
    """
    issue = np.maximum(t - delays, 0)
    cols = np.arange(history.shape[1])
    vals = history[issue, cols[None, :]]
    if not np.isfinite(vals).all():
        raise ctrl.ProtocolError("broadcast history contains non-finite values")
    return vals


def _plant_factory(net, mats, scenario):
    if scenario.plant == "linearized":
        state = {}

        def plant(t, q_full):
            p, q_exo = scenario.profiles.at(t)
            key = None if scenario.profiles.static else t
            if key not in state:
                state.clear()
                state[key] = pf.make_vpar(net, mats, p, q_exo)
            return mats.X @ q_full + state[key]

        return plant

    warm = {"sol": None}

    def plant(t, q_full):
        p, q_exo = scenario.profiles.at(t)
        inj = pf.InjectionProfile(p=p, q=q_exo + q_full)
        sol = pf.nonlinear_solve(net, inj, initial=warm["sol"])
        warm["sol"] = sol
        return sol.v

    return plant


def run(net, mats, scenario, params, cost, limits, initial_states=None):
    """Execute one scenario and return its trace.

    ``cost`` and ``limits`` are full-network sized; in subset mode the
    harness restricts them to the controllable buses and, per the subset
    controller semantics, drops the network-level cost term unless
    ``scenario.include_coupling_cost`` keeps it. Capacity feasibility of
    the implemented injections is asserted on every recorded tick.

    ``initial_states`` resumes the agent state of an earlier run; this is
    only exact for delay-free scenarios (histories are not carried over).
    """
    n = net.n
    if limits.n != n or cost.n != n:
        raise ValueError("cost and limits must cover every device bus")
    subset = scenario.controllable is not None

    ss = np.random.SeedSequence(scenario.seed)
    ss_noise, ss_comm, ss_model = ss.spawn(3)
    rng_noise = np.random.Generator(np.random.Philox(ss_noise))
    rng_comm = np.random.Generator(np.random.Philox(ss_comm))
    rng_model = np.random.Generator(np.random.Philox(ss_model))

    if subset:
        cset = netmod.reduce_controllable(net, mats, scenario.controllable)
        buses = np.asarray(cset.buses, dtype=int)
        limits_c = limits.restrict(buses)
        cost_c = cost.restrict(buses)
        Y_agents = cset.Y_C
        d_term = params.d if scenario.include_coupling_cost else 0.0
    else:
        buses = np.arange(1, n + 1)
        limits_c = limits
        cost_c = cost
        Y_agents = mats.y_dense()
        d_term = params.d
    m = len(buses)
    if scenario.model_error_pct > 0.0:
        if subset:
            Y_agents = perturb_model(Y_agents, scenario.model_error_pct, rng_model)
        else:
            Y_agents = perturb_model_lines(net, scenario.model_error_pct, rng_model)

    ctrl.check_strong_convexity(cost_c, d_term, mats.X[np.ix_(buses - 1, buses - 1)])

    T = scenario.horizon
    states = ctrl.init_states(limits_c) if initial_states is None else initial_states.copy()
    trace = SimulationTrace(
        v=np.zeros((T, n)),
        v_meas=np.zeros((T, m)),
        q=np.zeros((T, n)),
        qhat=np.zeros((T, m)),
        xi=np.zeros((T, m)),
        lam_up=np.zeros((T, m)),
        lam_low=np.zeros((T, m)),
        cost=np.zeros(T),
        final=states,
        controllable=tuple(int(b) for b in buses),
        tick_seconds=scenario.tick_seconds,
        seed=scenario.seed,
    )

    history = np.zeros((T + 1, m))
    history[0] = ctrl.broadcast_values(states, cost_c, params.c, limits_c)
    v_hist = np.zeros((max(T, 1), n))
    plant = _plant_factory(net, mats, scenario)
    bus_idx = buses - 1
    sigma = scenario.noise_sigma

    q_full = np.zeros(n)
    q_full[bus_idx] = states.q
    for t in range(T):
        v_true = plant(t, q_full)
        v_hist[t] = v_true
        v_seen = v_hist[max(t - scenario.meas_delay, 0)]
        if sigma > 0.0:
            noise = 2.0 * np.sqrt(np.maximum(v_seen, 0.0)) * sigma * rng_noise.standard_normal(n)
            v_meas_full = v_seen + noise
        else:
            v_meas_full = v_seen
        v_meas = v_meas_full[bus_idx]

        if scenario.comm_delay_max > 0:
            delays = draw_delays(rng_comm, m, scenario.comm_delay_max)
            inbox = delayed_inbox(history[: t + 1], t, delays)
            if scenario.record_messages:
                issue = np.maximum(t - delays, 0)
                for i in range(m):
                    for j in range(m):
                        if i != j and Y_agents[i, j] != 0.0:
                            trace.messages.append(
                                (
                                    t,
                                    int(buses[i]),
                                    ctrl.AgentMessage(
                                        sender=int(buses[j]),
                                        value=float(history[issue[i, j], j]),
                                        tick=int(issue[i, j]),
                                    ),
                                )
                            )
        else:
            inbox = history[t]

        trace.v[t] = v_true
        trace.v_meas[t] = v_meas
        trace.q[t] = q_full
        trace.qhat[t] = states.qhat
        trace.xi[t] = states.xi
        trace.lam_up[t] = states.lam_up
        trace.lam_low[t] = states.lam_low
        full_cost = cost.value(q_full) + 0.5 * params.d * float(q_full @ mats.X @ q_full)
        trace.cost[t] = full_cost

        states, outbox = ctrl.agent_step(
            states, v_meas, inbox, params, limits_c, cost_c, Y_agents, d=d_term
        )
        history[t + 1] = outbox
        q_full = np.zeros(n)
        q_full[bus_idx] = states.q

    trace.final = states
    if not trace.capacity_ok(limits):
        raise AssertionError("capacity constraint violated in recorded trace")
    return trace


def run_until(net, mats, scenario, params, cost, limits, stop_fn, chunk=2000, max_ticks=200000):
    """Repeatedly extend a run until ``stop_fn`` accepts the state.

    ``stop_fn(states, prev_states)`` sees the committed state after a chunk
    and the state one tick earlier. Returns ``(trace, ticks, stopped)``
    where ``trace`` is the trace of the final chunk. Only valid for
    noise-free, delay-free scenarios on static profiles (the closed loop is
    then a time-invariant map, so chunked continuation equals one long run).
    """
    if scenario.noise_sigma != 0.0 or scenario.comm_delay_max != 0 or scenario.meas_delay != 0:
        raise ScenarioError("run_until needs a deterministic, delay-free scenario")
    if not scenario.profiles.static:
        raise ScenarioError("run_until needs a static profile")
    total = 0
    states = None
    trace = None
    base = scenario
    while total < max_ticks:
        sc = Scenario(
            profiles=base.profiles,
            horizon=min(chunk, max_ticks - total),
            plant=base.plant,
            tick_seconds=base.tick_seconds,
            noise_sigma=0.0,
            meas_delay=0,
            comm_delay_max=0,
            model_error_pct=base.model_error_pct,
            seed=base.seed,
            controllable=base.controllable,
            include_coupling_cost=base.include_coupling_cost,
        )
        trace = run(net, mats, sc, params, cost, limits, initial_states=states)
        states = trace.final
        total += sc.horizon
        prev = ctrl.AgentStates(
            qhat=trace.qhat[-1],
            xi=trace.xi[-1],
            lam_up=trace.lam_up[-1],
            lam_low=trace.lam_low[-1],
            q=trace.q[-1][np.asarray(trace.controllable, dtype=int) - 1],
        )
        if stop_fn(states, prev):
            return trace, total, True
    return trace, total, False


def no_control_voltages(net, mats, scenario):
    """Voltage trajectory with the controller disabled (q identically 0)."""
    T = scenario.horizon
    plant = _plant_factory(net, mats, scenario)
    out = np.zeros((T, net.n))
    zero = np.zeros(net.n)
    for t in range(T):
        out[t] = plant(t, zero)
    return out


def synth_profiles(kind, net, seed, limits=None, mats=None, **kwargs):
    """Bundled synthetic loading profiles.

    ``static-heavy``: random per-bus loads bisected in scale until the
    uncontrolled linearized voltage dips below the lower band limit by a
    target depth. ``daily``: a 24 h series at the scenario tick rate with a
    morning load ramp, a solar bump strictly inside the 08:00-19:00 window
    peaking at noon, and seeded high-frequency jitter.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    if mats is None:
        mats = netmod.sensitivity_matrices(net)
    n = net.n
    if kind == "static-heavy":
        if limits is None:
            raise ScenarioError("static-heavy profiles need the voltage band")
        depth = float(kwargs.get("violation_depth", 0.005))
        p_base = -rng.uniform(0.3, 1.0, size=n)
        q_base = 0.25 * p_base
        v_low = np.asarray(limits.v_low, dtype=float)

        def min_v(scale):
            vpar = pf.make_vpar(net, mats, scale * p_base, scale * q_base)
            return float((vpar - v_low).min())

        lo, hi = 0.0, 1.0
        if min_v(1.0) > -depth:
            for _ in range(60):
                hi *= 2.0
                if min_v(hi) <= -depth:
                    break
            else:
                raise ScenarioError(
                    "cannot reach an undervoltage condition within the scaling bounds"
                )
            lo = hi / 2.0
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if min_v(mid) <= -depth:
                hi = mid
            else:
                lo = mid
        scale = hi
        if min_v(scale) > 0.0:
            raise ScenarioError("bisection failed to produce an uncontrolled violation")
        return Profiles(p=scale * p_base, q_exo=scale * q_base)

    if kind == "daily":
        if limits is None:
            raise ScenarioError("daily profiles need the voltage band")
        tick_seconds = float(kwargs.get("tick_seconds", 6.0))
        ticks = int(round(24 * 3600 / tick_seconds))
        hours = np.arange(ticks) * tick_seconds / 3600.0
        pv_share = float(kwargs.get("pv_share", 0.4))
        uv_depth = float(kwargs.get("undervoltage_depth", 0.02))
        ov_depth = float(kwargs.get("overvoltage_depth", 0.015))

        base = rng.uniform(0.3, 1.0, size=n)
        # night plateau, ramp up after 06:00, evening peak, midnight taper
        shape = 0.45 + 0.55 * np.clip((hours - 6.0) / 12.0, 0.0, 1.0) * (
            1.0 - 0.3 * np.clip((hours - 21.0) / 3.0, 0.0, 1.0)
        )
        jitter = np.clip(1.0 + 0.05 * rng.standard_normal((ticks, n)), 0.05, None)
        load = shape[:, None] * base[None, :] * jitter  # positive consumption

        pv_buses = rng.random(n) < pv_share
        if not pv_buses.any():
            pv_buses[int(rng.integers(0, n))] = True
        pv_cap = rng.uniform(0.5, 1.5, size=n) * pv_buses
        window = (hours > 8.0) & (hours < 19.0)
        bell = np.zeros(ticks)
        bell[window] = np.sin(np.pi * (hours[window] - 8.0) / 11.0) ** 2
        pv_jitter = np.clip(1.0 + 0.15 * rng.standard_normal((ticks, n)), 0.0, None)
        pv = bell[:, None] * pv_cap[None, :] * pv_jitter

        # Calibrate against the linearized uncontrolled voltage: scale the
        # loads so the evening peak dips a target depth below the lower
        # band limit, then scale the generation so the sunniest tick rises
        # a target depth above the upper limit.
        drop = load @ mats.R + 0.25 * load @ mats.X  # per unit load scale
        v_low = float(np.min(np.asarray(limits.v_low)))
        v_high = float(np.max(np.asarray(limits.v_high)))
        max_drop = float(drop.max())
        if max_drop <= 0:
            raise ScenarioError("degenerate daily load shape")
        s_load = (net.v0 - (v_low - uv_depth)) / max_drop
        base_v = net.v0 - s_load * drop
        lift = pv @ mats.R
        target = v_high + ov_depth

        def peak(s_pv):
            return float((base_v + s_pv * lift).max())

        s_hi = 1.0
        for _ in range(60):
            if peak(s_hi) >= target:
                break
            s_hi *= 2.0
        else:
            raise ScenarioError("cannot reach an overvoltage condition within the scaling bounds")
        s_lo = 0.0
        for _ in range(60):
            mid = 0.5 * (s_lo + s_hi)
            if peak(mid) >= target:
                s_hi = mid
            else:
                s_lo = mid
        s_pv = s_hi
        p = -s_load * load + s_pv * pv
        q_exo = -0.25 * s_load * load
        return Profiles(p=p, q_exo=q_exo)

    raise ScenarioError(f"unknown profile kind {kind!r}")


def write_profiles_csv(profiles, path):
    """Per-tick profile table: bus-major columns, loads first."""
    p = np.atleast_2d(profiles.p)
    q = np.atleast_2d(profiles.q_exo)
    n = p.shape[1]
    header = [f"p_{i}" for i in range(1, n + 1)] + [f"qexo_{i}" for i in range(1, n + 1)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t in range(p.shape[0]):
            writer.writerow([f"{x:.12g}" for x in np.concatenate([p[t], q[t]])])


def read_profiles_csv(path, n):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        expected = [f"p_{i}" for i in range(1, n + 1)] + [f"qexo_{i}" for i in range(1, n + 1)]
        if header != expected:
            raise ScenarioError(
                f"profile header mismatch: expected {expected[:2]}...{expected[-1]}, got {header[:2]}..."
            )
        rows = [[float(x) for x in row] for row in reader]
    data = np.asarray(rows)
    if data.size == 0:
        raise ScenarioError("profile file has no ticks")
    p = data[:, :n]
    q = data[:, n:]
    if p.shape[0] == 1:
        return Profiles(p=p[0], q_exo=q[0])
    return Profiles(p=p, q_exo=q)


def trace_summary_rows(trace, limits):
    rows = []
    for t in range(trace.horizon):
        viol_low = float(np.maximum(limits.v_low - trace.v[t], 0.0).max())
        viol_high = float(np.maximum(trace.v[t] - limits.v_high, 0.0).max())
        rows.append(
            {
                "tick": t,
                "time_s": t * trace.tick_seconds,
                "cost": float(trace.cost[t]),
                "min_v": float(trace.v[t].min()),
                "max_v": float(trace.v[t].max()),
                "viol_low": viol_low,
                "viol_high": viol_high,
                "max_abs_q": float(np.abs(trace.q[t]).max()),
            }
        )
    return rows


def write_trace_csv(trace, limits, path):
    rows = trace_summary_rows(trace, limits)
    fields = ["tick", "time_s", "cost", "min_v", "max_v", "viol_low", "viol_high", "max_abs_q"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def trace_to_dict(trace, limits, full=False):
    out = {
        "schema_version": TRACE_SCHEMA_VERSION,
        "seed": trace.seed,
        "tick_seconds": trace.tick_seconds,
        "horizon": trace.horizon,
        "controllable": list(trace.controllable),
        "final": {
            "qhat": trace.final.qhat.tolist(),
            "xi": trace.final.xi.tolist(),
            "lam_up": trace.final.lam_up.tolist(),
            "lam_low": trace.final.lam_low.tolist(),
            "q": trace.final.q.tolist(),
        },
        "summary": trace_summary_rows(trace, limits),
    }
    if full:
        out["series"] = {
            "v": trace.v.tolist(),
            "v_meas": trace.v_meas.tolist(),
            "q": trace.q.tolist(),
            "qhat": trace.qhat.tolist(),
            "xi": trace.xi.tolist(),
            "lam_up": trace.lam_up.tolist(),
            "lam_low": trace.lam_low.tolist(),
            "cost": trace.cost.tolist(),
        }
    return out


def write_trace_json(trace, limits, path, full=False):
    with open(path, "w") as fh:
        json.dump(trace_to_dict(trace, limits, full=full), fh, indent=1)
