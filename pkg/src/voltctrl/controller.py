"""Per-bus feedback voltage controller agents.

Each device bus keeps a desired injection ``qhat``, a capacity multiplier
``xi`` and a pair of nonnegative voltage multipliers ``lam_up``/``lam_low``.
A synchronous round reads the measured squared voltage and the neighbor
messages of the current tick, then commits the next state for every agent
at once:

* ``qhat`` descends along the inverse-reactance-scaled gradient of the
  augmented Lagrangian, which localizes to a weighted sum of neighbor
  messages plus the agent's own multiplier imbalance,
* ``xi`` ascends its concave penalty coordinate,
* ``lam_up``/``lam_low`` ascend the measured voltage-band violations and
  are projected onto the nonnegative orthant,
* the implemented injection is the hard clamp of ``qhat`` onto the device
  capacity box, so the capacity constraint holds at every tick by
  construction.

The message a bus shares with its neighbors is the scalar
``f_i'(qhat_i) + ST(xi_i + c qhat_i)`` evaluated at its freshly committed
state, where ``ST`` is the soft-thresholding function over the scaled
capacity box.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ProtocolError(RuntimeError):
    """A required neighbor message is missing or malformed."""


def soft_threshold(y, lo, hi):
    """Soft-thresholding over the band [lo, hi].

    Zero on the band, ``y - lo`` below it and ``y - hi`` above it;
    continuous, nondecreasing and 1-Lipschitz. Accepts scalars or arrays
    (broadcasting the bounds); requires ``lo < hi`` elementwise.
    """
    lo_a = np.asarray(lo, dtype=float)
    hi_a = np.asarray(hi, dtype=float)
    if not np.all(lo_a < hi_a):
        raise ValueError("soft_threshold needs lo < hi")
    out = np.maximum(np.minimum(np.asarray(y, dtype=float) - lo_a, 0.0), np.asarray(y) - hi_a)
    return float(out) if np.isscalar(y) and out.ndim == 0 else out


@dataclass(frozen=True)
class ControllerParams:
    """Step sizes and penalty scale of the agent dynamics.

    ``alpha`` drives the desired injection, ``beta`` the capacity
    multiplier, ``gamma`` the voltage multipliers; ``c`` scales the
    quadratic capacity penalty and ``d`` weights the network-level
    quadratic cost term (handled locally because the inverse-reactance
    scaling collapses it to ``d * qhat_i``).
    """

    alpha: float
    beta: float
    gamma: float
    c: float
    d: float = 0.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "c"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d < 0:
            raise ValueError(f"d must be nonnegative, got {self.d}")


@dataclass(frozen=True)
class CapacityLimits:
    """Hard per-device injection box and the acceptable voltage band."""

    q_low: np.ndarray
    q_high: np.ndarray
    v_low: np.ndarray
    v_high: np.ndarray

    def __post_init__(self):
        for name in ("q_low", "q_high", "v_low", "v_high"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if not (self.q_low < self.q_high).all():
            raise ValueError("need q_low < q_high at every bus")
        if not (self.v_low < self.v_high).all():
            raise ValueError("need v_low < v_high at every bus")

    @classmethod
    def from_scalars(cls, n, q_low, q_high, v_low, v_high):
        ones = np.ones(n)
        return cls(q_low * ones, q_high * ones, v_low * ones, v_high * ones)

    @property
    def n(self):
        return self.q_low.shape[0]

    def restrict(self, buses):
        idx = np.asarray(buses, dtype=int) - 1
        return CapacityLimits(
            self.q_low[idx], self.q_high[idx], self.v_low[idx], self.v_high[idx]
        )


@dataclass(frozen=True)
class CostModel:
    """Separable per-bus quadratic operating costs ``a_i q^2 + b_i q``.

    The network-level quadratic term enters through ``d`` elsewhere; this
    object only carries the device-owned part, which is also what the
    neighbor messages communicate.
    """

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float))
        if self.a.shape != self.b.shape:
            raise ValueError("cost coefficient vectors must have equal length")
        if (self.a < 0).any():
            raise ValueError("quadratic cost coefficients must be nonnegative")

    @classmethod
    def from_scalars(cls, n, a, b=0.0):
        ones = np.ones(n)
        return cls(a * ones, b * ones)

    @property
    def n(self):
        return self.a.shape[0]

    def value(self, q):
        q = np.asarray(q, dtype=float)
        return float(np.sum(self.a * q * q + self.b * q))

    def fprime(self, q):
        return 2.0 * self.a * np.asarray(q, dtype=float) + self.b

    def restrict(self, buses):
        idx = np.asarray(buses, dtype=int) - 1
        return CostModel(self.a[idx], self.b[idx])


def check_strong_convexity(cost, d, X):
    """Smallest/largest curvature of the total objective, with a guard.

    The total objective is the sum of the per-bus quadratics plus
    ``d/2 q' X q``. Zero per-bus curvature is only admissible when ``d > 0``
    keeps the total strongly convex.
    """
    H = 2.0 * np.diag(cost.a) + d * X
    eigs = np.linalg.eigvalsh(H)
    mu, ell = float(eigs[0]), float(eigs[-1])
    if mu <= 0:
        raise ValueError(
            "total cost is not strongly convex: give every bus a positive "
            "quadratic coefficient or set d > 0"
        )
    return mu, ell


@dataclass
class AgentStates:
    """Stacked controller state, one entry per controlled bus."""

    qhat: np.ndarray
    xi: np.ndarray
    lam_up: np.ndarray
    lam_low: np.ndarray
    q: np.ndarray

    def copy(self):
        return AgentStates(
            self.qhat.copy(), self.xi.copy(), self.lam_up.copy(), self.lam_low.copy(), self.q.copy()
        )


def init_states(limits):
    """All-zero start; desired injections snap to the nearest capacity bound
    when zero is outside the device box, so the implemented injection is
    feasible from the first tick."""
    n = limits.n
    qhat = np.clip(np.zeros(n), limits.q_low, limits.q_high)
    return AgentStates(
        qhat=qhat,
        xi=np.zeros(n),
        lam_up=np.zeros(n),
        lam_low=np.zeros(n),
        q=qhat.copy(),
    )


def broadcast_values(states, cost, c, limits):
    """The scalar each bus shares: cost slope plus thresholded penalty slope."""
    st = soft_threshold(states.xi + c * states.qhat, c * limits.q_low, c * limits.q_high)
    return cost.fprime(states.qhat) + st


@dataclass(frozen=True)
class AgentMessage:
    """One neighbor-bound value, tagged with its sender and issue tick."""

    sender: int
    value: float
    tick: int


def agent_step(states, v_meas, inbox, params, limits, cost, Y_eff, d=None):
    """One synchronous controller round on the current-tick snapshot.

    Parameters
    ----------
    states : AgentStates at tick t
    v_meas : measured squared voltages for the implemented q(t)
    inbox : neighbor values; either a length-n vector (every receiver sees
        the same current value per sender) or an (n, n) matrix whose row i
        holds the values bus i received (stale entries under delay)
    Y_eff : the inverse-reactance matrix rows the agents use; entries
        outside each bus's neighborhood are zero, which is what keeps the
        update local
    d : override for the network-cost weight (defaults to ``params.d``)

    Returns the committed states at t+1 and the fresh outbox values.
    """
    n = states.qhat.shape[0]
    v_meas = np.asarray(v_meas, dtype=float)
    if v_meas.shape != (n,):
        raise ValueError(f"v_meas must have shape ({n},), got {v_meas.shape}")
    inbox = np.asarray(inbox, dtype=float)
    if inbox.shape == (n,):
        coupling = Y_eff @ inbox
    elif inbox.shape == (n, n):
        coupling = np.einsum("ij,ij->i", Y_eff, inbox)
    else:
        raise ProtocolError(f"inbox must have shape ({n},) or ({n},{n}), got {inbox.shape}")
    if not np.isfinite(coupling).all():
        raise ProtocolError("inbox carries non-finite neighbor values")
    dd = params.d if d is None else d
    c = params.c

    st = soft_threshold(states.xi + c * states.qhat, c * limits.q_low, c * limits.q_high)
    qhat_new = states.qhat - params.alpha * (
        states.lam_up - states.lam_low + dd * states.qhat + coupling
    )
    xi_new = states.xi + params.beta * (st - states.xi) / c
    lam_up_new = np.maximum(0.0, states.lam_up + params.gamma * (v_meas - limits.v_high))
    lam_low_new = np.maximum(0.0, states.lam_low + params.gamma * (limits.v_low - v_meas))
    q_new = np.clip(qhat_new, limits.q_low, limits.q_high)

    new = AgentStates(qhat=qhat_new, xi=xi_new, lam_up=lam_up_new, lam_low=lam_low_new, q=q_new)
    st_new = soft_threshold(xi_new + c * qhat_new, c * limits.q_low, c * limits.q_high)
    outbox = cost.fprime(qhat_new) + st_new
    return new, outbox


def dense_equivalence_step(states, v_meas, params, limits, cost, mats, d=None):
    """Centralized one-round oracle: full-gradient saddle update, then scaling.

    Test-only reference path. It forms the complete augmented-Lagrangian
    gradient in the desired-injection coordinates, premultiplies it by the
    dense inverse of X, and applies the same multiplier and clamp updates as
    the distributed round. On a fresh (undelayed) snapshot it must match
    ``agent_step`` to rounding error; replacing the scaling matrix by the
    identity breaks the match, which is what the tests use to pin down the
    scaled-gradient structure.
    """
    dd = params.d if d is None else d
    c = params.c
    X = mats.X
    Y = mats.y_dense()
    st = soft_threshold(states.xi + c * states.qhat, c * limits.q_low, c * limits.q_high)
    grad_qhat = cost.fprime(states.qhat) + st + X @ (
        states.lam_up - states.lam_low + dd * states.qhat
    )
    qhat_new = states.qhat - params.alpha * (Y @ grad_qhat)
    xi_new = states.xi + params.beta * (st - states.xi) / c
    lam_up_new = np.maximum(0.0, states.lam_up + params.gamma * (v_meas - limits.v_high))
    lam_low_new = np.maximum(0.0, states.lam_low + params.gamma * (limits.v_low - v_meas))
    q_new = np.clip(qhat_new, limits.q_low, limits.q_high)
    return AgentStates(qhat=qhat_new, xi=xi_new, lam_up=lam_up_new, lam_low=lam_low_new, q=q_new)


def subset_step(states, v_meas_c, inbox, params, limits_c, cost_c, cset, include_coupling_cost=False):
    """Controller round when only a subset of buses carries devices.

    Identical update structure with the principal-submatrix inverse in
    place of Y and messages routed along the induced communication graph.
    The network-level quadratic cost term is dropped by default; pass
    ``include_coupling_cost=True`` to keep it (restricted to the
    controllable buses).
    """
    Y_c = cset.Y_C
    d = params.d if include_coupling_cost else 0.0
    return agent_step(states, v_meas_c, inbox, params, limits_c, cost_c, Y_c, d=d)
