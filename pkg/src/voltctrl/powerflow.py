"""Plant models: exact branch-flow sweep and the linearized voltage map.

Two plants close the loop around the controller. The linearized plant is
the affine map ``v = X q + vpar`` whose uncontrollable part ``vpar``
collects loads and exogenous reactive injections. The nonlinear plant
solves the branch-flow equations of a radial feeder by a backward/forward
sweep: the backward pass aggregates line flows leaf to root including the
loss term of the current squared-current estimate, the forward pass
propagates voltage drops root to leaf, and the squared current is then
refreshed from the flow solution until the residual of the current
equation falls below tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class PowerFlowError(RuntimeError):
    """Sweep failure: divergence or voltage collapse."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DimensionError(ValueError):
    """An injection or state vector does not match the bus count."""


def _as_bus_vector(vec, n, name):
    arr = np.asarray(vec, dtype=float)
    if arr.shape != (n,):
        raise DimensionError(f"{name} must have shape ({n},), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise DimensionError(f"{name} has non-finite entries")
    return arr


@dataclass(frozen=True)
class InjectionProfile:
    """Per-bus active/reactive injections in p.u. (negative for load)."""

    p: np.ndarray
    q: np.ndarray


@dataclass(frozen=True)
class FlowSolution:
    """Solution of the branch-flow equations.

    ``v`` is indexed by bus 1..n; the per-line vectors follow the network's
    canonical line order (line k feeds bus ``net.topo[k]``).
    """

    v: np.ndarray
    p_flow: np.ndarray
    q_flow: np.ndarray
    ell: np.ndarray
    iterations: int
    residual: float


@dataclass(frozen=True)
class LinearPlant:
    """Affine voltage response around a fixed loading condition.

    ``vpar`` is hidden state from the controller's point of view: agents
    only ever see the voltage output.
    """

    mats: object  # SensitivityMatrices
    vpar: np.ndarray


def make_vpar(net, mats, p, q_exo):
    """Uncontrolled voltage profile ``R p + X q_exo + v0 1``."""
    n = net.n
    p = _as_bus_vector(p, n, "p")
    q_exo = _as_bus_vector(q_exo, n, "q_exo")
    return mats.R @ p + mats.X @ q_exo + net.v0 * np.ones(n)


def lin_voltage(plant, q_ctrl):
    """Voltage of the linearized plant for a control injection."""
    n = plant.mats.n
    q_ctrl = _as_bus_vector(q_ctrl, n, "q_ctrl")
    return plant.mats.X @ q_ctrl + plant.vpar


def _sweep_residuals(net, p, q, pf, qf, ell, v):
    # Bus-indexed arrays (index 0 = substation). Returns the max-norm
    # residual of each of the four branch-flow equations.
    n = net.n
    down_p = np.zeros(n + 1)
    down_q = np.zeros(n + 1)
    for b in net.topo[::-1]:
        par = net.parent[b]
        down_p[par] += pf[b]
        down_q[par] += qf[b]
    idx = net.topo
    res_p = np.abs(-p[idx - 1] - (pf[idx] - net.r_in[idx] * ell[idx] - down_p[idx]))
    res_q = np.abs(-q[idx - 1] - (qf[idx] - net.x_in[idx] * ell[idx] - down_q[idx]))
    vpar_side = v[net.parent[idx]]
    res_v = np.abs(
        v[idx]
        - (
            vpar_side
            - 2.0 * (net.r_in[idx] * pf[idx] + net.x_in[idx] * qf[idx])
            + (net.r_in[idx] ** 2 + net.x_in[idx] ** 2) * ell[idx]
        )
    )
    res_l = np.abs(ell[idx] * vpar_side - (pf[idx] ** 2 + qf[idx] ** 2))
    return res_p.max(), res_q.max(), res_v.max(), res_l.max()


def _one_sweep(net, p, q, ell):
    # Backward pass with the losses frozen at `ell`, then forward pass.
    n = net.n
    pf = np.zeros(n + 1)
    qf = np.zeros(n + 1)
    for b in net.topo[::-1]:
        par = net.parent[b]
        pf[b] += -p[b - 1] + net.r_in[b] * ell[b]
        qf[b] += -q[b - 1] + net.x_in[b] * ell[b]
        pf[par] += pf[b]
        qf[par] += qf[b]
    v = np.empty(n + 1)
    v[0] = net.v0
    for b in net.topo:
        par = net.parent[b]
        v[b] = (
            v[par]
            - 2.0 * (net.r_in[b] * pf[b] + net.x_in[b] * qf[b])
            + (net.r_in[b] ** 2 + net.x_in[b] ** 2) * ell[b]
        )
    return pf, qf, v


def nonlinear_solve(net, inj, tol=1e-10, max_iter=500, initial=None):
    """Fixed point of the backward/forward sweep on the branch-flow equations.

    Starts from a flat voltage profile and zero losses (or from ``initial``,
    a previous ``FlowSolution``, to warm-start time-stepped runs). Raises
    ``PowerFlowError`` on voltage collapse or when the residual does not
    reach ``tol`` within ``max_iter`` sweeps.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = net.n
    p = _as_bus_vector(inj.p, n, "inj.p")
    q = _as_bus_vector(inj.q, n, "inj.q")
    ell = np.zeros(n + 1)
    if initial is not None:
        ell[net.topo] = initial.ell
    last_res = np.inf
    for it in range(1, max_iter + 1):
        pf, qf, v = _one_sweep(net, p, q, ell)
        if (v[1:] <= 0.0).any():
            bad = int(np.flatnonzero(v[1:] <= 0.0)[0]) + 1
            raise PowerFlowError(
                f"voltage collapse at bus {bad} (squared voltage {v[bad]:.3e})",
                residual=last_res,
            )
        # Only the squared-current equation can be out of balance here; the
        # two flow equations and the voltage equation hold by construction
        # of the sweep for the frozen `ell`.
        res_l = np.abs(ell[net.topo] * v[net.parent[net.topo]] - (pf[net.topo] ** 2 + qf[net.topo] ** 2))
        last_res = float(res_l.max())
        if last_res < tol:
            idx = net.topo
            return FlowSolution(
                v=v[1:].copy(),
                p_flow=pf[idx].copy(),
                q_flow=qf[idx].copy(),
                ell=ell[idx].copy(),
                iterations=it,
                residual=last_res,
            )
        ell[net.topo] = (pf[net.topo] ** 2 + qf[net.topo] ** 2) / v[net.parent[net.topo]]
    raise PowerFlowError(
        f"sweep did not converge in {max_iter} iterations (residual {last_res:.3e})",
        residual=last_res,
    )


def simplified_solve(net, inj):
    """One lossless sweep: the simplified model with the loss term zeroed.

    Reproduces the linearized voltage map exactly (the resulting voltages
    satisfy ``v = R p + X q + v0 1`` to rounding error).
    """
    n = net.n
    p = _as_bus_vector(inj.p, n, "inj.p")
    q = _as_bus_vector(inj.q, n, "inj.q")
    pf, qf, v = _one_sweep(net, p, q, np.zeros(n + 1))
    idx = net.topo
    return FlowSolution(
        v=v[1:].copy(),
        p_flow=pf[idx].copy(),
        q_flow=qf[idx].copy(),
        ell=np.zeros(n),
        iterations=1,
        residual=0.0,
    )


def flow_residuals(net, inj, sol):
    """Max-norm residuals of the four branch-flow equations at a solution."""
    n = net.n
    p = _as_bus_vector(inj.p, n, "inj.p")
    q = _as_bus_vector(inj.q, n, "inj.q")
    pf = np.zeros(n + 1)
    qf = np.zeros(n + 1)
    ell = np.zeros(n + 1)
    v = np.empty(n + 1)
    v[0] = net.v0
    pf[net.topo] = sol.p_flow
    qf[net.topo] = sol.q_flow
    ell[net.topo] = sol.ell
    v[1:] = sol.v
    return _sweep_residuals(net, p, q, pf, qf, ell, v)
