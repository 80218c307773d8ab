"""Centralized ground truth for the voltage optimization problem.

The problem minimizes the total reactive-power cost subject to the voltage
band (through the linearized plant) and the per-device capacity box. This
module provides:

* the quadratic capacity penalty and the augmented Lagrangian it enters,
* an interior-point reference solver (log barrier with Newton steps over
  the stacked inequality constraints, followed by an active-set polish)
  that is algorithmically unrelated to the controller, so shared bugs
  cannot certify themselves,
* a method-agnostic KKT residual report that is the final arbiter for any
  candidate solution, wherever it came from,
* a slow projected dual-ascent cross-check used by the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .controller import soft_threshold


class InfeasibleProblem(RuntimeError):
    """Phase-1 certified that no strictly feasible point exists."""

    def __init__(self, message, margin):
        super().__init__(message)
        self.margin = margin  # best achievable max constraint violation


class OracleError(RuntimeError):
    """The reference solver failed to reach its accuracy contract."""


@dataclass(frozen=True)
class VoltageProblem:
    """One instance: plant matrix and loading, limits, costs."""

    X: np.ndarray
    vpar: np.ndarray
    limits: object  # CapacityLimits
    cost: object  # CostModel
    d: float = 0.0

    @property
    def n(self):
        return self.X.shape[0]

    def hessian(self):
        return 2.0 * np.diag(self.cost.a) + self.d * self.X

    def objective(self, q):
        q = np.asarray(q, dtype=float)
        return self.cost.value(q) + 0.5 * self.d * float(q @ self.X @ q)

    def gradient(self, q):
        q = np.asarray(q, dtype=float)
        return self.cost.fprime(q) + self.d * (self.X @ q)

    def voltage(self, q):
        return self.X @ np.asarray(q, dtype=float) + self.vpar

    def curvature_range(self):
        eigs = np.linalg.eigvalsh(self.hessian())
        return float(eigs[0]), float(eigs[-1])


def stacked_constraints(problem):
    """Stacked band matrix and offsets.

    Rows 0..n-1 carry the lower voltage bounds (through ``-X``), rows
    n..2n-1 the upper bounds (through ``X``); ``vb`` holds the matching
    right-hand sides so the band constraints read ``Xt q - vb <= 0``.
    """
    X = problem.X
    Xt = np.vstack([-X, X])
    vb = np.concatenate([
        -problem.limits.v_low + problem.vpar,
        problem.limits.v_high - problem.vpar,
    ])
    return Xt, vb


def K_penalty(xi, qhat, c, q_low, q_high):
    """Quadratic capacity penalty with its two partial derivatives.

    Three regimes per bus: quadratic pull-back below/above the box and a
    concave bowl ``-xi^2/(2c)`` when ``qhat + xi/c`` sits inside it. The
    slope in the injection coordinate is the soft threshold of
    ``xi + c qhat`` over the scaled box, and the multiplier slope is that
    same threshold recentred at ``xi`` and divided by ``c``.
    """
    xi = np.asarray(xi, dtype=float)
    qhat = np.asarray(qhat, dtype=float)
    shifted = qhat + xi / c
    below = shifted < q_low
    above = shifted > q_high
    value = np.where(
        below,
        xi * (qhat - q_low) + 0.5 * c * (qhat - q_low) ** 2,
        np.where(
            above,
            xi * (qhat - q_high) + 0.5 * c * (qhat - q_high) ** 2,
            -(xi**2) / (2.0 * c),
        ),
    )
    st = soft_threshold(xi + c * qhat, c * q_low, c * q_high)
    return value, st, (st - xi) / c


@dataclass(frozen=True)
class AugLagrangian:
    """Augmented Lagrangian of one problem instance with penalty scale c."""

    problem: VoltageProblem
    c: float

    def evaluate(self, qhat, xi, lam):
        """Value and gradient blocks at (qhat, xi, lam).

        ``lam`` stacks the lower-band multipliers first, then the upper-band
        ones (2n entries). Returns ``(value, g_qhat, g_xi, g_lam)``.
        """
        problem = self.problem
        n = problem.n
        qhat = np.asarray(qhat, dtype=float)
        xi = np.asarray(xi, dtype=float)
        lam = np.asarray(lam, dtype=float)
        if qhat.shape != (n,) or xi.shape != (n,) or lam.shape != (2 * n,):
            raise ValueError(
                f"dimension mismatch: expected ({n},), ({n},), ({2*n},); "
                f"got {qhat.shape}, {xi.shape}, {lam.shape}"
            )
        Xt, vb = stacked_constraints(problem)
        kval, k_q, k_xi = K_penalty(
            xi, qhat, self.c, problem.limits.q_low, problem.limits.q_high
        )
        value = problem.objective(qhat) + float(lam @ (Xt @ qhat - vb)) + float(kval.sum())
        g_qhat = problem.gradient(qhat) + Xt.T @ lam + k_q
        g_lam = Xt @ qhat - vb
        return value, g_qhat, k_xi, g_lam


@dataclass(frozen=True)
class KKTReport:
    """Max-norm residuals of the four optimality blocks."""

    stationarity: float
    primal: float
    dual: float
    slackness: float

    @property
    def total(self):
        return max(self.stationarity, self.primal, self.dual, self.slackness)


def split_capacity_multiplier(xi):
    """Signed capacity multiplier into its (upper, lower) nonnegative pair."""
    xi = np.asarray(xi, dtype=float)
    return np.maximum(xi, 0.0), np.maximum(-xi, 0.0)


def kkt_residual(q, xi_up, xi_low, lam_low, lam_up, problem):
    """Optimality certificate for a candidate point, independent of method.

    ``xi_up``/``xi_low`` are the capacity-box multipliers (upper and lower
    bound), ``lam_low``/``lam_up`` the voltage-band multipliers.
    """
    q = np.asarray(q, dtype=float)
    v = problem.voltage(q)
    limits = problem.limits
    stationarity = float(
        np.abs(
            problem.gradient(q)
            + problem.X @ (np.asarray(lam_up) - np.asarray(lam_low))
            + np.asarray(xi_up)
            - np.asarray(xi_low)
        ).max()
    )
    primal = float(
        max(
            np.maximum(limits.v_low - v, 0.0).max(),
            np.maximum(v - limits.v_high, 0.0).max(),
            np.maximum(limits.q_low - q, 0.0).max(),
            np.maximum(q - limits.q_high, 0.0).max(),
        )
    )
    dual = float(
        max(
            np.maximum(-np.asarray(lam_up), 0.0).max(),
            np.maximum(-np.asarray(lam_low), 0.0).max(),
            np.maximum(-np.asarray(xi_up), 0.0).max(),
            np.maximum(-np.asarray(xi_low), 0.0).max(),
        )
    )
    slackness = float(
        max(
            np.abs(np.asarray(lam_up) * (v - limits.v_high)).max(),
            np.abs(np.asarray(lam_low) * (limits.v_low - v)).max(),
            np.abs(np.asarray(xi_up) * (q - limits.q_high)).max(),
            np.abs(np.asarray(xi_low) * (limits.q_low - q)).max(),
        )
    )
    return KKTReport(stationarity, primal, dual, slackness)


@dataclass(frozen=True)
class OracleSolution:
    q: np.ndarray
    lam_low: np.ndarray
    lam_up: np.ndarray
    xi_up: np.ndarray
    xi_low: np.ndarray
    objective: float
    kkt: KKTReport
    iterations: int


def _constraint_stack(problem):
    # G q <= h over: v upper band, v lower band, q upper box, q lower box
    n = problem.n
    X = problem.X
    eye = np.eye(n)
    G = np.vstack([X, -X, eye, -eye])
    h = np.concatenate(
        [
            problem.limits.v_high - problem.vpar,
            problem.vpar - problem.limits.v_low,
            problem.limits.q_high,
            -problem.limits.q_low,
        ]
    )
    return G, h


def _newton_barrier(q, t, H, b_lin, G, h, inner_tol=1e-12, max_newton=80):
    # Minimize t*(0.5 q'Hq + b'q) - sum log(h - Gq) from a strictly feasible q.
    for _ in range(max_newton):
        s = h - G @ q
        inv_s = 1.0 / s
        grad = t * (H @ q + b_lin) + G.T @ inv_s
        hess = t * H + (G.T * inv_s**2) @ G
        try:
            step = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, -grad, rcond=None)[0]
        decrement = float(-grad @ step)
        if decrement < 0:
            step = -grad
            decrement = float(grad @ grad)
        # backtrack: stay strictly feasible, then Armijo on the barrier value
        lam = 1.0
        gs = G @ step
        pos = gs > 0
        if pos.any():
            lam = min(1.0, 0.99 * float(np.min(s[pos] / gs[pos])))
        f0 = t * (0.5 * q @ H @ q + b_lin @ q) - np.log(s).sum()
        while lam > 1e-14:
            q_try = q + lam * step
            s_try = h - G @ q_try
            if (s_try > 0).all():
                f_try = t * (0.5 * q_try @ H @ q_try + b_lin @ q_try) - np.log(s_try).sum()
                if f_try <= f0 - 0.25 * lam * decrement:
                    break
            lam *= 0.5
        else:
            break
        q = q + lam * step
        if decrement * lam < inner_tol:
            break
    return q


def _strictly_feasible_point(problem, margin_goal=1e-6):
    """A Slater point, via a phase-1 barrier on (q, slack) if needed."""
    G, h = _constraint_stack(problem)
    n = problem.n
    q0 = 0.5 * (problem.limits.q_low + problem.limits.q_high)
    if (G @ q0 - h < -margin_goal).all():
        return q0
    # minimize s subject to Gq - h <= s; feasible iff min attains s < 0
    m = G.shape[0]
    Ga = np.hstack([G, -np.ones((m, 1))])
    qa = np.concatenate([q0, [float(np.max(G @ q0 - h)) + 1.0]])
    Ha = np.zeros((n + 1, n + 1))
    ba = np.zeros(n + 1)
    ba[-1] = 1.0
    t = 1.0
    for _ in range(60):
        qa = _newton_barrier(qa, t, Ha, ba, Ga, h, inner_tol=1e-14)
        if qa[-1] < -margin_goal:
            return qa[:n]
        if m / t < 1e-12:
            break
        t *= 8.0
    raise InfeasibleProblem(
        f"no strictly feasible point: best achievable margin {qa[-1]:.3e}",
        margin=float(qa[-1]),
    )


def reference_solve(problem, tol=1e-9):
    """Interior-point solution of one instance with recovered multipliers.

    Log-barrier outer loop over the 4n inequality constraints with damped
    Newton inner iterations, then an active-set polish that solves the
    equality-constrained optimality system exactly. The returned point
    carries a KKT report; failure to certify ``total < tol`` raises.
    """
    mu_h, _ = problem.curvature_range()
    if mu_h <= 0:
        raise OracleError("objective is not strongly convex; the minimizer may not be unique")
    G, h = _constraint_stack(problem)
    n = problem.n
    m = G.shape[0]
    H = problem.hessian()
    b_lin = problem.cost.b.astype(float)
    q = _strictly_feasible_point(problem)
    t = 1.0
    iterations = 0
    while m / t > 1e-10:
        q = _newton_barrier(q, t, H, b_lin, G, h)
        t *= 20.0
        iterations += 1
    s = h - G @ q
    lam = 1.0 / (t / 20.0 * s)  # duals of the last solved barrier problem

    # Active-set polish: pin the near-active constraints, solve the
    # stationarity system exactly, keep the result only if it certifies.
    active = s < 1e-6 * max(1.0, float(np.abs(h).max()))
    q_best, lam_best = q, lam
    if active.any():
        Ga = G[active]
        k = Ga.shape[0]
        kkt_mat = np.block([[H, Ga.T], [Ga, np.zeros((k, k))]])
        rhs = np.concatenate([-b_lin, h[active]])
        try:
            sol = np.linalg.solve(kkt_mat, rhs)
            q_p = sol[:n]
            lam_p = np.zeros(m)
            lam_p[active] = sol[n:]
            if (lam_p >= -1e-12).all() and (G @ q_p - h <= 1e-12).all():
                q_best, lam_best = q_p, np.maximum(lam_p, 0.0)
        except np.linalg.LinAlgError:
            pass
    else:
        # unconstrained minimum is the answer if it is feasible
        q_p = np.linalg.solve(H, -b_lin)
        if (G @ q_p - h <= 1e-12).all():
            q_best, lam_best = q_p, np.zeros(m)

    lam_vu = lam_best[:n]
    lam_vl = lam_best[n : 2 * n]
    xi_up = lam_best[2 * n : 3 * n]
    xi_low = lam_best[3 * n :]
    report = kkt_residual(q_best, xi_up, xi_low, lam_vl, lam_vu, problem)
    if report.total >= tol:
        raise OracleError(
            f"reference solution failed its certificate: KKT residual {report.total:.3e} >= {tol:.1e}"
        )
    return OracleSolution(
        q=q_best,
        lam_low=lam_vl,
        lam_up=lam_vu,
        xi_up=xi_up,
        xi_low=xi_low,
        objective=problem.objective(q_best),
        kkt=report,
        iterations=iterations,
    )


def box_qp_min(H, g, q_low, q_high, q0=None, tol=1e-12, max_iter=200000):
    """Projected-gradient minimizer of ``0.5 q'Hq + g'q`` over a box."""
    n = H.shape[0]
    eigs = np.linalg.eigvalsh(H)
    if eigs[0] <= 0:
        raise ValueError("box QP needs a positive definite quadratic")
    step = 1.0 / float(eigs[-1])
    q = np.clip(np.zeros(n) if q0 is None else np.asarray(q0, dtype=float), q_low, q_high)
    for _ in range(max_iter):
        q_new = np.clip(q - step * (H @ q + g), q_low, q_high)
        if np.abs(q_new - q).max() < tol:
            return q_new
        q = q_new
    return q


def lagrangian_inner_saddle(auglag, lam):
    """Inner saddle of the augmented Lagrangian for a frozen band multiplier.

    The minimizing injection solves a box QP; the matching capacity
    multiplier comes from stationarity. Used to evaluate the dual function
    of the band constraints.
    """
    problem = auglag.problem
    Xt, vb = stacked_constraints(problem)
    g = problem.cost.b + Xt.T @ np.asarray(lam, dtype=float)
    qhat = box_qp_min(problem.hessian(), g, problem.limits.q_low, problem.limits.q_high)
    xi = -(problem.gradient(qhat) + Xt.T @ np.asarray(lam, dtype=float))
    return qhat, xi


def dual_function_value(auglag, lam):
    """Value of max-over-xi min-over-qhat of the augmented Lagrangian."""
    qhat, xi = lagrangian_inner_saddle(auglag, lam)
    value, _, _, _ = auglag.evaluate(qhat, xi, lam)
    return value


def projected_dual_solve(problem, outer_iters=200000, settle=1e-12):
    """Slow cross-check: dual ascent with box-clamped inner minimization.

    Climbs the band-constraint dual with projected gradient steps while the
    inner box-constrained minimization is solved by clamped projected
    gradient. Algorithmically disjoint from both the controller and the
    interior-point path; tests compare its answer against the reference
    solver on small instances.
    """
    Xt, vb = stacked_constraints(problem)
    H = problem.hessian()
    mu_h = float(np.linalg.eigvalsh(H)[0])
    lam = np.zeros(2 * problem.n)
    # the band dual is (|Xt|^2 / mu)-smooth; ascend just under 2/L
    gamma = 1.8 * mu_h / float(np.linalg.norm(Xt, 2)) ** 2
    q = np.clip(np.zeros(problem.n), problem.limits.q_low, problem.limits.q_high)
    for _ in range(outer_iters):
        g = problem.cost.b + Xt.T @ lam
        q = box_qp_min(H, g, problem.limits.q_low, problem.limits.q_high, q0=q, tol=1e-14)
        lam_new = np.maximum(0.0, lam + gamma * (Xt @ q - vb))
        if np.abs(lam_new - lam).max() < settle:
            lam = lam_new
            break
        lam = lam_new
    g = problem.cost.b + Xt.T @ lam
    q = box_qp_min(H, g, problem.limits.q_low, problem.limits.q_high, q0=q, tol=1e-14)
    return q, lam
