"""Shared instance generators and the acceptance-wide trace registry."""

import numpy as np
import pytest

import voltctrl as vc
from voltctrl import feeders, sim
from voltctrl.controller import check_strong_convexity


def random_radial(rng, n, x_range=(0.05, 0.3)):
    """Random-attachment tree with seeded impedances (shallow for good conditioning)."""
    lines = []
    for b in range(1, n + 1):
        parent = 0 if b == 1 else int(rng.integers(0, b))
        x = float(rng.uniform(*x_range))
        r = float(rng.uniform(0.5, 1.0)) * x
        lines.append(vc.Line(parent, b, r, x))
    return vc.RadialNetwork(n, lines)


def feasible_instance(rng, n, d_choices=(0.0, 0.5)):
    """Instance with a guaranteed strictly feasible point and an uncontrolled
    undervoltage, built by placing a random interior operating point and
    backing out the loading condition."""
    net = random_radial(rng, n)
    mats = vc.sensitivity_matrices(net)
    limits = feeders.standard_limits(n)
    vpar = None
    for _ in range(100):
        q0 = rng.uniform(0.05, 0.15, n)
        v_t = rng.uniform(limits.v_low + 0.003, limits.v_low + 0.02)
        cand = v_t - mats.X @ q0
        if (cand < limits.v_low - 1e-3).any():
            vpar = cand
            break
    assert vpar is not None, "instance generator failed to produce a violation"
    d = float(rng.choice(d_choices))
    cost = vc.CostModel(a=rng.uniform(0.5, 2.0, n), b=np.zeros(n))
    return net, mats, limits, cost, d, vpar, q0


def profiles_for_vpar(net, mats, vpar):
    """Static loading that reproduces a prescribed uncontrolled voltage."""
    q_exo = np.linalg.solve(mats.X, np.asarray(vpar) - net.v0)
    return sim.Profiles(p=np.zeros(net.n), q_exo=q_exo)


def practical_steps(mats_x, y_dense, cost, d, c=1.0, gamma_scale=0.45):
    """Trial step sizes: primal step against the scaled curvature bound,
    dual step against the band-constraint smoothness.

    ``gamma_scale`` multiplies the conservative dual step; the convergence
    suites sweep it over a small ladder per instance, mirroring how step
    sizes are picked by trial in practice.
    """
    sy = float(np.linalg.eigvalsh(y_dense)[-1])
    mu, _ = check_strong_convexity(cost, d, mats_x)
    alpha = 0.9 / (d + sy * (2 * cost.a.max() + c))
    beta = min(0.5 * c, alpha * sy * c)
    gamma = gamma_scale * mu / float(np.linalg.norm(mats_x, 2)) ** 2
    return vc.ControllerParams(alpha=alpha, beta=beta, gamma=gamma, c=c, d=d)


def run_to_settle(net, mats, limits, cost, d, vpar, gamma_ladder, max_ticks=120000):
    """Closed-loop run retried over a dual-step ladder until it settles."""
    profiles = profiles_for_vpar(net, mats, vpar)
    scenario = sim.Scenario(profiles=profiles, horizon=1)
    trace = ticks = params = None
    for gamma_scale in gamma_ladder:
        params = practical_steps(mats.X, mats.y_dense(), cost, d, gamma_scale=gamma_scale)
        trace, ticks, settled = sim.run_until(
            net, mats, scenario, params, cost, limits,
            settled_stop(params), chunk=4000, max_ticks=max_ticks,
        )
        if settled:
            return trace, ticks, params, True
    return trace, ticks, params, False


def settled_stop(params):
    """Stop predicate: primal motion, multiplier motion and clamp gap all tiny."""

    def stop(states, prev):
        lam = np.concatenate([states.lam_low, states.lam_up])
        lam_prev = np.concatenate([prev.lam_low, prev.lam_up])
        if np.abs(states.qhat - prev.qhat).max() > 1e-11:
            return False
        if np.linalg.norm(lam - lam_prev) > min(1e-8, params.gamma * 1e-7):
            return False
        if np.abs(states.q - states.qhat).max() > 1e-6:
            return False
        return True

    return stop


@pytest.fixture(scope="session")
def acceptance_registry():
    """Every trace produced by the acceptance suite, for the capacity sweep."""
    return []
