"""Theoretical step-size certificate for the controller dynamics.

For a fixed penalty scale ``c`` and a fixed ratio ``eta = beta/alpha``, the
inner primal-dual iteration on (desired injection, capacity multiplier)
contracts toward its saddle in a weighted norm at ratio

    rho(alpha) = exp(-tau * alpha / 2) + alpha^2 * nu^2 * kappa(P0) / 2,

where the constants derive from the curvature of the total objective seen
through the inverse-reactance scaling. Any ``0 < alpha < alpha_max`` with
``alpha_max = min(1/tau, tau / (2 nu^2 kappa(P0)))`` gives ``rho < 1``, and
the voltage-multiplier step is then admissible below

    gamma_max = min(mu / (2 |Xt|^2), |Xt|^2 (1 - rho)^2 / (2 mu C2^2)),

with ``|Xt| = sqrt(2) |X|`` the norm of the stacked band-constraint matrix.
The bounds are conservative by construction; runs typically use much larger
trial step sizes and the certificate is emitted as advisory metadata.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class CertificateError(RuntimeError):
    """Internal inconsistency while assembling the certificate."""


def _sym_eig_range(M):
    eigs = np.linalg.eigvalsh(M)
    return float(eigs[0]), float(eigs[-1])


@dataclass(frozen=True)
class Certificate:
    """Contraction constants plus the admissible step-size region."""

    mu: float
    l: float
    c: float
    eta: float
    mu_prime: float
    l_prime: float
    a: float
    tau: float
    nu: float
    kappa_p0: float
    kappa_p: float
    x_norm: float
    xt_norm: float
    c2: float
    alpha_max: float
    alpha: float
    rho_at_alpha: float
    gamma_max: float

    def rho_gap(self, alpha):
        """Stable evaluation of ``rho(alpha) - 1``.

        On badly conditioned instances the admissible alphas are so small
        that ``rho`` is below one only by an amount that underflows when
        added to 1.0, so contraction checks must use this gap form.
        """
        alpha = np.asarray(alpha, dtype=float)
        out = np.expm1(-self.tau * alpha / 2.0) + alpha**2 * self.nu**2 * self.kappa_p0 / 2.0
        return float(out) if out.ndim == 0 else out

    def rho(self, alpha):
        """Contraction ratio as a function of the primal step size."""
        out = 1.0 + self.rho_gap(alpha)
        return float(out) if np.ndim(out) == 0 else out

    def admissible(self, alpha, gamma):
        """Whether user step sizes sit inside the certified region."""
        return bool(alpha < self.alpha_max) and bool(
            math.isfinite(self.gamma_max) and gamma < self.gamma_max
        )


def step_size_certificate(mats, mu, l, c, eta, alpha=None):
    """Assemble the certificate for one feeder and cost curvature pair.

    Parameters
    ----------
    mats : SensitivityMatrices (uses X and Y)
    mu, l : strong-convexity and smoothness constants of the total cost
    c : penalty scale
    eta : fixed ratio beta/alpha
    alpha : primal step at which rho and the gamma bound are evaluated;
        defaults to alpha_max / 2

    Raises ``CertificateError`` if either weighting matrix fails the
    positive-definiteness check, which cannot happen for admissible inputs
    and therefore flags an implementation bug.
    """
    if mu <= 0 or l < mu:
        raise ValueError(f"need 0 < mu <= l, got mu={mu}, l={l}")
    if c <= 0 or eta <= 0:
        raise ValueError("c and eta must be positive")
    Y = mats.y_dense()
    n = Y.shape[0]
    sig_min_y, sig_max_y = _sym_eig_range(Y)
    if sig_min_y <= 0:
        raise CertificateError("inverse-reactance matrix is not positive definite")
    kappa_y = sig_max_y / sig_min_y
    mu_p = mu * sig_min_y
    l_p = l * sig_max_y

    a = (
        20.0
        * l_p
        * max(c * sig_max_y / mu_p, l_p / mu_p) ** 2
        * max(eta / (l_p * c), l_p / mu_p) ** 2
        * kappa_y
    )
    tau = (eta / 2.0) * sig_min_y / a
    nu = max(
        math.sqrt(2.0 * (l_p + sig_max_y * c) ** 2 + 2.0 * eta**2 * sig_max_y),
        math.sqrt(2.0 * sig_max_y + 8.0 * eta**2 / c**2),
    )

    eigvals_y, eigvecs_y = np.linalg.eigh(Y)
    y_half = (eigvecs_y * np.sqrt(eigvals_y)) @ eigvecs_y.T
    eye = np.eye(n)
    p0 = np.block([[eta * a * eye, eta * y_half], [eta * y_half, a * eye]])
    p = np.block([[eta * a * mats.X, eta * eye], [eta * eye, a * eye]])
    lo0, hi0 = _sym_eig_range(p0)
    lo, hi = _sym_eig_range(p)
    if lo0 <= 0 or lo <= 0:
        raise CertificateError(
            f"weighting matrix lost positive definiteness (min eigs {lo0:.3e}, {lo:.3e})"
        )
    kappa_p0 = hi0 / lo0
    kappa_p = hi / lo

    x_norm = float(np.linalg.norm(mats.X, 2))
    xt_norm = math.sqrt(2.0) * x_norm
    c2 = xt_norm**2 * math.sqrt(kappa_p) * math.sqrt((1.0 + 4.0 * l**2) / mu**2)
    alpha_max = min(1.0 / tau, tau / (2.0 * nu**2 * kappa_p0))
    if alpha is None:
        alpha = alpha_max / 2.0
    gap = math.expm1(-tau * alpha / 2.0) + alpha**2 * nu**2 * kappa_p0 / 2.0
    rho_at = 1.0 + gap
    if gap < 0.0:
        gamma_max = min(
            mu / (2.0 * xt_norm**2),
            xt_norm**2 * gap**2 / (2.0 * mu * c2**2),
        )
    else:
        gamma_max = float("nan")
    return Certificate(
        mu=mu,
        l=l,
        c=c,
        eta=eta,
        mu_prime=mu_p,
        l_prime=l_p,
        a=a,
        tau=tau,
        nu=nu,
        kappa_p0=kappa_p0,
        kappa_p=kappa_p,
        x_norm=x_norm,
        xt_norm=xt_norm,
        c2=c2,
        alpha_max=alpha_max,
        alpha=float(alpha),
        rho_at_alpha=float(rho_at),
        gamma_max=float(gamma_max),
    )


def certified_params(mats, mu, l, c, eta, d=0.0, safety=0.5):
    """Controller parameters sitting strictly inside the certified region."""
    from .controller import ControllerParams

    cert = step_size_certificate(mats, mu, l, c, eta)
    alpha = safety * cert.alpha_max
    cert = step_size_certificate(mats, mu, l, c, eta, alpha=alpha)
    if not math.isfinite(cert.gamma_max) or cert.gamma_max <= 0:
        raise CertificateError("no admissible gamma at the chosen alpha")
    params = ControllerParams(
        alpha=alpha, beta=eta * alpha, gamma=safety * cert.gamma_max, c=c, d=d
    )
    return params, cert


def certificate_to_dict(cert):
    return {
        "mu": cert.mu,
        "l": cert.l,
        "c": cert.c,
        "eta": cert.eta,
        "mu_prime": cert.mu_prime,
        "l_prime": cert.l_prime,
        "a": cert.a,
        "tau": cert.tau,
        "nu": cert.nu,
        "kappa_p0": cert.kappa_p0,
        "kappa_p": cert.kappa_p,
        "x_norm": cert.x_norm,
        "xt_norm": cert.xt_norm,
        "c2": cert.c2,
        "alpha_max": cert.alpha_max,
        "alpha": cert.alpha,
        "rho_at_alpha": cert.rho_at_alpha,
        "gamma_max": cert.gamma_max,
    }
