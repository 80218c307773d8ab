import numpy as np
import pytest

import voltctrl as vc
from voltctrl.certificate import certificate_to_dict, certified_params, step_size_certificate
from voltctrl.controller import check_strong_convexity
from conftest import random_radial


def instance(seed, n):
    rng = np.random.Generator(np.random.Philox(seed))
    net = random_radial(rng, n)
    mats = vc.sensitivity_matrices(net)
    cost = vc.CostModel(a=rng.uniform(0.5, 2.0, n), b=np.zeros(n))
    d = float(rng.choice([0.0, 0.5]))
    mu, ell = check_strong_convexity(cost, d, mats.X)
    return mats, mu, ell


class TestCertificate:
    def test_rho_at_zero_is_one(self):
        mats, mu, ell = instance(1, 5)
        cert = step_size_certificate(mats, mu, ell, c=1.0, eta=1.0)
        assert cert.rho(0.0) == pytest.approx(1.0)

    def test_rho_below_one_inside_admissible_region(self):
        mats, mu, ell = instance(2, 8)
        cert = step_size_certificate(mats, mu, ell, c=1.0, eta=1.0)
        assert cert.alpha_max > 0
        alphas = np.linspace(cert.alpha_max * 1e-3, cert.alpha_max * 0.999, 50)
        assert (cert.rho_gap(alphas) < 0.0).all()

    def test_rho_strictly_decreasing_on_half_range(self):
        for seed in range(5):
            mats, mu, ell = instance(seed + 10, 6)
            cert = step_size_certificate(mats, mu, ell, c=1.0, eta=1.0)
            alphas = np.linspace(cert.alpha_max / 200, cert.alpha_max / 2, 100)
            gaps = cert.rho_gap(alphas)
            assert (np.diff(gaps) < 0).all()

    def test_weighting_matrices_positive_definite(self):
        # reconstruct P0 and P from the certified constants and check eigenvalues
        mats, mu, ell = instance(3, 7)
        cert = step_size_certificate(mats, mu, ell, c=1.0, eta=1.0)
        Y = mats.y_dense()
        n = Y.shape[0]
        w, V = np.linalg.eigh(Y)
        y_half = (V * np.sqrt(w)) @ V.T
        eye = np.eye(n)
        p0 = np.block([[cert.eta * cert.a * eye, cert.eta * y_half], [cert.eta * y_half, cert.a * eye]])
        p = np.block([[cert.eta * cert.a * mats.X, cert.eta * eye], [cert.eta * eye, cert.a * eye]])
        assert np.linalg.eigvalsh(p0)[0] > 0
        assert np.linalg.eigvalsh(p)[0] > 0

    def test_stack_norm_identity(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            n = int(rng.integers(2, 9))
            M = rng.normal(size=(n, n))
            M = M @ M.T + n * np.eye(n)
            stacked = np.vstack([-M, M])
            assert np.linalg.norm(stacked, 2) == pytest.approx(
                np.sqrt(2.0) * np.linalg.norm(M, 2), rel=1e-12
            )

    def test_certified_params_inside_region(self):
        net = vc.RadialNetwork(1, [vc.Line(0, 1, 0.5, 0.5)])
        mats = vc.sensitivity_matrices(net)
        params, cert = certified_params(mats, 1.0, 1.0, c=1.0, eta=1.0)
        assert params.alpha == pytest.approx(cert.alpha_max / 2)
        assert params.beta == pytest.approx(params.alpha)
        assert 0 < params.gamma < cert.gamma_max
        assert cert.rho_gap(params.alpha) < 0.0
        assert cert.admissible(params.alpha, params.gamma)

    def test_gamma_bound_nan_when_rho_geq_one(self):
        mats, mu, ell = instance(6, 4)
        cert = step_size_certificate(mats, mu, ell, c=1.0, eta=1.0, alpha=10.0)
        assert cert.rho_at_alpha >= 1.0
        assert np.isnan(cert.gamma_max)
        assert not cert.admissible(10.0, 0.1)

    def test_input_validation(self):
        mats, mu, ell = instance(7, 4)
        with pytest.raises(ValueError):
            step_size_certificate(mats, 0.0, ell, c=1.0, eta=1.0)
        with pytest.raises(ValueError):
            step_size_certificate(mats, mu, mu / 2, c=1.0, eta=1.0)
        with pytest.raises(ValueError):
            step_size_certificate(mats, mu, ell, c=-1.0, eta=1.0)

    def test_dict_round_trip_fields(self):
        mats, mu, ell = instance(8, 4)
        cert = step_size_certificate(mats, mu, ell, c=1.0, eta=2.0)
        blob = certificate_to_dict(cert)
        for key in ("mu_prime", "l_prime", "a", "tau", "nu", "kappa_p0", "kappa_p",
                    "alpha_max", "c2", "gamma_max", "rho_at_alpha"):
            assert key in blob

    def test_hand_computed_single_bus(self):
        # X = [[1]], mu = l = 1, c = 1, eta = 1: a = 20, tau = 1/40,
        # nu = sqrt(10), kappa(P0) = 21/19
        net = vc.RadialNetwork(1, [vc.Line(0, 1, 0.5, 0.5)])
        mats = vc.sensitivity_matrices(net)
        cert = step_size_certificate(mats, 1.0, 1.0, c=1.0, eta=1.0)
        assert cert.a == pytest.approx(20.0)
        assert cert.tau == pytest.approx(0.025)
        assert cert.nu == pytest.approx(np.sqrt(10.0))
        assert cert.kappa_p0 == pytest.approx(21.0 / 19.0)
        assert cert.alpha_max == pytest.approx(
            min(1 / 0.025, 0.025 / (2 * 10.0 * 21.0 / 19.0))
        )
