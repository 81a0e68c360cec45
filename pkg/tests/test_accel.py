import numpy as np
import pytest
from conftest import random_dataset

from ipsgp.accel import (
    AccelConfig,
    KffOperator,
    LinearOperator,
    accelerated_nlml,
    cg_tridiagonal,
    lanczos,
    nystrom_precond,
    nystrom_rank,
    pcg,
    slq_logdet,
)
from ipsgp.covfunc import MaternParams
from ipsgp.errors import NonSPDError
from ipsgp.gp import Hyperparameters, assemble_kff, assemble_parts, nlml_and_grad, pair_geometry
from ipsgp.systems import ForceFamily


def spd(n, rng, decay=None, shift=0.0):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lam = rng.uniform(0.5, 2.0, n) if decay is None else decay
    return (Q * lam) @ Q.T + shift * np.eye(n), lam


def fast_decay(n, rng, cond=1e8):
    """SPD kernel-like matrix with geometric spectrum spanning ``cond``."""
    lam = np.geomspace(1.0, 1.0 / cond, n)
    A, _ = spd(n, rng, decay=lam)
    return 0.5 * (A + A.T), lam


class TestPCG:
    def test_identity_one_step(self):
        b = np.arange(1.0, 6.0)
        res = pcg(LinearOperator.dense(np.eye(5)), None, b)
        np.testing.assert_allclose(res.x, b, rtol=1e-15)
        assert res.iterations[0] == 1

    def test_diagonal(self):
        res = pcg(LinearOperator.dense(np.diag([1.0, 2.0])), None, np.array([1.0, 2.0]), tol=1e-14)
        np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-10)

    def test_random_spd_with_nystrom(self):
        rng = np.random.default_rng(0)
        A, _ = spd(50, rng, decay=np.geomspace(10, 1e-3, 50))
        sigma2 = 1e-2
        op = LinearOperator.dense(A)
        P = nystrom_precond(op, sigma2, 20, seed=1)
        b = rng.standard_normal(50)
        res = pcg(op.shifted(sigma2), P, b, tol=1e-13, max_iter=200)
        direct = np.linalg.solve(A + sigma2 * np.eye(50), b)
        np.testing.assert_allclose(res.x, direct, rtol=0, atol=1e-8 * np.abs(direct).max())

    def test_columns_independent(self):
        rng = np.random.default_rng(1)
        A, _ = spd(30, rng)
        op = LinearOperator.dense(A)
        B = rng.standard_normal((30, 3))
        joint = pcg(op, None, B, tol=1e-12)
        for j in range(3):
            single = pcg(op, None, B[:, j], tol=1e-12)
            np.testing.assert_allclose(joint.x[:, j], single.x, rtol=1e-10, atol=1e-12)

    def test_per_column_caps(self):
        rng = np.random.default_rng(2)
        A, _ = spd(40, rng, decay=np.geomspace(1, 1e-2, 40))
        res = pcg(LinearOperator.dense(A), None, rng.standard_normal((40, 2)), tol=1e-10, max_iter=[400, 3])
        assert res.iterations[1] == 3 and not res.converged[1]
        assert res.converged[0]

    def test_indefinite_detected(self):
        with pytest.raises(NonSPDError):
            pcg(LinearOperator.dense(np.diag([1.0, -1.0])), None, np.array([1.0, 1.0]))

    def test_error_energy_norm_monotone(self):
        # ||x* - x_k||_A = ||r_k||_{A^-1} never increases along PCG iterates
        rng = np.random.default_rng(3)
        A, _ = fast_decay(80, rng, cond=1e4)
        op = LinearOperator.dense(A)
        P = nystrom_precond(op, 1e-6, 20, seed=0)
        As = A + 1e-6 * np.eye(80)
        b = rng.standard_normal(80)
        xs = np.linalg.solve(As, b)
        errs = []
        for k in range(1, 60):
            e = xs - pcg(op.shifted(1e-6), P, b, tol=1e-14, max_iter=k).x
            errs.append(np.sqrt(e @ As @ e))
        errs = np.asarray(errs)
        assert np.all(np.diff(errs) <= 1e-12 * errs[0])
        assert errs[-1] < 0.1 * errs[0]


class TestNystrom:
    def test_identity_operator(self):
        P = nystrom_precond(LinearOperator.dense(np.eye(20)), 0.0, 5, seed=0)
        v = np.random.default_rng(0).standard_normal(20)
        np.testing.assert_allclose(P.apply_inverse(v), v, atol=1e-8)
        np.testing.assert_allclose(P.Lambda, 1.0, atol=1e-8)
        assert abs(P.lambda_r - 1.0) <= 1e-8

    def test_orthonormal_and_spd(self):
        rng = np.random.default_rng(1)
        A, _ = fast_decay(60, rng, cond=1e6)
        P = nystrom_precond(LinearOperator.dense(A), 1e-3, 15, seed=2)
        np.testing.assert_allclose(P.U.T @ P.U, np.eye(15), atol=1e-10)
        V = rng.standard_normal((60, 20))
        assert np.all(np.einsum("ij,ij->j", V, P.apply_inverse(V)) > 0)

    def test_logdet_against_reconstruction(self):
        rng = np.random.default_rng(2)
        for seed in range(3):
            A, _ = spd(30, rng, decay=np.geomspace(5, 1e-3, 30))
            P = nystrom_precond(LinearOperator.dense(A), 1e-2, 10, seed=seed)
            dense = P.dense()
            np.testing.assert_allclose(P.logdet_P, np.linalg.slogdet(dense)[1], atol=1e-6)
            np.testing.assert_allclose(P.apply_inverse(np.eye(30)), np.linalg.inv(dense), atol=1e-8)

    def test_condition_number_drops(self):
        rng = np.random.default_rng(3)
        A, _ = fast_decay(100, rng, cond=1e8)
        s2 = 1e-8
        As = A + s2 * np.eye(100)
        P = nystrom_precond(LinearOperator.dense(A), s2, 30, seed=0)
        Pi = P.apply_inv_sqrt(np.eye(100))
        lam = np.linalg.eigvalsh(Pi @ As @ Pi)
        assert lam.max() / lam.min() <= np.linalg.cond(As)

    def test_rank_rule(self):
        assert nystrom_rank(1080) == int(np.floor(30 / np.log(12) * np.log(108)))
        with pytest.raises(ValueError):
            nystrom_precond(LinearOperator.dense(np.eye(3)), 0.0, 4)


class TestSLQ:
    def test_identity_zero(self):
        res = slq_logdet(LinearOperator.dense(np.eye(12)), None, n_probes=5, seed=0)
        assert abs(res.estimate) <= 1e-12

    def test_scaled_identity(self):
        res = slq_logdet(LinearOperator.dense(2 * np.eye(10)), None, n_probes=30, seed=0)
        assert abs(res.estimate - 10 * np.log(2)) <= 0.01 * 10 * np.log(2)

    def test_pcg_route_agrees_with_lanczos(self):
        rng = np.random.default_rng(4)
        A, _ = spd(80, rng, decay=np.geomspace(3, 1e-2, 80))
        op = LinearOperator.dense(A)
        P = nystrom_precond(op, 0.0, 10, seed=1)
        a = slq_logdet(op, P, n_probes=8, m_coeffs=40, seed=5, method="lanczos").estimate
        b = slq_logdet(op, P, n_probes=8, m_coeffs=40, seed=5, method="pcg").estimate
        assert abs(a - b) <= 1e-6 * abs(a)

    def test_unbiased_within_three_se(self):
        rng = np.random.default_rng(5)
        A, lam = spd(100, rng, decay=rng.uniform(0.2, 5.0, 100))
        exact = float(np.sum(np.log(lam)))
        res = slq_logdet(LinearOperator.dense(A), None, n_probes=200, m_coeffs=30, seed=0)
        assert abs(res.estimate - exact) <= 3 * res.stderr

    def test_cg_tridiagonal_matches_lanczos(self):
        rng = np.random.default_rng(6)
        A, _ = spd(40, rng)
        op = LinearOperator.dense(A)
        z = rng.choice([-1.0, 1.0], 40)
        res = pcg(op, None, z, tol=1e-14, max_iter=12)
        dg, of = cg_tridiagonal(res.alphas[0], res.betas[0])
        dl, ol, _ = lanczos(op, z, 12)
        np.testing.assert_allclose(dg, dl, rtol=1e-8)
        np.testing.assert_allclose(of, ol, rtol=1e-8)

    def test_ritz_values_inside_spectrum(self):
        rng = np.random.default_rng(7)
        A, lam = spd(60, rng, decay=np.geomspace(10, 0.1, 60))
        dg, of, Vb = lanczos(LinearOperator.dense(A), rng.standard_normal(60), 60)
        T = np.diag(dg) + np.diag(of, 1) + np.diag(of, -1)
        theta = np.linalg.eigvalsh(T)
        assert theta.min() >= lam.min() * (1 - 1e-10) and theta.max() <= lam.max() * (1 + 1e-10)
        np.testing.assert_allclose(Vb.T @ Vb, np.eye(Vb.shape[1]), atol=1e-10)

    def test_breakdown_truncates(self):
        # two distinct eigenvalues: Krylov space has dimension 2
        A = np.diag([1.0] * 5 + [3.0] * 5)
        dg, of, _ = lanczos(LinearOperator.dense(A), np.ones(10), 8)
        assert dg.size == 2
        res = slq_logdet(LinearOperator.dense(A), None, n_probes=4, m_coeffs=8, seed=0)
        assert np.isfinite(res.estimate)


def test_operator_linearity():
    rng = np.random.default_rng(8)
    ds = random_dataset(rng, N=4, M=1, L=2)
    op = KffOperator(pair_geometry(ds), MaternParams(1.0, 0.8), MaternParams(0.5, 1.3, 0.5), chunk_elems=50)
    u, v = rng.standard_normal(ds.n_obs), rng.standard_normal(ds.n_obs)
    scale = np.linalg.norm(op.matvec(u)) + np.linalg.norm(op.matvec(v))
    assert np.linalg.norm(op.matvec(u + v) - op.matvec(u) - op.matvec(v)) <= 1e-10 * scale
    K = assemble_kff(ds, op.theta_E, op.theta_A)
    np.testing.assert_allclose(op.matvec(np.eye(ds.n_obs)), K, rtol=1e-12, atol=1e-14)
    parts = assemble_parts(pair_geometry(ds), op.theta_E, op.theta_A, with_grad=True)
    np.testing.assert_allclose(op.dmatvec(u, "E"), op.theta_E.s2 * (parts.dE @ u), rtol=1e-10, atol=1e-13)


@pytest.fixture(scope="module")
def fm_small():
    from ipsgp.systems import builtin_system, generate_dataset

    spec = builtin_system("FM").replace(N=20)
    ds = generate_dataset(spec, 3, 6, 0.01, seed=0)
    h = Hyperparameters(MaternParams(1.0, 1.0), MaternParams(1.0, 1.0), sigma=0.01, alpha=spec.alpha,
                        force=spec.force, trainable=("s2_E", "omega_E", "s2_A", "omega_A", "alpha"))
    return ds, h


class TestAcceleratedNLML:

    def test_deterministic(self, fm_small):
        ds, h = fm_small
        a = accelerated_nlml(ds, h, AccelConfig(seed=3))
        b = accelerated_nlml(ds, h, AccelConfig(seed=3))
        assert a[0] == b[0]
        for k in a[1]:
            assert np.array_equal(a[1][k], b[1][k])

    def test_high_rank_matches_exact(self, fm_small):
        ds, h = fm_small
        ex = nlml_and_grad(ds, h)
        val, grad = accelerated_nlml(ds, h, AccelConfig(rank=300, seed=0))
        assert abs(val - ex.value) <= 1e-3 * abs(ex.value)
        np.testing.assert_allclose(grad["alpha"], ex.grad["alpha"], rtol=5e-2)
        # the force-parameter gradient is deterministic given the solve accuracy
        _, tight = accelerated_nlml(ds, h, AccelConfig(rank=300, seed=0, tol=1e-10, max_iter=2000))
        np.testing.assert_allclose(tight["alpha"], ex.grad["alpha"], rtol=1e-6)

    def test_gradient_traces(self, fm_small):
        ds, h = fm_small
        ex = nlml_and_grad(ds, h).grad
        errs = []
        for seed in range(4):
            _, g = accelerated_nlml(ds, h, AccelConfig(rank=300, n_probes=30, seed=seed))
            errs.append([abs(g[k] - ex[k]) / abs(ex[k]) for k in ("s2_E", "omega_E", "s2_A", "omega_A")])
        assert np.median(errs) <= 5e-2

    def test_matrix_free_path(self):
        rng = np.random.default_rng(9)
        ds = random_dataset(rng, N=4, M=2, L=2)
        h = Hyperparameters(MaternParams(1.0, 0.9), MaternParams(0.4, 1.2), sigma=0.3, alpha=(1.0, 2.0),
                            force=ForceFamily("rayleigh"), trainable=("s2_E", "omega_A", "sigma", "alpha"))
        dense = accelerated_nlml(ds, h, AccelConfig(seed=1))
        free = accelerated_nlml(ds, h, AccelConfig(seed=1, dense_limit=0))
        np.testing.assert_allclose(free[0], dense[0], rtol=1e-8)
        for k in dense[1]:
            np.testing.assert_allclose(free[1][k], dense[1][k], rtol=1e-6)
