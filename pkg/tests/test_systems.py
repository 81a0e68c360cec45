import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipsgp.errors import NonFiniteError
from ipsgp.systems import (
    BUILTIN_NAMES,
    ForceFamily,
    TrajectoryDataset,
    builtin_system,
    generate_dataset,
    load_dataset,
    preprocess_frames,
    rhs,
    save_dataset,
    simulate,
    zero_kernel,
)


def ones(r):
    return np.ones_like(np.asarray(r, dtype=float))


def free_pair(d=1, N=2, phi_E=ones):
    """Newtonian agents with no non-collective force."""
    return builtin_system("AD").replace(d=d, N=N, phi_E=phi_E, phi_A=zero_kernel)


class TestBuiltins:
    def test_cs_alignment_at_zero(self):
        assert builtin_system("CS").phi_A(np.array(0.0)) == 1.0

    def test_ods_piecewise(self):
        phi = builtin_system("ODS").phi_E
        assert phi(np.array(0.5)) == 10.0
        assert phi(np.array(2.0)) == 0.0

    def test_fm_truncation_is_c1(self):
        # independent solve of a exp(-b r0) = g(r0), -a b exp(-b r0) = g'(r0)
        r0 = 0.05

        def g(r):
            return (-np.exp(-2 * r) + np.exp(-r / 4)) / r

        def dg(r):
            return (2 * np.exp(-2 * r) - 0.25 * np.exp(-r / 4)) / r - (-np.exp(-2 * r) + np.exp(-r / 4)) / r**2

        b = -dg(r0) / g(r0)
        a = g(r0) * np.exp(b * r0)
        phi = builtin_system("FM").phi_E
        r_in = np.array([0.0, 0.01, 0.03, r0 - 1e-12])
        np.testing.assert_allclose(phi(r_in), a * np.exp(-b * r_in), rtol=1e-10)
        np.testing.assert_allclose(phi(np.array([r0])), g(r0), rtol=1e-12)
        left, right = a * np.exp(-b * r0), g(r0)
        assert abs(left - right) <= 1e-10 * abs(right)
        assert abs(-b * left - dg(r0)) <= 1e-10 * abs(dg(r0))
        # one-sided differences of the piecewise kernel agree as well
        h = 1e-7
        dl = (phi(np.array([r0 - h])) - phi(np.array([r0 - 2 * h]))) / h
        dr = (phi(np.array([r0 + 2 * h])) - phi(np.array([r0 + h]))) / h
        np.testing.assert_allclose(dl, dr, rtol=1e-4)

    def test_unknown_name(self):
        with pytest.raises(ValueError):
            builtin_system("XYZ")

    @pytest.mark.parametrize("name", BUILTIN_NAMES)
    def test_first_order_flag(self, name):
        spec = builtin_system(name)
        assert spec.first_order == (name in ("OD", "ODS"))
        assert spec.N == (5 if name == "OD" else 10)


class TestRHS:
    def test_zero_everything(self):
        spec = free_pair(d=2, N=3, phi_E=zero_kernel)
        state = np.random.default_rng(0).standard_normal(12)
        assert np.array_equal(rhs(spec, zero_kernel, zero_kernel, state), np.zeros(6))

    def test_two_agent_spring(self):
        spec = free_pair()
        acc = rhs(spec, ones, zero_kernel, np.array([0.0, 1.0, 0.0, 0.0]))
        np.testing.assert_allclose(acc, [0.5, -0.5], rtol=0, atol=1e-15)

    def test_rayleigh_force_by_hand(self):
        spec = builtin_system("CS").replace(N=1, d=2)
        v = np.array([0.3, -0.4])
        state = np.concatenate([[1.0, 2.0], v])
        acc = rhs(spec, zero_kernel, zero_kernel, state)
        np.testing.assert_allclose(acc, 1.0 * v * (1 - 0.5**2), rtol=1e-14)

    def test_damping_enters_first_order_as_velocity(self):
        spec = builtin_system("OD")
        x = np.linspace(-0.8, 0.8, 5)
        v = rhs(spec, spec.phi_E, zero_kernel, x)
        diff = x[None, :] - x[:, None]
        expect = (spec.phi_E(np.abs(diff)) * diff).sum(axis=1) / 5
        np.testing.assert_allclose(v, expect, rtol=1e-13, atol=1e-15)

    def test_first_order_rejects_alignment(self):
        spec = builtin_system("OD")
        with pytest.raises(ValueError):
            rhs(spec, spec.phi_E, ones, np.zeros(5))

    def test_nonfinite_kernel_names_pair(self):
        spec = free_pair(N=3)

        def bad(r):
            return 1.0 / r

        state = np.array([0.0, 1.0, 1.0, 0.0, 0.0, 0.0])
        with pytest.raises(NonFiniteError, match=r"i=1, k=2"):
            rhs(spec, bad, zero_kernel, state)

    @pytest.mark.parametrize("name", ["CS", "FM", "AD"])
    def test_translation_invariance(self, name):
        spec = builtin_system(name)
        rng = np.random.default_rng(3)
        state = rng.uniform(-1, 1, 2 * spec.dim)
        shifted = state.copy()
        shifted[: spec.dim] += np.tile([3.7, -1.2], spec.N)
        a = rhs(spec, spec.phi_E, spec.phi_A, state)
        b = rhs(spec, spec.phi_E, spec.phi_A, shifted)
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0, 2 * np.pi), st.integers(0, 10_000), st.sampled_from(["CS", "FM", "AD"]))
    def test_rotation_equivariance(self, angle, seed, name):
        spec = builtin_system(name)
        c, s = np.cos(angle), np.sin(angle)
        Q = np.array([[c, -s], [s, c]])
        state = np.random.default_rng(seed).uniform(-1, 1, 2 * spec.dim)
        X, V = state[: spec.dim].reshape(-1, 2), state[spec.dim :].reshape(-1, 2)
        rotated = np.concatenate([(X @ Q.T).ravel(), (V @ Q.T).ravel()])
        a = rhs(spec, spec.phi_E, spec.phi_A, state).reshape(-1, 2)
        b = rhs(spec, spec.phi_E, spec.phi_A, rotated).reshape(-1, 2)
        np.testing.assert_allclose(b, a @ Q.T, rtol=0, atol=1e-12)

    def test_permutation_equivariance(self):
        spec = builtin_system("AD")
        rng = np.random.default_rng(4)
        state = rng.uniform(0, 5, 2 * spec.dim)
        perm = rng.permutation(spec.N)
        X, V = state[: spec.dim].reshape(-1, 2), state[spec.dim :].reshape(-1, 2)
        permuted = np.concatenate([X[perm].ravel(), V[perm].ravel()])
        a = rhs(spec, spec.phi_E, spec.phi_A, state).reshape(-1, 2)
        b = rhs(spec, spec.phi_E, spec.phi_A, permuted).reshape(-1, 2)
        np.testing.assert_allclose(b, a[perm], rtol=1e-14, atol=1e-15)

    def test_stubborn_agent_only(self):
        spec = builtin_system("ODS")
        x = np.zeros(10)
        v = rhs(spec, zero_kernel, zero_kernel, x)
        # P = 1, kappa = 10 acting on agent 0: -kappa (x - P)
        np.testing.assert_allclose(v, np.r_[10.0, np.zeros(9)])


class TestSimulate:
    def test_free_flight(self):
        spec = free_pair(d=2, N=3, phi_E=zero_kernel)
        rng = np.random.default_rng(5)
        x0, v0 = rng.standard_normal(6), rng.standard_normal(6)
        t = np.linspace(0, 3, 7)
        tr = simulate(spec, zero_kernel, zero_kernel, np.r_[x0, v0], t)
        np.testing.assert_allclose(tr.states[:, :6], x0 + t[:, None] * v0, rtol=1e-12, atol=1e-12)

    def test_harmonic_pair(self):
        spec = free_pair()
        t = np.linspace(0, 6, 31)
        tr = simulate(spec, ones, zero_kernel, np.array([0.0, 1.0, 0.0, 0.0]), t, rtol=1e-8, atol=1e-10)
        u = tr.states[:, 1] - tr.states[:, 0]
        np.testing.assert_allclose(u, np.cos(t), rtol=0, atol=1e-4)

    def test_cs_aligns(self):
        spec = builtin_system("CS")
        x0 = spec.sample_initial_state(np.random.default_rng(0))
        tr = simulate(spec, spec.phi_E, spec.phi_A, x0, [0.0, 10.0])
        V = tr.states[:, spec.dim :].reshape(2, spec.N, 2)
        spread = [np.max(np.linalg.norm(Vt[:, None] - Vt[None], axis=-1)) for Vt in V]
        assert spread[1] < spread[0]

    def test_tolerance_halving(self):
        spec = builtin_system("CS")
        x0 = spec.sample_initial_state(np.random.default_rng(1))
        t = np.linspace(0, 10, 11)
        a = simulate(spec, spec.phi_E, spec.phi_A, x0, t).states
        b = simulate(spec, spec.phi_E, spec.phi_A, x0, t, rtol=5e-6, atol=5e-7).states
        rel = np.linalg.norm(a - b) / np.linalg.norm(a)
        assert rel <= 10 * 1e-5

    def test_bad_times(self):
        spec = builtin_system("CS")
        with pytest.raises(ValueError):
            simulate(spec, spec.phi_E, spec.phi_A, np.zeros(40), [0.0, 2.0, 1.0])


class TestGenerate:
    def test_noiseless_matches_rhs(self):
        spec = builtin_system("CS")
        ds = generate_dataset(spec, 2, 4, 0.0, seed=1)
        for m in range(2):
            for l in range(4):
                z = rhs(spec, spec.phi_E, spec.phi_A, ds.Y[m, l])
                assert np.max(np.abs(ds.Z[m, l] - z)) <= 1e-6

    def test_first_order_acceleration_is_time_derivative(self):
        spec = builtin_system("OD")
        ds = generate_dataset(spec, 1, 3, 0.0, seed=2)
        h = 1e-4
        for l in range(3):
            x = ds.Y[0, l, :5]
            v = rhs(spec, spec.phi_E, zero_kernel, x)
            np.testing.assert_allclose(ds.Y[0, l, 5:], v, atol=1e-12)
            fwd = rhs(spec, spec.phi_E, zero_kernel, x + h * v)
            back = rhs(spec, spec.phi_E, zero_kernel, x - h * v)
            np.testing.assert_allclose(ds.Z[0, l], (fwd - back) / (2 * h), atol=1e-5)

    def test_deterministic(self):
        spec = builtin_system("FM")
        a = generate_dataset(spec, 2, 3, 0.1, seed=9)
        b = generate_dataset(spec, 2, 3, 0.1, seed=9)
        assert np.array_equal(a.Y, b.Y) and np.array_equal(a.Z, b.Z)

    def test_noise_level(self):
        spec = builtin_system("CS")
        clean = generate_dataset(spec, 40, 10, 0.0, seed=3)
        noisy = generate_dataset(spec, 40, 10, 0.1, seed=3)
        assert np.array_equal(clean.Y, noisy.Y)
        std = np.std(noisy.Z - clean.Z)
        assert abs(std - 0.1) <= 0.005
        assert noisy.noise_sigma == 0.1

    def test_json_round_trip(self, tmp_path):
        ds = generate_dataset(builtin_system("AD"), 1, 2, 0.05, seed=4)
        p = tmp_path / "ds.json"
        save_dataset(ds, p)
        back = load_dataset(p)
        assert np.array_equal(back.Y, ds.Y) and np.array_equal(back.Z, ds.Z)
        obj = json.loads(p.read_text())
        assert set(obj) == {"d", "N", "M", "L", "times", "noise_sigma", "Y", "Z"}
        assert len(obj["Y"]) == 1 and len(obj["Y"][0]) == 2 and len(obj["Y"][0][0]) == 40

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            TrajectoryDataset(1, 1, 1, 1, [0.0], [np.nan, 0.0], [0.0])


class TestPreprocess:
    def test_constant(self):
        pos = np.ones((12, 3, 2))
        ds = preprocess_frames(pos, window=4, dt=0.1)
        assert np.all(ds.V == 0) and np.all(ds.A == 0)

    def test_linear(self):
        t = 0.1 * np.arange(20)
        pos = np.repeat(t[:, None, None], 2, axis=1)
        ds = preprocess_frames(pos, window=3, dt=0.1)
        np.testing.assert_allclose(ds.V, 1.0, atol=1e-12)
        np.testing.assert_allclose(ds.A, 0.0, atol=1e-12)

    def test_quadratic(self):
        t = 0.1 * np.arange(15)
        pos = (t**2)[:, None, None]
        ds = preprocess_frames(pos, window=1, dt=0.1)
        np.testing.assert_allclose(ds.A, 2.0, rtol=1e-10)

    def test_frame_count(self):
        ds = preprocess_frames(np.zeros((30, 2, 2)), window=10, dt=1.0)
        assert ds.L == 30 - 10 - 1 and ds.M == 1 and ds.noise_sigma == 0.0

    def test_too_few_frames(self):
        with pytest.raises(ValueError):
            preprocess_frames(np.zeros((6, 2, 2)), window=5, dt=1.0)


def test_force_partials_match_differences():
    rng = np.random.default_rng(8)
    X = rng.standard_normal((4, 3, 2))
    V = rng.standard_normal((4, 3, 2))
    for fam, alpha in ((ForceFamily("rayleigh"), (0.7, 1.6)), (ForceFamily("drag"), (1.5, 0.5)),
                       (ForceFamily("stubborn", stubborn=(0, 2)), (0.3, 4.0))):
        J = fam.dforce(X, V, alpha)
        for k in range(len(alpha)):
            e = np.zeros(len(alpha))
            e[k] = 1e-6
            num = (fam.force(X, V, np.add(alpha, e)) - fam.force(X, V, np.subtract(alpha, e))) / 2e-6
            np.testing.assert_allclose(J[k], num, rtol=1e-6, atol=1e-9)
