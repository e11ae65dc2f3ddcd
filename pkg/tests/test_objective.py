import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neardgd.objective import (InvalidProblemError, LocalQuadratic, ProblemInstance, curvature_constants,
                               generate_quadratic, local_gradient, make_instance, optimal_solution,
                               spectrum_levels, stacked_gradient)


def central_difference(f, x, h=1e-6):
    g = np.zeros_like(x)
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


class TestGenerator:
    @pytest.mark.parametrize("kappa", [1.0, 10.0, 1e2, 1e4])
    @pytest.mark.parametrize("seed", [0, 1, 7])
    def test_kappa_is_realised(self, kappa, seed):
        inst = generate_quadratic(10, 10, kappa, seed)
        assert abs(inst.kappa - kappa) <= 0.05 * kappa
        assert inst.mus.min() == 1.0
        assert inst.ls.max() == kappa

    def test_fig_scale_instance(self):
        inst = generate_quadratic(10, 10, 1e4, 3)
        assert (inst.n, inst.p) == (10, 10)
        assert np.all((inst.diags >= 1.0) & (inst.diags <= 1e4))
        assert np.all((inst.bs >= 0.0) & (inst.bs < 1.0))

    def test_identity_hessian(self):
        inst = generate_quadratic(1, 2, 1.0, 5)
        np.testing.assert_array_equal(inst.locals[0].a, np.eye(2))
        np.testing.assert_array_equal(optimal_solution(inst), -inst.bs[0])

    def test_same_seed_same_bits(self):
        a, b = generate_quadratic(6, 5, 300.0, 42), generate_quadratic(6, 5, 300.0, 42)
        assert a.diags.tobytes() == b.diags.tobytes()
        assert a.bs.tobytes() == b.bs.tobytes()

    def test_seeds_differ(self):
        a, b = generate_quadratic(6, 5, 300.0, 1), generate_quadratic(6, 5, 300.0, 2)
        assert not np.array_equal(a.bs, b.bs)

    def test_frozen_draws(self):
        # first entries under PCG64(0); guards the documented draw order
        inst = generate_quadratic(2, 4, 1e4, 0)
        assert inst.diags.shape == (2, 4)
        assert set(np.unique(inst.diags)) <= {1.0, 10.0, 100.0, 1000.0, 1e4}

    @pytest.mark.parametrize("args", [(0, 2, 10.0), (2, 0, 10.0), (2, 2, 0.5), (2, 1, 10.0), (1.5, 2, 2.0)])
    def test_invalid(self, args):
        with pytest.raises(InvalidProblemError):
            generate_quadratic(*args, seed=0)

    def test_single_coordinate_allowed_when_kappa_is_one(self):
        inst = generate_quadratic(3, 1, 1.0, 0)
        assert inst.kappa == 1.0

    def test_spectrum_levels(self):
        np.testing.assert_allclose(spectrum_levels(1e4), [1.0, 10.0, 100.0])
        np.testing.assert_allclose(spectrum_levels(1e2), [1.0, 10.0])
        np.testing.assert_allclose(spectrum_levels(1.0), [1.0, 1.0])


class TestGradients:
    def test_gradient_at_local_minimiser(self, inst_k100):
        for i in range(inst_k100.n):
            assert np.abs(local_gradient(inst_k100, i, inst_k100.u_star[i])).max() < 1e-10

    def test_gradient_at_zero(self, inst_k100):
        for i in range(inst_k100.n):
            np.testing.assert_array_equal(local_gradient(inst_k100, i, np.zeros(10)), inst_k100.bs[i])

    def test_finite_difference(self, inst_k100):
        rng = np.random.default_rng(0)
        for i in range(inst_k100.n):
            x = rng.standard_normal(10)
            fd = central_difference(inst_k100.locals[i].value, x)
            g = local_gradient(inst_k100, i, x)
            assert np.linalg.norm(fd - g) <= 1e-4 * np.linalg.norm(g)

    def test_index_out_of_range(self, inst_k100):
        with pytest.raises(IndexError):
            local_gradient(inst_k100, 10, np.zeros(10))

    def test_stacked_matches_rows(self, inst_k100):
        x = np.random.default_rng(1).standard_normal((10, 10))
        g = stacked_gradient(inst_k100, x)
        for i in range(10):
            np.testing.assert_array_equal(g[i], local_gradient(inst_k100, i, x[i]))

    def test_stacked_at_local_minimisers(self, inst_k100):
        assert np.abs(stacked_gradient(inst_k100, inst_k100.u_star)).max() < 1e-10

    def test_stacked_at_identical_rows(self, inst_k100):
        x = np.linspace(-1, 1, 10)
        g = stacked_gradient(inst_k100, np.tile(x, (10, 1)))
        expected = [inst_k100.diags[i] * x + inst_k100.bs[i] for i in range(10)]
        np.testing.assert_allclose(g, expected, rtol=1e-15)
        np.testing.assert_allclose(g.mean(axis=0), np.mean(expected, axis=0), rtol=1e-14)

    def test_mean_gradient_vanishes_at_optimum(self, inst_k100):
        g = stacked_gradient(inst_k100, np.tile(optimal_solution(inst_k100), (10, 1)))
        assert np.abs(g.mean(axis=0)).max() < 1e-10
        assert np.abs(g).max() > 1e-3

    def test_shape_mismatch(self, inst_k100):
        with pytest.raises(ValueError):
            stacked_gradient(inst_k100, np.zeros((10, 9)))

    def test_linearity(self, inst_k100):
        x = np.random.default_rng(2).standard_normal(10)
        f = inst_k100.locals[0]
        np.testing.assert_allclose(f.gradient(3.0 * x), 3.0 * (f.a @ x) + f.b, rtol=1e-14)


class TestOptimum:
    def test_single_agent(self):
        inst = make_instance([[2.0, 4.0]], [[1.0, -2.0]])
        np.testing.assert_allclose(optimal_solution(inst), [-0.5, 0.5])

    def test_identical_identity_agents(self):
        b = [0.3, -0.7, 1.1]
        inst = make_instance([[1.0] * 3] * 4, [b] * 4)
        np.testing.assert_allclose(optimal_solution(inst), -np.array(b), rtol=1e-15)

    @pytest.mark.parametrize("kappa", [1e2, 1e4])
    def test_residual_against_dense_solve(self, kappa):
        inst = generate_quadratic(10, 10, kappa, 9)
        x = optimal_solution(inst)
        h = sum(f.a for f in inst.locals)
        rhs = inst.bs.sum(axis=0)
        assert np.linalg.norm(h @ x + rhs) / np.linalg.norm(rhs) < 1e-10
        np.testing.assert_allclose(x, np.linalg.solve(h, -rhs), rtol=1e-12)


class TestCurvature:
    def test_homogeneous(self):
        inst = make_instance([[2.0, 8.0]] * 3, [[0.0, 0.0]] * 3)
        l_max, mu_bar, l_bar, gamma = curvature_constants(inst)
        assert (l_max, mu_bar, l_bar) == (8.0, 2.0, 8.0)
        assert gamma == pytest.approx(2.0 * 8.0 / 10.0)

    def test_identity(self):
        inst = make_instance([[1.0, 1.0]], [[0.0, 0.0]])
        l_max, _, _, gamma = curvature_constants(inst)
        assert l_max == 1.0 and gamma == 0.5

    def test_scan_oracle(self, inst_k1e4):
        best = np.inf
        for f in inst_k1e4.locals:
            eig = np.linalg.eigvalsh(f.a)
            best = min(best, eig[0] * eig[-1] / (eig[0] + eig[-1]))
        l_max, mu_bar, l_bar, gamma = curvature_constants(inst_k1e4)
        assert gamma == pytest.approx(best, rel=1e-14)
        assert mu_bar == np.mean([np.linalg.eigvalsh(f.a)[0] for f in inst_k1e4.locals])
        assert l_bar == np.mean([np.linalg.eigvalsh(f.a)[-1] for f in inst_k1e4.locals])


class TestValidation:
    def test_non_positive_diagonal(self):
        with pytest.raises(InvalidProblemError):
            LocalQuadratic(np.array([1.0, 0.0]), np.zeros(2))

    def test_b_shape(self):
        with pytest.raises(InvalidProblemError):
            LocalQuadratic(np.array([1.0, 2.0]), np.zeros(3))

    def test_mixed_dimensions(self):
        with pytest.raises(InvalidProblemError):
            ProblemInstance((LocalQuadratic(np.ones(2), np.zeros(2)), LocalQuadratic(np.ones(3), np.zeros(3))))

    def test_empty(self):
        with pytest.raises(InvalidProblemError):
            ProblemInstance(())


def test_save_load_round_trip(tmp_path, inst_k1e4):
    path = tmp_path / "inst.json"
    inst_k1e4.save(path)
    back = ProblemInstance.load(path)
    assert back.diags.tobytes() == inst_k1e4.diags.tobytes()
    assert back.bs.tobytes() == inst_k1e4.bs.tobytes()
    assert back.seed == 0 and back.requested_kappa == 1e4


def test_load_rejects_unknown_format():
    with pytest.raises(InvalidProblemError):
        ProblemInstance.from_dict({"format": "other"})


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 6), p=st.integers(2, 8), kappa=st.floats(1.0, 1e5), seed=st.integers(0, 10 ** 6),
       pair_seed=st.integers(0, 10 ** 6))
def test_property_instance_invariants(n, p, kappa, seed, pair_seed):
    inst = generate_quadratic(n, p, kappa, seed)
    assert abs(inst.kappa - kappa) <= 0.05 * kappa
    x_star = optimal_solution(inst)
    total_b = inst.bs.sum(axis=0)
    resid = (inst.diags * x_star + inst.bs).sum(axis=0)
    assert np.linalg.norm(resid) <= 1e-10 * max(np.linalg.norm(total_b), 1.0)
    assert np.abs(inst.diags * inst.u_star + inst.bs).max() <= 1e-10
    rng = np.random.default_rng(pair_seed)
    for i, f in enumerate(inst.locals):
        x, y = rng.standard_normal(p), rng.standard_normal(p)
        d = x - y
        inner = d @ (f.gradient(x) - f.gradient(y))
        sq = d @ d
        assert f.mu * sq <= inner * (1 + 1e-9) and inner <= f.l * sq * (1 + 1e-9)
