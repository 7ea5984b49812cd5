import numpy as np
import pytest

from ppunlearn.errors import (InfeasibleProblemError, NumericalOverflowError,
                              ShapeError, UsageError)
from ppunlearn.probmatrix import ProbMatrix, class_mass, pseudo_generate, PseudoScheme
from ppunlearn.refine import (DualState, RefineConfig, RefineProblem,
                              dual_step, objective, primal_update, refine)

from oracles import pgd_refine


def random_instance(rng, n_max=6, k_max=3, lam_choices=(0.5, 1.0, 2.0)):
    n = int(rng.integers(2, n_max + 1))
    k = int(rng.integers(2, k_max + 1))
    lam = float(rng.choice(lam_choices))
    targets = ProbMatrix(rng.dirichlet(np.ones(k), size=n))
    mass = rng.dirichlet(np.ones(k), size=n).sum(axis=0)
    n_f = int(rng.integers(1, n))
    perm = rng.permutation(n)
    return RefineProblem(targets, perm[:n_f], perm[n_f:], lam, mass)


class TestObjective:
    def test_zero_at_targets(self, rng):
        p = random_instance(rng)
        assert objective(p.targets, p) == 0.0

    def test_lambda_weighting(self):
        # one forget row at KL 0.1-ish and one retain row, weighted by lam
        t = ProbMatrix([[0.5, 0.5], [0.5, 0.5]])
        q = ProbMatrix([[0.3, 0.7], [0.3, 0.7]])
        p1 = RefineProblem(t, [0], [1], 1.0, np.array([1.0, 1.0]))
        p2 = RefineProblem(t, [0], [1], 2.0, np.array([1.0, 1.0]))
        per_row = objective(q, p1) / 2.0
        assert objective(q, p2) == pytest.approx(per_row * (1.0 + 2.0))

    def test_single_forget_row_value(self):
        t = ProbMatrix([[0.5, 0.5]])
        q = ProbMatrix([[0.3, 0.7]])
        p = RefineProblem(t, [0], [], 1.0, np.array([1.0, 1.0]))
        assert objective(q, p) == pytest.approx(0.08228287850505178, abs=1e-12)

    def test_shape_mismatch(self, rng):
        p = random_instance(rng)
        q = ProbMatrix(rng.dirichlet(np.ones(p.targets.n_classes + 1),
                                     size=p.n_rows))
        with pytest.raises(ShapeError):
            objective(q, p)


class TestPrimalUpdate:
    def test_zero_dual_returns_targets_bitwise(self, rng):
        p = random_instance(rng)
        dual = DualState(alpha=np.zeros(p.targets.n_classes), eta=0.1)
        q = primal_update(p, dual)
        assert q is p.targets

    def test_hand_computed_row(self):
        t = ProbMatrix([[0.5, 0.5]])
        p = RefineProblem(t, [0], [], 1.0, np.array([0.5, 0.5]))
        dual = DualState(alpha=np.array([np.log(3.0), 0.0]), eta=0.1)
        q = primal_update(p, dual)
        assert q.values[0] == pytest.approx([0.25, 0.75], abs=1e-12)

    def test_shift_invariance(self, rng):
        p = random_instance(rng)
        k = p.targets.n_classes
        alpha = rng.normal(size=k)
        qa = primal_update(p, DualState(alpha=alpha, eta=0.1))
        qb = primal_update(p, DualState(alpha=alpha + 3.7, eta=0.1))
        assert qa.values == pytest.approx(qb.values, abs=1e-12)

    def test_rows_stochastic_always(self, rng):
        for _ in range(50):
            p = random_instance(rng)
            alpha = rng.normal(scale=10.0, size=p.targets.n_classes)
            q = primal_update(p, DualState(alpha=alpha, eta=0.1))
            assert np.abs(q.values.sum(axis=1) - 1.0).max() <= 1e-9
            assert q.values.min() >= 0.0
            assert q.values.max() <= 1.0

    def test_non_finite_dual_rejected(self, rng):
        p = random_instance(rng)
        alpha = np.full(p.targets.n_classes, np.nan)
        with pytest.raises(NumericalOverflowError):
            primal_update(p, DualState(alpha=alpha, eta=0.1))


class TestDualStep:
    def test_zero_residual_leaves_alpha(self):
        q = ProbMatrix([[0.6, 0.4], [0.4, 0.6]])
        dual = DualState(alpha=np.array([0.3, -0.3]), eta=0.5)
        out = dual_step(dual, q, class_mass(q))
        assert out.alpha == pytest.approx(dual.alpha)
        assert out.residuals[-1] == 0.0

    def test_hand_computed_step(self):
        q = ProbMatrix([[0.7, 0.3], [0.5, 0.5]])  # column sums 1.2, 0.8
        dual = DualState(alpha=np.zeros(2), eta=0.5)
        out = dual_step(dual, q, np.array([1.0, 1.0]))
        assert out.alpha == pytest.approx([0.1, -0.1], abs=1e-12)
        assert out.iterations == 1

    def test_alpha_sum_conserved_for_feasible_mass(self, rng):
        q = ProbMatrix(rng.dirichlet(np.ones(3), size=5))
        mass = rng.dirichlet(np.ones(3), size=5).sum(axis=0)
        dual = DualState(alpha=rng.normal(size=3), eta=0.2)
        out = dual_step(dual, q, mass)
        assert out.alpha.sum() == pytest.approx(dual.alpha.sum(), abs=1e-9)


class TestRefine:
    def test_feasible_start_fixed_point(self, rng):
        targets = ProbMatrix(rng.dirichlet(np.ones(3), size=4))
        p = RefineProblem(targets, [0, 1], [2, 3], 1.0, class_mass(targets))
        res = refine(p)
        assert res.converged
        assert res.iterations == 1
        assert res.objective == 0.0
        assert np.array_equal(res.matrix.values, targets.values)

    def test_known_two_by_two_instance(self):
        targets = ProbMatrix([[0.9, 0.1], [0.2, 0.8]])
        p = RefineProblem(targets, [0], [1], 1.0, np.array([1.0, 1.0]))
        res = refine(p, RefineConfig(tol=1e-10, max_iters=100_000))
        assert res.converged
        expected = np.array([[6.0 / 7.0, 1.0 / 7.0], [1.0 / 7.0, 6.0 / 7.0]])
        assert res.matrix.values == pytest.approx(expected, abs=1e-8)
        # independent 1-d root solve over the multiplier ratio t:
        # col-0 balance f(t) = sum_i t p_i0 / (t p_i0 + p_i1) - 1 = 0
        lo, hi = 1e-6, 1e6
        for _ in range(200):
            mid = np.sqrt(lo * hi)
            val = sum(mid * r[0] / (mid * r[0] + r[1])
                      for r in targets.values) - 1.0
            if val > 0:
                hi = mid
            else:
                lo = mid
        t = np.sqrt(lo * hi)
        root_q = np.array([[t * r[0] / (t * r[0] + r[1]),
                            r[1] / (t * r[0] + r[1])] for r in targets.values])
        assert res.matrix.values == pytest.approx(root_q, abs=1e-8)
        # brute-force grid over the free coordinate at step 1e-3: with
        # mass [1, 1] the second row is determined by the first
        grid = np.arange(1e-3, 1.0, 1e-3)
        best = None
        for x in grid:
            q = ProbMatrix(np.array([[x, 1 - x], [1 - x, x]]))
            val = objective(q, p)
            if best is None or val < best[0]:
                best = (val, x)
        assert abs(best[1] - 6.0 / 7.0) <= 2e-3
        assert res.objective <= best[0] + 1e-6

    def test_oracle_equivalence_on_random_instances(self, rng):
        for _ in range(30):
            p = random_instance(rng)
            res = refine(p, RefineConfig(tol=1e-9, max_iters=200_000))
            assert res.converged
            q_or, f_or = pgd_refine(p.targets.values, p.row_weights(), p.mass,
                                    tol=1e-10)
            assert abs(res.objective - f_or) <= 1e-4
            assert np.abs(res.matrix.values - q_or).max() <= 1e-3

    def test_uniqueness_from_two_warm_starts(self, rng):
        for _ in range(10):
            p = random_instance(rng)
            uniform = pseudo_generate(p.n_rows, p.targets.n_classes,
                                      PseudoScheme("uniform"))
            a = refine(p, RefineConfig(tol=1e-10, max_iters=200_000))
            b = refine(p, RefineConfig(tol=1e-10, max_iters=200_000,
                                       warm_start=uniform))
            assert a.converged and b.converged
            assert np.abs(a.matrix.values - b.matrix.values).max() <= 1e-6

    def test_infeasible_mass_rejected(self, rng):
        targets = ProbMatrix(rng.dirichlet(np.ones(3), size=4))
        p = RefineProblem(targets, [0, 1], [2, 3], 1.0,
                          np.array([1.0, 1.0, 1.0]))  # sums to 3, not 4
        with pytest.raises(InfeasibleProblemError):
            refine(p)

    def test_non_convergence_flag(self, rng):
        p = random_instance(rng)
        res = refine(p, RefineConfig(tol=1e-14, max_iters=3))
        assert not res.converged
        assert res.iterations == 3
        assert len(res.dual.residuals) >= 1

    def test_residual_non_increasing_after_transient(self, rng):
        for _ in range(10):
            p = random_instance(rng)
            res = refine(p, RefineConfig(eta=0.5 / p.n_rows, max_iters=50_000,
                                         tol=1e-8))
            hist = np.asarray(res.dual.residuals)
            start = max(1, len(hist) // 10)
            tail = hist[start:]
            assert (np.diff(tail) <= 1e-12).all()

    def test_lambda_symmetry(self, rng):
        # swapping forget/retain roles while swapping the weights gives the
        # identical optimization problem
        targets = ProbMatrix(rng.dirichlet(np.ones(3), size=5))
        mass = rng.dirichlet(np.ones(3), size=5).sum(axis=0)
        rows_a = np.array([0, 1])
        rows_b = np.array([2, 3, 4])
        lam = 2.0
        p1 = RefineProblem(targets, rows_a, rows_b, lam, mass)
        # scaling all row weights by 1/lam rescales the objective but not
        # the minimizer: weights (1/lam, 1) == (1, lam)/lam
        p2 = RefineProblem(targets, rows_b, rows_a, 1.0 / lam, mass)
        r1 = refine(p1, RefineConfig(tol=1e-10, max_iters=200_000))
        r2 = refine(p2, RefineConfig(tol=1e-10, max_iters=200_000))
        assert np.abs(r1.matrix.values - r2.matrix.values).max() <= 1e-6

    def test_partition_validation(self, rng):
        targets = ProbMatrix(rng.dirichlet(np.ones(3), size=4))
        with pytest.raises(UsageError):
            RefineProblem(targets, [0, 1], [1, 2, 3], 1.0,
                          np.array([2.0, 1.0, 1.0]))
        with pytest.raises(UsageError):
            RefineProblem(targets, [0], [2, 3], 1.0, np.array([2.0, 1.0, 1.0]))
