import numpy as np
import pytest

from nsqp.optim import minimize_lbfgs


def quadratic(A, b):
    def fun(x):
        r = A @ x - b
        return 0.5 * float(r @ r), A.T @ r
    return fun


class TestLbfgs:
    def test_quadratic_reaches_solution(self, rng):
        n = 20
        M = rng.standard_normal((n, n))
        A = M @ M.T + np.eye(n)
        b = rng.standard_normal(n)
        res = minimize_lbfgs(quadratic(A, b), np.zeros(n))
        assert res.converged
        x_star = np.linalg.solve(A, b)
        assert np.linalg.norm(res.x - x_star) < 1e-6

    def test_rosenbrock(self):
        def fun(x):
            a, b = 1.0, 100.0
            f = (a - x[0]) ** 2 + b * (x[1] - x[0] ** 2) ** 2
            g = np.array([
                -2 * (a - x[0]) - 4 * b * x[0] * (x[1] - x[0] ** 2),
                2 * b * (x[1] - x[0] ** 2),
            ])
            return float(f), g

        res = minimize_lbfgs(fun, np.array([-1.2, 1.0]))
        assert res.converged, res.status
        assert np.allclose(res.x, [1.0, 1.0], atol=1e-6)

    def test_monotone_decrease(self, rng):
        # non-convex objective; the accepted iterates must never go up
        def fun(x):
            f = float(np.sum(np.sin(x) ** 2) + 0.1 * np.sum(x ** 2))
            g = 2 * np.sin(x) * np.cos(x) + 0.2 * x
            return f, g

        seen = []
        res = minimize_lbfgs(fun, rng.standard_normal(30) * 3,
                             callback=lambda i, f, gn: seen.append(f))
        assert all(b <= a + 1e-15 for a, b in zip(seen, seen[1:]))
        assert res.value <= seen[0]

    def test_already_optimal(self):
        fun = quadratic(np.eye(3), np.zeros(3))
        res = minimize_lbfgs(fun, np.zeros(3))
        assert res.converged
        assert res.iterations == 0

    def test_iteration_cap(self, rng):
        def fun(x):
            f = float(np.sum(np.abs(x) ** 1.5))
            g = 1.5 * np.sign(x) * np.sqrt(np.abs(x))
            return f, g

        res = minimize_lbfgs(fun, np.full(5, 10.0), max_iter=3)
        assert res.iterations == 3
        assert res.status in ("max_iter", "grad_tol")
