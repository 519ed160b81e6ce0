"""Maximum-entropy reconstruction of a size density from its first moments.

The density has the exponential-family form ``n(L) = exp(-1 - sum_k lam_k L^k)``
and the coefficients minimize the convex dual

    D(lam) = int exp(-1 - sum_k lam_k L^k) dL + sum_k lam_k mu_k

by damped Newton iteration.  The problem is solved in nondimensional size
``x = L / L_scale`` with moments normalized by ``mu_0`` and mapped back exactly.

Two quadrature modes are supported: composite Gauss-Legendre on a (possibly
adaptively grown) support interval, and the cell-averaged basis of a
finite-volume size grid, whose discrete moments then match the targets to
solver precision (used to seed the population-balance simulator).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.integrate import trapezoid

from lactocryst.exceptions import MaxIterExceeded, NotRealizable

logger = logging.getLogger(__name__)

GAUSS_ORDER = 10  # nodes per panel
END_PANELS = 40  # graded panels into the end of the support


@dataclass(frozen=True)
class MaxEntProblem:
    """Target moments ``mu_0..mu_N`` and how to integrate.

    ``support`` fixes ``[0, L_sup]``; ``None`` grows it adaptively.
    ``grid`` (a :class:`lactocryst.pbe.SizeGrid`) switches to the finite-volume
    cell basis and overrides ``support``.
    """

    moments: tuple
    support: tuple | None = None
    n_nodes: int = 200
    grid: object = None
    L_scale: float | None = None
    tail_tol: float = 1e-10
    max_support_doublings: int = 10

    def __post_init__(self):
        mu = np.asarray(self.moments, dtype=float)
        if mu.ndim != 1 or mu.size < 1:
            raise ValueError("moments must be a 1-D sequence")
        if not mu[0] > 0:
            raise NotRealizable("mu_0 must be positive")
        if np.any(mu < 0):
            raise NotRealizable("moments of a density on [0, inf) are non-negative")
        if mu.size == 1 and self.support is None and self.grid is None:
            raise ValueError("a mass-only problem needs an explicit finite support")


@dataclass
class MaxEntSolution:
    scaled_lambdas: np.ndarray
    L_scale: float
    mu0: float
    support: tuple
    residuals: np.ndarray  # achieved minus target, in moment units
    dual_value: float
    iterations: int
    converged: bool
    tail_mass: float
    residual_history: list = field(default_factory=list)
    decrement_history: list = field(default_factory=list)

    @property
    def lambdas(self):
        """Coefficients of ``n(L) = exp(-1 - sum lam_k L^k)`` in SI size units."""
        k = np.arange(self.scaled_lambdas.size)
        lam = self.scaled_lambdas / self.L_scale**k
        lam[0] = self.scaled_lambdas[0] - np.log(self.mu0 / self.L_scale)
        return lam

    def density(self, L):
        """Reconstructed density at sizes ``L`` (zero outside the support)."""
        L = np.asarray(L, dtype=float)
        x = L / self.L_scale
        inside = (L >= self.support[0]) & (L <= self.support[1])
        with np.errstate(over="ignore"):
            n = (self.mu0 / self.L_scale) * np.exp(-1.0 - _poly(self.scaled_lambdas, x))
        return np.where(inside, n, 0.0)

    def relative_residuals(self, targets):
        return self.residuals / np.abs(np.asarray(targets, dtype=float))


def _poly(lam, x):
    out = np.zeros_like(x, dtype=float)
    for c in lam[::-1]:
        out = out * x + c
    return out


def hankel_matrices(mu):
    """Hankel matrices whose positive semi-definiteness characterizes
    moment sequences of densities on ``[0, inf)``."""
    mu = np.asarray(mu, dtype=float)
    n = mu.size - 1
    m0 = n // 2
    H0 = np.array([[mu[i + j] for j in range(m0 + 1)] for i in range(m0 + 1)])
    m1 = (n - 1) // 2
    H1 = (np.array([[mu[i + j + 1] for j in range(m1 + 1)] for i in range(m1 + 1)])
          if n >= 1 else np.zeros((0, 0)))
    return H0, H1


def realizability_margin(mu, L_scale=None):
    """Smallest eigenvalue of the normalized Hankel matrices (>0: strictly realizable)."""
    mu = np.asarray(mu, dtype=float)
    if L_scale is None:
        L_scale = mu[1] / mu[0] if mu.size > 1 else 1.0
    scaled, _ = scale_moments(mu, L_scale)
    out = np.inf
    for H in hankel_matrices(scaled):
        if H.size:
            d = np.sqrt(np.diag(H))
            out = min(out, float(np.linalg.eigvalsh(H / np.outer(d, d)).min()))
    return out


def cauchy_schwarz_ok(mu, rtol=0.0):
    """Log-convexity mu_k mu_{k+2} >= mu_{k+1}^2 for all k."""
    mu = np.asarray(mu, dtype=float)
    return bool(np.all(mu[:-2] * mu[2:] >= (1 - rtol) * mu[1:-1] ** 2))


def scale_moments(mu, L_scale):
    """Nondimensionalize: ``mu_k -> mu_k / (mu_0 L_scale^k)``.

    Returns the scaled moments and a function mapping scaled coefficients back
    to SI coefficients of ``exp(-1 - sum lam_k L^k)``.
    """
    if L_scale <= 0:
        raise ValueError("L_scale must be positive")
    mu = np.asarray(mu, dtype=float)
    k = np.arange(mu.size)
    scaled = mu / (mu[0] * L_scale**k)

    def unscale(scaled_lambdas):
        lam = np.asarray(scaled_lambdas, dtype=float) / L_scale**k
        lam[0] = scaled_lambdas[0] - np.log(mu[0] / L_scale)
        return lam

    return scaled, unscale


def composite_gauss(a, b, n_nodes, order=GAUSS_ORDER, end_panels=0):
    """Nodes and weights of composite Gauss-Legendre with ``n_nodes`` total.

    ``end_panels`` extra panels shrink geometrically into ``b`` so that a
    density piled up against the end of the support is still integrated.
    """
    panels = max(1, n_nodes // order)
    xg, wg = leggauss(order)
    edges = np.linspace(a, b, panels + 1)
    if end_panels:
        h = edges[-1] - edges[-2]
        edges = np.concatenate([edges[:-1], b - h * np.geomspace(1.0, 1e-14, end_panels)[1:],
                                [b]])
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    x = (mid[:, None] + half[:, None] * xg[None, :]).ravel()
    w = (half[:, None] * wg[None, :]).ravel()
    return x, w


class _Discretization:
    """Feature matrix ``A`` (nodes x orders) and weights for the scaled problem."""

    def __init__(self, A, w, x):
        self.A = A
        self.w = w
        self.x = x


def _gauss_disc(X, n_nodes, order):
    x, w = composite_gauss(0.0, X, n_nodes, end_panels=END_PANELS)
    return _Discretization(x[:, None] ** np.arange(order + 1)[None, :], w, x)


def _grid_disc(grid, L_scale, order, n_cells=None):
    edges = grid.edges[: None if n_cells is None else n_cells + 1]
    lo, hi = edges[:-1] / L_scale, edges[1:] / L_scale
    k = np.arange(order + 1)
    dx = hi - lo
    A = (hi[:, None] ** (k + 1) - lo[:, None] ** (k + 1)) / ((k + 1) * dx[:, None])
    return _Discretization(A, dx, 0.5 * (lo + hi))


def _dual(lam, disc, m):
    with np.errstate(over="ignore"):
        n = np.exp(-1.0 - disc.A @ lam)
    return float(np.sum(disc.w * n) + lam @ m), n


def _newton(disc, m, lam, tol, max_iter, hist_r, hist_d):
    """Damped Newton on the scaled dual.  Returns (lam, D, residual, iterations, ok)."""
    D, n = _dual(lam, disc, m)
    it = 0
    while True:
        achieved = disc.A.T @ (disc.w * n)
        g = m - achieved
        rel = np.abs(g) / m
        rnorm = float(np.max(rel))
        hist_r.append(rnorm)
        if rnorm <= tol:
            return lam, D, -g, it, True
        if it >= max_iter:
            return lam, D, -g, it, False
        H = (disc.A * (disc.w * n)[:, None]).T @ disc.A
        d_scale = np.sqrt(np.diag(H))
        if np.any(d_scale <= 0) or not np.all(np.isfinite(H)):
            raise NotRealizable("degenerate Hessian in maximum-entropy dual")
        Hs = H / np.outer(d_scale, d_scale)
        try:
            Lc = np.linalg.cholesky(Hs)
            step = -np.linalg.solve(Lc.T, np.linalg.solve(Lc, g / d_scale)) / d_scale
        except np.linalg.LinAlgError:
            # numerically singular: pseudo-inverse keeps a descent direction
            ev, V = np.linalg.eigh(Hs)
            keep = ev > 1e-14 * ev.max()
            if not np.any(keep):
                raise NotRealizable("degenerate dual Hessian") from None
            step = -(V[:, keep] @ ((V[:, keep].T @ (g / d_scale)) / ev[keep])) / d_scale
        decrement = float(-g @ step)
        assert decrement >= -1e-12 * max(1.0, abs(D)), "convex dual: Newton decrement must be >= 0"
        hist_d.append(decrement)
        slope = float(g @ step)
        # below roundoff of D the Armijo test is meaningless; fall back to residual decrease
        roundoff = abs(slope) < 1e-13 * max(1.0, abs(D))
        t = 1.0
        while True:
            trial = lam + t * step
            D_new, n_new = _dual(trial, disc, m)
            if np.isfinite(D_new) and (roundoff or D_new <= D + 1e-4 * t * slope):
                r_new = float(np.max(np.abs(m - disc.A.T @ (disc.w * n_new)) / m))
                if r_new < rnorm:
                    break
            t *= 0.5
            if t < (1e-3 if roundoff else 1e-12):
                # converged to working precision
                return lam, D, -g, it, rnorm <= 1e3 * tol
        lam, D, n = trial, D_new, n_new
        it += 1


def initial_guess(m, width):
    """Starting coefficients for scaled moments ``m`` (``m[0] == 1``).

    Uniform for a mass-only problem, exponential when the mean is known and a
    moment-matched Gaussian when the variance is known too.
    """
    N = m.size - 1
    lam = np.zeros(N + 1)
    if N == 0:
        lam[0] = np.log(width) - 1.0
    elif N == 1:
        lam[1] = 1.0 / m[1]
        lam[0] = -1.0 - np.log(lam[1])
    else:
        var = m[2] - m[1] ** 2
        a = m[1]
        lam[2] = 0.5 / var
        lam[1] = -a / var
        lam[0] = -1.0 + 0.5 * a * a / var + np.log(np.sqrt(2.0 * np.pi * var))
    return lam


def _tail_mass(lam, X):
    # Nodes crowd geometrically towards X: a negative top coefficient puts a
    # thin spike right at the end of the support that uniform nodes step over.
    x = X - 0.5 * X * np.geomspace(1.0, 1e-14, 600)
    with np.errstate(over="ignore"):
        return float(trapezoid(np.exp(-1.0 - _poly(lam, x)), x))


def reconstruct(problem: MaxEntProblem, tol=1e-10, max_iter=200, lam0=None) -> MaxEntSolution:
    """Solve the maximum-entropy moment problem.

    Raises :class:`NotRealizable` for moments outside (or on the boundary of)
    the moment cone and :class:`MaxIterExceeded` (carrying the best iterate)
    when Newton does not reach ``tol`` relative moment accuracy.
    """
    mu = np.asarray(problem.moments, dtype=float)
    N = mu.size - 1
    if N >= 2 and not cauchy_schwarz_ok(mu):
        raise NotRealizable("moments violate mu_k mu_(k+2) >= mu_(k+1)^2")
    if problem.L_scale is not None:
        L_scale = problem.L_scale
    elif N >= 1:
        L_scale = mu[1] / mu[0]
    elif problem.grid is not None:
        L_scale = float(problem.grid.edges[-1])
    else:
        L_scale = float(problem.support[1])
    if N >= 1 and realizability_margin(mu, L_scale) <= 0:
        raise NotRealizable("Hankel matrices of the moments are not positive definite")
    m, _ = scale_moments(mu, L_scale)
    hist_r, hist_d = [], []

    def initial(width):
        if lam0 is not None:
            return np.array(lam0, dtype=float)
        return initial_guess(m, width)

    if problem.grid is not None:
        lam, D, res, it, ok, tail, K = _solve_grid(problem, L_scale, N, m, initial, tol,
                                                   max_iter, hist_r, hist_d)
        support = (float(problem.grid.edges[0]), float(problem.grid.edges[K]))
    else:
        fixed = problem.support is not None
        if fixed:
            X = problem.support[1] / L_scale
        else:
            X = 4.0 * m[N] ** (1.0 / N) if N >= 1 else 1.0
        lam = initial(X)
        best = None
        for attempt in range(problem.max_support_doublings + 1):
            lam, D, res, it, ok, nodes = _solve_gauss(X, problem.n_nodes, N, m, lam, tol,
                                                      max_iter, hist_r, hist_d)
            tail = _tail_mass(lam, X)
            if best is None or (not ok, tail) < (not best[5], best[-1]):
                best = (X, lam, D, res, it, ok, tail)
            if fixed or tail < problem.tail_tol:
                break
            if attempt and tail > best[-1]:
                logger.warning("maximum-entropy tail grows with the support; keeping "
                               "L_sup = %g", best[0] * L_scale)
                break
            X *= 2.0
        X, lam, D, res, it, ok, tail = best
        support = (0.0, float(X * L_scale))
    sol = MaxEntSolution(lam, float(L_scale), float(mu[0]), support,
                         res * mu[0] * L_scale ** np.arange(N + 1), D, len(hist_d), ok,
                         tail, hist_r, hist_d)
    if not ok:
        raise MaxIterExceeded(f"maximum entropy did not converge in {max_iter} iterations "
                              f"(max relative residual {hist_r[-1]:.3g})", sol)
    return sol


def _solve_grid(problem, L_scale, N, m, initial, tol, max_iter, hist_r, hist_d):
    """Grid-basis solve on the leading ``K`` cells, growing ``K`` like the Gauss support.

    A negative top coefficient makes the density climb again at the far end of
    a long grid, so the active cells stop once the upper half of them carries
    less than ``tail_tol`` of the mass (or the whole grid is in use).
    """
    edges = problem.grid.edges / L_scale
    n_cells = edges.size - 1
    X = 4.0 * m[N] ** (1.0 / N) if N >= 1 else float(edges[-1])
    lam = None
    while True:
        K = min(n_cells, max(int(np.searchsorted(edges, X)), 2))
        disc = _grid_disc(problem.grid, L_scale, N, K)
        if lam is None or not np.isfinite(_dual(lam, disc, m)[0]):
            lam = initial(float(edges[K]))
        lam, D, res, it, ok = _newton(disc, m, lam, tol, max_iter, hist_r, hist_d)
        upper = disc.x > 0.5 * edges[K]
        with np.errstate(over="ignore"):
            n = np.exp(-1.0 - disc.A @ lam)
        tail = float(np.sum((disc.w * n)[upper]))
        if K == n_cells or (ok and tail < problem.tail_tol):
            return lam, D, res, it, ok, tail, K
        X = 2.0 * edges[K]


def _solve_gauss(X, n_nodes, N, m, lam, tol, max_iter, hist_r, hist_d):
    """Newton solve with node doubling until the dual value is stable to 1e-12."""
    prev = None
    nodes = n_nodes
    while True:
        disc = _gauss_disc(X, nodes, N)
        if not np.isfinite(_dual(lam, disc, m)[0]):
            lam = initial_guess(m, X)
        lam, D, res, it, ok = _newton(disc, m, lam, tol, max_iter, hist_r, hist_d)
        if prev is not None and abs(D - prev) < 1e-12:
            return lam, D, res, it, ok, nodes
        if nodes >= 25600:
            return lam, D, res, it, ok, nodes
        prev = D
        nodes *= 2


def dual_hessian(sol: MaxEntSolution, scaled=True, n_nodes=4000):
    """Dual Hessian at the solution, in scaled (``x``) or SI (``L``) coordinates."""
    N = sol.scaled_lambdas.size - 1
    L, w = composite_gauss(sol.support[0], sol.support[1], n_nodes, end_panels=END_PANELS)
    n = sol.density(L)
    basis = (L / sol.L_scale if scaled else L)[:, None] ** np.arange(N + 1)[None, :]
    H = (basis * (w * n)[:, None]).T @ basis
    if scaled:
        H = H / (sol.mu0 / sol.L_scale) / sol.L_scale
    return H


def entropy(n, w):
    """``-int n log n`` by quadrature weights ``w``."""
    n = np.asarray(n, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        integrand = np.where(n > 0, n * np.log(n), 0.0)
    return float(-np.sum(w * integrand))
