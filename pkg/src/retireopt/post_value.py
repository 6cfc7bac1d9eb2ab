"""Post-retirement dual value, its derivatives, strategies and closed-form oracles.

The dual value is the discounted time integral of h along the dual state,

    V(t, y) = E[ int_t^Tbar e^{-int_t^s rho} h(Y(s)) ds | Y(t) = y ],

with Y lognormal.  For the closed-form utility variants h is a piecewise power
sum with one kink, so the inner expectation E[h(Y(s)) | Y(t)=y] and its first
two y-derivatives are exact truncated-lognormal moments (powers times normal
CDFs); only the outer s-integral is numerical (adaptive Simpson in sqrt(s-t)
for point queries, cumulative Simpson on a uniform grid for surfaces).
A 64-node Gauss-Hermite inner evaluator is kept for tabulated utilities and as
a cross-check, and a Monte-Carlo estimator provides a second route.

The primal value is recovered as V(t, x) = inf_y (V(t, y) + x y); the optimal
wealth, portfolio and total consumption follow from the y-derivatives.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.integrate import cumulative_simpson
from scipy.special import erfc

from .market import MarketEnvironment, Schedule, as_schedule, growth_condition_check
from .utility import (
    DualTerms,
    UtilitySpec,
    dual_h,
    dual_h_neg_derivative,
    dual_power_terms,
)


def _norm_cdf(x):
    return 0.5 * erfc(-x / np.sqrt(2.0))


def _norm_pdf(x):
    return np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


# ---------------------------------------------------------------------------
# Inner expectation kernels
# ---------------------------------------------------------------------------

class AnalyticKernel:
    """Exact lognormal moments of a piecewise-power dual.

    With log Y_s | Y_t=y ~ N(log y + M, V):
      E[Y^p]            = y^p exp(p M + p^2 V / 2)
      E[Y^p 1{Y < kbar}] = y^p exp(p M + p^2 V / 2) Phi(d_p),
      d_p = (log(kbar/y) - M - p V) / sqrt(V).
    """

    def __init__(self, terms: DualTerms):
        self.terms = terms

    def _moment_pieces(self, y, M, V):
        y = np.asarray(y, dtype=float)
        sqV = np.sqrt(V)
        log_ratio = np.log(self.terms.kink / y)
        return y, sqV, log_ratio

    def expectation(self, y, M: float, V: float, D: float = 0.0):
        """e^{-D} E[h(Y_s) | Y_t = y] (the discount is folded into the
        exponent so killed moments never overflow)."""
        if V <= 0.0:
            return np.exp(-D) * dual_h_from_terms(y, self.terms)
        y, sqV, log_ratio = self._moment_pieces(y, M, V)
        out = np.zeros_like(y)
        for c, p in self.terms.global_terms:
            out += c * y ** p * np.exp(p * M + 0.5 * p * p * V - D)
        for c, p in self.terms.below_terms:
            d = (log_ratio - M - p * V) / sqV
            out += c * y ** p * np.exp(p * M + 0.5 * p * p * V - D) * _norm_cdf(d)
        return out

    def d_expectation_dy(self, y, M: float, V: float, D: float = 0.0):
        if V <= 0.0:
            return -np.exp(-D) * dual_h_neg_derivative_from_terms(y, self.terms)
        y, sqV, log_ratio = self._moment_pieces(y, M, V)
        out = np.zeros_like(y)
        for c, p in self.terms.global_terms:
            out += c * p * y ** (p - 1.0) * np.exp(p * M + 0.5 * p * p * V - D)
        for c, p in self.terms.below_terms:
            d = (log_ratio - M - p * V) / sqV
            grow = np.exp(p * M + 0.5 * p * p * V - D)
            out += c * y ** (p - 1.0) * grow * (p * _norm_cdf(d) - _norm_pdf(d) / sqV)
        return out

    def d2_expectation_dy2(self, y, M: float, V: float, D: float = 0.0):
        if V <= 0.0:
            raise ValueError("second derivative needs V > 0 (kink delta at V=0)")
        y, sqV, log_ratio = self._moment_pieces(y, M, V)
        out = np.zeros_like(y)
        for c, p in self.terms.global_terms:
            out += c * p * (p - 1.0) * y ** (p - 2.0) * np.exp(
                p * M + 0.5 * p * p * V - D)
        for c, p in self.terms.below_terms:
            d = (log_ratio - M - p * V) / sqV
            grow = np.exp(p * M + 0.5 * p * p * V - D)
            phi = _norm_pdf(d)
            out += c * y ** (p - 2.0) * grow * (
                p * (p - 1.0) * _norm_cdf(d)
                - phi * ((2.0 * p - 1.0) / sqV + d / V))
        return out


def dual_h_from_terms(y, terms: DualTerms):
    y = np.asarray(y, dtype=float)
    out = np.zeros_like(y)
    for c, p in terms.global_terms:
        out += c * y ** p
    mask = y < terms.kink
    if np.any(mask):
        for c, p in terms.below_terms:
            out[mask] += c * y[mask] ** p
    return out


def dual_h_neg_derivative_from_terms(y, terms: DualTerms):
    y = np.asarray(y, dtype=float)
    out = np.zeros_like(y)
    for c, p in terms.global_terms:
        out -= c * p * y ** (p - 1.0)
    mask = y < terms.kink
    if np.any(mask):
        for c, p in terms.below_terms:
            out[mask] -= c * p * y[mask] ** (p - 1.0)
    return out


class GaussHermiteKernel:
    """64-node Gauss-Hermite fallback for the inner expectation (any spec)."""

    def __init__(self, spec: UtilitySpec, n_nodes: int = 64):
        self.spec = spec
        nodes, weights = hermgauss(n_nodes)
        self.nodes = nodes * np.sqrt(2.0)
        self.weights = weights / np.sqrt(np.pi)

    def expectation(self, y, M: float, V: float, D: float = 0.0):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if V <= 0.0:
            return np.exp(-D) * dual_h(y, self.spec)
        draws = y[:, None] * np.exp(M + np.sqrt(V) * self.nodes[None, :])
        hvals = dual_h(draws.ravel(), self.spec).reshape(draws.shape)
        return np.exp(-D) * (hvals @ self.weights)

    def d_expectation_dy(self, y, M: float, V: float, D: float = 0.0):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if V <= 0.0:
            return -np.exp(-D) * dual_h_neg_derivative(y, self.spec)
        factors = np.exp(M + np.sqrt(V) * self.nodes)
        draws = y[:, None] * factors[None, :]
        slopes = -dual_h_neg_derivative(draws.ravel(), self.spec).reshape(draws.shape)
        return np.exp(-D) * ((slopes * factors[None, :]) @ self.weights)


# ---------------------------------------------------------------------------
# Adaptive Simpson (vector-valued integrands)
# ---------------------------------------------------------------------------

def _adaptive_simpson(f, a: float, b: float, tol: float, max_depth: int = 24,
                      min_depth: int = 2):
    """Adaptive Simpson for array-valued f; error controlled in max norm."""
    fa, fm, fb = f(a), f(0.5 * (a + b)), f(b)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    stack = [(a, b, fa, fm, fb, whole, 0)]
    total = np.zeros_like(np.asarray(whole, dtype=float))
    while stack:
        a0, b0, fa0, fm0, fb0, s0, depth = stack.pop()
        m = 0.5 * (a0 + b0)
        lm, rm = 0.5 * (a0 + m), 0.5 * (m + b0)
        flm, frm = f(lm), f(rm)
        left = (m - a0) / 6.0 * (fa0 + 4.0 * flm + fm0)
        right = (b0 - m) / 6.0 * (fm0 + 4.0 * frm + fb0)
        err = np.max(np.abs(left + right - s0))
        done = err < 15.0 * tol * max((b0 - a0) / (b - a), 1e-12)
        if (done and depth >= min_depth) or depth >= max_depth:
            total = total + left + right + (left + right - s0) / 15.0
        else:
            stack.append((a0, m, fa0, flm, fm0, left, depth + 1))
            stack.append((m, b0, fm0, frm, fb0, right, depth + 1))
    return total


# ---------------------------------------------------------------------------
# Point evaluator
# ---------------------------------------------------------------------------

class PostValueEvaluator:
    """Quadrature evaluator for the post-retirement dual value and derivatives."""

    def __init__(self, env: MarketEnvironment, spec: UtilitySpec,
                 inner: str = "auto"):
        self.env = env
        self.spec = spec
        rep = growth_condition_check(env, beta=_growth_exponent(spec))
        if not rep.finite:
            raise ValueError(f"growth condition violated: {rep.message}")
        if inner == "auto":
            inner = "analytic" if _has_power_terms(spec) else "gauss-hermite"
        if inner == "analytic":
            self.kernel = AnalyticKernel(dual_power_terms(spec))
        elif inner == "gauss-hermite":
            self.kernel = GaussHermiteKernel(spec)
        else:
            raise ValueError(f"unknown inner evaluator {inner!r}")
        self.inner = inner
        self._theta2 = env.theta_norm ** 2

    def _mvd(self, t: float, s: float) -> tuple[float, float, float]:
        """Drift/variance/discount accumulated over [t, s]."""
        dt = s - t
        M = (self.env.rho.integral(t, s) - self.env.r.integral(t, s)
             - 0.5 * self._theta2 * dt)
        V = self._theta2 * dt
        D = self.env.rho.integral(t, s)
        return M, V, D

    def _integrand(self, t: float, y: np.ndarray, order: int = 0):
        """Integrand in u = sqrt(s - t): 2u e^{-disc} * (kernel moment)."""
        def f(u):
            if u == 0.0:  # the 2u factor kills the endpoint exactly
                return np.zeros_like(y)
            s = t + u * u
            M, V, D = self._mvd(t, s)
            if order == 0:
                g = self.kernel.expectation(y, M, V, D)
            elif order == 1:
                g = self.kernel.d_expectation_dy(y, M, V, D)
            else:
                g = self.kernel.d2_expectation_dy2(y, M, V, D)
            return 2.0 * u * g
        return f

    def value(self, t: float, y, tol: float = 1e-9):
        """V(t, y) by adaptive Simpson over sqrt(s - t)."""
        y_arr, scalar = _as_vector(y)
        if not 0.0 <= t <= self.env.T_bar + 1e-12:
            raise ValueError(f"t={t} outside [0, T_bar]")
        span = self.env.T_bar - t
        if span <= 0.0:
            out = np.zeros_like(y_arr)
            return float(out[0]) if scalar else out
        scale = max(np.max(np.abs(dual_h(y_arr, self.spec))) * span, 1e-12)
        out = _adaptive_simpson(self._integrand(t, y_arr, 0), 0.0, np.sqrt(span),
                                tol * scale)
        return float(out[0]) if scalar else out

    def derivative(self, t: float, y, tol: float = 1e-9):
        """dV/dy (negative of the optimal wealth)."""
        y_arr, scalar = _as_vector(y)
        span = self.env.T_bar - t
        if span <= 0.0:
            out = np.zeros_like(y_arr)
            return float(out[0]) if scalar else out
        scale = max(np.max(np.abs(dual_h_neg_derivative(y_arr, self.spec))) * span, 1e-12)
        out = _adaptive_simpson(self._integrand(t, y_arr, 1), 0.0, np.sqrt(span),
                                tol * scale)
        return float(out[0]) if scalar else out

    def second_derivative(self, t: float, y, tol: float = 1e-9):
        if self.inner != "analytic":
            raise ValueError("second derivative needs the analytic kernel")
        y_arr, scalar = _as_vector(y)
        span = self.env.T_bar - t
        if span <= 0.0:
            out = np.zeros_like(y_arr)
            return float(out[0]) if scalar else out
        probe = np.abs(self.kernel.d2_expectation_dy2(y_arr, 0.0, self._theta2 * max(span, 1e-3) * 0.5))
        scale = max(np.max(probe) * span, 1e-12)
        out = _adaptive_simpson(self._integrand(t, y_arr, 2), 0.0, np.sqrt(span),
                                tol * scale)
        return float(out[0]) if scalar else out


def _as_vector(y):
    y_arr = np.asarray(y, dtype=float)
    if np.any(y_arr <= 0.0):
        raise ValueError("dual state must be positive")
    scalar = y_arr.ndim == 0
    return np.atleast_1d(y_arr), scalar


def _growth_exponent(spec: UtilitySpec) -> float:
    beta = getattr(spec, "beta", None)
    if beta is not None:
        return float(beta)
    return 0.75  # conservative default for non power-pair variants


def _has_power_terms(spec: UtilitySpec) -> bool:
    try:
        dual_power_terms(spec)
        return True
    except ValueError:
        return False


def hatV_quadrature(t: float, y, env: MarketEnvironment, spec: UtilitySpec,
                    tol: float = 1e-9, inner: str = "auto"):
    """Deterministic-quadrature dual value at (t, y)."""
    return PostValueEvaluator(env, spec, inner=inner).value(t, y, tol=tol)


def hatV_mc(t: float, y: float, n_samples: int, seed: int,
            env: MarketEnvironment, spec: UtilitySpec,
            n_time_steps: int = 200) -> tuple[float, float]:
    """Monte-Carlo estimate of the dual value with its standard error.

    Exact lognormal sampling of Y on a time grid, trapezoid in time per path.
    """
    from .dual_process import simulate_paths

    if t >= env.T_bar:
        return 0.0, 0.0
    grid = np.linspace(t, env.T_bar, n_time_steps + 1)
    bundle = simulate_paths(y, grid, n_samples, seed, env)
    disc = np.array([np.exp(-env.rho.integral(t, float(s))) for s in grid])
    integrand = disc[None, :] * dual_h(bundle.values.ravel(), spec).reshape(
        bundle.values.shape)
    estimates = np.trapezoid(integrand, x=grid, axis=1)
    mean = float(np.mean(estimates))
    se = float(np.std(estimates, ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else 0.0
    return mean, se


# ---------------------------------------------------------------------------
# Gridded surface
# ---------------------------------------------------------------------------

@dataclass
class ValueSurface:
    """A (t, y)-gridded convex-decreasing value with derivative tables."""

    t_grid: np.ndarray
    y_grid: np.ndarray
    values: np.ndarray
    dy: np.ndarray
    dyy: np.ndarray
    metadata: dict = field(default_factory=dict)
    evaluator: PostValueEvaluator | None = None

    def __post_init__(self):
        self._log_y = np.log(self.y_grid)

    def _locate(self, t, y):
        t = np.asarray(t, dtype=float)
        ly = np.log(np.asarray(y, dtype=float))
        it = np.clip(np.searchsorted(self.t_grid, t) - 1, 0, self.t_grid.size - 2)
        iy = np.clip(np.searchsorted(self.y_grid, y) - 1, 0, self.y_grid.size - 2)
        wt = np.clip((t - self.t_grid[it]) / (self.t_grid[it + 1] - self.t_grid[it]), 0, 1)
        wy = np.clip((ly - self._log_y[iy]) / (self._log_y[iy + 1] - self._log_y[iy]), 0, 1)
        return it, iy, wt, wy

    def _interp(self, table, t, y):
        it, iy, wt, wy = self._locate(t, y)
        v00 = table[it, iy]
        v01 = table[it, iy + 1]
        v10 = table[it + 1, iy]
        v11 = table[it + 1, iy + 1]
        return ((1 - wt) * ((1 - wy) * v00 + wy * v01)
                + wt * ((1 - wy) * v10 + wy * v11))

    def value_at(self, t, y):
        return self._interp(self.values, t, y)

    def dy_at(self, t, y):
        return self._interp(self.dy, t, y)

    def dyy_at(self, t, y):
        return self._interp(self.dyy, t, y)

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("t,y,value,dy,dyy\n")
            for i, t in enumerate(self.t_grid):
                for j, y in enumerate(self.y_grid):
                    f.write(f"{t:.10g},{y:.10g},{self.values[i, j]:.10g},"
                            f"{self.dy[i, j]:.10g},{self.dyy[i, j]:.10g}\n")


def default_y_grid(spec: UtilitySpec, y_max: float = 10.0, n_y: int = 300,
                   y_min: float | None = None) -> np.ndarray:
    """Log-spaced dual grid resolving the kink region, kink as an exact point."""
    kink = dual_power_terms(spec).kink if _has_power_terms(spec) else None
    if y_min is None:
        y_min = 1e-3 * kink if kink is not None else 1e-4
    grid = np.geomspace(y_min, y_max, n_y)
    if kink is not None and y_min < kink < y_max:
        grid = np.unique(np.concatenate([grid, [kink]]))
    return grid


def build_post_surface(env: MarketEnvironment, spec: UtilitySpec,
                       y_grid: np.ndarray | None = None,
                       n_t: int = 1250, inner: str = "auto") -> ValueSurface:
    """Dual value surface on [0, T_bar] x y_grid with derivative tables.

    Constant-coefficient environments use one kernel table over the elapsed
    time and cumulative Simpson (every t-row from a single pass); otherwise
    rows are integrated individually.
    """
    ev = PostValueEvaluator(env, spec, inner=inner)
    if y_grid is None:
        y_grid = default_y_grid(spec)
    y_grid = np.asarray(y_grid, dtype=float)
    t_grid = np.linspace(0.0, env.T_bar, n_t + 1)

    use_analytic = ev.inner == "analytic"
    if env.has_constant_coefficients:
        deltas = env.T_bar - t_grid[::-1]  # 0 .. T_bar, uniform
        theta2 = env.theta_norm ** 2
        nu = env.dual_drift() - 0.5 * theta2
        rho = env.rho.constant
        n_rows = deltas.size
        k_val = np.empty((n_rows, y_grid.size))
        k_dy = np.empty_like(k_val)
        k_dyy = np.empty_like(k_val) if use_analytic else None
        for i, d in enumerate(deltas):
            M, V, D = nu * d, theta2 * d, rho * d
            k_val[i] = ev.kernel.expectation(y_grid, M, V, D)
            k_dy[i] = ev.kernel.d_expectation_dy(y_grid, M, V, D)
            if use_analytic:
                if d == 0.0:
                    k_dyy[i] = 0.0  # patched below from the next row
                else:
                    k_dyy[i] = ev.kernel.d2_expectation_dy2(y_grid, M, V, D)
        if use_analytic and n_rows > 1:
            k_dyy[0] = k_dyy[1]  # the kink delta at d=0 is not integrable pointwise
        values = _cumulative_rows(k_val, deltas)
        dy = _cumulative_rows(k_dy, deltas)
        dyy = _cumulative_rows(k_dyy, deltas) if use_analytic else None
    else:
        values = np.zeros((t_grid.size, y_grid.size))
        dy = np.zeros_like(values)
        dyy = np.zeros_like(values) if use_analytic else None
        for i, t in enumerate(t_grid[:-1]):
            values[i] = ev.value(t, y_grid, tol=1e-8)
            dy[i] = ev.derivative(t, y_grid, tol=1e-8)
            if use_analytic:
                dyy[i] = ev.second_derivative(t, y_grid, tol=1e-8)

    if dyy is None:
        dyy = np.gradient(dy, y_grid, axis=1)

    return ValueSurface(t_grid=t_grid, y_grid=y_grid, values=values, dy=dy,
                        dyy=dyy, evaluator=ev,
                        metadata={"scheme": f"cumulative-simpson/{ev.inner}",
                                  "n_t": n_t, "n_y": y_grid.size})


def _cumulative_rows(kernel_rows: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Integrate kernel rows over elapsed time; row i of the output is the
    value at t = T_bar - deltas[i], returned back in forward-t order."""
    cum = cumulative_simpson(kernel_rows, x=deltas, axis=0, initial=0.0)
    return cum[::-1]


def hatV_derivatives(surface: ValueSurface, t: float, y: float,
                     tol: float = 1e-9) -> tuple[float, float]:
    """(dV/dy, d2V/dy2), by differentiation under the quadrature when the
    surface carries an analytic evaluator, else from the tables."""
    ev = surface.evaluator
    if ev is not None and ev.inner == "analytic":
        lo, hi = surface.y_grid[0], surface.y_grid[-1]
        if not (lo <= y <= hi) or not (surface.t_grid[0] <= t <= surface.t_grid[-1]):
            warnings.warn("(t, y) outside the surface grid; extrapolating",
                          RuntimeWarning, stacklevel=2)
        return (float(ev.derivative(t, y, tol=tol)),
                float(ev.second_derivative(t, y, tol=tol)))
    return float(surface.dy_at(t, y)), float(surface.dyy_at(t, y))


def surface_derivatives_fd(surface: ValueSurface, t: float, y: float) -> tuple[float, float]:
    """4th-order central differences on the surface (cross-validation route)."""
    j = int(np.clip(np.searchsorted(surface.y_grid, y), 2, surface.y_grid.size - 3))
    ys = surface.y_grid[j - 2:j + 3]
    vals = np.array([surface.value_at(t, yy) for yy in ys])
    # nonuniform 5-point stencil via local polynomial fit
    coef = np.polynomial.polynomial.polyfit(ys - y, vals, 4)
    return float(coef[1]), float(2.0 * coef[2])


# ---------------------------------------------------------------------------
# Primal value and strategies
# ---------------------------------------------------------------------------

def primal_value(surface: ValueSurface, t: float, x):
    """V(t, x) = inf_y (dual(t, y) + x y); scalar or vector x.

    The y-grid scan brackets the minimizer; with a quadrature evaluator the
    bracket is refined by bisection on the stationarity condition
    dV/dy(t, y) = -x (the derivative is monotone by convexity), otherwise by
    golden section on the interpolated tables.
    """
    x_arr = np.atleast_1d(np.asarray(x, dtype=float))
    scalar = np.asarray(x).ndim == 0
    if np.any(x_arr <= 0.0):
        raise ValueError("wealth must be positive")
    ys = surface.y_grid
    row = surface.value_at(np.full_like(ys, t), ys)
    obj = row[None, :] + x_arr[:, None] * ys[None, :]
    j = np.argmin(obj, axis=1)
    edge = (j == 0) | (j == ys.size - 1)
    if np.any(edge):
        warnings.warn("primal minimizer at the y-grid edge; extend the grid",
                      RuntimeWarning, stacklevel=2)
    j = np.clip(j, 1, ys.size - 2)
    lo, hi = ys[j - 1], ys[j + 1]

    ev = surface.evaluator
    if ev is not None:
        for _ in range(60):
            mid = np.sqrt(lo * hi)
            slope = np.atleast_1d(ev.derivative(t, mid, tol=1e-9))
            go_right = slope < -x_arr
            lo = np.where(go_right, mid, lo)
            hi = np.where(go_right, hi, mid)
            if np.max(hi / lo) < 1.0 + 1e-13:
                break
        y_star = np.sqrt(lo * hi)
        out = np.atleast_1d(ev.value(t, y_star, tol=1e-10)) + x_arr * y_star
    else:
        phi = (np.sqrt(5.0) - 1.0) / 2.0
        a, b = lo.copy(), hi.copy()
        for _ in range(60):
            c1 = b - phi * (b - a)
            c2 = a + phi * (b - a)
            f1 = surface.value_at(np.full_like(c1, t), c1) + x_arr * c1
            f2 = surface.value_at(np.full_like(c2, t), c2) + x_arr * c2
            left = f1 <= f2
            b = np.where(left, c2, b)
            a = np.where(left, a, c1)
        y_star = 0.5 * (a + b)
        out = surface.value_at(np.full_like(y_star, t), y_star) + x_arr * y_star
    out = np.where(edge, np.min(obj, axis=1), out)
    return float(out[0]) if scalar else out


def post_strategy(surface: ValueSurface, t: float, y: float,
                  env: MarketEnvironment, spec: UtilitySpec,
                  ) -> tuple[float, np.ndarray, float]:
    """Optimal (wealth, portfolio vector, total consumption) after retirement.

    X = -dV/dy, pi = (sigma^T)^{-1} theta * y * d2V/dy2, k = -h'(y).
    """
    dv, dvv = hatV_derivatives(surface, t, y)
    x_star = -dv
    direction = np.linalg.solve(env.sigma.T, env.theta)
    pi_star = direction * (y * dvv)
    k_star = float(dual_h_neg_derivative(y, spec))
    return float(x_star), pi_star, k_star


def pension_adjusted_wealth(x: float, tau: float, pension,
                            env: MarketEnvironment) -> float:
    """Wealth at retirement plus the annuity value of a deterministic pension."""
    if tau > env.T_bar + 1e-12:
        raise ValueError("retirement after the terminal horizon")
    pen = as_schedule(pension)
    if pen.is_constant and env.r.is_constant:
        p, r = pen.constant, env.r.constant
        span = env.T_bar - tau
        add = p * span if abs(r) < 1e-14 else p * (1.0 - np.exp(-r * span)) / r
        return float(x + add)
    ts = np.linspace(tau, env.T_bar, 513)
    disc = np.array([np.exp(-env.r.integral(tau, float(s))) for s in ts])
    from scipy.integrate import simpson
    return float(x + simpson(np.asarray(pen(ts)) * disc, x=ts))


# ---------------------------------------------------------------------------
# Stationary (infinite-horizon) closed forms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StationaryDualValue:
    """Closed-form infinite-horizon dual value for piecewise-power h.

    Particular solution: coefficient -c/lambda(p) per power term, where
    lambda(p) = theta^2 p(p-1)/2 + (rho-r) p - rho; plus homogeneous pasting
    terms A y^{gamma+} (below the kink) and B y^{gamma-} (above) chosen for
    C1 continuity at the kink.  ``stated_form_gap`` is the value jump the
    particular terms alone would leave at the kink (a reported diagnostic).
    """

    terms: DualTerms
    part_global: tuple[tuple[float, float], ...]
    part_below: tuple[tuple[float, float], ...]
    gamma_plus: float
    gamma_minus: float
    paste_below: float
    paste_above: float
    stated_form_gap: float

    def value(self, y):
        y = np.asarray(y, dtype=float)
        out = np.zeros_like(y)
        for c, p in self.part_global:
            out += c * y ** p
        below = y < self.terms.kink
        for c, p in self.part_below:
            out[below] += c * y[below] ** p
        out[below] += self.paste_below * y[below] ** self.gamma_plus
        out[~below] += self.paste_above * y[~below] ** self.gamma_minus
        return out

    def derivative(self, y):
        y = np.asarray(y, dtype=float)
        out = np.zeros_like(y)
        for c, p in self.part_global:
            out += c * p * y ** (p - 1.0)
        below = y < self.terms.kink
        for c, p in self.part_below:
            out[below] += c * p * y[below] ** (p - 1.0)
        out[below] += self.paste_below * self.gamma_plus * y[below] ** (self.gamma_plus - 1.0)
        out[~below] += self.paste_above * self.gamma_minus * y[~below] ** (self.gamma_minus - 1.0)
        return out

    def second_derivative(self, y):
        y = np.asarray(y, dtype=float)
        out = np.zeros_like(y)
        for c, p in self.part_global:
            out += c * p * (p - 1.0) * y ** (p - 2.0)
        below = y < self.terms.kink
        for c, p in self.part_below:
            out[below] += c * p * (p - 1.0) * y[below] ** (p - 2.0)
        gp, gm = self.gamma_plus, self.gamma_minus
        out[below] += self.paste_below * gp * (gp - 1.0) * y[below] ** (gp - 2.0)
        out[~below] += self.paste_above * gm * (gm - 1.0) * y[~below] ** (gm - 2.0)
        return out

    def stationary_residual(self, y, env: MarketEnvironment):
        """theta^2 y^2 f''/2 + (rho - r) y f' - rho f + h(y), zero analytically."""
        y = np.asarray(y, dtype=float)
        t2 = env.theta_norm ** 2
        return (0.5 * t2 * y ** 2 * self.second_derivative(y)
                + env.dual_drift() * y * self.derivative(y)
                - env.rho.constant * self.value(y)
                + dual_h_from_terms(y, self.terms))


def _char_exponent(p: float, env: MarketEnvironment) -> float:
    t2 = env.theta_norm ** 2
    return 0.5 * t2 * p * (p - 1.0) + env.dual_drift() * p - env.rho.constant


def stationary_dual_value(spec: UtilitySpec, env: MarketEnvironment) -> StationaryDualValue:
    """Infinite-horizon closed form; requires every power term to be killed
    (lambda(p) < 0, the per-term finiteness condition) and constant coefficients."""
    if not env.has_constant_coefficients:
        raise ValueError("constant coefficients required")
    terms = dual_power_terms(spec)
    for _, p in terms.global_terms + terms.below_terms:
        lam = _char_exponent(p, env)
        if lam >= -1e-14:
            raise ValueError(
                f"finiteness fails for power {p}: lambda={lam:.6g} >= 0 "
                "(discount rate too small)")

    part_g = tuple((-c / _char_exponent(p, env), p) for c, p in terms.global_terms)
    part_b = tuple((-c / _char_exponent(p, env), p) for c, p in terms.below_terms)

    t2 = env.theta_norm ** 2
    # roots of theta^2 g(g-1)/2 + (rho - r) g - rho = 0
    aa, bb, cc = 0.5 * t2, env.dual_drift() - 0.5 * t2, -env.rho.constant
    disc = np.sqrt(bb * bb - 4.0 * aa * cc)
    gamma_plus = (-bb + disc) / (2.0 * aa)
    gamma_minus = (-bb - disc) / (2.0 * aa)

    kbar = terms.kink
    b0 = sum(c * kbar ** p for c, p in part_b)
    b1 = sum(c * p * kbar ** p for c, p in part_b)  # kbar * B'(kbar)
    u = (gamma_minus * b0 - b1) / (gamma_plus - gamma_minus)
    v = (gamma_plus * b0 - b1) / (gamma_plus - gamma_minus)
    paste_below = u / kbar ** gamma_plus
    paste_above = v / kbar ** gamma_minus

    return StationaryDualValue(terms=terms, part_global=part_g, part_below=part_b,
                               gamma_plus=float(gamma_plus),
                               gamma_minus=float(gamma_minus),
                               paste_below=float(paste_below),
                               paste_above=float(paste_above),
                               stated_form_gap=float(b0))


@dataclass(frozen=True)
class ApyClosedForm:
    """Infinite-horizon dual value for the floor/shift utility family.

    ``constants`` holds C1..C6 of the particular solution; the homogeneous
    pasting coefficients make the function C1 across the kink (the particular
    terms alone leave the jump reported in ``stated_form_gap``).
    """

    solution: StationaryDualValue
    constants: dict
    kink: float

    def value(self, y):
        return self.solution.value(y)

    def derivative(self, y):
        return self.solution.derivative(y)

    def second_derivative(self, y):
        return self.solution.second_derivative(y)

    @property
    def stated_form_gap(self) -> float:
        return self.solution.stated_form_gap


def apy_closed_form(phi: float, psi: float, c0: float, b0: float,
                    env: MarketEnvironment) -> ApyClosedForm:
    """Closed-form stationary dual value with named constants C1..C6."""
    from .utility import ApyUtility

    spec = ApyUtility(phi=phi, psi=psi, c0=c0, b0=b0)
    sol = stationary_dual_value(spec, env)
    t2 = env.theta_norm ** 2
    rho, r = env.rho.constant, env.r.constant
    den1 = 0.5 * t2 * (1.0 - phi) - rho * phi - r * (phi ** 2 - phi)
    den4 = 0.5 * t2 * (1.0 - psi) - rho * psi - r * (psi ** 2 - psi)
    constants = {
        "C1": -(phi / (1.0 - phi)) * phi ** 2 / den1,
        "C2": -c0 / r,
        "C3": b0 ** (1.0 - psi) / (rho * (1.0 - psi)),
        "C4": -(psi / (1.0 - psi)) * psi ** 2 / den4,
        "C5": b0 / r,
        "C6": -(b0 ** (1.0 - psi)) / (rho * (1.0 - psi)),
    }
    # the particular-solution coefficients must reproduce C1..C6 exactly
    got = {**{f"g{p}": c for c, p in sol.part_global},
           **{f"b{p}": c for c, p in sol.part_below}}
    checks = [
        (constants["C1"], got[f"g{1.0 - 1.0 / phi}"]),
        (constants["C2"], got["g1.0"]),
        (constants["C3"], got["g0.0"]),
        (constants["C4"], got[f"b{1.0 - 1.0 / psi}"]),
        (constants["C5"], got["b1.0"]),
        (constants["C6"], got["b0.0"]),
    ]
    for want, have in checks:
        if abs(want - have) > 1e-10 * (1.0 + abs(want)):  # pragma: no cover
            raise AssertionError("particular solution disagrees with the stated constants")
    return ApyClosedForm(solution=sol, constants=constants, kink=b0 ** (-psi))


def infinite_horizon_hatV(y, env: MarketEnvironment, spec: UtilitySpec,
                          tol: float = 1e-8):
    """Time-independent dual value by truncated quadrature with a tail bound.

    Independent of the closed form: integrates the discounted moment kernel
    over elapsed time out to a horizon where the analytic tail bound (each
    power decays like e^{lambda(p) u}) is below tolerance.
    """
    if not env.has_constant_coefficients:
        raise ValueError("constant coefficients required")
    terms = spec if isinstance(spec, DualTerms) else dual_power_terms(spec)
    y_arr, scalar = _as_vector(y)
    theta2_ = env.theta_norm ** 2
    nu_ = env.dual_drift() - 0.5 * theta2_
    log_ratio_max = float(np.max(np.log(terms.kink / y_arr)))

    # per-term decay data: (coef, power, base rate, sharpened rate, onset time)
    tails = []
    for c, p in terms.global_terms:
        lam = _char_exponent(p, env)
        if lam >= -1e-14:
            raise ValueError(f"finiteness fails for power {p}")
        tails.append((abs(c), p, lam, lam, 0.0))
    for c, p in terms.below_terms:
        lam = _char_exponent(p, env)
        if lam >= -1e-14:
            raise ValueError(f"finiteness fails for power {p}")
        # Phi(d_p) <= exp(-extra^2 dt / (8 theta^2)) once the drift through the
        # kink dominates (dt >= 2 log(kink/y)/extra)
        extra = nu_ + p * theta2_
        if extra > 0.0:
            lam_eff = lam - extra * extra / (8.0 * theta2_)
            onset = max(2.0 * log_ratio_max / extra, 0.0)
        else:
            lam_eff, onset = lam, np.inf
        tails.append((abs(c), p, lam, lam_eff, onset))

    def tail_bound(dmax):
        tot = np.zeros_like(y_arr)
        for coef, p, lam, lam_eff, onset in tails:
            lam_use = lam_eff if dmax >= onset else lam
            tot += coef * y_arr ** p * np.exp(lam_use * dmax) / (-lam_use)
        return np.max(tot)

    umax = 1.0
    kernel = AnalyticKernel(terms)
    theta2 = env.theta_norm ** 2
    nu = env.dual_drift() - 0.5 * theta2
    rho = env.rho.constant

    est_scale = max(np.max(np.abs(dual_h_from_terms(y_arr, terms))) / rho, 1e-12)
    while tail_bound(umax) > 0.25 * tol * est_scale and umax < 1e7:
        umax *= 2.0

    def f(u):
        if u == 0.0:
            return np.zeros_like(y_arr)
        d = u * u
        return 2.0 * u * kernel.expectation(y_arr, nu * d, theta2 * d, rho * d)

    # doubling panels so the decaying tail cannot fool the refinement probes
    edges = [0.0, min(1.0, umax)]
    while edges[-1] < umax:
        edges.append(min(2.0 * edges[-1], umax))
    panel_tol = 0.5 * tol * est_scale / len(edges)
    out = np.zeros_like(y_arr)
    for lo, hi in zip(edges[:-1], edges[1:]):
        out = out + _adaptive_simpson(f, np.sqrt(lo), np.sqrt(hi), panel_tol)
    return float(out[0]) if scalar else out
