"""Market coefficients, income/labor construction and model-validity checks.

Coefficient schedules are deterministic: either constants (the case used by all
desk-scale experiments) or callables of time.  Income is exponential,
I(t) = C*exp(K'*t); the labor cost is a C2-smooth quadratic-then-exponential
curve L(t) that is convex on the quadratic piece and satisfies the growth
ordering I'/I <= rho <= L'/L on the aged region [T-ell, T].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import simpson
from scipy.optimize import nnls


class Schedule:
    """A scalar coefficient over time: a constant or a callable t -> value."""

    def __init__(self, value: float | Callable[[np.ndarray], np.ndarray]):
        if callable(value):
            self._fn = value
            self.constant = None
        else:
            self.constant = float(value)
            self._fn = None

    @property
    def is_constant(self) -> bool:
        return self.constant is not None

    def __call__(self, t):
        if self.is_constant:
            return np.full_like(np.asarray(t, dtype=float), self.constant) \
                if np.ndim(t) else self.constant
        return self._fn(np.asarray(t, dtype=float))

    def integral(self, t0: float, t1: float, n: int = 257) -> float:
        """Integral over [t0, t1]: exact for constants, Simpson otherwise."""
        if t1 < t0:
            raise ValueError(f"reversed interval [{t0}, {t1}]")
        if t1 == t0:
            return 0.0
        if self.is_constant:
            return self.constant * (t1 - t0)
        ts = np.linspace(t0, t1, n if n % 2 == 1 else n + 1)
        return float(simpson(self._fn(ts), x=ts))

    def __add__(self, other: "Schedule") -> "Schedule":
        if self.is_constant and other.is_constant:
            return Schedule(self.constant + other.constant)
        return Schedule(lambda t, a=self, b=other: np.asarray(a(t)) + np.asarray(b(t)))


def as_schedule(value) -> Schedule:
    return value if isinstance(value, Schedule) else Schedule(value)


@dataclass
class MarketEnvironment:
    """Financial-market block: rates, excess returns, volatility, discounting.

    r, rho : scalar schedules (1/year)
    mu     : excess-return vector (n,), constant (time-varying via callables
             is supported for the scalar reductions used by the solvers)
    sigma  : volatility matrix (n, n), constant
    T      : mandatory retirement age (years)
    T_bar  : total horizon (years), > T
    """

    r: Schedule
    mu: np.ndarray
    sigma: np.ndarray
    rho: Schedule
    T: float
    T_bar: float
    theta: np.ndarray = field(init=False)

    def __init__(self, r, mu, sigma, rho, T, T_bar):
        self.r = as_schedule(r)
        self.rho = as_schedule(rho)
        self.mu = np.atleast_1d(np.asarray(mu, dtype=float))
        sigma = np.asarray(sigma, dtype=float)
        if sigma.ndim == 0:
            sigma = sigma.reshape(1, 1)
        if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
            raise ValueError(f"sigma must be square, got shape {sigma.shape}")
        if sigma.shape[0] != self.mu.size:
            raise ValueError("mu and sigma dimensions disagree")
        cond = np.linalg.cond(sigma)
        if not np.isfinite(cond) or cond > 1e12:
            raise ValueError(f"sigma is (numerically) singular, cond={cond:.3e}")
        self.sigma = sigma
        if T_bar <= T:
            raise ValueError(f"T_bar={T_bar} must exceed T={T}")
        if T <= 0.0:
            raise ValueError("T must be positive")
        self.T = float(T)
        self.T_bar = float(T_bar)
        self.theta = market_price_of_risk(self)
        residual = self.sigma @ self.theta - self.mu
        if np.max(np.abs(residual)) > 1e-12 * max(1.0, np.max(np.abs(self.mu))):
            raise ValueError("sigma @ theta != mu beyond tolerance")

    @property
    def n_assets(self) -> int:
        return self.mu.size

    @property
    def theta_norm(self) -> float:
        return float(np.linalg.norm(self.theta))

    @property
    def has_constant_coefficients(self) -> bool:
        return self.r.is_constant and self.rho.is_constant

    def dual_drift(self, t=None) -> float:
        """rho(t) - r(t), the drift rate of the dual state."""
        if t is None:
            if not self.has_constant_coefficients:
                raise ValueError("time argument required for non-constant schedules")
            return self.rho.constant - self.r.constant
        return self.rho(t) - self.r(t)


def market_price_of_risk(env: MarketEnvironment) -> np.ndarray:
    """theta = sigma^{-1} mu (per time point; constant case returns the vector)."""
    return np.linalg.solve(env.sigma, env.mu)


def discount_factor(env: MarketEnvironment, t0: float, t1: float) -> float:
    """exp(-integral of rho over [t0, t1])."""
    if not 0.0 <= t0 <= t1 <= env.T_bar + 1e-12:
        raise ValueError(f"need 0 <= t0 <= t1 <= T_bar, got [{t0}, {t1}]")
    return float(np.exp(-env.rho.integral(t0, t1)))


# ---------------------------------------------------------------------------
# Income and labor cost
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IncomeLaborSpec:
    """Income I(t)=C e^{K't} and the smooth quadratic/exponential labor cost.

    On t <= T-ell the labor cost is a0 + a1 t + a2 t^2/2 with coefficients
    chosen so that value, slope and curvature all match e^{Kt} at T-ell.
    """

    C: float
    K_prime: float
    K: float
    ell: float
    T: float
    a0: float
    a1: float
    a2: float
    income_scale: float = 1.0
    labor_scale: float = 1.0

    def income(self, t):
        return self.income_scale * self.C * np.exp(self.K_prime * np.asarray(t, dtype=float))

    def labor(self, t):
        t = np.asarray(t, dtype=float)
        s = self.T - self.ell
        quad = self.a0 + self.a1 * t + 0.5 * self.a2 * t ** 2
        aged = np.exp(self.K * t)
        return self.labor_scale * np.where(t <= s, quad, aged)

    def scaled(self, income_factor: float = 1.0, labor_factor: float = 1.0) -> "IncomeLaborSpec":
        """Same shape with income/labor multiplied by constants (comparative statics)."""
        return IncomeLaborSpec(
            C=self.C, K_prime=self.K_prime, K=self.K, ell=self.ell, T=self.T,
            a0=self.a0, a1=self.a1, a2=self.a2,
            income_scale=self.income_scale * income_factor,
            labor_scale=self.labor_scale * labor_factor,
        )

    # -- discounted integrals (closed forms; used in boundary conditions) --

    def discounted_income_integral(self, t: float, t_end: float, r: Schedule) -> float:
        """int_t^{t_end} exp(-int_t^u r) I(u) du."""
        if not r.is_constant:
            return _simpson_discounted(self.income, t, t_end, r)
        rr = r.constant
        c = self.income_scale * self.C
        g = self.K_prime - rr
        if abs(g) < 1e-14:
            return c * np.exp(self.K_prime * t) * (t_end - t)
        return c * np.exp(rr * t) * (np.exp(g * t_end) - np.exp(g * t)) / g

    def discounted_labor_integral(self, t: float, t_end: float, rho: Schedule) -> float:
        """int_t^{t_end} exp(-int_t^u rho) L(u) du."""
        if not rho.is_constant:
            return _simpson_discounted(self.labor, t, t_end, rho)
        p = rho.constant
        s = self.T - self.ell
        total = 0.0  # accumulates int f(u) e^{-p u} du over both pieces
        if t < s:
            total += _poly_exp_integral(self.a0, self.a1, 0.5 * self.a2, p,
                                        t, min(t_end, s))
        lo = max(t, s)
        if t_end > lo:
            g = self.K - p
            if abs(g) < 1e-14:
                total += t_end - lo
            else:
                total += (np.exp(g * t_end) - np.exp(g * lo)) / g
        return self.labor_scale * float(np.exp(p * t) * total)

    def validate(self, rho: Schedule) -> list[str]:
        """Collect violated validity conditions (empty list when healthy)."""
        problems = []
        s = self.T - self.ell
        if not (0.0 < 1.0 / self.K < s):
            problems.append(f"need 0 < 1/K < T-ell, got 1/K={1 / self.K:.4f}, T-ell={s:.4f}")
        if self.a1 >= 0.0:
            problems.append(f"a1={self.a1:.4f} is not negative")
        if self.a2 * s + self.a1 <= 0.0:
            problems.append("labor slope at T-ell is not positive")
        ts = np.linspace(s, self.T, 101)
        rho_t = np.asarray(rho(ts), dtype=float)
        inc_growth = np.full_like(ts, self.K_prime)
        lab_growth = np.full_like(ts, self.K)
        if np.any(inc_growth > rho_t + 1e-10):
            problems.append("income growth exceeds the discount rate on the aged region")
        if np.any(rho_t > lab_growth + 1e-10):
            problems.append("discount rate exceeds labor-cost growth on the aged region")
        return problems


def _poly_exp_integral(b0: float, b1: float, b2: float, p: float,
                       lo: float, hi: float) -> float:
    """int_lo^hi (b0 + b1 u + b2 u^2) e^{-p u} du, antiderivative in closed form."""
    def anti(u):
        if abs(p) < 1e-14:
            return b0 * u + b1 * u ** 2 / 2 + b2 * u ** 3 / 3
        e = np.exp(-p * u)
        return -e * (b0 / p + b1 * (u / p + 1 / p ** 2)
                     + b2 * (u ** 2 / p + 2 * u / p ** 2 + 2 / p ** 3))
    return anti(hi) - anti(lo)


def _simpson_discounted(fn, t: float, t_end: float, rate: Schedule, n: int = 513) -> float:
    if t_end <= t:
        return 0.0
    us = np.linspace(t, t_end, n)
    disc = np.array([np.exp(-rate.integral(t, float(u))) for u in us])
    return float(simpson(fn(us) * disc, x=us))


def build_income_labor(C: float, K_prime: float, K: float, ell: float,
                       T: float, rho) -> IncomeLaborSpec:
    """Construct the income/labor pair and check every validity condition."""
    if C <= 0.0:
        raise ValueError("C must be positive")
    if ell <= 0.0 or ell > T:
        raise ValueError(f"need 0 < ell <= T, got ell={ell}, T={T}")
    s = T - ell
    e = np.exp(K * s)
    a0 = e * (1.0 - K * s + 0.5 * K ** 2 * s ** 2)
    a1 = K * e * (1.0 - K * s)
    a2 = K ** 2 * e
    spec = IncomeLaborSpec(C=C, K_prime=K_prime, K=K, ell=ell, T=T,
                           a0=float(a0), a1=float(a1), a2=float(a2))
    problems = spec.validate(as_schedule(rho))
    if problems:
        raise ValueError("invalid income/labor construction: " + "; ".join(problems))
    return spec


def boundary_upper_bound(spec: IncomeLaborSpec, t):
    """L(t)/I(t): everyone should have retired at or below this dual level."""
    return spec.labor(t) / spec.income(t)


# ---------------------------------------------------------------------------
# Cone-constrained market price of risk
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConeSpec:
    """Closed convex cone of admissible portfolios.

    kind 'unconstrained'       : all of R^n
    kind 'nonnegative_orthant' : no short selling
    kind 'halfspaces'          : {pi : n_i . pi >= 0} for each supplied normal
    """

    kind: str
    normals: tuple[tuple[float, ...], ...] = ()

    def polar_generators(self, n: int) -> np.ndarray:
        """Generators of the positive polar cone (rows)."""
        if self.kind == "unconstrained":
            return np.zeros((0, n))
        if self.kind == "nonnegative_orthant":
            return np.eye(n)
        if self.kind == "halfspaces":
            gens = np.asarray(self.normals, dtype=float)
            if gens.ndim != 2 or gens.shape[1] != n:
                raise ValueError(f"normals must be (m, {n}) shaped")
            return gens
        raise ValueError(f"unknown cone kind {self.kind!r}")


UNCONSTRAINED = ConeSpec(kind="unconstrained")


@dataclass(frozen=True)
class ConstrainedTheta:
    v_hat: np.ndarray
    theta_hat: np.ndarray
    kkt_residual: float
    degenerate: bool  # theta_hat == 0: the constrained model breaks down


def constrained_theta(env: MarketEnvironment, cone: ConeSpec) -> ConstrainedTheta:
    """Minimum market price of risk over the polar cone.

    Solves min_{v in polar cone} ||sigma^{-1}(v + mu)||^2 over the cone
    generators: exact active-set enumeration for small generator counts,
    nonnegative least squares above, with a KKT certificate either way.
    """
    n = env.n_assets
    gens = cone.polar_generators(n)
    sigma_inv = np.linalg.inv(env.sigma)
    if gens.shape[0] == 0:
        v_hat = np.zeros(n)
    else:
        # v = gens.T @ lam, lam >= 0: min ||sigma_inv gens.T lam + sigma_inv mu||
        A = sigma_inv @ gens.T
        b = -sigma_inv @ env.mu
        m = gens.shape[0]
        if m <= 12:
            lam = _nnls_by_enumeration(A, b)
        else:
            lam, _ = nnls(A, b)
        v_hat = gens.T @ lam
    theta_hat = sigma_inv @ (v_hat + env.mu)

    grad = 2.0 * sigma_inv.T @ theta_hat
    slack = float(abs(grad @ v_hat))
    directional = float(-np.min(gens @ grad)) if gens.shape[0] else 0.0
    kkt = max(slack, directional, 0.0)
    norm = float(np.linalg.norm(theta_hat))
    return ConstrainedTheta(v_hat=v_hat, theta_hat=theta_hat,
                            kkt_residual=kkt, degenerate=norm < 1e-12)


def _nnls_by_enumeration(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact min ||A x - b|| with x >= 0 by enumerating active sets (small m)."""
    from itertools import combinations

    m = A.shape[1]
    best = np.zeros(m)
    best_obj = float(b @ b)
    for size in range(1, m + 1):
        for subset in combinations(range(m), size):
            cols = A[:, subset]
            coef, *_ = np.linalg.lstsq(cols, b, rcond=None)
            if np.any(coef < -1e-12):
                continue
            resid = cols @ coef - b
            obj = float(resid @ resid)
            if obj < best_obj - 1e-15 * (1 + best_obj):
                best_obj = obj
                best = np.zeros(m)
                best[list(subset)] = np.clip(coef, 0.0, None)
    return best


# ---------------------------------------------------------------------------
# Finiteness / mortality
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GrowthReport:
    finite: bool
    horizon: float
    exponent_grid: np.ndarray
    required_rho: float | None
    message: str


def growth_condition_check(env: MarketEnvironment, beta: float,
                           horizon: float | None = None) -> GrowthReport:
    """Finiteness of the dual value: always true on a finite horizon; for an
    infinite one requires rho > r*beta + beta*||theta||^2 / (2*(1-beta))."""
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0,1)")
    horizon = env.T_bar if horizon is None else horizon
    theta2 = env.theta_norm ** 2

    if np.isfinite(horizon):
        ts = np.linspace(0.0, horizon, 201)
        expo = (np.asarray(env.rho(ts), dtype=float) / (beta - 1.0)
                - beta / (beta - 1.0) * np.asarray(env.r(ts), dtype=float)
                + 0.5 * beta / (beta - 1.0) ** 2 * theta2)
        finite = bool(np.all(np.isfinite(expo)))
        return GrowthReport(finite=finite, horizon=horizon, exponent_grid=expo,
                            required_rho=None,
                            message="finite horizon: dual value integrable")

    if not env.has_constant_coefficients:
        raise ValueError("infinite horizon needs constant coefficients")
    required = env.r.constant * beta + beta * theta2 / (2.0 * (1.0 - beta))
    ok = env.rho.constant > required
    msg = (f"rho={env.rho.constant:.6g} vs required > {required:.6g}: "
           + ("satisfied" if ok else "violated"))
    return GrowthReport(finite=ok, horizon=np.inf,
                        exponent_grid=np.array([]), required_rho=required,
                        message=msg)


def mortality_adjusted_discount(rho, hazard) -> Schedule:
    """Pointwise rho + lambda; rejects negative hazard."""
    rho_s, haz = as_schedule(rho), as_schedule(hazard)
    if haz.is_constant:
        if haz.constant < 0.0:
            raise ValueError("hazard rate must be nonnegative")
    else:
        probe = haz(np.linspace(0.0, 100.0, 101))
        if np.any(np.asarray(probe) < 0.0):
            raise ValueError("hazard rate must be nonnegative")
    return rho_s + haz


def baseline_environment() -> MarketEnvironment:
    """The scalar market used throughout the experiments."""
    return MarketEnvironment(r=0.03, mu=0.1, sigma=0.4, rho=0.1, T=2.0, T_bar=2.5)


def baseline_income_labor(C: float = 5.0, K_prime: float = 0.08, K: float = 1.3,
                          ell: float = 1.0, T: float = 2.0, rho: float = 0.1,
                          ) -> IncomeLaborSpec:
    return build_income_labor(C=C, K_prime=K_prime, K=K, ell=ell, T=T, rho=rho)
