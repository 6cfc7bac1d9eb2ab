"""Two-good (basic/luxury) utility, its total-consumption reduction and convex dual.

The preference over a basic rate c and a luxury rate g is

    u(c, g) = c^alpha/alpha + ((g - a)^+)^beta/beta,     0 < alpha < beta < 1, a > 0,

so luxury only pays off above the entry level ``a``.  Everything downstream works
with the one-dimensional total utility

    ubar(k) = max_{c+g=k} u(c, g),

which is increasing but has a non-concave stretch: its concave envelope is linear
with slope ``y_bar`` on a band (k_minus, k_plus), and an optimizer never consumes
inside that band.  The convex dual

    h(y) = sup_{k>=0} (ubar(k) - k*y)

is piecewise additive in powers of y with a single kink at y_bar; -h'(y) is the
optimal total consumption at marginal-utility level y.

A subsistence/shift family (basic floor c0, luxury shift b0) and a tabulated
variant are supported alongside the power pair.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import bisect, brentq


@dataclass(frozen=True)
class PowerPairUtility:
    """Power utility on basic goods plus shifted power on luxury goods.

    alpha : basic exponent, 0 < alpha < 1
    beta  : luxury exponent, alpha < beta < 1
    a     : luxury entry level (dollars/year), > 0
    """

    alpha: float
    beta: float
    a: float

    variant = "PowerPair"

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0,1), got {self.alpha}")
        if not self.alpha < self.beta < 1.0:
            raise ValueError(f"beta must be in (alpha,1), got {self.beta}")
        if not self.a > 0.0:
            raise ValueError(f"a must be positive, got {self.a}")

    def pair_utility(self, c, g):
        """u(c, g) for nonnegative rates (vectorized)."""
        c = np.asarray(c, dtype=float)
        g = np.asarray(g, dtype=float)
        lux = np.maximum(g - self.a, 0.0)
        return c ** self.alpha / self.alpha + lux ** self.beta / self.beta


@dataclass(frozen=True)
class ApyUtility:
    """Additively separable utility with a basic floor and a luxury shift.

    u(c, g) = (c-c0)^(1-phi)/(1-phi) + (g+b0)^(1-psi)/(1-psi),  c >= c0, g >= 0,
    with curvature exponents phi, psi > 0, != 1.
    """

    phi: float
    psi: float
    c0: float
    b0: float

    variant = "APY"

    def __post_init__(self):
        if self.phi <= 0.0 or self.phi == 1.0:
            raise ValueError(f"phi must be positive and != 1, got {self.phi}")
        if self.psi <= 0.0 or self.psi == 1.0:
            raise ValueError(f"psi must be positive and != 1, got {self.psi}")
        if self.c0 < 0.0:
            raise ValueError(f"c0 must be nonnegative, got {self.c0}")
        if self.b0 <= 0.0:
            raise ValueError(f"b0 must be positive, got {self.b0}")

    def pair_utility(self, c, g):
        c = np.asarray(c, dtype=float)
        g = np.asarray(g, dtype=float)
        if np.any(c < self.c0 - 1e-12):
            raise ValueError("basic consumption below the floor c0")
        base = np.maximum(c - self.c0, 0.0)
        return (base ** (1.0 - self.phi) / (1.0 - self.phi)
                + (g + self.b0) ** (1.0 - self.psi) / (1.0 - self.psi))

    @property
    def luxury_start(self) -> float:
        """Total consumption above which luxury spending turns positive."""
        return self.c0 + self.b0 ** (self.psi / self.phi)


@dataclass(frozen=True, eq=False)
class TabulatedUtility:
    """Sampled total utility on a strictly increasing consumption grid."""

    k_grid: np.ndarray
    u_values: np.ndarray

    variant = "Tabulated"

    def __post_init__(self):
        k = np.asarray(self.k_grid, dtype=float)
        u = np.asarray(self.u_values, dtype=float)
        if k.ndim != 1 or k.shape != u.shape or k.size < 2:
            raise ValueError("k_grid and u_values must be matching 1-D arrays")
        if np.any(np.diff(k) <= 0.0):
            raise ValueError("k_grid must be strictly increasing")
        if np.any(np.diff(u) <= 0.0):
            raise ValueError("u_values must be strictly increasing")
        object.__setattr__(self, "k_grid", k)
        object.__setattr__(self, "u_values", u)

    def hull_values(self) -> np.ndarray:
        """Concave majorant of the sampled points (upper convex hull)."""
        k, u = self.k_grid, self.u_values
        hull = [0, 1]
        for i in range(2, k.size):
            while len(hull) >= 2:
                i0, i1 = hull[-2], hull[-1]
                # drop i1 if it lies below the chord i0 -> i
                if (u[i1] - u[i0]) * (k[i] - k[i0]) <= (u[i] - u[i0]) * (k[i1] - k[i0]):
                    hull.pop()
                else:
                    break
            hull.append(i)
        return np.interp(k, k[hull], u[hull])


UtilitySpec = PowerPairUtility | ApyUtility | TabulatedUtility


@dataclass(frozen=True)
class EnvelopeData:
    """Concave-envelope geometry of the total utility.

    k_minus, k_plus : endpoints of the non-consumption band (dollars/year)
    y_bar           : slope of the envelope chord (the dual kink)
    k0              : crossover where the split branch first beats basic-only
    """

    k_minus: float
    k_plus: float
    y_bar: float
    k0: float


@dataclass(frozen=True)
class DualTerms:
    """Piecewise-power representation of the dual h.

    h(y) = sum(c * y**p for c, p in global_terms)
           + 1{y < kink} * sum(c * y**p for c, p in below_terms)
    """

    global_terms: tuple[tuple[float, float], ...]
    below_terms: tuple[tuple[float, float], ...]
    kink: float
    powers: tuple[float, ...] = field(init=False)

    def __post_init__(self):
        ps = sorted({p for _, p in self.global_terms + self.below_terms})
        object.__setattr__(self, "powers", tuple(ps))


# ---------------------------------------------------------------------------
# Envelope geometry and splits
# ---------------------------------------------------------------------------

def _split_root(k: float, spec: PowerPairUtility) -> float:
    """Interior basic rate solving c^(a-1) = (k-c-a)^(b-1) on (0, k-a)."""
    al, be, a = spec.alpha, spec.beta, spec.a
    delta = k - a  # luxury budget above the entry level
    if delta <= 0.0:
        raise ValueError(f"no interior split for k={k} <= a={a}")
    if al == 0.5 and be == 0.75:
        return float(np.sqrt(delta + 0.25) - 0.5)

    def foc(c):
        return c ** (al - 1.0) - max(delta - c, 5e-324) ** (be - 1.0)

    lo = delta * 1e-18
    hi = delta * (1.0 - 1e-14)
    if foc(hi) >= 0.0:
        return hi  # root within one ulp of delta: luxury part underflows
    try:
        return float(brentq(foc, lo, hi, xtol=1e-300, rtol=1e-15, maxiter=200))
    except Exception as exc:  # pragma: no cover - diagnostic path
        raise RuntimeError(
            f"split root failed on ({lo:.3e}, {hi:.3e}): "
            f"foc(lo)={foc(lo):.3e}, foc(hi)={foc(hi):.3e}"
        ) from exc


def _split_branch_value(k: float, spec: PowerPairUtility) -> float:
    c = _split_root(k, spec)
    lux = max(k - spec.a - c, 0.0)
    return c ** spec.alpha / spec.alpha + lux ** spec.beta / spec.beta


@lru_cache(maxsize=256)
def _breakpoints_cached(alpha: float, beta: float, a: float) -> EnvelopeData:
    spec = PowerPairUtility(alpha, beta, a)
    y_bar = ((1.0 - beta) / (a * beta)) ** (1.0 - beta)
    k_minus = y_bar ** (1.0 / (alpha - 1.0))
    k_plus = k_minus + a + y_bar ** (1.0 / (beta - 1.0))

    def gap(k):
        return _split_branch_value(k, spec) - k ** alpha / alpha

    lo, hi = a * (1.0 + 1e-12), 10.0 * k_plus
    if gap(hi) <= 0.0:  # pragma: no cover - cannot happen for valid specs
        raise RuntimeError(f"k0 bracket failed: gap({hi:.3e})={gap(hi):.3e} <= 0")
    k0 = float(bisect(gap, lo, hi, xtol=1e-300, rtol=1e-13, maxiter=300))
    return EnvelopeData(k_minus=float(k_minus), k_plus=float(k_plus),
                        y_bar=float(y_bar), k0=k0)


def envelope_breakpoints(spec: UtilitySpec) -> EnvelopeData:
    """Closed-form envelope chord and the branch crossover k0.

    y_bar = ((1-beta)/(a*beta))^(1-beta), k_minus = y_bar^(1/(alpha-1)),
    k_plus = k_minus + a + y_bar^(1/(beta-1)); k0 is the unique root in
    (a, 10*k_plus) where the split branch value meets the basic-only value.
    """
    if not isinstance(spec, PowerPairUtility):
        raise ValueError(f"envelope breakpoints need the PowerPair variant, got {spec.variant}")
    return _breakpoints_cached(spec.alpha, spec.beta, spec.a)


def split_consumption(k, spec: UtilitySpec):
    """Optimal (basic, luxury) pair at total consumption k.

    Basic-only below the crossover; above it the basic rate solves the
    first-order condition between the two marginal utilities.
    """
    k_arr = np.asarray(k, dtype=float)
    if np.any(k_arr < 0.0):
        raise ValueError("total consumption must be nonnegative")
    scalar = k_arr.ndim == 0
    k_arr = np.atleast_1d(k_arr)

    if isinstance(spec, PowerPairUtility):
        k0 = envelope_breakpoints(spec).k0
        c = k_arr.copy()
        for i, ki in enumerate(k_arr):
            if ki > k0:
                c[i] = _split_root(float(ki), spec)
        g = k_arr - c
    elif isinstance(spec, ApyUtility):
        if np.any(k_arr < spec.c0):
            raise ValueError(f"total consumption below the basic floor c0={spec.c0}")
        c = k_arr.copy()
        for i, ki in enumerate(k_arr):
            if ki > spec.luxury_start:
                c[i] = _apy_split_root(float(ki), spec)
        g = k_arr - c
    else:
        raise ValueError("split is not defined for tabulated specs")

    if scalar:
        return float(c[0]), float(g[0])
    return c, g


def _apy_split_root(k: float, spec: ApyUtility) -> float:
    def foc(c):
        return (c - spec.c0) ** (-spec.phi) - (k - c + spec.b0) ** (-spec.psi)

    # at the optimum c-c0 = (g+b0)^(psi/phi) > b0^(psi/phi) since g > 0 here
    lo = spec.c0 + spec.b0 ** (spec.psi / spec.phi) * (1.0 - 1e-9)
    hi = k
    if foc(lo) <= 0.0:  # k barely above the luxury start: shrink the shave
        lo = spec.c0 + spec.b0 ** (spec.psi / spec.phi) * (1.0 - 1e-15)
    try:
        return float(brentq(foc, lo, hi, xtol=1e-300, rtol=1e-15, maxiter=200))
    except Exception as exc:  # pragma: no cover
        raise RuntimeError(
            f"split root failed on ({lo:.3e}, {hi:.3e}) for k={k:.3e}"
        ) from exc


def total_utility(k, spec: UtilitySpec):
    """ubar(k) = max over c+g=k of u(c, g), vectorized in k."""
    k_arr = np.asarray(k, dtype=float)
    if np.any(k_arr < 0.0):
        raise ValueError("total consumption must be nonnegative")
    scalar = k_arr.ndim == 0
    k_arr = np.atleast_1d(k_arr)

    if isinstance(spec, TabulatedUtility):
        kg = spec.k_grid
        if np.any(k_arr < kg[0]) or np.any(k_arr > kg[-1]):
            raise ValueError("consumption outside the tabulated grid")
        out = np.interp(k_arr, kg, spec.u_values)
    else:
        c, g = split_consumption(k_arr, spec)
        out = spec.pair_utility(c, g)
    return float(out[0]) if scalar else out


def concave_envelope(k, spec: UtilitySpec):
    """Smallest concave function dominating ubar; linear on the band."""
    k_arr = np.atleast_1d(np.asarray(k, dtype=float))
    if np.any(k_arr < 0.0):
        raise ValueError("total consumption must be nonnegative")
    scalar = np.asarray(k).ndim == 0

    if isinstance(spec, PowerPairUtility):
        env = envelope_breakpoints(spec)
        out = np.empty_like(k_arr)
        below = k_arr <= env.k_minus
        above = k_arr >= env.k_plus
        mid = ~(below | above)
        if np.any(below):
            out[below] = total_utility(k_arr[below], spec)
        if np.any(above):
            out[above] = total_utility(k_arr[above], spec)
        if np.any(mid):
            u_at_km = env.k_minus ** spec.alpha / spec.alpha
            out[mid] = u_at_km + env.y_bar * (k_arr[mid] - env.k_minus)
    elif isinstance(spec, ApyUtility):
        # globally concave: the envelope is ubar itself
        out = np.atleast_1d(total_utility(k_arr, spec))
    else:
        kg = spec.k_grid
        if np.any(k_arr < kg[0]) or np.any(k_arr > kg[-1]):
            raise ValueError("consumption outside the tabulated grid")
        out = np.interp(k_arr, kg, spec.hull_values())
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# Convex dual
# ---------------------------------------------------------------------------

def dual_power_terms(spec: UtilitySpec) -> DualTerms:
    """Piecewise-power representation of h for the closed-form variants."""
    if isinstance(spec, PowerPairUtility):
        al, be = spec.alpha, spec.beta
        env = envelope_breakpoints(spec)
        return DualTerms(
            global_terms=(((1.0 - al) / al, -al / (1.0 - al)),),
            below_terms=(((1.0 - be) / be, -be / (1.0 - be)), (-spec.a, 1.0)),
            kink=env.y_bar,
        )
    if isinstance(spec, ApyUtility):
        phi, psi, c0, b0 = spec.phi, spec.psi, spec.c0, spec.b0
        lux_flat = b0 ** (1.0 - psi) / (1.0 - psi)
        return DualTerms(
            global_terms=((phi / (1.0 - phi), 1.0 - 1.0 / phi),
                          (-c0, 1.0),
                          (lux_flat, 0.0)),
            below_terms=((psi / (1.0 - psi), 1.0 - 1.0 / psi),
                         (b0, 1.0),
                         (-lux_flat, 0.0)),
            kink=b0 ** (-psi),
        )
    raise ValueError("tabulated specs have no closed-form dual; use numeric_legendre")


def dual_h(y, spec: UtilitySpec):
    """Legendre conjugate h(y) = sup_k (ubar(k) - k*y), y > 0."""
    y_arr = np.asarray(y, dtype=float)
    if np.any(y_arr <= 0.0):
        raise ValueError("marginal utility must be positive")
    scalar = y_arr.ndim == 0
    y_arr = np.atleast_1d(y_arr)

    if isinstance(spec, TabulatedUtility):
        out = np.array([numeric_legendre(spec, float(yi)) for yi in y_arr])
    else:
        terms = dual_power_terms(spec)
        out = np.zeros_like(y_arr)
        for c, p in terms.global_terms:
            out += c * y_arr ** p
        mask = y_arr < terms.kink
        if np.any(mask):
            for c, p in terms.below_terms:
                out[mask] += c * y_arr[mask] ** p
    return float(out[0]) if scalar else out


def dual_h_neg_derivative(y, spec: UtilitySpec):
    """-h'(y): the optimal total consumption at marginal utility y.

    At the kink itself the basic-only (right-limit) branch is returned; the
    one-sided limits are available from ``kink_consumption_limits``.
    """
    y_arr = np.asarray(y, dtype=float)
    if np.any(y_arr <= 0.0):
        raise ValueError("marginal utility must be positive")
    scalar = y_arr.ndim == 0
    y_arr = np.atleast_1d(y_arr)

    if isinstance(spec, TabulatedUtility):
        out = np.array([_tabulated_argmax(spec, float(yi)) for yi in y_arr])
    else:
        terms = dual_power_terms(spec)
        out = np.zeros_like(y_arr)
        for c, p in terms.global_terms:
            out -= c * p * y_arr ** (p - 1.0)
        mask = y_arr < terms.kink  # strict: the kink returns the right limit
        if np.any(mask):
            for c, p in terms.below_terms:
                out[mask] -= c * p * y_arr[mask] ** (p - 1.0)
    return float(out[0]) if scalar else out


def kink_consumption_limits(spec: UtilitySpec) -> tuple[float, float]:
    """One-sided limits of -h' at the kink: the total-consumption jump."""
    terms = dual_power_terms(spec)
    eps = terms.kink * 1e-9
    hi = dual_h_neg_derivative(terms.kink - eps, spec)
    lo = dual_h_neg_derivative(terms.kink + eps, spec)
    return float(lo), float(hi)


def split_from_dual(y, spec: UtilitySpec):
    """Optimal (basic, luxury) rates at marginal-utility level y."""
    y_arr = np.asarray(y, dtype=float)
    if np.any(y_arr <= 0.0):
        raise ValueError("marginal utility must be positive")
    scalar = y_arr.ndim == 0
    y_arr = np.atleast_1d(y_arr)

    if isinstance(spec, PowerPairUtility):
        env = envelope_breakpoints(spec)
        c = y_arr ** (1.0 / (spec.alpha - 1.0))
        g = np.where(y_arr < env.y_bar,
                     spec.a + y_arr ** (1.0 / (spec.beta - 1.0)), 0.0)
    elif isinstance(spec, ApyUtility):
        c = spec.c0 + y_arr ** (-1.0 / spec.phi)
        g = np.where(y_arr < spec.b0 ** (-spec.psi),
                     y_arr ** (-1.0 / spec.psi) - spec.b0, 0.0)
    else:
        k = np.array([_tabulated_argmax(spec, float(yi)) for yi in y_arr])
        c, g = k, np.zeros_like(k)  # split undefined for tables
    if scalar:
        return float(c[0]), float(g[0])
    return c, g


def _tabulated_argmax(spec: TabulatedUtility, y: float) -> float:
    values = spec.u_values - spec.k_grid * y
    i = int(np.argmax(values))
    if i in (0, spec.k_grid.size - 1):
        warnings.warn("Legendre maximizer on the grid edge; widen the table",
                      RuntimeWarning, stacklevel=2)
    return float(spec.k_grid[i])


def numeric_legendre(util: TabulatedUtility, y: float) -> float:
    """Brute-force sup over the table of ubar(k) - k*y (test oracle)."""
    if y <= 0.0:
        raise ValueError("marginal utility must be positive")
    values = util.u_values - util.k_grid * y
    i = int(np.argmax(values))
    if i in (0, util.k_grid.size - 1):
        warnings.warn("Legendre maximizer on the grid edge; widen the table",
                      RuntimeWarning, stacklevel=2)
    return float(values[i])


def sample_total_utility(spec: UtilitySpec, k_max: float, n_per_decade: int = 600,
                         k_min: float = 1e-8) -> TabulatedUtility:
    """Tabulate ubar on a log grid (plus k=0 when admissible).

    Uses the parametric form of the optimal split (sweeping the basic rate)
    instead of per-point root finding, so the table is exact up to
    interpolation.
    """
    if isinstance(spec, TabulatedUtility):
        return spec
    n = max(int(np.log10(k_max / k_min) * n_per_decade), 16)
    k = np.geomspace(k_min, k_max, n)

    if isinstance(spec, PowerPairUtility):
        env = envelope_breakpoints(spec)
        basic = k[k <= env.k0]
        u_basic = basic ** spec.alpha / spec.alpha
        # parametric split branch: k(c) = c + a + c^((1-alpha)/(1-beta))
        q = (1.0 - spec.alpha) / (1.0 - spec.beta)
        c_at_k0 = _split_root(env.k0, spec)
        c_sweep = np.geomspace(c_at_k0, max(k_max, env.k0 * 2.0), 4 * n)
        k_split = c_sweep + spec.a + c_sweep ** q
        u_split = (c_sweep ** spec.alpha / spec.alpha
                   + (c_sweep ** q) ** spec.beta / spec.beta)
        keep = k_split <= k_max * (1 + 1e-12)
        kk = np.concatenate([[0.0], basic, k_split[keep]])
        uu = np.concatenate([[0.0], u_basic, u_split[keep]])
    else:
        lux_start = spec.luxury_start
        k_lo = np.geomspace(max(k_min, spec.c0 + 1e-10), lux_start, n // 2) \
            if lux_start > spec.c0 else np.array([])
        u_lo = spec.pair_utility(k_lo, np.zeros_like(k_lo)) if k_lo.size else np.array([])
        # parametric: c = c0 + y^(-1/phi), g = y^(-1/psi) - b0 for y below the kink
        y_kink = spec.b0 ** (-spec.psi)
        y_sweep = np.geomspace(y_kink * (1 - 1e-10), 1e-12, 4 * n)
        c_sw = spec.c0 + y_sweep ** (-1.0 / spec.phi)
        g_sw = y_sweep ** (-1.0 / spec.psi) - spec.b0
        k_hi = c_sw + g_sw
        keep = k_hi <= k_max * (1 + 1e-12)
        kk = np.concatenate([k_lo, k_hi[keep]])
        uu = np.concatenate([u_lo, spec.pair_utility(c_sw[keep], g_sw[keep])])

    order = np.argsort(kk)
    kk, uu = kk[order], uu[order]
    keep = np.concatenate([[True], np.diff(kk) > 0])
    return TabulatedUtility(k_grid=kk[keep], u_values=uu[keep])
