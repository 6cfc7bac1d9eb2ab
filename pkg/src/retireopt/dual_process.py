"""Exact simulation of the dual (marginal-utility) state.

The dual state follows dY = Y((rho - r) dt - theta . dB), i.e. a geometric
Brownian motion, so every step is sampled from the exact lognormal transition:
no Euler bias at any step size.  Paths use counter-based per-path RNG streams
(Philox keyed by (seed, stream)), so path i is bit-identical no matter how many
paths are drawn or in what order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .market import MarketEnvironment


def _path_rng(seed: int, stream: int) -> np.random.Generator:
    key = np.array([np.uint64(seed), np.uint64(stream)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _log_drift(env: MarketEnvironment, t: float, dt: float) -> float:
    """Integral of rho - r - ||theta||^2/2 over [t, t+dt] (exact for constants)."""
    theta2 = env.theta_norm ** 2
    return (env.rho.integral(t, t + dt) - env.r.integral(t, t + dt)
            - 0.5 * theta2 * dt)


def exact_step(y, t: float, dt: float, z, env: MarketEnvironment):
    """One exact lognormal step of the dual state.

    y' = y * exp((rho - r - ||theta||^2/2) dt - ||theta|| sqrt(dt) z)
    with the drift coefficients averaged over [t, t+dt] when time-varying.
    ``z`` is a standard normal draw (scalar or per-path array).
    """
    if dt < 0.0:
        raise ValueError("dt must be nonnegative")
    if dt == 0.0:
        return y
    drift = _log_drift(env, t, dt)
    vol = env.theta_norm * np.sqrt(dt)
    return y * np.exp(drift - vol * np.asarray(z))


@dataclass
class PathBundle:
    """Simulated dual-state paths on a common grid.

    times      : (n_times,) strictly increasing, within [0, T_bar]
    values     : (n_paths, n_times) positive path values
    increments : (n_paths, n_times-1, n) stored standard-normal draws
    seed       : base RNG seed; stream i drives path i
    """

    times: np.ndarray
    values: np.ndarray
    increments: np.ndarray
    seed: int
    streams: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("t,path_id,Y\n")
            for i in range(self.n_paths):
                for t, y in zip(self.times, self.values[i]):
                    f.write(f"{t:.10g},{i},{y:.10g}\n")


def simulate_paths(y0: float, grid, n_paths: int, seed: int,
                   env: MarketEnvironment, *, stream_offset: int = 0,
                   increments=None) -> PathBundle:
    """Exact dual-state trajectories on ``grid`` (grid[0] is the start time).

    Deterministic given (seed, stream_offset); pass ``increments`` of shape
    (n_paths, n_steps) to inject known draws (e.g. all zeros).
    """
    if y0 <= 0.0:
        raise ValueError("y0 must be positive")
    times = np.asarray(grid, dtype=float)
    if times.ndim != 1 or times.size < 1 or np.any(np.diff(times) <= 0):
        raise ValueError("grid must be a strictly increasing 1-D array")
    n_steps = times.size - 1

    if increments is None:
        increments = np.empty((n_paths, n_steps))
        for i in range(n_paths):
            increments[i] = _path_rng(seed, stream_offset + i).standard_normal(n_steps)
    else:
        increments = np.asarray(increments, dtype=float)
        if increments.shape != (n_paths, n_steps):
            raise ValueError("increments shape must be (n_paths, n_steps)")

    values = np.empty((n_paths, n_steps + 1))
    values[:, 0] = y0
    for m in range(n_steps):
        dt = times[m + 1] - times[m]
        values[:, m + 1] = exact_step(values[:, m], float(times[m]), float(dt),
                                      increments[:, m], env)
    return PathBundle(times=times, values=values, increments=increments,
                      seed=seed, streams=np.arange(stream_offset,
                                                   stream_offset + n_paths))


def reconstruct_from_prices(stock_log_increments: np.ndarray,
                            bank_log_increments: np.ndarray,
                            env: MarketEnvironment, y_tau: float) -> np.ndarray:
    """Rebuild the dual path from observed asset prices (constant coefficients).

    log Y(t) - log Y(tau) = (c/r) log(S0(t)/S0(tau))
                            - theta' sigma^{-1} (log S_i(t)/S_i(tau))_i
    with c = rho - r - ||theta||^2/2 + theta' sigma^{-1} (b_i - sum_j s_ij^2/2)_i,
    an algebraic identity on the shared Brownian noise.
    """
    if not env.has_constant_coefficients:
        raise ValueError("price reconstruction requires constant coefficients")
    inc = np.atleast_2d(np.asarray(stock_log_increments, dtype=float))
    bank = np.asarray(bank_log_increments, dtype=float)
    if inc.shape[0] != bank.size:
        raise ValueError("stock and bank increment lengths disagree")
    n = env.n_assets
    if inc.shape[1] != n:
        raise ValueError(f"expected {n} stocks, got {inc.shape[1]}")

    r = env.r.constant
    rho = env.rho.constant
    theta = env.theta
    sigma = env.sigma
    b = env.mu + r  # raw stock drifts
    conv = b - 0.5 * np.sum(sigma ** 2, axis=1)
    w = np.linalg.solve(sigma.T, theta)  # theta' sigma^{-1} as a row vector
    c = rho - r - 0.5 * env.theta_norm ** 2 + float(w @ conv)

    log_rel_stock = np.cumsum(inc, axis=0)
    log_rel_bank = np.cumsum(bank)
    log_y = np.log(y_tau) + (c / r) * log_rel_bank - log_rel_stock @ w
    return np.concatenate([[y_tau], np.exp(log_y)])


def stock_log_increments_from_noise(increments: np.ndarray, dt,
                                    env: MarketEnvironment) -> tuple[np.ndarray, np.ndarray]:
    """Synthesize (stock, bank) log-price increments from normal draws.

    ``increments`` has shape (n_steps, n); ``dt`` scalar or (n_steps,).
    Returns (stock_log_increments (n_steps, n), bank_log_increments (n_steps,)).
    """
    if not env.has_constant_coefficients:
        raise ValueError("constant coefficients required")
    inc = np.atleast_2d(np.asarray(increments, dtype=float))
    dt = np.broadcast_to(np.asarray(dt, dtype=float), (inc.shape[0],))
    r = env.r.constant
    sigma = env.sigma
    b = env.mu + r
    conv = b - 0.5 * np.sum(sigma ** 2, axis=1)
    dB = inc * np.sqrt(dt)[:, None]
    stock = conv[None, :] * dt[:, None] + dB @ sigma.T
    bank = r * dt
    return stock, bank
