"""Monte Carlo path generation for VG, VGSA and CGMY, and MC option prices.

Random numbers come from numpy's Philox counter-based generator. Paths are
produced in fixed-size blocks; block ``b`` draws from the substream
``SeedSequence(seed, spawn_key=(b,))``, so results do not depend on how
blocks are spread over worker threads.

With antithetic sampling enabled, paths ``2i`` and ``2i + 1`` share their
gamma/uniform draws and see opposite Brownian draws.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special

from .models import (CGMY, VG, VGSA, DomainError, MarketEnv, log_characteristic_function,
                     martingale_correction)
from .specfun import parabolic_cylinder_d

BLOCK_PATHS = 1024
JUMPS_PER_BLOCK = 2_000_000


class PathBudgetError(RuntimeError):
    """Expected CGMY jump count per path exceeds the configured cap."""


@dataclass(frozen=True)
class McConfig:
    num_paths: int = 10_000
    steps: int = 100
    seed: int = 0
    antithetic: bool = True
    cgmy_epsilon: float = 1e-4
    max_jumps_per_path: float = 1e6
    threads: int | None = None

    def __post_init__(self):
        if self.num_paths < 2:
            raise DomainError("num_paths must be at least 2")
        if self.antithetic and self.num_paths % 2:
            raise DomainError("antithetic sampling needs an even num_paths")
        if self.steps < 1:
            raise DomainError("steps must be at least 1")
        if not 0 < self.cgmy_epsilon <= 1e-2:
            raise DomainError("cgmy_epsilon must lie in (0, 1e-2]")


@dataclass(frozen=True)
class McPrice:
    premium: float
    standard_error: float
    num_paths_effective: int


@dataclass(frozen=True)
class PricePath:
    times: np.ndarray
    log_prices: np.ndarray


@dataclass
class PathSet:
    """Simulated log-price paths, one row per path.

    When simulated with ``terminal_only`` the rows hold ``(ln S0, ln S_T)``.
    """

    times: np.ndarray
    log_prices: np.ndarray
    antithetic: bool
    diagnostics: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.log_prices.shape[0]

    def __getitem__(self, i: int) -> PricePath:
        return PricePath(self.times, self.log_prices[i])

    @property
    def terminal(self) -> np.ndarray:
        return self.log_prices[:, -1]


def default_threads() -> int:
    env = os.environ.get("LEVYQ_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(block,))))


def _run_blocks(cfg: McConfig, block_paths: int, make_block, terminal_only: bool):
    """Run ``make_block(rng, n_base)`` over all blocks; returns increments stacked in path order."""
    per = block_paths // 2 if cfg.antithetic else block_paths
    total_base = cfg.num_paths // 2 if cfg.antithetic else cfg.num_paths
    sizes = [min(per, total_base - s) for s in range(0, total_base, per)]

    def work(b):
        rng = _block_rng(cfg.seed, b)
        base, anti, diag = make_block(rng, sizes[b])
        if terminal_only:
            base = base.sum(axis=1, keepdims=True)
            anti = None if anti is None else anti.sum(axis=1, keepdims=True)
        if anti is not None:
            out = np.empty((2 * base.shape[0], base.shape[1]))
            out[0::2], out[1::2] = base, anti
            base = out
        return base, diag

    threads = cfg.threads or default_threads()
    if threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, range(len(sizes))))
    else:
        results = [work(b) for b in range(len(sizes))]
    incs = np.concatenate([r[0] for r in results], axis=0)
    diag: dict = {}
    for _, d in results:
        for k, v in d.items():
            diag[k] = diag.get(k, 0) + v
    return incs, diag


def _assemble(env: MarketEnv, T: float, cfg: McConfig, incs: np.ndarray, diag: dict,
              terminal_only: bool) -> PathSet:
    x0 = math.log(env.S0)
    if terminal_only:
        times = np.array([0.0, T])
        lp = np.column_stack([np.full(incs.shape[0], x0), x0 + incs[:, 0]])
    else:
        times = np.linspace(0.0, T, cfg.steps + 1)
        lp = np.empty((incs.shape[0], cfg.steps + 1))
        lp[:, 0] = x0
        np.cumsum(incs, axis=1, out=lp[:, 1:])
        lp[:, 1:] += x0
    return PathSet(times, lp, cfg.antithetic, diag)


# ---------------------------------------------------------------------------
# VG


def simulate_vg(env: MarketEnv, params: VG, T: float, cfg: McConfig = McConfig(),
                terminal_only: bool = False) -> PathSet:
    """Gamma-subordinated Brownian motion with drift ``(r - q + w) h`` per step."""
    h = T / cfg.steps
    drift = (env.r - env.q + martingale_correction(params)) * h
    shape, scale = h / params.nu, params.nu
    th, sig = params.theta, params.sigma

    def block(rng, n):
        g = rng.gamma(shape, scale, size=(n, cfg.steps))
        z = rng.standard_normal((n, cfg.steps))
        core = drift + th * g
        noise = sig * np.sqrt(g) * z
        return core + noise, (core - noise if cfg.antithetic else None), {}

    incs, diag = _run_blocks(cfg, BLOCK_PATHS, block, terminal_only)
    return _assemble(env, T, cfg, incs, diag, terminal_only)


# ---------------------------------------------------------------------------
# VGSA


def vgsa_drift_corrections(params: VGSA, T: float, steps: int) -> np.ndarray:
    """Per-step corrections ``ln phi_{t_{j-1}} - ln phi_{t_j}`` at ``u = -i``."""
    t = np.linspace(0.0, T, steps + 1)
    logphi = np.zeros(steps + 1)
    for j in range(1, steps + 1):
        logphi[j] = log_characteristic_function(params, -1j, t[j]).real
    return logphi[:-1] - logphi[1:]


def simulate_vgsa(env: MarketEnv, params: VGSA, T: float, cfg: McConfig = McConfig(),
                  terminal_only: bool = False) -> PathSet:
    """VG increments on a CIR clock discretised by a Milstein step.

    The clock rate is floored at zero after each step; floor events are
    counted in ``diagnostics['cir_floor_events']``.
    """
    martingale_correction(params.vg)
    h = T / cfg.steps
    dw = vgsa_drift_corrections(params, T, cfg.steps)
    kappa, eta, lam, nu = params.kappa, params.eta, params.lam, params.nu
    th, sig = params.theta, params.sigma
    base_drift = (env.r - env.q) * h

    def block(rng, n):
        y = np.full(n, params.y0)
        out = np.empty((n, cfg.steps))
        anti = np.empty((n, cfg.steps)) if cfg.antithetic else None
        floors = 0
        for j in range(cfg.steps):
            zc = rng.standard_normal(n)
            y_new = (y + kappa * (eta - y) * h + lam * np.sqrt(y * h) * zc
                     + 0.25 * lam**2 * h * (zc**2 - 1.0))
            neg = y_new < 0
            floors += int(neg.sum())
            y_new[neg] = 0.0
            tau = 0.5 * h * (y + y_new)
            g = rng.gamma(tau / nu, nu)
            z = rng.standard_normal(n)
            core = base_drift + dw[j] + th * g
            noise = sig * np.sqrt(g) * z
            out[:, j] = core + noise
            if anti is not None:
                anti[:, j] = core - noise
            y = y_new
        return out, anti, {"cir_floor_events": floors}

    incs, diag = _run_blocks(cfg, BLOCK_PATHS, block, terminal_only)
    return _assemble(env, T, cfg, incs, diag, terminal_only)


# ---------------------------------------------------------------------------
# CGMY


def _laplace_integral(Y: float, a, lam):
    # int_0^inf x^{Y-1} exp(-a x - lam x^2) dx in parabolic cylinder form
    return ((2.0 * lam) ** (-0.5 * Y) * special.gamma(Y) * np.exp(a**2 / (8.0 * lam))
            * parabolic_cylinder_d(-Y, a / np.sqrt(2.0 * lam)))


def cgmy_acceptance(y, Y: float, B: float, A: float = 0.0, return_clamps: bool = False):
    """Rosinski thinning probability turning the stable subordinator into the CGMY one.

    ``h(y) = exp(-(B^2 - A^2) y / 2) E[exp(-y Z)]`` with
    ``Z = (B^2/2) gamma_{Y/2} / gamma_{1/2}``, whose Laplace transform is
    ``Gamma((Y+1)/2) / (Gamma(Y) sqrt(pi)) 2^Y (B^2 y/2)^{Y/2} I(Y, B^2 y, B^2 y/2)``.
    Values are clamped to [0, 1]; where the exponential prefactor alone is
    below ``e^-40`` the result is 0.
    """
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0) or not 0 < Y < 2 or not B > 0 or abs(A) >= B:
        raise DomainError("cgmy_acceptance needs y > 0, 0 < Y < 2 and B > |A|")
    expo = 0.5 * (B**2 - A**2) * y
    out = np.zeros_like(y)
    live = expo < 40.0
    yl = y[live]
    s = 0.5 * B**2 * yl
    laplace = (special.gamma(0.5 * (Y + 1.0)) / (special.gamma(Y) * math.sqrt(math.pi))
               * 2.0**Y * s ** (0.5 * Y) * _laplace_integral(Y, B**2 * yl, s))
    out[live] = np.exp(-expo[live]) * laplace
    clamps = int(np.count_nonzero((out < 0) | (out > 1)))
    out = np.clip(out, 0.0, 1.0)
    out = out[()] if out.ndim == 0 else out
    return (out, clamps) if return_clamps else out


def cgmy_subordinator_constant(params: CGMY) -> float:
    """Scale K of the stable measure K y^{-1-Y/2} dy behind the CGMY subordinator.

    Chosen so that Brownian motion run on the subordinator has Levy density
    ``C |x|^{-1-Y}`` when the tempering vanishes.
    """
    Y = params.Y
    return params.C * math.sqrt(math.pi) * 2.0 ** (-0.5 * Y) / special.gamma(0.5 * (Y + 1.0))


class _AcceptanceTable:
    """Monotone lookup bracketing h(y); exact evaluation only inside the bracket."""

    def __init__(self, Y, B, A, eps, n=4096):
        self.Y, self.B, self.A = Y, B, A
        self.y_cut = 80.0 / (B**2 - A**2)
        self.grid = np.geomspace(eps, max(self.y_cut, 2 * eps), n)
        hv, self.clamps = cgmy_acceptance(self.grid, Y, B, A, return_clamps=True)
        self.values = np.minimum.accumulate(hv)

    def accept(self, y, u):
        idx = np.searchsorted(self.grid, y, side="right")
        inside = idx < self.grid.size
        i = np.clip(idx, 1, self.grid.size - 1)
        upper = self.values[i - 1]
        lower = np.where(inside, self.values[i], 0.0)
        acc = u < lower
        todo = inside & (u >= lower) & (u < upper)
        clamps = 0
        if np.any(todo):
            exact, clamps = cgmy_acceptance(y[todo], self.Y, self.B, self.A, return_clamps=True)
            acc[todo] = u[todo] < exact
        return acc, clamps


def cgmy_small_jump_drift(params: CGMY, eps: float) -> float:
    """Mean rate of subordinator jumps below ``eps`` after thinning."""
    Y = params.Y
    A, B = 0.5 * (params.G - params.M), 0.5 * (params.G + params.M)
    K = cgmy_subordinator_constant(params)
    # substitute y = eps * v^{2/(2-Y)} to remove the endpoint singularity
    p = 2.0 / (2.0 - Y)
    f = lambda v: float(cgmy_acceptance(eps * v**p, Y, B, A)) if v > 0 else 1.0
    val, _ = integrate.quad(f, 0.0, 1.0, epsabs=1e-13, epsrel=1e-11)
    # int_0^eps y^{-Y/2} h(y) dy = eps^{1-Y/2} p int_0^1 h(eps v^p) dv
    return K * eps ** (1.0 - 0.5 * Y) * p * val


def simulate_cgmy(env: MarketEnv, params: CGMY, T: float, cfg: McConfig = McConfig(),
                  terminal_only: bool = False) -> PathSet:
    """Brownian motion with drift ``A`` run on a thinned stable subordinator.

    Jumps of the subordinator above ``eps`` arrive at rate ``2K/(Y eps^{Y/2})``
    with sizes ``eps (1-U)^{-2/Y}`` and are kept with probability
    :func:`cgmy_acceptance`; jumps below ``eps`` contribute their thinned mean
    as a drift. The log price carries the CGMY martingale correction.
    """
    Y = params.Y
    if not 0 < Y < 2:
        raise DomainError("CGMY simulation needs 0 < Y < 2")
    eps = cfg.cgmy_epsilon
    A, B = 0.5 * (params.G - params.M), 0.5 * (params.G + params.M)
    K = cgmy_subordinator_constant(params)
    rate = K * 2.0 / (Y * eps ** (0.5 * Y))
    if rate * T > cfg.max_jumps_per_path:
        raise PathBudgetError(
            f"expected {rate * T:.3g} jumps per path exceeds the cap {cfg.max_jumps_per_path:.3g}")
    h = T / cfg.steps
    sub_drift = cgmy_small_jump_drift(params, eps) * h
    drift = (env.r - env.q + martingale_correction(params)) * h
    table = _AcceptanceTable(Y, B, A, eps)
    block_paths = int(min(BLOCK_PATHS, max(2, JUMPS_PER_BLOCK // max(1.0, rate * T))))
    block_paths -= block_paths % 2

    def block(rng, n):
        counts = rng.poisson(rate * h, size=(n, cfg.steps))
        total = int(counts.sum())
        u2 = rng.random(total)
        u3 = rng.random(total)
        sizes = eps * (1.0 - u2) ** (-2.0 / Y)
        acc, clamps = table.accept(sizes, u3)
        owner = np.repeat(np.arange(n * cfg.steps), counts.ravel())
        dH = np.bincount(owner[acc], weights=sizes[acc], minlength=n * cfg.steps)
        dH = dH.reshape(n, cfg.steps) + sub_drift
        z = rng.standard_normal((n, cfg.steps))
        core = drift + A * dH
        noise = np.sqrt(dH) * z
        diag = {"jump_proposals": total, "jumps_accepted": int(acc.sum()),
                "acceptance_clamps": clamps}
        return core + noise, (core - noise if cfg.antithetic else None), diag

    incs, diag = _run_blocks(cfg, block_paths, block, terminal_only)
    diag["acceptance_clamps"] = diag.get("acceptance_clamps", 0) + table.clamps
    return _assemble(env, T, cfg, incs, diag, terminal_only)


def simulate(model, env: MarketEnv, T: float, cfg: McConfig = McConfig(),
             terminal_only: bool = False) -> PathSet:
    if isinstance(model, VGSA):
        return simulate_vgsa(env, model, T, cfg, terminal_only)
    if isinstance(model, VG):
        return simulate_vg(env, model, T, cfg, terminal_only)
    if isinstance(model, CGMY):
        return simulate_cgmy(env, model, T, cfg, terminal_only)
    raise DomainError(f"no simulator for {model.kind}")


# ---------------------------------------------------------------------------
# pricing


def mc_price(paths: PathSet, payoff: str, K, env: MarketEnv, T: float,
             control: str = "none"):
    """Discounted mean payoff with its standard error.

    Antithetic partners are averaged before the variance is taken, so the
    effective sample size is the number of pairs.

    ``control="parity"`` uses the terminal price as a control variate with
    unit coefficient: a call is estimated as the simulated put plus the known
    forward. The payoff is then bounded by K, so the standard error stays
    meaningful for heavy right tails where the plain sample variance of
    ``max(S_T - K, 0)`` is dominated by rare paths.
    """
    if control not in ("none", "parity"):
        raise DomainError("control must be 'none' or 'parity'")
    if len(paths) < 2:
        raise DomainError("need at least two paths")
    ST = np.exp(paths.terminal)
    disc = math.exp(-env.r * T)
    strikes = np.atleast_1d(np.asarray(K, dtype=float))
    out = []
    for k in strikes:
        if payoff == "call" and control == "parity":
            v = np.maximum(k - ST, 0.0) + (env.S0 * math.exp(-env.q * T) - k * disc) / disc
        elif payoff == "call":
            v = np.maximum(ST - k, 0.0)
        elif payoff == "put":
            v = np.maximum(k - ST, 0.0)
        else:
            raise DomainError("payoff must be 'call' or 'put'")
        v = disc * v
        if paths.antithetic:
            v = 0.5 * (v[0::2] + v[1::2])
        n = v.size
        se = float(np.std(v, ddof=1) / math.sqrt(n))
        out.append(McPrice(float(np.mean(v)), se, n))
    return out[0] if np.ndim(K) == 0 else out


def mc_price_model(model, env: MarketEnv, K, T: float, cfg: McConfig = McConfig(),
                   payoff: str = "call", control: str = "none"):
    """Simulate terminal values only and price."""
    return mc_price(simulate(model, env, T, cfg, terminal_only=True), payoff, K, env, T,
                    control)
