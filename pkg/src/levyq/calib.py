"""Cross-sectional calibration on option chains.

The objective is a vega-weighted sum of squared pricing errors plus an
optional relative-entropy penalty that keeps the calibrated Levy measure close
to a prior. Both measures are discretized on a shared grid of jump sizes. The
minimizer is a plain Nelder-Mead simplex with log coordinates for parameters
that must stay positive, run from a grid of starting points.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .mc import McConfig, mc_price_model
from .models import (
    DiscreteLevyMeasure,
    DomainError,
    MarketEnv,
    MODEL_FIELDS,
    ModelParams,
    NumericalError,
    default_levy_grid,
    discretize_levy_measure,
    model_from_vector,
    model_vector,
)
from .pricing import CosConfig, FftConfig, cos_price, fft_price
from .specfun import norm_cdf

VEGA_FLOOR = 1e-8


class CalibrationError(RuntimeError):
    """Every start of a multistart calibration failed."""


@dataclass(frozen=True)
class OptionQuote:
    strike: float
    maturity: float
    mid: float
    bid: float | None = None
    ask: float | None = None
    weight: float | None = None

    def __post_init__(self):
        if not (self.strike > 0 and self.maturity > 0):
            raise DomainError("strike and maturity must be positive")
        if self.bid is not None and self.bid > self.mid:
            raise DomainError(f"bid {self.bid} above mid {self.mid}")
        if self.ask is not None and self.ask < self.mid:
            raise DomainError(f"ask {self.ask} below mid {self.mid}")
        if self.weight is not None and not self.weight >= 0:
            raise DomainError("weight override must be nonnegative")


@dataclass(frozen=True)
class OptionChain:
    quotes: tuple
    env: MarketEnv

    def __post_init__(self):
        object.__setattr__(self, "quotes", tuple(self.quotes))
        if not self.quotes:
            raise DomainError("option chain is empty")

    def __len__(self):
        return len(self.quotes)

    @property
    def strikes(self) -> np.ndarray:
        return np.array([q.strike for q in self.quotes])

    @property
    def maturities(self) -> np.ndarray:
        return np.array([q.maturity for q in self.quotes])

    @property
    def mids(self) -> np.ndarray:
        return np.array([q.mid for q in self.quotes])

    def noise_level(self) -> float | None:
        """Half the 2-norm of bid plus ask, when every quote carries both."""
        if any(q.bid is None or q.ask is None for q in self.quotes):
            return None
        return 0.5 * float(np.linalg.norm([q.bid + q.ask for q in self.quotes]))


@dataclass(frozen=True)
class CalibrationResult:
    params: ModelParams
    objective: float
    rmse: float
    rmse_w: float
    entropy: float
    alpha: float
    iterations: int
    start_id: int
    converged: bool


# ---------------------------------------------------------------------------
# weights and pricing errors

def vega(env: MarketEnv, K, T, sigma: float, floor: float = VEGA_FLOOR):
    """|K e^{-rT} N(d-) sqrt(T)|, floored so that 1/vega^2 stays finite."""
    K = np.asarray(K, dtype=float)
    T = np.asarray(T, dtype=float)
    if np.any(K <= 0) or np.any(T <= 0) or not sigma > 0:
        raise DomainError("vega needs K, T, sigma > 0")
    sq = sigma * np.sqrt(T)
    d_minus = (np.log(env.S0 / K) + (env.r - env.q - 0.5 * sigma * sigma) * T) / sq
    v = np.abs(K * np.exp(-env.r * T) * norm_cdf(d_minus) * np.sqrt(T))
    v = np.maximum(v, floor)
    return float(v) if v.ndim == 0 else v


def vega_weights(chain: OptionChain, sigma: float = 0.2) -> np.ndarray:
    """1/vega^2 per quote; explicit quote weights take precedence."""
    w = 1.0 / vega(chain.env, chain.strikes, chain.maturities, sigma) ** 2
    w = np.atleast_1d(w).astype(float)
    for i, q in enumerate(chain.quotes):
        if q.weight is not None:
            w[i] = q.weight
    return w


Pricer = Callable[[ModelParams, MarketEnv, np.ndarray, float], np.ndarray]


def make_pricer(method: str = "cos", cos_cfg: CosConfig = CosConfig(),
                fft_cfg: FftConfig = FftConfig(), mc_cfg: McConfig = McConfig()) -> Pricer:
    """A call pricer ``(model, env, strikes, T) -> premiums``."""
    if method == "cos":
        return lambda m, env, K, T: np.atleast_1d(cos_price(m, env, K, T, cos_cfg))
    if method == "fft":
        return lambda m, env, K, T: np.atleast_1d(fft_price(m, env, K, T, fft_cfg))
    if method == "mc":
        def mc(m, env, K, T):
            return np.array([p.premium for p in mc_price_model(m, env, np.atleast_1d(K), T, mc_cfg)])
        return mc
    raise DomainError(f"unknown pricer {method!r}")


def model_prices(model: ModelParams, chain: OptionChain, pricer: Pricer | None = None) -> np.ndarray:
    """Model premiums for every quote, one pricer call per maturity."""
    pricer = pricer or make_pricer()
    K = chain.strikes
    T = chain.maturities
    out = np.empty(len(chain))
    for t in np.unique(T):
        idx = np.flatnonzero(T == t)
        try:
            out[idx] = pricer(model, chain.env, K[idx], float(t))
        except (DomainError, NumericalError) as exc:
            raise type(exc)(f"pricing quotes T={t:g}, K={K[idx].tolist()}: {exc}") from exc
    return out


def weighted_sq_error(model: ModelParams, chain: OptionChain, weights=None,
                      pricer: Pricer | None = None) -> float:
    """sum_i w_i (market_i - model_i)^2; unit weights when none are given."""
    w = np.ones(len(chain)) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (len(chain),):
        raise DomainError("weights must match the chain length")
    diff = chain.mids - model_prices(model, chain, pricer)
    return float(np.sum(w * diff * diff))


def rmse(model: ModelParams, chain: OptionChain, pricer: Pricer | None = None) -> float:
    return math.sqrt(weighted_sq_error(model, chain, None, pricer) / len(chain))


# ---------------------------------------------------------------------------
# relative entropy

@dataclass(frozen=True)
class EntropyTerms:
    drift: float
    jump: float
    bracket: float

    @property
    def total(self) -> float:
        return self.drift + self.jump


def _check_pair(q: DiscreteLevyMeasure, p: DiscreteLevyMeasure) -> None:
    if q.grid.shape != p.grid.shape or not np.array_equal(q.grid, p.grid):
        raise DomainError("measures must share a grid")
    if not math.isclose(q.diffusion, p.diffusion, rel_tol=1e-12, abs_tol=0.0):
        raise DomainError("measures must share the diffusion coefficient")
    bad = (q.masses > 0) & (p.masses <= 0)
    if np.any(bad):
        raise DomainError(f"q not absolutely continuous w.r.t. p at x={q.grid[bad].tolist()}")


def jump_entropy(q, p) -> float:
    """sum_j [q_j ln(q_j/p_j) + p_j - q_j] on arrays of masses, 0 ln 0 = 0."""
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    pos = q > 0
    ratio = np.ones_like(q)
    ratio[pos] = q[pos] / p[pos]
    return float(np.sum(np.where(pos, q * np.log(ratio), 0.0) + p - q))


def entropy_terms(q: DiscreteLevyMeasure, p: DiscreteLevyMeasure, T: float) -> EntropyTerms:
    """Drift and jump parts of the entropy of q relative to p over horizon T.

    The drift part is present only with a diffusion component. The prior's
    drift excludes its compensated small jumps, b_P = gamma_P - sum_{|x|<=1} x p_k.
    """
    _check_pair(q, p)
    A = q.diffusion
    small = np.abs(p.grid) <= 1.0
    b_p = p.drift - float(np.sum(p.grid[small] * p.masses[small]))
    bracket = 0.5 * A + b_p + float(np.sum(np.expm1(q.grid) * q.masses))
    drift = T * bracket * bracket / (2.0 * A) if A > 0 else 0.0
    return EntropyTerms(drift, T * jump_entropy(q.masses, p.masses), bracket)


def relative_entropy(q: DiscreteLevyMeasure, p: DiscreteLevyMeasure, T: float) -> float:
    """Discretized relative entropy of q with respect to p, nonnegative."""
    return entropy_terms(q, p, T).total


def _entropy_measure(model: ModelParams, grid) -> DiscreteLevyMeasure:
    # a clocked VG is regularized through its VG component
    if model.kind == "vgsa":
        model = model.vg
    return discretize_levy_measure(model, grid)


# ---------------------------------------------------------------------------
# objective

@dataclass
class Objective:
    """J(model) = weighted squared error + alpha * entropy(model | prior)."""

    chain: OptionChain
    alpha: float = 0.0
    prior: ModelParams | None = None
    weights: np.ndarray | None = None
    pricer: Pricer | None = None
    grid: np.ndarray | None = None
    horizon: float | None = None
    _prior_measure: DiscreteLevyMeasure | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if not self.alpha >= 0:
            raise DomainError("alpha must be nonnegative")
        if self.alpha > 0 and self.prior is None:
            raise DomainError("a prior model is needed when alpha > 0")
        if self.grid is None:
            self.grid = default_levy_grid()
        if self.horizon is None:
            self.horizon = float(np.max(self.chain.maturities))
        if self.prior is not None:
            self._prior_measure = _entropy_measure(self.prior, self.grid)

    def entropy(self, model: ModelParams) -> float:
        if self.prior is None:
            return 0.0
        return relative_entropy(_entropy_measure(model, self.grid), self._prior_measure, self.horizon)

    def parts(self, model: ModelParams) -> tuple[float, float]:
        """(weighted squared error, entropy against the prior or 0 without one)."""
        return weighted_sq_error(model, self.chain, self.weights, self.pricer), self.entropy(model)

    def __call__(self, model: ModelParams) -> float:
        err = weighted_sq_error(model, self.chain, self.weights, self.pricer)
        return err + self.alpha * self.entropy(model) if self.alpha > 0 else err


def rmemc_objective(model: ModelParams, chain: OptionChain, prior_model: ModelParams | None,
                    alpha: float, grid=None, weights=None, pricer: Pricer | None = None) -> float:
    return Objective(chain, alpha, prior_model, weights, pricer, grid)(model)


def choose_alpha(chain: OptionChain, scale_A: float, sigma: float = 0.2) -> float:
    """scale_A times the median vega of the chain."""
    if scale_A < 0:
        raise DomainError("scale_A must be nonnegative")
    if scale_A == 0:
        return 0.0
    v = vega(chain.env, chain.strikes, chain.maturities, sigma)
    return float(scale_A * np.median(v))


# ---------------------------------------------------------------------------
# Nelder-Mead

@dataclass(frozen=True)
class NelderMeadResult:
    x: np.ndarray
    fun: float
    iterations: int
    evaluations: int
    converged: bool
    trace: tuple


def nelder_mead(f: Callable[[np.ndarray], float], x0, positive=None, tol_x: float = 1e-5,
                tol_f: float = math.inf, max_iters: int = 1000, max_evals: int | None = None,
                initial_step: float = 0.05) -> NelderMeadResult:
    """Minimize f with the Nelder-Mead simplex (reflect 1, expand 2, contract 1/2, shrink 1/2).

    Coordinates flagged in ``positive`` are searched in log space. The run
    stops when every vertex lies within ``tol_x`` of the best one (in search
    coordinates) and the objective spread is at most ``tol_f``. Non-finite
    objective values are treated as +inf so infeasible regions are rejected.
    """
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    mask = np.zeros(n, bool) if positive is None else np.asarray(positive, bool)
    if np.any(x0[mask] <= 0):
        raise DomainError("positive coordinates need a positive start")
    max_evals = max_evals or 200 * n * max(max_iters // 200, 1)

    def to_x(z):
        x = z.copy()
        x[mask] = np.exp(z[mask])
        return x

    evals = 0

    def fz(z):
        nonlocal evals
        evals += 1
        try:
            v = float(f(to_x(z)))
        except (DomainError, NumericalError, OverflowError, ZeroDivisionError):
            return math.inf
        return v if math.isfinite(v) else math.inf

    z0 = x0.copy()
    z0[mask] = np.log(x0[mask])
    f0 = fz(z0)
    if not math.isfinite(f0):
        raise DomainError("objective is not finite at the starting point")

    simplex = [z0]
    for i in range(n):
        z = z0.copy()
        z[i] = z[i] * (1 + initial_step) if z[i] != 0 else 0.00025
        simplex.append(z)
    simplex = np.array(simplex)
    fs = np.array([f0] + [fz(z) for z in simplex[1:]])

    trace = []
    it = 0
    converged = False
    while it < max_iters and evals < max_evals:
        order = np.argsort(fs, kind="stable")
        simplex, fs = simplex[order], fs[order]
        trace.append(float(fs[0]))
        spread_x = float(np.max(np.abs(simplex[1:] - simplex[0])))
        spread_f = float(fs[-1] - fs[0]) if math.isfinite(fs[-1]) else math.inf
        if spread_x <= tol_x and spread_f <= tol_f:
            converged = True
            break
        it += 1
        centroid = simplex[:-1].mean(axis=0)
        worst = simplex[-1]
        zr = centroid + (centroid - worst)
        fr = fz(zr)
        if fr < fs[0]:
            ze = centroid + 2.0 * (centroid - worst)
            fe = fz(ze)
            if fe < fr:
                simplex[-1], fs[-1] = ze, fe
            else:
                simplex[-1], fs[-1] = zr, fr
            continue
        if fr < fs[-2]:
            simplex[-1], fs[-1] = zr, fr
            continue
        if fr < fs[-1]:
            zc = centroid + 0.5 * (zr - centroid)
            fc = fz(zc)
            if fc <= fr:
                simplex[-1], fs[-1] = zc, fc
                continue
        else:
            zc = centroid + 0.5 * (worst - centroid)
            fc = fz(zc)
            if fc < fs[-1]:
                simplex[-1], fs[-1] = zc, fc
                continue
        simplex[1:] = simplex[0] + 0.5 * (simplex[1:] - simplex[0])
        fs[1:] = [fz(z) for z in simplex[1:]]

    best = int(np.argmin(fs))
    return NelderMeadResult(to_x(simplex[best]), float(fs[best]), it, evals, converged, tuple(trace))


# ---------------------------------------------------------------------------
# multistart

POSITIVE_FIELDS = {
    "bs": (True,),
    "vg": (True, True, False),
    "vgsa": (True, True, False, True, True, True),
    "cgmy": (True, True, True, True),
}

DEFAULT_LEVELS = {
    "bs": ((0.1, 0.25, 0.4),),
    "vg": ((0.1, 0.25, 0.4), (0.05, 0.2, 0.5), (-0.2, 0.0, 0.2)),
    "cgmy": ((0.5, 2.0, 8.0), (2.0, 5.0, 10.0), (2.0, 5.0, 10.0), (0.3, 0.8, 1.3)),
    "vgsa": ((0.1, 0.25, 0.4), (0.05, 0.2, 0.5), (-0.2, 0.0, 0.2), (1.0,), (1.0,), (0.5,)),
}


def start_grid(kind: str, levels: Sequence[Sequence[float]] | None = None) -> list[ModelParams]:
    """Cartesian grid of starting models, in lexicographic order."""
    levels = levels if levels is not None else DEFAULT_LEVELS[kind]
    if len(levels) != len(MODEL_FIELDS[kind]):
        raise DomainError(f"{kind} needs {len(MODEL_FIELDS[kind])} level lists")
    return [model_from_vector(kind, v) for v in itertools.product(*levels)]


def calibrate_from(objective: Objective, start: ModelParams, start_id: int = 0,
                   tol_x: float = 1e-5, max_iters: int = 1000) -> CalibrationResult:
    kind = start.kind

    def f(x):
        return objective(model_from_vector(kind, x))

    nm = nelder_mead(f, model_vector(start), POSITIVE_FIELDS[kind], tol_x=tol_x, max_iters=max_iters)
    model = model_from_vector(kind, nm.x)
    err, ent = objective.parts(model)
    value = err + objective.alpha * ent if objective.alpha > 0 else err
    return CalibrationResult(
        params=model, objective=value, rmse=rmse(model, objective.chain, objective.pricer),
        rmse_w=math.sqrt(err), entropy=ent, alpha=objective.alpha, iterations=nm.iterations,
        start_id=start_id, converged=nm.converged)


def multistart_calibrate(chain: OptionChain, starts: Sequence[ModelParams], alpha: float = 0.0,
                         prior: ModelParams | None = None, weights=None,
                         pricer: Pricer | None = None, grid=None, tol_x: float = 1e-5,
                         max_iters: int = 1000, threads: int = 1) -> CalibrationResult:
    """Nelder-Mead from every start; best objective wins.

    Ties go to the lower entropy term, then to the lower start index, so the
    outcome does not depend on scheduling.
    """
    if not starts:
        raise DomainError("start grid is empty")
    objective = Objective(chain, alpha, prior, weights, pricer, grid)

    def run(item):
        i, s = item
        try:
            return calibrate_from(objective, s, i, tol_x, max_iters)
        except (DomainError, NumericalError) as exc:
            return exc

    items = list(enumerate(starts))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(run, items))
    else:
        results = [run(it) for it in items]
    ok = [r for r in results if isinstance(r, CalibrationResult)]
    if not ok:
        detail = "; ".join(f"start {i}: {r}" for i, r in enumerate(results))
        raise CalibrationError(f"all {len(starts)} starts failed: {detail}")
    return min(ok, key=lambda r: (r.objective, r.entropy, r.start_id))
