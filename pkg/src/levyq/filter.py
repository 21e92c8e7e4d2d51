"""Time-series estimation: VG densities, an EKF-guided particle filter for VGSA.

The hidden state is the arrival rate ``x`` of the CIR clock. Each particle is
moved by one extended Kalman filter step, which serves as the importance
proposal, and is weighted by the VG density of the observed log return
conditional on the clock increment ``dt * x``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .calib import nelder_mead, NelderMeadResult
from .models import VG, VGSA, DomainError, MarketEnv, MODEL_FIELDS, model_from_vector, model_vector
from .specfun import log_bessel_k

STATE_FLOOR = 1e-10
P0 = 1e-6
X0 = 1.0
LIKELIHOOD_FLOOR = 1e-300
_LOG_2PI = math.log(2.0 * math.pi)


class DegenerateWeightsError(ArithmeticError):
    """All particle weights are zero."""


@dataclass(frozen=True)
class LogReturnSeries:
    log_prices: np.ndarray
    dt: float = 1.0 / 252.0

    def __post_init__(self):
        z = np.asarray(self.log_prices, dtype=float)
        if z.ndim != 1 or z.size < 3:
            raise DomainError("need at least three log prices (two returns)")
        if not np.all(np.isfinite(z)):
            raise DomainError("log prices must be finite")
        if not self.dt > 0:
            raise DomainError("dt must be positive")
        object.__setattr__(self, "log_prices", z)

    @property
    def returns(self) -> np.ndarray:
        return np.diff(self.log_prices)

    @classmethod
    def from_prices(cls, prices, dt: float = 1.0 / 252.0) -> "LogReturnSeries":
        p = np.asarray(prices, dtype=float)
        if np.any(~(p > 0)):
            raise DomainError("prices must be positive")
        return cls(np.log(p), dt)


@dataclass
class ParticlePopulation:
    states: np.ndarray
    weights: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.states = np.maximum(np.asarray(self.states, dtype=float), STATE_FLOOR)
        self.weights = np.asarray(self.weights, dtype=float)
        self.variances = np.asarray(self.variances, dtype=float)
        if not (self.states.shape == self.weights.shape == self.variances.shape):
            raise DomainError("states, weights and variances must have equal shapes")
        if np.any(~np.isfinite(self.weights)) or np.any(self.weights < 0):
            raise DomainError("weights must be finite and nonnegative")
        if np.any(self.variances < 0):
            raise DomainError("variances must be nonnegative")


@dataclass(frozen=True)
class FilterOutput:
    nll: float
    state_estimates: np.ndarray
    prediction_errors: np.ndarray
    error_variances: np.ndarray
    degenerate_steps: int = 0


@dataclass(frozen=True)
class PfConfig:
    """``resolution`` is the width of the cell a log return is known to lie in;
    0 means exact observations."""

    n_particles: int = 100
    seed: int = 0
    resolution: float = 1e-8

    def __post_init__(self):
        if self.n_particles < 1:
            raise DomainError("need at least one particle")
        if not self.resolution >= 0:
            raise DomainError("resolution must be nonnegative")


def _drift(env: MarketEnv | None, mu: float | None) -> float:
    if mu is not None:
        return float(mu)
    return env.r - env.q if env is not None else 0.0


def _vg_parts(params) -> tuple[float, float, float]:
    s, n, t = params.sigma, params.nu, params.theta
    if not (s > 0 and n > 0):
        raise DomainError("sigma and nu must be positive")
    arg = 1.0 - t * n - 0.5 * s * s * n
    if not arg > 0:
        raise DomainError("1 - theta*nu - sigma^2*nu/2 must be positive")
    return s, n, t


def _log_vg_kernel(x, shape_time, sigma: float, nu: float, theta: float):
    """Log density of theta*g + sigma*sqrt(g)*W at x, g ~ Gamma(shape_time/nu, nu)."""
    x = np.asarray(x, dtype=float)
    shape_time = np.asarray(shape_time, dtype=float)
    a = shape_time / nu
    c = 2.0 * sigma * sigma / nu + theta * theta
    ax = np.maximum(np.abs(x), 1e-300)
    log_pow = (0.5 * a - 0.25) * (2.0 * np.log(ax) - math.log(c))
    log_k = log_bessel_k(a - 0.5, ax * math.sqrt(c) / (sigma * sigma))
    return (math.log(2.0) + theta * x / (sigma * sigma) - a * math.log(nu) - 0.5 * _LOG_2PI
            - math.log(sigma) - special.gammaln(a) + log_pow + log_k)


def log_vg_density(z, h: float, params, env: MarketEnv | None = None, mu: float | None = None):
    """Log density of a VG log return over a step of length h."""
    if not h > 0:
        raise DomainError("h must be positive")
    s, n, t = _vg_parts(params)
    xh = np.asarray(z, dtype=float) - _drift(env, mu) * h - (h / n) * math.log(1.0 - t * n - 0.5 * s * s * n)
    return _log_vg_kernel(xh, h, s, n, t)


def vg_density(z, h: float, params, env: MarketEnv | None = None, mu: float | None = None,
               return_underflow: bool = False):
    """Density of a VG log return z over a step of length h.

    The drift is ``mu`` when given, otherwise ``r - q`` from ``env``. Values that
    underflow are returned as 0; ``return_underflow`` adds a boolean mask.
    """
    lv = log_vg_density(z, h, params, env, mu)
    out = np.exp(lv)
    if return_underflow:
        return out, (out == 0.0) & np.isfinite(lv)
    return out


def log_vgsa_conditional_density(z, h_star, params, h: float, env: MarketEnv | None = None,
                                 mu: float | None = None):
    """Log density of a log return over a calendar step h given clock increment h_star.

    The drift and martingale shift use the calendar step; the gamma shape and
    Bessel order use the clock increment.
    """
    h_star = np.asarray(h_star, dtype=float)
    if np.any(~(h_star > 0)) or not h > 0:
        raise DomainError("h and h_star must be positive")
    s, n, t = _vg_parts(params)
    xh = np.asarray(z, dtype=float) - _drift(env, mu) * h - (h / n) * math.log(1.0 - t * n - 0.5 * s * s * n)
    return _log_vg_kernel(xh, h_star, s, n, t)


def vgsa_conditional_density(z, h_star, params, h: float, env: MarketEnv | None = None,
                             mu: float | None = None):
    return np.exp(log_vgsa_conditional_density(z, h_star, params, h, env, mu))


_CELL_SWITCH = 16.0


def log_observation_density(z, h_star, params, h: float, resolution: float,
                            env: MarketEnv | None = None, mu: float | None = None):
    """Conditional log density averaged over a cell of width ``resolution`` around z.

    For clock shapes below 1/2 the density has an integrable pole
    ``C |x|^(2a-1)`` at zero shifted return, and a path whose clock barely
    moved puts the observation right on it. Near the pole the pointwise value
    is replaced by the exact cell average of the power law; elsewhere the cell
    average equals the pointwise density to well within the switch tolerance.
    """
    pointwise = log_vgsa_conditional_density(z, h_star, params, h, env, mu)
    if resolution == 0.0:
        return pointwise
    s, n, t = _vg_parts(params)
    h_star = np.broadcast_to(np.asarray(h_star, dtype=float), np.shape(pointwise))
    x = np.asarray(z, dtype=float) - _drift(env, mu) * h - (h / n) * math.log(1.0 - t * n - 0.5 * s * s * n)
    x = np.broadcast_to(x, np.shape(pointwise))
    a = h_star / n
    near = (a < 0.5) & (np.abs(x) < _CELL_SWITCH * resolution)
    if not np.any(near):
        return pointwise
    an = a[near]
    xn = x[near]
    c = 2.0 * s * s / n + t * t
    log_c0 = (math.log(2.0) - an * math.log(n) - 0.5 * _LOG_2PI - math.log(s) - special.gammaln(an)
              - (0.5 * an - 0.25) * math.log(c) + np.log(0.5 * special.gamma(0.5 - an))
              + (0.5 - an) * math.log(2.0 * s * s / math.sqrt(c)))
    lo = np.abs(xn - 0.5 * resolution)
    hi = np.abs(xn + 0.5 * resolution)
    small = np.minimum(lo, hi)
    big = np.maximum(lo, hi)
    straddle = np.abs(xn) <= 0.5 * resolution
    p = 2.0 * an
    with np.errstate(divide="ignore"):
        log_small = np.log(small)
    log_big = np.log(big)
    # |u|^p + |l|^p when the cell holds the pole, |u|^p - |l|^p otherwise
    ratio = np.exp(p * (log_small - log_big))
    log_mass = p * log_big + np.log(np.where(straddle, 1.0 + ratio, -np.expm1(p * (log_small - log_big))))
    out = np.array(pointwise, dtype=float, copy=True)
    out[near] = log_c0 + log_mass - np.log(p) - math.log(resolution)
    return out


# ---------------------------------------------------------------------------
# EKF proposal

@dataclass(frozen=True)
class EkfStep:
    x_post: np.ndarray
    P_post: np.ndarray
    x_prior: np.ndarray
    P_prior: np.ndarray
    gain: np.ndarray


def ekf_step(x_prev, P_prev, z, params: VGSA, dt: float, env: MarketEnv | None = None,
             mu: float | None = None) -> EkfStep:
    """One prediction and measurement update for the arrival rate.

    Transition x' = x + kappa (eta - x) dt + lam sqrt(x dt) w, observation
    z = (mu + omega + theta x) dt + sqrt((theta^2 nu + sigma^2) x dt) u.
    Works elementwise on arrays of particles.
    """
    x = np.maximum(np.asarray(x_prev, dtype=float), STATE_FLOOR)
    P = np.asarray(P_prev, dtype=float)
    s, n, t = _vg_parts(params)
    omega = math.log(1.0 - t * n - 0.5 * s * s * n) / n
    k, eta, lam = params.kappa, params.eta, params.lam
    A = 1.0 - k * dt
    H = t * dt
    x_prior = np.maximum(x + k * (eta - x) * dt, STATE_FLOOR)
    W = lam * np.sqrt(x * dt)
    P_prior = A * P * A + W * W
    U = math.sqrt(t * t * n + s * s) * np.sqrt(x_prior * dt)
    denom = H * P_prior * H + U * U
    gain = np.divide(P_prior * H, denom, out=np.zeros_like(P_prior), where=denom > 0)
    innovation = z - (_drift(env, mu) + omega + t * x_prior) * dt
    x_post = np.maximum(x_prior + gain * innovation, STATE_FLOOR)
    P_post = (1.0 - gain * H) * P_prior
    return EkfStep(x_post, P_post, x_prior, P_prior, gain)


# ---------------------------------------------------------------------------
# resampling

def resample_indices(weights, uniform_draws, n_out: int | None = None) -> np.ndarray:
    """Indices picked by systematic (one draw) or stratified (one draw per slot) resampling.

    Slot j takes the first particle whose cumulative weight reaches (u_j + j)/n.
    """
    w = np.asarray(weights, dtype=float)
    total = float(np.sum(w))
    if total == 0.0:
        raise DegenerateWeightsError("all weights are zero")
    if abs(total - 1.0) > 1e-9:
        raise DomainError(f"weights must be normalized (sum {total!r})")
    u = np.atleast_1d(np.asarray(uniform_draws, dtype=float))
    if n_out is None:
        n_out = u.size if u.size > 1 else w.size
    if u.size not in (1, n_out):
        raise DomainError("need one uniform draw or one per output slot")
    if np.any((u < 0) | (u >= 1)):
        raise DomainError("uniform draws must lie in [0, 1)")
    points = (u + np.arange(n_out)) / n_out
    cdf = np.cumsum(w)
    cdf[-1] = max(cdf[-1], 1.0)
    return np.minimum(np.searchsorted(cdf, points, side="left"), w.size - 1)


def sir_resample(weights, states, uniform_draws, n_out: int | None = None) -> np.ndarray:
    """Resampled copy of ``states`` (rows along the first axis); new weights are 1/n_out."""
    idx = resample_indices(weights, uniform_draws, n_out)
    return np.asarray(states)[idx]


# ---------------------------------------------------------------------------
# particle filter

def _normal_logpdf(x, m, s):
    return -0.5 * ((x - m) / s) ** 2 - np.log(s) - 0.5 * _LOG_2PI


def vgsa_pf_loglik(series: LogReturnSeries, params: VGSA, cfg: PfConfig = PfConfig(),
                   env: MarketEnv | None = None, mu: float | None = None) -> FilterOutput:
    """Negative log-likelihood of a log-price series under VGSA by particle filtering.

    Each step: EKF proposal per particle, sample the arrival rate from the
    proposal, weight by observation density times transition density over
    proposal density, add the log mean weight to the likelihood, then resample
    systematically. With ``lam == 0`` the transition is deterministic and the
    particles follow it exactly. A fixed seed gives common random numbers
    across parameter values.
    """
    if params.kind == "vg":
        params = VGSA(params.sigma, params.nu, params.theta, 0.0, 1.0, 0.0)
    s, n, t = _vg_parts(params)
    if params.kappa < 0 or params.eta < 0 or params.lam < 0:
        raise DomainError("kappa, eta and lam must be nonnegative")
    drift = _drift(env, mu)
    omega = math.log(1.0 - t * n - 0.5 * s * s * n) / n
    dt = series.dt
    z_all = series.returns
    N = cfg.n_particles
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed)))
    x = np.maximum(X0 + math.sqrt(P0) * rng.standard_normal(N), STATE_FLOOR)
    P = np.full(N, P0)
    k, eta, lam = params.kappa, params.eta, params.lam
    steps = z_all.size
    states = np.empty(steps + 1)
    states[0] = float(np.mean(x))
    pred_err = np.zeros(steps + 1)
    err_var = np.zeros(steps + 1)
    loglik = 0.0
    degenerate = 0
    log_n = math.log(N)
    for j in range(steps):
        z = z_all[j]
        gauss = rng.standard_normal(N)
        u = rng.random()
        trans_mean = np.maximum(x + k * (eta - x) * dt, STATE_FLOOR)
        if lam == 0.0:
            x_new = trans_mean
            P_new = np.zeros(N)
            log_ratio = np.zeros(N)
            mean_prior = float(np.mean(trans_mean))
        else:
            ek = ekf_step(x, P, z, params, dt, mu=drift)
            sd = np.sqrt(ek.P_post)
            x_new = np.maximum(ek.x_post + sd * gauss, STATE_FLOOR)
            P_new = ek.P_post
            log_q = _normal_logpdf(x_new, ek.x_post, np.maximum(sd, 1e-300))
            log_px = _normal_logpdf(x_new, trans_mean, lam * np.sqrt(x * dt))
            log_ratio = log_px - log_q
            mean_prior = float(np.mean(ek.x_prior))
        log_w = log_observation_density(z, dt * x_new, params, dt, cfg.resolution, mu=drift) + log_ratio
        log_w = np.where(np.isfinite(log_w) | (log_w == -np.inf), log_w, -np.inf)
        top = float(np.max(log_w))
        if top == -np.inf:
            degenerate += 1
            loglik += math.log(LIKELIHOOD_FLOOR)
            w = np.full(N, 1.0 / N)
        else:
            e = np.exp(log_w - top)
            tot = float(np.sum(e))
            loglik += top + math.log(tot) - log_n
            w = e / tot
        states[j + 1] = float(np.dot(w, x_new))
        pred_err[j + 1] = z - (drift + omega + t * mean_prior) * dt
        err_var[j] = (t * t * n + s * s) * mean_prior * dt
        idx = resample_indices(w / w.sum(), u)
        x, P = x_new[idx], P_new[idx]
    return FilterOutput(-loglik, states, pred_err, err_var, degenerate)


# ---------------------------------------------------------------------------
# maximum likelihood

_POSITIVE = {"sigma": True, "nu": True, "omega": False, "kappa": True, "eta": True, "lam": True}
_SEARCH_NAMES = ("sigma", "nu", "omega", "kappa", "eta", "lam")


@dataclass(frozen=True)
class PfFit:
    params: VGSA
    nll: float
    start_nll: float
    anchored_drift: bool
    optimizer: NelderMeadResult = field(repr=False)


def _omega(sigma: float, nu: float, theta: float) -> float:
    return math.log(1.0 - theta * nu - 0.5 * sigma * sigma * nu) / nu


def _theta(sigma: float, nu: float, omega: float) -> float:
    return (1.0 - 0.5 * sigma * sigma * nu - math.exp(omega * nu)) / nu


def drift_atom(series: LogReturnSeries) -> float | None:
    """Most frequent log return when it occurs more than once, else None.

    At fine sampling most VG increments carry a clock increment that
    underflows, so many returns equal the drift exactly.
    """
    vals, counts = np.unique(series.returns, return_counts=True)
    i = int(np.argmax(counts))
    return float(vals[i]) if counts[i] > 1 else None


def pf_mle(series: LogReturnSeries, x0: VGSA, cfg: PfConfig = PfConfig(),
           env: MarketEnv | None = None, mu: float | None = None, fixed: tuple = (),
           anchor_drift: bool = True, tol_x: float = 1e-5, max_iters: int = 1000) -> PfFit:
    """Nelder-Mead on the particle-filter negative log-likelihood.

    The search runs over (sigma, nu, omega, kappa, eta, lam) with theta implied
    by the martingale shift omega. Every evaluation reuses ``cfg.seed`` so the
    surface is deterministic. Parameters named in ``fixed`` are held at their
    starting values (``theta`` fixes omega). With ``anchor_drift`` and a
    repeated return value in the data, omega is pinned so the model drift hits
    that value exactly: the density has an integrable spike at zero clock
    time, and missing it by d costs about log(d) per repeated observation.
    """
    if x0.kind == "vg":
        x0 = VGSA(x0.sigma, x0.nu, x0.theta, 0.0, 1.0, 0.0)
    bad = set(fixed) - set(MODEL_FIELDS["vgsa"])
    if bad:
        raise DomainError(f"unknown parameters {sorted(bad)}")
    drift = _drift(env, mu)
    s0, n0, t0 = _vg_parts(x0)
    base = np.array([s0, n0, _omega(s0, n0, t0), x0.kappa, x0.eta, x0.lam])
    held = {"omega" if nm == "theta" else nm for nm in fixed}
    atom = drift_atom(series) if anchor_drift else None
    anchored = atom is not None and "omega" not in held
    if anchored:
        base[2] = atom / series.dt - drift
        held.add("omega")
    free = [i for i, nm in enumerate(_SEARCH_NAMES) if nm not in held]

    def unpack(v):
        full = base.copy()
        full[free] = v
        s, n, om, k, eta, lam = full
        return VGSA(s, n, _theta(s, n, om), k, eta, lam, x0.y0)

    def f(v):
        return vgsa_pf_loglik(series, unpack(v), cfg, mu=drift).nll

    start_nll = vgsa_pf_loglik(series, x0, cfg, mu=drift).nll
    if not math.isfinite(start_nll):
        raise DomainError("negative log-likelihood is not finite at the start")
    mask = [_POSITIVE[_SEARCH_NAMES[i]] for i in free]
    res = nelder_mead(f, base[free], mask, tol_x=tol_x, max_iters=max_iters)
    return PfFit(unpack(res.x), res.fun, start_nll, anchored, res)
