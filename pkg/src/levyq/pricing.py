"""Deterministic European option pricers.

* :func:`bs_call` and :func:`vg_call_analytic`: closed forms.
* :func:`fft_price_strip` / :func:`fft_price`: Carr-Madan damped call transform
  inverted by FFT with Simpson weights.
* :func:`cos_price`: Fourier-cosine expansion of the log-return density on a
  cumulant-based truncation range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .models import (BS, VG, VGSA, CGMY, DomainError, MarketEnv, ModelParams, NumericalError,
                     cumulants, cumulants_fd, log_price_cf, log_return_log_cf,
                     martingale_correction)
from .specfun import norm_cdf

DEFAULT_ALPHA = 1.5


@dataclass(frozen=True)
class FftConfig:
    """Carr-Madan grid: ``N`` nodes with spacing ``eta`` (default ``upper / N``)."""

    N: int = 2**9
    eta: Optional[float] = None
    alpha: Optional[float] = None
    quadrature: str = "simpson"
    upper: float = 50.0

    def __post_init__(self):
        if self.N < 2 or self.N & (self.N - 1):
            raise DomainError("FFT size N must be a power of two")
        if self.eta is not None and not self.eta > 0:
            raise DomainError("eta must be positive")
        if self.alpha is not None and not self.alpha > 0:
            raise DomainError("explicit alpha must be positive")
        if self.quadrature not in ("simpson", "trapezoid"):
            raise DomainError("quadrature must be 'simpson' or 'trapezoid'")

    @property
    def spacing(self) -> float:
        return self.eta if self.eta is not None else self.upper / self.N

    @property
    def log_strike_step(self) -> float:
        return 2.0 * math.pi / (self.N * self.spacing)


@dataclass(frozen=True)
class CosConfig:
    """``call_via_put`` prices calls as puts plus the forward, which keeps the
    payoff coefficients bounded when the truncation range is wide."""
    N: int = 2**7
    L: float = 10.0
    call_via_put: bool = True

    def __post_init__(self):
        if self.N < 16:
            raise DomainError("COS needs N >= 16")
        if not self.L > 0:
            raise DomainError("L must be positive")


@dataclass(frozen=True)
class PriceStrip:
    strikes: np.ndarray
    premiums: np.ndarray
    method: str
    kind: str = "call"


def _scalar_or_array(x):
    x = np.asarray(x)
    return x[()] if x.ndim == 0 else x


# ---------------------------------------------------------------------------
# closed forms


def bs_call(env: MarketEnv, K, T: float, sigma: float):
    """Black-Scholes call with the dividend yield folded into the spot."""
    K = np.asarray(K, dtype=float)
    if np.any(K <= 0) or not T > 0 or not sigma > 0:
        raise DomainError("K, T and sigma must be positive")
    s = env.S0 * math.exp(-env.q * T)
    vol = sigma * math.sqrt(T)
    d1 = (np.log(s / K) + (env.r + 0.5 * sigma**2) * T) / vol
    d2 = d1 - vol
    return _scalar_or_array(s * norm_cdf(d1) - K * math.exp(-env.r * T) * norm_cdf(d2))


def bs_put(env: MarketEnv, K, T: float, sigma: float):
    K = np.asarray(K, dtype=float)
    parity = env.S0 * math.exp(-env.q * T) - K * math.exp(-env.r * T)
    return _scalar_or_array(bs_call(env, K, T, sigma) - parity)


def vg_call_analytic(env: MarketEnv, K, T: float, params: VG):
    """Closed-form VG call approximation, accurate when ``T / nu`` is large.

    With ``alpha = -theta / sigma`` and ``a = (alpha + sigma)^2``::

        d1 = ln(S/K)/(sigma sqrt T)
             + ((r + ln((1 - nu a/2)/(1 - nu alpha^2/2))/nu)/sigma + alpha + sigma) sqrt T
        d2 = d1 - sigma sqrt T
        C  = S e^{aT/2} (1 - nu a/2)^{T/nu} N(d1)
             - K e^{-rT + alpha^2 T/2} (1 - nu alpha^2/2)^{T/nu} N(d2)
    """
    K = np.asarray(K, dtype=float)
    sigma, nu, theta = params.sigma, params.nu, params.theta
    alpha = -theta / sigma
    a = (alpha + sigma) ** 2
    base1 = 1.0 - 0.5 * nu * a
    base2 = 1.0 - 0.5 * nu * alpha**2
    if base1 <= 0 or base2 <= 0:
        raise DomainError("VG analytic formula needs 1 - nu alpha^2/2 > 0 and 1 - nu (alpha+sigma)^2/2 > 0")
    s = env.S0 * math.exp(-env.q * T)
    rt = math.sqrt(T)
    d1 = (np.log(s / K) / (sigma * rt)
          + ((env.r + math.log(base1 / base2) / nu) / sigma + alpha + sigma) * rt)
    d2 = d1 - sigma * rt
    c = (s * math.exp(0.5 * a * T) * base1 ** (T / nu) * norm_cdf(d1)
         - K * math.exp(-env.r * T + 0.5 * alpha**2 * T) * base2 ** (T / nu) * norm_cdf(d2))
    return _scalar_or_array(c)


# ---------------------------------------------------------------------------
# Carr-Madan FFT


def damping_limit(model: ModelParams) -> float:
    """Largest damping keeping E[S_T^{alpha+1}] finite (with a 10% margin)."""
    if isinstance(model, BS):
        return math.inf
    if isinstance(model, (VG, VGSA)):
        # 1 - a theta nu - sigma^2 nu a^2 / 2 > 0 for a = alpha + 1
        s2n = model.sigma**2 * model.nu
        tn = model.theta * model.nu
        a_max = (-tn + math.sqrt(tn**2 + 2.0 * s2n)) / s2n
        return 0.9 * (a_max - 1.0)
    if isinstance(model, CGMY):
        return 0.9 * (model.M - 1.0)
    raise DomainError(f"unknown model {model!r}")


def optimal_damping(model: ModelParams, env: MarketEnv, K: float, T: float,
                    cfg: FftConfig = FftConfig()) -> float:
    """Payoff-independent damping parameter.

    BS: ``-d_plus / (eta sqrt T)`` with
    ``d_plus = (ln(S0/K) + (r + sigma^2/sqrt 2) T) / (sigma sqrt T)``.
    VG: ``-theta/sigma^2 - 1 + T/(nu m) - sgn(m) sqrt(theta^2/sigma^2 + 2/(nu sigma^2) + T^2/(nu^2 m^2))``
    with ``m = ln F - ln K - w T``.
    Nonpositive or non-finite values fall back to 1.5; values past the
    moment limit are clamped to it.
    """
    alpha = math.nan
    if isinstance(model, BS):
        sig = model.sigma
        d_plus = (math.log(env.S0 / K) + (env.r + sig**2 / math.sqrt(2.0)) * T) / (sig * math.sqrt(T))
        alpha = -d_plus / (cfg.spacing * math.sqrt(T))
    elif isinstance(model, VG):
        sig, nu, th = model.sigma, model.nu, model.theta
        m = math.log(env.forward(T)) - math.log(K) - martingale_correction(model) * T
        if m != 0.0:
            root = math.sqrt(th**2 / sig**2 + 2.0 / (nu * sig**2) + T**2 / (nu**2 * m**2))
            alpha = -th / sig**2 - 1.0 + T / (nu * m) - math.copysign(1.0, m) * root
    return clamp_damping(model, alpha)


def clamp_damping(model: ModelParams, alpha: float) -> float:
    limit = damping_limit(model)
    if not math.isfinite(alpha) or alpha <= 0:
        alpha = DEFAULT_ALPHA
    return float(min(alpha, limit))


def _simpson_weights(N: int, eta: float) -> np.ndarray:
    j = np.arange(1, N + 1)
    w = (eta / 3.0) * (3.0 + (-1.0) ** j)
    w[0] -= eta / 3.0
    return w


def fft_price_strip(model: ModelParams, env: MarketEnv, T: float,
                    cfg: FftConfig = FftConfig(), center: Optional[float] = None) -> PriceStrip:
    """Call premiums on the log-strike grid ``center - N lam/2 + m lam``, m = 0..N-1.

    ``center`` defaults to ``ln S0``; the grid node ``m = N/2`` sits exactly on it.
    """
    N, eta, lam = cfg.N, cfg.spacing, cfg.log_strike_step
    center = math.log(env.S0) if center is None else center
    if cfg.alpha is not None:
        alpha = cfg.alpha
    elif isinstance(model, (BS, VG)):
        alpha = optimal_damping(model, env, math.exp(center), T, cfg)
    else:
        alpha = clamp_damping(model, DEFAULT_ALPHA)
    beta = center - 0.5 * N * lam
    v = eta * np.arange(N)
    try:
        phi = log_price_cf(model, env, v - (alpha + 1.0) * 1j, T)
    except NumericalError as exc:
        raise NumericalError(f"FFT characteristic function failed: {exc}") from exc
    psi = math.exp(-env.r * T) * phi / (alpha**2 + alpha - v**2 + 1j * (2.0 * alpha + 1.0) * v)
    bad = np.flatnonzero(~np.isfinite(psi))
    if bad.size:
        raise NumericalError(f"non-finite transform at frequency index {int(bad[0])}")
    if cfg.quadrature == "simpson":
        weights = _simpson_weights(N, eta)
    else:
        weights = np.full(N, eta)
        weights[0] *= 0.5
    x = np.exp(-1j * beta * v) * psi * weights
    k = beta + lam * np.arange(N)
    premiums = np.exp(-alpha * k) / math.pi * np.fft.fft(x).real
    return PriceStrip(np.exp(k), premiums, "fft")


def interpolate_strip(strip: PriceStrip, K):
    """Linear interpolation of a strip in log strike."""
    K = np.asarray(K, dtype=float)
    lk = np.log(strip.strikes)
    if np.any(np.log(K) < lk[0]) or np.any(np.log(K) > lk[-1]):
        raise DomainError("strike outside the FFT grid")
    return _scalar_or_array(np.interp(np.log(K), lk, strip.premiums))


def fft_price(model: ModelParams, env: MarketEnv, K, T: float, cfg: FftConfig = FftConfig()):
    """FFT call premium at each strike, with the grid centred on that strike.

    Centring puts the requested log strike on a grid node, so the readout needs
    no interpolation.
    """
    K = np.atleast_1d(np.asarray(K, dtype=float))
    out = np.empty_like(K)
    for i, k in enumerate(K):
        strip = fft_price_strip(model, env, T, cfg, center=math.log(k))
        out[i] = strip.premiums[cfg.N // 2]
    return out[0] if out.size == 1 else out


# ---------------------------------------------------------------------------
# COS


def cos_truncation_range(model: ModelParams, env: MarketEnv, T: float, L: float = 10.0):
    """``c1 -/+ L sqrt(c2 + sqrt(c4))`` for the log return ln(S_T/S0)."""
    c = cumulants_fd(model, env, T) if isinstance(model, VGSA) else cumulants(model, env, T)
    width = L * math.sqrt(c.c2 + math.sqrt(abs(c.c4)))
    a, b = c.c1 - width, c.c1 + width
    if not (a < 0 < b):
        raise DomainError(f"truncation range [{a:.6g}, {b:.6g}] does not straddle 0; widen L")
    return a, b


def _chi(k, a, b, c, d):
    u = k * math.pi / (b - a)
    return (1.0 / (1.0 + u**2)) * (
        np.cos(u * (d - a)) * math.exp(d) - np.cos(u * (c - a)) * math.exp(c)
        + u * np.sin(u * (d - a)) * math.exp(d) - u * np.sin(u * (c - a)) * math.exp(c))


def _psi(k, a, b, c, d):
    u = k[1:] * math.pi / (b - a)
    rest = (np.sin(u * (d - a)) - np.sin(u * (c - a))) / u
    return np.concatenate([[d - c], rest])


def cos_payoff_coeffs(kind: str, a: float, b: float, K: float, N: int) -> np.ndarray:
    """Cosine coefficients V_k of the payoff in y = ln(S_T/K) on [a, b].

    Calls integrate ``K(e^y - 1)`` over (0, b); puts integrate ``K(1 - e^y)``
    over (a, 0).
    """
    if not a < 0 < b:
        raise DomainError("need a < 0 < b")
    k = np.arange(N, dtype=float)
    if kind == "call":
        v = _chi(k, a, b, 0.0, b) - _psi(k, a, b, 0.0, b)
    elif kind == "put":
        v = -_chi(k, a, b, a, 0.0) + _psi(k, a, b, a, 0.0)
    else:
        raise DomainError("kind must be 'call' or 'put'")
    return 2.0 / (b - a) * K * v


def cos_price(model: ModelParams, env: MarketEnv, K, T: float,
              cfg: CosConfig = CosConfig(), kind: str = "call"):
    """COS premium(s) for one maturity and one or more strikes."""
    K = np.asarray(K, dtype=float)
    Ks = np.atleast_1d(K)
    if np.any(Ks <= 0) or not T > 0:
        raise DomainError("strikes and maturity must be positive")
    a, b = cos_truncation_range(model, env, T, cfg.L)
    x = np.log(env.S0 / Ks)
    deep = np.abs(x) > 0.8 * (b - a) / 2.0
    if np.any(deep):
        raise DomainError(f"strikes too far out of the money for the COS range: {Ks[deep].tolist()}")
    u = np.arange(cfg.N) * math.pi / (b - a)
    lv = log_return_log_cf(model, env, u, T)
    if not np.all(np.isfinite(lv)):
        raise NumericalError("non-finite characteristic function in COS sum")
    phi = np.exp(lv)
    parity = kind == "call" and cfg.call_via_put
    v = cos_payoff_coeffs("put" if parity else kind, a, b, 1.0, cfg.N)
    v[0] *= 0.5
    terms = (phi[None, :] * np.exp(1j * u[None, :] * (x[:, None] - a))).real * v[None, :]
    prices = Ks * math.exp(-env.r * T) * terms.sum(axis=1)
    if parity:
        prices = prices + env.S0 * math.exp(-env.q * T) - Ks * math.exp(-env.r * T)
    return prices[0] if K.ndim == 0 else prices
