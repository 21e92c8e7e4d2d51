"""Model parameter sets, characteristic functions, cumulants and Levy measures.

Four exponential Levy type models are supported:

* ``BS``   Black-Scholes (Brownian motion, volatility ``sigma``)
* ``VG``   Variance Gamma (``sigma``, ``nu``, ``theta``)
* ``VGSA`` Variance Gamma with a CIR stochastic clock (adds ``kappa``, ``eta``, ``lam``)
* ``CGMY`` tempered stable (``C``, ``G``, ``M``, ``Y``)

Characteristic functions are those of the centred driving process ``X_t``. The
log-price characteristic function adds the risk-neutral drift and the
martingale correction so that ``E[S_T] = S0 exp((r - q) T)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

_LOG_OVERFLOW = 700.0


class DomainError(ValueError):
    """Parameters or arguments outside the domain of a formula."""


class NumericalError(ArithmeticError):
    """Overflow or non-finite values in an otherwise valid computation."""


class UnsupportedModelError(TypeError):
    """Operation not defined for the given model family."""


@dataclass(frozen=True)
class BS:
    sigma: float
    kind: str = field(default="bs", init=False, repr=False)

    def __post_init__(self):
        _require(self.sigma > 0, "sigma must be positive")


@dataclass(frozen=True)
class VG:
    sigma: float
    nu: float
    theta: float
    kind: str = field(default="vg", init=False, repr=False)

    def __post_init__(self):
        _require(self.sigma > 0, "sigma must be positive")
        _require(self.nu > 0, "nu must be positive")
        _require(math.isfinite(self.theta), "theta must be finite")


@dataclass(frozen=True)
class VGSA:
    """VG evaluated on an integrated CIR clock.

    The clock rate ``y`` follows ``dy = kappa (eta - y) dt + lam sqrt(y) dW``
    and starts at ``y0`` (unit rate by default, so a frozen clock is plain VG).
    """

    sigma: float
    nu: float
    theta: float
    kappa: float
    eta: float
    lam: float
    y0: float = 1.0
    kind: str = field(default="vgsa", init=False, repr=False)

    def __post_init__(self):
        _require(self.sigma > 0, "sigma must be positive")
        _require(self.nu > 0, "nu must be positive")
        _require(math.isfinite(self.theta), "theta must be finite")
        _require(self.kappa >= 0 and self.eta >= 0 and self.lam >= 0,
                 "kappa, eta and lam must be nonnegative")
        _require(self.y0 >= 0, "y0 must be nonnegative")

    @property
    def vg(self) -> VG:
        return VG(self.sigma, self.nu, self.theta)


@dataclass(frozen=True)
class CGMY:
    """CGMY with ``M`` tempering positive jumps and ``G`` tempering negative jumps."""

    C: float
    G: float
    M: float
    Y: float
    kind: str = field(default="cgmy", init=False, repr=False)

    def __post_init__(self):
        _require(self.C > 0 and self.G > 0 and self.M > 0, "C, G and M must be positive")
        _require(self.Y < 2, "Y must be below 2")
        _require(not float(self.Y).is_integer(), "integer Y is a removable singularity not supported")


ModelParams = Union[BS, VG, VGSA, CGMY]

MODEL_FIELDS = {
    "bs": ("sigma",),
    "vg": ("sigma", "nu", "theta"),
    "vgsa": ("sigma", "nu", "theta", "kappa", "eta", "lam"),
    "cgmy": ("C", "G", "M", "Y"),
}
_MODEL_CLASSES = {"bs": BS, "vg": VG, "vgsa": VGSA, "cgmy": CGMY}


def make_model(kind: str, **params: float) -> ModelParams:
    """Build a model from its lowercase tag and keyword parameters."""
    kind = kind.lower()
    if kind not in _MODEL_CLASSES:
        raise DomainError(f"unknown model {kind!r}")
    aliases = {"lambda": "lam"}
    params = {aliases.get(k, k): float(v) for k, v in params.items()}
    missing = [f for f in MODEL_FIELDS[kind] if f not in params]
    if missing:
        raise DomainError(f"missing parameters for {kind}: {', '.join(missing)}")
    return _MODEL_CLASSES[kind](**params)


def model_vector(model: ModelParams) -> np.ndarray:
    return np.array([getattr(model, f) for f in MODEL_FIELDS[model.kind]], dtype=float)


def model_from_vector(kind: str, x) -> ModelParams:
    return make_model(kind, **dict(zip(MODEL_FIELDS[kind], map(float, x))))


def model_to_dict(model: ModelParams) -> dict:
    out = {"model": model.kind}
    out.update({f: float(getattr(model, f)) for f in MODEL_FIELDS[model.kind]})
    return out


@dataclass(frozen=True)
class MarketEnv:
    S0: float
    r: float = 0.0
    q: float = 0.0

    def __post_init__(self):
        _require(self.S0 > 0, "S0 must be positive")

    def forward(self, T: float) -> float:
        return self.S0 * math.exp((self.r - self.q) * T)


@dataclass(frozen=True)
class CumulantSet:
    c1: float
    c2: float
    c4: float
    w: float


@dataclass(frozen=True)
class DiscreteLevyMeasure:
    """Levy measure as point masses on a grid of log-jump sizes."""

    grid: np.ndarray
    masses: np.ndarray
    diffusion: float = 0.0
    drift: float = 0.0

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        p = np.asarray(self.masses, dtype=float)
        _require(g.ndim == 1 and g.shape == p.shape, "grid and masses must be 1-d of equal length")
        _require(bool(np.all(np.diff(g) > 0)), "grid must be strictly increasing")
        _require(bool(np.all(p >= 0)), "masses must be nonnegative")
        _require(self.diffusion >= 0, "diffusion must be nonnegative")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "masses", p)


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise DomainError(msg)


def _as_complex(u):
    return np.asarray(u, dtype=complex)


def _finish(log_value, what: str):
    """Exponentiate a log characteristic function, refusing to saturate."""
    lv = np.asarray(log_value)
    if not np.all(np.isfinite(lv)):
        raise NumericalError(f"{what}: non-finite value")
    if np.any(lv.real > _LOG_OVERFLOW):
        raise NumericalError(f"{what}: overflow (log modulus above {_LOG_OVERFLOW})")
    out = np.exp(lv)
    return out[()] if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# characteristic exponents


def vg_exponent(u, sigma: float, nu: float, theta: float):
    """Per-unit-time VG characteristic exponent psi with E[e^{iuX_t}] = e^{t psi(u)}."""
    u = _as_complex(u)
    base = 1.0 - 1j * u * theta * nu + 0.5 * sigma**2 * nu * u**2
    if np.any((base.real <= 0) & (np.abs(base.imag) <= 1e-300)):
        raise DomainError("VG characteristic function argument outside its strip of analyticity")
    return -np.log(base) / nu


def cgmy_exponent(u, C: float, G: float, M: float, Y: float):
    u = _as_complex(u)
    right = M - 1j * u
    left = G + 1j * u
    if np.any((right.real <= 0) & (right.imag == 0)) or np.any((left.real <= 0) & (left.imag == 0)):
        raise DomainError("CGMY characteristic function argument outside its strip of analyticity")
    return C * math.gamma(-Y) * (right**Y - M**Y + left**Y - G**Y)


def _x_coth_x(x):
    small = np.abs(x) < 1e-4
    xs = np.where(small, 1.0, x)
    em = np.exp(-2.0 * xs)
    big = xs * (1.0 + em) / (1.0 - em)
    return np.where(small, 1.0 + x**2 / 3.0, big)


def cir_clock_log_mgf(s, t: float, y0: float, kappa: float, eta: float, lam: float):
    """log E[exp(s * int_0^t y_u du)] for a CIR rate y started at ``y0``.

    Written with exp(-gamma t) so that large ``gamma t`` cannot overflow and the
    power term stays on a continuous branch.
    """
    s = _as_complex(s)
    lam2 = lam * lam
    if lam2 == 0.0:
        if kappa == 0.0:
            integral = y0 * t
        else:
            e = -math.expm1(-kappa * t) / kappa
            integral = y0 * e + eta * (t - e)
        return s * integral
    gamma = np.sqrt(kappa**2 - 2.0 * lam2 * s)
    x = 0.5 * gamma * t
    b = 2.0 * s / (kappa + (2.0 / t) * _x_coth_x(x))
    if kappa == 0.0:
        return b * y0
    # kappa - gamma = 2 lam^2 s / (kappa + gamma) removes the 1/lam^2 cancellation
    kg = kappa + gamma
    ok = gamma != 0
    g = np.where(ok, gamma, 1.0)
    decay = np.exp(-gamma * t)
    log_a = (2.0 * kappa * eta * t * s / kg
             - 2.0 * kappa * eta / lam2 * (np.log1p(lam2 * s / (g * kg))
                                           + np.log1p(-2.0 * lam2 * s * decay / kg**2)))
    if not np.all(ok):
        # gamma == 0 exactly: cosh + (kappa t / 2) sinh(x)/x at x = 0
        log_a0 = kappa**2 * eta * t / lam2 - 2.0 * kappa * eta / lam2 * np.log1p(0.5 * kappa * t)
        log_a = np.where(ok, log_a, log_a0)
    return log_a + b * y0


def log_characteristic_function(model: ModelParams, u, t: float):
    """log E[e^{iuX_t}] for the centred (uncorrected) driving process."""
    if not t > 0:
        raise DomainError("t must be positive")
    u = _as_complex(u)
    if isinstance(model, BS):
        return -0.5 * model.sigma**2 * u**2 * t
    if isinstance(model, VG):
        return t * vg_exponent(u, model.sigma, model.nu, model.theta)
    if isinstance(model, VGSA):
        s = vg_exponent(u, model.sigma, model.nu, model.theta)
        return cir_clock_log_mgf(s, t, model.y0, model.kappa, model.eta, model.lam)
    if isinstance(model, CGMY):
        return t * cgmy_exponent(u, model.C, model.G, model.M, model.Y)
    raise UnsupportedModelError(f"unknown model {model!r}")


def characteristic_function(model: ModelParams, u, t: float):
    """E[e^{iuX_t}] for the centred (uncorrected) driving process."""
    return _finish(log_characteristic_function(model, u, t), f"{model.kind} characteristic function")


def martingale_correction(model: ModelParams, t: float = 1.0) -> float:
    """Per-unit-time drift ``w`` with ``exp(w t) E[exp(X_t)] = 1``.

    For Levy models ``w`` does not depend on ``t``. For VGSA it is the average
    rate over ``[0, t]``.
    """
    if isinstance(model, BS):
        return -0.5 * model.sigma**2
    if isinstance(model, VG):
        arg = 1.0 - model.theta * model.nu - 0.5 * model.sigma**2 * model.nu
        if arg <= 0:
            raise DomainError("VG martingale correction needs 1 - theta nu - sigma^2 nu / 2 > 0")
        return math.log(arg) / model.nu
    if isinstance(model, CGMY):
        if model.M <= 1:
            raise DomainError("CGMY martingale correction needs M > 1")
        C, G, M, Y = model.C, model.G, model.M, model.Y
        return -C * math.gamma(-Y) * ((M - 1) ** Y - M**Y + (G + 1) ** Y - G**Y)
    if isinstance(model, VGSA):
        martingale_correction(model.vg)
        lv = log_characteristic_function(model, -1j, t)
        if not np.isfinite(lv) or lv.real > _LOG_OVERFLOW:
            raise DomainError("VGSA clock moment generating function explodes at u = -i")
        return float(-lv.real / t)
    raise UnsupportedModelError(f"unknown model {model!r}")


def log_return_log_cf(model: ModelParams, env: MarketEnv, u, T: float):
    """log E[exp(iu ln(S_T / S0))] under the risk-neutral measure."""
    u = _as_complex(u)
    drift = env.r - env.q
    if isinstance(model, VGSA):
        martingale_correction(model.vg)
        norm = log_characteristic_function(model, -1j, T)
        return 1j * u * (drift * T - norm) + log_characteristic_function(model, u, T)
    w = martingale_correction(model)
    return 1j * u * (drift + w) * T + log_characteristic_function(model, u, T)


def log_price_cf(model: ModelParams, env: MarketEnv, u, T: float):
    """E[exp(iu ln S_T)] including drift and martingale correction."""
    u = _as_complex(u)
    lv = 1j * u * math.log(env.S0) + log_return_log_cf(model, env, u, T)
    return _finish(lv, f"{model.kind} log-price characteristic function")


# ---------------------------------------------------------------------------
# cumulants


def cumulants(model: ModelParams, env: MarketEnv, T: float) -> CumulantSet:
    """Closed-form cumulants of ln(S_T/S0) used for the COS truncation range."""
    mu0 = env.r - env.q
    if isinstance(model, BS):
        return CumulantSet(c1=mu0 * T, c2=model.sigma**2 * T, c4=0.0, w=0.0)
    if isinstance(model, VG):
        s, n, th = model.sigma, model.nu, model.theta
        w = martingale_correction(model)
        c1 = (mu0 + w + th) * T
        c2 = (s**2 + n * th**2) * T
        c4 = 3.0 * (s**4 * n + 2.0 * th**4 * n**3 + 4.0 * s**2 * th**2 * n**2) * T
        return CumulantSet(c1, c2, c4, w)
    if isinstance(model, CGMY):
        C, G, M, Y = model.C, model.G, model.M, model.Y
        w = martingale_correction(model)
        c1 = (mu0 + w) * T + C * T * math.gamma(1 - Y) * (M ** (Y - 1) - G ** (Y - 1))
        c2 = C * T * math.gamma(2 - Y) * (M ** (Y - 2) + G ** (Y - 2))
        c4 = C * T * math.gamma(4 - Y) * (M ** (Y - 4) + G ** (Y - 4))
        return CumulantSet(c1, c2, c4, w)
    raise UnsupportedModelError(f"no closed-form cumulants for {model.kind}; use cumulants_fd")


# central stencils (offset, weight); first and second derivative fourth-order
# accurate, fourth derivative sixth-order accurate
_D1 = ((-2, 1 / 12), (-1, -8 / 12), (1, 8 / 12), (2, -1 / 12))
_D2 = ((-2, -1 / 12), (-1, 16 / 12), (0, -30 / 12), (1, 16 / 12), (2, -1 / 12))
_D4 = tuple(zip(range(-4, 5), (7 / 240, -2 / 5, 169 / 60, -122 / 15, 91 / 8,
                               -122 / 15, 169 / 60, -2 / 5, 7 / 240)))


def cumulants_fd(model: ModelParams, env: MarketEnv, T: float, h: float = 1e-6) -> CumulantSet:
    """Cumulants of ln(S_T/S0) by central differences of G(w) = ln E[(S_T/S0)^w].

    ``h`` is the base step. A derivative of order n loses about ``h**-n``
    digits to rounding, so the stencils run at the widened steps ``h**0.5``,
    ``h**0.4`` and ``h**0.15`` (1e-3, 4e-3 and 0.13 at the default) and rely on
    high-order stencils to keep the truncation error small.
    """
    if not h > 0:
        raise DomainError("h must be positive")

    def G(w: float) -> float:
        return float(log_return_log_cf(model, env, -1j * w, T).real)

    def deriv(stencil, step: float, order: int) -> float:
        return sum(c * G(k * step) for k, c in stencil) / step**order

    c1 = deriv(_D1, h**0.5, 1)
    c2 = deriv(_D2, h**0.4, 2)
    c4 = deriv(_D4, h**0.15, 4)
    return CumulantSet(c1, c2, c4, martingale_correction(model, T))


# ---------------------------------------------------------------------------
# Levy measures


def levy_density(model: ModelParams, x) -> np.ndarray:
    """Levy density k(x) of the jump part.

    VG uses the standard closed form (Madan, Carr and Chang 1998)
    ``exp(theta x / sigma^2) / (nu |x|) * exp(-|x| sqrt(theta^2/sigma^4 + 2/(nu sigma^2)))``.
    VGSA uses its VG component. CGMY puts ``M`` on positive and ``G`` on
    negative jumps, matching its characteristic function.
    """
    x = np.asarray(x, dtype=float)
    if np.any(x == 0):
        raise DomainError("Levy density is singular at x = 0")
    ax = np.abs(x)
    if isinstance(model, VGSA):
        model = model.vg
    if isinstance(model, VG):
        s2 = model.sigma**2
        rate = math.sqrt(model.theta**2 / s2**2 + 2.0 / (model.nu * s2))
        return np.exp(model.theta * x / s2 - rate * ax) / (model.nu * ax)
    if isinstance(model, CGMY):
        temper = np.where(x > 0, model.M, model.G)
        return model.C * np.exp(-temper * ax) / ax ** (1.0 + model.Y)
    raise UnsupportedModelError(f"{model.kind} has no jump part to discretize")


def default_levy_grid(n_points: int = 200, hole: float = 2e-3, width: float = 1.0) -> np.ndarray:
    """Symmetric grid on [-width, width] without the hole (-hole/2, hole/2).

    Points are geometric cell midpoints so that the singular density near zero
    is resolved. ``n_points`` must be even.
    """
    if n_points % 2 or n_points < 2:
        raise DomainError("n_points must be a positive even number")
    edges = np.geomspace(hole / 2, width, n_points // 2 + 1)
    pos = np.sqrt(edges[:-1] * edges[1:])
    return np.concatenate([-pos[::-1], pos])


def _cell_edges(side: np.ndarray) -> np.ndarray:
    """Geometric cell edges around increasing positive points."""
    if side.size == 1:
        return np.array([side[0] / math.sqrt(2.0), side[0] * math.sqrt(2.0)])
    inner = np.sqrt(side[:-1] * side[1:])
    lo = side[0] ** 2 / inner[0]
    hi = side[-1] ** 2 / inner[-1]
    return np.concatenate([[lo], inner, [hi]])


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


def _cell_masses(model: ModelParams, edges: np.ndarray, sign: float) -> np.ndarray:
    # Gauss-Legendre in log|x| on every cell
    la, lb = np.log(edges[:-1]), np.log(edges[1:])
    mid, half = 0.5 * (la + lb), 0.5 * (lb - la)
    t = mid[:, None] + half[:, None] * _GL_NODES[None, :]
    ax = np.exp(t)
    vals = levy_density(model, sign * ax) * ax
    return half * (vals @ _GL_WEIGHTS)


def discretize_levy_measure(model: ModelParams, grid=None) -> DiscreteLevyMeasure:
    """Cell masses of the Levy measure on ``grid`` (default :func:`default_levy_grid`).

    Each grid point owns the cell between the geometric means of its
    neighbours; its mass is the density integrated over that cell.
    """
    grid = default_levy_grid() if grid is None else np.asarray(grid, dtype=float)
    if np.any(grid == 0):
        raise DomainError("grid must exclude x = 0")
    if not np.all(np.diff(grid) > 0):
        raise DomainError("grid must be strictly increasing")
    if isinstance(model, BS):
        raise UnsupportedModelError("BS has no jump measure")
    neg, pos = grid[grid < 0], grid[grid > 0]
    parts = []
    if neg.size:
        parts.append(_cell_masses(model, _cell_edges(-neg[::-1]), -1.0)[::-1])
    if pos.size:
        parts.append(_cell_masses(model, _cell_edges(pos), 1.0))
    masses = np.concatenate(parts)
    return DiscreteLevyMeasure(grid, masses, 0.0, martingale_correction(model))
