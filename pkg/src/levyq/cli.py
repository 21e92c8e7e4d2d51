"""Command-line interface and file formats.

Chains are CSV with header ``strike,maturity,mid[,bid,ask,weight]``. Market
settings come from ``# S0=..`` style comment lines at the top of the file or
from a sidecar ``<stem>.env.json``. Price series are CSV with header
``time,price[,log_price]``; when the log price column is present it is read
back exactly. Results are JSON with sorted keys, or CSV tables, so reruns with
the same seed produce identical bytes.

Exit codes: 0 success, 1 invalid input, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import calib, filter as pf, mc, pricing
from .models import (
    VG,
    VGSA,
    DomainError,
    MarketEnv,
    ModelParams,
    NumericalError,
    UnsupportedModelError,
    make_model,
    model_to_dict,
)

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2
STRIP_SIZE = 30
STRIP_WIDTH = 0.3

DEFAULT_PATH_PARAMS = {"sigma": 0.28, "nu": 0.41, "theta": 0.1}
DEFAULT_PATH_ENV = {"S0": 100.0, "r": 0.1, "q": 0.0}


class InputError(ValueError):
    """Malformed input file or argument."""


# ---------------------------------------------------------------------------
# parsing helpers

def parse_kv(text: str | None) -> dict:
    """'a=1,b=2' -> {'a': 1.0, 'b': 2.0}."""
    out = {}
    if not text:
        return out
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise InputError(f"expected key=value, got {part!r}")
        k, v = part.split("=", 1)
        try:
            out[k.strip()] = float(v)
        except ValueError:
            raise InputError(f"value for {k.strip()!r} is not a number: {v!r}") from None
    return out


def parse_floats(text: str | None) -> list[float]:
    if not text:
        return []
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise InputError(f"bad number list {text!r}") from exc


def make_env(values: dict) -> MarketEnv:
    extra = set(values) - {"S0", "r", "q"}
    if extra:
        raise InputError(f"unknown env keys {sorted(extra)}")
    return MarketEnv(**values)


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n"


def table_csv(header: list[str], rows: list, meta: dict | None = None) -> str:
    buf = io.StringIO()
    for k in sorted(meta or {}):
        buf.write(f"# {k}={meta[k]}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _read_rows(path) -> tuple[dict, list[tuple[int, dict]], list[str]]:
    """Comment metadata, data rows with their file line numbers, and the header."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file")
    meta: dict = {}
    lines = path.read_text().splitlines()
    body = []
    for lineno, line in enumerate(lines, start=1):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            for part in s[1:].replace(",", " ").split():
                if "=" in part:
                    k, v = part.split("=", 1)
                    meta[k.strip()] = v.strip()
            continue
        body.append((lineno, line))
    if not body:
        raise InputError(f"{path}: no header row")
    reader = csv.reader([b for _, b in body])
    parsed = list(reader)
    header = [h.strip() for h in parsed[0]]
    rows = []
    for (lineno, _), vals in zip(body[1:], parsed[1:]):
        if len(vals) != len(header):
            raise InputError(f"{path}:{lineno}: expected {len(header)} fields, got {len(vals)}")
        rows.append((lineno, dict(zip(header, (v.strip() for v in vals)))))
    return meta, rows, header


def _sidecar_env(path) -> dict:
    side = Path(path).with_suffix(".env.json")
    if not side.exists():
        return {}
    try:
        data = json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{side}: {exc}") from exc
    data = data.get("env", data)
    return {k: float(v) for k, v in data.items() if k in ("S0", "r", "q")}


# ---------------------------------------------------------------------------
# loaders and writers

def load_option_chain(path, env: MarketEnv | None = None) -> calib.OptionChain:
    """Read a chain CSV. Every invalid row is reported, with its line number."""
    meta, rows, header = _read_rows(path)
    missing = {"strike", "maturity", "mid"} - set(header)
    if missing:
        raise InputError(f"{path}: missing columns {sorted(missing)}")
    if env is None:
        values = {k: float(meta[k]) for k in ("S0", "r", "q") if k in meta}
        values.update(_sidecar_env(path))
        if "S0" not in values:
            raise InputError(f"{path}: no S0 in comment metadata or sidecar env file")
        env = make_env(values)
    quotes, problems = [], []
    for lineno, row in rows:
        try:
            vals = {}
            for key in ("strike", "maturity", "mid", "bid", "ask", "weight"):
                raw = row.get(key, "")
                vals[key] = float(raw) if raw != "" else None
            for key in ("strike", "maturity", "mid"):
                if vals[key] is None:
                    raise DomainError(f"{key} is empty")
            if vals["bid"] is not None and vals["ask"] is not None and vals["bid"] > vals["ask"]:
                raise DomainError(f"bid {vals['bid']} above ask {vals['ask']}")
            quotes.append(calib.OptionQuote(**vals))
        except (ValueError, DomainError) as exc:
            problems.append(f"line {lineno}: {exc}")
    if problems:
        raise InputError(f"{path}: " + "; ".join(problems))
    if not quotes:
        raise InputError(f"{path}: no quotes")
    return calib.OptionChain(quotes, env)


def write_option_chain(chain: calib.OptionChain, meta: dict | None = None) -> str:
    env = chain.env
    m = {"S0": _fmt(env.S0), "r": _fmt(env.r), "q": _fmt(env.q)}
    m.update(meta or {})
    rows = [(q.strike, q.maturity, q.mid) for q in chain.quotes]
    return table_csv(["strike", "maturity", "mid"], rows, m)


def load_price_series(path, dt: float | None = None) -> pf.LogReturnSeries:
    """Read a time,price CSV with uniformly spaced increasing times."""
    _, rows, header = _read_rows(path)
    if not {"time", "price"} <= set(header):
        raise InputError(f"{path}: need columns time,price")
    try:
        t = np.array([float(r["time"]) for _, r in rows])
        p = np.array([float(r["price"]) for _, r in rows])
        lp = np.array([float(r["log_price"]) for _, r in rows]) if "log_price" in header else None
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc
    if t.size < 3:
        raise InputError(f"{path}: need at least three prices")
    bad = np.flatnonzero(~(p > 0))
    if bad.size:
        raise InputError(f"{path}: nonpositive price at line(s) {[rows[i][0] for i in bad]}")
    steps = np.diff(t)
    if np.any(steps <= 0):
        i = int(np.flatnonzero(steps <= 0)[0])
        raise InputError(f"{path}:{rows[i + 1][0]}: times must increase")
    step = (t[-1] - t[0]) / (t.size - 1)
    if np.any(np.abs(steps - step) > 1e-9 * step + 1e-12 * abs(t[-1])):
        raise InputError(f"{path}: time spacing is not uniform")
    if dt is not None and abs(dt - step) > 1e-9 * dt:
        raise InputError(f"{path}: time step {step!r} does not match dt={dt!r}")
    return pf.LogReturnSeries(lp if lp is not None else np.log(p), step)


def write_price_series(times, log_prices, meta: dict | None = None) -> str:
    lp = np.asarray(log_prices, dtype=float)
    rows = [(float(t), float(math.exp(x)), float(x)) for t, x in zip(times, lp)]
    return table_csv(["time", "price", "log_price"], rows, meta)


# ---------------------------------------------------------------------------
# configuration

@dataclass
class RunConfig:
    command: str
    model: str = "vg"
    params: dict = field(default_factory=dict)
    env: dict = field(default_factory=lambda: {"S0": 100.0, "r": 0.0, "q": 0.0})
    method: str = "cos"
    seed: int = 0
    fmt: str = "json"
    out: str | None = None
    options: dict = field(default_factory=dict)

    def market(self) -> MarketEnv:
        return make_env(self.env)

    def model_params(self, params: dict | None = None) -> ModelParams:
        return make_model(self.model, **(self.params if params is None else params))

    def opt(self, key, default=None):
        v = self.options.get(key)
        return default if v is None else v


def mc_config(cfg: RunConfig, seed: int | None = None) -> mc.McConfig:
    return mc.McConfig(num_paths=int(cfg.opt("paths", 10000)), steps=int(cfg.opt("steps", 100)),
                       seed=cfg.seed if seed is None else seed,
                       antithetic=not cfg.opt("no_antithetic", False),
                       cgmy_epsilon=float(cfg.opt("cgmy_epsilon", 1e-4)))


def default_strip(S0: float, n: int = STRIP_SIZE, width: float = STRIP_WIDTH) -> np.ndarray:
    return np.linspace(S0 * (1 - width), S0 * (1 + width), n)


# ---------------------------------------------------------------------------
# commands

def price_strikes(model: ModelParams, env: MarketEnv, K, T: float, method: str,
                  mc_cfg: mc.McConfig, kind: str = "call"):
    """Premiums and (for Monte Carlo) standard errors."""
    K = np.asarray(K, dtype=float)
    if method == "analytic":
        if model.kind == "bs":
            f = pricing.bs_call if kind == "call" else pricing.bs_put
            return np.atleast_1d(f(env, K, T, model.sigma)), None
        if model.kind == "vg" and kind == "call":
            return np.atleast_1d(pricing.vg_call_analytic(env, K, T, model)), None
        raise UnsupportedModelError(f"no analytic {kind} price for {model.kind}")
    if method == "fft":
        if kind != "call":
            raise UnsupportedModelError("the FFT pricer returns calls only")
        return np.atleast_1d(pricing.fft_price(model, env, K, T)), None
    if method == "cos":
        return np.atleast_1d(pricing.cos_price(model, env, K, T, kind=kind)), None
    if method == "mc":
        res = mc.mc_price_model(model, env, K, T, mc_cfg, kind)
        return np.array([r.premium for r in res]), np.array([r.standard_error for r in res])
    raise InputError(f"unknown method {method!r}")


def cmd_price(cfg: RunConfig) -> dict:
    env = cfg.market()
    model = cfg.model_params()
    K = parse_floats(cfg.opt("strikes")) or [env.S0]
    T = float(cfg.opt("maturity", 1.0))
    kind = cfg.opt("kind", "call")
    prices, se = price_strikes(model, env, K, T, cfg.method, mc_config(cfg), kind)
    rows = [{"strike": k, "premium": float(p)} for k, p in zip(K, prices)]
    if se is not None:
        for row, s in zip(rows, se):
            row["standard_error"] = float(s)
    return {"command": "price", "model": model_to_dict(model), "env": cfg.env, "method": cfg.method,
            "kind": kind, "maturity": T, "prices": rows}


def cmd_simulate(cfg: RunConfig) -> dict:
    env = cfg.market()
    model = cfg.model_params()
    T = float(cfg.opt("maturity", 1.0))
    steps = int(cfg.opt("steps", 252))
    n = int(cfg.opt("paths", 1))
    sim_cfg = mc.McConfig(num_paths=max(n, 2), steps=steps, seed=cfg.seed, antithetic=False,
                          cgmy_epsilon=float(cfg.opt("cgmy_epsilon", 1e-4)))
    paths = mc.simulate(model, env, T, sim_cfg)
    meta = {"model": model.kind, "seed": cfg.seed, "steps": steps, "T": _fmt(T),
            **{k: _fmt(v) for k, v in model_to_dict(model).items() if k != "model"},
            **{k: _fmt(v) for k, v in cfg.env.items()}}
    return {"command": "simulate", "meta": meta, "times": paths.times,
            "log_prices": paths.log_prices[:n], "diagnostics": paths.diagnostics}


def _prior_from(cfg: RunConfig) -> ModelParams | None:
    prior = cfg.opt("prior")
    if not prior:
        return None
    return make_model(cfg.model, **(prior if isinstance(prior, dict) else parse_kv(prior)))


def _calibrate_chain(chain: calib.OptionChain, cfg: RunConfig, prior: ModelParams | None,
                     extra_starts=()) -> calib.CalibrationResult:
    alpha = cfg.opt("alpha")
    if alpha is None:
        scale = float(cfg.opt("scale_A", 0.0))
        alpha = calib.choose_alpha(chain, scale) if prior is not None else 0.0
    alpha = float(alpha)
    weights = calib.vega_weights(chain) if cfg.opt("weights", "vega") == "vega" else None
    starts = list(extra_starts) + calib.start_grid(cfg.model)
    method = "cos" if cfg.method == "analytic" else cfg.method
    return calib.multistart_calibrate(chain, starts, alpha, prior, weights,
                                      calib.make_pricer(method, mc_cfg=mc_config(cfg)),
                                      threads=int(cfg.opt("threads", 1)))


def result_dict(r: calib.CalibrationResult) -> dict:
    return {"params": model_to_dict(r.params), "objective": r.objective, "rmse": r.rmse,
            "rmse_w": r.rmse_w, "entropy": r.entropy, "alpha": r.alpha,
            "iterations": r.iterations, "start_id": r.start_id, "converged": r.converged}


def cmd_calibrate(cfg: RunConfig) -> dict:
    chain_path = cfg.opt("chain")
    if not chain_path:
        raise InputError("calibrate needs --chain")
    chain = load_option_chain(chain_path, cfg.market() if cfg.opt("env_given") else None)
    prior = _prior_from(cfg)
    res = _calibrate_chain(chain, cfg, prior, [prior] if prior is not None else [])
    return {"command": "calibrate", "result": result_dict(res), "quotes": len(chain)}


def _vgsa_from(cfg: RunConfig, params: dict | None = None) -> VGSA:
    p = dict(cfg.params if params is None else params)
    if cfg.model == "vg" or not {"kappa", "eta"} & set(p):
        p.setdefault("kappa", 0.0)
        p.setdefault("eta", 1.0)
        p.setdefault("lam", p.pop("lambda", 0.0))
    return make_model("vgsa", **{k: v for k, v in p.items() if k != "y0"})


def cmd_filter(cfg: RunConfig) -> dict:
    series_path = cfg.opt("series")
    if not series_path:
        raise InputError("filter needs --series")
    series = load_price_series(series_path)
    if np.all(series.returns == 0.0):
        raise InputError(f"{series_path}: price series is constant")
    params = _vgsa_from(cfg)
    mu = float(cfg.opt("mu", cfg.env.get("r", 0.0) - cfg.env.get("q", 0.0)))
    pcfg = pf.PfConfig(int(cfg.opt("particles", 100)), cfg.seed)
    out = {"command": "filter", "mu": mu, "particles": pcfg.n_particles}
    if cfg.opt("fit"):
        fixed = tuple(x for x in str(cfg.opt("fixed", "")).split(",") if x)
        fit = pf.pf_mle(series, params, pcfg, mu=mu, fixed=fixed)
        out.update(fit={"params": model_to_dict(fit.params), "nll": fit.nll,
                        "start_nll": fit.start_nll, "anchored_drift": fit.anchored_drift,
                        "iterations": fit.optimizer.iterations})
        params = fit.params
    res = pf.vgsa_pf_loglik(series, params, pcfg, mu=mu)
    out.update(params=model_to_dict(params), nll=res.nll, degenerate_steps=res.degenerate_steps,
               state_estimates=res.state_estimates, prediction_errors=res.prediction_errors,
               error_variances=res.error_variances)
    return out


@dataclass
class BacktestReport:
    days: list
    table: list
    summary: dict


def synthetic_chain(model: ModelParams, env: MarketEnv, T: float, strikes) -> calib.OptionChain:
    prices = pricing.cos_price(model, env, np.asarray(strikes, dtype=float), T)
    return calib.OptionChain([calib.OptionQuote(float(k), T, float(p)) for k, p in zip(strikes, prices)], env)


def cmd_backtest_rmemc(cfg: RunConfig) -> BacktestReport:
    """Day-by-day calibration on synthetic chains, each day's fit the next day's prior."""
    env = cfg.market()
    truth0 = cfg.model_params()
    days = int(cfg.opt("days", 10))
    T = float(cfg.opt("maturity", 0.5))
    final = parse_kv(cfg.opt("final")) if isinstance(cfg.opt("final"), str) else dict(cfg.opt("final", {}))
    strikes = default_strip(env.S0, int(cfg.opt("strip", STRIP_SIZE)))
    base = model_to_dict(truth0)
    base.pop("model")
    rows, day_out = [], []
    prior = _prior_from(cfg)
    for d in range(days):
        frac = d / (days - 1) if days > 1 else 0.0
        params = {k: v + frac * (final.get(k, v) - v) for k, v in base.items()}
        truth = cfg.model_params(params)
        chain = synthetic_chain(truth, env, T, strikes)
        # without a prior the first day is fitted unregularized
        day_cfg = cfg if prior is not None else RunConfig(**{**vars(cfg), "options": {**cfg.options, "alpha": 0.0}})
        try:
            res = _calibrate_chain(chain, day_cfg, prior, [prior] if prior is not None else [])
        except (calib.CalibrationError, DomainError, NumericalError) as exc:
            day_out.append({"day": d + 1, "error": str(exc)})
            continue
        fitted = calib.model_prices(res.params, chain)
        sse = float(np.sum((fitted - chain.mids) ** 2))
        day_out.append({"day": d + 1, "truth": model_to_dict(truth), **result_dict(res), "sse": sse})
        rows.append([d + 1, sse, res.entropy, res.alpha,
                     *[v for k, v in model_to_dict(res.params).items() if k != "model"]])
        prior = res.params
    names = [k for k in model_to_dict(truth0) if k != "model"]
    header = ["day", "sse", "entropy", "alpha", *names]
    ok = [d for d in day_out if "sse" in d]
    summary = {"days": days, "failed_days": days - len(ok),
               "mean_sse": float(np.mean([d["sse"] for d in ok])) if ok else math.nan}
    return BacktestReport(day_out, [header] + rows, summary)


def simulate_path(params: VG, env: MarketEnv, T: float, steps: int, seed: int) -> pf.LogReturnSeries:
    paths = mc.simulate(params, env, T, mc.McConfig(num_paths=2, steps=steps, seed=seed, antithetic=False))
    return pf.LogReturnSeries(paths.log_prices[0], T / steps)


def cmd_backtest_pf(cfg: RunConfig) -> BacktestReport:
    """Simulate a path, estimate VGSA parameters from it by particle filtering."""
    env = cfg.market()
    truth_kw = dict(DEFAULT_PATH_PARAMS)
    truth_kw.update(cfg.params)
    truth = make_model("vg", **{k: truth_kw[k] for k in ("sigma", "nu", "theta")})
    T = float(cfg.opt("maturity", 1.0))
    steps = int(cfg.opt("steps", 2520))
    series_path = cfg.opt("series")
    series = load_price_series(series_path) if series_path else simulate_path(truth, env, T, steps, cfg.seed)
    if np.all(series.returns == 0.0):
        raise InputError("price series is constant")
    mu = env.r - env.q
    pcfg = pf.PfConfig(int(cfg.opt("particles", 100)), int(cfg.opt("filter_seed", cfg.seed)))
    start = parse_kv(cfg.opt("start")) if isinstance(cfg.opt("start"), str) else dict(cfg.opt("start", {}))
    x0 = VGSA(start.get("sigma", 0.2), start.get("nu", 0.2), start.get("theta", 0.0),
              start.get("kappa", 0.0), start.get("eta", 1.0), start.get("lam", 0.0))
    fixed = tuple(x for x in str(cfg.opt("fixed", "kappa,eta,lam")).split(",") if x)
    fit = pf.pf_mle(series, x0, pcfg, mu=mu, fixed=fixed)
    out = pf.vgsa_pf_loglik(series, fit.params, pcfg, mu=mu)
    truth_nll = pf.vgsa_pf_loglik(series, truth, pcfg, mu=mu).nll
    z = series.log_prices
    predicted = np.concatenate([[z[0]], z[:-1] + np.diff(z) - out.prediction_errors[1:]])
    header = ["step", "time", "log_price", "predicted_log_price", "state_estimate"]
    rows = [[k, k * series.dt, z[k], predicted[k], out.state_estimates[k]] for k in range(z.size)]
    summary = {"truth": model_to_dict(truth), "estimate": model_to_dict(fit.params),
               "nll": fit.nll, "truth_nll": truth_nll, "start_nll": fit.start_nll,
               "anchored_drift": fit.anchored_drift, "steps": z.size - 1}
    return BacktestReport([], [header] + rows, summary)


def compare_premiums(ls: ModelParams, pf_params: ModelParams, actual: np.ndarray, env: MarketEnv,
                     T: float, strikes, mc_cfg: mc.McConfig) -> BacktestReport:
    """LS and PF premiums on a strip, same Monte Carlo seed, against actual premiums."""
    strikes = np.asarray(strikes, dtype=float)
    ls_mc = mc.mc_price_model(ls, env, strikes, T, mc_cfg)
    pf_mc = mc.mc_price_model(pf_params, env, strikes, T, mc_cfg)
    ls_cos = pricing.cos_price(ls, env, strikes, T)
    pf_cos = pricing.cos_price(pf_params, env, strikes, T)
    header = ["strike", "actual", "ls_mc", "pf_mc", "ls_se", "pf_se", "ls_cos", "pf_cos",
              "ls_pf_abs", "ls_actual_abs", "pf_actual_abs"]
    rows = []
    for i, k in enumerate(strikes):
        a, l, p = float(actual[i]), ls_mc[i].premium, pf_mc[i].premium
        rows.append([k, a, l, p, ls_mc[i].standard_error, pf_mc[i].standard_error,
                     float(ls_cos[i]), float(pf_cos[i]), abs(l - p), abs(l - a), abs(p - a)])
    arr = np.array([r[8:] for r in rows])
    summary = {"mean_ls_pf_abs": float(arr[:, 0].mean()), "mean_ls_actual_abs": float(arr[:, 1].mean()),
               "mean_pf_actual_abs": float(arr[:, 2].mean()),
               "ls": model_to_dict(ls), "pf": model_to_dict(pf_params)}
    summary["ls_pf_agree_more"] = summary["mean_ls_pf_abs"] <= summary["mean_ls_actual_abs"]
    return BacktestReport([], [header] + rows, summary)


def _load_params(spec, kind_default: str) -> ModelParams:
    if isinstance(spec, dict):
        d = dict(spec)
    elif isinstance(spec, str) and Path(spec).exists():
        data = json.loads(Path(spec).read_text())
        d = (data.get("result") or data.get("fit") or data).get("params", data)
    else:
        parts = [x for x in str(spec).split(",") if x.strip()]
        kinds = [x.split("=", 1)[1].strip() for x in parts if x.strip().startswith("model=")]
        d = parse_kv(",".join(x for x in parts if not x.strip().startswith("model=")))
        if kinds:
            d["model"] = kinds[-1]
    kind = d.pop("model", kind_default)
    return make_model(kind, **d)


def cmd_compare(cfg: RunConfig) -> BacktestReport:
    env = cfg.market()
    if not cfg.opt("ls") or not cfg.opt("pf"):
        raise InputError("compare needs --ls and --pf parameter sets")
    ls = _load_params(cfg.opt("ls"), cfg.model)
    pf_params = _load_params(cfg.opt("pf"), "vgsa")
    T = float(cfg.opt("maturity", 1.0))
    strikes = parse_floats(cfg.opt("strikes")) or default_strip(env.S0)
    truth = _load_params(cfg.opt("truth"), cfg.model) if cfg.opt("truth") else ls
    actual_cfg = mc_config(cfg, int(cfg.opt("actual_seed", cfg.seed + 1)))
    actual = np.array([r.premium for r in mc.mc_price_model(truth, env, strikes, T, actual_cfg)])
    return compare_premiums(ls, pf_params, actual, env, T, strikes, mc_config(cfg))


def run_pipeline(cfg: RunConfig) -> BacktestReport:
    """Full cross-check on a synthetic VG world.

    The actual premiums are Monte Carlo prices under the true parameters with
    their own seed. Least squares calibrates to those quotes; the particle
    filter estimates from one simulated price path; both estimates are then
    priced with a shared seed.
    """
    env = cfg.market()
    truth_kw = dict(DEFAULT_PATH_PARAMS)
    truth_kw.update(cfg.params)
    truth = make_model("vg", **{k: truth_kw[k] for k in ("sigma", "nu", "theta")})
    T_opt = float(cfg.opt("maturity", 1.0))
    strikes = default_strip(env.S0, int(cfg.opt("strip", STRIP_SIZE)))
    actual_cfg = mc_config(cfg, int(cfg.opt("actual_seed", cfg.seed + 1)))
    actual = np.array([r.premium for r in mc.mc_price_model(truth, env, strikes, T_opt, actual_cfg)])
    chain = calib.OptionChain([calib.OptionQuote(float(k), T_opt, float(p))
                               for k, p in zip(strikes, actual)], env)
    ls_cfg = RunConfig("calibrate", model="vg", env=cfg.env, method="cos", seed=cfg.seed,
                       options={"alpha": 0.0, "threads": cfg.opt("threads", 1)})
    ls = _calibrate_chain(chain, ls_cfg, None)
    pf_report = cmd_backtest_pf(RunConfig("backtest-pf", model="vg", params=truth_kw, env=cfg.env,
                                          seed=int(cfg.opt("path_seed", cfg.seed)),
                                          options={k: cfg.opt(k) for k in
                                                   ("particles", "steps", "start", "fixed", "filter_seed")}))
    est = pf_report.summary["estimate"]
    pf_model = make_model("vgsa", **{k: v for k, v in est.items() if k != "model"})
    if pf_model.lam == 0.0 and pf_model.kappa == 0.0:
        pf_model = pf_model.vg
    report = compare_premiums(ls.params, pf_model, actual, env, T_opt, strikes, mc_config(cfg))
    report.summary.update(ls_result=result_dict(ls), pf_summary=pf_report.summary,
                          truth=model_to_dict(truth))
    return report


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file whose keys override the defaults")
    common.add_argument("--model", choices=["bs", "vg", "vgsa", "cgmy"])
    common.add_argument("--method", choices=["analytic", "fft", "cos", "mc"])
    common.add_argument("--params", default=None, help="model parameters k=v,...")
    common.add_argument("--env", default=None, help="market settings S0=..,r=..,q=..")
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--format", choices=["json", "csv"])
    common.add_argument("--chain")
    common.add_argument("--series")
    common.add_argument("--strikes")
    common.add_argument("--maturity", type=float)
    common.add_argument("--kind", choices=["call", "put"])
    common.add_argument("--paths", type=int)
    common.add_argument("--steps", type=int)
    common.add_argument("--particles", type=int)
    common.add_argument("--alpha", type=float)
    common.add_argument("--scale-A", dest="scale_A", type=float)
    common.add_argument("--prior")
    common.add_argument("--mu", type=float)
    common.add_argument("--fit", action="store_true", default=None)
    common.add_argument("--fixed")
    common.add_argument("--days", type=int)
    common.add_argument("--final", help="parameter values on the last backtest day")
    common.add_argument("--start", help="filter start parameters")
    common.add_argument("--ls")
    common.add_argument("--pf")
    common.add_argument("--truth")
    common.add_argument("--weights", choices=["vega", "unit"])
    p = argparse.ArgumentParser(prog="levyq", description="Levy model option pricing and estimation")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("price", "simulate", "calibrate", "filter", "backtest-rmemc", "backtest-pf",
                 "compare", "backtest"):
        sub.add_parser(name, parents=[common])
    return p


_TOP_LEVEL = {"command", "config", "model", "method", "params", "env", "seed", "out", "format"}


def config_from_args(argv) -> RunConfig:
    """Defaults, then the --config file, then explicit flags."""
    args = build_parser().parse_args(argv)
    merged: dict = {}
    if args.config:
        try:
            merged = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"config {args.config}: {exc}") from exc
        if not isinstance(merged, dict):
            raise InputError("config file must hold a JSON object")
    merged.update({k: v for k, v in vars(args).items() if v is not None})
    params = merged.get("params") or {}
    params = dict(params) if isinstance(params, dict) else parse_kv(params)
    env = {"S0": 100.0, "r": 0.0, "q": 0.0}
    e = merged.get("env")
    env.update((e if isinstance(e, dict) else parse_kv(e)) if e else {})
    options = {k: v for k, v in merged.items() if k not in _TOP_LEVEL}
    options["env_given"] = e is not None
    return RunConfig(command=args.command, model=merged.get("model", "vg"), params=params, env=env,
                     method=merged.get("method", "cos"), seed=int(merged.get("seed", 0)),
                     fmt=merged.get("format", "json"), out=merged.get("out"), options=options)


def render(cfg: RunConfig, result) -> str:
    if isinstance(result, BacktestReport):
        if cfg.fmt == "csv":
            return table_csv(result.table[0], result.table[1:])
        return dumps_json({"command": cfg.command, "days": result.days, "summary": result.summary,
                           "table": result.table})
    if cfg.fmt == "csv":
        if cfg.command == "simulate":
            meta = result["meta"]
            if len(result["log_prices"]) == 1:
                return write_price_series(result["times"], result["log_prices"][0], meta)
            header = ["time"] + [f"log_price_{i}" for i in range(len(result["log_prices"]))]
            rows = [[t, *col] for t, col in zip(result["times"], np.asarray(result["log_prices"]).T)]
            return table_csv(header, rows, meta)
        if cfg.command == "price":
            keys = list(result["prices"][0])
            return table_csv(keys, [[r[k] for k in keys] for r in result["prices"]])
        if cfg.command == "filter":
            rows = [[k, a, b, c] for k, (a, b, c) in enumerate(zip(
                result["state_estimates"], result["prediction_errors"], result["error_variances"]))]
            return table_csv(["step", "state_estimate", "prediction_error", "error_variance"], rows,
                             {"nll": _fmt(result["nll"])})
        if cfg.command == "calibrate":
            r = result["result"]
            keys = sorted(k for k in r if k != "params")
            pk = [k for k in r["params"] if k != "model"]
            return table_csv(keys + pk, [[r[k] for k in keys] + [r["params"][k] for k in pk]])
    return dumps_json(result)


COMMANDS = {
    "price": cmd_price,
    "simulate": cmd_simulate,
    "calibrate": cmd_calibrate,
    "filter": cmd_filter,
    "backtest-rmemc": cmd_backtest_rmemc,
    "backtest-pf": cmd_backtest_pf,
    "compare": cmd_compare,
    "backtest": run_pipeline,
}


def main(argv=None) -> int:
    try:
        cfg = config_from_args(argv)
        text = render(cfg, COMMANDS[cfg.command](cfg))
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    except (InputError, DomainError, UnsupportedModelError, KeyError) as exc:
        print(f"levyq: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericalError, ArithmeticError, calib.CalibrationError, mc.PathBudgetError) as exc:
        print(f"levyq: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    if cfg.out:
        Path(cfg.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
