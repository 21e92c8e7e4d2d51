import json
import math

import numpy as np
import pytest

from levyq import cli, mc
from levyq.cli import (
    InputError, RunConfig, cmd_backtest_pf, cmd_backtest_rmemc, compare_premiums, load_option_chain,
    load_price_series, main, parse_kv, write_option_chain, write_price_series,
)
from levyq.models import VG, MarketEnv

VG_ARGS = ["--model", "vg", "--params", "sigma=0.2,nu=0.1,theta=0.15"]


def _write(path, text):
    path.write_text(text)
    return str(path)


# --- parsing and loaders -----------------------------------------------------------

def test_parse_kv():
    assert parse_kv("a=1, b=2.5") == {"a": 1.0, "b": 2.5}
    assert parse_kv(None) == {}
    with pytest.raises(InputError):
        parse_kv("a")
    with pytest.raises(InputError):
        parse_kv("a=x")


def test_chain_two_rows(tmp_path):
    f = _write(tmp_path / "c.csv", "# S0=100 r=0.05 q=0\nstrike,maturity,mid\n95,0.5,8.1\n105,0.5,3.2\n")
    chain = load_option_chain(f)
    assert len(chain) == 2
    assert chain.env == MarketEnv(100.0, 0.05, 0.0)
    np.testing.assert_array_equal(chain.strikes, [95.0, 105.0])


def test_chain_crossed_quote_names_the_row(tmp_path):
    f = _write(tmp_path / "c.csv", "# S0=100\nstrike,maturity,mid,bid,ask\n"
                                   "95,0.5,8.1,8.0,8.2\n105,0.5,3.2,3.3,3.1\nabc,0.5,1,,\n")
    with pytest.raises(InputError) as exc:
        load_option_chain(f)
    msg = str(exc.value)
    assert "line 4" in msg and "bid" in msg
    assert "line 5" in msg
    assert "line 3" not in msg


def test_chain_sidecar_env(tmp_path):
    f = _write(tmp_path / "desk.csv", "strike,maturity,mid\n90,0.194387,3.0\n")
    (tmp_path / "desk.env.json").write_text(json.dumps({"env": {"S0": 90.692, "r": 0.0179}, "T": 0.194387}))
    chain = load_option_chain(f)
    assert chain.env == MarketEnv(90.692, 0.0179, 0.0)
    assert chain.quotes[0].maturity == 0.194387


def test_chain_without_spot_or_columns(tmp_path):
    with pytest.raises(InputError):
        load_option_chain(_write(tmp_path / "a.csv", "strike,maturity,mid\n90,1,3\n"))
    with pytest.raises(InputError):
        load_option_chain(_write(tmp_path / "b.csv", "# S0=100\nstrike,mid\n90,3\n"))
    with pytest.raises(InputError):
        load_option_chain(tmp_path / "missing.csv")


def test_chain_writer_round_trips(tmp_path):
    f = _write(tmp_path / "c.csv", "# S0=100 r=0.05 q=0.01\nstrike,maturity,mid\n95,0.5,8.1\n105,0.25,3.2\n")
    chain = load_option_chain(f)
    again = load_option_chain(_write(tmp_path / "d.csv", write_option_chain(chain)))
    assert again.env == chain.env
    np.testing.assert_array_equal(again.mids, chain.mids)
    np.testing.assert_array_equal(again.maturities, chain.maturities)


def test_series_rejects_descending_times(tmp_path):
    f = _write(tmp_path / "s.csv", "time,price\n0,100\n0.1,101\n0.05,99\n")
    with pytest.raises(InputError, match="increase"):
        load_price_series(f)


def test_series_rejects_bad_prices_and_spacing(tmp_path):
    with pytest.raises(InputError, match="nonpositive"):
        load_price_series(_write(tmp_path / "a.csv", "time,price\n0,100\n1,0\n2,99\n"))
    with pytest.raises(InputError, match="uniform"):
        load_price_series(_write(tmp_path / "b.csv", "time,price\n0,100\n1,101\n3,99\n"))
    with pytest.raises(InputError, match="dt"):
        load_price_series(_write(tmp_path / "c.csv", "time,price\n0,100\n1,101\n2,99\n"), dt=0.5)


def test_constant_series_has_zero_returns(tmp_path):
    s = load_price_series(_write(tmp_path / "s.csv", "time,price\n0,50\n0.5,50\n1,50\n1.5,50\n"))
    np.testing.assert_array_equal(s.returns, 0.0)
    assert s.dt == 0.5


def test_simulated_series_round_trips_exactly(tmp_path):
    env = MarketEnv(100.0, 0.1, 0.0)
    paths = mc.simulate(VG(0.28, 0.41, 0.1), env, 1.0, mc.McConfig(num_paths=2, steps=252, seed=4, antithetic=False))
    f = _write(tmp_path / "s.csv", write_price_series(paths.times, paths.log_prices[0], {"seed": 4}))
    s = load_price_series(f)
    np.testing.assert_array_equal(s.log_prices, paths.log_prices[0])
    assert s.dt == pytest.approx(1 / 252, rel=1e-12)


# --- exit codes and determinism -------------------------------------------------------

def test_exit_codes(tmp_path, capsys):
    out = str(tmp_path / "o.json")
    assert main(["price", *VG_ARGS, "--strikes", "90,100", "--out", out]) == 0
    assert main(["price", "--model", "vg", "--params", "sigma=-1,nu=0.1,theta=0"]) == 1
    assert main(["calibrate", *VG_ARGS]) == 1
    assert main(["price", "--model", "heston"]) == 1
    assert main(["price", "--model", "cgmy", "--params", "C=1,G=5,M=10,Y=1.5", "--method", "mc",
                 "--maturity", "1e4", "--paths", "100", "--steps", "1"]) == 2
    err = capsys.readouterr().err
    assert "invalid input" in err and "numerical failure" in err


def test_price_output(tmp_path):
    out = tmp_path / "o.json"
    main(["price", "--model", "bs", "--params", "sigma=0.2", "--env", "S0=100,r=0.1", "--method", "analytic",
          "--out", str(out)])
    data = json.loads(out.read_text())
    assert data["prices"][0]["premium"] == pytest.approx(13.2697, abs=5e-4)


def test_config_file_and_flag_override(tmp_path):
    conf = tmp_path / "run.json"
    conf.write_text(json.dumps({"model": "bs", "params": {"sigma": 0.3}, "env": {"S0": 100, "r": 0.1},
                                "method": "analytic", "strikes": "100"}))
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    main(["price", "--config", str(conf), "--out", str(a)])
    main(["price", "--config", str(conf), "--params", "sigma=0.2", "--out", str(b)])
    pa = json.loads(a.read_text())["prices"][0]["premium"]
    pb = json.loads(b.read_text())["prices"][0]["premium"]
    assert pa > pb == pytest.approx(13.2697, abs=5e-4)


def _series_file(tmp_path, steps=126, seed=3):
    env = MarketEnv(100.0, 0.1, 0.0)
    paths = mc.simulate(VG(0.28, 0.41, 0.1), env, 0.5, mc.McConfig(num_paths=2, steps=steps, seed=seed,
                                                                    antithetic=False))
    return _write(tmp_path / "series.csv", write_price_series(paths.times, paths.log_prices[0]))


def _chain_file(tmp_path):
    env = MarketEnv(100.0, 0.05, 0.0)
    chain = cli.synthetic_chain(VG(0.2, 0.1, 0.15), env, 0.5, np.linspace(85, 115, 7))
    return _write(tmp_path / "chain.csv", write_option_chain(chain))


def _runs(tmp_path, name):
    tmp_path = tmp_path / name
    tmp_path.mkdir()
    series, chain = _series_file(tmp_path), _chain_file(tmp_path)
    return {
        "price-cos": ["price", *VG_ARGS, "--strikes", "90,100,110"],
        "price-mc": ["price", *VG_ARGS, "--method", "mc", "--paths", "2000", "--steps", "4", "--seed", "7"],
        "simulate": ["simulate", *VG_ARGS, "--paths", "3", "--steps", "20", "--seed", "2", "--format", "csv"],
        "calibrate": ["calibrate", "--model", "vg", "--chain", chain, "--format", "csv"],
        "filter": ["filter", "--series", series, "--params", "sigma=0.28,nu=0.41,theta=0.1", "--particles", "40",
                   "--env", "S0=100,r=0.1"],
        "backtest-rmemc": ["backtest-rmemc", *VG_ARGS, "--days", "1", "--format", "csv"],
        "backtest-pf": ["backtest-pf", "--series", series, "--particles", "20", "--env", "S0=100,r=0.1"],
        "compare": ["compare", "--ls", "sigma=0.2,nu=0.1,theta=0.15", "--pf", "model=vg,sigma=0.21,nu=0.1,theta=0.15",
                    "--paths", "1000", "--steps", "2", "--strikes", "90,100,110"],
    }


def test_every_command_reruns_byte_identical(tmp_path):
    first, second = _runs(tmp_path, "a"), _runs(tmp_path, "b")
    for name, argv in first.items():
        outs = []
        for i, args in enumerate((argv, second[name])):
            out = tmp_path / f"{name}-{i}.out"
            assert main([*args, "--out", str(out)]) == 0, name
            outs.append(out.read_bytes())
        assert outs[0] == outs[1], name


def test_simulate_csv_reloads(tmp_path):
    out = tmp_path / "sim.csv"
    assert main(["simulate", *VG_ARGS, "--steps", "10", "--seed", "5", "--format", "csv", "--out", str(out)]) == 0
    text = out.read_text()
    assert "# seed=5" in text and "# sigma=0.2" in text
    s = load_price_series(out)
    assert s.log_prices.size == 11 and s.dt == pytest.approx(0.1)


# --- backtests -----------------------------------------------------------------------

ENV = {"S0": 100.0, "r": 0.05, "q": 0.0}
TRUTH = {"sigma": 0.2, "nu": 0.1, "theta": 0.15}


def test_rmemc_day_one_fit_is_exact():
    rep = cmd_backtest_rmemc(RunConfig("backtest-rmemc", "vg", dict(TRUTH), dict(ENV), options={"days": 1}))
    assert rep.days[0]["sse"] < 1e-6
    assert len(rep.table) == 2 and rep.table[0][:4] == ["day", "sse", "entropy", "alpha"]


def test_rmemc_identical_days_keep_parameters():
    rep = cmd_backtest_rmemc(RunConfig("backtest-rmemc", "vg", dict(TRUTH), dict(ENV),
                                       options={"days": 2, "alpha": 0.03}))
    d1, d2 = rep.days
    assert d2["alpha"] == 0.03
    for k in TRUTH:
        assert d2["params"][k] == pytest.approx(d1["params"][k], rel=1e-9)


def test_rmemc_tracks_a_drifting_volatility():
    rep = cmd_backtest_rmemc(RunConfig("backtest-rmemc", "vg", dict(TRUTH), dict(ENV),
                                       options={"days": 10, "scale_A": 1e-3, "final": "sigma=0.25"}))
    sig = np.array([d["params"]["sigma"] for d in rep.days])
    assert rep.summary["failed_days"] == 0
    assert np.all(np.diff(sig) > -1e-3)
    assert abs(sig[-1] - 0.25) < 0.02


def test_rmemc_records_failed_days(monkeypatch):
    def boom(*a, **k):
        raise cli.calib.CalibrationError("every start failed")
    monkeypatch.setattr(cli, "_calibrate_chain", boom)
    rep = cmd_backtest_rmemc(RunConfig("backtest-rmemc", "vg", dict(TRUTH), dict(ENV), options={"days": 3}))
    assert rep.summary["failed_days"] == 3
    assert all("error" in d for d in rep.days)


def test_pf_backtest_smoke():
    rep = cmd_backtest_pf(RunConfig("backtest-pf", "vg", env={"S0": 100.0, "r": 0.1, "q": 0.0}, seed=1,
                                    options={"steps": 252, "particles": 30}))
    s = rep.summary
    assert math.isfinite(s["truth_nll"]) and math.isfinite(s["nll"])
    assert s["nll"] <= s["start_nll"]
    assert len(rep.table) == 1 + 253


def test_pf_backtest_constant_series(tmp_path):
    f = _write(tmp_path / "flat.csv", "time,price\n0,100\n1,100\n2,100\n3,100\n")
    with pytest.raises(InputError, match="constant"):
        cmd_backtest_pf(RunConfig("backtest-pf", options={"series": f}))
    assert main(["backtest-pf", "--series", f]) == 1
    assert main(["filter", "--series", f]) == 1


# --- comparison ----------------------------------------------------------------------

def test_compare_identical_sets_agree_exactly():
    env = MarketEnv(100.0, 0.1, 0.0)
    m = VG(0.28, 0.41, 0.1)
    K = cli.default_strip(100.0)
    actual = np.full(K.size, 10.0)
    rep = compare_premiums(m, m, actual, env, 1.0, K, mc.McConfig(num_paths=2000, steps=1, seed=3))
    assert len(rep.table) == 31
    assert all(row[8] == 0.0 for row in rep.table[1:])
    assert rep.summary["mean_ls_pf_abs"] == 0.0


def test_compare_reseeded_truth_within_noise():
    env = MarketEnv(100.0, 0.1, 0.0)
    m = VG(0.28, 0.41, 0.1)
    K = np.array([80.0, 100.0, 120.0])
    other = mc.mc_price_model(m, env, K, 1.0, mc.McConfig(num_paths=20000, steps=1, seed=99))
    actual = np.array([r.premium for r in other])
    rep = compare_premiums(m, m, actual, env, 1.0, K, mc.McConfig(num_paths=20000, steps=1, seed=5))
    for row, o in zip(rep.table[1:], other):
        joint = math.hypot(row[4], o.standard_error)
        assert row[9] <= 3 * joint
