import json
import threading

import pytest

from voltplug.device import VirtualPlug
from voltplug.errors import InsufficientDataError, PreconditionError
from voltplug.host import protocols
from voltplug.host.cli import main
from voltplug.host.link import PlugServer, TcpLink, parse_address
from voltplug.host.protocols import ValidationReport, render_csv, render_json, render_table, stats
from voltplug.simkernel import load_scenario


def test_stats_examples():
    assert stats([5, 5, 5]) == (5.0, 0.0)
    m, s = stats([1, 2, 3, 4])
    assert m == 2.5 and s == pytest.approx(1.118, abs=5e-4)
    for bad in ([], [1.0]):
        with pytest.raises(InsufficientDataError):
            stats(bad)


def test_report_invariants():
    with pytest.raises(InsufficientDataError):
        ValidationReport("lag", "x", "deg", 1, 0.0, 0.0)
    with pytest.raises(ValueError):
        ValidationReport("lag", "x", "deg", 3, 0.0, 0.0, None, 1.0)
    r = ValidationReport.from_values("rms", "direct", "V", [130.0, 132.0], 131.0)
    assert (r.mean, r.std_dev, r.error_abs, r.error_pct) == (131.0, 1.0, 0.0, 0.0)


def test_renderings_agree_at_printed_precision():
    reps = list(protocols.run_rms_protocol(load_scenario("bench_resistive"), n=5))
    table = render_table(reps).splitlines()
    assert table[0].startswith("# std_dev estimator: population")
    data = json.loads(render_json(reps))
    for row, d in zip(table[2:], data):
        cells = row.split()
        assert cells[3] == f"{d['mean']:.2f}"
        assert cells[4] == f"{d['std_dev']:.2f}"
        assert cells[6] == f"{d['error_abs']:.2f}"
    lines = render_csv(reps).splitlines()
    assert float(lines[1].split(",")[3]) == data[0]["mean"]


def test_power_protocol_precondition():
    with pytest.raises(PreconditionError):
        protocols.run_power_protocol(load_scenario("inductive"), n=3)


def test_lag_protocol_needs_current():
    sc = load_scenario("resistive")
    with pytest.raises(InsufficientDataError):
        protocols.zero_pass_lag(sc, 0, relay_closed=False)


def test_lag_protocol_references():
    assert protocols.run_lag_protocol(load_scenario("inductive"), n=4).reference == 42.0
    rep = protocols.run_lag_protocol(load_scenario("resistive"), n=4)
    assert rep.reference == 0.0 and rep.error_pct is None


def test_rms_truth_is_exact_over_a_drift_period():
    reps = protocols.run_rms_protocol(load_scenario("bench_resistive"))
    assert reps.truth.mean == pytest.approx(131.0, abs=1e-9)
    assert reps.truth.std_dev == pytest.approx(0.3 / 2**0.5, rel=1e-9)
    assert reps.ordered


def test_parse_address():
    assert parse_address("localhost:7000") == ("localhost", 7000)
    with pytest.raises(ValueError):
        parse_address("nope")


# -- CLI ----------------------------------------------------------------------------


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_cli_simulate_deterministic(capsys, tmp_path):
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    assert run_cli(capsys, "simulate", "--scenario", "bench_resistive", "--seed", "7", "--out", str(a))[0] == 0
    assert run_cli(capsys, "simulate", "--scenario", "bench_resistive", "--seed", "7", "--out", str(b))[0] == 0
    assert a.read_bytes() == b.read_bytes()
    assert a.read_text().startswith("t_us,channel,code,saturated\n")
    run_cli(capsys, "simulate", "--scenario", "bench_resistive", "--seed", "8", "--out", str(b))
    assert a.read_bytes() != b.read_bytes()


def test_cli_seed_env_fallback(capsys, monkeypatch):
    monkeypatch.setenv("VOLTPLUG_SEED", "7")
    _, env_out, _ = run_cli(capsys, "simulate", "--scenario", "bench_resistive", "--duration-us", "20000")
    monkeypatch.delenv("VOLTPLUG_SEED")
    _, flag_out, _ = run_cli(capsys, "simulate", "--scenario", "bench_resistive", "--seed", "7", "--duration-us", "20000")
    _, other, _ = run_cli(capsys, "simulate", "--scenario", "bench_resistive", "--seed", "9", "--duration-us", "20000")
    assert env_out == flag_out != other
    monkeypatch.setenv("VOLTPLUG_SEED", "x")
    assert run_cli(capsys, "simulate")[0] == 2


def test_cli_validate_power(capsys):
    code, out, _ = run_cli(capsys, "validate", "power", "--scenario", "resistive", "--n", "30", "--format", "json")
    assert code == 0
    (rep,) = json.loads(out)
    assert rep["n"] == 30 and rep["error_pct"] <= 3


def test_cli_usage_and_protocol_errors(capsys):
    assert run_cli(capsys, "validate", "lag", "--bogus")[0] == 2
    assert run_cli(capsys)[0] == 2
    assert run_cli(capsys, "validate", "power", "--scenario", "inductive", "--n", "3")[0] == 1
    assert run_cli(capsys, "read", "--connect", "127.0.0.1:1")[0] == 1
    assert run_cli(capsys, "simulate", "--scenario", "missing.json")[0] == 2


def test_cli_local_read(capsys):
    code, out, _ = run_cli(capsys, "read", "--relay", "off")
    assert code == 0 and json.loads(out)["irms"] == 0


def test_cli_log_export(capsys):
    code, out, _ = run_cli(capsys, "log", "export", "--duration-us", "200000")
    rows = [json.loads(x) for x in out.splitlines()]
    assert code == 0 and len(rows) == 6
    code, out, _ = run_cli(capsys, "log", "export", "--duration-us", "200000", "--format", "csv")
    assert out.splitlines()[0].startswith("t_virtual_us,scenario,vrms")


@pytest.fixture
def server():
    srv = PlugServer(VirtualPlug(load_scenario("resistive")))
    th = threading.Thread(target=srv.serve_forever, daemon=True)
    th.start()
    yield f"127.0.0.1:{srv.port}"
    srv.shutdown()
    srv.server_close()


def test_cli_against_served_plug(capsys, server):
    assert run_cli(capsys, "relay", "on", "--connect", server)[:2] == (0, "OK\n")
    code, out, _ = run_cli(capsys, "read", "--connect", server)
    assert code == 0 and json.loads(out)["irms"] > 7
    assert run_cli(capsys, "relay", "off", "--connect", server)[:2] == (0, "OK\n")
    code, out, _ = run_cli(capsys, "read", "--connect", server)
    assert code == 0 and json.loads(out)["irms"] == 0
    code, out, _ = run_cli(capsys, "status", "--connect", server)
    assert out.startswith("STATUS relay=off uptime_us=")


def test_tcp_link_errors_reported(server):
    with TcpLink(server) as link:
        assert link.request("RELAYON") == "ERROR parse RELAYON"
        assert link.request("AT") == "ERROR mode"
