import io
import json
import shlex
import sys
from pathlib import Path

import pytest
from plankit import SCENARIOS

from conftest import run_log_dir
from dcaiflow.cli import EXIT_CANCELLED, EXIT_FAILED, EXIT_OK, EXIT_USAGE, main
from dcaiflow.costmodel import HEDM_CONFIG
from dcaiflow.faas import FunctionEndpoint, serve_endpoint
from dcaiflow.flow import Engine, RunStore, audit_store
from dcaiflow.flow.providers import providers_from_doc
from dcaiflow.flow.server import EngineServer
from dcaiflow.timebase import WallClock

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = main([str(a) for a in argv], out, err)
    return code, out.getvalue(), err.getvalue()


def kv(text):
    return dict(line.split("=", 1) for line in text.splitlines())


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ("DCAIFLOW_ENGINE", "DCAIFLOW_ENDPOINT", "DCAIFLOW_PLAN_CONFIG", "DCAIFLOW_N", "DCAIFLOW_P"):
        monkeypatch.delenv(name, raising=False)


# --- plan ---------------------------------------------------------------------------------


def test_plan_small_dataset_stays_conventional():
    code, out, _ = cli("plan", "--preset", "hedm", "--n", "1e6")
    assert code == EXIT_OK
    assert kv(out) == {
        "n": "1000000",
        "p": "0.1",
        "conventional_s": "2.688",
        "local_s": "unavailable",
        "surrogate_s": "19.587",
        "chosen": "conventional",
        "crossover_n": "9030987",
    }


def test_plan_large_dataset_picks_the_surrogate():
    code, out, _ = cli("plan", "--preset", "hedm", "--n", "2e7")
    assert code == EXIT_OK and kv(out)["chosen"] == "surrogate"


def test_plan_reads_a_config_file():
    code, out, _ = cli("plan", "--config", CONFIGS / "hedm.conf")
    assert code == EXIT_OK and kv(out)["conventional_s"] == "2.688"


def test_plan_sweep_csv():
    code, out, _ = cli("plan", "--preset", "hedm", "--sweep", "0:2e7:40")
    lines = out.splitlines()
    assert code == EXIT_OK
    assert lines[0] == "n,conventional_s,surrogate_s"
    assert len(lines) == 41
    gaps = [float(c) - float(s) for _, c, s in (line.split(",") for line in lines[1:])]
    assert gaps[0] < 0 < gaps[-1]


def test_flags_beat_environment_beat_config(tmp_path, monkeypatch):
    conf = tmp_path / "q.conf"
    conf.write_text(HEDM_CONFIG)
    monkeypatch.setenv("DCAIFLOW_PLAN_CONFIG", str(conf))
    monkeypatch.setenv("DCAIFLOW_N", "2e7")
    assert kv(cli("plan")[1])["n"] == "20000000"
    assert kv(cli("plan", "--n", "5")[1])["n"] == "5"
    monkeypatch.setenv("DCAIFLOW_P", "0.5")
    assert kv(cli("plan", "--p", "0.25")[1])["p"] == "0.25"
    assert kv(cli("plan")[1])["p"] == "0.5"


@pytest.mark.parametrize(
    "argv",
    [
        ["plan"],
        ["plan", "--preset", "hedm", "--n", "-3"],
        ["plan", "--preset", "hedm", "--n", "1.5"],
        ["plan", "--preset", "hedm", "--p", "0"],
        ["plan", "--preset", "hedm", "--sweep", "5:1"],
        ["plan", "--config", "/no/such/file.conf"],
        ["frobnicate"],
        ["run", "/no/such/flow.json", "--providers", "x.json"],
    ],
)
def test_usage_errors_exit_3(argv):
    code, out, err = cli(*argv)
    assert code == EXIT_USAGE, err
    assert out == ""


def test_config_errors_name_the_line(tmp_path):
    conf = tmp_path / "bad.conf"
    conf.write_text(HEDM_CONFIG.replace("link.rate_v = 1e9", "link.rate_v = fast"))
    code, _, err = cli("plan", "--config", conf)
    lineno = HEDM_CONFIG.splitlines().index(next(line for line in HEDM_CONFIG.splitlines() if line.startswith("link.rate_v"))) + 1
    assert code == EXIT_USAGE and f":{lineno}" in err


# --- run ----------------------------------------------------------------------------------


def test_virtual_run_prints_the_breakdown():
    code, out, err = cli(
        "run", CONFIGS / "train-flow.json", CONFIGS / "train-args.json",
        "--providers", CONFIGS / "providers-virtual.json", "--virtual", "--runs-dir", run_log_dir(),
    )
    assert code == EXIT_OK, err
    rows = [line.split(",") for line in out.splitlines()]
    assert rows[0] == ["step", "role", "attempt", "state", "seconds"]
    assert [r[0] for r in rows[1:]] == ["data_transfer", "train", "model_transfer"]
    assert rows[2][4] == "19.000"
    assert "Succeeded end_to_end_s=" in err


def test_malformed_flow_exits_3(tmp_path):
    flow = tmp_path / "flow.json"
    flow.write_text(json.dumps({"flow_id": "f", "start": "a", "states": {"a": {"kind": "teleport"}}}))
    code, _, err = cli("run", flow, "--providers", CONFIGS / "providers-virtual.json", "--virtual")
    assert code == EXIT_USAGE and "teleport" in err


def test_run_needs_somewhere_to_run():
    assert cli("run", CONFIGS / "train-flow.json")[0] == EXIT_USAGE


def test_bad_provider_document_exits_3(tmp_path):
    providers = tmp_path / "p.json"
    providers.write_text(json.dumps({"x": {"type": "quantum"}}))
    code, _, err = cli("run", CONFIGS / "train-flow.json", "--providers", providers, "--virtual")
    assert code == EXIT_USAGE and "quantum" in err


def test_missing_flow_input_is_a_usage_error():
    code, _, err = cli("run", CONFIGS / "train-flow.json", "--providers", CONFIGS / "providers-virtual.json", "--virtual")
    assert code == EXIT_USAGE and "train_bytes" in err


PY = shlex.quote(sys.executable)


@pytest.fixture
def engine_server(tmp_path):
    """A wall-clock engine with a real endpoint and real transfers between two directories."""
    ex, dc = tmp_path / "ex", tmp_path / "dc"
    ex.mkdir()
    dc.mkdir()
    (ex / "train.h5").write_bytes(b"patches" * 1000)
    train = f"{PY} -c \"import json, pathlib; pathlib.Path('model.pt').write_bytes(b'weights'); print(json.dumps({{{{'loss': 0.02}}}}))\""
    endpoint = FunctionEndpoint("gpu", capacity=1)
    endpoint.register({"command": train, "cwd": str(dc), "outputs": ["model.pt"]}, name="train")
    endpoint.register({"command": f"{PY} -c \"import sys; sys.exit(4)\""}, name="broken")
    ep_server = serve_endpoint(endpoint)
    clock = WallClock(0.01)
    providers = providers_from_doc(
        {
            "gpu": {"type": "faas", "address": ep_server.address},
            "transfer": {"type": "transfer", "endpoints": {"ex": {"root": str(ex)}, "dc": {"root": str(dc)}}},
        },
        clock,
    )
    store = RunStore(run_log_dir())
    server = EngineServer(Engine(providers, store, clock), poll_interval_s=0.01).start()
    yield server, ex, dc, store
    server.stop()
    ep_server.stop()
    endpoint.shutdown()


def real_flow(tmp_path, fn):
    doc = {
        "flow_id": "real-train",
        "start": "data_transfer",
        "states": {
            "data_transfer": {"kind": "transfer", "provider": "transfer", "role": "data_transfer",
                              "params": {"src": "ex", "dst": "dc", "path": "train.h5"}, "next": "train"},
            "train": {"kind": "compute", "provider": "gpu", "role": "train", "max_retries": 1,
                      "params": {"function": fn}, "next": "model_transfer"},
            "model_transfer": {"kind": "transfer", "provider": "transfer", "role": "model_transfer",
                               "params": {"src": "dc", "dst": "ex", "path": "model.pt"}},
        },
    }
    path = tmp_path / f"{fn}.json"
    path.write_text(json.dumps(doc))
    return path


def test_real_run_through_the_engine_daemon(engine_server, tmp_path):
    server, ex, dc, store = engine_server
    code, out, err = cli("run", real_flow(tmp_path, "train"), "--engine", server.address, "--watch", "--poll-interval", "0.01")
    assert code == EXIT_OK, err
    assert (dc / "train.h5").read_bytes() == (ex / "train.h5").read_bytes()
    assert (ex / "model.pt").read_bytes() == b"weights"
    assert [line.split(",")[3] for line in out.splitlines()[1:]] == ["Succeeded"] * 3
    assert all(r.ok for r in audit_store(store))


def test_failed_step_is_named_and_exit_is_nonzero(engine_server, tmp_path, monkeypatch):
    server, *_ = engine_server
    monkeypatch.setenv("DCAIFLOW_ENGINE", server.address)
    code, _, err = cli("run", real_flow(tmp_path, "broken"), "--watch", "--poll-interval", "0.01")
    assert code == EXIT_FAILED
    assert "failed_step=train" in err and "exit code 4" in err


def test_status_and_cancel(engine_server, tmp_path):
    server, *_ = engine_server
    code, out, _ = cli("run", real_flow(tmp_path, "train"), "--engine", server.address, "--idempotency-key", "k")
    run_id = out.strip()
    assert code == EXIT_OK and run_id
    code, out, _ = cli("status", run_id, "--engine", server.address)
    assert code == EXIT_OK and json.loads(out)["run_id"] == run_id
    code, out, _ = cli("cancel", run_id, "--engine", server.address)
    assert code == EXIT_OK and json.loads(out)["status"] in ("Cancelled", "Succeeded")
    assert cli("status", "no-such-run", "--engine", server.address)[0] == EXIT_FAILED


def test_run_exit_code_for_cancelled_runs():
    from dcaiflow.cli import _breakdown

    run = {"run_id": "r", "status": "Cancelled", "end_to_end_ns": 0, "actions": []}
    assert _breakdown(run, io.StringIO(), io.StringIO()) == EXIT_CANCELLED


def test_unreachable_engine_exits_1():
    code, _, err = cli("status", "r", "--engine", "127.0.0.1:1")
    assert code == EXIT_FAILED and err


# --- endpoint commands ------------------------------------------------------------------------


def test_register_and_invoke(tmp_path):
    endpoint = FunctionEndpoint("local")
    server = serve_endpoint(endpoint)
    try:
        body = tmp_path / "body.json"
        body.write_text(json.dumps({"command": f"{PY} -c \"import json, sys; print(json.dumps(sys.argv[1:]))\" {{who}}"}))
        code, out, _ = cli("register", body, "--name", "hello", "--endpoint", server.address)
        assert code == EXIT_OK and out.strip()
        code, out, err = cli("invoke", "hello", "--arg", "who=world", "--wait", "--endpoint", server.address)
        assert code == EXIT_OK, err
        assert json.loads(out)["output"]["result"] == ["world"]
        assert cli("invoke", "hello", "--arg", "oops", "--endpoint", server.address)[0] == EXIT_USAGE
        assert cli("invoke", "missing", "--endpoint", server.address)[0] == EXIT_FAILED
    finally:
        server.stop()
        endpoint.shutdown()


# --- transfer, bench, simulate -------------------------------------------------------------


def test_transfer_copies_files(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    (src / "a.bin").write_bytes(b"a" * 5000)
    (src / "empty").write_bytes(b"")
    code, out, err = cli("transfer", src / "a.bin", src / "empty", tmp_path / "dst", "--cc", "2")
    assert code == EXIT_OK, err
    assert (tmp_path / "dst" / "a.bin").read_bytes() == b"a" * 5000
    assert (tmp_path / "dst" / "empty").read_bytes() == b""
    assert out.splitlines()[0] == "cc,bytes,seconds,throughput_bps"
    assert out.splitlines()[1].startswith("2,5000,")


def test_transfer_of_a_directory_tree(tmp_path):
    tree = tmp_path / "tree"
    (tree / "sub").mkdir(parents=True)
    (tree / "sub" / "x").write_bytes(b"x")
    (tree / "y").write_bytes(b"yy")
    assert cli("transfer", tree, tmp_path / "dst")[0] == EXIT_OK
    assert (tmp_path / "dst" / "sub" / "x").read_bytes() == b"x"


def test_transfer_of_missing_file_fails(tmp_path):
    (tmp_path / "real").write_bytes(b"1")
    code, _, err = cli("transfer", tmp_path / "real", tmp_path / "ghost", tmp_path / "dst")
    assert code in (EXIT_FAILED, EXIT_USAGE) and err


def test_bench_rows():
    code, out, _ = cli("bench", "--file-bytes", str(8 * 1024 * 1024))
    assert code == EXIT_OK
    rows = [line.split(",") for line in out.splitlines()[1:]]
    assert [int(r[0]) for r in rows] == [1, 2, 4, 8]
    for (cc, _, _, bps), ideal in zip(rows, (3e8, 6e8, 1e9, 1e9)):
        assert float(bps) == pytest.approx(ideal, rel=1e-6)


def test_simulate_prints_the_breakdown(tmp_path):
    timeline = tmp_path / "events.jsonl"
    code, out, _ = cli("simulate", SCENARIOS / "braggnn-cerebras.json", "--timeline", timeline)
    assert code == EXIT_OK
    assert out.splitlines() == ["mode,network,data_transfer_s,train_s,model_transfer_s,end_to_end_s", "remote,cerebras,7,19,5,31"]
    assert all(json.loads(line)["t_ns"] >= 0 for line in timeline.read_text().splitlines())


def test_simulate_rejects_bad_scenarios(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"sites": []}))
    code, _, err = cli("simulate", bad)
    assert code == EXIT_USAGE and "site" in err
