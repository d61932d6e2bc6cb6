import copy
import json
import random

import pytest
from plankit import LOCAL_ROWS, REMOTE_ROWS, SCENARIOS, random_query

from conftest import run_log_dir
from dcaiflow.costmodel import Plan, hedm_query, plan_cost_ns
from dcaiflow.flow import RunStatus, RunStore
from dcaiflow.simnet import (
    BREAKDOWN_HEADER,
    ComparisonError,
    ScenarioError,
    compare_modes,
    load_scenario,
    run_scenario,
    scenario_from_doc,
    scenario_from_plan,
    scenarios_csv,
)

S = 1_000_000_000


def simulate(name_or_scenario):
    scenario = name_or_scenario
    if isinstance(scenario, str):
        scenario = load_scenario(SCENARIOS / f"{scenario}.json")
    return run_scenario(scenario, store=RunStore(run_log_dir()))


@pytest.mark.parametrize("label, network, data, train, model, total", REMOTE_ROWS)
def test_remote_breakdowns(label, network, data, train, model, total):
    run = simulate(label).run(label)
    assert run.status is RunStatus.SUCCEEDED
    assert run.csv_row() == f"remote,{network},{data},{train},{model},{total}"
    assert run.end_to_end_ns == total * S


@pytest.mark.parametrize("label, total", LOCAL_ROWS)
def test_local_breakdowns(label, total):
    assert simulate(label).run(label).csv_row() == f"local,gpu,NA,{total},NA,{total}"


def test_breakdown_csv_lists_every_run():
    timelines = [simulate("braggnn-cerebras"), simulate("braggnn-local")]
    assert scenarios_csv(timelines).splitlines() == [
        BREAKDOWN_HEADER,
        "remote,cerebras,7,19,5,31",
        "local,gpu,NA,1102,NA,1102",
    ]


def test_local_to_remote_ratios():
    def ratio(remote, local):
        return compare_modes(load_scenario(SCENARIOS / f"{remote}.json"), load_scenario(SCENARIOS / f"{local}.json"))

    assert ratio("braggnn-cerebras", "braggnn-local") == pytest.approx(1102 / 31)
    assert ratio("cookienetae-cerebras", "cookienetae-local") == pytest.approx(517 / 15)
    assert ratio("braggnn-sambanova", "braggnn-local") == pytest.approx(1102 / 151)


def test_timeline_is_deterministic():
    scenario = load_scenario(SCENARIOS / "braggnn-sambanova.json")
    first, second = run_scenario(scenario).jsonl(), run_scenario(scenario).jsonl()
    assert first == second
    events = [json.loads(line) for line in first.splitlines()]
    assert [e["seq"] for e in events] == list(range(len(events)))
    assert all(a["t_ns"] <= b["t_ns"] for a, b in zip(events, events[1:]))
    assert {e["entity"].split(":")[0] for e in events} == {"run", "endpoint"}


def doc(name="braggnn-cerebras"):
    return json.loads((SCENARIOS / f"{name}.json").read_text())


def test_crash_during_training_is_retried():
    d = doc()
    d["flows"][0]["definition"]["states"]["train"].update(max_retries=2, retry_backoff=1)
    d["faults"] = [{"kind": "endpoint_crash", "at_s": 10, "endpoint": "cerebras", "down_s": 0.5}]
    run = simulate(scenario_from_doc(d)).runs[0]
    assert run.status is RunStatus.SUCCEEDED
    # 3 s lost in the crashed attempt, 1 s backoff, then the full 19 s
    assert run.end_to_end_ns == (7 + 3 + 1 + 19 + 5) * S


def test_crash_without_retries_fails_the_run():
    d = doc()
    d["flows"][0]["definition"]["states"]["train"]["max_retries"] = 1
    d["faults"] = [{"kind": "endpoint_crash", "at_s": 10, "endpoint": "cerebras"}]
    run = simulate(scenario_from_doc(d)).runs[0]
    assert run.status is RunStatus.FAILED and run.record.failed_state() == "train"
    with pytest.raises(ComparisonError):
        compare_modes(scenario_from_doc(d), load_scenario(SCENARIOS / "braggnn-local.json"))


def test_stream_kill_costs_the_lost_progress():
    d = doc()
    for step in ("data_transfer", "model_transfer"):
        params = d["flows"][0]["definition"]["states"][step]["params"]
        del params["duration_s"], params["path"]
        params.update(bytes=10**9, files=1, chunk_bytes=10**9)
    d["links"][0].update(rate_bps=1e8, startup_s=0)
    d["faults"] = [{"kind": "stream_kill", "at_s": 4, "link": ["slac", "alcf"]}]
    tl = simulate(scenario_from_doc(d))
    run = tl.runs[0]
    assert run.status is RunStatus.SUCCEEDED
    assert run.role_ns("data_transfer") == 14 * S
    assert run.role_ns("model_transfer") == 10 * S
    assert any(e.kind == "stream_kill" and e.payload["hit"] for e in tl.events)


def test_concurrent_runs_queue_on_capacity():
    d = doc()
    d["flows"][0]["runs"] = [{"label": "a"}, {"label": "b", "start_s": 1}]
    tl = simulate(scenario_from_doc(d))
    assert [r.end_to_end_ns for r in tl.runs] == [31 * S, (31 + 18) * S]


def test_orchestration_overhead():
    d = doc()
    d["orchestration_overhead_s"] = 0.5
    assert simulate(scenario_from_doc(d)).runs[0].end_to_end_ns == 32 * S + S // 2


def broken(mutate):
    d = doc()
    mutate(d)
    with pytest.raises(ScenarioError) as info:
        scenario_from_doc(d)
    return str(info.value)


@pytest.mark.parametrize(
    "mutate, fragment",
    [
        (lambda d: d.update(colour="red"), "unknown field 'colour'"),
        (lambda d: d.update(sites=[]), "at least one site"),
        (lambda d: d.update(sites=["slac", "slac"]), "unique"),
        (lambda d: d["links"][0].update(between=["slac", "mars"]), "links[0]: unknown site 'mars'"),
        (lambda d: d["links"].append(copy.deepcopy(d["links"][0])), "duplicate link"),
        (lambda d: d["endpoints"][0].update(kind="gpu"), "endpoints[0]"),
        (lambda d: d["endpoints"][0].update(capacity=0), "capacity"),
        (lambda d: d["endpoints"][1].update(id="transfer"), "reserved"),
        (lambda d: d["functions"][0].update(endpoint="slac-dtn"), "functions[0]"),
        (lambda d: d["functions"][0].update(duration_s=-1), "functions[0].duration_s"),
        (lambda d: d["flows"][0]["definition"]["states"]["train"].update(provider="tpu"), "unknown provider 'tpu'"),
        (lambda d: d["flows"][0]["definition"].update(start="nowhere"), "flows[0].definition"),
        (lambda d: d["flows"][0].pop("definition"), "'definition' or 'path'"),
        (lambda d: d.update(flows=[]), "no runs"),
        (lambda d: d.update(faults=[{"kind": "meteor", "at_s": 1}]), "unknown fault kind"),
        (lambda d: d.update(faults=[{"kind": "stream_kill", "at_s": -1}]), "faults[0].at_s"),
        (lambda d: d.update(faults=[{"kind": "endpoint_crash", "at_s": 1, "endpoint": "slac-dtn"}]), "unknown faas endpoint"),
        (lambda d: d.update(seed="seven"), "seed"),
    ],
)
def test_scenario_validation(mutate, fragment):
    assert fragment in broken(mutate)


def test_flow_path_is_relative_to_the_scenario(tmp_path):
    d = doc()
    (tmp_path / "flow.json").write_text(json.dumps(d["flows"][0].pop("definition")))
    d["flows"][0]["path"] = "flow.json"
    (tmp_path / "s.json").write_text(json.dumps(d))
    assert simulate(load_scenario(tmp_path / "s.json")).runs[0].end_to_end_ns == 31 * S


def test_malformed_json_names_the_position(tmp_path):
    (tmp_path / "bad.json").write_text('{"sites": [\n')
    with pytest.raises(ScenarioError, match="line 2"):
        load_scenario(tmp_path / "bad.json")


@pytest.mark.parametrize("n", [0, 1, 10**6, 2 * 10**7])
@pytest.mark.parametrize("plan", [Plan.CONVENTIONAL, Plan.ML_SURROGATE])
def test_plan_scenarios_match_the_cost_model(plan, n):
    q = hedm_query(n)
    run = simulate(scenario_from_plan(q, plan)).runs[0]
    assert run.status is RunStatus.SUCCEEDED
    assert run.end_to_end_ns == plan_cost_ns(q, plan)


def test_plan_scenarios_match_for_random_queries():
    rng = random.Random(99)
    for _ in range(15):
        q = random_query(rng)
        for plan in (Plan.CONVENTIONAL, Plan.ML_SURROGATE):
            assert simulate(scenario_from_plan(q, plan)).runs[0].end_to_end_ns == plan_cost_ns(q, plan)
