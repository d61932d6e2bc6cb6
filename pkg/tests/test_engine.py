import pytest
from flowkit import S, Rig, ScriptedProvider, train_doc

from dcaiflow.flow import (
    ActionState,
    EngineDeadlock,
    MissingInput,
    RunNotFound,
    RunStatus,
    UnknownProvider,
    audit_store,
    flow_from_doc,
)


def test_three_step_run_accounts_exactly(run_store):
    rig = Rig(run_store)
    rec = rig.run(train_doc())
    assert rec.status is RunStatus.SUCCEEDED
    assert rec.end_to_end_ns == 31 * S
    assert rec.seconds_by_role() == {"data_transfer": 7 * S, "train": 19 * S, "model_transfer": 5 * S}
    assert rec.delays == []
    assert [a.action_state for a in rec.actions] == [ActionState.SUCCEEDED] * 3
    assert rec.outputs["train"]["result"] == {"loss": 0.01}


def test_every_action_walks_the_full_lifecycle(run_store):
    rig = Rig(run_store)
    rec = rig.run(train_doc())
    for a in rec.actions:
        assert [(f, t) for f, t, _ in a.history] == [
            (None, "Pending"),
            ("Pending", "Dispatched"),
            ("Dispatched", "Running"),
            ("Running", "Succeeded"),
        ]
        assert a.idempotency_key == f"{rec.run_id}/{a.state}/1"


def test_orchestration_overhead_is_logged_as_delay(run_store):
    rig = Rig(run_store, overhead_ns=250_000_000)
    rec = rig.run(train_doc())
    assert rec.end_to_end_ns == 31 * S + 3 * 250_000_000
    assert [d.reason for d in rec.delays] == ["orchestration"] * 3
    assert sum(a.duration_ns for a in rec.actions) + sum(d.ns for d in rec.delays) == rec.end_to_end_ns


def test_retries_back_off_exponentially(run_store):
    rig = Rig(run_store)
    flaky = ScriptedProvider(rig.clock, fail_first=2, seconds=4)
    rig.engine.providers["flaky"] = flaky
    doc = {
        "flow_id": "retry",
        "start": "go",
        "states": {"go": {"kind": "compute", "provider": "flaky", "max_retries": 3, "retry_backoff": 1.5}},
    }
    rec = rig.run(doc, {})
    assert rec.status is RunStatus.SUCCEEDED
    assert [a.action_state for a in rec.attempts("go")] == [ActionState.FAILED, ActionState.FAILED, ActionState.SUCCEEDED]
    assert [(d.reason, d.ns) for d in rec.delays] == [("backoff", 1_500_000_000), ("backoff", 3 * S)]
    assert rec.end_to_end_ns == 1_500_000_000 + 3 * S + 4 * S
    assert flaky.keys == [f"{rec.run_id}/go/1", f"{rec.run_id}/go/2", f"{rec.run_id}/go/3"]


def test_exhausted_retries_fail_the_run_and_name_the_step(run_store):
    rig = Rig(run_store)
    rig.engine.providers["flaky"] = ScriptedProvider(rig.clock, fail_first=99)
    doc = {"flow_id": "f", "start": "go", "states": {"go": {"kind": "compute", "provider": "flaky", "max_retries": 2, "retry_backoff": 0}}}
    rec = rig.run(doc, {})
    assert rec.status is RunStatus.FAILED
    assert rec.failed_state() == "go"
    assert len(rec.attempts("go")) == 2
    assert "refused" in rec.attempts("go")[-1].error


def test_on_failure_routes_to_handler(run_store):
    rig = Rig(run_store)
    rig.engine.providers["flaky"] = ScriptedProvider(rig.clock, fail_first=1)
    rig.engine.providers["ok"] = ScriptedProvider(rig.clock, seconds=2)
    doc = {
        "flow_id": "f",
        "start": "go",
        "states": {
            "go": {"kind": "compute", "provider": "flaky", "max_retries": 1, "on_failure": "cleanup"},
            "cleanup": {"kind": "compute", "provider": "ok", "next": "failed"},
            "failed": {"kind": "fail"},
        },
    }
    rec = rig.run(doc, {})
    assert rec.status is RunStatus.FAILED
    assert rec.attempts("cleanup")[0].action_state is ActionState.SUCCEEDED


def test_poll_errors_count_as_failed_attempts(run_store):
    rig = Rig(run_store)
    rig.engine.providers["lossy"] = ScriptedProvider(rig.clock, poll_error=True)
    doc = {"flow_id": "f", "start": "go", "states": {"go": {"kind": "compute", "provider": "lossy", "max_retries": 1}}}
    rec = rig.run(doc, {})
    assert rec.status is RunStatus.FAILED
    assert rec.actions[0].error.startswith("poll:")


@pytest.mark.parametrize("loss, branch", [(0.01, "ship"), (0.5, "fallback")])
def test_choice_follows_prior_output(run_store, loss, branch):
    rig = Rig(run_store)
    rig.engine.providers["trainer"] = ScriptedProvider(rig.clock, seconds=3, output={"loss": loss})
    rig.engine.providers["ok"] = ScriptedProvider(rig.clock, seconds=1)
    doc = {
        "flow_id": "choose",
        "start": "train",
        "states": {
            "train": {"kind": "compute", "provider": "trainer", "next": "check"},
            "check": {"kind": "choice", "choice": {"variable": "train.loss", "op": "<", "value": 0.1, "then": "ship", "else": "fallback"}},
            "ship": {"kind": "compute", "provider": "ok"},
            "fallback": {"kind": "compute", "provider": "ok"},
        },
    }
    rec = rig.run(doc, {})
    assert rec.status is RunStatus.SUCCEEDED
    assert rec.outputs["check"] == {"branch": branch}
    assert [a.state for a in rec.actions] == ["train", "check", branch]
    assert rec.end_to_end_ns == 4 * S


def test_choice_on_missing_output_fails(run_store):
    rig = Rig(run_store)
    rig.engine.providers["ok"] = ScriptedProvider(rig.clock, seconds=1)
    doc = {
        "flow_id": "choose",
        "start": "train",
        "states": {
            "train": {"kind": "compute", "provider": "ok", "next": "check"},
            "check": {"kind": "choice", "max_retries": 1, "choice": {"variable": "train.loss", "op": "<", "value": 1, "then": "done", "else": "done"}},
            "done": {"kind": "succeed"},
        },
    }
    rec = rig.run(doc, {})
    assert rec.status is RunStatus.FAILED and rec.failed_state() == "check"


def test_cancel_mid_action(run_store):
    rig = Rig(run_store)
    slow = ScriptedProvider(rig.clock, seconds=100)
    rig.engine.providers["slow"] = slow
    doc = {"flow_id": "f", "start": "go", "states": {"go": {"kind": "compute", "provider": "slow"}}}
    rid = rig.engine.start_run(flow_from_doc(doc), {})
    rig.engine.advance(rid)
    rig.clock.run(until_ns=10 * S)
    ack = rig.engine.cancel(rid)
    assert ack.status is RunStatus.CANCELLED and not ack.noop
    assert rig.engine.cancel(rid).noop
    rec = rig.engine.get_status(rid)
    assert rec.actions[0].action_state is ActionState.CANCELLED
    assert rec.end_to_end_ns == 10 * S
    assert slow.cancelled == [f"{rid}/go/1"]


def test_cancel_after_success_is_a_noop(run_store):
    rig = Rig(run_store)
    rec = rig.run(train_doc())
    ack = rig.engine.cancel(rec.run_id)
    assert ack.noop and ack.status is RunStatus.SUCCEEDED


def test_start_is_idempotent_by_key(run_store):
    rig = Rig(run_store)
    flow = flow_from_doc(train_doc())
    a = rig.engine.start_run(flow, {"fn": "train"}, "job-1")
    b = rig.engine.start_run(flow, {"fn": "train"}, "job-1")
    assert a == b and rig.engine.list_runs() == [a]


def test_bad_starts_write_nothing(run_store):
    rig = Rig(run_store)
    with pytest.raises(MissingInput, match="fn"):
        rig.engine.start_run(flow_from_doc(train_doc()), {})
    doc = train_doc()
    doc["states"]["train"]["provider"] = "nowhere"
    with pytest.raises(UnknownProvider):
        rig.engine.start_run(flow_from_doc(doc), {"fn": "train"})
    assert run_store.run_ids() == []
    with pytest.raises(RunNotFound):
        rig.engine.get_status("missing")


def test_unknown_function_fails_at_dispatch(run_store):
    rig = Rig(run_store)
    rec = rig.run(train_doc(), {"fn": "no-such-function"})
    assert rec.status is RunStatus.FAILED
    assert rec.failed_state() == "train"
    assert rec.attempts("train")[0].history[-1][:2] == ("Dispatched", "Failed")


def test_endpoint_outage_is_retried_after_backoff(run_store):
    rig = Rig(run_store)
    rig.clock.call_at(9 * S, lambda: rig.endpoint.crash(down_ns=int(1.5 * S)))
    rec = rig.run(train_doc(retries=3))
    assert rec.status is RunStatus.SUCCEEDED
    attempts = rig.engine.get_status(rec.run_id).attempts("train")
    # crashed while running, refused while down, then a clean 19 s run
    assert [a.action_state for a in attempts] == [ActionState.FAILED, ActionState.FAILED, ActionState.SUCCEEDED]
    assert attempts[1].history[-1][:2] == ("Dispatched", "Failed")
    assert rec.end_to_end_ns == 7 * S + 2 * S + 1 * S + 2 * S + 19 * S + 5 * S


def test_never_finishing_action_is_a_deadlock(run_store):
    class Stuck:
        def dispatch(self, kind, params, key):
            return "h"

        def poll(self, handle):
            from dcaiflow.flow import ProviderStatus

            return ProviderStatus("active")

        def cancel(self, handle):
            pass

    rig = Rig(run_store, extra={"stuck": Stuck()})
    doc = {"flow_id": "f", "start": "go", "states": {"go": {"kind": "compute", "provider": "stuck"}}}
    rid = rig.engine.start_run(flow_from_doc(doc), {})
    with pytest.raises(EngineDeadlock):
        rig.engine.run_to_completion(rid)
    rig.engine.cancel(rid)


def test_concurrent_runs_share_one_endpoint_fifo(run_store):
    rig = Rig(run_store)
    flow = flow_from_doc(train_doc())
    ids = [rig.engine.start_run(flow, {"fn": "train"}) for _ in range(2)]
    recs = rig.engine.run_all(ids)
    assert all(r.status is RunStatus.SUCCEEDED for r in recs)
    # the second run's training waits for the first to release W=1
    assert sorted(r.end_to_end_ns for r in recs) == [31 * S, 50 * S]
    assert all(r.ok for r in audit_store(run_store))


def test_recorded_logs_pass_the_audit(run_store):
    rig = Rig(run_store, overhead_ns=10)
    rig.run(train_doc())
    reports = audit_store(run_store)
    assert len(reports) == 1 and reports[0].ok and reports[0].transitions == 12


def test_status_is_a_snapshot(run_store):
    rig = Rig(run_store)
    rec = rig.run(train_doc())
    snap = rig.engine.get_status(rec.run_id)
    snap.actions.clear()
    assert len(rig.engine.get_status(rec.run_id).actions) == 3
    d = snap.to_dict()
    assert d["status"] == "Succeeded" and d["end_to_end_ns"] == 31 * S
