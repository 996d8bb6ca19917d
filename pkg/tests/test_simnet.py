import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fastbft import messages as m
from fastbft.effects import Notice
from fastbft.simnet import (
    FAULT_KINDS,
    DelayModel,
    FaultSpec,
    Scenario,
    ScenarioError,
    Simulation,
    count_messages,
    run,
    sample_scenario,
)
from helpers import Tap


def closed_form(n):
    f = (n - 1) // 2
    return {"PREPARE": f, "COMMIT_SHARE": f, "COMMIT": f, "REPLY_SHARE": f, "REPLY": f + 1, "total": 5 * f + 1}


def test_fault_free_run():
    rep = run(Scenario(n=5, requests=10)).report
    assert rep.completed == rep.expected == 10
    assert rep.view_changes == rep.new_trees == 0
    assert rep.safety and rep.liveness
    assert len(rep.latencies) == 10 and all(x > 0 for x in rep.latencies.values())


def test_one_wrong_share_active_costs_one_new_tree():
    rep = run(Scenario(n=5, faults=(FaultSpec(1, "wrong-shares"),), requests=10)).report
    assert rep.liveness
    assert rep.new_trees == 1 and rep.view_changes == 0


@pytest.mark.parametrize("n", [5, 7])
def test_per_phase_counts(n):
    res = run(Scenario(n=n, requests=4))
    rids = sorted(res.report.latencies)
    for rid in rids:
        assert count_messages(res.trace, rid) == closed_form(n)
    assert res.report.messages_per_request == closed_form(n)["total"]


def test_counts_are_linear_in_n():
    totals = {n: run(Scenario(n=n, requests=2)).report.messages_per_request for n in (5, 9, 17)}
    assert totals == {5: 11, 9: 21, 17: 41}


def test_same_seed_same_trace_and_report():
    scn = sample_scenario(7, 11)
    a, b = run(scn), run(scn)
    assert a.trace_text() == b.trace_text()
    assert a.report.to_json() == b.report.to_json()


def test_seed_changes_the_trace():
    a = run(Scenario(n=5, requests=3, seed=1))
    b = run(Scenario(n=5, requests=3, seed=2))
    assert a.trace_text() != b.trace_text()


def test_trace_lines_are_json_records():
    res = run(Scenario(n=5, requests=1))
    recs = [json.loads(line) for line in res.trace]
    assert all({"t", "src", "dst", "tag", "size"} <= rec.keys() for rec in recs)
    assert [rec["t"] for rec in recs] == sorted(rec["t"] for rec in recs)
    assert all(rec["size"] > 0 for rec in recs)
    assert {rec["tag"] for rec in recs} >= {"REQUEST", "PREPARE", "SHARE", "COMMIT", "REPLY"}


# -- validation -------------------------------------------------------------------------


def test_size_constraint():
    with pytest.raises(ScenarioError, match="2f\\+1"):
        Scenario(n=6, f=2).validate()
    with pytest.raises(ScenarioError, match="2f\\+1"):
        Scenario(n=3, f=2).validate()


def test_more_than_f_faulty_replicas_rejected():
    crashes = tuple(FaultSpec(i, "crash", start=1.0) for i in range(3))
    with pytest.raises(ScenarioError, match="exceed"):
        Scenario(n=5, faults=crashes).validate()
    Scenario(n=5, faults=crashes[:2]).validate()


@pytest.mark.parametrize("kind", ["tee-rollback", "tee-equivocate", "forge-signature", ""])
def test_tee_or_unknown_fault_kinds_rejected(kind):
    with pytest.raises(ScenarioError, match="untrusted side"):
        Scenario(n=5, faults=(FaultSpec(1, kind),)).validate()


def test_fault_window_and_target_checked():
    with pytest.raises(ScenarioError):
        Scenario(n=5, faults=(FaultSpec(7, "crash"),)).validate()
    with pytest.raises(ScenarioError):
        Scenario(n=5, horizon=10, faults=(FaultSpec(1, "crash", start=20.0),)).validate()
    with pytest.raises(ScenarioError):
        Scenario(n=5, faults=(FaultSpec(1, "silent-shares", start=5.0, end=2.0),)).validate()


# -- adversaries --------------------------------------------------------------------------


def test_equivocating_primary_gets_one_binding_per_counter():
    tap = Tap(Scenario(n=5, faults=(FaultSpec(0, "primary-equivocate-attempt"),), requests=3))
    rep = tap.run().report
    assert rep.safety and rep.liveness
    issued = tap.sim.tees[0].issued
    assert len({(b.c, b.v) for b in issued}) == len(issued)
    # the two bodies sent for counter 1 disagree, but share one binding
    first = [p for _, _, p in tap.messages(m.Prepare, src=0) if (p.binding.c, p.binding.v) == (1, 0)]
    assert len({p.request for p in first}) == 2 and len({p.binding for p in first}) == 1
    assert rep.view_changes >= 1


def test_unscheduled_reboot_of_a_passive_replica_rejoins():
    tap = Tap(Scenario(n=5, faults=(FaultSpec(4, "unscheduled-reboot", start=8.0),), requests=6))
    rep = tap.run().report
    assert rep.liveness
    assert tap.messages(m.Rejoin, src=4)
    assert tap.notices("rejoined", node=4)


def test_delay_amplify_only_slows_things_down():
    rep = run(Scenario(n=5, faults=(FaultSpec(2, "delay-amplify", factor=3.0),), requests=5)).report
    assert rep.safety and rep.liveness


def test_delivery_is_bounded_after_stabilisation():
    hops = []

    class Recording(Simulation):
        def _delay(self, src):
            hop = super()._delay(src)
            hops.append((self.now, hop))
            return hop

    delay = DelayModel(delta=1.0, jitter=0.5, gst=15.0, chaos=10.0)
    rep = Recording(Scenario(n=5, delay=delay, requests=5)).run().report
    assert rep.liveness
    after = [h for t, h in hops if t >= delay.gst]
    before = [h for t, h in hops if t < delay.gst]
    assert after and max(after) <= delay.delta * (1 + delay.jitter)
    assert before and max(before) > delay.delta * (1 + delay.jitter)


def test_safety_monitor_reports_the_event_index():
    sim = Simulation(Scenario(n=5, requests=2))
    sim.run()
    assert sim.violation is None
    slot, rid = next(iter(sim.slot_exec.items()))
    sim._notice(1, Notice("exec", ("99:1", slot[0], slot[1], "forged")))
    assert sim.violation is not None
    assert sim.violation.invariant in ("prefix", "agreement")
    assert sim.violation.event_index == sim.events
    assert not sim.report().safety


def test_client_result_monitor():
    sim = Simulation(Scenario(n=5, requests=1))
    sim.run()
    sim.submitted_at["5:9"] = 0.0
    sim._notice(5, Notice("accepted", ("5:9", "never executed")))
    assert sim.violation.invariant == "client-result"


def test_fault_kinds_cover_the_documented_scripts():
    assert set(FAULT_KINDS) == {
        "crash",
        "silent-shares",
        "wrong-shares",
        "primary-equivocate-attempt",
        "primary-silent",
        "primary-wrong-result",
        "unscheduled-reboot",
        "delay-amplify",
    }


@settings(max_examples=15)
@given(n=st.sampled_from([5, 7]), seed=st.integers(0, 10**6))
def test_random_fault_mixes_stay_safe_and_live(n, seed):
    rep = run(sample_scenario(n, seed)).report
    assert rep.safety, rep.violation
    assert rep.liveness
