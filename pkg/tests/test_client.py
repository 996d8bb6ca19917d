import random
from dataclasses import replace

import pytest

from fastbft import messages as m
from fastbft.client import Client, ClientBusy, verify_reply
from fastbft.config import ProtocolConfig
from fastbft.effects import CancelTimer, Notice, Send, SetTimer
from fastbft.simnet import FaultSpec, Scenario
from helpers import Tap

N = 5
CID = N  # first client id follows the replicas


@pytest.fixture(scope="module")
def honest():
    """Two honest replies (for consecutive requests) and the simulation that produced them."""
    tap = Tap(Scenario(n=N, requests=2))
    tap.run()
    replies = [msg for s, d, msg in tap.messages(m.Reply, src=0, dst=CID)]
    assert len(replies) == 2
    return tap.sim, replies


def check(sim, reply, request=None):
    return verify_reply(sim.provider, sim.registry, N, request or reply.request, reply)


def test_honest_reply_passes(honest):
    sim, replies = honest
    assert [check(sim, r) for r in replies] == [0, 0]


def test_commitment_binding_from_wrong_issuer_fails_check_1(honest):
    sim, (r1, _) = honest
    other = sim.tees[2].request_counter(b"x" * 32)
    assert check(sim, replace(r1, commitment=other)) == 1


def test_prepare_for_another_request_fails_check_2(honest):
    sim, (r1, r2) = honest
    assert check(sim, replace(r1, prepare=r2.prepare)) == 2


def test_reply_for_another_request_fails_check_3(honest):
    sim, (r1, r2) = honest
    assert check(sim, r1, request=r2.request) == 3


def test_secret_from_another_counter_fails_check_4(honest):
    sim, (r1, r2) = honest
    assert check(sim, replace(r2, secret=r1.secret)) == 4


def test_forged_second_secret_fails_check_5(honest):
    sim, (r1, _) = honest
    assert check(sim, replace(r1, next_secret=bytes(16))) == 5


def test_altered_result_fails_check_5(honest):
    sim, (r1, _) = honest
    assert check(sim, replace(r1, result=r1.result + "!")) == 5


def _twin(sim):
    """A client with the same identity as the simulated one, fresh state."""
    src = sim.clients[0]
    return Client(CID, N, sim.provider, sim.registry, random.Random(1), timeout=10.0, keypair=src.keypair)


def test_submit_sends_one_request_to_the_primary(honest):
    sim, _ = honest
    c = _twin(sim)
    effects = c.submit("get k0")
    sends = [e for e in effects if isinstance(e, Send)]
    assert len(sends) == 1 and sends[0].dst == 0 and isinstance(sends[0].msg, m.Request)
    assert any(isinstance(e, SetTimer) for e in effects)
    assert sim.provider.verify(c.verify_key, m.request_payload(sends[0].msg), sends[0].msg.signature)


def test_second_submit_while_pending_is_rejected(honest):
    sim, _ = honest
    c = _twin(sim)
    c.submit("get k0")
    with pytest.raises(ClientBusy):
        c.submit("get k1")


def test_timeout_broadcasts_to_all_replicas_and_rearms(honest):
    sim, _ = honest
    c = _twin(sim)
    c.submit("get k0")
    effects = c.on_timer(("client", 1))
    assert sorted(e.dst for e in effects if isinstance(e, Send)) == list(range(N))
    assert any(isinstance(e, SetTimer) for e in effects)
    assert c.on_timer(("client", 99)) == []


def test_client_accepts_honest_reply_and_rejects_forgery(honest):
    sim, (r1, _) = honest
    c = _twin(sim)
    c.submit(r1.request.op)
    assert c.pending == r1.request
    assert c.on_message(0, replace(r1, next_secret=bytes(16))) == []
    assert c.rejected == 1 and c.pending is not None
    effects = c.on_message(0, r1)
    assert c.pending is None
    assert [a.result for a in c.accepted] == [r1.result]
    assert any(isinstance(e, CancelTimer) for e in effects)
    assert any(isinstance(e, Notice) and e.kind == "accepted" for e in effects)
    # a duplicate reply is ignored once nothing is pending
    assert c.on_message(0, r1) == [] and len(c.accepted) == 1


def test_dropped_request_completes_under_a_new_view():
    scn = Scenario(n=N, faults=(FaultSpec(0, "primary-silent"),), requests=1, protocol=ProtocolConfig())
    tap = Tap(scn)
    rep = tap.run().report
    assert rep.liveness and rep.view_changes >= 1
    broadcast = {d for s, d, msg in tap.messages(m.Request, src=CID)}
    assert broadcast == set(range(N))
    (acc,) = tap.sim.clients[0].accepted
    assert acc.view % N != 0
