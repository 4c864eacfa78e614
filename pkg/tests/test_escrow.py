import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collabinfer.errors import (
    AlreadyCompleted,
    BadSignature,
    DuplicateJob,
    EscrowReject,
    InsufficientBalance,
    NotClient,
    UnknownJob,
    UnregisteredKey,
    ZeroDeposit,
)
from collabinfer.escrow import (
    CompletionProof,
    EscrowLedger,
    allocate_reward,
    completion_digest,
    generate_keypair,
    read_journal,
    replay,
    sign_completion,
    verify,
)

PARTIES = ("p0", "p1", "p2")
KEYS = {p: generate_keypair(p.encode()) for p in PARTIES}
JOB = b"job-1"


def fresh_ledger(funds=100, **kw):
    ledger = EscrowLedger(**kw)
    ledger.mint("alice", funds)
    ledger.mint("bob", funds)
    for p in PARTIES:
        ledger.register_key(p, KEYS[p].public)
    return ledger


def proof_for(job_id, client="alice", forge=None):
    sigs = []
    for i, p in enumerate(PARTIES):
        signer = KEYS[PARTIES[(i + 1) % 3]] if i == forge else KEYS[p]
        sigs.append(sign_completion(signer, job_id, client))
    return CompletionProof(sigs)


@pytest.mark.parametrize("deposit, parties, shares, remainder", [
    (9, 3, [3, 3, 3], 0), (10, 3, [3, 3, 3], 1), (1, 3, [0, 0, 0], 1)])
def test_allocate_reward(deposit, parties, shares, remainder):
    assert allocate_reward(deposit, parties) == (shares, remainder)


def test_allocate_rejects_zero():
    with pytest.raises(ZeroDeposit):
        allocate_reward(0, 3)


def test_signatures():
    msg = completion_digest(JOB, "alice")
    assert len(msg) == 32
    sig = sign_completion(KEYS["p0"], JOB, "alice")
    assert sig == sign_completion(KEYS["p0"], JOB, "alice")
    assert verify(sig, msg, KEYS["p0"].public)
    assert not verify(sig, msg, KEYS["p1"].public)
    assert not verify(None, msg, KEYS["p0"].public)


def test_every_single_byte_mutation_fails():
    msg = completion_digest(JOB, "alice")
    sig = sign_completion(KEYS["p1"], JOB, "alice")
    for i in range(len(msg)):
        bad = bytearray(msg)
        bad[i] ^= 0x01
        assert not verify(sig, bytes(bad), KEYS["p1"].public)


def test_create_job_bookkeeping():
    ledger = fresh_ledger()
    ledger.create_job(JOB, "alice", PARTIES, 9)
    assert ledger.balance("alice") == 91 and ledger.escrowed == 9
    assert not ledger.jobs[JOB].completed


def test_create_job_rejects():
    ledger = fresh_ledger()
    ledger.create_job(JOB, "alice", PARTIES, 9)
    with pytest.raises(DuplicateJob):
        ledger.create_job(JOB, "bob", PARTIES, 5)
    with pytest.raises(ZeroDeposit):
        ledger.create_job(b"j2", "alice", PARTIES, 0)
    with pytest.raises(InsufficientBalance):
        ledger.create_job(b"j3", "alice", PARTIES, 1000)
    with pytest.raises(UnregisteredKey):
        ledger.create_job(b"j4", "alice", ("p0", "mallory"), 3)
    assert ledger.balance("alice") == 91
    assert [r["result"] for r in ledger.journal[-4:]] == [
        "reject:DuplicateJob", "reject:ZeroDeposit", "reject:InsufficientBalance", "reject:UnregisteredKey"]


def test_complete_job_pays_parties():
    ledger = fresh_ledger()
    ledger.create_job(JOB, "alice", PARTIES, 9)
    amounts = ledger.complete_job(JOB, "alice", proof_for(JOB))
    assert amounts == {"p0": 3, "p1": 3, "p2": 3}
    assert ledger.jobs[JOB].completed and ledger.escrowed == 0


def test_remainder_refunded_to_client():
    ledger = fresh_ledger()
    ledger.create_job(JOB, "alice", PARTIES, 10)
    ledger.complete_job(JOB, "alice", proof_for(JOB))
    assert ledger.balance("alice") == 91


def test_complete_job_rejects():
    ledger = fresh_ledger()
    with pytest.raises(UnknownJob):
        ledger.complete_job(JOB, "alice", proof_for(JOB))
    ledger.create_job(JOB, "alice", PARTIES, 9)
    with pytest.raises(NotClient):
        ledger.complete_job(JOB, "bob", proof_for(JOB))
    with pytest.raises(BadSignature) as info:
        ledger.complete_job(JOB, "alice", proof_for(JOB, forge=1))
    assert info.value.party_index == 1
    assert not ledger.jobs[JOB].completed and ledger.escrowed == 9
    assert all(ledger.balance(p) == 0 for p in PARTIES)
    missing = proof_for(JOB)
    missing.signatures[2] = None
    with pytest.raises(BadSignature):
        ledger.complete_job(JOB, "alice", missing)
    ledger.complete_job(JOB, "alice", proof_for(JOB))
    before = dict(ledger.balances)
    with pytest.raises(AlreadyCompleted):
        ledger.complete_job(JOB, "alice", proof_for(JOB))
    assert ledger.balances == before


def test_proof_bound_to_client():
    ledger = fresh_ledger()
    ledger.create_job(JOB, "alice", PARTIES, 9)
    with pytest.raises(BadSignature):
        ledger.complete_job(JOB, "alice", proof_for(JOB, client="bob"))


def test_assemble_orders_by_roster():
    ledger = fresh_ledger()
    job = ledger.create_job(JOB, "alice", PARTIES, 9)
    signed = {p: sign_completion(KEYS[p], JOB, "alice") for p in reversed(PARTIES)}
    ledger.complete_job(JOB, "alice", CompletionProof.assemble(job, signed))
    partial = CompletionProof.assemble(job, {"p0": b"x"})
    assert partial.signatures[1:] == [None, None]


def random_session(ledger, rng, steps):
    """Apply random create/complete operations, accepted or rejected."""
    start = ledger.total_currency
    jobs = []
    for _ in range(steps):
        op = rng.integers(0, 4)
        try:
            if op == 0:
                jid = int(rng.integers(0, 200)).to_bytes(2, "little")
                client = ("alice", "bob")[rng.integers(0, 2)]
                ledger.create_job(jid, client, PARTIES, int(rng.integers(0, 25)))
                jobs.append((jid, client))
            elif op in (1, 2) and jobs:
                jid, client = jobs[rng.integers(0, len(jobs))]
                caller = client if rng.random() < 0.8 else "bob"
                forge = rng.integers(0, 3) if rng.random() < 0.2 else None
                ledger.complete_job(jid, caller, proof_for(jid, client, forge))
            else:
                ledger.complete_job(int(rng.integers(0, 200)).to_bytes(2, "little"), "alice", proof_for(b"zz"))
        except EscrowReject:
            pass
        assert ledger.total_currency == start
        assert all(v >= 0 for v in ledger.balances.values())


def test_ten_thousand_interleavings_conserve_currency():
    ledger = fresh_ledger(funds=10_000)
    random_session(ledger, np.random.default_rng(0), 10_000)
    assert ledger.total_currency == 20_000


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_interleavings_conserve_and_replay(seed):
    ledger = fresh_ledger(funds=200)
    random_session(ledger, np.random.default_rng(seed), 60)
    rebuilt = replay(ledger.journal)
    assert rebuilt.state_digest() == ledger.state_digest()


def test_journal_file_replay(tmp_path):
    path = tmp_path / "ledger.jsonl"
    ledger = fresh_ledger(journal_path=path)
    ledger.create_job(JOB, "alice", PARTIES, 10)
    with pytest.raises(BadSignature):
        ledger.complete_job(JOB, "alice", proof_for(JOB, forge=0))
    ledger.complete_job(JOB, "alice", proof_for(JOB))
    records = read_journal(path)
    assert records[0]["op"] == "genesis"
    assert {"op", "job_id", "caller", "amounts", "result"} <= set(records[-1])
    assert replay(records).state_digest() == ledger.state_digest()
    ledger.write_journal(tmp_path / "copy.jsonl")
    assert read_journal(tmp_path / "copy.jsonl") == records


def test_tampered_journal_detected():
    ledger = fresh_ledger()
    ledger.create_job(JOB, "alice", PARTIES, 9)
    ledger.complete_job(JOB, "alice", proof_for(JOB))
    records = [dict(r) for r in ledger.journal]
    records[-1]["signatures"] = [records[-1]["signatures"][1]] * 3
    with pytest.raises(ValueError):
        replay(records)
