"""Escrow settlement: deposit on job creation, release on signed completion.

The ledger is a serialized state machine over integer balances. Every
operation, accepted or rejected, is appended to a JSON-lines journal, and
replaying the journal re-executes each operation to rebuild the state.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

from .errors import (
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

ESCROW_ACCOUNT = "__escrow__"


# --------------------------------------------------------------------------
# signatures
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class KeyPair:
    secret: Ed25519PrivateKey
    public: bytes


def generate_keypair(seed: bytes | None = None) -> KeyPair:
    """Ed25519 key pair; a 32-byte ``seed`` makes it reproducible."""
    sk = Ed25519PrivateKey.generate() if seed is None else Ed25519PrivateKey.from_private_bytes(
        hashlib.sha256(seed).digest())
    pub = sk.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    return KeyPair(sk, pub)


def completion_digest(job_id: bytes, client: str) -> bytes:
    """SHA-256 of job id followed by the client account id."""
    return hashlib.sha256(bytes(job_id) + client.encode("utf-8")).digest()


def sign_completion(secret: Ed25519PrivateKey | KeyPair, job_id: bytes, client: str) -> bytes:
    sk = secret.secret if isinstance(secret, KeyPair) else secret
    return sk.sign(completion_digest(job_id, client))


def verify(signature: bytes | None, message: bytes, public_key: bytes) -> bool:
    if signature is None:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


def allocate_reward(deposit: int, parties: int) -> tuple[list[int], int]:
    """Uniform floor split; returns (per-party amounts, remainder for the client)."""
    if deposit <= 0:
        raise ZeroDeposit("deposit must be positive")
    if parties < 1:
        raise ValueError("need at least one party")
    share = deposit // parties
    return [share] * parties, deposit - share * parties


# --------------------------------------------------------------------------
# ledger
# --------------------------------------------------------------------------

@dataclass
class JobRecord:
    job_id: bytes
    client: str
    parties: tuple[str, ...]
    deposit: int
    completed: bool = False


@dataclass
class CompletionProof:
    """One signature per roster member, in roster order (None if missing)."""

    signatures: list[bytes | None]

    @classmethod
    def assemble(cls, job: JobRecord, signed: dict[str, bytes]) -> "CompletionProof":
        return cls([signed.get(p) for p in job.parties])


@dataclass
class EscrowLedger:
    balances: dict[str, int] = field(default_factory=dict)
    jobs: dict[bytes, JobRecord] = field(default_factory=dict)
    keys: dict[str, bytes] = field(default_factory=dict)
    journal: list[dict] = field(default_factory=list)
    journal_path: Path | None = None

    def __post_init__(self):
        if not self.journal:
            self._append({"op": "genesis", "job_id": None, "caller": None, "amounts": {}, "result": "ok"})

    # ---- bookkeeping ----
    def _append(self, record: dict) -> None:
        self.journal.append(record)
        if self.journal_path is not None:
            with open(self.journal_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def _record(self, op: str, job_id: bytes | None, caller: str | None, amounts: dict, result: str, **extra):
        rec = {"op": op, "job_id": None if job_id is None else bytes(job_id).hex(), "caller": caller,
               "amounts": amounts, "result": result}
        rec.update(extra)
        self._append(rec)

    def balance(self, account: str) -> int:
        return self.balances.get(account, 0)

    @property
    def escrowed(self) -> int:
        return sum(j.deposit for j in self.jobs.values() if not j.completed)

    @property
    def total_currency(self) -> int:
        return sum(self.balances.values()) + self.escrowed

    def state_digest(self) -> str:
        state = {
            "balances": sorted(self.balances.items()),
            "jobs": sorted((j.job_id.hex(), j.client, list(j.parties), j.deposit, j.completed)
                           for j in self.jobs.values()),
            "keys": sorted((k, v.hex()) for k, v in self.keys.items()),
        }
        return hashlib.sha256(json.dumps(state, sort_keys=True).encode()).hexdigest()

    # ---- operations ----
    def mint(self, account: str, amount: int) -> None:
        """Fund an account (new currency enters the system only here)."""
        if amount < 0:
            raise ValueError("cannot mint a negative amount")
        self.balances[account] = self.balance(account) + int(amount)
        self._record("mint", None, account, {account: int(amount)}, "ok")

    def register_key(self, party: str, public_key: bytes) -> None:
        self.keys[party] = bytes(public_key)
        self._record("register_key", None, party, {}, "ok", public_key=bytes(public_key).hex())

    def create_job(self, job_id: bytes, client: str, parties, deposit: int) -> JobRecord:
        job_id = bytes(job_id)
        parties = tuple(parties)
        extra = {"parties": list(parties), "deposit": int(deposit)}
        try:
            if job_id in self.jobs:
                raise DuplicateJob(f"job {job_id.hex()} already exists")
            if deposit <= 0:
                raise ZeroDeposit("deposit must be positive")
            if not parties:
                raise ValueError("a job needs at least one computing party")
            missing = [p for p in parties if p not in self.keys]
            if missing:
                raise UnregisteredKey(f"no registered key for {missing}")
            if self.balance(client) < deposit:
                raise InsufficientBalance(f"{client} holds {self.balance(client)}, deposit is {deposit}")
        except EscrowReject as exc:
            self._record("create_job", job_id, client, {}, f"reject:{type(exc).__name__}", **extra)
            raise
        self.balances[client] = self.balance(client) - int(deposit)
        job = JobRecord(job_id, client, parties, int(deposit))
        self.jobs[job_id] = job
        self._record("create_job", job_id, client, {client: -int(deposit), ESCROW_ACCOUNT: int(deposit)}, "ok",
                     **extra)
        return job

    def complete_job(self, job_id: bytes, caller: str, proof: CompletionProof) -> dict[str, int]:
        """Verify every party's signature, then release the deposit."""
        job_id = bytes(job_id)
        extra = {"signatures": [None if s is None else s.hex() for s in proof.signatures]}
        try:
            job = self.jobs.get(job_id)
            if job is None:
                raise UnknownJob(f"job {job_id.hex()} does not exist")
            if job.completed:
                raise AlreadyCompleted(f"job {job_id.hex()} already settled")
            if caller != job.client:
                raise NotClient(f"{caller} is not the client of job {job_id.hex()}")
            msg = completion_digest(job_id, job.client)
            sigs = list(proof.signatures) + [None] * max(0, len(job.parties) - len(proof.signatures))
            for idx, party in enumerate(job.parties):
                if party not in self.keys:
                    raise UnregisteredKey(f"no registered key for {party}")
                if not verify(sigs[idx], msg, self.keys[party]):
                    raise BadSignature(idx)
        except EscrowReject as exc:
            self._record("complete_job", job_id, caller, {}, f"reject:{type(exc).__name__}", **extra)
            raise
        shares, remainder = allocate_reward(job.deposit, len(job.parties))
        amounts: dict[str, int] = {}
        for party, amt in zip(job.parties, shares):
            amounts[party] = amounts.get(party, 0) + amt
        if remainder:
            amounts[job.client] = amounts.get(job.client, 0) + remainder
        for acct, amt in amounts.items():
            self.balances[acct] = self.balance(acct) + amt
        job.completed = True
        self._record("complete_job", job_id, caller, dict(amounts), "ok", **extra)
        return amounts

    # ---- persistence ----
    def write_journal(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.journal:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_journal(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def replay(records: list[dict]) -> EscrowLedger:
    """Re-execute a journal; each operation must reproduce its recorded result."""
    ledger = EscrowLedger()
    for rec in records:
        op = rec["op"]
        if op == "genesis":
            continue
        job_id = None if rec["job_id"] is None else bytes.fromhex(rec["job_id"])
        result = "ok"
        try:
            if op == "mint":
                (acct, amt), = rec["amounts"].items()
                ledger.mint(acct, amt)
            elif op == "register_key":
                ledger.register_key(rec["caller"], bytes.fromhex(rec["public_key"]))
            elif op == "create_job":
                ledger.create_job(job_id, rec["caller"], rec["parties"], rec["deposit"])
            elif op == "complete_job":
                sigs = [None if s is None else bytes.fromhex(s) for s in rec["signatures"]]
                ledger.complete_job(job_id, rec["caller"], CompletionProof(sigs))
            else:
                raise ValueError(f"unknown journal operation {op!r}")
        except EscrowReject as exc:
            result = f"reject:{type(exc).__name__}"
        if result != rec["result"]:
            raise ValueError(f"replay diverged at {op}: recorded {rec['result']}, got {result}")
    return ledger
