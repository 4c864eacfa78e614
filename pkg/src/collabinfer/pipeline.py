"""End-to-end job: input sharing, escrow, protected execution, aggregation, settlement.

Each of the five phases can be made to fail-stop for one party; an abort
leaves the output unrevealed and the deposit escrowed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ensemble import (
    EnsembleWeights,
    WeightingConfig,
    canonical_scheme,
    finish_secure,
    secure_combine,
    secure_model_outputs,
)
from .errors import PartyAbort
from .escrow import CompletionProof, EscrowLedger, KeyPair, generate_keypair, sign_completion
from .fixedpoint import DEFAULT_PARAMS, RingParams
from .nn import ModelSpec
from .secure_nn import DEFAULT_APPROX, ApproxConfig, ProtectedModel, provision, share_input
from .sharing import Dealer
from .transport import NetworkPreset, Transport

PHASES = {
    1: "input_sharing",
    2: "escrow_init",
    3: "model_execution",
    4: "aggregation",
    5: "reconstruction_settlement",
}


@dataclass(frozen=True)
class FaultPlan:
    """Party ``party`` stops during ``phase``, ``round_offset`` rounds into it."""

    phase: int
    party: int = 0
    round_offset: int = 0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {sorted(PHASES)}")
        if self.round_offset < 0:
            raise ValueError("round_offset must be non-negative")


@dataclass
class Deployment:
    ledger: EscrowLedger
    client: str
    party_names: list[str]
    keys: list[KeyPair]

    @property
    def parties(self) -> int:
        return len(self.party_names)


def setup_deployment(parties: int, client: str = "client", funds: int = 1000, seed: int = 0,
                     ledger: EscrowLedger | None = None) -> Deployment:
    """Fund the client and register one deterministic signing key per party."""
    ledger = ledger or EscrowLedger()
    names = [f"party_{k}" for k in range(parties)]
    keys = [generate_keypair(f"{seed}:{name}".encode()) for name in names]
    for name, kp in zip(names, keys):
        ledger.register_key(name, kp.public)
    if funds:
        ledger.mint(client, funds)
    return Deployment(ledger, client, names, keys)


@dataclass
class JobOutcome:
    status: str
    job_id: bytes
    prediction: np.ndarray | None = None
    probabilities: np.ndarray | None = None
    weights: EnsembleWeights | None = None
    ledger: dict = field(default_factory=dict)
    escrow_state: str = "not_created"
    payouts: dict = field(default_factory=dict)
    abort_phase: int | None = None
    abort_party: int | None = None

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "job_id": self.job_id.hex(),
            "prediction": None if self.prediction is None else self.prediction.tolist(),
            "weights": None if self.weights is None else self.weights.w.tolist(),
            "ledger": self.ledger,
            "escrow_state": self.escrow_state,
            "payouts": self.payouts,
            "abort_phase": self.abort_phase,
            "abort_phase_name": None if self.abort_phase is None else PHASES[self.abort_phase],
            "abort_party": self.abort_party,
        }


def run_job(models: list[ModelSpec], x: np.ndarray, deployment: Deployment, job_id: bytes, deposit: int,
            scheme: str = "soft_uniform", preset: NetworkPreset | None = None,
            wcfg: WeightingConfig | None = None, approx: ApproxConfig = DEFAULT_APPROX,
            params: RingParams = DEFAULT_PARAMS, seed: int = 0, image_shape=None,
            fault: FaultPlan | None = None, protected: list[ProtectedModel] | None = None) -> JobOutcome:
    scheme = canonical_scheme(scheme)
    wcfg = wcfg or WeightingConfig()
    k = deployment.parties
    rng = np.random.default_rng(seed)
    transport = Transport(k, preset)
    dealer = Dealer(k, params, seed=seed)
    ledger = deployment.ledger
    if protected is None:
        protected = [provision(m, k, rng, params, allow_single=True) for m in models]
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    outcome = JobOutcome("running", bytes(job_id))
    phase = 0

    def enter(p: int) -> None:
        nonlocal phase
        phase = p
        if fault is not None and fault.phase == p:
            # interactive phases fail mid-protocol; the others before any message
            if fault.round_offset and p in (3, 4):
                transport.fail_at_round = transport.ledger.rounds + fault.round_offset
                transport.fail_party = fault.party
            else:
                transport.abort(fault.party)

    def leave() -> None:
        # an offset past the phase's last round still stops the party here
        if fault is not None and fault.phase == phase:
            transport.abort(fault.party)
        transport.barrier()

    try:
        enter(1)
        xs = share_input(x, k, rng, params)
        leave()

        enter(2)
        ledger.create_job(job_id, deployment.client, deployment.party_names, deposit)
        outcome.escrow_state = "escrowed"
        job = ledger.jobs[bytes(job_id)]
        if job.completed:
            raise RuntimeError("job already settled")
        leave()

        enter(3)
        logits = secure_model_outputs(protected, xs, transport, dealer)
        leave()

        enter(4)
        shared, w = secure_combine(protected, xs, logits, scheme, wcfg, approx, transport, dealer,
                                   image_shape, seed)
        leave()

        enter(5)
        result = finish_secure(shared, w, transport, params)
        leave()
        signed = {name: sign_completion(kp, job_id, deployment.client)
                  for name, kp in zip(deployment.party_names, deployment.keys)}
        outcome.payouts = ledger.complete_job(job_id, deployment.client, CompletionProof.assemble(job, signed))
    except PartyAbort as exc:
        outcome.status = "aborted"
        outcome.abort_phase = phase
        outcome.abort_party = exc.party
        outcome.ledger = transport.ledger.to_dict()
        return outcome
    outcome.status = "settled"
    outcome.escrow_state = "settled"
    outcome.prediction = result.prediction
    outcome.probabilities = result.probabilities
    outcome.weights = result.weights
    outcome.ledger = transport.ledger.to_dict()
    return outcome
