"""Secret-shared ensemble inference over independently owned models.

Models and queries are additively shared over Z_{2^64} among simulated
computing parties; ensembles are aggregated in the shared domain and jobs are
settled through a signature-gated escrow ledger.
"""
from .ensemble import EnsembleWeights, WeightingConfig, run_ensemble_inference
from .escrow import EscrowLedger
from .fixedpoint import RingParams, decode, encode
from .nn import ModelSpec, build_model
from .partition import PartitionConfig, dirichlet_partition
from .pipeline import FaultPlan, run_job, setup_deployment
from .secure_nn import ApproxConfig, ProtectedModel, provision, secure_forward
from .sharing import Dealer, SharedTensor, reconstruct, share
from .transport import Transport, load_preset

__version__ = "0.1.0"

__all__ = [
    "ApproxConfig",
    "Dealer",
    "EnsembleWeights",
    "EscrowLedger",
    "FaultPlan",
    "ModelSpec",
    "PartitionConfig",
    "ProtectedModel",
    "RingParams",
    "SharedTensor",
    "Transport",
    "WeightingConfig",
    "build_model",
    "decode",
    "dirichlet_partition",
    "encode",
    "load_preset",
    "provision",
    "reconstruct",
    "run_ensemble_inference",
    "run_job",
    "secure_forward",
    "setup_deployment",
    "share",
]
