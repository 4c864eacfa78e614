"""Ensemble aggregation: hard/soft voting, entropy, spectral and TTA weights.

Each scheme has a plaintext reference and a shared-domain path. In the
shared domain only the N aggregation weights (or, for spectral weighting,
the N x N confidence covariance) are revealed before the public-weight
aggregation.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import (
    DegenerateCovariance,
    InvalidDistribution,
    NotImageShaped,
    ShapeMismatch,
    WeightSumViolation,
)
from .fixedpoint import DEFAULT_PARAMS, RingParams
from .nn import ModelSpec, entropy, forward, softmax
from .secure_nn import (
    DEFAULT_APPROX,
    ApproxConfig,
    ProtectedModel,
    provision,
    reveal,
    secure_argmax,
    secure_entropy,
    secure_forward,
    secure_max,
    secure_softmax,
    share_input,
    sqrt_approx,
)
from .sharing import Dealer, SharedTensor, matmul, mul_many, reduce_precision
from .transport import Transport

SCHEMES = ("hard", "soft_uniform", "entropy", "spectral", "tta")
_ALIASES = {"soft": "soft_uniform", "uniform": "soft_uniform", "hard_vote": "hard"}


def canonical_scheme(name: str) -> str:
    key = name.strip().lower()
    key = _ALIASES.get(key, key)
    if key not in SCHEMES:
        raise ValueError(f"unknown ensemble scheme {name!r}; choose from {', '.join(SCHEMES)}")
    return key


@dataclass
class EnsembleWeights:
    """Aggregation weights, shape (N,) or (queries, N) when ``per_query``."""

    w: np.ndarray
    scheme: str
    per_query: bool = False

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.w.ndim not in (1, 2) or (self.w.ndim == 2) != self.per_query:
            raise ShapeMismatch(f"weights of shape {self.w.shape} inconsistent with per_query={self.per_query}")
        if np.any(self.w < 0) or not np.all(np.isfinite(self.w)):
            raise WeightSumViolation("weights must be finite and non-negative")
        if np.any(np.abs(self.w.sum(axis=-1) - 1.0) > 1e-9):
            raise WeightSumViolation(f"weights sum to {self.w.sum(axis=-1)}, expected 1")

    @property
    def models(self) -> int:
        return self.w.shape[-1]

    def for_queries(self, q: int) -> np.ndarray:
        return self.w if self.per_query else np.broadcast_to(self.w, (q, self.models))


@dataclass(frozen=True)
class WeightingConfig:
    beta: float = 1.0
    gamma: float = 1.0
    tta_views: int = 2
    rotation_range: float = 10.0
    calibration_size: int | None = None
    power_tol: float = 1e-9
    power_max_iter: int = 1000
    # shared-domain TTA: ||dz||^2 is scaled by 2^-bits before the square root,
    # and gamma * d is clamped to this range before the weight softmax
    sqrt_scale_bits: int = 6
    tta_clamp: tuple[float, float] = (0.0, 64.0)

    def __post_init__(self):
        if self.beta <= 0 or self.gamma <= 0:
            raise ValueError("beta and gamma must be positive")
        if self.tta_views < 1:
            raise ValueError("tta_views must be >= 1")
        if self.rotation_range <= 0:
            raise ValueError("rotation_range must be positive")
        if self.sqrt_scale_bits % 2:
            raise ValueError("sqrt_scale_bits must be even")


def _normalized(w: np.ndarray) -> np.ndarray:
    w = np.clip(np.asarray(w, dtype=np.float64), 0.0, None)
    s = w.sum(axis=-1, keepdims=True)
    n = w.shape[-1]
    return np.where(s > 0, w / np.where(s > 0, s, 1.0), 1.0 / n)


def uniform_weights(n: int, scheme: str = "soft_uniform") -> EnsembleWeights:
    return EnsembleWeights(np.full(n, 1.0 / n), scheme)


def _check_distributions(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < -1e-12) or not np.all(np.isfinite(p)):
        raise InvalidDistribution("probabilities must be finite and non-negative")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise InvalidDistribution("probability vectors must sum to 1")
    return p


# --------------------------------------------------------------------------
# plaintext weights
# --------------------------------------------------------------------------

def aggregate(probs: np.ndarray, w: EnsembleWeights) -> np.ndarray:
    """Weighted sum over the model axis of (N, Q, C) outputs."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[0] != w.models:
        raise ShapeMismatch(f"{probs.shape[0]} model outputs for {w.models} weights")
    wq = w.for_queries(probs.shape[1])
    return np.einsum("nqc,qn->qc", probs, wq)


def hard_vote(predictions) -> int:
    """Plurality class; ties go to the lowest class index."""
    preds = np.asarray(predictions, dtype=np.int64).ravel()
    if preds.size == 0:
        raise ValueError("hard_vote needs at least one prediction")
    return int(np.argmax(np.bincount(preds)))


def hard_vote_batch(predictions: np.ndarray, num_classes: int) -> np.ndarray:
    """Row-wise plurality for an (N, Q) array of per-model predictions."""
    preds = np.asarray(predictions, dtype=np.int64)
    tally = np.zeros((preds.shape[1], num_classes), dtype=np.int64)
    for row in preds:
        tally[np.arange(preds.shape[1]), row] += 1
    return tally.argmax(axis=1)


def entropy_weights(p: np.ndarray, beta: float = 1.0) -> EnsembleWeights:
    """Softmax over -beta * H_i; ``p`` is (N, C) for one query or (N, Q, C)."""
    p = _check_distributions(p)
    h = entropy(p)
    logits = -beta * h
    if p.ndim == 2:
        return EnsembleWeights(softmax(logits), "entropy")
    return EnsembleWeights(softmax(logits.T), "entropy", per_query=True)


def principal_eigenvector(c: np.ndarray, tol: float = 1e-9, max_iter: int = 1000) -> np.ndarray:
    """Power iteration from the all-ones vector."""
    v = np.ones(c.shape[0]) / math.sqrt(c.shape[0])
    for _ in range(max_iter):
        nxt = c @ v
        norm = np.linalg.norm(nxt)
        if norm == 0:
            return v
        nxt /= norm
        if nxt @ v < 0:
            nxt = -nxt
        if np.linalg.norm(nxt - v) < tol:
            return nxt
        v = nxt
    return v


def spectral_from_covariance(c: np.ndarray, tol: float = 1e-9, max_iter: int = 1000) -> EnsembleWeights:
    c = np.asarray(c, dtype=np.float64)
    n = c.shape[0]
    if np.abs(c).max(initial=0.0) < 1e-10:
        warnings.warn("confidence covariance is zero; using uniform weights", DegenerateCovariance, stacklevel=2)
        return EnsembleWeights(np.full(n, 1.0 / n), "spectral")
    v = principal_eigenvector(c, tol, max_iter)
    a = np.abs(v)
    return EnsembleWeights(a / a.sum(), "spectral")


def centered_covariance(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    centered = phi - phi.mean(axis=1, keepdims=True)
    return centered @ centered.T / (phi.shape[1] - 1)


def spectral_weights(phi: np.ndarray, tol: float = 1e-9, max_iter: int = 1000) -> EnsembleWeights:
    """Batch-level weights from the principal eigenvector of the N x S confidence covariance."""
    phi = np.asarray(phi, dtype=np.float64)
    if phi.ndim != 2 or phi.shape[1] < 2:
        raise ShapeMismatch("spectral weighting needs an N x S confidence matrix with S >= 2")
    return spectral_from_covariance(centered_covariance(phi), tol, max_iter)


def instability(base_logits: np.ndarray, view_logits: np.ndarray) -> np.ndarray:
    """Mean L2 logit deviation per model and query.

    ``base_logits`` is (N, Q, C) and ``view_logits`` (N, T, Q, C); the result
    is (Q, N).
    """
    base = np.asarray(base_logits, dtype=np.float64)
    views = np.asarray(view_logits, dtype=np.float64)
    if views.ndim == base.ndim:
        views = views[:, None]
    dev = np.linalg.norm(views - base[:, None], axis=-1).mean(axis=1)
    return dev.T


def weights_from_instability(d: np.ndarray, gamma: float = 1.0) -> EnsembleWeights:
    d = np.asarray(d, dtype=np.float64)
    if d.ndim == 1:
        return EnsembleWeights(softmax(gamma * d), "tta")
    return EnsembleWeights(softmax(gamma * d), "tta", per_query=True)


def tta_weights(base_logits: np.ndarray, view_logits: np.ndarray, gamma: float = 1.0) -> EnsembleWeights:
    """Higher instability under augmentation earns higher weight."""
    return weights_from_instability(instability(base_logits, view_logits), gamma)


# --------------------------------------------------------------------------
# rotations
# --------------------------------------------------------------------------

def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Bilinear rotation of an H x W x C image about its centre, zero padded."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise NotImageShaped(f"expected an H x W x C image, got shape {image.shape}")
    if degrees == 0:
        return image.copy()
    return _kernels.bilinear_rotate(image, math.radians(degrees))


def rotate_batch(x: np.ndarray, image_shape: tuple[int, ...] | None, degrees: float) -> np.ndarray:
    if image_shape is None or len(image_shape) != 3:
        raise NotImageShaped("inputs carry no H x W x C image shape")
    x = np.asarray(x, dtype=np.float64)
    return np.stack([rotate(row.reshape(image_shape), degrees).ravel() for row in x])


def rotation_matrix(image_shape: tuple[int, ...], degrees: float) -> np.ndarray:
    """Matrix R with rotate(img).ravel() == img.ravel() @ R."""
    if image_shape is None or len(image_shape) != 3:
        raise NotImageShaped("rotation needs an H x W x C image shape")
    h, w, c = image_shape
    d = h * w * c
    rmat = np.zeros((d, d))
    theta = math.radians(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dy, dx = ii - cy, jj - cx
    sy = math.cos(theta) * dy - math.sin(theta) * dx + cy
    sx = math.sin(theta) * dy + math.cos(theta) * dx + cx
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy, fx = sy - y0, sx - x0
    for dyi in (0, 1):
        yy = y0 + dyi
        wy = fy if dyi else 1.0 - fy
        for dxi in (0, 1):
            xx = x0 + dxi
            wx = fx if dxi else 1.0 - fx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w) & (wy * wx != 0)
            for ch in range(c):
                src = (yy * w + xx) * c + ch
                dst = (ii * w + jj) * c + ch
                np.add.at(rmat, (src[ok], dst[ok]), (wy * wx)[ok])
    return rmat


def tta_angles(wcfg: WeightingConfig, seed: int | None) -> np.ndarray:
    """Run-level rotation angles in degrees, uniform in +-rotation_range."""
    rng = np.random.default_rng(seed)
    return rng.uniform(-wcfg.rotation_range, wcfg.rotation_range, size=wcfg.tta_views)


# --------------------------------------------------------------------------
# shared-domain aggregation
# --------------------------------------------------------------------------

def aggregate_secure(y_shares: list[SharedTensor], w: EnsembleWeights, transport: Transport | None = None,
                     params: RingParams = DEFAULT_PARAMS) -> SharedTensor:
    """Sum_i w_i * y_i with public weights: local, no communication.

    The result carries f more fractional bits than the inputs and equals the
    ring computation sum_i encode(w_i) * y_i exactly.
    """
    if len(y_shares) != w.models:
        raise WeightSumViolation(f"{len(y_shares)} outputs for {w.models} weights")
    shape = y_shares[0].shape
    if any(y.shape != shape for y in y_shares):
        raise ShapeMismatch("model outputs differ in shape")
    frac = max(y.frac for y in y_shares)
    total = None
    for i, y in enumerate(y_shares):
        y = y.rescale(frac)
        if w.per_query:
            coef = w.w[:, i].reshape((-1,) + (1,) * (len(shape) - 1))
        else:
            coef = w.w[i]
        term = y.mul_public(coef, params)
        total = term if total is None else total + term
    return total


@dataclass
class EnsembleResult:
    prediction: np.ndarray
    probabilities: np.ndarray | None
    weights: EnsembleWeights | None
    ledger: dict = field(default_factory=dict)


def _plaintext(models: list[ModelSpec], x: np.ndarray, scheme: str, wcfg: WeightingConfig,
               image_shape, seed) -> EnsembleResult:
    logits = np.stack([forward(m, x) for m in models])
    probs = softmax(logits)
    n, q, c = probs.shape
    if scheme == "hard":
        pred = hard_vote_batch(probs.argmax(axis=-1), c)
        return EnsembleResult(pred, None, None)
    if scheme == "soft_uniform":
        w = uniform_weights(n)
    elif scheme == "entropy":
        w = entropy_weights(probs, wcfg.beta)
    elif scheme == "spectral":
        w = spectral_weights(probs.max(axis=-1), wcfg.power_tol, wcfg.power_max_iter)
    else:
        views = []
        for angle in tta_angles(wcfg, seed):
            xv = rotate_batch(x, image_shape, angle)
            views.append(np.stack([forward(m, xv) for m in models]))
        w = tta_weights(logits, np.stack(views, axis=1), wcfg.gamma)
    agg = aggregate(probs, w)
    return EnsembleResult(agg.argmax(axis=-1), agg, w)


def _revealed_weights(t: SharedTensor, transport: Transport, params: RingParams, scheme: str) -> EnsembleWeights:
    # approximation error leaves the revealed vector slightly off the simplex
    w = _normalized(reveal(t, transport, params))
    return EnsembleWeights(w, scheme, per_query=w.ndim == 2)


def secure_model_outputs(protected: list[ProtectedModel], xs: SharedTensor, transport: Transport,
                         dealer: Dealer) -> list[SharedTensor]:
    """Shared logits of every protected model on the shared queries."""
    return [secure_forward(pm, xs, transport, dealer) for pm in protected]


def secure_combine(protected: list[ProtectedModel], xs: SharedTensor, logits: list[SharedTensor], scheme: str,
                   wcfg: WeightingConfig, approx: ApproxConfig, transport: Transport, dealer: Dealer,
                   image_shape=None, seed: int | None = 0) -> tuple[SharedTensor, EnsembleWeights | None]:
    """Weights and shared aggregate; nothing but the weights is revealed.

    For ``hard`` the shared result is the per-class vote tally.
    """
    params = dealer.params
    z = SharedTensor.stack(logits)
    n, q, c = z.shape
    if scheme == "hard":
        _, onehot = secure_argmax(z, transport, dealer)
        return onehot.sum(axis=0), None
    p = secure_softmax(z, approx, transport, dealer)
    if scheme == "soft_uniform":
        w = uniform_weights(n)
    elif scheme == "entropy":
        h = reduce_precision(secure_entropy(p, approx, transport, dealer), dealer, transport)
        t = h.mul_public(-wcfg.beta, params).transpose()
        sw = secure_softmax(t, approx, transport, dealer, stabilize=False, bound=wcfg.beta * math.log(c))
        w = _revealed_weights(sw, transport, params, "entropy")
    elif scheme == "spectral":
        if q < 2:
            raise ShapeMismatch("spectral weighting needs a batch of at least two queries")
        phi = reduce_precision(secure_max(p, transport, dealer), dealer, transport)
        mean = phi.sum(axis=-1).mul_public(1.0 / q, params)
        centered = phi.rescale(mean.frac) - SharedTensor(
            np.ascontiguousarray(np.broadcast_to(mean.shares[..., None], phi.shares.shape)), mean.frac)
        cov = matmul(centered, centered.transpose(), dealer, transport)
        # the N x N covariance is the only intermediate opened for this scheme
        cmat = reveal(cov, transport, params) / (q - 1)
        w = spectral_from_covariance(cmat, wcfg.power_tol, wcfg.power_max_iter)
    else:
        sq_norms = []
        for i, pm in enumerate(protected):
            per_view = []
            for angle in tta_angles(wcfg, seed):
                xv = xs.matmul_public(rotation_matrix(image_shape, angle), params)
                zv = secure_forward(pm, xv, transport, dealer)
                diff = zv - logits[i]
                per_view.append(mul_many([(diff, None)], dealer, transport)[0].sum(axis=-1))
            sq_norms.append(SharedTensor.stack(per_view))
        sq = SharedTensor.stack(sq_norms).div_pow2(wcfg.sqrt_scale_bits)
        norms = sqrt_approx(sq, approx, transport, dealer).mul_public_int(1 << (wcfg.sqrt_scale_bits // 2))
        d = reduce_precision(norms.sum(axis=1), dealer, transport)
        t = d.mul_public(wcfg.gamma / wcfg.tta_views, params).transpose()
        sw = secure_softmax(t, approx, transport, dealer, clamp_range=wcfg.tta_clamp)
        w = _revealed_weights(sw, transport, params, "tta")
    return aggregate_secure([p[i] for i in range(n)], w, transport, params), w


def finish_secure(result: SharedTensor, w: EnsembleWeights | None, transport: Transport,
                  params: RingParams = DEFAULT_PARAMS) -> EnsembleResult:
    """Open the aggregate (or vote tally) and take the argmax."""
    out = reveal(result, transport, params)
    if w is None:
        return EnsembleResult(np.rint(out).astype(np.int64).argmax(axis=-1), None, None)
    return EnsembleResult(out.argmax(axis=-1), out, w)


def run_ensemble_inference(models: list[ModelSpec], x: np.ndarray, scheme: str, mode: str = "plaintext_oracle",
                           wcfg: WeightingConfig | None = None, approx: ApproxConfig = DEFAULT_APPROX,
                           transport: Transport | None = None, dealer: Dealer | None = None,
                           protected: list[ProtectedModel] | None = None, image_shape=None,
                           seed: int | None = 0, rng: np.random.Generator | None = None) -> EnsembleResult:
    """Ensemble prediction for a batch of queries ``x`` (Q x d).

    ``mode="secure"`` runs every model under secret sharing among the
    transport's parties; ``plaintext_oracle`` is the float reference.
    """
    scheme = canonical_scheme(scheme)
    wcfg = wcfg or WeightingConfig()
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if scheme == "tta" and (image_shape is None or len(image_shape) != 3):
        raise NotImageShaped("TTA weighting needs image-shaped inputs")
    if mode == "plaintext_oracle":
        return _plaintext(models, x, scheme, wcfg, image_shape, seed)
    if mode != "secure":
        raise ValueError(f"unknown mode {mode!r}")
    if transport is None:
        transport = Transport(3)
    if dealer is None:
        dealer = Dealer(transport.parties, seed=seed)
    rng = rng if rng is not None else np.random.default_rng(seed)
    params = dealer.params
    if protected is None:
        protected = [provision(m, transport.parties, rng, params, allow_single=True) for m in models]
    xs = share_input(x, transport.parties, rng, params)
    logits = secure_model_outputs(protected, xs, transport, dealer)
    shared, w = secure_combine(protected, xs, logits, scheme, wcfg, approx, transport, dealer, image_shape, seed)
    result = finish_secure(shared, w, transport, params)
    result.ledger = transport.ledger.to_dict()
    return result
