"""Protected MLP inference and MPC-friendly approximation kernels.

Every function takes the shared operands plus the ``transport`` and
``dealer`` of the running session; all parties execute the same sequence of
calls, so the transport ledger counts rounds for the whole protocol.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ApproximationDomainError, InvalidPartyCount, ShapeMismatch
from .fixedpoint import DEFAULT_PARAMS, RingParams, decode, encode
from .nn import FC, RELU, LayerSpec, ModelSpec, layers_from_dims
from .sharing import (
    REDUCE,
    Dealer,
    SharedTensor,
    deserialize_share,
    matmul,
    mul,
    mul_many,
    reduce_precision,
    secure_compare_ge_zero,
    serialize_share,
    share,
    square,
)
from .transport import Transport


@dataclass(frozen=True)
class ApproxConfig:
    exp_iterations: int = 8
    reciprocal_newton_iters: int = 10
    log_householder_iters: int = 2
    input_clamp: tuple[float, float] = (-8.0, 8.0)
    log_order: int = 8
    sqrt_newton_iters: int = 3

    def __post_init__(self):
        for name in ("exp_iterations", "reciprocal_newton_iters", "log_householder_iters", "log_order",
                     "sqrt_newton_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        lo, hi = self.input_clamp
        if not lo < hi:
            raise ValueError("input_clamp must be an increasing pair")

    def check_exp_domain(self, width: float) -> None:
        # (1 + x / 2^n)^(2^n) needs x > -2^n
        if width >= 2 ** self.exp_iterations:
            raise ApproximationDomainError(
                f"exponent inputs may reach -{width}, beyond the -{2 ** self.exp_iterations} limit "
                f"of {self.exp_iterations} squaring iterations")


DEFAULT_APPROX = ApproxConfig()


@dataclass
class ProtectedModel:
    layers: list[LayerSpec]
    weights: list[tuple[SharedTensor, SharedTensor]]
    parties: int
    name: str = "protected"

    def reconstruct(self, params: RingParams = DEFAULT_PARAMS) -> ModelSpec:
        weights = [(decode(w.reconstruct(), params, w.frac), decode(b.reconstruct(), params, b.frac))
                   for w, b in self.weights]
        return ModelSpec(self.name, list(self.layers), weights)


def provision(m: ModelSpec, parties: int, rng: np.random.Generator | None = None,
              params: RingParams = DEFAULT_PARAMS, allow_single: bool = False) -> ProtectedModel:
    """Secret-share every weight and bias of ``m`` across ``parties``."""
    if parties < 2 and not (allow_single and parties == 1):
        raise InvalidPartyCount(f"provisioning needs at least 2 parties, got {parties}")
    rng = np.random.default_rng() if rng is None else rng
    f = params.frac_bits
    shared = []
    for w, b in m.weights:
        pair = []
        for t in (w, b):
            enc = encode(t, params)
            if parties == 1:
                pair.append(SharedTensor.local(enc, f))
            else:
                pair.append(SharedTensor.from_shares(share(enc, parties, rng), f))
        shared.append(tuple(pair))
    return ProtectedModel(list(m.layers), shared, parties, m.name)


def save_protected(pm: ProtectedModel, directory: str | Path) -> list[Path]:
    """Write one file per party holding that party's weight shares."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k in range(pm.parties):
        blobs = []
        for w, b in pm.weights:
            blobs += [serialize_share(w.party(k)), serialize_share(b.party(k))]
        path = directory / f"party_{k}.shares"
        with open(path, "wb") as fh:
            fh.write(struct.pack("<I", len(blobs)))
            for blob in blobs:
                fh.write(struct.pack("<Q", len(blob)))
                fh.write(blob)
        paths.append(path)
    return paths


def _read_party_file(path: Path):
    buf = path.read_bytes()
    (count,) = struct.unpack_from("<I", buf, 0)
    off = 4
    out = []
    for _ in range(count):
        (n,) = struct.unpack_from("<Q", buf, off)
        off += 8
        out.append(deserialize_share(buf[off:off + n]))
        off += n
    return out


def load_protected(directory: str | Path, params: RingParams = DEFAULT_PARAMS, name: str = "protected") -> ProtectedModel:
    directory = Path(directory)
    files = sorted(directory.glob("party_*.shares"), key=lambda p: int(p.stem.split("_")[1]))
    per_party = [_read_party_file(p) for p in files]
    n_tensors = len(per_party[0])
    tensors = [SharedTensor.from_shares([pp[i] for pp in per_party], params.frac_bits) for i in range(n_tensors)]
    weights = [(tensors[i], tensors[i + 1]) for i in range(0, n_tensors, 2)]
    dims = [weights[0][0].shape[0]] + [w.shape[1] for w, _ in weights]
    return ProtectedModel(layers_from_dims(dims), weights, len(files), name)


def share_input(x: np.ndarray, parties: int, rng: np.random.Generator,
                params: RingParams = DEFAULT_PARAMS) -> SharedTensor:
    enc = encode(x, params)
    if parties == 1:
        return SharedTensor.local(enc, params.frac_bits)
    return SharedTensor.from_shares(share(enc, parties, rng), params.frac_bits)


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------

def relu(x: SharedTensor, transport: Transport, dealer: Dealer) -> SharedTensor:
    """ReLU as [x >= 0] * x: ell rounds of comparison plus one product."""
    bit = secure_compare_ge_zero(x, None, transport, dealer)
    return mul(bit, x, dealer, transport)


def clamp(x: SharedTensor, lo: float, hi: float, transport: Transport, dealer: Dealer) -> SharedTensor:
    """x + relu(lo - x) - relu(x - hi); both ReLUs share their rounds."""
    n = int(np.prod(x.shape))
    below = (-x).add_public(lo, dealer.params)
    above = x.add_public(-hi, dealer.params)
    both = SharedTensor.concatenate([below.reshape(n), above.reshape(n)])
    r = relu(both, transport, dealer)
    return x + r[:n].reshape(x.shape) - r[n:].reshape(x.shape)


def _broadcast_last(x: SharedTensor, size: int) -> SharedTensor:
    shares = np.ascontiguousarray(np.broadcast_to(x.shares[..., None], x.shares.shape + (size,)))
    return SharedTensor(shares, x.frac, x.group_id)


def secure_argmax(x: SharedTensor, transport: Transport, dealer: Dealer,
                  want_onehot: bool = True) -> tuple[SharedTensor, SharedTensor | None]:
    """Tournament max over the last axis.

    Returns the shared maximum and (optionally) a shared one-hot of its
    position; ties go to the lower index. Each level costs ell + 1 rounds.
    """
    vals = x
    c = x.shape[-1]
    onehot = None
    if want_onehot:
        eye = np.broadcast_to(np.eye(c, dtype=np.uint64), x.shape + (c,))
        sh = np.zeros((x.parties,) + x.shape + (c,), dtype=np.uint64)
        sh[0] = eye
        onehot = SharedTensor(sh, 0, x.group_id)
    while vals.shape[-1] > 1:
        n = vals.shape[-1]
        half = n // 2
        left = vals[..., 0:2 * half:2]
        right = vals[..., 1:2 * half:2]
        diff = left - right
        bit = secure_compare_ge_zero(diff, None, transport, dealer)
        pairs = [(bit, diff)]
        if onehot is not None:
            oh_l = onehot[..., 0:2 * half:2, :]
            oh_r = onehot[..., 1:2 * half:2, :]
            pairs.append((_broadcast_last(bit, c), oh_l - oh_r))
        prods = mul_many(pairs, dealer, transport)
        new_vals = right + prods[0]
        if onehot is not None:
            new_oh = oh_r + prods[1]
        if n % 2:
            new_vals = SharedTensor.concatenate([new_vals, vals[..., n - 1:n]], axis=-1)
            if onehot is not None:
                new_oh = SharedTensor.concatenate([new_oh, onehot[..., n - 1:n, :]], axis=-2)
        vals = new_vals
        if onehot is not None:
            onehot = new_oh
    mx = vals.reshape(vals.shape[:-1])
    if onehot is not None:
        onehot = onehot.reshape(onehot.shape[:-2] + (c,))
    return mx, onehot


def secure_max(x: SharedTensor, transport: Transport, dealer: Dealer) -> SharedTensor:
    return secure_argmax(x, transport, dealer, want_onehot=False)[0]


def exp_approx(x: SharedTensor, iterations: int, transport: Transport, dealer: Dealer) -> SharedTensor:
    """exp(x) ~ (1 + x / 2^n)^(2^n): n squarings, n rounds."""
    y = SharedTensor(x.shares, x.frac + iterations, x.group_id).add_public(1.0, dealer.params)
    for _ in range(iterations):
        y = square(y, dealer, transport)
    return y


def reciprocal(x: SharedTensor, cfg: ApproxConfig, transport: Transport, dealer: Dealer) -> SharedTensor:
    """Newton-Raphson 1/x for x roughly in [0.5, 100]; seed 3 exp(0.5 - x) + 0.003."""
    p = dealer.params
    y = exp_approx((-x).add_public(0.5, p), cfg.exp_iterations, transport, dealer)
    y = y.mul_public_int(3).add_public(0.003, p)
    for _ in range(cfg.reciprocal_newton_iters):
        xy = mul(x, y, dealer, transport)
        y = mul(y, (-xy).add_public(2.0, p), dealer, transport)
    return y


def log_approx(x: SharedTensor, cfg: ApproxConfig, transport: Transport, dealer: Dealer) -> SharedTensor:
    """Natural log by Householder iterations on y - log(x e^-y)."""
    p = dealer.params
    x = reduce_precision(x, dealer, transport)
    e = exp_approx(x.mul_public_int(-2).add_public(-1.0, p), cfg.exp_iterations, transport, dealer)
    y = x.mul_public(1.0 / 120.0, p) - e.mul_public_int(20)
    y = y.add_public(3.0, p)
    for _ in range(cfg.log_householder_iters):
        h = mul(x, exp_approx(-y, cfg.exp_iterations, transport, dealer), dealer, transport)
        h = (-h).add_public(1.0, p)
        pw = powers(h, cfg.log_order, transport, dealer)
        # 1/k at full precision needs the powers back at f bits first
        low = mul_many([(t, REDUCE) for t in pw[1:]], dealer, transport) if len(pw) > 1 else []
        corr = pw[0]
        for k, t in enumerate(low, start=2):
            corr = corr + t.mul_public(1.0 / k, p)
        y = y - corr
    return y


def powers(x: SharedTensor, order: int, transport: Transport, dealer: Dealer) -> list[SharedTensor]:
    """[x, x^2, ..., x^order] in ceil(log2(order)) rounds."""
    pw = [x]
    while len(pw) < order:
        cur = len(pw)
        jobs = []
        for j in range(cur + 1, min(2 * cur, order) + 1):
            other = j - cur
            jobs.append((pw[cur - 1], None) if other == cur else (pw[cur - 1], pw[other - 1]))
        pw.extend(mul_many(jobs, dealer, transport))
    return pw


def inv_sqrt(x: SharedTensor, cfg: ApproxConfig, transport: Transport, dealer: Dealer) -> SharedTensor:
    """Newton 1/sqrt(x) for x roughly in [0.01, 30].

    Seed 2.2 exp(-(x/2 + 0.2)) + 0.2 - x/1024, with the 2.2 folded into the
    exponent so no public real product is needed.
    """
    p = dealer.params
    x = reduce_precision(x, dealer, transport)
    t = (-x).div_pow2(1).add_public(-0.2 + float(np.log(2.2)), p)
    y = exp_approx(t, cfg.exp_iterations, transport, dealer).add_public(0.2, p) - x.div_pow2(10)
    for _ in range(cfg.sqrt_newton_iters):
        y2 = square(y, dealer, transport)
        xy2 = mul(x, y2, dealer, transport)
        y = mul(y, (-xy2).add_public(3.0, p), dealer, transport).div_pow2(1)
    return y


def sqrt_approx(x: SharedTensor, cfg: ApproxConfig, transport: Transport, dealer: Dealer) -> SharedTensor:
    return mul(x, inv_sqrt(x, cfg, transport, dealer), dealer, transport)


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------

def secure_forward(pm: ProtectedModel, x: SharedTensor, transport: Transport, dealer: Dealer) -> SharedTensor:
    """Protected forward pass: shared logits at 2f fractional bits.

    Each fully connected layer is one Beaver round; each ReLU is ell + 1.
    """
    if x.parties != pm.parties:
        raise ShapeMismatch(f"input shared among {x.parties} parties, model among {pm.parties}")
    h = x
    it = iter(pm.weights)
    for layer in pm.layers:
        if layer.kind == FC:
            w, b = next(it)
            if h.shape[-1] != w.shape[0]:
                raise ShapeMismatch(f"input dim {h.shape[-1]} != layer input dim {w.shape[0]}")
            h = matmul(h, w, dealer, transport)
            h = h + _broadcast_rows(b, h.shape)
        elif layer.kind == RELU:
            h = relu(h, transport, dealer)
    return h


def _broadcast_rows(b: SharedTensor, shape) -> SharedTensor:
    shares = np.ascontiguousarray(np.broadcast_to(b.shares.reshape((b.parties,) + (1,) * (len(shape) - 1) + b.shape),
                                                  (b.parties,) + tuple(shape)))
    return SharedTensor(shares, b.frac, b.group_id)


def secure_softmax(z: SharedTensor, cfg: ApproxConfig, transport: Transport, dealer: Dealer,
                   stabilize: bool = True, bound: float | None = None,
                   clamp_range: tuple[float, float] | None = None) -> SharedTensor:
    """Softmax over the last axis.

    With ``stabilize`` the logits are clamped to ``cfg.input_clamp`` (or
    ``clamp_range``) and the shared maximum is subtracted, so exponent inputs
    lie in [lo - hi, 0]. Without it the caller guarantees inputs in
    [-bound, 0].
    """
    if stabilize:
        lo, hi = clamp_range or cfg.input_clamp
        cfg.check_exp_domain(hi - lo)
        z = clamp(z, lo, hi, transport, dealer)
        mx = secure_max(z, transport, dealer)
        z = z - _broadcast_last(mx, z.shape[-1])
    else:
        if bound is None:
            raise ApproximationDomainError("unstabilized softmax needs an explicit input bound")
        cfg.check_exp_domain(bound)
    e = exp_approx(z, cfg.exp_iterations, transport, dealer)
    s = e.sum(axis=-1)
    r = reciprocal(s, cfg, transport, dealer)
    return mul(e, _broadcast_last(r, e.shape[-1]), dealer, transport)


def reveal(x: SharedTensor, transport: Transport, params: RingParams = DEFAULT_PARAMS) -> np.ndarray:
    """Open x to every party (one round) and decode it."""
    return decode(transport.open(x.shares), params, x.frac)


def secure_entropy(p: SharedTensor, cfg: ApproxConfig, transport: Transport, dealer: Dealer) -> SharedTensor:
    """-sum_c p log p over the last axis (nats)."""
    lp = log_approx(p, cfg, transport, dealer)
    return -mul(p, lp, dealer, transport).sum(axis=-1)
