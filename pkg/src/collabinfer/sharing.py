"""Additive secret sharing over Z_{2^64} with trusted-dealer preprocessing.

All parties are simulated in one process: a :class:`SharedTensor` stores the K
shares stacked along a leading party axis, and every protocol step computes
each party's share only from that party's own data plus values revealed
through the :class:`~collabinfer.transport.Transport`.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .errors import (
    InsufficientRandomness,
    InvalidPartyCount,
    MissingShare,
    ShapeMismatch,
    TripleShapeMismatch,
)
from .fixedpoint import DEFAULT_PARAMS, RING_DTYPE, RingParams, encode, ring, shift_right
from .transport import Transport

_U64_MAX = np.iinfo(np.uint64).max


def random_ring(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.integers(0, _U64_MAX, size=shape, dtype=np.uint64, endpoint=True)


def _derive_group(*parts: bytes | str) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    for p in parts:
        h.update(p.encode() if isinstance(p, str) else p)
    return h.digest()


@dataclass
class ShareTensor:
    """One party's additive share of a ring tensor."""

    party_id: int
    group_id: bytes
    payload: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return self.payload.shape


def share(secret: np.ndarray, parties: int, rng: np.random.Generator) -> list[ShareTensor]:
    """Split ``secret`` into ``parties`` additive shares modulo 2**64."""
    if parties < 2:
        raise InvalidPartyCount(f"need at least 2 parties, got {parties}")
    secret = np.asarray(secret, dtype=RING_DTYPE)
    stacked = _split(secret, parties, rng)
    gid = rng.bytes(16)
    return [ShareTensor(k, gid, stacked[k]) for k in range(parties)]


def _split(secret: np.ndarray, parties: int, rng: np.random.Generator) -> np.ndarray:
    stacked = np.empty((parties,) + secret.shape, dtype=RING_DTYPE)
    if parties > 1:
        stacked[:-1] = random_ring(rng, (parties - 1,) + secret.shape)
        stacked[-1] = secret - stacked[:-1].sum(axis=0, dtype=RING_DTYPE)
    else:
        stacked[0] = secret
    return stacked


def reconstruct(shares: Sequence[ShareTensor | None], parties: int | None = None) -> np.ndarray:
    """Element-wise modular sum of all K shares of one group."""
    k = len(shares) if parties is None else parties
    present = {}
    for s in shares:
        if s is None:
            continue
        present[s.party_id] = s
    missing = [p for p in range(k) if p not in present]
    if missing:
        raise MissingShare(f"shares missing for parties {missing}")
    groups = {s.group_id for s in present.values()}
    if len(groups) != 1:
        raise ShapeMismatch("shares belong to different sharings")
    shapes = {s.payload.shape for s in present.values()}
    if len(shapes) != 1:
        raise ShapeMismatch(f"share shapes differ: {sorted(shapes)}")
    total = np.zeros(next(iter(shapes)), dtype=RING_DTYPE)
    for p in range(k):
        total += present[p].payload
    return total


def add_shares(x: ShareTensor, y: ShareTensor) -> ShareTensor:
    if x.party_id != y.party_id:
        raise ShapeMismatch("cannot add shares held by different parties")
    if x.payload.shape != y.payload.shape:
        raise ShapeMismatch(f"{x.payload.shape} vs {y.payload.shape}")
    return ShareTensor(x.party_id, _derive_group("add", x.group_id, y.group_id), x.payload + y.payload)


def scale_public(x: ShareTensor, c) -> ShareTensor:
    """Multiply a share by a public ring tensor (broadcast element-wise)."""
    c = np.asarray(c, dtype=RING_DTYPE)
    try:
        out = x.payload * c
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    if out.shape != x.payload.shape:
        raise ShapeMismatch("public factor would change the share shape")
    return ShareTensor(x.party_id, _derive_group("scale", x.group_id, c.tobytes()), out)


# --------------------------------------------------------------------------
# wire format
# --------------------------------------------------------------------------

def serialize_share(s: ShareTensor) -> bytes:
    """group_id (16 B) | party_id u16 | rank u16 | dims u32... | LE uint64 data."""
    if len(s.group_id) != 16:
        raise ValueError("group_id must be 16 bytes")
    shape = s.payload.shape
    header = s.group_id + struct.pack("<HH", s.party_id, len(shape)) + struct.pack(f"<{len(shape)}I", *shape)
    return header + np.ascontiguousarray(s.payload, dtype="<u8").tobytes()


def deserialize_share(buf: bytes) -> ShareTensor:
    gid = bytes(buf[:16])
    party_id, rank = struct.unpack_from("<HH", buf, 16)
    shape = struct.unpack_from(f"<{rank}I", buf, 20)
    offset = 20 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(buf, dtype="<u8", count=count, offset=offset).astype(RING_DTYPE)
    if len(buf) != offset + 8 * count:
        raise ValueError("trailing or missing bytes in share buffer")
    return ShareTensor(party_id, gid, data.reshape(shape))


# --------------------------------------------------------------------------
# multi-party view
# --------------------------------------------------------------------------

@dataclass
class SharedTensor:
    """All K shares of one secret, stacked on axis 0, at ``frac`` fractional bits."""

    shares: np.ndarray
    frac: int
    group_id: bytes = field(default=b"\0" * 16)

    @property
    def parties(self) -> int:
        return self.shares.shape[0]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.shares.shape[1:]

    @classmethod
    def from_shares(cls, shares: Sequence[ShareTensor], frac: int) -> "SharedTensor":
        ordered = sorted(shares, key=lambda s: s.party_id)
        if [s.party_id for s in ordered] != list(range(len(ordered))):
            raise MissingShare("incomplete share set")
        return cls(np.stack([s.payload for s in ordered]), frac, ordered[0].group_id)

    @classmethod
    def local(cls, secret: np.ndarray, frac: int) -> "SharedTensor":
        """Single-party 'sharing' used by the no-communication 1P path."""
        return cls(np.asarray(secret, dtype=RING_DTYPE)[None].copy(), frac, _derive_group("local"))

    def party(self, k: int) -> ShareTensor:
        return ShareTensor(k, self.group_id, self.shares[k])

    def to_shares(self) -> list[ShareTensor]:
        return [self.party(k) for k in range(self.parties)]

    def reconstruct(self) -> np.ndarray:
        return self.shares.sum(axis=0, dtype=RING_DTYPE)

    def _derived(self, shares: np.ndarray, frac: int, tag: str, *others: "SharedTensor") -> "SharedTensor":
        return SharedTensor(shares, frac, _derive_group(tag, self.group_id, *(o.group_id for o in others)))

    def rescale(self, frac: int) -> "SharedTensor":
        """Raise precision to ``frac`` by a local public shift (exact)."""
        if frac < self.frac:
            raise ValueError("rescale only raises precision; lowering needs truncation")
        if frac == self.frac:
            return self
        return self._derived(self.shares << np.uint64(frac - self.frac), frac, "rescale")

    def _aligned(self, other: "SharedTensor") -> tuple["SharedTensor", "SharedTensor"]:
        if other.parties != self.parties:
            raise ShapeMismatch("party counts differ")
        f = max(self.frac, other.frac)
        return self.rescale(f), other.rescale(f)

    def __add__(self, other: "SharedTensor") -> "SharedTensor":
        a, b = self._aligned(other)
        try:
            s = a.shares + b.shares
        except ValueError as exc:
            raise ShapeMismatch(str(exc)) from None
        return self._derived(s, a.frac, "add", other)

    def __sub__(self, other: "SharedTensor") -> "SharedTensor":
        a, b = self._aligned(other)
        try:
            s = a.shares - b.shares
        except ValueError as exc:
            raise ShapeMismatch(str(exc)) from None
        return self._derived(s, a.frac, "sub", other)

    def __neg__(self) -> "SharedTensor":
        return self._derived(np.zeros_like(self.shares) - self.shares, self.frac, "neg")

    def add_public(self, value, params: RingParams = DEFAULT_PARAMS) -> "SharedTensor":
        """Add a public real constant/array (party 0 absorbs it)."""
        enc = encode(value, params, frac_bits=self.frac)
        shares = self.shares.copy()
        shares[0] = shares[0] + enc
        return self._derived(shares, self.frac, "addpub")

    def add_public_ring(self, value: np.ndarray) -> "SharedTensor":
        shares = self.shares.copy()
        shares[0] = shares[0] + np.asarray(value, dtype=RING_DTYPE)
        return self._derived(shares, self.frac, "addpubr")

    def mul_public(self, value, params: RingParams = DEFAULT_PARAMS) -> "SharedTensor":
        """Multiply by a public real; precision grows by f (no communication)."""
        enc = encode(value, params)
        return self._derived(self.shares * enc, self.frac + params.frac_bits, "mulpub")

    def mul_public_int(self, value) -> "SharedTensor":
        """Multiply by public integers (ring elements); precision unchanged."""
        return self._derived(self.shares * ring(value), self.frac, "mulint")

    def div_pow2(self, bits: int) -> "SharedTensor":
        """Divide by 2^bits for free by reinterpreting the precision."""
        return SharedTensor(self.shares, self.frac + bits, self.group_id)

    def matmul_public(self, mat, params: RingParams = DEFAULT_PARAMS) -> "SharedTensor":
        """Right-multiply every share by a public real matrix (local)."""
        enc = encode(mat, params)
        out = np.stack([_kernels.ring_matmul(s.reshape(-1, s.shape[-1]), enc).reshape(s.shape[:-1] + (enc.shape[1],))
                        for s in self.shares])
        return self._derived(out, self.frac + params.frac_bits, "matmulpub")

    def sum(self, axis: int) -> "SharedTensor":
        ax = axis + 1 if axis >= 0 else axis
        return self._derived(self.shares.sum(axis=ax, dtype=RING_DTYPE), self.frac, "sum")

    def reshape(self, *shape) -> "SharedTensor":
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return self._derived(self.shares.reshape((self.parties,) + tuple(shape)), self.frac, "reshape")

    def transpose(self, *axes) -> "SharedTensor":
        """Permute the secret's axes (the party axis stays first)."""
        axes = axes or tuple(reversed(range(len(self.shape))))
        return self._derived(np.ascontiguousarray(self.shares.transpose((0,) + tuple(a + 1 for a in axes))),
                             self.frac, "transpose")

    def __getitem__(self, idx) -> "SharedTensor":
        if not isinstance(idx, tuple):
            idx = (idx,)
        return self._derived(self.shares[(slice(None),) + idx], self.frac, "index")

    @staticmethod
    def concatenate(items: Sequence["SharedTensor"], axis: int = 0) -> "SharedTensor":
        f = max(t.frac for t in items)
        ax = axis + 1 if axis >= 0 else axis
        stacked = np.concatenate([t.rescale(f).shares for t in items], axis=ax)
        return SharedTensor(stacked, f, _derive_group("cat", *(t.group_id for t in items)))

    @staticmethod
    def stack(items: Sequence["SharedTensor"], axis: int = 0) -> "SharedTensor":
        f = max(t.frac for t in items)
        ax = axis + 1 if axis >= 0 else axis
        stacked = np.stack([t.rescale(f).shares for t in items], axis=ax)
        return SharedTensor(stacked, f, _derive_group("stack", *(t.group_id for t in items)))


# --------------------------------------------------------------------------
# dealer
# --------------------------------------------------------------------------

@dataclass
class BeaverTriple:
    """Correlated randomness for one multiplication.

    ``mask_x``/``mask_y`` are the uniform masks opened against the operands;
    ``a``/``b`` equal the masks arithmetically shifted right by
    ``shift_x``/``shift_y`` so the opening also rescales the operand. The
    invariant is ``c = op(a, b)`` in the ring.
    """

    kind: str
    mask_x: np.ndarray
    mask_y: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    shift_x: int = 0
    shift_y: int = 0
    serial: int = 0
    used: bool = False


@dataclass
class CompareRandomness:
    """Shared uniform mask r plus arithmetic shares of its low bits."""

    r: np.ndarray
    bits: np.ndarray
    bitlength: int
    used: bool = False


class Dealer:
    """Trusted preprocessing: Beaver triples and masked-bit tuples.

    Deterministic under ``seed``; each tuple is issued once.
    """

    def __init__(self, parties: int, params: RingParams = DEFAULT_PARAMS, seed: int | None = None):
        if parties < 1:
            raise InvalidPartyCount("dealer needs at least one party")
        self.parties = parties
        self.params = params
        self.rng = np.random.default_rng(seed)
        self.triples_issued = 0
        self.bit_tuples_issued = 0

    def share(self, secret: np.ndarray) -> np.ndarray:
        return _split(np.asarray(secret, dtype=RING_DTYPE), self.parties, self.rng)

    def _triple(self, kind: str, shape_x, shape_y, op: Callable, shift_x: int, shift_y: int) -> BeaverTriple:
        mask_x = random_ring(self.rng, shape_x)
        mask_y = random_ring(self.rng, shape_y)
        a = shift_right(mask_x, shift_x)
        b = shift_right(mask_y, shift_y)
        c = op(a, b)
        self.triples_issued += 1
        return BeaverTriple(kind, self.share(mask_x), self.share(mask_y), self.share(a), self.share(b), self.share(c),
                            shift_x, shift_y, serial=self.triples_issued)

    def mul_triple(self, shape, shift_x: int = 0, shift_y: int = 0, shape_y=None) -> BeaverTriple:
        shape = tuple(shape)
        shape_y = shape if shape_y is None else tuple(shape_y)
        return self._triple("mul", shape, shape_y, np.multiply, shift_x, shift_y)

    def square_triple(self, shape, shift: int = 0) -> BeaverTriple:
        mask = random_ring(self.rng, tuple(shape))
        a = shift_right(mask, shift)
        self.triples_issued += 1
        mask_s, a_s = self.share(mask), self.share(a)
        return BeaverTriple("square", mask_s, mask_s, a_s, a_s, self.share(a * a), shift, shift,
                            serial=self.triples_issued)

    def reduce_mask(self, shape, shift: int) -> BeaverTriple:
        """Mask for a standalone precision reduction (no product)."""
        mask = random_ring(self.rng, tuple(shape))
        self.triples_issued += 1
        zero = self.share(np.zeros_like(mask))
        return BeaverTriple("reduce", self.share(mask), zero, self.share(shift_right(mask, shift)), zero, zero,
                            shift, 0, serial=self.triples_issued)

    def matmul_triple(self, shape_x, shape_y, shift_x: int = 0, shift_y: int = 0) -> BeaverTriple:
        shape_x, shape_y = tuple(shape_x), tuple(shape_y)
        if len(shape_y) != 2 or shape_x[-1] != shape_y[0]:
            raise TripleShapeMismatch(f"cannot build a matmul triple for {shape_x} @ {shape_y}")
        return self._triple("matmul", tuple(shape_x), tuple(shape_y), _ring_matmul_nd, shift_x, shift_y)

    def compare_randomness(self, shape, bitlength: int) -> CompareRandomness:
        r = random_ring(self.rng, tuple(shape))
        idx = np.arange(bitlength, dtype=np.uint64).reshape((bitlength,) + (1,) * len(tuple(shape)))
        bit_values = (r[None] >> idx) & np.uint64(1)
        bits = np.stack([self.share(b) for b in bit_values])
        self.bit_tuples_issued += 1
        return CompareRandomness(self.share(r), bits, bitlength)


def _ring_matmul_nd(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Ring matmul supporting a batch prefix on the left operand."""
    if x.ndim == 2:
        return _kernels.ring_matmul(x, y)
    lead = x.shape[:-1]
    return _kernels.ring_matmul(x.reshape(-1, x.shape[-1]), y).reshape(lead + (y.shape[1],))


# --------------------------------------------------------------------------
# interactive protocols
# --------------------------------------------------------------------------

def _shift_for(frac: int, params: RingParams) -> int:
    return max(frac - params.frac_bits, 0)


_OPS: dict[str, Callable] = {}


def _check_triple(x: SharedTensor, y: SharedTensor | None, triple: BeaverTriple, kind: str) -> None:
    if triple.used:
        raise InsufficientRandomness("Beaver triple already consumed")
    if triple.kind != kind:
        raise TripleShapeMismatch(f"expected a {kind} triple, got {triple.kind}")
    if triple.mask_x.shape != x.shares.shape or (y is not None and triple.mask_y.shape != y.shares.shape):
        raise TripleShapeMismatch(f"triple shapes {triple.mask_x.shape[1:]}, {triple.mask_y.shape[1:]} "
                                  f"do not match operands {x.shape}, {None if y is None else y.shape}")


def _beaver_many(jobs: Sequence[tuple[SharedTensor, SharedTensor | None, BeaverTriple]],
                 transport: Transport) -> list[SharedTensor]:
    """Run several Beaver products whose masked openings share one round.

    A job with ``y is None`` is a square (kind ``square``): only x - a is opened.
    A ``reduce`` job only rescales x to lower precision.
    """
    masked = []
    for x, y, triple in jobs:
        _check_triple(x, y, triple, triple.kind if y is None and triple.kind == "reduce"
                      else "square" if y is None else triple.kind)
        triple.used = True
        masked.append(x.shares - triple.mask_x)
        if y is not None:
            masked.append(y.shares - triple.mask_y)
    opened = transport.open(*masked)
    if len(masked) == 1:
        opened = [opened]
    out = []
    pos = 0
    for x, y, triple in jobs:
        e = shift_right(opened[pos], triple.shift_x)
        pos += 1
        if triple.kind == "reduce":
            z = triple.a.copy()
            z[0] += e
            out.append(SharedTensor(z, x.frac - triple.shift_x, _derive_group("reduce", x.group_id,
                                                                                triple.serial.to_bytes(8, "little"))))
            continue
        op = _OPS[triple.kind]
        if y is None:
            g = e
            yf, gid = x.frac, x.group_id
        else:
            g = shift_right(opened[pos], triple.shift_y)
            pos += 1
            yf, gid = y.frac, y.group_id
        k = x.parties
        z = np.empty((k,) + triple.c.shape[1:], dtype=RING_DTYPE)
        for p in range(k):
            z[p] = op(e, triple.b[p]) + op(triple.a[p], g) + triple.c[p]
        z[0] += op(e, g)
        frac = (x.frac - triple.shift_x) + (yf - triple.shift_y)
        out.append(SharedTensor(z, frac, _derive_group(triple.kind, x.group_id, gid,
                                                       triple.serial.to_bytes(8, "little"))))
    return out


def _beaver(x: SharedTensor, y: SharedTensor, triple: BeaverTriple, transport: Transport,
            op: Callable, kind: str) -> SharedTensor:
    if triple.kind != kind:
        raise TripleShapeMismatch(f"expected a {kind} triple, got {triple.kind}")
    return _beaver_many([(x, y, triple)], transport)[0]


def beaver_mul(x: SharedTensor, y: SharedTensor, triple: BeaverTriple, transport: Transport) -> SharedTensor:
    """Element-wise product in one round."""
    return _beaver(x, y, triple, transport, np.multiply, "mul")


def beaver_matmul(x: SharedTensor, w: SharedTensor, triple: BeaverTriple, transport: Transport) -> SharedTensor:
    """Matrix product in one round: opens x - a and w - b together.

    Operands carrying more than f fractional bits are rescaled to f as part of
    the same opening (the triple's ``a``/``b`` are pre-shifted masks), so the
    product lands at precision ``f + f`` without an extra round.
    """
    if x.shape[-1] != w.shape[0] or len(w.shape) != 2:
        raise ShapeMismatch(f"cannot multiply {x.shape} by {w.shape}")
    return _beaver(x, w, triple, transport, _ring_matmul_nd, "matmul")


def _mul_triple_for(x: SharedTensor, y: SharedTensor | None, dealer: Dealer) -> BeaverTriple:
    params = dealer.params
    if y is None:
        return dealer.square_triple(x.shape, _shift_for(x.frac, params))
    return dealer.mul_triple(x.shape, _shift_for(x.frac, params), _shift_for(y.frac, params), shape_y=y.shape)


def mul(x: SharedTensor, y: SharedTensor, dealer: Dealer, transport: Transport) -> SharedTensor:
    """Element-wise product (operands rescaled to f inside the opening)."""
    return beaver_mul(x, y, _mul_triple_for(x, y, dealer), transport)


def square(x: SharedTensor, dealer: Dealer, transport: Transport) -> SharedTensor:
    """x * x with a single masked opening."""
    return _beaver_many([(x, None, _mul_triple_for(x, None, dealer))], transport)[0]


REDUCE = "reduce"


def mul_many(pairs: Sequence[tuple[SharedTensor, SharedTensor | str | None]], dealer: Dealer,
             transport: Transport) -> list[SharedTensor]:
    """Independent element-wise products batched into one round.

    ``(x, None)`` squares x; ``(x, REDUCE)`` lowers x to f fractional bits.
    """
    jobs = []
    for x, y in pairs:
        if isinstance(y, str):
            jobs.append((x, None, dealer.reduce_mask(x.shape, _shift_for(x.frac, dealer.params))))
        else:
            jobs.append((x, y, _mul_triple_for(x, y, dealer)))
    return _beaver_many(jobs, transport)


def reduce_precision(x: SharedTensor, dealer: Dealer, transport: Transport) -> SharedTensor:
    """Bring x down to f fractional bits in one round (a no-op if it already is)."""
    if x.frac <= dealer.params.frac_bits:
        return x
    return mul_many([(x, REDUCE)], dealer, transport)[0]


def matmul(x: SharedTensor, w: SharedTensor, dealer: Dealer, transport: Transport) -> SharedTensor:
    params = dealer.params
    triple = dealer.matmul_triple(x.shape, w.shape, _shift_for(x.frac, params), _shift_for(w.frac, params))
    return beaver_matmul(x, w, triple, transport)


_OPS.update({"mul": np.multiply, "square": np.multiply, "matmul": _ring_matmul_nd})


def _bits_public(c: np.ndarray, count: int) -> np.ndarray:
    idx = np.arange(count, dtype=np.uint64).reshape((count,) + (1,) * c.ndim)
    return (c[None] >> idx) & np.uint64(1)


def secure_compare_ge_zero(x: SharedTensor, randomness: CompareRandomness | None, transport: Transport,
                           dealer: Dealer) -> SharedTensor:
    """Shares of 1 where x >= 0 else 0 (precision 0), in exactly ell rounds.

    Opens c = x + 2^(ell-1) + r for a dealer mask r with shared bits, then
    recovers bit ell-1 of x + 2^(ell-1) as c_m xor r_m xor borrow, where the
    borrow [c mod 2^m < r mod 2^m] is scanned bit by bit (one round per bit
    after the first). Correct whenever x lies in [-2^(ell-1), 2^(ell-1)).
    """
    ell = dealer.params.comparison_bitlength
    m = ell - 1
    if randomness is None:
        randomness = dealer.compare_randomness(x.shape, ell)
    if randomness.used:
        raise InsufficientRandomness("comparison randomness already consumed")
    if randomness.bitlength < ell or randomness.r.shape != x.shares.shape:
        raise InsufficientRandomness("comparison randomness does not cover the operand")
    randomness.used = True
    one = np.uint64(1)
    two = np.uint64(2)

    y = x.shares.copy()
    y[0] += np.uint64(1) << np.uint64(m)
    c = transport.open(y + randomness.r)
    cb = _bits_public(c, m + 1)
    rb = randomness.bits

    def shared(arr):
        return SharedTensor(arr, 0, x.group_id)

    # borrow after bit 0 is r_0 * (1 - c_0): local
    lt = rb[0] * (one - cb[0])
    for i in range(1, m):
        eq = rb[i] * (two * cb[i] - one)
        eq[0] += one - cb[i]
        prod = mul(shared(eq), shared(lt - rb[i]), dealer, transport)
        lt = rb[i] + prod.shares
    rm_lt = mul(shared(rb[m]), shared(lt), dealer, transport)
    u = rb[m] + lt - two * rm_lt.shares
    out = u * (one - two * cb[m])
    out[0] += cb[m]
    return SharedTensor(out, 0, _derive_group("cmp", x.group_id))
