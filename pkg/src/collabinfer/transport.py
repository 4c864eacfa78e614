"""Simulated all-to-all message passing with latency/bandwidth injection.

Rounds follow a bulk-synchronous model: every party contributes one payload,
all payloads are delivered to everyone, and the simulated clock advances by
the slowest link of that round (``rtt + bytes * 8 / bandwidth``).
"""
from __future__ import annotations

import configparser
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import PartyAbort, TransportFailure, UnknownPreset


@dataclass(frozen=True)
class LinkProfile:
    rtt_ms: float
    bandwidth_bits_per_sec: float

    def __post_init__(self):
        if self.rtt_ms < 0:
            raise ValueError("rtt_ms must be non-negative")
        if self.bandwidth_bits_per_sec <= 0:
            raise ValueError("bandwidth must be positive")


@dataclass
class NetworkPreset:
    name: str
    rtt_ms: np.ndarray
    bandwidth_bps: np.ndarray
    nominal: LinkProfile | None = None

    def __post_init__(self):
        self.rtt_ms = np.asarray(self.rtt_ms, dtype=np.float64)
        self.bandwidth_bps = np.asarray(self.bandwidth_bps, dtype=np.float64)
        k = self.rtt_ms.shape[0]
        if self.rtt_ms.shape != (k, k) or self.bandwidth_bps.shape != (k, k):
            raise ValueError("link matrices must be square and of equal size")
        if not np.allclose(self.rtt_ms, self.rtt_ms.T) or not np.allclose(self.bandwidth_bps, self.bandwidth_bps.T):
            raise ValueError("link matrices must be symmetric")
        if np.any(np.diag(self.rtt_ms) != 0):
            raise ValueError("diagonal rtt must be zero")
        off = ~np.eye(k, dtype=bool)
        if np.any(self.rtt_ms < 0) or np.any(self.bandwidth_bps[off] <= 0):
            raise ValueError("invalid link profile")
        if self.nominal is None:
            if k > 1:
                self.nominal = LinkProfile(float(self.rtt_ms[off].mean()), float(self.bandwidth_bps[off].mean()))
            else:
                self.nominal = LinkProfile(0.0, float("inf"))

    @property
    def parties(self) -> int:
        return self.rtt_ms.shape[0]

    def link(self, i: int, j: int) -> LinkProfile:
        return LinkProfile(float(self.rtt_ms[i, j]), float(self.bandwidth_bps[i, j]))


# (rtt low, rtt high) in ms and (bandwidth low, bandwidth high) in bit/s
_PRESET_TABLE: dict[str, tuple[tuple[float, float], tuple[float, float]]] = {
    "intra_zone": ((0.20, 0.20), (4.9e9, 4.9e9)),
    "inter_zone": ((1.16, 1.16), (4.9e9, 4.9e9)),
    "multi_zone_eu": ((6.0, 32.0), (0.9e9, 2.7e9)),
    "inter_continent": ((250.0, 250.0), (120e6, 120e6)),
    "global": ((170.0, 295.0), (95e6, 180e6)),
}

PRESET_ORDER: tuple[str, ...] = tuple(_PRESET_TABLE)


def preset_names() -> list[str]:
    return list(PRESET_ORDER)


def load_preset(name: str, parties: int = 3) -> NetworkPreset:
    """Build the K x K link matrices of a named deployment.

    Ranged presets spread their range over the links: the first pair gets the
    slowest link (highest rtt, lowest bandwidth), the last the fastest.
    ``nominal`` carries the range midpoints.
    """
    key = name.strip().lower().replace("-", "_")
    if key not in _PRESET_TABLE:
        raise UnknownPreset(name)
    if parties < 1:
        raise ValueError("parties must be >= 1")
    (rtt_lo, rtt_hi), (bw_lo, bw_hi) = _PRESET_TABLE[key]
    rtt = np.zeros((parties, parties))
    bw = np.full((parties, parties), np.inf)
    pairs = [(i, j) for i in range(parties) for j in range(i + 1, parties)]
    n = len(pairs)
    for p, (i, j) in enumerate(pairs):
        t = 1.0 if n == 1 else 1.0 - p / (n - 1)
        rtt[i, j] = rtt[j, i] = rtt_lo + t * (rtt_hi - rtt_lo)
        bw[i, j] = bw[j, i] = bw_hi - t * (bw_hi - bw_lo)
    nominal = LinkProfile((rtt_lo + rtt_hi) / 2, (bw_lo + bw_hi) / 2)
    return NetworkPreset(key, rtt, bw, nominal)


def uniform_preset(parties: int, rtt_ms: float, bandwidth_bps: float, name: str = "custom") -> NetworkPreset:
    rtt = np.full((parties, parties), float(rtt_ms))
    np.fill_diagonal(rtt, 0.0)
    bw = np.full((parties, parties), float(bandwidth_bps))
    return NetworkPreset(name, rtt, bw, LinkProfile(float(rtt_ms), float(bandwidth_bps)))


def _parse_matrix(text: str) -> np.ndarray:
    rows = [r for r in text.replace("\n", ";").split(";") if r.strip()]
    return np.array([[float(v) for v in r.replace(",", " ").split()] for r in rows])


def load_presets_file(path: str | Path, parties: int = 3) -> dict[str, NetworkPreset]:
    """Read presets from an INI-style key-value file.

    Each section is a preset name with ``rtt_ms`` and ``bandwidth_bps``; both
    accept a scalar (applied to every link) or a matrix written as
    ``a, b, c; d, e, f; ...``.
    """
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    out = {}
    for section in cp.sections():
        rtt = _parse_matrix(cp[section]["rtt_ms"])
        bw = _parse_matrix(cp[section]["bandwidth_bps"])
        k = max(rtt.shape[0], bw.shape[0], 1) if (rtt.size > 1 or bw.size > 1) else parties
        if rtt.size == 1:
            rtt = np.full((k, k), rtt.item())
            np.fill_diagonal(rtt, 0.0)
        if bw.size == 1:
            bw = np.full((k, k), bw.item())
        out[section] = NetworkPreset(section, rtt, bw)
    return out


@dataclass
class RoundLedger:
    parties: int
    rounds: int = 0
    simulated_elapsed_ms: float = 0.0
    latency_floor_ms: float = 0.0
    bytes_sent: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.bytes_sent is None:
            self.bytes_sent = np.zeros((self.parties, self.parties), dtype=np.int64)

    @property
    def bytes_total(self) -> int:
        return int(self.bytes_sent.sum())

    def snapshot(self) -> tuple[int, int, float]:
        return self.rounds, self.bytes_total, self.simulated_elapsed_ms

    def to_dict(self) -> dict:
        return {"rounds": self.rounds, "bytes_total": self.bytes_total, "elapsed_ms": self.simulated_elapsed_ms}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _nbytes(payload) -> int:
    if isinstance(payload, np.ndarray):
        return int(payload.nbytes)
    if isinstance(payload, (bytes, bytearray, memoryview)):
        return len(payload)
    if isinstance(payload, (list, tuple)):
        return sum(_nbytes(p) for p in payload)
    raise TransportFailure(f"unsupported payload type {type(payload).__name__}")


class Transport:
    """In-process channel among ``parties`` logical parties.

    ``fail_at_round``/``fail_party`` inject a fail-stop abort: the named party
    stops contributing once the ledger reaches that round.
    """

    def __init__(self, parties: int, preset: NetworkPreset | None = None,
                 fail_at_round: int | None = None, fail_party: int = 0):
        if parties < 1:
            raise ValueError("parties must be >= 1")
        if preset is not None and preset.parties != parties:
            raise ValueError(f"preset built for {preset.parties} parties, transport has {parties}")
        self.parties = parties
        self.preset = preset
        self.ledger = RoundLedger(parties)
        self.fail_at_round = fail_at_round
        self.fail_party = fail_party
        self._dead: set[int] = set()

    def abort(self, party: int) -> None:
        self._dead.add(party)

    def barrier(self) -> None:
        """Liveness check between protocol phases; costs no round."""
        if self.fail_at_round is not None and self.ledger.rounds >= self.fail_at_round:
            self._dead.add(self.fail_party)
        if self._dead:
            party = min(self._dead)
            raise PartyAbort(party, f"party {party} is unresponsive")

    def exchange(self, round_payloads: Sequence) -> list[list]:
        """All-to-all delivery of one payload per party; one protocol round."""
        k = self.parties
        if len(round_payloads) != k:
            raise TransportFailure(f"expected {k} payloads, got {len(round_payloads)}")
        if self.fail_at_round is not None and self.ledger.rounds >= self.fail_at_round:
            self._dead.add(self.fail_party)
        for i, p in enumerate(round_payloads):
            if p is None or i in self._dead:
                raise PartyAbort(i, f"party {i} did not contribute to round {self.ledger.rounds}")
        if k == 1:
            return [list(round_payloads)]
        sizes = [_nbytes(p) for p in round_payloads]
        step = 0.0
        rtt_max = 0.0
        for i in range(k):
            for j in range(k):
                if i == j:
                    continue
                self.ledger.bytes_sent[i, j] += sizes[i]
                if self.preset is not None:
                    rtt = self.preset.rtt_ms[i, j]
                    cost = rtt + sizes[i] * 8.0 / self.preset.bandwidth_bps[i, j] * 1000.0
                    step = max(step, cost)
                    rtt_max = max(rtt_max, rtt)
        self.ledger.rounds += 1
        self.ledger.simulated_elapsed_ms += step
        self.ledger.latency_floor_ms += rtt_max
        return [list(round_payloads) for _ in range(k)]

    def open(self, *sharings: np.ndarray):
        """Reveal one or more sharings (party axis first) in a single round.

        Returns the reconstructed array, or a list of arrays when several
        sharings are opened together.
        """
        k = self.parties
        payloads = [[s[i] for s in sharings] for i in range(k)]
        delivered = self.exchange(payloads)
        views = delivered[0]
        out = []
        for idx in range(len(sharings)):
            total = views[0][idx].copy()
            for v in views[1:]:
                total += v[idx]
            out.append(total)
        return out[0] if len(out) == 1 else out
