"""Shared domain types for the consensus simulator.

Everything measured about a node lives in :class:`MonitoringSample`; blocks,
labeled training records, and node profiles are thin immutable containers
around it. All types are frozen dataclasses and safe to share across
execution contexts.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

# Clamp applied before taking 1/energy anywhere downstream.
ENERGY_EPSILON_J = 1e-9

# Column contract for trace CSV files.
TRACE_FIELDS = (
    "node_id",
    "cpu_tdp_w",
    "cpu_usage",
    "mem_usage",
    "cpi",
    "bandwidth_kbps",
    "cpu_time_s",
    "is_winner",
)
TRACE_HEADER = ",".join(TRACE_FIELDS)

# FNV-1a 64-bit constants; digest(b"") == FNV64_OFFSET_BASIS.
FNV64_OFFSET_BASIS = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


class DomainError(ValueError):
    """A domain invariant was violated."""


class ChainIntegrityError(DomainError):
    """A ledger chain failed its re-validation walk."""

    def __init__(self, height: int, reason: str):
        super().__init__(f"chain invalid at height {height}: {reason}")
        self.height = height
        self.reason = reason


@dataclass(frozen=True)
class MonitoringSample:
    """One node's observed resource state at a point in time."""

    node_id: int
    cpu_tdp_w: float
    cpu_usage: float
    mem_usage: float
    cpi: float
    bandwidth_kbps: float
    cpu_time_s: float

    def features(self) -> tuple[float, float, float, float, float]:
        """The five model inputs: TDP, CPU usage, memory usage, CPI, bandwidth."""
        return (self.cpu_tdp_w, self.cpu_usage, self.mem_usage, self.cpi,
                self.bandwidth_kbps)


def validate_sample(sample: MonitoringSample) -> list[str]:
    """Return the names of every violated field invariant (empty list = ok).

    Total function: never raises, reports all violations at once.
    """
    violations = []
    if not isinstance(sample.node_id, int) or sample.node_id < 0:
        violations.append("node_id")
    if not (sample.cpu_tdp_w > 0 and math.isfinite(sample.cpu_tdp_w)):
        violations.append("cpu_tdp_w")
    if not (0.0 <= sample.cpu_usage <= 1.0):
        violations.append("cpu_usage")
    if not (0.0 <= sample.mem_usage <= 1.0):
        violations.append("mem_usage")
    if not (sample.cpi > 0 and math.isfinite(sample.cpi)):
        violations.append("cpi")
    if not (sample.bandwidth_kbps >= 0 and math.isfinite(sample.bandwidth_kbps)):
        violations.append("bandwidth_kbps")
    if not (sample.cpu_time_s >= 0 and math.isfinite(sample.cpu_time_s)):
        violations.append("cpu_time_s")
    return violations


@dataclass(frozen=True)
class LabeledRecord:
    """A monitoring sample plus its winner label for one labeling group."""

    sample: MonitoringSample
    is_winner: bool


@dataclass(frozen=True)
class NodeProfile:
    """Static draw distributions for one node's monitoring stream.

    cpu_usage and mem_usage are Beta-distributed, bandwidth is log-normal
    (right-skewed), cpi and cpu_time are clipped normals, and cpu_tdp is a
    fixed wattage. All draws satisfy the MonitoringSample invariants.
    """

    node_id: int
    cpu_tdp_w: float
    usage_a: float
    usage_b: float
    mem_a: float
    mem_b: float
    cpi_mean: float
    cpi_sd: float
    bw_log_mu: float
    bw_log_sigma: float
    cpu_time_mean: float
    cpu_time_sd: float
    honest: bool = True

    def draw(self, rng) -> MonitoringSample:
        """Draw one sample from this profile using the given numpy Generator."""
        usage = float(rng.beta(self.usage_a, self.usage_b))
        mem = float(rng.beta(self.mem_a, self.mem_b))
        cpi = max(0.05, float(rng.normal(self.cpi_mean, self.cpi_sd)))
        bw = float(rng.lognormal(self.bw_log_mu, self.bw_log_sigma))
        cpu_time = max(0.05, float(rng.normal(self.cpu_time_mean, self.cpu_time_sd)))
        return MonitoringSample(
            node_id=self.node_id,
            cpu_tdp_w=self.cpu_tdp_w,
            cpu_usage=min(1.0, usage),
            mem_usage=min(1.0, mem),
            cpi=cpi,
            bandwidth_kbps=bw,
            cpu_time_s=cpu_time,
        )


@dataclass(frozen=True)
class LedgerBlock:
    """Simulated block: opaque transactions plus the winner's evidence."""

    height: int
    parent_digest: int
    tx_count: int
    winner_id: int
    winner_sample: MonitoringSample
    model_blob_digest: int
    timestamp_s: float


# Placeholder sample carried by the genesis block (winner_id -1).
GENESIS_SAMPLE = MonitoringSample(
    node_id=0, cpu_tdp_w=1.0, cpu_usage=0.0, mem_usage=0.0,
    cpi=1.0, bandwidth_kbps=0.0, cpu_time_s=0.0,
)


def digest(data: bytes) -> int:
    """64-bit FNV-1a digest; deterministic across runs and platforms.

    Non-cryptographic by design: the simulated ledger only needs a stable
    hash-chain, not collision resistance against an adversary.
    """
    h = FNV64_OFFSET_BASIS
    for byte in data:
        h = ((h ^ byte) * FNV64_PRIME) & _U64
    return h


def sample_bytes(sample: MonitoringSample) -> bytes:
    """Canonical little-endian encoding of a sample."""
    return struct.pack(
        "<q6d", sample.node_id, sample.cpu_tdp_w, sample.cpu_usage,
        sample.mem_usage, sample.cpi, sample.bandwidth_kbps, sample.cpu_time_s,
    )


def block_bytes(block: LedgerBlock) -> bytes:
    """Canonical little-endian encoding of a block, used for chain digests."""
    head = struct.pack(
        "<qQqqQd", block.height, block.parent_digest, block.tx_count,
        block.winner_id, block.model_blob_digest, block.timestamp_s,
    )
    return head + sample_bytes(block.winner_sample)


def block_digest(block: LedgerBlock) -> int:
    return digest(block_bytes(block))


def sample_to_dict(sample: MonitoringSample) -> dict:
    return {
        "node_id": sample.node_id,
        "cpu_tdp_w": sample.cpu_tdp_w,
        "cpu_usage": sample.cpu_usage,
        "mem_usage": sample.mem_usage,
        "cpi": sample.cpi,
        "bandwidth_kbps": sample.bandwidth_kbps,
        "cpu_time_s": sample.cpu_time_s,
    }


def sample_from_dict(d: dict) -> MonitoringSample:
    return MonitoringSample(
        node_id=int(d["node_id"]),
        cpu_tdp_w=float(d["cpu_tdp_w"]),
        cpu_usage=float(d["cpu_usage"]),
        mem_usage=float(d["mem_usage"]),
        cpi=float(d["cpi"]),
        bandwidth_kbps=float(d["bandwidth_kbps"]),
        cpu_time_s=float(d["cpu_time_s"]),
    )


def block_to_json(block: LedgerBlock) -> str:
    """One-line JSON encoding with stable key order (chain export format)."""
    payload = {
        "height": block.height,
        "parent_digest": block.parent_digest,
        "tx_count": block.tx_count,
        "winner_id": block.winner_id,
        "winner_sample": sample_to_dict(block.winner_sample),
        "model_blob_digest": block.model_blob_digest,
        "timestamp_s": block.timestamp_s,
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def block_from_json(line: str) -> LedgerBlock:
    d = json.loads(line)
    return LedgerBlock(
        height=int(d["height"]),
        parent_digest=int(d["parent_digest"]),
        tx_count=int(d["tx_count"]),
        winner_id=int(d["winner_id"]),
        winner_sample=sample_from_dict(d["winner_sample"]),
        model_blob_digest=int(d["model_blob_digest"]),
        timestamp_s=float(d["timestamp_s"]),
    )


def _minmax_norm(values: list[float]) -> list[float]:
    lo, hi = min(values), max(values)
    if hi == lo:
        return [0.0] * len(values)
    return [(v - lo) / (hi - lo) for v in values]


def label_group(samples: list[MonitoringSample]) -> int:
    """Index of the winner within one labeling group.

    The winner maximizes normalized(bandwidth) + normalized(1/energy)
    - normalized(cpu_usage), where energy = cpu_tdp * cpu_time clamped away
    from zero. Min-max normalization is group-local; ties break to the
    lowest node_id, then the earliest index.
    """
    if not samples:
        raise DomainError("cannot label an empty group")
    bw = _minmax_norm([s.bandwidth_kbps for s in samples])
    thrift = _minmax_norm(
        [1.0 / max(s.cpu_tdp_w * s.cpu_time_s, ENERGY_EPSILON_J) for s in samples]
    )
    usage = _minmax_norm([s.cpu_usage for s in samples])
    scores = [bw[i] + thrift[i] - usage[i] for i in range(len(samples))]
    best = 0
    for i in range(1, len(samples)):
        if scores[i] > scores[best] or (
            scores[i] == scores[best] and samples[i].node_id < samples[best].node_id
        ):
            best = i
    return best


def verify_chain(blocks: list[LedgerBlock]) -> None:
    """Re-validate a chain: contiguous heights and matching parent digests.

    Raises ChainIntegrityError naming the first bad height.
    """
    if not blocks:
        raise ChainIntegrityError(0, "empty chain")
    if blocks[0].height != 0:
        raise ChainIntegrityError(blocks[0].height, "genesis height is not 0")
    for prev, cur in zip(blocks, blocks[1:]):
        if cur.height != prev.height + 1:
            raise ChainIntegrityError(cur.height, "non-contiguous height")
        expected = block_digest(prev)
        if cur.parent_digest != expected:
            raise ChainIntegrityError(cur.height, "parent digest mismatch")
    for block in blocks:
        if block.tx_count <= 0:
            raise ChainIntegrityError(block.height, "non-positive tx_count")
