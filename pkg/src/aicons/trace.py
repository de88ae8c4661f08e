"""Synthetic monitoring-trace generation and CSV ingestion.

The generator mimics the shape of a cluster-workload dataset: CPU TDP from
a small discrete wattage set, Beta-distributed usage fractions, log-normal
(right-skewed) bandwidth, and one labeled winner per group of records.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .domain import (DomainError, LabeledRecord, MonitoringSample,
                     NodeProfile, TRACE_FIELDS, TRACE_HEADER, label_group,
                     validate_sample)

TDP_CHOICES = (35.0, 65.0, 95.0, 125.0)


class TraceError(DomainError):
    """Invalid trace spec or malformed trace file."""


@dataclass(frozen=True)
class TraceSpec:
    """Parameters of one synthetic trace."""

    records: int = 10000
    nodes: int = 10
    group_size: int | None = None  # None = one record per node per group
    seed: int = 0
    planted_winner: int | None = None

    def __post_init__(self):
        if self.nodes < 2:
            raise TraceError("need at least 2 nodes")
        if self.records < self.nodes:
            raise TraceError("record count must be >= node count")
        k = self.effective_group_size
        if k < 2:
            raise TraceError("group size must be >= 2")
        if self.planted_winner is not None and not (
                0 <= self.planted_winner < self.nodes):
            raise TraceError("planted_winner out of range")

    @property
    def effective_group_size(self) -> int:
        return self.group_size if self.group_size is not None else self.nodes


def default_profiles(n_nodes: int, rng: np.random.Generator,
                     planted_winner: int | None = None) -> list[NodeProfile]:
    """Heterogeneous per-node draw distributions.

    planted_winner, when set, gets a systematically superior profile (high
    bandwidth, low usage, low energy) so the labeling rule concentrates on
    it and a ranking model has a recoverable signal.
    """
    profiles = []
    for node in range(n_nodes):
        tdp = float(rng.choice(TDP_CHOICES))
        usage_mean = float(rng.uniform(0.25, 0.85))
        mem_mean = float(rng.uniform(0.2, 0.8))
        profile = NodeProfile(
            node_id=node,
            cpu_tdp_w=tdp,
            usage_a=usage_mean * 10.0,
            usage_b=(1.0 - usage_mean) * 10.0,
            mem_a=mem_mean * 8.0,
            mem_b=(1.0 - mem_mean) * 8.0,
            cpi_mean=float(rng.uniform(0.6, 3.0)),
            cpi_sd=0.15,
            bw_log_mu=float(rng.uniform(math.log(3000.0), math.log(20000.0))),
            bw_log_sigma=0.9,
            cpu_time_mean=float(rng.uniform(0.5, 4.0)),
            cpu_time_sd=0.3,
        )
        profiles.append(profile)
    if planted_winner is not None:
        base = profiles[planted_winner]
        profiles[planted_winner] = NodeProfile(
            node_id=base.node_id,
            cpu_tdp_w=35.0,
            usage_a=2.0, usage_b=14.0,
            mem_a=base.mem_a, mem_b=base.mem_b,
            cpi_mean=0.6, cpi_sd=0.1,
            bw_log_mu=math.log(45000.0), bw_log_sigma=0.5,
            cpu_time_mean=0.5, cpu_time_sd=0.1,
        )
    return profiles


def _group_bounds(total: int, k: int) -> list[tuple[int, int]]:
    """Consecutive chunks of size k; a single trailing record joins the
    previous group so every group can hold a labeling contest."""
    bounds = []
    start = 0
    while start < total:
        end = min(start + k, total)
        if total - end == 1:
            end = total
        bounds.append((start, end))
        start = end
    return bounds


def generate_trace(spec: TraceSpec) -> list[LabeledRecord]:
    """Deterministic synthetic trace with one labeled winner per group."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    profiles = default_profiles(spec.nodes, rng, spec.planted_winner)
    samples = [profiles[i % spec.nodes].draw(rng) for i in range(spec.records)]
    records: list[LabeledRecord] = []
    for start, end in _group_bounds(spec.records, spec.effective_group_size):
        group = samples[start:end]
        winner = label_group(group)
        records += [LabeledRecord(s, i == winner) for i, s in enumerate(group)]
    return records


def trace_rounds(records: list[LabeledRecord],
                 group_size: int) -> list[list[LabeledRecord]]:
    """Split a flat trace back into its labeling groups."""
    return [records[start:end]
            for start, end in _group_bounds(len(records), group_size)]


def _format_row(record: LabeledRecord) -> str:
    s = record.sample
    parts = [str(s.node_id)] + [repr(v) for v in (
        s.cpu_tdp_w, s.cpu_usage, s.mem_usage, s.cpi, s.bandwidth_kbps,
        s.cpu_time_s)] + ["1" if record.is_winner else "0"]
    return ",".join(parts)


def save_trace(records: list[LabeledRecord], path) -> None:
    """Write a trace CSV (repr floats, so reloading is exact)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(TRACE_HEADER + "\n")
        for record in records:
            fh.write(_format_row(record) + "\n")


def load_trace(path, group_size: int | None = None) -> list[LabeledRecord]:
    """Load and validate a trace CSV.

    Malformed rows and invariant violations are reported with their line
    number. When group_size is given, each consecutive group must contain
    exactly one winner. A header-only file loads as an empty trace with a
    warning.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise TraceError(f"{path}: empty file, missing header")
    if lines[0] != TRACE_HEADER:
        raise TraceError(f"{path}: header mismatch, expected '{TRACE_HEADER}'")
    records: list[LabeledRecord] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(TRACE_FIELDS):
            raise TraceError(f"{path}:{lineno}: expected {len(TRACE_FIELDS)} "
                             f"columns, found {len(parts)}")
        try:
            sample = MonitoringSample(
                node_id=int(parts[0]), cpu_tdp_w=float(parts[1]),
                cpu_usage=float(parts[2]), mem_usage=float(parts[3]),
                cpi=float(parts[4]), bandwidth_kbps=float(parts[5]),
                cpu_time_s=float(parts[6]))
            winner_flag = parts[7].strip()
            if winner_flag not in ("0", "1"):
                raise ValueError("is_winner must be 0 or 1")
        except ValueError as exc:
            raise TraceError(f"{path}:{lineno}: malformed row ({exc})") from exc
        violations = validate_sample(sample)
        if violations:
            raise TraceError(
                f"{path}:{lineno}: invalid sample ({', '.join(violations)})")
        records.append(LabeledRecord(sample, winner_flag == "1"))
    if not records:
        warnings.warn(f"{path}: trace contains a header but no records")
        return records
    if group_size is not None:
        for g, (start, end) in enumerate(_group_bounds(len(records), group_size)):
            winners = sum(1 for r in records[start:end] if r.is_winner)
            if winners != 1:
                raise TraceError(
                    f"{path}: group {g} (records {start}-{end - 1}) has "
                    f"{winners} winners, expected exactly 1")
    return records
