"""Shapley-value contribution engine with a three-dimensional utility.

A coalition's utility is the vector [top-1 accuracy of the subset's
aggregated model, sum of reciprocal energy, sum of bandwidth]. Per-node
Shapley vectors are computed exactly (subset enumeration, memoized) or by
permutation Monte Carlo, then column-normalized by l1 norm, collapsed to a
scalar per node, and averaged across evaluator nodes into the final
contribution vector.

Negative accuracy-dimension entries (a model that drags subset accuracy
down) survive normalization with their sign; column sums equal one only
when every raw entry is non-negative.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .domain import ENERGY_EPSILON_J, LabeledRecord, MonitoringSample
from .recommender import AccuracyEvaluator, ModelParams, fedavg

DEFAULT_EXACT_CAP = 12
DEFAULT_PERMUTATIONS = 2000

DIMENSIONS = ("accuracy", "energy", "bandwidth")


class ShapleyError(ValueError):
    """Invalid coalition inputs or matrix shapes."""


class ExactSizeError(ShapleyError):
    """Node set too large for exact enumeration; use shapley_sampled."""


@dataclass(frozen=True)
class UtilityVector:
    """Coalition value: [subset accuracy, energy thrift, total bandwidth]."""

    accuracy: float
    energy_thrift: float
    bandwidth: float

    def as_array(self) -> np.ndarray:
        return np.array([self.accuracy, self.energy_thrift, self.bandwidth])


@dataclass
class CoalitionInputs:
    """Per-node model params, energy and bandwidth, plus the shared test set.

    models may be None for consensus engines that do not train (the accuracy
    dimension is then identically zero). Rows of every matrix produced from
    these inputs follow sorted node id order (see node_ids).
    """

    energy_j: dict[int, float]
    bandwidth_kbps: dict[int, float]
    models: dict[int, ModelParams] | None = None
    test_rounds: list[list[LabeledRecord]] | None = None
    reference_samples: list[MonitoringSample] | None = None
    _evaluator: AccuracyEvaluator | None = field(default=None, repr=False)

    def __post_init__(self):
        keys = set(self.energy_j)
        if set(self.bandwidth_kbps) != keys:
            raise ShapleyError("energy and bandwidth maps disagree on node ids")
        if self.models is not None and set(self.models) != keys:
            raise ShapleyError("model map disagrees on node ids")
        if not keys:
            raise ShapleyError("empty node set")
        for node, e in self.energy_j.items():
            if not e > 0:
                raise ShapleyError(f"node {node}: energy must be > 0 (got {e})")
        for node, b in self.bandwidth_kbps.items():
            if b < 0:
                raise ShapleyError(f"node {node}: bandwidth must be >= 0")
        if self.models is not None and self.test_rounds is None:
            raise ShapleyError("models given but no test rounds for accuracy")
        self.node_ids = tuple(sorted(keys))

    def evaluator(self) -> AccuracyEvaluator:
        if self._evaluator is None:
            self._evaluator = AccuracyEvaluator(self.test_rounds,
                                                self.reference_samples)
        return self._evaluator


def energy_of_node(tdp_w: float, cpu_time_s: float) -> float:
    """Node energy in joules: CPU TDP times CPU running time."""
    if not tdp_w > 0:
        raise ShapleyError("cpu_tdp_w must be > 0")
    if cpu_time_s < 0:
        raise ShapleyError("cpu_time_s must be >= 0")
    return tdp_w * cpu_time_s


class _SubsetUtility:
    """Memoized utility-by-bitmask table over a fixed coalition input.

    When all node models share normalization constants (the honest case:
    everyone trained on the same history) the aggregated subset model is
    formed by averaging flattened weight vectors, skipping per-subset
    ModelParams construction entirely.
    """

    def __init__(self, inputs: CoalitionInputs):
        ids = inputs.node_ids
        self.n = len(ids)
        self.inv_e = np.array(
            [1.0 / max(inputs.energy_j[i], ENERGY_EPSILON_J) for i in ids])
        self.bw = np.array([float(inputs.bandwidth_kbps[i]) for i in ids])
        self.models = None
        self._memo: dict[int, tuple[float, float, float]] = {
            0: (0.0, 0.0, 0.0)}
        if inputs.models is not None:
            self.models = [inputs.models[i] for i in ids]
            self.eval = inputs.evaluator()
            first = self.models[0]
            self.shared_norm = all(
                np.array_equal(m.feature_min, first.feature_min)
                and np.array_equal(m.feature_max, first.feature_max)
                for m in self.models)
            if self.shared_norm:
                self._x_norm, self._ref_norm = self.eval.normalized_inputs(first)
                self._flat = np.stack([
                    np.concatenate([a.ravel() for a in (*m.weights, *m.biases)])
                    for m in self.models])
                self._shapes = [a.shape for a in (*first.weights, *first.biases)]
                sizes = np.cumsum([0] + [int(np.prod(s)) for s in self._shapes])
                self._slices = [slice(sizes[i], sizes[i + 1]) for i in range(6)]

    def _accuracy(self, members: list[int]) -> float:
        if self.models is None:
            return 0.0
        if self.shared_norm:
            flat = self._flat[members].mean(axis=0)
            parts = [flat[s].reshape(shape)
                     for s, shape in zip(self._slices, self._shapes)]
            return self.eval.evaluate_arrays(parts[0:3], parts[3:6],
                                             self._x_norm, self._ref_norm)
        return self.eval.evaluate(fedavg([self.models[i] for i in members]))

    def can_batch_prefixes(self) -> bool:
        # Below ~16 nodes the memoized per-mask path wins: permutation
        # prefixes mostly repeat, so utilities come from the cache.
        return self.models is not None and self.shared_norm and self.n > 16

    def prefix_utilities(self, order: np.ndarray) -> np.ndarray:
        """Utilities of all n prefixes of one node ordering, shape (n, 3).

        Batches the n aggregated-model forward passes into single matmuls;
        the additive dimensions are plain cumulative sums.
        """
        counts = np.arange(1, self.n + 1, dtype=np.float64)
        means = np.cumsum(self._flat[order], axis=0) / counts[:, None]
        parts = [np.ascontiguousarray(means[:, s]).reshape(self.n, *shape)
                 for s, shape in zip(self._slices, self._shapes)]
        accs = self.eval.evaluate_many(parts[0:3], parts[3:6],
                                       self._x_norm, self._ref_norm)
        return np.column_stack((accs,
                                np.cumsum(self.inv_e[order]),
                                np.cumsum(self.bw[order])))

    def utility(self, mask: int) -> tuple[float, float, float]:
        hit = self._memo.get(mask)
        if hit is not None:
            return hit
        members = [i for i in range(self.n) if mask >> i & 1]
        value = (self._accuracy(members),
                 float(self.inv_e[members].sum()),
                 float(self.bw[members].sum()))
        self._memo[mask] = value
        return value


def utility(subset, inputs: CoalitionInputs) -> UtilityVector:
    """Utility vector of one subset of nodes; the empty set maps to zeros."""
    members = set(subset)
    if not members.issubset(inputs.node_ids):
        raise ShapleyError("subset contains unknown node ids")
    table = _SubsetUtility(inputs)
    mask = 0
    for node in members:
        mask |= 1 << inputs.node_ids.index(node)
    a, e, b = table.utility(mask)
    return UtilityVector(accuracy=a, energy_thrift=e, bandwidth=b)


def shapley_exact(inputs: CoalitionInputs,
                  exact_cap: int = DEFAULT_EXACT_CAP) -> np.ndarray:
    """Exact per-node Shapley 3-vectors by full subset enumeration.

    s_i = (1/n) * sum over S not containing i of C(n-1, |S|)^-1
    * (U(S + i) - U(S)), applied per utility component. Each of the 2^n
    subsets is evaluated exactly once.
    """
    n = len(inputs.node_ids)
    if n > exact_cap:
        raise ExactSizeError(
            f"{n} nodes exceeds exact_cap={exact_cap}; use shapley_sampled")
    table = _SubsetUtility(inputs)
    values = np.empty((1 << n, 3))
    for mask in range(1 << n):
        values[mask] = table.utility(mask)
    coef = np.array([1.0 / (n * math.comb(n - 1, s)) for s in range(n)])
    result = np.zeros((n, 3))
    for mask in range(1 << n):
        size = mask.bit_count()
        for i in range(n):
            if not mask >> i & 1:
                result[i] += coef[size] * (values[mask | 1 << i] - values[mask])
    return result


def shapley_sampled(inputs: CoalitionInputs, permutations: int,
                    seed: int) -> np.ndarray:
    """Monte Carlo Shapley estimate over uniformly sampled node orderings.

    Averages the marginal contribution of each node over its position in
    random permutations; unbiased for shapley_exact and deterministic for a
    fixed seed. Subset utilities are memoized across permutations.
    """
    if permutations < 1:
        raise ShapleyError("permutations must be >= 1")
    n = len(inputs.node_ids)
    table = _SubsetUtility(inputs)
    rng = np.random.default_rng(seed)
    acc = np.zeros((n, 3))
    batched = table.can_batch_prefixes()
    for _ in range(permutations):
        order = rng.permutation(n)
        if batched:
            utilities = table.prefix_utilities(order)
            acc[order] += np.diff(utilities, axis=0, prepend=0.0)
        else:
            mask = 0
            prev = np.zeros(3)
            for i in order:
                mask |= 1 << int(i)
                cur = np.asarray(table.utility(mask))
                acc[i] += cur - prev
                prev = cur
    return acc / permutations


def shapley_additive_exact(inputs: CoalitionInputs) -> np.ndarray:
    """Closed-form Shapley matrix when no models are present.

    Without an accuracy dimension both remaining utilities are additive
    over nodes, so each node's exact Shapley entry is its singleton value
    (1/e_i and b_i); valid for any coalition size.
    """
    if inputs.models is not None:
        raise ShapleyError("closed form only applies without models")
    n = len(inputs.node_ids)
    raw = np.zeros((n, 3))
    for row, node in enumerate(inputs.node_ids):
        raw[row, 1] = 1.0 / max(inputs.energy_j[node], ENERGY_EPSILON_J)
        raw[row, 2] = float(inputs.bandwidth_kbps[node])
    return raw


def normalize(raw: np.ndarray) -> np.ndarray:
    """Divide each column by its l1 norm; all-zero columns stay zero."""
    raw = np.asarray(raw, dtype=np.float64)
    norms = np.abs(raw).sum(axis=0)
    safe = np.where(norms == 0.0, 1.0, norms)
    return raw / safe


def collapse(normalized: np.ndarray,
             include: tuple[bool, bool, bool] = (True, True, True)) -> np.ndarray:
    """Per-node scalar: mean of the included columns of the normalized matrix.

    With all three dimensions included this is the single-token budget split
    (each dimension's unit budget shares one token, hence the /3).
    """
    normalized = np.asarray(normalized, dtype=np.float64)
    if normalized.ndim != 2 or normalized.shape[1] != 3:
        raise ShapleyError("expected an (n, 3) matrix")
    cols = [j for j, inc in enumerate(include) if inc]
    if not cols:
        raise ShapleyError("at least one dimension must be included")
    return normalized[:, cols].mean(axis=1)


def consensus_average(evaluator_matrix: np.ndarray) -> np.ndarray:
    """Final contribution vector: row mean over evaluator columns."""
    g = np.asarray(evaluator_matrix, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ShapleyError("consensus matrix must be square (nodes x evaluators)")
    return g.mean(axis=1)


@dataclass(frozen=True)
class ShapleyReport:
    """Everything one contribution evaluation produced, in node id order."""

    node_ids: tuple[int, ...]
    raw: np.ndarray
    normalized: np.ndarray
    collapsed: np.ndarray
    consensus_matrix: np.ndarray
    final: np.ndarray

    def to_json(self) -> str:
        payload = {
            "node_ids": list(self.node_ids),
            "raw": self.raw.tolist(),
            "normalized": self.normalized.tolist(),
            "collapsed": self.collapsed.tolist(),
            "consensus": self.consensus_matrix.tolist(),
            "final": self.final.tolist(),
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ShapleyReport":
        d = json.loads(text)
        return cls(node_ids=tuple(d["node_ids"]),
                   raw=np.array(d["raw"]),
                   normalized=np.array(d["normalized"]),
                   collapsed=np.array(d["collapsed"]),
                   consensus_matrix=np.array(d["consensus"]),
                   final=np.array(d["final"]))

    def final_csv(self) -> str:
        lines = ["node_id,contribution"]
        lines += [f"{nid},{val!r}" for nid, val in zip(self.node_ids, self.final)]
        return "\n".join(lines) + "\n"


def compute_report(inputs: CoalitionInputs, *,
                   include: tuple[bool, bool, bool] = (True, True, True),
                   exact_cap: int = DEFAULT_EXACT_CAP,
                   permutations: int = DEFAULT_PERMUTATIONS,
                   seed: int = 0) -> ShapleyReport:
    """Full pipeline: raw matrix, normalization, collapse, consensus average.

    Every evaluator node computes from the same inputs here (all honest),
    so the consensus matrix replicates one evaluator's column.
    """
    n = len(inputs.node_ids)
    if inputs.models is None:
        raw = shapley_additive_exact(inputs)
    elif n <= exact_cap:
        raw = shapley_exact(inputs, exact_cap=exact_cap)
    else:
        raw = shapley_sampled(inputs, permutations=permutations, seed=seed)
    normalized = normalize(raw)
    collapsed = collapse(normalized, include=include)
    consensus = np.tile(collapsed[:, None], (1, n))
    final = consensus_average(consensus)
    return ShapleyReport(node_ids=inputs.node_ids, raw=raw,
                         normalized=normalized, collapsed=collapsed,
                         consensus_matrix=consensus, final=final)
