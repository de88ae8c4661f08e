"""Evaluation metrics: fairness ratios, ablations, trend fits, and profit.

Pure post-processing over immutable simulation results. Baseline engines
are scored with the identical contribution pipeline the AI engine uses, so
the reward-contribution ratio is comparable across engines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import polynomial as npoly

from .shapley import collapse
from .simulation import RoundOutcome, SimResult

KWH_PER_JOULE = 1.0 / 3.6e6
DEFAULT_ELECTRICITY_AUD_PER_KWH = 0.30
DEFAULT_TOKEN_PRICE_AUD = 1798.68


class MetricsError(ValueError):
    """Invalid metric inputs."""


@dataclass(frozen=True)
class FairnessRow:
    """One node's cumulative reward, contribution, and their ratio."""

    node_id: int
    reward: float
    contribution: float
    ratio: float
    degenerate: bool = False


@dataclass(frozen=True)
class AblationMask:
    """Which Shapley dimensions take part in the reward collapse."""

    include_accuracy: bool = True
    include_energy: bool = True
    include_bandwidth: bool = True

    def __post_init__(self):
        if not (self.include_accuracy or self.include_energy
                or self.include_bandwidth):
            raise MetricsError("ablation mask cannot drop every dimension")

    def as_tuple(self) -> tuple[bool, bool, bool]:
        return (self.include_accuracy, self.include_energy,
                self.include_bandwidth)

    def label(self) -> str:
        parts = [name for name, inc in zip(
            ("accuracy", "energy", "bandwidth"), self.as_tuple()) if inc]
        return "+".join(parts)


def reward_contribution_ratio(outcomes: list[RoundOutcome],
                              contributions: list[np.ndarray],
                              node_ids: tuple[int, ...] | None = None
                              ) -> list[FairnessRow]:
    """Cumulative per-node reward divided by cumulative contribution.

    contributions holds one vector per outcome (node id order). A node with
    non-positive cumulative contribution gets ratio 0 and a degenerate flag.
    """
    if len(outcomes) != len(contributions):
        raise MetricsError("outcomes and contributions must align per round")
    if not outcomes:
        raise MetricsError("no outcomes to evaluate")
    if node_ids is None:
        node_ids = tuple(sorted(outcomes[0].rewards))
    for o, c in zip(outcomes, contributions):
        if set(o.rewards) != set(node_ids) or len(c) != len(node_ids):
            raise MetricsError("node set mismatch between rounds")
    rows = []
    for idx, node in enumerate(node_ids):
        reward = sum(o.rewards[node] for o in outcomes)
        contribution = float(sum(c[idx] for c in contributions))
        if contribution > 0:
            rows.append(FairnessRow(node, reward, contribution,
                                    reward / contribution))
        else:
            rows.append(FairnessRow(node, reward, contribution, 0.0,
                                    degenerate=True))
    return rows


def run_ablation(result: SimResult, mask: AblationMask) -> list[FairnessRow]:
    """Re-issue rewards from an ablated collapse of each round's matrix.

    The collapse averages only the included columns; ratios are computed
    against the full three-dimension contribution of the same rounds. Only
    rounds where all three dimensions carry signal take part, so every mask
    is compared over the identical round subset.
    """
    cfg = result.config
    ablated_rewards = []
    full_contributions = []
    for report, contribution in zip(result.reports, result.contributions):
        if not np.any(report.raw[:, 0]):
            continue
        s = collapse(report.normalized, include=mask.as_tuple())
        value = cfg.budget * s
        if cfg.clamp_rewards:
            value = np.maximum(value, 0.0)
        ablated_rewards.append(value)
        full_contributions.append(contribution)
    if not ablated_rewards:
        raise MetricsError("no three-dimensional rounds to ablate")
    rows = []
    for idx, node in enumerate(result.node_ids):
        reward = float(sum(r[idx] for r in ablated_rewards))
        contribution = float(sum(c[idx] for c in full_contributions))
        if contribution > 0:
            rows.append(FairnessRow(node, reward, contribution,
                                    reward / contribution))
        else:
            rows.append(FairnessRow(node, reward, contribution, 0.0,
                                    degenerate=True))
    return rows


def ratio_spread(rows: list[FairnessRow]) -> float:
    """Population standard deviation of the fairness ratios."""
    return float(np.std([row.ratio for row in rows]))


@dataclass(frozen=True)
class TrendFit:
    """Least-squares polynomial fit of reward against one driver."""

    degree: int
    coefficients: tuple[float, ...]  # ascending powers
    x_min: float
    x_max: float

    def predict(self, xs) -> np.ndarray:
        return npoly.polyval(np.asarray(xs, dtype=np.float64),
                             np.asarray(self.coefficients))

    def mean_derivative(self) -> float:
        """Average slope over the observed range: (P(max)-P(min))/(max-min)."""
        if self.x_max == self.x_min:
            raise MetricsError("mean derivative undefined on a point range")
        span = self.x_max - self.x_min
        return float((self.predict(self.x_max) - self.predict(self.x_min))
                     / span)


def fit_trend(xs, ys, degree: int = 3) -> TrendFit:
    """Degree-d least-squares polynomial fit (residual-norm minimizer)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if degree < 1:
        raise MetricsError("degree must be >= 1")
    if xs.shape != ys.shape or xs.ndim != 1:
        raise MetricsError("xs and ys must be equal-length 1-d sequences")
    if len(np.unique(xs)) < degree + 1:
        raise MetricsError(
            f"need at least {degree + 1} distinct x values, only "
            f"{len(np.unique(xs))} given")
    coeffs = npoly.polyfit(xs, ys, degree)
    return TrendFit(degree=degree, coefficients=tuple(float(c) for c in coeffs),
                    x_min=float(xs.min()), x_max=float(xs.max()))


def reward_points(result: SimResult, driver: str) -> tuple[list[float], list[float]]:
    """Pooled (driver value, reward) points across nodes and rounds.

    driver is one of 'accuracy' (the node's local model accuracy that
    round; rounds without trained models are skipped), 'energy' (monitored
    joules), or 'bandwidth' (monitored kbps).
    """
    if driver not in ("accuracy", "energy", "bandwidth"):
        raise MetricsError(f"unknown trend driver '{driver}'")
    xs: list[float] = []
    ys: list[float] = []
    for r, outcome in enumerate(result.outcomes):
        if driver == "accuracy":
            local = result.local_accuracy[r]
            for node, acc in local.items():
                xs.append(acc)
                ys.append(outcome.rewards[node])
            continue
        for sample in result.samples[r]:
            if driver == "energy":
                xs.append(sample.cpu_tdp_w * sample.cpu_time_s)
            else:
                xs.append(sample.bandwidth_kbps)
            ys.append(outcome.rewards[sample.node_id])
    return xs, ys


def profit(reward_tokens: float, price_aud_per_token: float, tdp_w: float,
           time_s: float, rate_aud_per_kwh: float) -> float:
    """Tokens earned at market price minus the electricity bill."""
    for name, value in (("reward", reward_tokens), ("price", price_aud_per_token),
                        ("tdp_w", tdp_w), ("time_s", time_s),
                        ("rate", rate_aud_per_kwh)):
        if value < 0:
            raise MetricsError(f"{name} must be >= 0")
    cost = tdp_w * time_s * KWH_PER_JOULE * rate_aud_per_kwh
    return reward_tokens * price_aud_per_token - cost


def average_node_profit(result: SimResult,
                        price_aud_per_token: float = DEFAULT_TOKEN_PRICE_AUD,
                        rate_aud_per_kwh: float = DEFAULT_ELECTRICITY_AUD_PER_KWH
                        ) -> float:
    """Mean per-node per-round profit of a run (reward value minus energy cost)."""
    if not result.outcomes:
        raise MetricsError("no outcomes to evaluate")
    total = 0.0
    count = 0
    for outcome in result.outcomes:
        for node, reward in outcome.rewards.items():
            energy_j = outcome.energy_spent_j[node]
            total += (reward * price_aud_per_token
                      - energy_j * KWH_PER_JOULE * rate_aud_per_kwh)
            count += 1
    return total / count
