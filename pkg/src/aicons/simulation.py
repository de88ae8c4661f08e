"""Multi-round consensus simulation.

Drives the AI-driven seven-step round (collect, train, broadcast, merge,
rank, block, propagate) plus simplified PoW/PoS/PoD/PoFL baselines behind
one engine dispatch. Logical node concurrency is simulated on a single
deterministic loop; per-round elapsed time is simulated, not wall-clock,
so throughput results are machine independent.

The baselines are calibration models, not faithful reimplementations: each
exposes a couple of timing constants whose defaults produce the expected
qualitative throughput and profit orderings.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import shapley as sh
from .domain import (ENERGY_EPSILON_J, GENESIS_SAMPLE, LabeledRecord,
                     LedgerBlock, MonitoringSample, block_digest, digest,
                     label_group)
from .recommender import (AccuracyEvaluator, ModelConfig, ModelParams, fedavg,
                          init_params, rank_nodes, reference_embedding,
                          train_local)
from .shapley import CoalitionInputs, ShapleyReport, compute_report
from .trace import default_profiles

ENGINES = ("aicons", "pow", "pos", "pod", "pofl")

# Stream ids for stable seed splitting; adding a stream never perturbs others.
_STREAM_PROFILES = 0
_STREAM_SAMPLING = 1
_STREAM_ENGINE = 2
_STREAM_TRAINING = 3
_STREAM_SHAPLEY = 4
_STREAM_STAKES = 5
_STREAM_DEVOTION = 6
_STREAM_EPOCHS = 7
_STREAM_INIT = 8
_STREAM_COLLECT = 9


class SimulationError(ValueError):
    """Invalid simulation configuration or state."""


@dataclass(frozen=True)
class NetworkModel:
    """Latency/bandwidth message timing: transfer = size/bandwidth + latency.

    Uplinks below bandwidth_floor_kbps ride the overlay's relay path at the
    floor rate, which keeps broadcast times bounded.
    """

    latency_s: float = 0.05
    tx_bytes: int = 250
    block_header_bytes: int = 1024
    bandwidth_floor_kbps: float = 1000.0

    def transfer_time_s(self, size_bytes: float, bandwidth_kbps: float) -> float:
        kbps = max(bandwidth_kbps, self.bandwidth_floor_kbps)
        return size_bytes * 8.0 / (kbps * 1000.0) + self.latency_s


@dataclass(frozen=True)
class SimConfig:
    """Everything one simulation run depends on."""

    engine: str = "aicons"
    n_nodes: int = 10
    rounds: int = 50
    seed: int = 42
    budget: float = 1.0
    tx_per_block: int = 100
    bootstrap_rounds: int = 5
    history_window: int = 20
    test_window: int = 15
    reference_window: int = 10
    epochs_range: tuple[int, int] = (4, 12)
    collect_fraction_range: tuple[float, float] = (0.3, 1.0)
    bootstrap_epochs: int = 25
    clamp_rewards: bool = True
    exact_cap: int = sh.DEFAULT_EXACT_CAP
    permutations: int = sh.DEFAULT_PERMUTATIONS
    planted_winner: int | None = None
    stakes: tuple[float, ...] | None = None
    stake_sigma: float = 1.5
    pow_mean_solve_s: float = 600.0
    pos_select_s_per_node: float = 0.06
    pod_select_s_per_node: float = 0.09
    pod_validators: int = 4
    pofl_group_size: int = 4
    pofl_train_s: float = 30.0
    train_s_per_record_epoch: float = 2e-6
    infer_s_per_node: float = 1e-4
    bootstrap_eval_s: float = 0.01
    idle_active_s: float = 0.01
    network: NetworkModel = NetworkModel()
    model: ModelConfig = ModelConfig()

    def __post_init__(self):
        if self.engine not in ENGINES:
            raise SimulationError(f"unknown engine '{self.engine}'")
        if self.n_nodes < 2:
            raise SimulationError("need at least 2 nodes")
        if self.rounds < 0:
            raise SimulationError("rounds must be >= 0")
        if self.budget <= 0:
            raise SimulationError("budget must be > 0")
        if self.tx_per_block < 1:
            raise SimulationError("tx_per_block must be >= 1")
        if self.bootstrap_rounds < 1:
            raise SimulationError("bootstrap_rounds must be >= 1")
        if min(self.history_window, self.test_window, self.reference_window) < 1:
            raise SimulationError("history windows must be >= 1")
        lo, hi = self.epochs_range
        if not (1 <= lo <= hi):
            raise SimulationError("epochs_range must be 1 <= lo <= hi")
        flo, fhi = self.collect_fraction_range
        if not (0.0 < flo <= fhi <= 1.0):
            raise SimulationError("collect_fraction_range must be in (0, 1]")
        if self.bootstrap_epochs < 1:
            raise SimulationError("bootstrap_epochs must be >= 1")
        if self.pod_validators < 1 or self.pofl_group_size < 2:
            raise SimulationError("bad validator/group size")
        if self.stakes is not None and (len(self.stakes) != self.n_nodes
                                        or sum(self.stakes) <= 0
                                        or min(self.stakes) < 0):
            raise SimulationError("stakes must be n_nodes non-negatives, sum > 0")
        if self.planted_winner is not None and not (
                0 <= self.planted_winner < self.n_nodes):
            raise SimulationError("planted_winner out of range")


@dataclass(frozen=True)
class RoundOutcome:
    """Per-round record: who won, who got paid, how long it took."""

    round_index: int
    engine: str
    winner_id: int
    rewards: dict[int, float]
    simulated_elapsed_s: float
    tx_committed: int
    energy_spent_j: dict[int, float]


@dataclass
class SimResult:
    """A finished run: outcomes, the chain, and per-round evidence."""

    config: SimConfig
    node_ids: tuple[int, ...]
    outcomes: list[RoundOutcome]
    chain: list[LedgerBlock]
    contributions: list[np.ndarray]
    reports: list[ShapleyReport]
    samples: list[list[MonitoringSample]]
    local_accuracy: list[dict[int, float]]


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _derived_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1)[0])


class Simulation:
    """One deterministic run of a consensus engine."""

    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self.nodes = list(range(cfg.n_nodes))
        self.profiles = default_profiles(
            cfg.n_nodes, _stream(cfg.seed, _STREAM_PROFILES), cfg.planted_winner)
        self.sample_rng = _stream(cfg.seed, _STREAM_SAMPLING)
        self.engine_rng = _stream(cfg.seed, _STREAM_ENGINE)
        stake_rng = _stream(cfg.seed, _STREAM_STAKES)
        self.stakes = (np.asarray(cfg.stakes, dtype=np.float64)
                       if cfg.stakes is not None
                       else stake_rng.lognormal(0.0, cfg.stake_sigma, cfg.n_nodes))
        devotion_rng = _stream(cfg.seed, _STREAM_DEVOTION)
        self.devotion = devotion_rng.lognormal(0.0, 1.0, cfg.n_nodes)
        epoch_rng = _stream(cfg.seed, _STREAM_EPOCHS)
        lo, hi = cfg.epochs_range
        self.node_epochs = [int(e) for e in
                            epoch_rng.integers(lo, hi + 1, cfg.n_nodes)]
        collect_rng = _stream(cfg.seed, _STREAM_COLLECT)
        flo, fhi = cfg.collect_fraction_range
        self.collect_fraction = [float(f) for f in
                                 collect_rng.uniform(flo, fhi, cfg.n_nodes)]
        self.history: list[list[LabeledRecord]] = []
        self.global_model: ModelParams | None = None
        self.clock_s = 0.0
        genesis = LedgerBlock(height=0, parent_digest=0, tx_count=1,
                              winner_id=-1, winner_sample=GENESIS_SAMPLE,
                              model_blob_digest=digest(b""), timestamp_s=0.0)
        self.chain = [genesis]
        self.outcomes: list[RoundOutcome] = []
        self.contributions: list[np.ndarray] = []
        self.reports: list[ShapleyReport] = []
        self.samples: list[list[MonitoringSample]] = []
        self.local_accuracy: list[dict[int, float]] = []

    # -- shared helpers ----------------------------------------------------

    def _draw_samples(self) -> list[MonitoringSample]:
        return [p.draw(self.sample_rng) for p in self.profiles]

    def _monitored_energy(self, samples) -> dict[int, float]:
        return {s.node_id: max(sh.energy_of_node(s.cpu_tdp_w, s.cpu_time_s),
                               ENERGY_EPSILON_J) for s in samples}

    def _contribution_report(self, round_index: int,
                             samples: list[MonitoringSample],
                             models: dict[int, ModelParams] | None) -> ShapleyReport:
        """Three-dimensional contributions from this round's monitoring data.

        Engines without trained models contribute on the energy and
        bandwidth dimensions only (accuracy is unavailable for them).
        """
        include = (models is not None, True, True)
        test_rounds = reference = None
        if models is not None:
            test_rounds = self.history[-self.cfg.test_window:]
            reference = self._reference_samples()
        inputs = CoalitionInputs(
            energy_j=self._monitored_energy(samples),
            bandwidth_kbps={s.node_id: s.bandwidth_kbps for s in samples},
            models=models, test_rounds=test_rounds,
            reference_samples=reference)
        return compute_report(
            inputs, include=include, exact_cap=self.cfg.exact_cap,
            permutations=self.cfg.permutations,
            seed=_derived_seed(self.cfg.seed, _STREAM_SHAPLEY, round_index))

    def _reference_samples(self) -> list[MonitoringSample]:
        winners = [next(r.sample for r in rnd if r.is_winner)
                   for rnd in self.history[-self.cfg.reference_window:]]
        if not winners:
            raise SimulationError("no labeled history for a reference yet")
        return winners

    def _shapley_rewards(self, report: ShapleyReport) -> dict[int, float]:
        rewards = {}
        for node, s in zip(report.node_ids, report.final):
            value = self.cfg.budget * float(s)
            rewards[node] = max(0.0, value) if self.cfg.clamp_rewards else value
        return rewards

    def _block_size_bytes(self, model_blob: bytes | None) -> int:
        net = self.cfg.network
        size = net.block_header_bytes + self.cfg.tx_per_block * net.tx_bytes
        if model_blob is not None:
            size += len(model_blob)
        return size

    def _append_block(self, winner: MonitoringSample,
                      model_blob: bytes | None, elapsed_s: float) -> None:
        parent = self.chain[-1]
        block = LedgerBlock(
            height=parent.height + 1,
            parent_digest=block_digest(parent),
            tx_count=self.cfg.tx_per_block,
            winner_id=winner.node_id,
            winner_sample=winner,
            model_blob_digest=digest(model_blob if model_blob is not None else b""),
            timestamp_s=self.clock_s + elapsed_s)
        self.chain.append(block)

    def _record_round(self, round_index, samples, winner_sample, rewards,
                      elapsed_s, energy_j, report, model_blob, local_acc):
        self._append_block(winner_sample, model_blob, elapsed_s)
        self.clock_s += elapsed_s
        self.outcomes.append(RoundOutcome(
            round_index=round_index, engine=self.cfg.engine,
            winner_id=winner_sample.node_id, rewards=rewards,
            simulated_elapsed_s=elapsed_s, tx_committed=self.cfg.tx_per_block,
            energy_spent_j=energy_j))
        self.samples.append(samples)
        self.reports.append(report)
        self.contributions.append(report.final.copy())
        self.local_accuracy.append(local_acc)

    def _label_history(self, samples: list[MonitoringSample],
                       winner_id: int) -> None:
        self.history.append(
            [LabeledRecord(s, s.node_id == winner_id) for s in samples])

    def _rule_winner(self, samples: list[MonitoringSample]) -> MonitoringSample:
        return samples[label_group(samples)]

    def _collected_rounds(self, node: int, round_index: int,
                          window: list[list[LabeledRecord]]) -> list[LabeledRecord]:
        """The history rounds this node managed to collect for training.

        Each node gathers its own copy of the shared history; its static
        collection fraction decides how many rounds it actually holds, which
        is what differentiates local model quality between nodes.
        """
        keep = max(1, round(self.collect_fraction[node] * len(window)))
        if keep >= len(window):
            picked = range(len(window))
        else:
            rng = _stream(self.cfg.seed, _STREAM_COLLECT, round_index, node)
            picked = sorted(rng.choice(len(window), size=keep, replace=False))
        return [r for k in picked for r in window[k]]

    def _train_all(self, round_index: int,
                   epochs_override: int | None = None
                   ) -> tuple[dict[int, ModelParams], dict[int, float]]:
        window = self.history[-self.cfg.history_window:]
        models: dict[int, ModelParams] = {}
        train_times: dict[int, float] = {}
        for node in self.nodes:
            data = self._collected_rounds(node, round_index, window)
            node_cfg = replace(
                self.cfg.model,
                epochs=epochs_override or self.node_epochs[node],
                seed=_derived_seed(self.cfg.seed, _STREAM_TRAINING,
                                   round_index, node))
            if self.global_model is not None:
                start = self.global_model
            else:
                start = init_params(node_cfg, _stream(self.cfg.seed,
                                                      _STREAM_INIT, node))
            models[node] = train_local(data, start, node_cfg)
            train_times[node] = (self.cfg.train_s_per_record_epoch
                                 * node_cfg.epochs * len(data))
        return models, train_times

    def _test_evaluator(self) -> AccuracyEvaluator:
        return AccuracyEvaluator(self.history[-self.cfg.test_window:],
                                 self._reference_samples())

    # -- engine rounds -----------------------------------------------------

    def _bootstrap_round(self, round_index, samples) -> None:
        """Pre-model rounds: the labeling rule picks winners so labeled
        history accumulates; contributions use the modelless dimensions.

        Once one labeled round exists the nodes already train and merge in
        the background so the first model that gets used starts from a
        shared, partially converged global rather than raw random inits.
        """
        if self.history:
            models, _ = self._train_all(round_index,
                                        epochs_override=self.cfg.bootstrap_epochs)
            self.global_model = fedavg([models[n] for n in self.nodes])
        winner = self._rule_winner(samples)
        report = self._contribution_report(round_index, samples, None)
        if self.cfg.engine == "pofl":
            rewards = self._group_rewards(self._group_of(winner.node_id))
        else:
            rewards = self._shapley_rewards(report)
        elapsed = self.cfg.bootstrap_eval_s + self._propagation_s(winner, None)
        energy = {s.node_id: s.cpu_tdp_w * self.cfg.idle_active_s
                  for s in samples}
        self._label_history(samples, winner.node_id)
        self._record_round(round_index, samples, winner, rewards, elapsed,
                           energy, report, None, {})

    def _propagation_s(self, winner: MonitoringSample,
                       model_blob: bytes | None) -> float:
        return self.cfg.network.transfer_time_s(
            self._block_size_bytes(model_blob), winner.bandwidth_kbps)

    def run_round_aicons(self, round_index, samples) -> None:
        cfg = self.cfg
        models, train_times = self._train_all(round_index)
        blob_probe = models[self.nodes[0]].to_bytes()
        broadcast = {s.node_id: cfg.network.transfer_time_s(
            len(blob_probe), s.bandwidth_kbps) for s in samples}
        self.global_model = fedavg([models[n] for n in self.nodes])
        reference = reference_embedding(self.global_model,
                                        self._reference_samples())
        ranking = rank_nodes(self.global_model, samples, reference)
        winner_id = ranking[0][0]
        winner = next(s for s in samples if s.node_id == winner_id)
        model_blob = self.global_model.to_bytes()
        elapsed = (max(train_times[n] + broadcast[n] for n in self.nodes)
                   + cfg.infer_s_per_node * cfg.n_nodes
                   + self._propagation_s(winner, model_blob))
        evaluator = self._test_evaluator()
        local_acc = {node: evaluator.evaluate(m) for node, m in models.items()}
        # Until the merged model shows any test signal, splitting a third of
        # the budget on a zero accuracy column would just burn it; the
        # accuracy dimension joins the split once the model is ready.
        ready = evaluator.evaluate(self.global_model) > 0.0
        report = self._contribution_report(round_index, samples,
                                           models if ready else None)
        rewards = self._shapley_rewards(report)
        energy = {s.node_id: s.cpu_tdp_w * (train_times[s.node_id]
                                            + cfg.infer_s_per_node)
                  for s in samples}
        self._label_history(samples, winner_id)
        self._record_round(round_index, samples, winner, rewards, elapsed,
                           energy, report, model_blob, local_acc)

    def run_round_pow(self, round_index, samples) -> None:
        cfg = self.cfg
        weights = np.array([s.cpu_tdp_w * max(s.cpu_usage, 1e-6)
                            for s in samples])
        winner_idx = int(self.engine_rng.choice(len(samples),
                                                p=weights / weights.sum()))
        winner = samples[winner_idx]
        solve = float(self.engine_rng.exponential(cfg.pow_mean_solve_s))
        elapsed = solve + self._propagation_s(winner, None)
        rewards = {s.node_id: 0.0 for s in samples}
        rewards[winner.node_id] = cfg.budget
        energy = {s.node_id: s.cpu_tdp_w * solve for s in samples}
        report = self._contribution_report(round_index, samples, None)
        self._record_round(round_index, samples, winner, rewards, elapsed,
                           energy, report, None, {})

    def run_round_pos(self, round_index, samples) -> None:
        cfg = self.cfg
        winner_idx = int(self.engine_rng.choice(
            len(samples), p=self.stakes / self.stakes.sum()))
        winner = samples[winner_idx]
        elapsed = (cfg.pos_select_s_per_node * cfg.n_nodes
                   + self._propagation_s(winner, None))
        rewards = {s.node_id: 0.0 for s in samples}
        rewards[winner.node_id] = cfg.budget
        energy = {s.node_id: s.cpu_tdp_w * cfg.idle_active_s for s in samples}
        report = self._contribution_report(round_index, samples, None)
        self._record_round(round_index, samples, winner, rewards, elapsed,
                           energy, report, None, {})

    def run_round_pod(self, round_index, samples) -> None:
        cfg = self.cfg
        count = min(cfg.pod_validators, cfg.n_nodes)
        order = sorted(self.nodes, key=lambda n: (-self.devotion[n], n))
        validators = order[:count]
        winner = next(s for s in samples if s.node_id == validators[0])
        elapsed = (cfg.pod_select_s_per_node * cfg.n_nodes
                   + self._propagation_s(winner, None))
        rewards = {s.node_id: 0.0 for s in samples}
        for v in validators:
            rewards[v] = cfg.budget / count
        energy = {s.node_id: s.cpu_tdp_w * cfg.idle_active_s for s in samples}
        report = self._contribution_report(round_index, samples, None)
        self._record_round(round_index, samples, winner, rewards, elapsed,
                           energy, report, None, {})

    def _groups(self) -> list[list[int]]:
        k = self.cfg.pofl_group_size
        groups = [self.nodes[i:i + k] for i in range(0, len(self.nodes), k)]
        if len(groups) > 1 and len(groups[-1]) == 1:
            groups[-2] += groups.pop()
        return groups

    def _group_of(self, node_id: int) -> list[int]:
        return next(g for g in self._groups() if node_id in g)

    def _group_rewards(self, group: list[int]) -> dict[int, float]:
        rewards = {n: 0.0 for n in self.nodes}
        for n in group:
            rewards[n] = self.cfg.budget / len(group)
        return rewards

    def run_round_pofl(self, round_index, samples) -> None:
        cfg = self.cfg
        models, _ = self._train_all(round_index)
        evaluator = self._test_evaluator()
        groups = self._groups()
        accs = [evaluator.evaluate(fedavg([models[n] for n in g]))
                for g in groups]
        best = max(range(len(groups)), key=lambda g: (accs[g], -g))
        winning = groups[best]
        winner = next(s for s in samples if s.node_id == min(winning))
        elapsed = cfg.pofl_train_s + self._propagation_s(winner, None)
        rewards = self._group_rewards(winning)
        energy = {s.node_id: s.cpu_tdp_w * cfg.pofl_train_s for s in samples}
        local_acc = {node: evaluator.evaluate(m) for node, m in models.items()}
        ready = evaluator.evaluate(fedavg(list(models.values()))) > 0.0
        report = self._contribution_report(round_index, samples,
                                           models if ready else None)
        self._label_history(samples, winner.node_id)
        self._record_round(round_index, samples, winner, rewards, elapsed,
                           energy, report, None, local_acc)

    # -- driver ------------------------------------------------------------

    def run_round(self, round_index: int) -> RoundOutcome:
        samples = self._draw_samples()
        engine = self.cfg.engine
        if engine in ("aicons", "pofl") and round_index < self.cfg.bootstrap_rounds:
            self._bootstrap_round(round_index, samples)
        elif engine == "aicons":
            self.run_round_aicons(round_index, samples)
        elif engine == "pow":
            self.run_round_pow(round_index, samples)
        elif engine == "pos":
            self.run_round_pos(round_index, samples)
        elif engine == "pod":
            self.run_round_pod(round_index, samples)
        else:
            self.run_round_pofl(round_index, samples)
        return self.outcomes[-1]

    def run(self) -> SimResult:
        for round_index in range(self.cfg.rounds):
            self.run_round(round_index)
        return SimResult(config=self.cfg, node_ids=tuple(self.nodes),
                         outcomes=self.outcomes, chain=self.chain,
                         contributions=self.contributions,
                         reports=self.reports, samples=self.samples,
                         local_accuracy=self.local_accuracy)


def run_simulation(cfg: SimConfig) -> SimResult:
    """Run one deterministic simulation; the chain re-validates by design."""
    return Simulation(cfg).run()


def sim_config_to_dict(cfg: SimConfig) -> dict:
    """JSON-friendly view of a SimConfig (manifest payload)."""
    from dataclasses import asdict

    return asdict(cfg)


def sim_config_from_dict(d: dict) -> SimConfig:
    """Rebuild a SimConfig from its manifest payload."""
    d = dict(d)
    model = dict(d.pop("model"))
    model["hidden_dims"] = tuple(model["hidden_dims"])
    network = dict(d.pop("network"))
    d["epochs_range"] = tuple(d["epochs_range"])
    d["collect_fraction_range"] = tuple(d["collect_fraction_range"])
    if d.get("stakes") is not None:
        d["stakes"] = tuple(d["stakes"])
    return SimConfig(model=ModelConfig(**model),
                     network=NetworkModel(**network), **d)


def throughput(outcomes: list[RoundOutcome]) -> float:
    """Committed transactions per simulated second across the outcomes."""
    if not outcomes:
        raise SimulationError("throughput of an empty outcome list")
    total_tx = sum(o.tx_committed for o in outcomes)
    total_s = sum(o.simulated_elapsed_s for o in outcomes)
    return total_tx / total_s


def outcomes_csv(result: SimResult) -> str:
    """CSV export: round,engine,winner_id,elapsed_s,tx,reward_<id>..."""
    header = ["round", "engine", "winner_id", "elapsed_s", "tx"]
    header += [f"reward_{n}" for n in result.node_ids]
    lines = [",".join(header)]
    for o in result.outcomes:
        row = [str(o.round_index), o.engine, str(o.winner_id),
               repr(o.simulated_elapsed_s), str(o.tx_committed)]
        row += [repr(o.rewards.get(n, 0.0)) for n in result.node_ids]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def contributions_csv(result: SimResult) -> str:
    """CSV export of per-round final contribution vectors."""
    header = ["round"] + [f"contribution_{n}" for n in result.node_ids]
    lines = [",".join(header)]
    for o, contrib in zip(result.outcomes, result.contributions):
        lines.append(",".join([str(o.round_index)]
                              + [repr(float(c)) for c in contrib]))
    return "\n".join(lines) + "\n"
