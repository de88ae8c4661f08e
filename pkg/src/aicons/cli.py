"""Command-line surface tying trace generation, training, simulation and
reporting together.

Exit codes: 0 on success, 1 on a domain error (bad data, broken chain), 2
on usage errors. Every run writes a manifest.json recording the fully
resolved configuration, so any run can be reproduced from its manifest
alone. The output directory comes from --out-dir or AICONS_OUT_DIR.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .domain import DomainError, block_from_json, block_to_json, verify_chain
from .metrics import (DEFAULT_ELECTRICITY_AUD_PER_KWH, DEFAULT_TOKEN_PRICE_AUD,
                      AblationMask, MetricsError, average_node_profit,
                      fit_trend, ratio_spread, reward_contribution_ratio,
                      reward_points, run_ablation)
from .recommender import (ModelConfig, RecommenderError, accuracy, fedavg,
                          init_params, train_local)
from .shapley import ShapleyError
from .simulation import (ENGINES, SimConfig, SimulationError, contributions_csv,
                         outcomes_csv, run_simulation, sim_config_from_dict,
                         sim_config_to_dict, throughput)
from .trace import TraceSpec, generate_trace, load_trace, save_trace, trace_rounds

PACKAGE_VERSION = "0.1.0"

ABLATION_MASKS = (
    ("full", AblationMask(True, True, True)),
    ("accuracy+energy", AblationMask(True, True, False)),
    ("accuracy+bandwidth", AblationMask(True, False, True)),
    ("energy+bandwidth", AblationMask(False, True, True)),
    ("accuracy", AblationMask(True, False, False)),
    ("energy", AblationMask(False, True, False)),
    ("bandwidth", AblationMask(False, False, True)),
)


def _out_dir(args) -> Path:
    out = args.out_dir or os.environ.get("AICONS_OUT_DIR") or "out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def _write_manifest(out: Path, command: str, params: dict) -> None:
    manifest = {"command": command, "version": PACKAGE_VERSION,
                "params": params}
    _write(out / "manifest.json",
           json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _sim_config_from_args(args) -> SimConfig:
    return SimConfig(engine=args.engine, n_nodes=args.nodes,
                     rounds=args.rounds, seed=args.seed, budget=args.budget,
                     permutations=args.permutations,
                     planted_winner=args.planted_winner)


def _fairness_csv(rows_by_engine: dict[str, list]) -> str:
    lines = ["engine,node_id,reward,contribution,ratio,degenerate"]
    for engine, rows in rows_by_engine.items():
        for row in rows:
            lines.append(f"{engine},{row.node_id},{row.reward!r},"
                         f"{row.contribution!r},{row.ratio!r},"
                         f"{int(row.degenerate)}")
    return "\n".join(lines) + "\n"


def _ablation_csv(rows_by_mask: dict[str, list]) -> str:
    lines = ["mask,node_id,reward,contribution,ratio"]
    for label, rows in rows_by_mask.items():
        for row in rows:
            lines.append(f"{label},{row.node_id},{row.reward!r},"
                         f"{row.contribution!r},{row.ratio!r}")
    return "\n".join(lines) + "\n"


def _trend_csv(xs, ys, fit) -> str:
    order = np.argsort(np.asarray(xs))
    fitted = fit.predict(np.asarray(xs)[order])
    lines = ["x,y,fitted"]
    for i, k in enumerate(order):
        lines.append(f"{xs[k]!r},{ys[k]!r},{float(fitted[i])!r}")
    return "\n".join(lines) + "\n"


def cmd_gen_trace(args) -> int:
    out = _out_dir(args)
    spec = TraceSpec(records=args.records, nodes=args.nodes,
                     group_size=args.group_size, seed=args.seed,
                     planted_winner=args.planted_winner)
    records = generate_trace(spec)
    save_trace(records, out / "trace.csv")
    _write_manifest(out, "gen-trace", {
        "records": spec.records, "nodes": spec.nodes,
        "group_size": spec.effective_group_size, "seed": spec.seed,
        "planted_winner": spec.planted_winner})
    winners = sum(1 for r in records if r.is_winner)
    print(f"wrote {len(records)} records ({winners} winners) to "
          f"{out / 'trace.csv'}")
    return 0


def cmd_train(args) -> int:
    out = _out_dir(args)
    records = load_trace(args.trace, group_size=args.group_size)
    if not records:
        raise DomainError("trace is empty, nothing to train on")
    rounds = trace_rounds(records, args.group_size or args.nodes)
    split = max(1, int(len(rounds) * (1.0 - args.test_fraction)))
    train_rounds, test_rounds = rounds[:split], rounds[split:]
    if not test_rounds:
        raise DomainError("test split is empty; lower --test-fraction")
    data = [r for rnd in train_rounds for r in rnd]
    cfg = ModelConfig(epochs=args.epochs, learning_rate=args.learning_rate,
                      seed=args.seed)
    locals_ = []
    local_acc = []
    reference = [next(r.sample for r in rnd if r.is_winner)
                 for rnd in train_rounds[-args.reference_window:]]
    for agent in range(args.agents):
        agent_cfg = ModelConfig(epochs=args.epochs,
                                learning_rate=args.learning_rate,
                                seed=args.seed + 1000 * (agent + 1))
        model = train_local(data, init_params(agent_cfg), agent_cfg)
        locals_.append(model)
        local_acc.append(accuracy(model, test_rounds, reference))
    global_model = fedavg(locals_)
    global_acc = accuracy(global_model, test_rounds, reference)
    (out / "model.bin").write_bytes(global_model.to_bytes())
    metrics = {
        "agents": args.agents,
        "train_rounds": len(train_rounds),
        "test_rounds": len(test_rounds),
        "local_accuracy": local_acc,
        "global_accuracy": global_acc,
        "uniform_baseline": 1.0 / max(len(r) for r in test_rounds),
    }
    _write(out / "train_metrics.json",
           json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    _write_manifest(out, "train", {
        "trace": str(args.trace), "agents": args.agents,
        "epochs": args.epochs, "learning_rate": args.learning_rate,
        "test_fraction": args.test_fraction, "seed": args.seed,
        "group_size": args.group_size,
        "reference_window": args.reference_window})
    print(f"global accuracy {global_acc:.3f} over {len(test_rounds)} test "
          f"rounds (locals: {', '.join(f'{a:.3f}' for a in local_acc)})")
    return 0


def run_simulate(cfg: SimConfig, out: Path) -> None:
    """Run one simulation and write every export the run produces."""
    result = run_simulation(cfg)
    _write(out / "outcomes.csv", outcomes_csv(result))
    _write(out / "contributions.csv", contributions_csv(result))
    _write(out / "chain.jsonl",
           "".join(block_to_json(b) + "\n" for b in result.chain))
    if result.outcomes:
        rows = reward_contribution_ratio(result.outcomes, result.contributions,
                                         result.node_ids)
        _write(out / "fairness.csv", _fairness_csv({cfg.engine: rows}))
    _write_manifest(out, "simulate", sim_config_to_dict(cfg))


def cmd_simulate(args) -> int:
    out = _out_dir(args)
    if args.from_manifest:
        manifest = json.loads(Path(args.from_manifest).read_text())
        cfg = sim_config_from_dict(manifest["params"])
    else:
        cfg = _sim_config_from_args(args)
    run_simulate(cfg, out)
    print(f"simulated {cfg.rounds} {cfg.engine} rounds "
          f"({cfg.n_nodes} nodes, seed {cfg.seed}) into {out}")
    return 0


def cmd_ablate(args) -> int:
    out = _out_dir(args)
    cfg = SimConfig(engine="aicons", n_nodes=args.nodes, rounds=args.rounds,
                    seed=args.seed, budget=args.budget,
                    permutations=args.permutations)
    result = run_simulation(cfg)
    rows_by_mask = {}
    spreads = {}
    for label, mask in ABLATION_MASKS:
        rows = run_ablation(result, mask)
        rows_by_mask[label] = rows
        spreads[label] = ratio_spread(rows)
    _write(out / "ablation.csv", _ablation_csv(rows_by_mask))
    _write(out / "ablation_spread.json",
           json.dumps(spreads, indent=2, sort_keys=True) + "\n")
    _write_manifest(out, "ablate", sim_config_to_dict(cfg))
    for label, spread in spreads.items():
        print(f"{label:20s} ratio std-dev {spread:.6f}")
    return 0


def cmd_report(args) -> int:
    out = _out_dir(args)
    sizes = [int(s) for s in args.sizes.split(",")]
    base_n = args.nodes
    summary: dict = {"seed": args.seed, "sizes": sizes, "assertions": {}}
    checks = summary["assertions"]

    # fairness at the base size (figure: per-node ratio by engine)
    base_results = {}
    rows_by_engine = {}
    for engine in ENGINES:
        cfg = SimConfig(engine=engine, n_nodes=base_n, rounds=args.rounds,
                        seed=args.seed, permutations=args.permutations)
        result = run_simulation(cfg)
        base_results[engine] = result
        rows_by_engine[engine] = reward_contribution_ratio(
            result.outcomes, result.contributions, result.node_ids)
    _write(out / "fairness.csv", _fairness_csv(rows_by_engine))
    aicons_ratios = [r.ratio for r in rows_by_engine["aicons"]]
    checks["aicons_ratio_max_deviation"] = float(
        max(abs(r - 1.0) for r in aicons_ratios))
    for engine, expected in (("pow", 1), ("pos", 1), ("pod", 4)):
        counts = {len([v for v in o.rewards.values() if v > 0])
                  for o in base_results[engine].outcomes}
        checks[f"{engine}_rewarded_per_round"] = sorted(counts)

    # ablation (figure: ratio fluctuation by mask)
    rows_by_mask = {label: run_ablation(base_results["aicons"], mask)
                    for label, mask in ABLATION_MASKS}
    _write(out / "ablation.csv", _ablation_csv(rows_by_mask))
    spreads = {label: ratio_spread(rows) for label, rows in rows_by_mask.items()}
    summary["ablation_spread"] = spreads
    checks["ablation_ordering"] = bool(
        spreads["full"] <= min(spreads["accuracy+energy"],
                               spreads["accuracy+bandwidth"])
        and max(spreads["accuracy+energy"],
                spreads["accuracy+bandwidth"]) <= spreads["accuracy"])

    # reward trends (figures: reward vs accuracy / energy / bandwidth)
    trend_signs = {}
    for driver, filename in (("accuracy", "trend_accuracy.csv"),
                             ("energy", "trend_energy.csv"),
                             ("bandwidth", "trend_bandwidth.csv")):
        xs, ys = reward_points(base_results["aicons"], driver)
        fit = fit_trend(xs, ys, degree=3)
        _write(out / filename, _trend_csv(xs, ys, fit))
        trend_signs[driver] = fit.mean_derivative()
    summary["trend_mean_derivative"] = trend_signs
    checks["trend_signs"] = bool(trend_signs["accuracy"] > 0
                                 and trend_signs["energy"] < 0
                                 and trend_signs["bandwidth"] > 0)

    # throughput and profit across sizes (figures: tps and profit vs n)
    tps: dict[str, dict[int, float]] = {e: {} for e in ENGINES}
    prof: dict[str, dict[int, float]] = {e: {} for e in ENGINES}
    for n in sizes:
        for engine in ENGINES:
            if n == base_n and engine in base_results:
                result = base_results[engine]
            else:
                cfg = SimConfig(engine=engine, n_nodes=n,
                                rounds=args.size_rounds, seed=args.seed,
                                permutations=args.permutations)
                result = run_simulation(cfg)
            tps[engine][n] = throughput(result.outcomes)
            prof[engine][n] = average_node_profit(
                result, price_aud_per_token=args.token_price,
                rate_aud_per_kwh=args.electricity_rate)
    _write(out / "throughput.csv", "engine,n_nodes,tps\n" + "".join(
        f"{e},{n},{tps[e][n]!r}\n" for e in ENGINES for n in sizes))
    _write(out / "profit.csv", "engine,n_nodes,avg_profit_aud\n" + "".join(
        f"{e},{n},{prof[e][n]!r}\n" for e in ENGINES for n in sizes))
    checks["throughput_ordering"] = {
        str(n): bool(tps["aicons"][n] > tps["pos"][n] > tps["pod"][n]
                     > tps["pofl"][n] > tps["pow"][n]) for n in sizes}
    if len(sizes) > 1:
        lo, hi = min(sizes), max(sizes)
        checks["aicons_tps_relative_drop"] = float(
            1.0 - tps["aicons"][hi] / tps["aicons"][lo])
    checks["profit_decreasing"] = {
        e: bool(all(prof[e][a] > prof[e][b]
                    for a, b in zip(sizes, sizes[1:]))) for e in ENGINES}
    checks["aicons_profit_beats_pow_pofl"] = {
        str(n): bool(prof["aicons"][n] > prof["pow"][n]
                     and prof["aicons"][n] > prof["pofl"][n]) for n in sizes}

    _write(out / "summary.json",
           json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_manifest(out, "report", {
        "seed": args.seed, "nodes": base_n, "rounds": args.rounds,
        "size_rounds": args.size_rounds, "sizes": sizes,
        "permutations": args.permutations, "token_price": args.token_price,
        "electricity_rate": args.electricity_rate})
    print(json.dumps(checks, indent=2, sort_keys=True))
    return 0


def cmd_verify_chain(args) -> int:
    path = Path(args.chain)
    try:
        blocks = [block_from_json(line)
                  for line in path.read_text().splitlines() if line.strip()]
    except (ValueError, KeyError) as exc:
        raise DomainError(f"{path}: unparseable chain ({exc})") from exc
    verify_chain(blocks)
    print(f"chain ok: {len(blocks)} blocks, tip height {blocks[-1].height}")
    return 0


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--nodes", type=int, default=10)
    parser.add_argument("--rounds", type=int, default=50)
    parser.add_argument("--out-dir", default=None,
                        help="output directory (or AICONS_OUT_DIR)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aicons",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-trace", help="generate a synthetic labeled trace")
    _add_common(p)
    p.add_argument("--records", type=int, default=10000)
    p.add_argument("--group-size", type=int, default=None)
    p.add_argument("--planted-winner", type=int, default=None)
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("train", help="train the recommender on a trace")
    _add_common(p)
    p.add_argument("--trace", required=True)
    p.add_argument("--group-size", type=int, default=None)
    p.add_argument("--agents", type=int, default=5)
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--learning-rate", type=float, default=0.05)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--reference-window", type=int, default=10)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="run one consensus simulation")
    _add_common(p)
    p.add_argument("--engine", choices=ENGINES, default="aicons")
    p.add_argument("--budget", type=float, default=1.0)
    p.add_argument("--permutations", type=int, default=2000)
    p.add_argument("--planted-winner", type=int, default=None)
    p.add_argument("--from-manifest", default=None,
                   help="reproduce a run from its manifest.json")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ablate", help="ablation study over Shapley dimensions")
    _add_common(p)
    p.add_argument("--budget", type=float, default=1.0)
    p.add_argument("--permutations", type=int, default=2000)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="full evaluation suite with summary")
    _add_common(p)
    p.add_argument("--sizes", default="10,20,40")
    p.add_argument("--size-rounds", type=int, default=12,
                   help="rounds for the non-base network sizes")
    p.add_argument("--permutations", type=int, default=800)
    p.add_argument("--token-price", type=float,
                   default=DEFAULT_TOKEN_PRICE_AUD)
    p.add_argument("--electricity-rate", type=float,
                   default=DEFAULT_ELECTRICITY_AUD_PER_KWH)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("verify-chain", help="re-validate an exported chain")
    _add_common(p)
    p.add_argument("--chain", required=True)
    p.set_defaults(func=cmd_verify_chain)

    return parser


def cli_dispatch(argv: list[str] | None = None) -> int:
    """Parse and run; returns the process exit code instead of exiting."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except (DomainError, RecommenderError, ShapleyError, SimulationError,
            MetricsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
