"""Command line for drone damage-assessment routing.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error,
3 finished with a warning (an exact solve hit its node budget).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import Solution, emit_lp, gap, solve_exact_dfs, solve_exact_norevisit, solve_greedy
from .env import evaluate_route_set, load_route_set, routes_geojson, save_route_set
from .instgen import GenSpec, generate_instance, load_instance, make_instance, read_manifest, save_instance
from .netcore import NetworkError, save_road_network
from .search import BACKEND

log = logging.getLogger("droneassess")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_WARN = 0, 1, 2, 3
SOLVERS = ("exact", "exact-norevisit", "greedy", "policy")


class UsageError(Exception):
    """Bad arguments or configuration (exit code 2)."""


def build_id() -> str:
    return f"droneassess-{__version__}+search-{BACKEND}"


def write_manifest(out: Path, command: str, config, seed, inputs, outputs, started: float) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "build": build_id(),
        "wall_clock": time.time() - started,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def _read_json(path, what: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} {p} is not valid JSON: {exc}") from None


def expand_inputs(paths) -> list[Path]:
    """Instance files, ``manifest.json`` files from ``gen`` or plain-text path lists."""
    out: list[Path] = []
    for raw in paths:
        p = Path(raw)
        if not p.is_file():
            raise UsageError(f"input not found: {p}")
        if p.name == "manifest.json":
            data = json.loads(p.read_text())
            out.extend(Path(q) for q in data["outputs"] if str(q).endswith(".json") and Path(q).name != "manifest.json")
        elif p.suffix == ".txt":
            out.extend(read_manifest(p))
        else:
            out.append(p)
    return out


# -- gen ---------------------------------------------------------------------------

def gen_from_config(data: dict):
    known = {"genspec", "nodes", "K", "p_max", "Q"}
    unknown = set(data) - known
    if unknown:
        raise UsageError(f"unknown generation keys: {sorted(unknown)}")
    try:
        gen = dict(data.get("genspec", {}))
        spec = GenSpec.for_node_count(int(data["nodes"]), **gen) if "nodes" in data else GenSpec.from_dict(gen)
        K, p_max, Q = int(data.get("K", 2)), float(data.get("p_max", 2.0)), float(data.get("Q", 10.0))
        if K < 1 or not 0 < p_max <= Q:
            raise UsageError("parameters must satisfy K >= 1 and 0 < p_max <= Q")
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid generation spec: {exc}") from None
    return spec, K, p_max, Q


def cmd_gen(args) -> int:
    started = time.time()
    config = _read_json(args.spec, "generation spec")
    spec, K, p_max, Q = gen_from_config(config)
    if args.count < 1:
        raise UsageError("count must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for k in range(args.count):
        inst = generate_instance(spec, K, p_max, Q, seed=args.seed + k)
        path = out / f"instance_{k:04d}.json"
        save_instance(path, inst)
        files.append(path)
    write_manifest(out, "gen", config, args.seed, [args.spec], files, started)
    print(f"wrote {len(files)} instances to {out}")
    return EXIT_OK


# -- solve -------------------------------------------------------------------------

def _solve_one(solver: str, inst, node_budget: int) -> Solution:
    if solver == "exact":
        return solve_exact_dfs(inst, node_budget)
    if solver == "exact-norevisit":
        return solve_exact_norevisit(inst, node_budget)
    return solve_greedy(inst)


def summarize(results: dict[str, list[Solution]]) -> dict:
    names = list(results)
    summary = {"solvers": {}, "gaps": {}}
    for name in names:
        sols = results[name]
        summary["solvers"][name] = {
            "mean_value": float(np.mean([s.value for s in sols])),
            "mean_seconds": float(np.mean([s.seconds for s in sols])),
            "optimal": sum(bool(s.optimal) for s in sols),
            "count": len(sols),
        }
    for ref in names:
        for other in names:
            if ref == other:
                continue
            gaps = [gap(a.value, b.value) for a, b in zip(results[ref], results[other]) if a.value > 0]
            summary["gaps"][f"{ref}|{other}"] = float(np.mean(gaps)) if gaps else None
    return summary


def format_table(summary: dict) -> str:
    rows = [f"{'solver':<18}{'mean value':>14}{'mean time [s]':>16}{'optimal':>10}"]
    for name, s in summary["solvers"].items():
        rows.append(f"{name:<18}{s['mean_value']:>14.6f}{s['mean_seconds']:>16.4f}{s['optimal']:>7}/{s['count']}")
    if summary["gaps"]:
        rows.append("")
        rows.append("mean gap (reference | other) = (y_ref - y_other) / y_ref")
        for key, g in summary["gaps"].items():
            ref, other = key.split("|")
            rows.append(f"  {ref} | {other}: " + ("n/a" if g is None else f"{g:.6f}"))
    return "\n".join(rows)


def cmd_solve(args) -> int:
    started = time.time()
    solvers = []
    for s in args.solver:
        solvers.extend(x for x in s.split(",") if x)
    for s in solvers:
        if s not in SOLVERS:
            raise UsageError(f"unknown solver {s!r}; choose from {', '.join(SOLVERS)}")
    if "policy" in solvers and not args.checkpoint:
        raise UsageError("the policy solver needs --checkpoint")
    if args.augment and "policy" not in solvers:
        raise UsageError("--augment applies to the policy solver only")
    paths = expand_inputs(args.instances)
    if not paths:
        raise UsageError("no instances given")
    try:
        instances = [load_instance(p) for p in paths]
    except (KeyError, ValueError) as exc:
        raise UsageError(f"cannot read instance: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    results: dict[str, list[Solution]] = {}
    for solver in solvers:
        if solver == "policy":
            from .policy import load_checkpoint
            from .train import evaluate
            policy = load_checkpoint(args.checkpoint)
            sols, _ = evaluate(policy, instances, augment=args.augment)
        else:
            with ThreadPoolExecutor(max_workers=args.threads) as pool:
                sols = list(pool.map(lambda inst: _solve_one(solver, inst, args.node_budget), instances))
        results[solver] = sols

    written = []
    warn = False
    for solver, sols in results.items():
        for path, inst, sol in zip(paths, instances, sols):
            report = evaluate_route_set(inst, sol.routes)
            if not report.feasible:
                raise RuntimeError(f"{solver} returned an infeasible solution for {path}: {report.violations}")
            if solver.startswith("exact") and not sol.optimal:
                warn = True
                print(f"warning: {solver} on {path} stopped at its node budget; value is best found",
                      file=sys.stderr)
            target = out / f"{path.stem}.{solver}.json"
            save_route_set(target, sol.routes, report, solver=sol.solver, seconds=sol.seconds,
                           optimal=sol.optimal, instance=str(path))
            written.append(target)
    summary = summarize(results)
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    written.append(out / "summary.json")
    print(json.dumps(summary) if args.json else format_table(summary))
    config = {"solvers": solvers, "augment": args.augment, "checkpoint": args.checkpoint,
              "node_budget": args.node_budget}
    write_manifest(out, "solve", config, args.seed, paths, written, started)
    return EXIT_WARN if warn else EXIT_OK


# -- train -------------------------------------------------------------------------

def cmd_train(args) -> int:
    started = time.time()
    from .train import TrainConfig, train_loop
    data = _read_json(args.config, "training config")
    try:
        cfg = TrainConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from None
    if args.resume and not Path(args.resume).is_file():
        raise UsageError(f"resume checkpoint not found: {args.resume}")
    out = Path(args.out)

    def progress(rec):
        log.info("epoch %d step %d raw_mean %.4f", rec["epoch"], rec["step"], rec["raw_mean"])

    result = train_loop(cfg, out, resume=args.resume, progress=progress)
    outputs = sorted(str(p) for p in out.glob("epoch*.ckpt")) + [str(out / "metrics.ndjson")]
    last = result["eval"][-1] if result["eval"] else None
    print(json.dumps({"epochs": cfg.epochs, "last_eval": last}) if args.json
          else f"trained {cfg.epochs} epochs; checkpoints in {out}")
    write_manifest(out, "train", cfg.to_dict(), cfg.seed, [args.config] + ([args.resume] if args.resume else []),
                   outputs, started)
    return EXIT_OK


# -- export ------------------------------------------------------------------------

def cmd_export(args) -> int:
    started = time.time()
    path = Path(args.instance)
    if not path.is_file():
        raise UsageError(f"instance not found: {path}")
    inst = load_instance(path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.what == "lp":
        target = Path(args.output or out / f"{path.stem}.lp")
        target.write_text(emit_lp(inst))
        inputs = [path]
    elif args.what == "geojson":
        if not args.routes:
            raise UsageError("geojson export needs --routes")
        routes = load_route_set(args.routes)["routes"]
        report = evaluate_route_set(inst, routes)
        if not report.feasible:
            raise RuntimeError(f"route set is infeasible for this instance: {report.violations}")
        target = Path(args.output or out / f"{path.stem}.geojson")
        target.write_text(json.dumps(routes_geojson(inst, routes), indent=1) + "\n")
        inputs = [path, args.routes]
    else:
        if not args.checkpoint:
            raise UsageError("embeddings export needs --checkpoint")
        from .policy import dump_embeddings, load_checkpoint
        policy = load_checkpoint(args.checkpoint)
        if not 0 <= args.layer <= policy.cfg.layers:
            raise UsageError(f"layer must be in 0..{policy.cfg.layers}")
        target = Path(args.output or out / f"{path.stem}.layer{args.layer}.tsv")
        dump_embeddings(policy, inst, args.layer, target)
        inputs = [path, args.checkpoint]
    print(f"wrote {target}")
    write_manifest(out, f"export-{args.what}", {"what": args.what, "layer": args.layer}, args.seed,
                   inputs, [target], started)
    return EXIT_OK


# -- import ------------------------------------------------------------------------

def cmd_import(args) -> int:
    started = time.time()
    from .tntp import ImportMapping, TNTPError, import_tntp
    for p in (args.nodes, args.links):
        if not Path(p).is_file():
            raise UsageError(f"input not found: {p}")
    try:
        mapping = ImportMapping.from_dict(_read_json(args.mapping, "mapping config")) if args.mapping \
            else ImportMapping()
    except TypeError as exc:
        raise UsageError(f"invalid mapping config: {exc}") from None
    try:
        result = import_tntp(args.nodes, args.links, mapping)
        result.road.validate()
    except TNTPError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    target = out / "network.json"
    save_road_network(target, result.road, result.depot)
    outputs = [target]
    if args.K is not None:
        inst = make_instance(result.road, result.depot, args.K, args.p_max, args.Q, args.seed,
                             {"import": result.summary()})
        save_instance(out / "instance.json", inst)
        outputs.append(out / "instance.json")
    summary = result.summary()
    print(json.dumps(summary) if args.json
          else f"imported {summary['nodes']} nodes, {summary['links']} links (depot id {summary['depot_id']})")
    write_manifest(out, "import", {"mapping": summary["metadata"]["mapping"]}, args.seed,
                   [args.nodes, args.links] + ([args.mapping] if args.mapping else []), outputs, started)
    return EXIT_OK


# -- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="droneassess", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0, help="base random seed")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for per-instance work")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--json", action="store_true", help="print machine-readable summaries")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic instances")
    p.add_argument("--spec", required=True, help="JSON generation spec")
    p.add_argument("--count", type=int, default=10)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("solve", help="solve instances and summarize")
    p.add_argument("instances", nargs="+", help="instance files or a gen manifest.json")
    p.add_argument("--solver", action="append", required=True,
                   help=f"one of {', '.join(SOLVERS)}; repeat or comma-separate to compare")
    p.add_argument("--checkpoint", help="policy checkpoint")
    p.add_argument("--augment", action="store_true", help="8-fold augmentation for the policy solver")
    p.add_argument("--node-budget", type=int, default=10_000_000, help="exact search expansion budget")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("train", help="train the policy")
    p.add_argument("--config", required=True, help="JSON training config")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("export", help="export an artifact for an instance")
    p.add_argument("what", choices=("lp", "geojson", "embeddings"))
    p.add_argument("instance")
    p.add_argument("--routes", help="route-set file (geojson)")
    p.add_argument("--checkpoint", help="policy checkpoint (embeddings)")
    p.add_argument("--layer", type=int, default=0, help="encoder layer (embeddings)")
    p.add_argument("--output", help="explicit output file")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("import", help="import a TNTP road network")
    p.add_argument("--nodes", required=True)
    p.add_argument("--links", required=True)
    p.add_argument("--mapping", help="JSON import mapping")
    p.add_argument("--K", type=int, help="also write an instance with this many drones")
    p.add_argument("--p-max", dest="p_max", type=float, default=2.0)
    p.add_argument("--Q", type=float, default=10.0)
    p.set_defaults(func=cmd_import)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    if args.command in ("solve", "train", "export"):
        import torch
        torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NetworkError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
