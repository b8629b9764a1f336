"""Command-line entry point.

    vanetauth run --scenario S.toml --out DIR [--seed N] [--variant tree|flat|both] [--format table|structured]
    vanetauth keytree --branching 4,4,4 --k 6 --population 500 --trials 10000
    vanetauth replay DIR/trace.jsonl

Exit codes: 0 success, 2 configuration / input error, 3 invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import sys
import tempfile
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

from . import keytree
from .crypto import ModelledProvider
from .errors import BadParams, ConfigError, CorruptTrace, InvariantViolation, KeyTreeError
from .simnet import MetricsReport, load_scenario, metrics_from_records, read_trace, run

log = logging.getLogger("vanetauth")

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 2, 3


@dataclass(frozen=True)
class RunConfig:
    scenario: Path
    out: Path
    seed: int | None = None
    variant: str | None = None
    format: str = "table"


def _atomic_write(directory: Path, files: dict[str, bytes]) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    staged = []
    try:
        for name, blob in files.items():
            fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=directory)
            with os.fdopen(fd, "wb") as fh:
                fh.write(blob)
            os.chmod(tmp, 0o644)
            staged.append((tmp, directory / name))
    except BaseException:
        for tmp, _ in staged:
            os.unlink(tmp)
        raise
    for tmp, final in staged:
        os.replace(tmp, final)


def _print_report(report: MetricsReport, fmt: str) -> None:
    print(report.to_json() if fmt == "structured" else report.render_table())


def cmd_run(cfg: RunConfig) -> int:
    try:
        scenario = load_scenario(cfg.scenario)
        changes: dict[str, Any] = {}
        if cfg.seed is not None:
            changes["seed"] = cfg.seed
        if cfg.variant is not None:
            changes["variant"] = cfg.variant
        if changes:
            scenario = scenario.with_(**changes)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    try:
        trace, report = run(scenario)
    except InvariantViolation as exc:
        log.error("invariant violated: %s", exc)
        return EXIT_INVARIANT
    try:
        _atomic_write(cfg.out, {
            "trace.jsonl": trace.to_bytes(),
            "metrics.json": (report.to_json() + "\n").encode(),
            "metrics.txt": (report.render_table() + "\n").encode(),
        })
    except OSError as exc:
        log.error("cannot write output: %s", exc)
        return EXIT_CONFIG
    _print_report(report, cfg.format)
    return EXIT_OK


def keytree_report(
    branching: Sequence[int], k: int, population: int, trials: int, seed: int, mc_pairs: int = 100_000
) -> dict[str, Any]:
    """Tree vs flat search cost, anonymity sets and birthday-paradox analytics."""
    tree = keytree.build_tree(branching, seed)
    n = tree.total_keys
    if not 1 <= k <= n:
        raise BadParams(f"need 1 <= k <= n={n}, got k={k}")
    if population < 1 or trials < 0:
        raise BadParams("population must be >= 1 and trials >= 0")
    rng = random.Random(seed)
    rings = [keytree.assign_keyring(tree, f"veh-{i:05d}", k, rng) for i in range(population)]
    index = keytree.AnonymityIndex(tree, rings)
    provider = ModelledProvider(seed)
    rsu = provider.gen_keypair()
    tree_counts: Counter[int] = Counter()
    flat_counts: Counter[int] = Counter()
    anonymity: Counter[int] = Counter()
    for t in range(trials):
        ring = rings[rng.randrange(population)]
        path = keytree.choose_path(ring, rng)
        now = float(t)
        req = keytree.make_request(path, rsu.public_handle, provider.gen_symmetric_key("sess"), now, provider)
        tree_counts[keytree.identify_path(tree, req, now).trial_count] += 1
        flat_counts[keytree.identify_flat(tree, req, now).trial_count] += 1
        anonymity[index.count(path)] += 1

    def summary(c: Counter[int]) -> dict[str, Any]:
        total = sum(c.values())
        return {
            "count": total,
            "mean": sum(v * m for v, m in c.items()) / total if total else 0.0,
            "max": max(c) if c else 0,
            "distribution": {str(v): c[v] for v in sorted(c)},
        }

    exact = keytree.collision_probability_exact(n, k)
    mc, se = keytree.collision_probability_mc(n, k, mc_pairs, seed) if mc_pairs else (float("nan"), float("nan"))
    return {
        "branching": list(tree.branching),
        "n": n,
        "k": k,
        "c": tree.levels,
        "population": population,
        "tree_bound": tree.max_tree_trials,
        "tree": summary(tree_counts),
        "flat": summary(flat_counts),
        "anonymity_histogram": {str(v): anonymity[v] for v in sorted(anonymity)},
        "collision_probability": {"exact": float(exact), "exact_fraction": str(exact), "monte_carlo": mc,
                                  "mc_stderr": se, "mc_pairs": mc_pairs},
    }


def _render_keytree(rep: dict[str, Any]) -> str:
    cp = rep["collision_probability"]
    lines = [
        f"pool n={rep['n']}  branching={rep['branching']}  k={rep['k']}  c={rep['c']}  population={rep['population']}",
        "",
        "search   trials      mean   max",
    ]
    for name in ("tree", "flat"):
        s = rep[name]
        lines.append(f"{name:<7}{s['count']:>8}{s['mean']:>10.2f}{s['max']:>6}")
    lines.append(f"tree bound (sum of branching) = {rep['tree_bound']}")
    lines.append("")
    lines.append("anonymity set size : requests")
    lines += [f"  {size:>5} : {count}" for size, count in rep["anonymity_histogram"].items()]
    lines.append("")
    lines.append(f"flat collision probability  exact {cp['exact']:.6f}  monte-carlo {cp['monte_carlo']:.6f}"
                 f" (+/- {cp['mc_stderr']:.6f}, {cp['mc_pairs']} pairs)")
    return "\n".join(lines)


def cmd_keytree(branching: Sequence[int], k: int, population: int, trials: int, seed: int,
                fmt: str = "table", mc_pairs: int = 100_000) -> int:
    try:
        rep = keytree_report(branching, k, population, trials, seed, mc_pairs)
    except KeyTreeError as exc:
        log.error("bad parameters: %s", exc)
        return EXIT_CONFIG
    print(json.dumps(rep, indent=2) if fmt == "structured" else _render_keytree(rep))
    return EXIT_OK


def cmd_replay(trace_path: Path, metrics_path: Path | None = None, fmt: str = "table") -> int:
    """Recompute metrics from a trace and compare with the stored ones, if any."""
    try:
        records = read_trace(trace_path)
    except CorruptTrace as exc:
        log.error("corrupt trace: %s", exc)
        return EXIT_CONFIG
    report = metrics_from_records(records)
    _print_report(report, fmt)
    if metrics_path is None:
        candidate = Path(trace_path).with_name("metrics.json")
        metrics_path = candidate if candidate.exists() and records else None
    if metrics_path is not None:
        stored = MetricsReport.from_dict(json.loads(Path(metrics_path).read_text()))
        if stored != report:
            log.error("replayed metrics differ from %s", metrics_path)
            return EXIT_INVARIANT
    return EXIT_OK


def _branching(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"branching must be comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vanetauth", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario, write trace and metrics")
    r.add_argument("--scenario", type=Path, required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", type=Path, default=Path("out"))
    r.add_argument("--variant", choices=["tree", "flat", "both"])
    r.add_argument("--format", choices=["table", "structured"], default="table")

    k = sub.add_parser("keytree", help="key-tree search cost and anonymity analytics")
    k.add_argument("--branching", type=_branching, default=[4, 4, 4])
    k.add_argument("--k", type=int, default=6)
    k.add_argument("--population", type=int, default=500)
    k.add_argument("--trials", type=int, default=10_000)
    k.add_argument("--pairs", type=int, default=100_000, help="Monte-Carlo key-ring pairs")
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--format", choices=["table", "structured"], default="table")

    rp = sub.add_parser("replay", help="recompute metrics from a trace")
    rp.add_argument("trace", type=Path)
    rp.add_argument("--metrics", type=Path, help="metrics.json to compare against")
    rp.add_argument("--format", choices=["table", "structured"], default="table")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "run":
        return cmd_run(RunConfig(args.scenario, args.out, args.seed, args.variant, args.format))
    if args.command == "keytree":
        return cmd_keytree(args.branching, args.k, args.population, args.trials, args.seed, args.format, args.pairs)
    return cmd_replay(args.trace, args.metrics, args.format)


if __name__ == "__main__":
    sys.exit(main())
