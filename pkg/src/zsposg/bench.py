"""Benchmark harness: horizon sweeps, per-run CSV traces and a summary table.

Usage::

    python3 -m zsposg --game recycling --horizons 2,3 --alg pbvi1,cfr+ --out results
    python3 -m zsposg compare results/summary.csv golden.csv

Each (horizon, algorithm) cell writes ``<game>_<alg>_H<h>.csv`` with
header ``iter,value`` and appends one row to ``summary.csv``.  Budget
overruns are recorded as ``OOT``/``OOM`` rows, never as failures.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import cfr, pbvi
from .dpomdp import BENCHMARKS, DpomdpSyntaxError, benchmark_path, load_dpomdp

log = logging.getLogger(__name__)

ALGORITHMS = ("pbvi1", "pbvi2", "pbvi3", "cfr+", "oracle")
SUMMARY = "summary.csv"
SUMMARY_FIELDS = ("game", "horizon", "algorithm", "seconds", "value", "status")
GOLDEN_FIELDS = ("game", "horizon", "expected", "tolerance")
OOT, OOM = "OOT", "OOM"


class UsageError(ValueError):
    pass


@dataclass
class RunSpec:
    game: str
    horizons: list
    algorithms: list
    out: Path = Path("results")
    epsilon: float = 1e-3
    prune_epsilon: float = 1e-3
    time_limit: float = 7200.0
    memory_limit_mb: float = 2048.0
    seed: int = 0
    checkpoint_every: int = 0
    cfr_iterations: int = 10000

    def __post_init__(self):
        if not self.horizons or not self.algorithms:
            raise UsageError("need at least one horizon and one algorithm")
        for h in self.horizons:
            if int(h) < 1:
                raise UsageError(f"horizon must be positive, got {h}")
        bad = [a for a in self.algorithms if a not in ALGORITHMS]
        if bad:
            raise UsageError(f"unknown algorithm(s) {bad}; choose from {ALGORITHMS}")
        self.out = Path(self.out)

    @property
    def game_name(self):
        return Path(self.game).stem if self.game.endswith(".dpomdp") else self.game


@dataclass
class ResultRow:
    game: str
    horizon: int
    algorithm: str
    seconds: float
    value: float | None
    status: str
    trace: list = field(default_factory=list, repr=False)

    def as_csv(self):
        return {
            "game": self.game,
            "horizon": self.horizon,
            "algorithm": self.algorithm,
            "seconds": repr(float(self.seconds)),
            "value": "" if self.value is None else repr(float(self.value)),
            "status": self.status,
        }


def resolve_game(name: str, horizon: int):
    path = Path(name)
    if name.endswith(".dpomdp") or path.is_file():
        if not path.is_file():
            raise UsageError(f"no such game file: {name}")
        return load_dpomdp(path, horizon)
    try:
        path = benchmark_path(name)
    except (FileNotFoundError, KeyError, ValueError) as exc:
        raise UsageError(f"unknown game {name!r}; bundled: {', '.join(BENCHMARKS)}") from exc
    return load_dpomdp(path, horizon)


def _run_pbvi(game, spec, alg, horizon):
    config = pbvi.SolverConfig(
        variant=alg,
        epsilon=spec.epsilon,
        prune_epsilon=spec.prune_epsilon,
        time_budget=spec.time_limit,
        memory_budget=spec.memory_limit_mb * 2**20,
        rng_seed=spec.seed,
        checkpoint_every=spec.checkpoint_every,
        checkpoint_dir=str(spec.out / f"{spec.game_name}_{alg}_H{horizon}.ckpt") if spec.checkpoint_every else None,
    )
    res = pbvi.solve(game, config=config)
    status = {pbvi.OOT: OOT, pbvi.OOM: OOM}.get(res.status, res.status)
    return res.value, status, [(it, v) for it, v, _ in res.per_iteration_trace]


def _run_cfr(game, spec, start):
    try:
        tree = cfr.build_extensive_form(game, memory_budget=spec.memory_limit_mb * 2**20)
    except cfr.TreeTooLarge:
        return None, OOM, []
    left = spec.time_limit - (time.monotonic() - start)
    if left <= 0:
        return None, OOT, []
    res = cfr.cfr_plus_solve(tree, spec.cfr_iterations, left, target_exploitability=spec.epsilon)
    status = OOT if res.status == "oot" else res.status
    return res.value, status, [(it, v) for it, v, _ in res.trace]


def _run_oracle(game, spec, start):
    try:
        tree = cfr.build_extensive_form(game, memory_budget=spec.memory_limit_mb * 2**20)
    except cfr.TreeTooLarge:
        return None, OOM, []
    if time.monotonic() - start > spec.time_limit:
        return None, OOT, []
    value, _ = cfr.sequence_form_value(game, tree=tree)
    return value, "converged", [(1, value)]


def run_cell(spec: RunSpec, horizon: int, alg: str) -> ResultRow:
    game = resolve_game(spec.game, horizon)
    start = time.monotonic()
    if alg in pbvi.VARIANTS:
        value, status, trace = _run_pbvi(game, spec, alg, horizon)
    elif alg == "cfr+":
        value, status, trace = _run_cfr(game, spec, start)
    else:
        value, status, trace = _run_oracle(game, spec, start)
    seconds = time.monotonic() - start
    if status != OOM and seconds > spec.time_limit:
        status = OOT
    return ResultRow(spec.game_name, horizon, alg, seconds, value, status, trace)


def write_trace(path: Path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("iter", "value"))
        for it, v in trace:
            w.writerow((int(it), repr(float(v))))


def read_trace(path):
    with open(path, newline="") as fh:
        return [(int(r["iter"]), float(r["value"])) for r in csv.DictReader(fh)]


def append_summary(path: Path, rows):
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, SUMMARY_FIELDS, lineterminator="\n")
        if new:
            w.writeheader()
        for row in rows:
            w.writerow(row.as_csv())


def read_summary(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run(spec: RunSpec):
    """Execute every cell in (horizon, algorithm) order; returns the result rows."""
    try:
        spec.out.mkdir(parents=True, exist_ok=True)
        probe = spec.out / ".write-probe"
        probe.touch()
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"cannot write to {spec.out}: {exc}") from exc
    rows = []
    for h in sorted(int(x) for x in spec.horizons):
        for alg in sorted(spec.algorithms):
            row = run_cell(spec, h, alg)
            log.info("%s H%d %s: %s %s (%.2fs)", row.game, h, alg, row.value, row.status, row.seconds)
            write_trace(spec.out / f"{row.game}_{alg}_H{h}.csv", row.trace)
            append_summary(spec.out / SUMMARY, [row])
            rows.append(row)
    return rows


def compare(summary_rows, golden_rows):
    """Check summary values against golden ``(game, horizon, expected, tolerance)`` rows.

    Returns ``(ok, report_lines)``.  A golden entry applies to every
    algorithm run on that game and horizon.
    """
    report = []
    for g in golden_rows:
        key = (g["game"], int(g["horizon"]))
        expected, tol = float(g["expected"]), float(g["tolerance"])
        matches = [r for r in summary_rows if (r["game"], int(r["horizon"])) == key]
        if not matches:
            report.append(f"missing: {key[0]} H{key[1]} has no result row")
            continue
        for r in matches:
            if r["value"] in ("", None):
                report.append(f"no value: {key[0]} H{key[1]} {r['algorithm']} status {r['status']}")
                continue
            got = float(r["value"])
            if abs(got - expected) > tol:
                report.append(
                    f"deviation: {key[0]} H{key[1]} {r['algorithm']} value {got:.6g}"
                    f" expected {expected:.6g} +- {tol:g}"
                )
    return not report, report


def read_config(path):
    """``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        k, v = (x.strip() for x in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _csv_list(text, cast=str):
    return [cast(x.strip()) for x in str(text).split(",") if x.strip()]


def build_parser():
    p = argparse.ArgumentParser(prog="zsposg", description="Solve zs-POSG benchmarks and record traces.")
    p.add_argument("--game", help="bundled benchmark name or path to a .dpomdp file")
    p.add_argument("--horizons", default="2", help="comma list, e.g. 2,3,4")
    p.add_argument("--alg", default="pbvi1", help=f"comma list from {','.join(ALGORITHMS)}")
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--prune-epsilon", type=float, default=1e-3)
    p.add_argument("--time-limit", type=float, default=7200.0, help="seconds per run")
    p.add_argument("--memory-limit", type=float, default=2048.0, help="MB per run")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="results")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--cfr-iterations", type=int, default=10000)
    p.add_argument("--golden", help="golden CSV (game,horizon,expected,tolerance) checked after the runs")
    p.add_argument("--config", help="key=value file; its entries override flags")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def spec_from_args(args) -> RunSpec:
    opts = vars(args).copy()
    if args.config:
        opts.update(read_config(args.config))
    if not opts.get("game"):
        raise UsageError("--game is required")
    try:
        return RunSpec(
            game=str(opts["game"]),
            horizons=_csv_list(opts["horizons"], int),
            algorithms=_csv_list(opts["alg"]),
            out=Path(opts["out"]),
            epsilon=float(opts["epsilon"]),
            prune_epsilon=float(opts["prune_epsilon"]),
            time_limit=float(opts["time_limit"]),
            memory_limit_mb=float(opts["memory_limit"]),
            seed=int(opts["seed"]),
            checkpoint_every=int(opts["checkpoint_every"]),
            cfr_iterations=int(opts["cfr_iterations"]),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, UsageError):
            raise
        raise UsageError(f"invalid option value: {exc}") from exc


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] == "compare":
        cp = argparse.ArgumentParser(prog="zsposg compare")
        cp.add_argument("summary")
        cp.add_argument("golden")
        a = cp.parse_args(argv[1:])
        try:
            ok, report = compare(read_summary(a.summary), read_summary(a.golden))
        except (OSError, KeyError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        print("\n".join(report) if report else "all rows within tolerance")
        return 0 if ok else 1
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        spec = spec_from_args(args)
        rows = run(spec)
    except (UsageError, DpomdpSyntaxError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for r in rows:
        value = "" if r.value is None else f"{r.value:.6g}"
        print(f"{r.game}\tH{r.horizon}\t{r.algorithm}\t{r.seconds:.2f}s\t{value}\t{r.status}")
    if args.golden:
        golden = read_summary(args.golden)
        ok, report = compare([r.as_csv() for r in rows], golden)
        print("\n".join(report) if report else "golden check passed")
        return 0 if ok else 1
    return 0
