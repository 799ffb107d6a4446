"""Command-line entry points.

Each subcommand reads an optional YAML config whose keys mirror the run
options, applies command-line overrides, echoes the effective config as
``config.yaml`` in the output directory and writes plot-ready CSV/JSON.

Exit codes: 0 success, 1 configuration or input error, 2 numerical failure,
3 infeasible problem.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from .bench import bench_rom, bench_zeta
from .dynamics import BrusselatorParams, IntegratorConfig, integrate, make_brusselator, perturbed_initial_conditions, write_trajectory_csv
from .graph import GraphError, WeightedGraph, erdos_renyi, read_graph, spectral_reference
from .odenet import LinearSystemSpec, OdeNetConfig, train_sparse_odenet, write_result
from .optimizer import InfeasibleProblemError
from .pipeline import SparsifierResult, SparsifyConfig, StageError, sparsify, write_bundle, write_eigen_tables
from .spectral import PerturbationContext, zeta_approx, zeta_exact

log = logging.getLogger("rdsparsify")

OUT_ENV = "RDSPARSIFY_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_INFEASIBLE = 0, 1, 2, 3


class ConfigError(ValueError):
    """Bad config file, option value or input path."""


def available_cores() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping at the top level")
    return data


def _coerce(value, default):
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(value)
    return value


def build_dataclass(cls, mapping: dict, where: str = "config"):
    """Instantiate ``cls`` from a mapping, recursing into dataclass fields.

    Unknown keys raise ``ConfigError``.
    """
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, dict):
        raise ConfigError(f"{where} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(mapping) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    defaults = cls()
    kwargs = {}
    for name, value in mapping.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = build_dataclass(type(current), value, f"{where}.{name}")
        else:
            kwargs[name] = _coerce(value, current)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def _plain(obj):
    """YAML-safe copy with tuples and numpy values turned into lists and scalars."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def echo_config(run: dict, directory: Path) -> Path:
    path = directory / "config.yaml"
    path.write_text(yaml.safe_dump(_plain(run), sort_keys=True))
    return path


def _split_run_keys(data: dict, run_keys) -> tuple[dict, dict]:
    data = dict(data)
    return {k: data.pop(k) for k in run_keys if k in data}, data


def _out_dir(args, run: dict, command: str) -> Path:
    out = args.out or run.get("out")
    if out is None:
        out = Path(os.environ.get(OUT_ENV, "rdsparsify-out")) / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return out


def _load_graph(path) -> WeightedGraph:
    if path is None:
        raise ConfigError("no graph given (use --graph or the 'graph' config key)")
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"graph file not found: {path}")
    try:
        return read_graph(path)
    except (GraphError, ValueError) as exc:
        raise ConfigError(f"cannot read graph {path}: {exc}") from exc


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for r in rows:
            wr.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in r])


def emit_plot_data(result: SparsifierResult, directory) -> list[Path]:
    """Eigenvalue relative changes, eigenvector scatters and the objective history.

    Output is bit-stable for identical inputs (17 significant digits).
    """
    if result is None or not isinstance(result, SparsifierResult):
        raise ValueError("emit_plot_data needs a completed sparsification result")
    out = write_eigen_tables(result, directory)
    _write_rows(
        out / "objective.csv",
        ["iter", "J", "max_violation"],
        [(h["iter"], float(h["J"]), float(h["max_violation"])) for h in result.J_history],
    )
    return [out / "eigenvalues.csv", out / "eigenvectors.csv", out / "objective.csv"]


# ---- subcommands -----------------------------------------------------------

SPARSIFY_RUN_KEYS = ("graph", "out", "threads")


def sparsify_config(args, data: dict) -> tuple[dict, SparsifyConfig]:
    run, rest = _split_run_keys(data, SPARSIFY_RUN_KEYS)
    cfg = build_dataclass(SparsifyConfig, rest)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.np is not None:
        over["n_p"] = args.np
    if args.alpha is not None:
        over["alpha"] = args.alpha
    if args.prune_eps is not None:
        over["prune_eps"] = args.prune_eps
    threads = args.threads or run.get("threads") or available_cores()
    over["workers"] = int(threads)
    try:
        cfg = dataclasses.replace(cfg, **over)
    except ValueError as exc:
        raise ConfigError(f"invalid option: {exc}") from exc
    run["threads"] = int(threads)
    if args.graph is not None:
        run["graph"] = str(args.graph)
    return run, cfg


def cmd_sparsify(args) -> int:
    run, cfg = sparsify_config(args, load_config(args.config))
    g = _load_graph(run.get("graph"))
    out = _out_dir(args, run, "sparsify")
    echo_config({**run, **cfg.to_dict()}, out)
    result = sparsify(g, cfg)
    write_bundle(result, out, extra={"threads": run["threads"], "graph": run.get("graph")})
    emit_plot_data(result, out)
    print(f"m = {result.m}, kept {result.m_pruned}, R = {result.R:.4f}, fiedler = {result.fiedler:.3g}; bundle in {out}")
    return EXIT_OK


@dataclasses.dataclass(frozen=True)
class SimulateConfig:
    params: BrusselatorParams = dataclasses.field(default_factory=BrusselatorParams)
    integrator: IntegratorConfig = dataclasses.field(default_factory=IntegratorConfig)
    sample_every: int = 50
    amplitude: float = 0.1
    seed: int = 0


def cmd_simulate(args) -> int:
    run, rest = _split_run_keys(load_config(args.config), ("graph", "out", "threads"))
    cfg = build_dataclass(SimulateConfig, rest)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.graph is not None:
        run["graph"] = str(args.graph)
    g = _load_graph(run.get("graph"))
    out = _out_dir(args, run, "simulate")
    echo_config({**run, **dataclasses.asdict(cfg)}, out)
    x0 = perturbed_initial_conditions(g.n, cfg.params, 1, np.random.default_rng(cfg.seed), cfg.amplitude)[0]
    traj = integrate(make_brusselator(g, None, cfg.params), x0, cfg.integrator, sample_every=cfg.sample_every)
    write_trajectory_csv(traj, out / "trajectory.csv")
    print(f"{len(traj.times)} samples of {g.n} vertices written to {out / 'trajectory.csv'}")
    return EXIT_OK


@dataclasses.dataclass(frozen=True)
class SpectrumConfig:
    n: int = 200
    p: float = 0.1
    n_p: int = 40
    trials: int = 20
    low: float = 0.6
    high: float = 1.4
    seed: int = 0


def spectrum_rows(g: WeightedGraph, cfg: SpectrumConfig):
    """One row per random multiplier draw: exact and estimated spectral error."""
    ctx = PerturbationContext.build(g, spectral_reference(g, cfg.n_p))
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for t in range(cfg.trials):
        gamma = rng.uniform(cfg.low, cfg.high, g.m)
        z = zeta_exact(ctx, gamma)
        zb = zeta_approx(ctx, gamma)
        rows.append((t, g.n, g.m, cfg.n_p, float(z), float(zb), float(abs(z - zb) / z) if z > 0 else float("nan")))
    return rows


def cmd_spectrum(args) -> int:
    run, rest = _split_run_keys(load_config(args.config), ("graph", "out", "threads"))
    cfg = build_dataclass(SpectrumConfig, rest)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.np is not None:
        over["n_p"] = args.np
    cfg = dataclasses.replace(cfg, **over)
    if args.graph is not None:
        run["graph"] = str(args.graph)
    g = _load_graph(run["graph"]) if run.get("graph") else erdos_renyi(cfg.n, cfg.p, seed=cfg.seed)
    if cfg.n_p >= g.n:
        raise ConfigError(f"n_p = {cfg.n_p} must be below the {g.n} vertices")
    out = _out_dir(args, run, "spectrum-estimate")
    echo_config({**run, **dataclasses.asdict(cfg)}, out)
    rows = spectrum_rows(g, cfg)
    _write_rows(out / "spectrum_estimate.csv", ["trial", "n", "m", "n_p", "zeta", "zeta_bar", "relative_error"], rows)
    print(f"median relative error {np.median([r[-1] for r in rows]):.4g} over {len(rows)} trials")
    return EXIT_OK


def cmd_odenet(args) -> int:
    run, rest = _split_run_keys(load_config(args.config), ("out", "threads", "system"))
    cfg = build_dataclass(OdeNetConfig, rest)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.alpha is not None:
        over["alpha"] = args.alpha
    cfg = dataclasses.replace(cfg, **over)
    system_map = run.get("system") or {}
    try:
        system = LinearSystemSpec(**{k: np.asarray(v, dtype=float) for k, v in system_map.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid system: {exc}") from exc
    out = _out_dir(args, run, "odenet")
    echo_config({**run, **cfg.to_dict()}, out)
    result = train_sparse_odenet(system, cfg)
    write_result(result, out)
    print(f"{result.stats.nonzero} of {result.stats.total} parameters nonzero; outputs in {out}")
    return EXIT_OK


@dataclasses.dataclass(frozen=True)
class BenchRomConfig:
    sizes: tuple = (100, 200, 500)
    k: int = 50
    p: float = 0.05
    repeats: int = 200
    seed: int = 0


def cmd_bench_rom(args) -> int:
    run, rest = _split_run_keys(load_config(args.config), ("out", "threads"))
    cfg = build_dataclass(BenchRomConfig, rest)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    out = _out_dir(args, run, "bench-rom")
    echo_config({**run, **dataclasses.asdict(cfg)}, out)
    rows = []
    for n in cfg.sizes:
        t = bench_rom(erdos_renyi(int(n), cfg.p, seed=cfg.seed), min(cfg.k, 2 * int(n)), repeats=cfg.repeats, seed=cfg.seed)
        rows.append((t.n, t.k, t.full_median, t.reduced_median, t.speedup))
    _write_rows(out / "bench_rom.csv", ["n", "k", "full_median_s", "reduced_median_s", "speedup"], rows)
    print(f"timings written to {out / 'bench_rom.csv'}")
    return EXIT_OK


@dataclasses.dataclass(frozen=True)
class BenchZetaConfig:
    n: int = 500
    p: float = 0.05
    n_p: int = 100
    workers: tuple = (1, 2, 4)
    repeats: int = 5
    seed: int = 0


def cmd_bench_zeta(args) -> int:
    run, rest = _split_run_keys(load_config(args.config), ("out", "threads", "graph"))
    cfg = build_dataclass(BenchZetaConfig, rest)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.np is not None:
        over["n_p"] = args.np
    if args.threads is not None:
        over["workers"] = tuple(sorted({1, int(args.threads)}))
    cfg = dataclasses.replace(cfg, **over)
    if args.graph is not None:
        run["graph"] = str(args.graph)
    g = _load_graph(run["graph"]) if run.get("graph") else erdos_renyi(cfg.n, cfg.p, seed=cfg.seed)
    out = _out_dir(args, run, "bench-zeta")
    run["cores"] = available_cores()
    echo_config({**run, **dataclasses.asdict(cfg)}, out)
    rows = [(t.workers, t.median, t.speedup) for t in bench_zeta(g, cfg.n_p, cfg.workers, cfg.repeats, cfg.seed)]
    _write_rows(out / "bench_zeta.csv", ["workers", "median_s", "speedup"], rows)
    print(f"speedups written to {out / 'bench_zeta.csv'} ({run['cores']} cores available)")
    return EXIT_OK


COMMANDS = {
    "sparsify": cmd_sparsify,
    "simulate": cmd_simulate,
    "spectrum-estimate": cmd_spectrum,
    "odenet": cmd_odenet,
    "bench-rom": cmd_bench_rom,
    "bench-zeta": cmd_bench_zeta,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rdsparsify", description="Sparsify graphs under reaction-diffusion dynamics.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log solver progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--graph", help="edge list (u v [w]) or Matrix Market file")
        p.add_argument("--config", help="YAML config; keys mirror the run options")
        p.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/<command>-<timestamp>)")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, help="worker processes (default: available cores)")
        p.add_argument("--np", type=int, help="number of preserved eigenmodes")
        p.add_argument("--alpha", type=float, help="l1 weight")
        p.add_argument("--prune-eps", type=float, help="pruning threshold on w * gamma")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error [config]: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleProblemError as exc:
        print(f"error [setup]: infeasible problem: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except StageError as exc:
        if isinstance(exc.cause, InfeasibleProblemError):
            print(f"error [{exc.stage}]: infeasible problem: {exc.cause}", file=sys.stderr)
            return EXIT_INFEASIBLE
        print(f"error [{exc.stage}]: {exc.cause}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"error [{args.command}]: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, OSError) as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
