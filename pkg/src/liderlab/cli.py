"""Command-line driver: ``liderlab {run,sweep,analyze,poison}``.

Experiments are described by a strict JSON config; every default is echoed
into the emitted summaries so a results directory is self-describing.

Exit codes: 0 success, 2 configuration error, 3 numeric/runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import analysis
from .backbone import forward_with_trace, load_checkpoint
from .benchmark import (
    BufferConfig,
    TaskStream,
    TrainConfig,
    experiment_config_echo,
    faa,
    load_csv_stream,
    make_synthetic_stream,
    probe_batch,
    run_experiment,
)
from .errors import ConfigurationError, NumericError
from .lider import LiderConfig
from .rehearsal import METHODS, MemoryBuffer, MethodConfig
from .spectral import layer_lipschitz_estimates

OUT_ENV = "LIDERLAB_OUT"
DEFAULT_OUT = "liderlab_out"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
LIDER_SUFFIX = "+lider"

log = logging.getLogger("liderlab")


# ------------------------------------------------------------------- config

@dataclass(frozen=True)
class StreamSpec:
    kind: str = "synthetic"
    n_tasks: int = 5
    classes_per_task: int = 2
    dim: int = 16
    train_per_class: int = 200
    test_per_class: int = 100
    cluster_spread: float = 1.0
    separation: float = 3.0
    standardized: bool = True
    # csv streams only
    path: str | None = None
    split_fraction: float = 0.8
    # None: the stream follows the run seed
    seed: int | None = None


@dataclass(frozen=True)
class AnalysisSpec:
    n_perturb: int = analysis.DEFAULT_N_PERTURB
    radius: float = analysis.DEFAULT_RADIUS
    grid_size: int = analysis.DEFAULT_GRID_SIZE
    eps: float = 1.0
    point_index: int = 0
    sigmas: tuple[float, ...] = (0.0, 0.05, 0.1, 0.2, 0.4)
    trials: int = 20


@dataclass(frozen=True)
class ExperimentConfig:
    stream: StreamSpec = StreamSpec()
    methods: tuple[str, ...] = ("er",)
    method: MethodConfig = MethodConfig()
    train: TrainConfig = TrainConfig()
    buffer: BufferConfig = BufferConfig()
    lider: LiderConfig = LiderConfig()
    analysis: AnalysisSpec = AnalysisSpec()
    seeds: tuple[int, ...] = (0,)
    out: str | None = None
    source: str = field(default="<config>", compare=False)


# JSON layout -> (dataclass field, key) for the method block, which is split
# into a few readable sub-objects in the file.
_METHOD_KEYS = {
    ("train", "lr"): "lr",
    ("train", "batch_size"): "batch_size",
    ("train", "buffer_batch_size"): "buffer_batch_size",
    ("derpp", "alpha"): "derpp_alpha",
    ("derpp", "beta"): "derpp_beta",
    ("gdumb", "fit_epochs"): "gdumb_fit_epochs",
}
_TOP_KEYS = {"stream", "methods", "train", "buffer", "derpp", "gdumb", "lider", "analysis",
             "seeds", "out"}


def _reject_unknown(block: dict, allowed: set[str], where: str) -> None:
    if not isinstance(block, dict):
        raise ConfigurationError(f"{where} must be a JSON object")
    unknown = sorted(set(block) - allowed)
    if unknown:
        names = ", ".join(f"{where}.{k}" if where else k for k in unknown)
        raise ConfigurationError(f"unknown config key(s): {names}")


def _names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _build(cls, block: dict, where: str, allowed: set[str] | None = None):
    _reject_unknown(block, allowed if allowed is not None else _names(cls), where)
    try:
        return cls(**_tuples(block))
    except TypeError as exc:
        raise ConfigurationError(f"{where}: {exc}") from None


def parse_config(doc: dict, source: str = "<config>", base_dir: Path | None = None
                 ) -> ExperimentConfig:
    """Validate a decoded JSON document; any unknown key is an error."""
    _reject_unknown(doc, _TOP_KEYS, "")
    stream = _build(StreamSpec, dict(doc.get("stream", {})), "stream")
    if stream.kind not in ("synthetic", "csv"):
        raise ConfigurationError(f"stream.kind must be 'synthetic' or 'csv', got {stream.kind!r}")
    if stream.kind == "csv":
        if not stream.path:
            raise ConfigurationError("stream.path is required for csv streams")
        path = Path(stream.path)
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        if not path.is_file():
            raise ConfigurationError(f"stream.path: file not found: {path}")
        stream = replace(stream, path=str(path))

    methods = doc.get("methods", ["er"])
    if isinstance(methods, str) or not isinstance(methods, list) or not methods:
        raise ConfigurationError("methods must be a non-empty list of method names")
    for m in methods:
        base = m[:-len(LIDER_SUFFIX)] if isinstance(m, str) and m.endswith(LIDER_SUFFIX) else m
        if base not in METHODS:
            raise ConfigurationError(f"methods: unknown method {m!r}")
        if m != base and base in ("joint", "finetune"):
            raise ConfigurationError(f"methods: {base} has no buffer to regularise ({m!r})")

    train_block = dict(doc.get("train", {}))
    method_kwargs = {}
    train_names = _names(TrainConfig)
    _reject_unknown(train_block, train_names | {k for (blk, k) in _METHOD_KEYS if blk == "train"},
                    "train")
    for blk in ("derpp", "gdumb"):
        _reject_unknown(doc.get(blk, {}), {k for (b, k) in _METHOD_KEYS if b == blk}, blk)
    for (blk, key), name in _METHOD_KEYS.items():
        src = train_block if blk == "train" else doc.get(blk, {})
        if key in src:
            method_kwargs[name] = src[key]
    train = _build(TrainConfig, {k: v for k, v in train_block.items() if k in train_names},
                   "train")
    method = _build(MethodConfig, method_kwargs, "method", allowed=set(method_kwargs))
    buffer = _build(BufferConfig, dict(doc.get("buffer", {})), "buffer")
    lider = _build(LiderConfig, dict(doc.get("lider", {})), "lider")
    spec = _build(AnalysisSpec, dict(doc.get("analysis", {})), "analysis")

    seeds = doc.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(
            isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise ConfigurationError("seeds must be a non-empty list of integers")
    out = doc.get("out")
    if out is not None and not isinstance(out, str):
        raise ConfigurationError("out must be a string path")
    return ExperimentConfig(stream, tuple(methods), method, train, buffer, lider, spec,
                            tuple(seeds), out, source)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return parse_config(doc, str(path), path.parent)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Full, defaults-included JSON form (re-parses to an equal config)."""
    m = cfg.method
    train = asdict(cfg.train)
    train.update(lr=m.lr, batch_size=m.batch_size, buffer_batch_size=m.buffer_batch_size)
    return {
        "stream": asdict(cfg.stream),
        "methods": list(cfg.methods),
        "train": train,
        "derpp": {"alpha": m.derpp_alpha, "beta": m.derpp_beta},
        "gdumb": {"fit_epochs": m.gdumb_fit_epochs},
        "buffer": asdict(cfg.buffer),
        "lider": asdict(cfg.lider),
        "analysis": asdict(cfg.analysis),
        "seeds": list(cfg.seeds),
        "out": cfg.out,
    }


def build_stream(spec: StreamSpec, run_seed: int) -> TaskStream:
    seed = run_seed if spec.seed is None else spec.seed
    if spec.kind == "csv":
        return load_csv_stream(spec.path, spec.n_tasks, spec.split_fraction, seed,
                               spec.standardized)
    return make_synthetic_stream(spec.n_tasks, spec.classes_per_task, spec.dim,
                                 spec.train_per_class, spec.test_per_class,
                                 spec.cluster_spread, seed, spec.separation, spec.standardized)


def split_cell(cell: str) -> tuple[str, bool]:
    if cell.endswith(LIDER_SUFFIX):
        return cell[:-len(LIDER_SUFFIX)], True
    return cell, False


def out_root(cli_out: str | None, cfg: ExperimentConfig | None = None) -> Path:
    return Path(cli_out or (cfg.out if cfg else None) or os.environ.get(OUT_ENV) or DEFAULT_OUT)


# -------------------------------------------------------------------- cells

@dataclass(frozen=True)
class Cell:
    """One (method, seed) run and the directory that receives its files."""

    cfg: ExperimentConfig
    name: str
    seed: int
    directory: str
    lider_override: LiderConfig | None = None
    poison_p: float | None = None


def _dump_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def run_cell(cell: Cell) -> dict:
    """Train one cell and write its matrices, summary and per-task checkpoints."""
    cfg = cell.cfg
    base, with_lider = split_cell(cell.name)
    lider = (cell.lider_override or cfg.lider) if with_lider else None
    method = replace(cfg.method, name=base)
    buffer = cfg.buffer if cell.poison_p is None else replace(cfg.buffer, poison_p=cell.poison_p)
    stream = build_stream(cfg.stream, cell.seed)
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        try:
            result = run_experiment(stream, method, lider, cfg.train, seed=cell.seed,
                                    buffer=buffer, keep_snapshots=True)
        except FloatingPointError as exc:
            raise NumericError(f"{cell.name} seed {cell.seed}: {exc}") from None

    d = Path(cell.directory)
    d.mkdir(parents=True, exist_ok=True)
    result.cil.to_csv(d / "cil.csv")
    result.til.to_csv(d / "til.csv")
    ckpt = d / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    for snap in result.snapshots:
        t = snap["task"]
        _dump_json(snap["model"], ckpt / f"model_task{t}.json")
        _dump_json(snap["buffer"], ckpt / f"buffer_task{t}.json")
    summary = result.summary()
    summary.update(method=cell.name, seed=cell.seed,
                   config=experiment_config_echo(method, lider, cfg.train, buffer),
                   stream=asdict(cfg.stream))
    _dump_json(summary, d / "summary.json")
    return summary


def _execute(cells: Sequence[Cell], jobs: int) -> list[dict]:
    if jobs <= 1 or len(cells) <= 1:
        return [run_cell(c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        # map keeps submission order, so aggregation is deterministic
        return list(pool.map(run_cell, cells))


def _cells(cfg: ExperimentConfig, root: Path, seeds: Sequence[int], **extra) -> list[Cell]:
    return [Cell(cfg, m, s, str(root / m / f"seed_{s}"), **extra)
            for m in cfg.methods for s in seeds]


def _aggregate(summaries: list[dict]) -> dict:
    by_method: dict[str, list[dict]] = {}
    for s in summaries:
        by_method.setdefault(s["method"], []).append(s)
    return {m: {"seeds": [r["seed"] for r in rs],
                "faa_cil": [r["faa_cil"] for r in rs],
                "faa_cil_mean": float(np.mean([r["faa_cil"] for r in rs]))}
            for m, rs in by_method.items()}


# ----------------------------------------------------------------- commands

def cmd_run(cfg: ExperimentConfig, root: Path, seeds=None, jobs: int = 1) -> dict:
    summaries = _execute(_cells(cfg, root, seeds or cfg.seeds), jobs)
    results = {"config": config_to_dict(cfg), "methods": _aggregate(summaries)}
    _dump_json(results, root / "results.json")
    return results


def _fmt(v: float) -> str:
    return repr(float(v))


def write_matrix_csv(path: Path, row_name: str, rows: Sequence[float], col_name: str,
                     cols: Sequence[float], values: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join([f"{row_name}\\{col_name}"] + [_fmt(c) for c in cols])]
    for r, row in zip(rows, values):
        lines.append(",".join([_fmt(r)] + [_fmt(v) for v in row]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_sweep(cfg: ExperimentConfig, root: Path, alphas: Sequence[float],
              betas: Sequence[float], seeds=None, jobs: int = 1) -> dict:
    """Every (alpha, beta) cell is a full regularised run of every configured method."""
    if not alphas or not betas:
        raise ConfigurationError("sweep grids must be non-empty")
    seeds = seeds or cfg.seeds
    bases = list(dict.fromkeys(split_cell(m)[0] for m in cfg.methods))
    for b in bases:
        if b in ("joint", "finetune"):
            raise ConfigurationError(f"sweep: {b} cannot carry the regulariser")
    cells, keys = [], []
    for a in alphas:
        for b in betas:
            lider = replace(cfg.lider, alpha=float(a), beta=float(b))
            for m in bases:
                name = m + LIDER_SUFFIX
                for s in seeds:
                    d = root / f"alpha_{_fmt(a)}_beta_{_fmt(b)}" / name / f"seed_{s}"
                    cells.append(Cell(cfg, name, s, str(d), lider_override=lider))
                    keys.append((float(a), float(b), m))
    summaries = _execute(cells, jobs)
    faas: dict[tuple, list[float]] = {}
    for k, s in zip(keys, summaries):
        faas.setdefault(k, []).append(s["faa_cil"])
    out = {}
    for m in bases:
        grid = np.array([[np.mean(faas[(float(a), float(b), m)]) for b in betas] for a in alphas])
        delta = grid - grid.mean()
        write_matrix_csv(root / f"sweep_{m}_faa.csv", "alpha", alphas, "beta", betas, grid)
        write_matrix_csv(root / f"sweep_{m}_delta.csv", "alpha", alphas, "beta", betas, delta)
        out[m] = {"faa": grid.tolist(), "delta": delta.tolist()}
    _dump_json({"alphas": [float(a) for a in alphas], "betas": [float(b) for b in betas],
                "config": config_to_dict(cfg), "methods": out}, root / "sweep.json")
    return out


def cmd_poison(cfg: ExperimentConfig, root: Path, ps: Sequence[float], seeds=None,
               jobs: int = 1) -> list[dict]:
    """One full run per poisoning rate; FAA per (method, p) as CSV."""
    if not ps:
        raise ConfigurationError("poison needs at least one p value")
    for p in ps:
        if not 0.0 <= p <= 1.0:
            raise ConfigurationError(f"poison rates must lie in [0, 1], got {p}")
    seeds = seeds or cfg.seeds
    cells = [Cell(cfg, m, s, str(root / f"p_{_fmt(p)}" / m / f"seed_{s}"), poison_p=float(p))
             for p in ps for m in cfg.methods for s in seeds]
    summaries = _execute(cells, jobs)
    rows = []
    it = iter(summaries)
    for p in ps:
        for m in cfg.methods:
            vals = [next(it)["faa_cil"] for _ in seeds]
            rows.append({"method": m, "p": float(p), "faa_mean": float(np.mean(vals)),
                         "faa_std": float(np.std(vals)), "n_seeds": len(vals)})
    root.mkdir(parents=True, exist_ok=True)
    lines = ["method,p,faa_mean,faa_std,n_seeds"]
    lines += [f"{r['method']},{_fmt(r['p'])},{_fmt(r['faa_mean'])},{_fmt(r['faa_std'])},"
              f"{r['n_seeds']}" for r in rows]
    (root / "poison.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return rows


ANALYSIS_KINDS = ("surface", "guess", "perturb", "lipschitz")


def buffer_dump_for(checkpoint: Path) -> Path:
    return checkpoint.with_name(checkpoint.name.replace("model_", "buffer_", 1))


def cmd_analyze(kind: str, checkpoint, cfg: ExperimentConfig, root: Path, seed: int | None = None
                ) -> dict:
    if kind not in ANALYSIS_KINDS:
        raise ConfigurationError(f"unknown analysis kind {kind!r}; expected one of {ANALYSIS_KINDS}")
    checkpoint = Path(checkpoint)
    if not checkpoint.is_file():
        raise ConfigurationError(f"checkpoint not found: {checkpoint}")
    try:
        model = load_checkpoint(checkpoint)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigurationError(f"{checkpoint}: unreadable checkpoint ({exc})") from None
    seed = cfg.seeds[0] if seed is None else seed
    stream = build_stream(cfg.stream, seed)
    if model.layer_dims[0] != stream.dim or model.n_classes != stream.n_classes:
        raise ConfigurationError(f"{checkpoint}: model shape {model.layer_dims} does not fit "
                                 "the configured stream")
    spec = cfg.analysis
    root.mkdir(parents=True, exist_ok=True)
    if kind == "surface":
        task = stream.tasks[0]
        if not 0 <= spec.point_index < len(task.y_test):
            raise ConfigurationError(f"analysis.point_index {spec.point_index} out of range")
        x, y = task.x_test[spec.point_index], int(task.y_test[spec.point_index])
        grid = analysis.decision_surface(model, x, y, spec.eps, spec.grid_size, seed,
                                         class_mask=task.classes)
        analysis.write_surface_csv(grid, root / "surface.csv")
        result = {"center": grid.center_value(), "grid_size": grid.grid_size}
    elif kind == "guess":
        dump = buffer_dump_for(checkpoint)
        if dump == checkpoint or not dump.is_file():
            raise ConfigurationError(f"buffer-guessing needs a buffer dump next to the "
                                     f"checkpoint: {dump} not found")
        buffer = MemoryBuffer.from_dict(json.loads(dump.read_text(encoding="utf-8")))
        probe = analysis.ProbeConfig(spec.n_perturb, spec.radius, seed)
        auc, points = analysis.buffer_guessing_auc(model, buffer, stream.tasks[0], probe)
        analysis.write_roc_csv(points, root / "roc.csv")
        result = {"auc": auc}
    elif kind == "perturb":
        x = np.concatenate([t.x_test for t in stream.tasks])
        y = np.concatenate([t.y_test for t in stream.tasks])
        means, stds = analysis.weight_perturbation_robustness(model, x, y, spec.sigmas,
                                                              spec.trials, seed)
        analysis.write_robustness_csv(spec.sigmas, means, stds, root / "robustness.csv")
        result = {"sigmas": list(spec.sigmas), "mean_acc": means.tolist()}
    else:
        probe = probe_batch(stream, len(stream) - 1, cfg.train.probe_per_task)
        _, trace = forward_with_trace(model, probe)
        lams = layer_lipschitz_estimates(trace, cfg.train.probe_power_iters, seed).values()
        lines = ["layer,lambda"] + [f"{k + 1},{_fmt(v)}" for k, v in enumerate(lams)]
        lines.append(f"product,{_fmt(np.prod(lams))}")
        (root / "lipschitz.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        result = {"lambdas": lams.tolist(), "product": float(np.prod(lams))}
    result.update(kind=kind, checkpoint=str(checkpoint), seed=seed)
    _dump_json(result, root / f"{kind}.json")
    return result


# --------------------------------------------------------------------- main

def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="liderlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seeds=True):
        sp.add_argument("--config", required=True, help="experiment JSON")
        sp.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./{DEFAULT_OUT})")
        if seeds:
            sp.add_argument("--seeds", type=_ints, help="override the config seeds, e.g. 0,1,2")
            sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    common(sub.add_parser("run", help="train every (method, seed) cell"))
    sw = sub.add_parser("sweep", help="alpha x beta grid of regularised runs")
    common(sw)
    sw.add_argument("--alphas", type=_floats, required=True)
    sw.add_argument("--betas", type=_floats, required=True)
    po = sub.add_parser("poison", help="one run per buffer poisoning rate")
    common(po)
    po.add_argument("--p", dest="ps", type=_floats, default=[0.0, 0.1, 0.25])
    an = sub.add_parser("analyze", help="diagnostics on a saved checkpoint")
    common(an, seeds=False)
    an.add_argument("kind", help="|".join(ANALYSIS_KINDS))
    an.add_argument("--checkpoint", required=True)
    an.add_argument("--seed", type=int, help="stream/probe seed (default: first config seed)")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        root = out_root(args.out, cfg)
        if args.command == "run":
            cmd_run(cfg, root, args.seeds, args.jobs)
        elif args.command == "sweep":
            cmd_sweep(cfg, root, args.alphas, args.betas, args.seeds, args.jobs)
        elif args.command == "poison":
            cmd_poison(cfg, root, args.ps, args.seeds, args.jobs)
        else:
            cmd_analyze(args.kind, args.checkpoint, cfg, root, args.seed)
    except ConfigurationError as exc:
        print(f"liderlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, ArithmeticError, RuntimeError, MemoryError) as exc:
        print(f"liderlab: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
