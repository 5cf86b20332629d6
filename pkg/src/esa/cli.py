"""Command-line interface: ``esa <subcommand> [options]``.

Every subcommand writes into a run directory (``--out``, or a name under
``$ESA_OUTPUT_ROOT``, default ``./runs``) together with a ``config.ini``
snapshot of the resolved settings.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
numeric failure, 3 a failed acceptance property.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import acceptance, analysis, bench, generators, graph, kernels, masking
from . import training as tr
from .model import ESA, ConfigError, ModelConfig

log = logging.getLogger("esa")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    """Bad command line or configuration; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- configuration -----------------------------------------------------------------

SECTIONS = {"model": ModelConfig, "train": tr.TrainConfig}


def _convert(kind: str, text: str, where: str):
    try:
        if kind == "tuple":
            return tuple(float(v) for v in text.strip("() ").split(",") if v.strip())
        if kind == "int | None":
            return None if text.lower() in ("", "none") else int(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise UsageError(f"{where}: cannot read {text!r} as {kind}") from None
    return text


def load_config(path: str | None, overrides: list[str]) -> configparser.ConfigParser:
    """INI file (optional) with ``section.key=value`` overrides applied on top."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    if path:
        if not Path(path).is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise UsageError(f"{path}: {exc}") from None
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise UsageError(f"override must look like section.key=value, got {item!r}")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, name, value.strip())
    return cp


def section_object(cp, section: str, **defaults):
    """Build the dataclass for `section` from config values over `defaults`."""
    cls = SECTIONS[section]
    kinds = {f.name: f.type for f in dataclasses.fields(cls)}
    values = dict(defaults)
    if cp.has_section(section):
        for key, text in cp.items(section):
            if key not in kinds:
                raise UsageError(f"[{section}] {key}: unknown option")
            values[key] = _convert(kinds[key], text, f"[{section}] {key}")
    try:
        obj = cls(**values)
        if isinstance(obj, ModelConfig):
            obj.validate()
    except (ConfigError, ValueError) as exc:
        raise UsageError(f"[{section}] {exc}") from None
    return obj


def snapshot(run_dir: Path, args, **objects) -> None:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["run"] = {k: str(v) for k, v in sorted(vars(args).items())
                 if k not in ("func", "set") and v is not None}
    for name, obj in objects.items():
        cp[name] = {k: str(v) for k, v in dataclasses.asdict(obj).items()}
    with open(run_dir / "config.ini", "w") as fh:
        cp.write(fh)


def run_dir(args) -> Path:
    if args.out:
        path = Path(args.out)
    else:
        root = Path(os.environ.get("ESA_OUTPUT_ROOT", "runs"))
        path = root / f"{args.command}-seed{args.seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path


# -- datasets ----------------------------------------------------------------------


def _ints(text: str) -> np.ndarray:
    return np.array([int(v) for v in text.split()], dtype=np.int64)


def write_dataset(path: Path, graphs, *, task: str, level: str, num_classes=None, split, seed) -> None:
    graph.write_graphs(path / "graphs.graph", graphs)
    cp = configparser.ConfigParser(interpolation=None)
    cp["dataset"] = {"graphs": "graphs.graph", "task": task, "level": level, "seed": str(seed)}
    if num_classes is not None:
        cp["dataset"]["num_classes"] = str(num_classes)
    cp["split"] = {k: " ".join(map(str, v)) for k, v in split.items()}
    with open(path / "manifest.ini", "w") as fh:
        cp.write(fh)


def read_dataset(path: str) -> tr.Dataset:
    base = Path(path)
    manifest = base / "manifest.ini"
    if not manifest.is_file():
        raise UsageError(f"no dataset manifest at {manifest}")
    cp = configparser.ConfigParser(interpolation=None)
    cp.read(manifest)
    ds = cp["dataset"]
    graphs = graph.read_graphs(base / ds["graphs"])
    if graphs and graphs[0].d_n == 0:
        cap = int(ds.get("max_degree", "16"))
        graphs = [graph.degree_one_hot(g, cap) for g in graphs]
    split = {k: _ints(v) for k, v in cp["split"].items()}
    nc = ds.get("num_classes")
    return tr.Dataset(graphs, ds["task"], level=ds["level"],
                      num_classes=int(nc) if nc else None, split=split)


# -- subcommands -------------------------------------------------------------------


def cmd_generate(args) -> int:
    out = run_dir(args)
    if args.kind == "infected-er":
        g = generators.generate_infected_er(args.nodes, args.infected, args.max_path_len,
                                            args.edge_prob, args.seed)
        split = tr.random_split(g.num_nodes, args.seed)
        write_dataset(out, [g], task="multiclass", level="token",
                      num_classes=args.max_path_len + 2, split=split, seed=args.seed)
        log.info("infected-ER: %d nodes, %d directed edges", g.num_nodes, g.num_edges)
    else:
        counts = [int(v) for v in args.edges.split(",")]
        graphs = [generators.ba_for_edges(e, args.attach_m, args.seed + i)
                  for i, e in enumerate(counts)]
        # triangles per node give the sweep a structural regression target
        graphs = [g.with_target([generators.triangle_density(g)]) for g in graphs]
        every = np.arange(len(graphs))
        write_dataset(out, graphs, task="regression", level="graph",
                      split={"train": every, "val": every, "test": every}, seed=args.seed)
        log.info("BA sweep: %s directed edges", ", ".join(str(g.num_edges) for g in graphs))
    snapshot(out, args)
    print(out)
    return EXIT_OK


def _model_for(cp, ds: tr.Dataset) -> ModelConfig:
    g = ds.graphs[0]
    tokens = cp.get("model", "tokens", fallback="node" if ds.level == "token" else "edge")
    d_in = g.d_n if tokens == "node" else 2 * g.d_n + g.d_e
    defaults = dict(d_in=d_in, d_out=ds.output_dim(), tokens=tokens, level=ds.level)
    if ds.level == "token":
        defaults["layer_string"] = "MSMS"
    return section_object(cp, "model", **defaults)


def cmd_train(args) -> int:
    cp = load_config(args.config, args.set)
    ds = read_dataset(args.data)
    mcfg = _model_for(cp, ds)
    tcfg = section_object(cp, "train", seed=args.seed)
    out = run_dir(args)
    snapshot(out, args, model=mcfg, train=tcfg)
    model = ESA(mcfg, seed=args.seed)
    report = tr.train(model, ds, tcfg)
    model.save(out / "model.ckpt")
    (out / "metrics.csv").write_text(report.to_csv())
    final = report.final
    print(", ".join(f"{k}={final[k]:.6g}" for k in report.columns[4:]))
    return EXIT_OK


def _load_model(path: str) -> ESA:
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return ESA.load(path)


def cmd_eval(args) -> int:
    cp = load_config(args.config, args.set)
    model = _load_model(args.checkpoint)
    ds = read_dataset(args.data)
    tcfg = section_object(cp, "train", seed=args.seed)
    if model.cfg.level != ds.level:
        raise UsageError(f"checkpoint is {model.cfg.level}-level but the dataset is {ds.level}-level")
    res = tr.evaluate(model, ds, args.split, tcfg.batch_size)
    report = tr.MetricReport(ds.task)
    report.add(args.split, 0, float("nan"), float("nan"), res)
    out = run_dir(args)
    snapshot(out, args, train=tcfg)
    (out / "eval.csv").write_text(report.to_csv())
    print(", ".join(f"{k}={report.final[k]:.6g}" for k in report.columns[4:]))
    return EXIT_OK


def cmd_maskgen(args) -> int:
    graphs = graph.read_graphs(args.graphs)
    out = run_dir(args)
    bg = graph.batch(graphs)
    fn = masking.edge_mask_for if args.tokens == "edge" else masking.node_mask_for
    mask = fn(bg, layout=args.layout)
    fmt = masking.format_mask_dense if args.layout == "dense" else masking.format_mask_sparse
    (out / f"{args.tokens}_mask.txt").write_text(fmt(mask))
    if args.report:
        lines = ["graph,edges,dense_bytes,sparse_entries,sparse_bytes"]
        for i, g in enumerate(graphs):
            r = masking.mask_storage_report(g)
            lines.append(f"{i},{r['edges']},{r['dense_bytes']},{r['sparse_entries']},{r['sparse_bytes']}")
        (out / "storage.csv").write_text("\n".join(lines) + "\n")
    snapshot(out, args)
    print(out)
    return EXIT_OK


def cmd_bench(args) -> int:
    out = run_dir(args)
    if not (args.ba_sweep or args.kernels):
        raise UsageError("bench needs --ba-sweep and/or --kernels")
    if args.ba_sweep:
        counts = [int(v) for v in args.edges.split(",")]
        study = analysis.memory_scaling_study(counts, args.attach_m, args.seed)
        (out / "memory.csv").write_text(study.to_csv())
        (out / "memory_summary.txt").write_text(study.summary())
        print(study.to_csv() + study.summary(), end="")
    if args.kernels:
        text = bench.format_rows(bench.kernel_benchmark(args.scale, args.repeat, args.seed))
        (out / "kernels.csv").write_text(text)
        print(f"backend: {kernels.BACKEND_NAME}\n" + text, end="")
    snapshot(out, args)
    return EXIT_OK


def cmd_gini(args) -> int:
    model = _load_model(args.checkpoint)
    ds = read_dataset(args.data)
    idx = ds.split[args.split] if ds.level == "graph" else np.arange(len(ds.graphs))
    graphs = [ds.graphs[i] for i in idx[: args.max_graphs]]
    series = analysis.gini_trace(model, graph.batch(graphs), per_row=args.per_row)
    if args.layers != "all":
        keep = {int(v) for v in args.layers.split(",")}
        rows = [i for i in range(len(series.layers)) if i in keep]
        series = analysis.GiniSeries([series.layers[i] for i in rows], series.values[rows],
                                     series.per_row)
    out = run_dir(args)
    (out / "gini.csv").write_text(series.to_csv())
    snapshot(out, args)
    print(series.to_csv(), end="")
    return EXIT_OK


def cmd_wl_demo(args) -> int:
    rep = analysis.wl_linegraph_demo(args.rounds)
    out = run_dir(args)
    (out / "wl_demo.txt").write_text(rep.to_text())
    snapshot(out, args)
    print(rep.to_text(), end="")
    return EXIT_OK if rep.passed else EXIT_CHECK


def cmd_selfcheck(args) -> int:
    if args.only:
        selection = tuple(int(v) for v in args.only.split(","))
        unknown = set(selection) - set(acceptance.CHECKS)
        if unknown:
            raise UsageError(f"unknown check numbers: {sorted(unknown)}")
    else:
        selection = acceptance.FAST + (acceptance.SLOW if args.full else ())
    checks = acceptance.run(args.seed, selection)
    text = acceptance.report(checks)
    out = run_dir(args)
    (out / "selfcheck.txt").write_text(text)
    snapshot(out, args)
    print(text, end="")
    return EXIT_OK if all(c.passed for c in checks) else EXIT_CHECK


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="esa", description="Edge-set attention toolkit.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help="run directory (default: $ESA_OUTPUT_ROOT/<command>-seed<seed>)")
        return p

    def configurable(p):
        p.add_argument("--config", help="INI file with [model] / [train] sections")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")

    p = command("generate", cmd_generate, "Write a synthetic dataset (graphs + split manifest).")
    p.add_argument("--kind", choices=["infected-er", "ba"], required=True)
    p.add_argument("--nodes", type=int, default=1500)
    p.add_argument("--infected", type=int, default=4)
    p.add_argument("--max-path-len", type=int, default=20)
    p.add_argument("--edge-prob", type=float, default=0.0009)
    p.add_argument("--attach-m", type=int, default=2)
    p.add_argument("--edges", default="2000,4000,8000,16000,32000",
                   help="comma-separated directed edge counts of the BA sweep")

    p = command("train", cmd_train, "Train a model on a generated dataset.")
    p.add_argument("--data", required=True, help="dataset directory with manifest.ini")
    configurable(p)

    p = command("eval", cmd_eval, "Evaluate a checkpoint on one split.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    configurable(p)

    p = command("maskgen", cmd_maskgen, "Write attention masks and their storage cost.")
    p.add_argument("--graphs", required=True, help="graph file or directory of *.graph files")
    p.add_argument("--tokens", choices=["edge", "node"], default="edge")
    p.add_argument("--layout", choices=["dense", "sparse"], default="sparse")
    p.add_argument("--report", action="store_true", help="also write storage.csv (dense vs sparse bytes)")

    p = command("bench", cmd_bench, "Mask memory scaling and kernel timings.")
    p.add_argument("--ba-sweep", action="store_true", help="edge-mask storage over a BA sweep")
    p.add_argument("--kernels", action="store_true", help="time compiled vs numpy kernels")
    p.add_argument("--edges", default=",".join(map(str, analysis.DEFAULT_SWEEP)))
    p.add_argument("--attach-m", type=int, default=2)
    p.add_argument("--scale", type=int, default=4000)
    p.add_argument("--repeat", type=int, default=5)

    p = command("gini", cmd_gini, "Gini coefficients of per-layer attention.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--layers", default="all", help="'all' or comma-separated encoder layer indices")
    p.add_argument("--max-graphs", type=int, default=64)
    p.add_argument("--per-row", action="store_true", help="average row-wise Gini instead of pooling")

    p = command("wl-demo", cmd_wl_demo, "1-WL on a graph pair and on their line graphs.")
    p.add_argument("--rounds", type=int, default=3)

    p = command("selfcheck", cmd_selfcheck, "Run the acceptance checks and write a report.")
    p.add_argument("--full", action="store_true", help="include the slow training checks")
    p.add_argument("--only", help="comma-separated check numbers")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"esa: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, ArithmeticError, MemoryError, RuntimeError, OSError) as exc:
        print(f"esa: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
