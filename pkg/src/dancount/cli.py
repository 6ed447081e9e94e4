"""Command-line front end: ``dancount <command> [flags]``.

Commands: gen, density, train, eval, gradlab, inspect. Exit status is 0 on
success, 1 on a usage error and 2 when a command fails at run time.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import densegen as dg
from . import evalmetrics as em
from . import synthgen as sg
from . import trainer as tr
from .annot import load_annotation
from .dan import build_dan
from .errors import DanCountError, IoFailure
from .pgm import write_pgm

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _map_config(args) -> dg.StructuredMapConfig:
    try:
        return dg.StructuredMapConfig(
            D=args.levels,
            thresholds=args.thresholds,
            sigma_v=args.sigma_v,
            sigma_g=args.sigma_g,
            scale=args.scale,
        )
    except (ValueError, DanCountError) as exc:
        raise UsageError(f"bad density-map options: {exc}") from exc


def _add_map_flags(p, levels_default=4):
    p.add_argument("--levels", type=int, default=levels_default, help="number of density levels D (default: %(default)s)")
    p.add_argument("--thresholds", type=_floats, default=None,
                   help="comma-separated S_1..S_D in image pixels (default: 3,9,...,3^D)")
    p.add_argument("--sigma-v", type=float, default=None, help="soft-mapping smoothness (default: 2D-1)")
    p.add_argument("--sigma-g", type=float, default=4.0, help="Gaussian width for plain maps (default: %(default)s)")
    p.add_argument("--scale", type=float, default=0.25, help="map downscaling factor s (default: %(default)s)")


def _mkdir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return path


# --- commands -----------------------------------------------------------

def cmd_gen(args) -> int:
    try:
        cfg = sg.SynthConfig(
            args.height, args.width, (args.count_min, args.count_max),
            args.perspective, (args.radius_min, args.radius_max), args.noise, args.seed,
        )
    except DanCountError as exc:
        raise UsageError(str(exc)) from exc
    if args.scenes < 1:
        raise UsageError("--scenes must be >= 1")
    entries = sg.generate_dataset(cfg, args.scenes, args.out)
    print(f"wrote {len(entries)} scenes to {args.out}")
    return EXIT_OK


def cmd_density(args) -> int:
    cfg = _map_config(args)
    ann = load_annotation(args.annotation)
    if args.plain:
        values = dg.plain_density_map(ann, cfg.sigma_g, cfg.scale).values
    else:
        values = dg.structured_density_map(ann, cfg).values
    dg.write_dmap(args.output, values)
    stack = values.reshape((-1,) + values.shape[-2:])
    if args.assignments:
        la = dg.level_assignments(ann, cfg)
        rows = ["row\tcol\tdistance\tlevel"]
        for (r, c), d, lv in zip(la.points.tolist(), la.distances.tolist(), la.levels.tolist()):
            rows.append(f"{r!r}\t{c!r}\t{d!r}\t{lv}")
        try:
            Path(args.assignments).write_text("\n".join(rows) + "\n", encoding="utf-8")
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
    print(f"{args.output}: D={stack.shape[0]} {stack.shape[1]}x{stack.shape[2]} mass={stack.sum():.6f}")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        train_cfg, model_cfg = tr.load_config(args.config)
    except IoFailure:
        raise
    except (ValueError, DanCountError) as exc:
        raise UsageError(f"bad config {args.config}: {exc}") from exc
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    if args.iterations is not None:
        train_cfg = dataclasses.replace(train_cfg, iterations=args.iterations)
    out = _mkdir(args.out)
    state, start = None, 0
    if args.resume:
        model, state, start = tr.load_checkpoint(args.resume)
        if state is not None:
            state.learning_rate = train_cfg.learning_rate
    else:
        model = build_dan(model_cfg, train_cfg.seed)
    ckpt_dir = _mkdir(out / "checkpoints") if train_cfg.checkpoint_every else None
    model, log, state = tr.train(model, args.data, train_cfg, state, start, ckpt_dir)
    tr.save_checkpoint(model, state, out / "final.danw", train_cfg.iterations)
    log.write_tsv(out / "train_log.tsv")
    log.write_val_tsv(out / "val_log.tsv")
    last = f" val_mae={log.val_mae[-1]:.4f}" if log.val_mae else ""
    print(f"trained to iteration {train_cfg.iterations}{last}; wrote {out / 'final.danw'}")
    return EXIT_OK


def _heat(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    return (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)


def cmd_eval(args) -> int:
    if args.oracle == bool(args.model):
        raise UsageError("give exactly one of --model or --oracle")
    if args.model:
        model, _, _ = tr.load_checkpoint(args.model)
        if args.levels != model.config.D:
            raise UsageError(f"--levels {args.levels} does not match the model's D={model.config.D}")
    cfg = _map_config(args)
    if args.oracle:
        model = em.OracleModel(cfg)
    scenes = tr.load_scenes(args.data)
    report = em.evaluate(model, scenes, cfg)
    out = _mkdir(args.out)
    report.write_tsv(out / "eval.tsv")
    report.write_summary(out / "summary.tsv")
    if args.heatmaps:
        hdir = _mkdir(out / "heatmaps")
        for i, s in enumerate(scenes):
            pred = em._predict_maps(model, s.image, s.annotation)
            gt = dg.structured_density_map(s.annotation, cfg).values
            for d in range(cfg.D):
                write_pgm(hdir / f"scene_{i:05d}_L{d + 1}_pred.pgm", _heat(pred[d]))
                write_pgm(hdir / f"scene_{i:05d}_L{d + 1}_gt.pgm", _heat(gt[d]))
    print(f"MAE={report.mae:.4f} MSE={report.mse:.4f} over {len(report.per_scene)} scenes")
    return EXIT_OK


def cmd_gradlab(args) -> int:
    if args.iterations < 200:
        raise UsageError("--iterations must be >= 200")
    wanted = args.experiments.split(",")
    unknown = set(wanted) - {"dying", "exploding", "outlier"}
    if unknown:
        raise UsageError(f"unknown experiments: {', '.join(sorted(unknown))}")
    out = _mkdir(args.out)
    if "dying" in wanted:
        for rep in em.dying_relu_experiment(args.seed, args.iterations):
            rep.write_tsv(out / f"dying_{rep.label}.tsv")
            print(f"dying {rep.label}: final dead fraction {rep.dead_fraction[-1]:.4f}")
    if "exploding" in wanted:
        for rep in em.exploding_gradient_experiment(args.seed, args.iterations):
            rep.write_tsv(out / f"exploding_{rep.label}.tsv")
            print(f"exploding {rep.label}: max grad norm {rep.max_grad_norm:.4g} diverged={rep.diverged}")
    if "outlier" in wanted:
        rows = ["noise_level\tn_affected\tn_affected_active\tl2_delta\thuber_delta\tdelta"]
        for e in args.noise_levels:
            r = em.outlier_sensitivity_experiment(e, args.seed)
            rows.append(f"{r.noise_level!r}\t{r.n_affected}\t{r.n_affected_active}\t"
                        f"{r.l2_delta!r}\t{r.huber_delta!r}\t{r.delta!r}")
        (out / "outlier.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
        print(f"outlier: {len(args.noise_levels)} noise levels")
    return EXIT_OK


def cmd_inspect(args) -> int:
    try:
        buf = Path(args.file).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if buf[:4] == dg.DMAP_MAGIC:
        _, D, H, W = dg.read_dmap_header(buf)
        values = dg.read_dmap(args.file)
        print(f"DMAP version={dg.DMAP_VERSION} D={D} H={H} W={W}")
        for d in range(D):
            print(f"level{d + 1}_mass={float(values[d].astype(np.float64).sum())!r}")
        return EXIT_OK
    model, state, it = tr.load_checkpoint(args.file)
    n_params = sum(p.size for p in model.param_arrays())
    print(f"DANW version=1 params={n_params}")
    for f in dataclasses.fields(model.config):
        print(f"{f.name}={getattr(model.config, f.name)!r}")
    if state is not None:
        print(f"optimizer=adam iteration={it} step_count={state.step_count} learning_rate={state.learning_rate!r}")
    return EXIT_OK


# --- parser -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="dancount", description="Structured density-map crowd counting toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="render a synthetic dataset", formatter_class=fmt)
    g.add_argument("--scenes", type=int, required=True, help="number of scenes")
    g.add_argument("--seed", type=int, default=0, help="seed of scene 0; scene i uses seed+i")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--count-min", type=int, default=20)
    g.add_argument("--count-max", type=int, default=120)
    g.add_argument("--perspective", type=float, default=2.0, help="perspective strength")
    g.add_argument("--radius-min", type=float, default=2.0)
    g.add_argument("--radius-max", type=float, default=3.5)
    g.add_argument("--noise", type=float, default=0.02, help="background noise sigma")
    g.set_defaults(func=cmd_gen)

    d = sub.add_parser("density", help="density map from an annotation file", formatter_class=fmt)
    d.add_argument("annotation", help="annotation text file")
    d.add_argument("-o", "--output", required=True, help="output DMAP file")
    kind = d.add_mutually_exclusive_group()
    kind.add_argument("--plain", action="store_true", help="single Gaussian-sum map")
    kind.add_argument("--structured", action="store_true", help="D-level structured map (the default)")
    _add_map_flags(d)
    d.add_argument("--assignments", default=None, help="also write per-point distance and level as TSV")
    d.set_defaults(func=cmd_density)

    t = sub.add_parser("train", help="train a DAN from a key = value config", formatter_class=fmt)
    t.add_argument("--config", required=True, help="training config file")
    t.add_argument("--data", required=True, help="dataset manifest")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int, default=None, help="overrides the config seed (model init and data stream)")
    t.add_argument("--iterations", type=int, default=None, help="overrides the config iteration count")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or the ground-truth oracle", formatter_class=fmt)
    e.add_argument("--data", required=True, help="dataset manifest")
    e.add_argument("--model", default=None, help="checkpoint file")
    e.add_argument("--oracle", action="store_true", help="predict the ground-truth maps")
    e.add_argument("--out", required=True, help="output directory")
    e.add_argument("--heatmaps", action="store_true", help="write per-level PGM renderings")
    _add_map_flags(e)
    e.set_defaults(func=cmd_eval)

    lab = sub.add_parser("gradlab", help="run the gradient-pathology experiments", formatter_class=fmt)
    lab.add_argument("--seed", type=int, default=0)
    lab.add_argument("--out", required=True, help="output directory")
    lab.add_argument("--iterations", type=int, default=300)
    lab.add_argument("--experiments", default="dying,exploding,outlier", help="comma-separated subset")
    lab.add_argument("--noise-levels", type=_floats, default=(0.0, 0.25, 0.5, 1.0, 2.0))
    lab.set_defaults(func=cmd_gradlab)

    i = sub.add_parser("inspect", help="print a DMAP or checkpoint header", formatter_class=fmt)
    i.add_argument("file")
    i.set_defaults(func=cmd_inspect)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (DanCountError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())
