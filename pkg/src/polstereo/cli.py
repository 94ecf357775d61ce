"""Command-line interface: ``polstereo <stage> ...``."""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

from . import __version__, io
from .config import SCHEMA_VERSION, ConfigError, PipelineConfig, load_config
from .mrf import BPConfig
from .pipeline import StageError, run_pipeline, run_stage

log = logging.getLogger("polstereo")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    changes = {}
    for key in ("data", "eta", "lam", "lam_I", "k", "t", "w_pair", "w_tern"):
        v = getattr(args, key, None)
        if v is not None:
            changes[key] = v
    if getattr(args, "iters", None) is not None:
        changes["bp"] = BPConfig(iters=args.iters, damping=cfg.bp.damping, tol=cfg.bp.tol)
    if getattr(args, "light", None) is not None:
        changes["light"] = args.light
    if getattr(args, "guide_depth", None):
        changes["guide_depth"] = args.guide_depth
    if getattr(args, "skip_stereo", False):
        changes["skip_stereo"] = True
    if getattr(args, "min_disp", None) is not None or getattr(args, "max_disp", None) is not None:
        from .stereo import SGMConfig

        s = cfg.sgm
        changes["sgm"] = SGMConfig(
            min_disp=s.min_disp if args.min_disp is None else args.min_disp,
            max_disp=s.max_disp if args.max_disp is None else args.max_disp,
            P1=s.P1,
            P2=s.P2,
            lr_tol=s.lr_tol,
            subpixel=s.subpixel,
            unique=s.unique,
        )
    try:
        return cfg.replace(**changes) if changes else cfg
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _add_common(p: argparse.ArgumentParser, data_required: bool = True) -> None:
    p.add_argument("--data", required=data_required, help="dataset directory containing manifest.json")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--eta", type=float, help="refractive index")
    p.add_argument("--light", type=_floats, help="light direction x,y,z")


def _cmd_synth(args) -> int:
    from . import synth

    if args.config:
        scene = synth.SceneConfig.from_dict(io.read_json(args.config))
    else:
        scene = synth.paper_scene(noise=args.noise, size=args.size, seed=args.seed)
    truth = synth.render(scene)
    stack, right = synth.polarise(truth, scene)
    synth.write_dataset(args.out, scene, truth, stack, right)
    print(f"wrote dataset to {args.out}")
    return 0


def _cmd_stage(args) -> int:
    cfg = _config(args)
    out = run_stage(args.command, cfg.data, cfg)
    if args.command == "depth":
        man = io.Manifest.load(cfg.data)
        if args.out:
            shutil.copyfile(man.path("depth"), args.out)
        if args.mesh:
            shutil.copyfile(man.path("mesh"), args.mesh)
    if args.command == "eval":
        _print_metrics(out)
    return 0


def _cmd_eval(args) -> int:
    if args.data:
        return _cmd_stage(args)
    from .evaluation import MetricsReport, depth_mae, normal_mae

    if not (args.est and args.gt):
        raise ConfigError("eval needs --data or both --est and --gt")
    rep = MetricsReport()
    mae, scale, px = depth_mae(io.read_scalar_map(args.est), io.read_scalar_map(args.gt), args.align_scale)
    rep.add("depth_mae", mae, "mm", px)
    rep.add("scale_applied", scale, "", px)
    if args.normals_est and args.normals_gt:
        err, px = normal_mae(io.read_vector_map(args.normals_est), io.read_vector_map(args.normals_gt))
        rep.add("normal_mae", err, "deg", px)
    if args.out:
        rep.write_csv(args.out)
    _print_metrics(rep)
    return 0


def _cmd_pipeline(args) -> int:
    cfg = _config(args)
    if args.noise_sweep:
        return _sweep(args, cfg)
    if args.out:
        cfg = cfg.replace(out=args.out)
    rep = run_pipeline(cfg)
    if rep is not None:
        _print_metrics(rep)
    return 0


def _sweep(args, cfg: PipelineConfig) -> int:
    from . import synth

    if not args.out:
        raise ConfigError("--noise-sweep needs --out")
    root = Path(args.out)
    rows = []
    for sigma in args.noise_sweep:
        ds = root / f"sigma_{sigma:g}"
        if args.scene:
            scene = synth.SceneConfig.from_dict({**io.read_json(args.scene), "noise": sigma})
        else:
            scene = synth.paper_scene(noise=sigma, size=cfg.size, seed=cfg.seed)
        truth = synth.render(scene)
        stack, right = synth.polarise(truth, scene)
        synth.write_dataset(ds, scene, truth, stack, right)
        rep = run_pipeline(cfg.replace(data=str(ds), out=None, noise=sigma))
        print(f"noise {sigma:g}")
        _print_metrics(rep)
        rows += [[sigma, *r] for r in rep.rows]
    io.write_csv(root / "sweep.csv", ["noise", "metric", "value", "unit", "pixels"], rows)
    return 0


def _print_metrics(rep) -> None:
    for name, value, unit, px in rep.rows:
        print(f"  {name:20s} {value:12.6g} {unit:8s} ({px} px)")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="polstereo", description="Polarisation + stereo depth and albedo reconstruction")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__} (config schema {SCHEMA_VERSION})")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic dataset")
    s.add_argument("--config", help="scene config JSON (defaults to the reference sphere)")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--noise", type=float, default=0.0, help="noise std as a fraction of full range")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=256)
    s.set_defaults(func=_cmd_synth)

    s = sub.add_parser("stereo", help="guide depth and normals from the stereo pair")
    _add_common(s)
    s.add_argument("--min-disp", type=int)
    s.add_argument("--max-disp", type=int)
    s.add_argument("--guide-depth", help="external depth PFM (metres) used instead of stereo")
    s.add_argument("--skip-stereo", action="store_true")
    s.set_defaults(func=_cmd_stage)

    s = sub.add_parser("disambiguate", help="choose candidate normals and the specular mask")
    _add_common(s)
    s.add_argument("--k", type=float, help="initial-mask disagreement factor")
    s.add_argument("--w-pair", dest="w_pair", type=float, help="pairwise label weight")
    s.add_argument("--w-tern", dest="w_tern", type=float, help="curl weight")
    s.add_argument("--iters", type=int, help="belief propagation iterations")
    s.set_defaults(func=_cmd_stage)

    s = sub.add_parser("albedo", help="estimate the albedo map")
    _add_common(s)
    s.add_argument("--lambda-I", "--lambda-i", dest="lam_I", type=float, help="albedo smoothness weight")
    s.add_argument("-t", "--t", dest="t", type=float, help="intensity-gradient threshold")
    s.set_defaults(func=_cmd_stage)

    s = sub.add_parser("depth", help="solve the global depth system")
    _add_common(s)
    s.add_argument("--lambda", dest="lam", type=float, help="shape-row weight against guide anchors")
    s.add_argument("--out", help="also copy the depth PFM here")
    s.add_argument("--mesh", help="also copy the PLY mesh here")
    s.set_defaults(func=_cmd_stage)

    s = sub.add_parser("eval", help="depth and normal error metrics")
    _add_common(s, data_required=False)
    s.add_argument("--est", help="estimated depth PFM")
    s.add_argument("--gt", help="ground-truth depth PFM")
    s.add_argument("--align-scale", action="store_true", help="apply the optimal scale before scoring")
    s.add_argument("--normals-est")
    s.add_argument("--normals-gt")
    s.add_argument("--out", help="metrics CSV")
    s.set_defaults(func=_cmd_eval)

    s = sub.add_parser("pipeline", help="run all stages end to end")
    _add_common(s, data_required=False)
    s.add_argument("--out", help="copy the dataset here and write all outputs to the copy")
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--lambda-I", "--lambda-i", dest="lam_I", type=float)
    s.add_argument("--k", type=float)
    s.add_argument("-t", "--t", dest="t", type=float)
    s.add_argument("--min-disp", type=int)
    s.add_argument("--max-disp", type=int)
    s.add_argument("--guide-depth", help="external depth PFM (metres) used instead of stereo")
    s.add_argument("--skip-stereo", action="store_true")
    s.add_argument("--noise-sweep", type=_floats, help="render and reconstruct at each noise level, e.g. 0,0.005,0.01")
    s.add_argument("--scene", help="scene config JSON for --noise-sweep")
    s.set_defaults(func=_cmd_pipeline)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"error: stage 'config' failed: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: stage '{args.command}' failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
