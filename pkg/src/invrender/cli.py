"""Command line entry point: ``invrender <command> [options]``.

Commands mirror the pipeline stages (synth, brdf-pretrain, distill, train,
relight, edit, eval) plus the cross-illumination consistency experiment.
Every command writes ``config.json`` with the resolved settings next to its
outputs.  Failures print one JSON line on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import __version__, pipeline
from .brdf import GloConfig, load_merl_bank
from .errors import InvRenderError, MissingArtifactError
from .factor import FactorConfig
from .scene_io import FixtureSpec

OUT_ENV = "INVRENDER_OUT"
EXIT_ERROR = 1

log = logging.getLogger("invrender")


class CliError(Exception):
    pass


def _read_config(path):
    if path is None:
        return {}
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise CliError(f"config file {path} is not valid JSON: {e.msg} (line {e.lineno})") from None
    if not isinstance(d, dict):
        raise CliError(f"config file {path} must hold a JSON object")
    return d


def _only_known(cls, d, what):
    known = {f.name for f in fields(cls)}
    bad = sorted(set(d) - known)
    if bad:
        raise CliError(f"unknown {what} config keys: {', '.join(bad)}")
    return d


def _out_dir(args):
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / args.command


def _olat(text):
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected ROW,COL, got {text!r}") from None
    return r, c


def _rgb(text):
    if text == "turbo":
        return text
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        vals = ()
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected R,G,B or 'turbo', got {text!r}")
    return vals


def _snapshot(out, args, resolved):
    argv = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    pipeline.write_config(out, {"command": args.command, "version": __version__, "args": argv, **resolved})


def _brdf(args, required=True):
    if args.brdf is None:
        if required:
            raise MissingArtifactError("BRDF checkpoint (pass --brdf)", "brdf-pretrain")
        return None
    return pipeline.load_brdf(args.brdf)


# -- commands --------------------------------------------------------------------------


def cmd_synth(args):
    cfg = _only_known(FixtureSpec, _read_config(args.config), "fixture")
    if args.seed is not None:
        cfg["seed"] = args.seed
    spec = FixtureSpec.from_dict(cfg)
    if args.probe:
        name, probe = pipeline.resolve_probe(args.probe, *spec.probe_resolution)
        spec = FixtureSpec.from_dict({**spec.to_dict(), "probe": probe.radiance.tolist()})
    brdf = _brdf(args, required=spec.roughness is None)
    out = _out_dir(args)
    pipeline.synth(out, spec, brdf, log.info)
    _snapshot(out, args, {"fixture": spec.to_dict()})
    return out


def cmd_brdf_pretrain(args):
    cfg = _only_known(GloConfig, _read_config(args.config), "GLO")
    if args.seed is not None:
        cfg["seed"] = args.seed
    glo = GloConfig(**cfg)
    mats = None
    if args.merl:
        mats = load_merl_bank(args.merl)
        if not mats:
            raise CliError(f"no .binary MERL files in {args.merl}")
    out = _out_dir(args)
    pipeline.brdf_pretrain(out, glo, mats, log.info)
    _snapshot(out, args, {"glo": asdict(glo), "materials": [m.name for m in mats] if mats else
                          list(pipeline.SYNTHETIC_BANK)})
    return out


def cmd_distill(args):
    cfg = _read_config(args.config)
    bad = sorted(set(cfg) - {"n_samples", "vis_samples", "probe_resolution"})
    if bad:
        raise CliError(f"unknown distill config keys: {', '.join(bad)}")
    out = _out_dir(args)
    pr = cfg.get("probe_resolution")
    pipeline.distill(args.scene, out, cfg.get("n_samples", 192), cfg.get("vis_samples", 64),
                     tuple(pr) if pr else None, log.info)
    _snapshot(out, args, {"distill": cfg})
    return out


def factor_config(args):
    cfg = _only_known(FactorConfig, _read_config(args.config), "training")
    if args.seed is not None:
        cfg["seed"] = args.seed
    for flag in ("no_smoothness", "no_geom_pretrain", "use_nerf_shape", "microfacet_brdf"):
        if getattr(args, flag):
            cfg[flag] = True
    return FactorConfig.from_dict(cfg)


def _epoch_logger(row):
    log.info("epoch %d total %.6f", row["epoch"], row["total"])


def cmd_train(args):
    config = factor_config(args)
    brdf = _brdf(args, required=not config.microfacet_brdf)
    out = _out_dir(args)
    pipeline.train_model(args.scene, args.distill, brdf, config, out, on_epoch=_epoch_logger)
    _snapshot(out, args, {"factor": config.to_dict()})
    return out


def _model(args):
    return pipeline.load_factor_model(args.model, _brdf(args, required=False))


def cmd_relight(args):
    model = _model(args)
    out = _out_dir(args)
    olats = list(args.olat or [])
    h, w = model.config.probe_height, model.config.probe_width
    for r, c in olats:
        if not (0 <= r < h and 0 <= c < w):
            raise CliError(f"OLAT pixel {r},{c} outside the {h}x{w} probe")
    written = pipeline.relight(model, args.scene, args.distill, out, args.view, args.probe or (), olats, log.info)
    _snapshot(out, args, {"outputs": [p.name for p in written]})
    return out


def cmd_edit(args):
    model = _model(args)
    if args.material is not None and model.brdf_model is None:
        raise CliError("--material needs a model trained with the learned BRDF (pass --brdf)")
    code = model.brdf_model.code(args.material) if args.material else None
    out = _out_dir(args)
    pipeline.edit(model, args.scene, args.distill, out, args.albedo, code, args.view)
    _snapshot(out, args, {"albedo": args.albedo, "material": args.material})
    return out


def cmd_eval(args):
    model = _model(args)
    report, _ = pipeline.evaluate(model, args.scene, args.distill)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_csv())
    _snapshot(out, args, {"metrics": report.aggregate()})
    print(report.summary())
    return out


def cmd_consistency(args):
    config = factor_config(args)
    spec_cfg = _only_known(FixtureSpec, _read_config(args.fixture), "fixture")
    spec = FixtureSpec.from_dict(spec_cfg)
    names = args.probe or ["studio", "sky"]
    if len(names) < 2:
        raise CliError("consistency needs at least two --probe values")
    probes = [pipeline.resolve_probe(n, *spec.probe_resolution)[1].radiance for n in names]
    brdf = _brdf(args, required=spec.roughness is None or not config.microfacet_brdf)
    out = _out_dir(args)
    rows = pipeline.consistency_experiment(spec, probes, brdf, config, out, log=log.info)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["probe_a,probe_b,albedo_psnr"] + [f"{names[r['run_a']]},{names[r['run_b']]},{r['psnr']:.4f}"
                                               for r in rows]
    (out / "consistency.csv").write_text("\n".join(lines) + "\n")
    _snapshot(out, args, {"factor": config.to_dict(), "fixture": spec.to_dict(), "probes": names})
    for line in lines[1:]:
        print(line)
    return out


# -- parser ------------------------------------------------------------------------------


def _common(p, seed=True):
    p.add_argument("--config", type=Path, help="JSON file of settings for this command")
    p.add_argument("--out", type=Path, help=f"output directory (default: ${OUT_ENV}/<command> or runs/<command>)")
    p.add_argument("--workers", type=int, default=1, help="upper bound on worker processes (runs are serial)")
    if seed:
        p.add_argument("--seed", type=int, help="overrides the seed in --config")


def _inputs(p, model=False):
    p.add_argument("--scene", type=Path, required=True, help="fixture or scene directory with manifest.json")
    p.add_argument("--distill", type=Path, required=True, help="distilled geometry directory")
    p.add_argument("--brdf", type=Path, help="BRDF checkpoint or brdf-pretrain output directory")
    if model:
        p.add_argument("--model", type=Path, required=True, help="train output directory or model checkpoint")
        p.add_argument("--view", help="view name (default: first view)")


def _ablations(p):
    p.add_argument("--no_smoothness", action="store_true", help="zero every smoothness weight")
    p.add_argument("--no_geom_pretrain", action="store_true", help="skip the geometry pretraining stage")
    p.add_argument("--use_nerf_shape", action="store_true", help="freeze normals and visibility at pretrained values")
    p.add_argument("--microfacet_brdf", action="store_true", help="use the analytic GGX BRDF instead of the prior")


def build_parser():
    ap = argparse.ArgumentParser(prog="invrender", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"invrender {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", help="generate the sphere-on-slab fixture scene")
    _common(p)
    p.add_argument("--brdf", type=Path, help="BRDF checkpoint (needed unless material is roughness:<v>)")
    p.add_argument("--probe", help=f"ground-truth probe: .hdr path or one of {', '.join(pipeline.PROBE_NAMES)}")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("brdf-pretrain", help="fit the latent BRDF prior")
    _common(p)
    p.add_argument("--merl", type=Path, help="directory of MERL .binary files (default: synthetic bank)")
    p.set_defaults(func=cmd_brdf_pretrain)

    p = sub.add_parser("distill", help="surface points, normals and visibility per view")
    _common(p, seed=False)
    p.add_argument("--scene", type=Path, required=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("train", help="geometry pretraining then joint factorization")
    _common(p)
    _inputs(p)
    _ablations(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("relight", help="render a view under probes and OLAT lights")
    _common(p, seed=False)
    _inputs(p, model=True)
    p.add_argument("--probe", action="append", help="probe .hdr path or name; repeatable")
    p.add_argument("--olat", action="append", type=_olat, metavar="ROW,COL", help="single-pixel light; repeatable")
    p.set_defaults(func=cmd_relight)

    p = sub.add_parser("edit", help="render a view with overridden albedo and/or material")
    _common(p, seed=False)
    _inputs(p, model=True)
    p.add_argument("--albedo", type=_rgb, help="R,G,B constant or 'turbo' (colormap over x)")
    p.add_argument("--material", help="name of a latent code in the BRDF checkpoint")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("eval", help="metrics against the fixture ground truth")
    _common(p, seed=False)
    _inputs(p, model=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("consistency", help="albedo agreement across input probes")
    _common(p)
    p.add_argument("--fixture", type=Path, help="JSON fixture settings")
    p.add_argument("--brdf", type=Path)
    p.add_argument("--probe", action="append", help="probe .hdr path or name; at least two")
    _ablations(p)
    p.set_defaults(func=cmd_consistency)
    return ap


def _error_line(exc):
    d = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, MissingArtifactError):
        d["stage"] = exc.stage
    return json.dumps(d)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.workers < 1:
        print(_error_line(CliError("--workers must be at least 1")), file=sys.stderr)
        return EXIT_ERROR
    try:
        out = args.func(args)
    except (InvRenderError, CliError, ValueError, OSError, KeyError) as exc:
        print(_error_line(exc), file=sys.stderr)
        return EXIT_ERROR
    log.info("wrote %s", out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
