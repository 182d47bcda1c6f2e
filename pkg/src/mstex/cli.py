"""Command-line entry point.

Exit status: 0 on success, 1 on configuration/usage errors, 2 when an
experiment finished with some failed work items.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .features import ARCHITECTURES, ExtractorConfig, FeatureExtractor
from .harness import ExperimentPlan, PlanError, batch_size_study, rgb_comparison, run_experiment
from .imageio import (
    BandSelection,
    ImageFormatError,
    default_pooling,
    export_multispectral,
    export_png,
    load_multispectral,
    load_palette,
    pooled_visualization,
    pooling_from_labels,
    select_bands,
)
from .metrics import RGB_BANDS, DirectionSet, evaluate_pair
from .spectral import ProjectorError, explained_variance_ratio, fit_pca, load_projector, save_projector
from .styledist import StyleModel
from .synthesis import SynthesisConfig, SynthesisError, synthesize
from .synthetic import correlated_field

log = logging.getLogger("mstex")

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2

METHOD_OBJECTIVES = {"stochastic": "stochastic", "pca": "projected", "pca_color": "projected_color",
                     "rgb_baseline": "rgb_plain"}

SYNTH_DEFAULTS = SynthesisConfig()
EXTRACTOR_DEFAULTS = ExtractorConfig()
METRICS_DEFAULTS = {"directions": 1000, "direction_seed": 0, "rgb_bands": list(RGB_BANDS)}


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _defaults() -> dict:
    return {
        "synthesis": SYNTH_DEFAULTS.to_dict(),
        "extractor": {k: v for k, v in EXTRACTOR_DEFAULTS.to_dict().items()},
        "metrics": dict(METRICS_DEFAULTS),
    }


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _merge(base: dict, update: dict, where: str) -> None:
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, f"{where}{key}.")
        else:
            base[key] = value


def resolve_config(config_path: str | None, overrides: list[str], flags: dict) -> dict:
    """Defaults <- config file <- --set key=value <- explicit flags."""
    cfg = _defaults()
    if config_path:
        _merge(cfg, json.loads(Path(config_path).read_text()), "")
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        parts = key.split(".")
        nested: dict = _parse_value(value)
        for p in reversed(parts):
            nested = {p: nested}
        _merge(cfg, nested, "")
    for dotted, value in flags.items():
        if value is None:
            continue
        section, key = dotted.split(".")
        cfg[section][key] = value
    return cfg


def _extractor(cfg: dict) -> FeatureExtractor:
    return FeatureExtractor(ExtractorConfig.from_dict(cfg["extractor"]))


def _write_snapshot(out: Path, argv: list[str], cfg: dict, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"version": __version__, "argv": argv, "config": cfg, **(extra or {})}
    (out / "run_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file with 'synthesis', 'extractor' and 'metrics' sections")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, e.g. synthesis.iterations=50 (repeatable)")
    p.add_argument("--network", choices=sorted(ARCHITECTURES),
                   help=f"network architecture (default: {EXTRACTOR_DEFAULTS.arch})")
    p.add_argument("--weights", help="pretrained weights (.npz manifest archive or torchvision .pth); "
                                     "seeded random initialisation when omitted")
    p.add_argument("--dtype", choices=["float32", "float64"],
                   help=f"network precision (default: {EXTRACTOR_DEFAULTS.dtype})")


def _common_flags(args) -> dict:
    return {"extractor.arch": args.network, "extractor.weights": args.weights, "extractor.dtype": args.dtype}


# -- subcommands -----------------------------------------------------------------------

def cmd_fit_pca(args, argv) -> int:
    paths = sorted({p for pattern in args.corpus for p in glob.glob(pattern)})
    if not paths:
        raise ConfigError(f"no files match {args.corpus}")
    corpus = [load_multispectral(p) for p in paths]
    if args.bands:
        sel = BandSelection(tuple(args.bands))
        corpus = [select_bands(img, sel) for img in corpus]
    proj = fit_pca(corpus, fitted_on=",".join(args.corpus))
    out = Path(args.out)
    save_projector(proj, out)
    _write_snapshot(out.parent, argv, {"corpus": paths, "bands": args.bands})
    total = proj.eigenvalues.sum()
    print(f"{'k':>3} {'eigenvalue':>14} {'ratio':>8} {'cumulative':>11}")
    for k, ev in enumerate(proj.eigenvalues, start=1):
        share = ev / total if total > 0 else 0.0
        print(f"{k:>3} {ev:14.6g} {share:8.4f} {explained_variance_ratio(proj, k):11.4f}")
    return EXIT_OK


def cmd_synthesize(args, argv) -> int:
    flags = {
        **_common_flags(args),
        "synthesis.iterations": args.iters,
        "synthesis.batch_size": args.batch,
        "synthesis.rng_seed": args.seed,
        "synthesis.height": args.height,
        "synthesis.width": args.width,
        "synthesis.init": args.init,
    }
    cfg = resolve_config(args.config, args.overrides, flags)
    cfg["synthesis"]["objective"] = METHOD_OBJECTIVES[args.method]
    if args.method in ("pca", "pca_color") and not args.projector:
        raise ConfigError(f"--method {args.method} requires --projector")
    if args.method == "pca_color" and not args.palette:
        raise ConfigError("--method pca_color requires --palette")
    exemplar = load_multispectral(args.exemplar)
    if args.bands:
        exemplar = select_bands(exemplar, BandSelection(tuple(args.bands)))
    if args.method == "rgb_baseline":
        exemplar = select_bands(exemplar, BandSelection(tuple(cfg["metrics"]["rgb_bands"])))
    projector = load_projector(args.projector) if args.projector else None
    palette = load_palette(args.palette) if args.palette else None
    synth_cfg = SynthesisConfig(**cfg["synthesis"])
    model = StyleModel(_extractor(cfg))
    out = Path(args.out)
    _write_snapshot(out, argv, cfg, {"exemplar": args.exemplar, "method": args.method,
                                     "projector": args.projector, "palette": args.palette, "bands": args.bands})
    img, trace = synthesize(exemplar, synth_cfg, model, projector=projector, palette=palette)
    suffix = ".tif" if args.format == "tif" else ".f64"
    export_multispectral(img, out / f"synthesis{suffix}")
    trace.to_csv(out / "trace.csv")
    export_png(pooled_visualization(img, default_pooling(img)), out / "synthesis.png")
    log.info("final loss %.6g after %d iterations", trace.final_loss, trace.iterations)
    return EXIT_OK


def cmd_evaluate(args, argv) -> int:
    flags = {**_common_flags(args), "metrics.directions": args.directions,
             "metrics.direction_seed": args.direction_seed}
    cfg = resolve_config(args.config, args.overrides, flags)
    a = load_multispectral(args.exemplar)
    b = load_multispectral(args.synthesis, expected_bands=a.num_bands)
    projector = load_projector(args.projector) if args.projector else None
    model = None if args.no_style else StyleModel(_extractor(cfg))
    m = cfg["metrics"]
    dirs = DirectionSet.sample(a.num_bands, m["directions"], m["direction_seed"])
    report = evaluate_pair(a, b, model, projector, dirs, rgb_bands=tuple(m["rgb_bands"]))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_json(out)
    _write_snapshot(out.parent, argv, cfg, {"exemplar": args.exemplar, "synthesis": args.synthesis,
                                            "projector": args.projector})
    return EXIT_OK


def _load_plan(args) -> ExperimentPlan:
    doc = json.loads(Path(args.plan).read_text())
    for item in args.overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        parts = key.split(".")
        target = doc
        for p in parts[:-1]:
            target = target.setdefault(p, {})
        target[parts[-1]] = _parse_value(value)
    if args.out:
        doc["output_dir"] = str(Path(args.out).resolve())
    return ExperimentPlan.from_dict(doc, base_dir=Path(args.plan).resolve().parent)


def cmd_experiment(args, argv) -> int:
    plan = _load_plan(args)
    _write_snapshot(Path(plan.output_dir), argv, plan.to_dict())
    result = rgb_comparison(plan) if args.rgb_comparison else run_experiment(plan)
    sys.stdout.write(result.table.to_text())
    return EXIT_OK if result.ok else EXIT_PARTIAL


def cmd_batch_study(args, argv) -> int:
    plan = _load_plan(args)
    _write_snapshot(Path(plan.output_dir), argv, plan.to_dict(), {"batch_sizes": args.batch_sizes})
    result = batch_size_study(plan, args.batch_sizes)
    sys.stdout.write(result.table.to_text())
    return EXIT_OK if result.ok else EXIT_PARTIAL


def cmd_visualize(args, argv) -> int:
    img = load_multispectral(args.image)
    if args.groups:
        groups = [g.split(",") for g in args.groups.split(";")]
        if all(x.strip().lstrip("-").isdigit() for g in groups for x in g):
            pooling = [[int(x) for x in g] for g in groups]
        else:
            pooling = pooling_from_labels(img, [[x.strip() for x in g] for g in groups])
    else:
        pooling = default_pooling(img)
    export_png(pooled_visualization(img, pooling), args.out)
    _write_snapshot(Path(args.out).parent, argv, {"image": args.image, "pooling": pooling})
    return EXIT_OK


def cmd_make_toy(args, argv) -> int:
    out = Path(args.out)
    for i in range(args.count):
        img = correlated_field(args.size, args.size, args.bands, seed=args.seed + i)
        export_multispectral(img, out / f"toy_{i:03d}.tif")
    _write_snapshot(out, argv, {"count": args.count, "size": args.size, "bands": args.bands, "seed": args.seed})
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mstex", description="Multispectral texture synthesis and evaluation.",
                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("fit-pca", help="fit the N->3 PCA projector on a corpus", formatter_class=fmt)
    p.add_argument("corpus", nargs="+", help="glob(s) of multiband images")
    p.add_argument("--out", required=True, help="projector JSON path")
    p.add_argument("--bands", type=_int_list, help="0-based band indices to keep, e.g. 1,2,3")
    p.set_defaults(func=cmd_fit_pca)

    s = SYNTH_DEFAULTS
    p = sub.add_parser(
        "synthesize", help="synthesise a texture from one exemplar", formatter_class=fmt,
        epilog=(f"synthesis defaults: iterations={s.iterations}, batch_size={s.batch_size} triplets, "
                f"history_size={s.history_size}, max_evals={s.max_evals}, line_search={s.line_search}, "
                f"init=gaussian (exemplar mean/covariance); statistic=covariance; layer weights 1/N_l^2; "
                f"taps=first conv of each resolution level"),
    )
    p.add_argument("exemplar")
    p.add_argument("--method", choices=sorted(METHOD_OBJECTIVES), default="stochastic")
    p.add_argument("--projector", help="projector JSON (pca, pca_color)")
    p.add_argument("--palette", help="palette image (pca_color)")
    p.add_argument("--iters", type=int, help=f"L-BFGS iterations (default: {s.iterations})")
    p.add_argument("--batch", type=int, help=f"triplets per iteration (default: {s.batch_size})")
    p.add_argument("--seed", type=int, help=f"random seed (default: {s.rng_seed})")
    p.add_argument("--height", type=int, help="output height (default: exemplar height)")
    p.add_argument("--width", type=int, help="output width (default: exemplar width)")
    p.add_argument("--init", choices=["gaussian", "exemplar"], help="initialisation (default: gaussian)")
    p.add_argument("--bands", type=_int_list, help="0-based band indices to keep before synthesis")
    p.add_argument("--format", choices=["tif", "raw"], default="tif", help="output container")
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", help="compute every metric for an (exemplar, synthesis) pair",
                       formatter_class=fmt)
    p.add_argument("exemplar")
    p.add_argument("synthesis")
    p.add_argument("--projector", help="projector JSON for L_style^PCA")
    p.add_argument("--directions", type=int,
                   help=f"random directions for sliced distances (default: {METRICS_DEFAULTS['directions']})")
    p.add_argument("--direction-seed", type=int, help="seed of the direction set (default: 0)")
    p.add_argument("--no-style", action="store_true", help="skip network-based style metrics")
    p.add_argument("--out", required=True, help="report JSON path")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    for name, func, helptext in (("experiment", cmd_experiment, "run an experiment plan"),
                                 ("batch-study", cmd_batch_study, "stochastic batch-size study")):
        p = sub.add_parser(name, help=helptext, formatter_class=fmt)
        p.add_argument("plan", help="plan JSON file")
        p.add_argument("--out", help="override the plan's output_dir")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted plan override, e.g. synthesis.iterations=20")
        if name == "experiment":
            p.add_argument("--rgb-comparison", action="store_true",
                           help="add the 3-band baseline and evaluate all methods on bands 2-4")
        else:
            p.add_argument("--batch-sizes", type=_int_list, default=[1, 3, 5, 7, 10])
        p.set_defaults(func=func)

    p = sub.add_parser("visualize", help="pooled 3-channel PNG of a multiband image", formatter_class=fmt)
    p.add_argument("image")
    p.add_argument("--groups", help="three ';'-separated groups of band labels or 0-based indices, "
                                    "e.g. 'B1,B2,B3,B4;B5,B6,B7,B8;B9,B11,B12'")
    p.add_argument("--out", required=True, help="PNG path")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("make-toy", help="write a seeded synthetic multiband corpus", formatter_class=fmt)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=2)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--bands", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_toy)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except (ConfigError, PlanError, ProjectorError, ImageFormatError, FileNotFoundError,
            json.JSONDecodeError, TypeError, ValueError) as exc:
        print(f"mstex {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SynthesisError as exc:
        print(f"mstex {args.command}: synthesis failed: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    raise SystemExit(main())
