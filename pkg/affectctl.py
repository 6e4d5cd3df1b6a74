#!/usr/bin/env python3
"""
AFFECTCTL - Command line for training, adaptation, metrics and sweeps
=====================================================================
    affectctl [--seed N] [--config run.json] [--out DIR] [--log-level LEVEL] <verb> ...

Verbs:
    make-corpus         synthetic shapes corpus with oracle labels
    train-regressor     pixel emotion regressor R
    train-guidance      mid-layer regressor R_u on a trained denoiser
    train-embedder      semantic embedder E (autoencoder)
    train-disentangler  content/style disentangler
    train-denoiser      tiny text-conditioned denoiser
    adapt               adapt one image (parametric | style | diffusion | cg_only | manual)
    metrics             property report for every image of a manifest
    sweep               weight sweep per method
    bidirectional       relative / extreme reference sweep per method
    report              plots + HTML from the CSV tables in a directory

Exit status is 0 only when every requested row was computed.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import settings
from affect_regressor import TrainConfig, train_guidance_regressor, train_pixel_regressor
from checkpoints import load_checkpoint, save_checkpoint
from denoiser import DenoiserTrainConfig, train_tiny_denoiser
from diff_transforms import TransformParams
from diffusion_adapter import GuidanceConfig, InversionCache, adapt_image_cg_only, adapt_image_diffusion
from errors import AffectError, ConfigError
from eval_harness import (METHODS, AdaptationContext, SweepConfig, load_report_tables, render_report,
                          run_bidirectional, run_weight_sweep)
from imaging import EmotionReference, ingest_manifest, load_image, normalize_ratings
from noise_schedule import make_schedule
from parametric_adapter import PRESETS as PARAMETRIC_PRESETS
from parametric_adapter import manual_adapt, optimize_params, write_adaptation
from property_metrics import (CorpusStats, MetricsSettings, RegressorFeatureExtractor, report,
                              report_frame)
from semantic_services import EmbedderTrainConfig, make_caption_provider, train_autoencoder_embedder
from style_adapter import PRESETS as STYLE_PRESETS
from style_adapter import DisentanglerTrainConfig, optimize_style, train_disentangler
from synthetic_corpus import OracleRegressor, write_shapes_corpus

logger = logging.getLogger("affectctl")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


# =========================================================================
# HELPERS
# =========================================================================

def _manifest(path: str):
    return normalize_ratings(ingest_manifest(path))


def _load(path: Optional[str], kind: str):
    if not path:
        return None
    model, _ = load_checkpoint(path, expected_kind=kind)
    return model


def _regressor(path: Optional[str]):
    if path == "oracle":
        return OracleRegressor()
    if not path:
        raise ConfigError("--regressor is required (checkpoint path or 'oracle')")
    return _load(path, "pixel_regressor")


def _schedule(run, denoiser=None):
    d = run.diffusion
    steps = denoiser.train_steps if denoiser is not None else d.train_steps
    return make_schedule(steps, d.beta_lo, d.beta_hi)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _context(args, run, method: str, manifest) -> AdaptationContext:
    regressor = _regressor(args.regressor)
    denoiser = _load(args.denoiser, "denoiser")
    ctx = AdaptationContext(
        regressor=regressor,
        embedder=_load(args.embedder, "semantic_embedder"),
        disentangler=_load(args.disentangler, "disentangler"),
        denoiser=denoiser,
        guidance=_load(args.guidance, "guidance_regressor"),
        schedule=_schedule(run, denoiser) if denoiser is not None else None,
        metrics_settings=MetricsSettings.from_section(run.metrics),
    )
    if method in ("diffusion", "cg_only"):
        ctx.inversion_cache = InversionCache()
        ctx.caption_provider = make_caption_provider(args.captions, manifest)
    return ctx


def _sweep_config(args, run, method: str, manifest, weights, similarity) -> SweepConfig:
    manual = TransformParams.from_json(run.sweep.manual_params) if run.sweep.manual_params else None
    return SweepConfig(
        method=method,
        similarity_weight=similarity,
        weights=weights,
        reference=EmotionReference.parse(args.reference) if args.reference else EmotionReference(
            *run.adapt.reference),
        manifest=manifest,
        seed=run.seed,
        iters=args.iters or run.adapt.iters,
        ddim_steps=run.diffusion.ddim_steps,
        nto_scale=run.diffusion.nto_scale,
        nto_inner_steps=run.diffusion.nto_inner_steps,
        nto_lr=run.diffusion.nto_learning_rate,
        max_images=args.max_images if args.max_images is not None else run.sweep.max_images,
        workers=args.workers or settings.NUM_WORKERS,
        manual_params=manual,
    )


# =========================================================================
# VERBS
# =========================================================================

def cmd_make_corpus(args, run) -> int:
    path = write_shapes_corpus(_out(args), args.n, args.size, run.seed)
    print(f"✅ Wrote {args.n} synthetic images, manifest: {path}")
    return 0


def cmd_train_regressor(args, run) -> int:
    m = _manifest(args.manifest)
    overrides = {"epochs": args.epochs} if args.epochs else {}
    model = train_pixel_regressor(m, TrainConfig.from_section(run.train, run.seed, **overrides), verbose=True)
    path = save_checkpoint(model, _out(args) / "regressor.pt", run.seed)
    print(f"✅ Regressor saved to {path} (val MAE v={model.metrics['valence_mae']:.4f} "
          f"a={model.metrics['arousal_mae']:.4f})")
    return 0


def cmd_train_guidance(args, run) -> int:
    m = _manifest(args.manifest)
    denoiser = _load(args.denoiser, "denoiser")
    if denoiser is None:
        raise ConfigError("--denoiser is required")
    overrides = {"epochs": args.epochs} if args.epochs else {}
    cfg = TrainConfig.from_section(run.train, run.seed, augment_flip=False, **overrides)
    model = train_guidance_regressor(m, denoiser, _schedule(run, denoiser), cfg, timestep=args.timestep,
                                     verbose=True)
    path = save_checkpoint(model, _out(args) / "guidance.pt", run.seed)
    print(f"✅ Guidance regressor saved to {path} (val MAE v={model.metrics['valence_mae']:.4f} "
          f"a={model.metrics['arousal_mae']:.4f})")
    return 0


def cmd_train_embedder(args, run) -> int:
    m = _manifest(args.manifest)
    cfg = EmbedderTrainConfig(seed=run.seed, **({"epochs": args.epochs} if args.epochs else {}))
    model = train_autoencoder_embedder(m.load_images(), cfg, verbose=True)
    path = save_checkpoint(model, _out(args) / "embedder.pt", run.seed)
    print(f"✅ Embedder saved to {path} (final loss {model.metrics['loss_trace'][-1]:.5f})")
    return 0


def cmd_train_disentangler(args, run) -> int:
    m = _manifest(args.manifest)
    cfg = DisentanglerTrainConfig(seed=run.seed, **({"epochs": args.epochs} if args.epochs else {}))
    model = train_disentangler(m, cfg, verbose=True)
    path = save_checkpoint(model, _out(args) / "disentangler.pt", run.seed)
    print(f"✅ Disentangler saved to {path} (val PSNR {model.metrics['val_psnr']:.2f} dB, "
          f"swap FID {model.metrics['style_swap_fid']:.4f})")
    return 0


def cmd_train_denoiser(args, run) -> int:
    m = _manifest(args.manifest)
    cfg = DenoiserTrainConfig(seed=run.seed, **({"epochs": args.epochs} if args.epochs else {}))
    model = train_tiny_denoiser(m, _schedule(run), cfg, verbose=True)
    path = save_checkpoint(model, _out(args) / "denoiser.pt", run.seed)
    print(f"✅ Denoiser saved to {path} (eval loss {model.metrics['initial_loss']:.4f} -> "
          f"{model.metrics['final_loss']:.4f})")
    return 0


def _weights(args, run, presets):
    if args.preset:
        if args.preset not in presets:
            raise ConfigError(f"unknown preset '{args.preset}' (expected one of {', '.join(presets)})")
        return presets[args.preset]
    w1 = args.w1 if args.w1 is not None else run.adapt.w1
    w2 = args.w2 if args.w2 is not None else run.adapt.w2
    return w1, w2


def _caption(args) -> Optional[str]:
    if not args.caption_file:
        return args.caption
    path = Path(args.caption_file)
    if not path.is_file():
        raise ConfigError(f"caption file not found: {path}")
    return path.read_text(encoding="utf-8").strip() or None


def cmd_adapt(args, run) -> int:
    img = load_image(args.image)
    caption = _caption(args)
    ref = EmotionReference.parse(args.reference) if args.reference else EmotionReference(*run.adapt.reference)
    method = args.method or run.adapt.method
    regressor = _regressor(args.regressor) if args.regressor or method != "manual" else None
    iters = args.iters or run.adapt.iters

    if method == "parametric":
        w1, w2 = _weights(args, run, PARAMETRIC_PRESETS)
        embedder = _load(args.embedder, "semantic_embedder")
        result = optimize_params(img, ref, regressor, embedder, w1, w2, iters=iters, seed=run.seed,
                                 lr=run.adapt.learning_rate)
    elif method == "style":
        w1, w2 = _weights(args, run, STYLE_PRESETS)
        result = optimize_style(img, ref, regressor, _load(args.disentangler, "disentangler"), w1, w2,
                                iters=iters, seed=run.seed, lr=run.adapt.learning_rate)
    elif method in ("diffusion", "cg_only"):
        denoiser = _load(args.denoiser, "denoiser")
        guidance = _load(args.guidance, "guidance_regressor")
        if denoiser is None or guidance is None:
            raise ConfigError(f"{method} needs --denoiser and --guidance")
        d = run.diffusion
        schedule = _schedule(run, denoiser)
        scale = args.w2 if args.w2 is not None else d.guidance_scale
        if method == "diffusion":
            cfg = GuidanceConfig(args.w1 if args.w1 is not None else d.cfg_scale, scale, ref)
            result = adapt_image_diffusion(img, caption, ref, cfg, denoiser, guidance, schedule,
                                           regressor=regressor, steps=d.ddim_steps, nto_scale=d.nto_scale,
                                           inner_steps=d.nto_inner_steps, nto_lr=d.nto_learning_rate,
                                           cache=InversionCache(), seed=run.seed)
        else:
            result = adapt_image_cg_only(img, ref, scale, denoiser, guidance, schedule, regressor=regressor,
                                         steps=d.ddim_steps, cache=InversionCache(), seed=run.seed)
    elif method == "manual":
        if not args.params:
            raise ConfigError("manual adaptation needs --params <TransformParams JSON>")
        params = TransformParams.from_json(args.params)
        result = manual_adapt(img, params, regressor, ref)
    else:
        raise ConfigError(f"unknown adaptation method '{method}'")

    png, sidecar = write_adaptation(result, _out(args) / f"{Path(args.image).stem}_{method}.png")
    status = "⚠️" if result.aborted else "✅"
    after = result.emotion_after.as_tuple() if result.emotion_after else None
    print(f"{status} {method} adaptation written to {png} (sidecar {sidecar.name}), emotion after: {after}")
    return 0


def cmd_metrics(args, run) -> int:
    m = _manifest(args.manifest)
    images = m.load_images()
    ms = MetricsSettings.from_section(run.metrics)
    corpus = CorpusStats.from_images(images, ms.wavelet, ms.wavelet_levels)
    extractor = RegressorFeatureExtractor(_load(args.regressor, "pixel_regressor")) if args.regressor else None
    reports = [report(img, corpus, extractor, e.image_path, ms) for img, e in zip(images, m.entries)]
    out = Path(args.out)
    path = out if out.suffix == ".csv" else _out(args) / "metrics.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    report_frame(reports).to_csv(path, index=False, float_format="%.10g")
    extractor_name = extractor.describe() if extractor is not None else "gabor (default)"
    print(f"✅ Metrics for {len(reports)} images written to {path} [{ms.describe()}; symmetry: {extractor_name}]")
    return 0


def _run_sweeps(args, run, runner, label: str) -> int:
    m = _manifest(args.manifest)
    methods = args.methods or run.sweep.methods
    incomplete = []
    for method in methods:
        if args.weights:
            weights = args.weights
        elif label == "bidirectional":
            weights = [run.adapt.w2 if method in ("parametric", "style") else run.diffusion.guidance_scale]
        elif method in ("diffusion", "cg_only"):
            weights = run.sweep.guidance_weights
        else:
            weights = run.sweep.adaptation_weights
        if args.similarity is not None:
            similarity = args.similarity
        elif method in ("parametric", "style"):
            similarity = run.sweep.similarity_weight
        elif method == "diffusion":
            similarity = run.diffusion.cfg_scale
        else:
            similarity = None
        cfg = _sweep_config(args, run, method, m, weights, similarity)
        result = runner(cfg, _context(args, run, method, m), out_dir=_out(args))
        if result.complete:
            print(f"✅ {label} {method}: {len(result.summary)} rows")
        else:
            failed = int(result.summary["n_failed"].sum())
            print(f"⚠️ {label} {method}: {failed} image job(s) failed")
            incomplete.append(method)
    if incomplete:
        print(f"❌ Incomplete rows for: {', '.join(incomplete)}")
        return 1
    return 0


def cmd_sweep(args, run) -> int:
    return _run_sweeps(args, run, run_weight_sweep, "sweep")


def cmd_bidirectional(args, run) -> int:
    return _run_sweeps(args, run, run_bidirectional, "bidirectional")


def cmd_report(args, run) -> int:
    tables = load_report_tables(args.tables or args.out)
    if not tables:
        raise ConfigError(f"no sweep_*.csv or bidirectional_*.csv tables in {args.tables or args.out}")
    bundle = render_report(tables, _out(args) / "report")
    print(f"✅ Report: {len(bundle.figures)} figure(s), HTML {bundle.html}")
    return 0


# =========================================================================
# PARSER
# =========================================================================

def _add_models(p: argparse.ArgumentParser) -> None:
    p.add_argument("--regressor", help="pixel regressor checkpoint, or 'oracle'")
    p.add_argument("--embedder", help="semantic embedder checkpoint")
    p.add_argument("--disentangler", help="disentangler checkpoint")
    p.add_argument("--denoiser", help="denoiser checkpoint")
    p.add_argument("--guidance", help="guidance regressor checkpoint")


def _add_globals(p: argparse.ArgumentParser, suppress: bool = False) -> None:
    """Global flags. Verbs repeat them with SUPPRESS defaults so they may follow the verb too."""
    if suppress:
        defaults = dict.fromkeys(("seed", "config", "out", "log_level"), argparse.SUPPRESS)
    else:
        defaults = {"seed": None, "config": None, "out": "out", "log_level": "INFO"}
    p.add_argument("--seed", type=int, default=defaults["seed"], help="global seed (overrides the config)")
    p.add_argument("--config", default=defaults["config"], help="run configuration JSON (see CONFIG.md)")
    p.add_argument("--out", default=defaults["out"], help="output directory (metrics: a .csv path is also accepted)")
    p.add_argument("--log-level", default=defaults["log_level"], choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="affectctl", description="Emotion-regulating image adaptation toolkit")
    _add_globals(parser)
    common = argparse.ArgumentParser(add_help=False)
    _add_globals(common, suppress=True)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("make-corpus", help="write a synthetic shapes corpus", parents=[common])
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--size", type=int, default=32)
    p.set_defaults(func=cmd_make_corpus)

    for verb, func in (("train-regressor", cmd_train_regressor), ("train-embedder", cmd_train_embedder),
                       ("train-disentangler", cmd_train_disentangler), ("train-denoiser", cmd_train_denoiser)):
        p = sub.add_parser(verb, parents=[common])
        p.add_argument("--manifest", required=True)
        p.add_argument("--epochs", type=int, default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("train-guidance", parents=[common])
    p.add_argument("--manifest", required=True)
    p.add_argument("--denoiser", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--timestep", type=int, default=None, help="fixed noise level instead of t ~ U{1..T}")
    p.set_defaults(func=cmd_train_guidance)

    p = sub.add_parser("adapt", parents=[common])
    p.add_argument("--image", required=True)
    p.add_argument("--method", choices=["parametric", "style", "diffusion", "cg_only", "manual"])
    p.add_argument("--reference", "--ref", dest="reference", help="'valence,arousal' (default from config: 0.5,0)")
    p.add_argument("--w1", "--cfg-scale", dest="w1", type=float, help="similarity weight (CFG scale for diffusion)")
    p.add_argument("--w2", "--guidance-scale", dest="w2", type=float,
                   help="emotion weight (guidance scale for diffusion)")
    p.add_argument("--preset", help="named weight preset (behavioral_study, bidirectional)")
    p.add_argument("--iters", type=int)
    captions = p.add_mutually_exclusive_group()
    captions.add_argument("--caption", help="caption for text-conditioned diffusion")
    captions.add_argument("--caption-file", help="text file whose contents are the caption")
    p.add_argument("--params", help="TransformParams JSON for the manual method")
    _add_models(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("metrics", parents=[common])
    p.add_argument("--manifest", required=True)
    p.add_argument("--regressor", help="use the regressor's early conv blocks for symmetry")
    p.set_defaults(func=cmd_metrics)

    for verb, func in (("sweep", cmd_sweep), ("bidirectional", cmd_bidirectional)):
        p = sub.add_parser(verb, parents=[common])
        p.add_argument("--manifest", required=True)
        p.add_argument("--methods", nargs="+", choices=list(METHODS))
        p.add_argument("--weights", type=float, nargs="+")
        p.add_argument("--similarity", type=float, help="fixed similarity weight (CFG scale for diffusion)")
        p.add_argument("--reference", "--ref", dest="reference", help="'valence,arousal'")
        p.add_argument("--iters", type=int)
        p.add_argument("--max-images", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--captions", default="manifest", choices=["manifest", "http"])
        _add_models(p)
        p.set_defaults(func=func)

    p = sub.add_parser("report", parents=[common])
    p.add_argument("--tables", help="directory holding the CSV tables (default: --out)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    try:
        run = settings.load_config(args.config)
        if args.seed is not None:
            run.seed = args.seed
        return args.func(args, run)
    except AffectError as exc:
        print(f"❌ {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
