"""
EVAL HARNESS - Weight sweeps, bidirectional references, OLS fits and reports
============================================================================
run_weight_sweep   one row per adaptation weight: mean predicted (valence,
                   arousal), distance to the reference, L1 reconstruction,
                   FID/KID against the originals and every property metric
run_bidirectional  relative references (pred + offset) for the parametric and
                   style adapters; the two absolute extremes plus the
                   original for the diffusion adapters
fit_ols            closed-form least squares with a two-sided t-test on the slope
render_report      CSV tables + static (matplotlib) and interactive (plotly) plots

Per-image jobs run in a thread pool and are reduced in input order, so a
table depends only on its configuration and seed.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import plotly.graph_objects as go  # noqa: E402
from plotly.subplots import make_subplots  # noqa: E402
from scipy import stats  # noqa: E402

from affect_regressor import PixelRegressor, predict_batch  # noqa: E402
from diff_transforms import TransformParams  # noqa: E402
from diffusion_adapter import (DEFAULT_DDIM_STEPS, NTO_INNER_STEPS, NTO_LEARNING_RATE, GuidanceConfig,  # noqa: E402
                               InversionCache, adapt_image_cg_only, adapt_image_diffusion)
from errors import AffectError, CaptionError, ConfigError, ModelNotTrainedError  # noqa: E402
from imaging import ColorSpace, DatasetManifest, EmotionReference, Image, convert_color, to_rgb  # noqa: E402
from parametric_adapter import AdaptationResult, manual_adapt, optimize_params  # noqa: E402
from property_metrics import (METRIC_NAMES, CorpusStats, GaborBank, MetricsSettings,  # noqa: E402
                              RegressorFeatureExtractor, report)
from quality_scores import compute_fid, compute_kid  # noqa: E402
from semantic_services import RegressorFeatureEmbedder, ThumbnailEmbedder, embed_images  # noqa: E402
from style_adapter import optimize_style  # noqa: E402

logger = logging.getLogger(__name__)

METHODS = ("parametric", "style", "diffusion", "cg_only", "manual", "grayscale", "original")
OPTIMIZED = ("parametric", "style")
GUIDED = ("diffusion", "cg_only")

DEFAULT_ADAPTATION_WEIGHTS = [0.1, 0.3, 0.5, 0.7, 1.0]
DEFAULT_GUIDANCE_WEIGHTS = [0.05, 0.1, 0.2, 0.3, 0.4]
DEFAULT_SIMILARITY = {"parametric": 1.0, "style": 1.0, "diffusion": 2.0, "cg_only": 0.0,
                      "manual": 0.0, "grayscale": 0.0, "original": 0.0}

BIDIRECTIONAL_OFFSETS = [-0.2, -0.1, 0.0, 0.1, 0.2]
BIDIRECTIONAL_WEIGHT = 0.2
DIFFUSION_EXTREMES = [-1.0, 1.0]

# Expert look for the manual baseline: slightly darker, flatter, softer
MANUAL_PRESET = {"exposure": -0.3, "contrast": 0.85, "sharpen_amount": 0.0, "blur_sigma": 0.6}


@dataclass
class SweepConfig:
    method: str
    similarity_weight: Optional[float] = None
    weights: Optional[List[float]] = None
    reference: EmotionReference = field(default_factory=EmotionReference)
    manifest: Optional[DatasetManifest] = None
    seed: int = 0
    iters: int = 200
    ddim_steps: int = DEFAULT_DDIM_STEPS
    nto_scale: Optional[float] = None
    nto_inner_steps: int = NTO_INNER_STEPS
    nto_lr: float = NTO_LEARNING_RATE
    max_images: Optional[int] = None
    workers: int = 1
    manual_params: Optional[TransformParams] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method '{self.method}' (expected one of {', '.join(METHODS)})")
        if self.similarity_weight is None:
            self.similarity_weight = DEFAULT_SIMILARITY[self.method]
        if self.weights is None:
            self.weights = list(DEFAULT_GUIDANCE_WEIGHTS if self.method in GUIDED else DEFAULT_ADAPTATION_WEIGHTS)
        self.weights = [float(w) for w in self.weights]
        if not self.weights:
            raise ConfigError("weight list must not be empty")
        if any(w < 0 for w in self.weights) or self.similarity_weight < 0:
            raise ConfigError("weights must be non-negative")
        if self.method == "cg_only" and self.similarity_weight != 0:
            raise ConfigError("cg_only resamples without classifier-free guidance; similarity weight must be 0")
        if self.method in OPTIMIZED and self.similarity_weight == 0 and 0.0 in self.weights:
            raise ConfigError(f"{self.method} with both weights 0 has no objective")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")


@dataclass
class AdaptationContext:
    """Trained models and shared state handed to every sweep job."""

    regressor: object
    embedder: Optional[object] = None
    disentangler: Optional[object] = None
    denoiser: Optional[object] = None
    guidance: Optional[object] = None
    schedule: Optional[object] = None
    inversion_cache: Optional[InversionCache] = None
    caption_provider: Optional[object] = None
    fid_embedder: Optional[object] = None
    symmetry_extractor: Optional[object] = None
    corpus_stats: Optional[CorpusStats] = None
    metrics_settings: MetricsSettings = field(default_factory=MetricsSettings)

    def require(self, method: str) -> None:
        if self.regressor is None or not getattr(self.regressor, "trained", False):
            raise ModelNotTrainedError("sweeps need a trained emotion regressor")
        if method == "style" and self.disentangler is None:
            raise ConfigError("style sweeps need a trained disentangler")
        if method in GUIDED and (self.denoiser is None or self.guidance is None or self.schedule is None):
            raise ConfigError(f"{method} sweeps need a denoiser, a guidance regressor and a schedule")

    def quality_embedder(self):
        if self.fid_embedder is not None:
            return self.fid_embedder
        if isinstance(self.regressor, PixelRegressor):
            return RegressorFeatureEmbedder(self.regressor)
        return ThumbnailEmbedder()

    def feature_extractor(self):
        if self.symmetry_extractor is not None:
            return self.symmetry_extractor
        if isinstance(self.regressor, PixelRegressor):
            return RegressorFeatureExtractor(self.regressor)
        return GaborBank()


@dataclass
class SweepResult:
    summary: pd.DataFrame
    per_image: pd.DataFrame
    fits: pd.DataFrame

    @property
    def complete(self) -> bool:
        return int(self.summary["n_failed"].sum()) == 0

    def write(self, out_dir: Union[str, Path], stem: str) -> List[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for suffix, table in (("", self.summary), ("_images", self.per_image), ("_fits", self.fits)):
            path = out_dir / f"{stem}{suffix}.csv"
            table.to_csv(path, index=False, float_format="%.10g")
            paths.append(path)
        return paths


@dataclass
class OLSFit:
    slope: float
    intercept: float
    p_value: float
    n: int
    stderr: float = 0.0

    def __post_init__(self):
        if self.n < 3:
            raise ValueError("OLS fit needs at least 3 points")
        if not 0.0 <= self.p_value <= 1.0:
            raise ValueError(f"p_value {self.p_value} outside [0, 1]")


def fit_ols(x: Sequence[float], y: Sequence[float]) -> OLSFit:
    """y = intercept + slope * x with a two-sided t-test for slope != 0."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D arrays of equal length")
    n = x.size
    if n < 3:
        raise ValueError("OLS fit needs at least 3 points")
    x_mean, y_mean = x.mean(), y.mean()
    sxx = float(np.sum((x - x_mean) ** 2))
    if sxx == 0.0:
        raise ValueError("x has zero variance")
    slope = float(np.sum((x - x_mean) * (y - y_mean)) / sxx)
    intercept = float(y_mean - slope * x_mean)
    resid = y - (intercept + slope * x)
    dof = n - 2
    stderr = float(np.sqrt(np.sum(resid ** 2) / dof / sxx)) if dof > 0 else 0.0
    if stderr <= 1e-15 * max(1.0, abs(slope)):
        p_value = 0.0 if abs(slope) > 1e-15 else 1.0
    else:
        p_value = float(2.0 * stats.t.sf(abs(slope / stderr), dof))
    return OLSFit(slope, intercept, min(max(p_value, 0.0), 1.0), n, stderr)


# =========================================================================
# PER-IMAGE JOBS
# =========================================================================

@dataclass
class _Job:
    index: int
    path: str
    image: Image
    caption: Optional[str]
    reference: EmotionReference


def _grayscale(img: Image, ref: EmotionReference) -> AdaptationResult:
    gray = to_rgb(convert_color(to_rgb(img), ColorSpace.GRAY))
    return AdaptationResult(adapted=gray, params_or_code=None, loss_trace=[], emotion_before=None,
                            emotion_after=None, method="grayscale", reference=ref)


def _original(img: Image, ref: EmotionReference) -> AdaptationResult:
    return AdaptationResult(adapted=to_rgb(img), params_or_code=None, loss_trace=[], emotion_before=None,
                            emotion_after=None, method="original", reference=ref)


def adapt_with(ctx: AdaptationContext, cfg: SweepConfig, job: _Job, weight: float) -> AdaptationResult:
    """Run one adapter on one image at one weight."""
    m, ref, w1 = cfg.method, job.reference, cfg.similarity_weight
    if m == "parametric":
        return optimize_params(job.image, ref, ctx.regressor, ctx.embedder, w1, weight,
                               iters=cfg.iters, seed=cfg.seed)
    if m == "style":
        return optimize_style(job.image, ref, ctx.regressor, ctx.disentangler, w1, weight,
                              iters=cfg.iters, seed=cfg.seed)
    if m == "diffusion":
        return adapt_image_diffusion(job.image, job.caption, ref, GuidanceConfig(w1, weight, ref), ctx.denoiser,
                                     ctx.guidance, ctx.schedule, regressor=ctx.regressor, steps=cfg.ddim_steps,
                                     nto_scale=cfg.nto_scale, inner_steps=cfg.nto_inner_steps, nto_lr=cfg.nto_lr,
                                     cache=ctx.inversion_cache, seed=cfg.seed)
    if m == "cg_only":
        return adapt_image_cg_only(job.image, ref, weight, ctx.denoiser, ctx.guidance, ctx.schedule,
                                   regressor=ctx.regressor, steps=cfg.ddim_steps, cache=ctx.inversion_cache,
                                   seed=cfg.seed)
    if m == "manual":
        params = cfg.manual_params or TransformParams.from_dict(MANUAL_PRESET)
        return manual_adapt(job.image, params, ctx.regressor, ref)
    if m == "grayscale":
        return _grayscale(job.image, ref)
    return _original(job.image, ref)


def _run_jobs(ctx: AdaptationContext, cfg: SweepConfig, jobs: Sequence[_Job],
              weight: float) -> List[Optional[AdaptationResult]]:
    def work(job: _Job) -> Optional[AdaptationResult]:
        try:
            return adapt_with(ctx, cfg, job, weight)
        except AffectError as exc:
            logger.error(f"{cfg.method} failed on {job.path} (weight {weight:g}): {exc}")
            return None

    if cfg.workers == 1:
        return [work(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        futures = [pool.submit(work, j) for j in jobs]
        return [f.result() for f in futures]


def _jobs_from_manifest(ctx: AdaptationContext, cfg: SweepConfig) -> List[_Job]:
    if cfg.manifest is None or len(cfg.manifest) == 0:
        raise ConfigError("sweep needs a non-empty manifest")
    entries = list(cfg.manifest.entries)
    if cfg.max_images is not None:
        entries = entries[:cfg.max_images]
    images = cfg.manifest.subset(range(len(entries))).load_images()
    jobs = []
    for i, (entry, img) in enumerate(zip(entries, images)):
        caption = entry.caption
        if not caption and ctx.caption_provider is not None and cfg.method == "diffusion":
            try:
                caption = ctx.caption_provider.caption(entry.image_path)
            except CaptionError as exc:
                logger.warning(f"no caption for {entry.image_path}: {exc}")
        jobs.append(_Job(i, entry.image_path, img, caption, cfg.reference))
    return jobs


def _prepare_metrics(ctx: AdaptationContext, originals: Sequence[Image]) -> Tuple[CorpusStats, object]:
    stats_ = ctx.corpus_stats
    if stats_ is None:
        stats_ = CorpusStats.from_images(originals, ctx.metrics_settings.wavelet, ctx.metrics_settings.wavelet_levels)
    return stats_, ctx.feature_extractor()


def _image_rows(ctx: AdaptationContext, jobs: Sequence[_Job], results: Sequence[Optional[AdaptationResult]],
                corpus: CorpusStats, extractor, extra: Dict) -> List[Dict]:
    done = [(j, r) for j, r in zip(jobs, results) if r is not None]
    if not done:
        return []
    preds = predict_batch(ctx.regressor, [r.adapted for _, r in done])
    rows = []
    for (job, res), (v, a) in zip(done, preds):
        ref = res.reference
        props = report(res.adapted, corpus, extractor, job.path, ctx.metrics_settings)
        rows.append({
            **extra,
            "image": job.path,
            "reference_valence": ref.valence_ref,
            "reference_arousal": ref.arousal_ref,
            "valence": float(v),
            "arousal": float(a),
            "emotion_distance": float(np.hypot(ref.valence_ref - v, ref.arousal_ref - a)),
            "reconstruction_l1": res.reconstruction_error(job.image),
            "aborted": bool(res.aborted),
            **props.values(),
        })
    return rows


def _set_scores(ctx: AdaptationContext, adapted: Sequence[Image], originals: Sequence[Image]) -> Dict:
    embedder = ctx.quality_embedder()
    if len(adapted) < 2:
        return {"fid": float("nan"), "kid": float("nan"), "quality_embedder": embedder.describe()}
    fa = embed_images(embedder, list(adapted))
    fo = embed_images(embedder, list(originals))
    return {"fid": compute_fid(fa, fo), "kid": compute_kid(fa, fo), "quality_embedder": embedder.describe()}


def _summary_row(rows: List[Dict], n_jobs: int, scores: Dict, extra: Dict) -> Dict:
    frame = pd.DataFrame(rows)
    summary = {**extra, "n_images": len(rows), "n_failed": n_jobs - len(rows)}
    for col in ["valence", "arousal", "emotion_distance", "reconstruction_l1"] + METRIC_NAMES:
        summary[col] = float(frame[col].mean()) if len(frame) else float("nan")
    summary["n_aborted"] = int(frame["aborted"].sum()) if len(frame) else 0
    summary.update(scores)
    return summary


# =========================================================================
# SWEEPS
# =========================================================================

def _fit_rows(frame: pd.DataFrame, x_col: str, targets: Sequence[str], extra: Dict) -> pd.DataFrame:
    rows = []
    for target in targets:
        if len(frame) < 3 or frame[x_col].nunique() < 2:
            continue
        fit = fit_ols(frame[x_col].to_numpy(), frame[target].to_numpy())
        rows.append({**extra, "x": x_col, "y": target, "slope": fit.slope, "intercept": fit.intercept,
                     "p_value": fit.p_value, "stderr": fit.stderr, "n": fit.n})
    return pd.DataFrame(rows, columns=list(extra) + ["x", "y", "slope", "intercept", "p_value", "stderr", "n"])


def run_weight_sweep(cfg: SweepConfig, ctx: AdaptationContext, out_dir: Optional[Union[str, Path]] = None,
                     ) -> SweepResult:
    """Adapt every manifest image at every weight and aggregate per weight."""
    ctx.require(cfg.method)
    jobs = _jobs_from_manifest(ctx, cfg)
    originals = [j.image for j in jobs]
    corpus, extractor = _prepare_metrics(ctx, originals)
    logger.info(f"sweep {cfg.method}: {len(jobs)} images x {len(cfg.weights)} weights "
                f"(similarity {cfg.similarity_weight:g}, {cfg.workers} worker(s))")

    summaries, image_rows = [], []
    for weight in cfg.weights:
        results = _run_jobs(ctx, cfg, jobs, weight)
        extra = {"method": cfg.method, "weight": weight, "similarity_weight": cfg.similarity_weight}
        rows = _image_rows(ctx, jobs, results, corpus, extractor, extra)
        kept = [r.adapted for r in results if r is not None]
        kept_orig = [j.image for j, r in zip(jobs, results) if r is not None]
        summaries.append(_summary_row(rows, len(jobs), _set_scores(ctx, kept, kept_orig),
                                      {**extra, "seed": cfg.seed}))
        image_rows.extend(rows)
        logger.info(f"sweep {cfg.method} weight {weight:g}: distance {summaries[-1]['emotion_distance']:.4f}, "
                    f"L1 {summaries[-1]['reconstruction_l1']:.4f}")

    per_image = pd.DataFrame(image_rows)
    fits = _fit_rows(per_image, "weight", ["valence", "arousal", "emotion_distance", "reconstruction_l1"],
                     {"method": cfg.method})
    result = SweepResult(pd.DataFrame(summaries), per_image, fits)
    if out_dir is not None:
        result.write(out_dir, f"sweep_{cfg.method}")
    return result


def _relative_reference(pred: Tuple[float, float], offset: float) -> EmotionReference:
    v, a = pred
    return EmotionReference(float(np.clip(v + offset, -1.0, 1.0)), float(np.clip(a + offset, -1.0, 1.0)))


def run_bidirectional(cfg: SweepConfig, ctx: AdaptationContext, offsets: Sequence[float] = BIDIRECTIONAL_OFFSETS,
                      out_dir: Optional[Union[str, Path]] = None) -> SweepResult:
    """Push images toward references above and below their own reading.

    parametric/style: per-image reference = predicted (v, a) + offset, adapted
    with weight cfg.weights[0]. diffusion/cg_only: absolute references at
    -1 and +1 plus the unadapted original (offset 0).
    """
    if cfg.method not in OPTIMIZED + GUIDED:
        raise ConfigError(f"bidirectional runs support {', '.join(OPTIMIZED + GUIDED)}, not {cfg.method}")
    ctx.require(cfg.method)
    jobs = _jobs_from_manifest(ctx, cfg)
    originals = [j.image for j in jobs]
    corpus, extractor = _prepare_metrics(ctx, originals)
    weight = cfg.weights[0]
    baseline = predict_batch(ctx.regressor, originals)

    if cfg.method in OPTIMIZED:
        points = [(float(o), "relative") for o in offsets]
    else:
        points = [(DIFFUSION_EXTREMES[0], "absolute"), (0.0, "original"), (DIFFUSION_EXTREMES[1], "absolute")]

    summaries, image_rows = [], []
    for offset, kind in points:
        if kind == "relative":
            point_jobs = [_Job(j.index, j.path, j.image, j.caption, _relative_reference(tuple(p), offset))
                          for j, p in zip(jobs, baseline)]
            results = _run_jobs(ctx, cfg, point_jobs, weight)
        elif kind == "absolute":
            ref = EmotionReference(offset, offset)
            point_jobs = [_Job(j.index, j.path, j.image, j.caption, ref) for j in jobs]
            results = _run_jobs(ctx, cfg, point_jobs, weight)
        else:
            point_jobs = jobs
            results = [_original(j.image, j.reference) for j in jobs]
        extra = {"method": cfg.method, "offset": offset, "reference_kind": kind, "weight": weight}
        rows = _image_rows(ctx, point_jobs, results, corpus, extractor, extra)
        kept = [r.adapted for r in results if r is not None]
        kept_orig = [j.image for j, r in zip(point_jobs, results) if r is not None]
        summaries.append(_summary_row(rows, len(point_jobs), _set_scores(ctx, kept, kept_orig),
                                      {**extra, "seed": cfg.seed}))
        image_rows.extend(rows)
        logger.info(f"bidirectional {cfg.method} offset {offset:+g}: v={summaries[-1]['valence']:.4f} "
                    f"a={summaries[-1]['arousal']:.4f}")

    per_image = pd.DataFrame(image_rows)
    fits = _fit_rows(per_image, "offset", ["valence", "arousal"], {"method": cfg.method})
    result = SweepResult(pd.DataFrame(summaries), per_image, fits)
    if out_dir is not None:
        result.write(out_dir, f"bidirectional_{cfg.method}")
    return result


# =========================================================================
# REPORT
# =========================================================================

PLOT_COLUMNS = ["valence", "arousal", "emotion_distance", "reconstruction_l1", "fid", "kid"] + METRIC_NAMES


@dataclass
class ReportBundle:
    out_dir: Path
    tables: List[Path]
    figures: List[Path]
    html: Optional[Path]


def load_report_tables(report_dir: Union[str, Path]) -> Dict[str, pd.DataFrame]:
    """Summary tables (sweep_*.csv / bidirectional_*.csv) keyed by file stem."""
    report_dir = Path(report_dir)
    tables = {}
    for path in sorted(report_dir.glob("*.csv")):
        if path.stem.endswith(("_images", "_fits")):
            continue
        if path.stem.startswith(("sweep_", "bidirectional_")):
            tables[path.stem] = pd.read_csv(path)
    return tables


def _x_column(table: pd.DataFrame) -> Optional[str]:
    for col in ("weight", "offset"):
        if col in table.columns and table[col].nunique() > 1:
            return col
    return None


def _plot_table(name: str, table: pd.DataFrame, x_col: str, out_dir: Path) -> Path:
    cols = [c for c in PLOT_COLUMNS if c in table.columns]
    n_cols = 4
    n_rows = int(np.ceil(len(cols) / n_cols))
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(4 * n_cols, 3 * n_rows), squeeze=False)
    ordered = table.sort_values(x_col)
    for ax, col in zip(axes.ravel(), cols):
        ax.plot(ordered[x_col], ordered[col], marker="o")
        ax.set_title(col)
        ax.set_xlabel(x_col)
        ax.grid(True, alpha=0.3)
    for ax in axes.ravel()[len(cols):]:
        ax.axis("off")
    fig.suptitle(name)
    fig.tight_layout()
    path = out_dir / f"{name}.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def build_figure(tables: Dict[str, pd.DataFrame], columns: Sequence[str] = ("valence", "arousal",
                 "emotion_distance", "reconstruction_l1")) -> go.Figure:
    """Interactive overview: one subplot per column, one trace per table."""
    fig = make_subplots(rows=1, cols=len(columns), subplot_titles=list(columns))
    for name, table in tables.items():
        x_col = _x_column(table)
        if x_col is None:
            continue
        ordered = table.sort_values(x_col)
        for i, col in enumerate(columns, start=1):
            if col in ordered.columns:
                fig.add_trace(go.Scatter(x=ordered[x_col], y=ordered[col], mode="lines+markers", name=name,
                                         legendgroup=name, showlegend=(i == 1)), row=1, col=i)
    fig.update_layout(height=400, template="plotly_white", title="Adaptation trends")
    return fig


def render_report(tables: Dict[str, pd.DataFrame], out_dir: Union[str, Path]) -> ReportBundle:
    """Write each table as CSV plus one PNG per table and an interactive HTML overview."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written, figures = [], []
    for name, table in tables.items():
        path = out_dir / f"{name}.csv"
        table.to_csv(path, index=False, float_format="%.10g")
        written.append(path)
        x_col = _x_column(table)
        if x_col is not None:
            figures.append(_plot_table(name, table, x_col, out_dir))
        else:
            logger.warning(f"table {name} has no varying weight/offset column; no plot")
    html = None
    if figures:
        html = out_dir / "report.html"
        build_figure(tables).write_html(str(html), include_plotlyjs="cdn")
    logger.info(f"report: {len(written)} table(s), {len(figures)} figure(s) in {out_dir}")
    return ReportBundle(out_dir, written, figures, html)
