"""Benchmarks: manifests, batch runs, model reports and agreement with human ratings."""

import asyncio
import csv
import io
import json
import logging
import math
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr
from pydantic import ValidationError as PydanticValidationError
from scipy import stats

from repaint.backend import Backends
from repaint.core import ReferenceImage, RunConfig
from repaint.errors import (
    AggregateError,
    InsufficientData,
    ManifestError,
    RepaintError,
    StoreError,
    ValidationError,
)
from repaint.imaging import load_reference
from repaint.iterate import Candidate, load_iteration, run_regeneration
from repaint.prompting import template_digests
from repaint.score import ScoreVector, judge_mean, judge_text_image, normalize_judge
from repaint.store import RunStore, make_run_id

# Configure logger
logger = logging.getLogger(__name__)

METRICS = ("clip_pct", "dino_pct", "judge_content", "judge_perceptual")
JUDGE_NORMALIZATION = "judge scores normalized as (score - 1) / 4"
DEGRADED_FAILURE_SHARE = 0.5
HUMAN_COLUMNS = ("model_id", "sample_id", "annotator_id", "content", "perceptual")


class ManifestKind(str, Enum):
    STYLE_DIVERSE = "StyleDiverse"
    CONTENT_DIVERSE = "ContentDiverse"
    CUSTOM = "Custom"


class BenchmarkSample(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str = ""
    image: str
    category: str
    caption: str | None = None


class BenchmarkManifest(BaseModel):
    """A named set of reference images with category labels.

    Image paths are relative to the manifest file's directory.
    """

    model_config = ConfigDict(frozen=True)

    name: str
    kind: ManifestKind = ManifestKind.CUSTOM
    categories: tuple[str, ...] = ()
    samples: tuple[BenchmarkSample, ...] = ()
    _root: Path = PrivateAttr(default=Path("."))

    def image_path(self, sample: BenchmarkSample) -> Path:
        return self._root / sample.image

    def reference(self, sample: BenchmarkSample) -> ReferenceImage:
        return load_reference(self.image_path(sample), sample.category, sample.caption)

    def histogram(self) -> dict[str, int]:
        return category_histogram(self)


def category_histogram(manifest: BenchmarkManifest) -> dict[str, int]:
    """Sample count per category, in vocabulary order."""
    counts = {c: 0 for c in manifest.categories}
    for sample in manifest.samples:
        counts[sample.category] = counts.get(sample.category, 0) + 1
    return counts


def load_manifest(path: str | Path) -> BenchmarkManifest:
    """Load and validate a manifest JSON file.

    Raises:
        ManifestError: Unreadable or malformed file, empty sample list, unknown
            category, duplicate sample ids, or missing image files (all listed)
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ManifestError(f"manifest {path} must be a JSON object")

    samples = []
    for raw in data.get("samples") or []:
        if isinstance(raw, dict) and not raw.get("id") and raw.get("image"):
            raw = {**raw, "id": Path(str(raw["image"])).stem}
        samples.append(raw)
    data = {**data, "samples": samples}
    if not data.get("categories"):
        if data.get("kind", ManifestKind.CUSTOM.value) != ManifestKind.CUSTOM.value:
            raise ManifestError(f"manifest {path} must declare its categories")
        data["categories"] = sorted(
            {s.get("category") for s in samples if isinstance(s, dict)} - {None}
        )
    try:
        manifest = BenchmarkManifest.model_validate(data)
    except PydanticValidationError as e:
        raise ManifestError(f"manifest {path} is malformed: {e}") from e

    if not manifest.samples:
        raise ManifestError(f"manifest {path} has no samples")
    vocabulary = set(manifest.categories)
    unknown = sorted({s.category for s in manifest.samples} - vocabulary)
    if unknown:
        raise ManifestError(f"manifest {path} uses unknown categories: {unknown}")
    ids = [s.id for s in manifest.samples]
    duplicates = sorted({i for i in ids if ids.count(i) > 1})
    if duplicates:
        raise ManifestError(f"manifest {path} repeats sample ids: {duplicates}")

    manifest._root = path.parent
    missing = [
        str(manifest.image_path(s))
        for s in manifest.samples
        if not manifest.image_path(s).is_file()
    ]
    if missing:
        raise ManifestError(
            f"manifest {path} references {len(missing)} missing images", missing
        )
    logger.info(
        f"Loaded manifest '{manifest.name}' ({manifest.kind.value}): "
        f"{len(manifest.samples)} samples, {len(manifest.categories)} categories"
    )
    return manifest


def write_histogram(manifest: BenchmarkManifest, path: str | Path) -> Path:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["category", "count"])
    for category, count in category_histogram(manifest).items():
        writer.writerow([category, count])
    return _write_text(Path(path), buffer.getvalue())


class SampleOutcome(BaseModel):
    """Per-sample result of a benchmark run, as persisted in ``scores.json``."""

    model_config = ConfigDict(frozen=True)

    sample_id: str
    category: str
    ok: bool
    scores: ScoreVector | None = None
    initial_composite: float | None = None
    best_composite: float | None = None
    reference_id: str | None = None
    direct_judge: float | None = Field(default=None, ge=0.0, le=1.0)
    error: str | None = None


class BenchmarkRun(BaseModel):
    model_config = ConfigDict(frozen=True)

    run_id: str
    manifest: str
    model_id: str
    outcomes: tuple[SampleOutcome, ...]
    degraded: bool = False
    provenance: dict[str, Any] = Field(default_factory=dict)

    @property
    def failures(self) -> int:
        return sum(1 for o in self.outcomes if not o.ok)


def _stored_final(store: RunStore) -> Candidate | None:
    """Final candidate of a finished regeneration, image bytes included."""
    data = store.read_json("result.json")
    if data is None:
        return None
    record = load_iteration(store, len(data["iterations"]))
    return record.selected_candidate() if record is not None else None


async def _judge_final_prompt(
    backends: Backends, sample_id: str, final: Candidate | None
) -> float | None:
    if final is None or final.image is None:
        logger.warning(f"Sample {sample_id} has no final image for the direct judge")
        return None
    result = await judge_text_image(backends, final.prompt.text, final.image)
    if result.failed:
        return None
    return judge_mean(result.content, result.perceptual)


async def _run_sample(
    manifest: BenchmarkManifest,
    sample: BenchmarkSample,
    config: RunConfig,
    backends: Backends,
    store: RunStore,
    limiter: asyncio.Semaphore,
    direct_judge: bool = False,
) -> SampleOutcome:
    stored = store.read_json("scores.json")
    if stored is not None:
        logger.info(f"Sample {sample.id} already complete, loading")
        outcome = SampleOutcome.model_validate(stored)
        if direct_judge and outcome.ok and outcome.direct_judge is None:
            async with limiter:
                value = await _judge_final_prompt(
                    backends, sample.id, _stored_final(store)
                )
            outcome = outcome.model_copy(update={"direct_judge": value})
            store.write_json("scores.json", outcome)
        return outcome
    async with limiter:
        try:
            image = manifest.reference(sample)
            result = await run_regeneration(
                backends, image, config, store, run_id=sample.id
            )
        except RepaintError as e:
            logger.error(f"Sample {sample.id} failed: {e}")
            return SampleOutcome(
                sample_id=sample.id,
                category=sample.category,
                ok=False,
                error=f"{type(e).__name__}: {e}",
            )
        direct = None
        if direct_judge:
            direct = await _judge_final_prompt(backends, sample.id, result.final)
    first = result.iterations[0].selected_candidate().scores
    outcome = SampleOutcome(
        sample_id=sample.id,
        category=sample.category,
        ok=True,
        scores=result.final_scores,
        initial_composite=first.composite if first else None,
        best_composite=result.global_best.scores.composite,
        reference_id=result.reference_id,
        direct_judge=direct,
    )
    store.write_json("scores.json", outcome)
    return outcome


async def run_benchmark(
    manifest: BenchmarkManifest,
    config: RunConfig,
    backends: Backends,
    out_dir: str | Path,
    run_id: str | None = None,
    direct_judge: bool = False,
) -> BenchmarkRun:
    """Regenerate every sample and persist per-sample scores.

    Completed samples (those with ``scores.json``) are loaded instead of rerun.
    Failing samples are recorded and the run continues; more than half failing
    marks the run degraded. With ``direct_judge`` the judge also rates each final
    prompt against its own image.
    """
    await backends.capabilities()
    run_id = run_id or make_run_id(
        manifest.name, [s.id for s in manifest.samples], config.digest()
    )
    root = RunStore(Path(out_dir) / "bench" / run_id)
    root.write_json("config.json", config.provenance())
    limiter = asyncio.Semaphore(config.concurrency)
    logger.info(f"Benchmark {run_id}: {len(manifest.samples)} samples")

    outcomes = await asyncio.gather(
        *(
            _run_sample(
                manifest,
                s,
                config,
                backends,
                root.child(f"samples/{s.id}"),
                limiter,
                direct_judge,
            )
            for s in manifest.samples
        )
    )
    failures = sum(1 for o in outcomes if not o.ok)
    degraded = failures > DEGRADED_FAILURE_SHARE * len(outcomes)
    if degraded:
        logger.warning(
            f"Benchmark {run_id} degraded: {failures} of {len(outcomes)} samples failed"
        )
    run = BenchmarkRun(
        run_id=run_id,
        manifest=manifest.name,
        model_id=config.model_id,
        outcomes=tuple(outcomes),
        degraded=degraded,
        provenance={
            "config_digest": config.digest(),
            "templates": template_digests(),
            "manifest_kind": manifest.kind.value,
        },
    )
    root.write_json("run.json", run)
    write_histogram(manifest, root.path("histogram.csv"))
    return run


def load_benchmark_run(path: str | Path) -> BenchmarkRun:
    """Load ``run.json`` from a benchmark directory."""
    data = RunStore(path).read_json("run.json")
    if data is None:
        raise StoreError(f"no run.json in {path}")
    return BenchmarkRun.model_validate(data)


class MetricMeans(BaseModel):
    """Means of the four report columns; judge columns are normalized to [0, 1]."""

    model_config = ConfigDict(frozen=True)

    count: int
    clip_pct: float
    dino_pct: float
    judge_content: float
    judge_perceptual: float

    @property
    def judge_mean(self) -> float:
        return (self.judge_content + self.judge_perceptual) / 2.0


class ModelReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    model_id: str
    overall: MetricMeans
    categories: dict[str, MetricMeans]
    failed: int = 0
    direct_judge: float | None = None
    normalization: str = JUDGE_NORMALIZATION
    provenance: dict[str, Any] = Field(default_factory=dict)

    @property
    def sample_count(self) -> int:
        return self.overall.count


def _means(scores: Sequence[ScoreVector]) -> MetricMeans:
    table = np.array(
        [
            (
                s.clip_pct,
                s.dino_pct,
                normalize_judge(s.judge_content),
                normalize_judge(s.judge_perceptual),
            )
            for s in scores
        ],
        dtype=np.float64,
    )
    means = table.mean(axis=0)
    return MetricMeans(
        count=len(scores),
        clip_pct=float(means[0]),
        dino_pct=float(means[1]),
        judge_content=float(means[2]),
        judge_perceptual=float(means[3]),
    )


def aggregate(run: BenchmarkRun, model_id: str | None = None) -> ModelReport:
    """Average the final scores of the successful samples, overall and per category.

    Raises:
        AggregateError: No sample succeeded
    """
    ok = [o for o in run.outcomes if o.ok and o.scores is not None]
    if not ok:
        raise AggregateError(f"run {run.run_id} has no successful sample")
    by_category: dict[str, list[ScoreVector]] = {}
    for outcome in ok:
        by_category.setdefault(outcome.category, []).append(outcome.scores)
    direct = [o.direct_judge for o in ok if o.direct_judge is not None]
    return ModelReport(
        model_id=model_id or run.model_id,
        overall=_means([o.scores for o in ok]),
        categories={c: _means(v) for c, v in sorted(by_category.items())},
        failed=len(run.outcomes) - len(ok),
        direct_judge=float(np.mean(direct)) if direct else None,
        provenance={**run.provenance, "run_id": run.run_id, "degraded": run.degraded},
    )


class Rating(BaseModel):
    model_config = ConfigDict(frozen=True)

    annotator_id: str
    content: int = Field(ge=1, le=5)
    perceptual: int = Field(ge=1, le=5)


class HumanScores(BaseModel):
    """Likert ratings keyed by (model id, sample id)."""

    model_config = ConfigDict(frozen=True)

    ratings: dict[tuple[str, str], tuple[Rating, ...]]

    def annotator_counts(self) -> dict[tuple[str, str], int]:
        return {pair: len(r) for pair, r in self.ratings.items()}

    def pair_means(self) -> dict[tuple[str, str], tuple[float, float]]:
        """Raw (1-5) annotator means per pair."""
        return {
            pair: (
                float(np.mean([r.content for r in rs])),
                float(np.mean([r.perceptual for r in rs])),
            )
            for pair, rs in sorted(self.ratings.items())
        }

    def normalized_pair_means(self) -> dict[tuple[str, str], tuple[float, float]]:
        return {
            pair: (normalize_judge(c), normalize_judge(p))
            for pair, (c, p) in self.pair_means().items()
        }

    def model_means(self) -> dict[str, tuple[float, float]]:
        """Per-model mean of normalized pair means (content, perceptual)."""
        grouped: dict[str, list[tuple[float, float]]] = {}
        for (model, _), values in self.normalized_pair_means().items():
            grouped.setdefault(model, []).append(values)
        return {
            model: (
                float(np.mean([v[0] for v in values])),
                float(np.mean([v[1] for v in values])),
            )
            for model, values in sorted(grouped.items())
        }


def ingest_human_study(path: str | Path) -> HumanScores:
    """Parse a human-study CSV (model_id, sample_id, annotator_id, content, perceptual).

    Raises:
        ValidationError: Naming every bad row (1-based, header is row 1)
        StoreError: The file cannot be read
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise StoreError(f"cannot read human study {path}: {e}") from e
    reader = csv.DictReader(io.StringIO(text))
    absent = [c for c in HUMAN_COLUMNS if c not in (reader.fieldnames or [])]
    if absent:
        raise ValidationError(f"human study {path} lacks columns {absent}")

    ratings: dict[tuple[str, str], list[Rating]] = {}
    errors = []
    for row_number, row in enumerate(reader, start=2):
        try:
            rating = Rating(
                annotator_id=row["annotator_id"],
                content=int(row["content"]),
                perceptual=int(row["perceptual"]),
            )
        except (TypeError, ValueError, PydanticValidationError) as e:
            message = str(e).splitlines()[0]
            errors.append(f"row {row_number}: {message}")
            continue
        ratings.setdefault((row["model_id"], row["sample_id"]), []).append(rating)
    if errors:
        raise ValidationError(
            f"human study {path} has invalid rows: " + "; ".join(errors)
        )
    if not ratings:
        raise ValidationError(f"human study {path} has no ratings")
    return HumanScores(ratings={k: tuple(v) for k, v in ratings.items()})


class RankRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    model_id: str
    model_value: float
    model_rank: float
    human_value: float
    human_rank: float


class CorrelationReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    metric: str = ""
    spearman: float
    kendall: float
    n: int
    ranks: tuple[RankRow, ...]
    normalization: str = JUDGE_NORMALIZATION


def correlate(
    model_metric: dict[str, float], human_metric: dict[str, float], metric: str = ""
) -> CorrelationReport:
    """Spearman rho (average ranks for ties) and Kendall tau between two model rankings.

    Raises:
        ValidationError: The model ids differ
        InsufficientData: Fewer than three models, or a constant column
    """
    only_harness = sorted(model_metric.keys() - human_metric.keys())
    only_human = sorted(human_metric.keys() - model_metric.keys())
    if only_harness or only_human:
        raise ValidationError(
            f"model ids differ: only harness {only_harness}, only human {only_human}"
        )
    models = sorted(model_metric)
    if len(models) < 3:
        raise InsufficientData(f"rank correlation needs 3 models, got {len(models)}")
    x = np.array([model_metric[m] for m in models], dtype=np.float64)
    y = np.array([human_metric[m] for m in models], dtype=np.float64)
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise InsufficientData("a constant column has no ranking")

    rho = float(stats.spearmanr(x, y)[0])
    tau = float(stats.kendalltau(x, y)[0])
    if math.isnan(rho) or math.isnan(tau):
        raise InsufficientData("rank correlation is undefined for this data")
    x_ranks, y_ranks = stats.rankdata(x), stats.rankdata(y)
    rows = tuple(
        RankRow(
            model_id=m,
            model_value=float(x[i]),
            model_rank=float(x_ranks[i]),
            human_value=float(y[i]),
            human_rank=float(y_ranks[i]),
        )
        for i, m in enumerate(models)
    )
    return CorrelationReport(
        metric=metric, spearman=rho, kendall=tau, n=len(models), ranks=rows
    )


def read_report_csv(path: str | Path) -> dict[str, dict[str, float]]:
    """Read a ``report.csv`` back into {model_id: {column: value}}."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise StoreError(f"cannot read report {path}: {e}") from e
    rows = {}
    for row in csv.DictReader(io.StringIO(text)):
        model = row.pop("model_id")
        rows[model] = {k: float(v) for k, v in row.items()}
    return rows


def _write_text(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise StoreError(f"cannot write {path}: {e}") from e
    return path


def render_markdown(reports: Sequence[ModelReport]) -> str:
    lines = [
        "# Image regeneration report",
        "",
        "| Model | CLIP(%) | DINO(%) | GPT4-con | GPT4-per | Samples | Failed |",
        "| --- | ---: | ---: | ---: | ---: | ---: | ---: |",
    ]
    for r in reports:
        m = r.overall
        lines.append(
            f"| {r.model_id} | {m.clip_pct:.2f} | {m.dino_pct:.2f} | "
            f"{m.judge_content:.4f} | {m.judge_perceptual:.4f} | "
            f"{m.count} | {r.failed} |"
        )
    lines += ["", "Judge scores are normalized as (score - 1) / 4.", ""]
    return "\n".join(lines)


def _pretty_json(value: Any) -> str:
    return json.dumps(value, indent=2, sort_keys=True) + "\n"


def _fixed(m: MetricMeans) -> list[str]:
    return [
        f"{v:.6f}" for v in (m.clip_pct, m.dino_pct, m.judge_content, m.judge_perceptual)
    ]


def _csv(rows: list[list[Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerows(rows)
    return buffer.getvalue()


def emit_report(
    reports: Sequence[ModelReport],
    out_dir: str | Path,
    correlation: CorrelationReport | None = None,
) -> list[Path]:
    """Write report.md, report.csv, categories.csv and, if given, correlation.json.

    Raises:
        ValidationError: No report given
        StoreError: A file cannot be written
    """
    if not reports:
        raise ValidationError("at least one model report is required")
    out = Path(out_dir)
    header = ["model_id", "clip_pct", "dino_pct", "gpt4_con", "gpt4_per"]
    overall = [header + ["samples", "failed"]]
    categories = [["model_id", "category", "samples"] + header[1:]]
    for r in reports:
        m = r.overall
        overall.append([r.model_id] + _fixed(m) + [m.count, r.failed])
        for name, c in r.categories.items():
            categories.append([r.model_id, name, c.count] + _fixed(c))
    paths = [
        _write_text(out / "report.md", render_markdown(reports)),
        _write_text(out / "report.csv", _csv(overall)),
        _write_text(out / "categories.csv", _csv(categories)),
    ]
    if correlation is not None:
        paths.append(
            _write_text(
                out / "correlation.json",
                _pretty_json(correlation.model_dump(mode="json")),
            )
        )
    logger.info(f"Wrote {len(paths)} report files to {out}")
    return paths


class EffectivenessRow(BaseModel):
    """Judge means of one model in [0, 1]: text-image, image-image and human."""

    model_config = ConfigDict(frozen=True)

    model_id: str
    direct_judge: float
    regeneration: float
    user_study: float | None = None


class EffectivenessReport(BaseModel):
    """Direct text-image judging against image regeneration, with human agreement.

    ``spread`` is the max-min range of each column across models; ``agreement``
    holds Spearman rho of each judge column against the user study.
    """

    model_config = ConfigDict(frozen=True)

    rows: tuple[EffectivenessRow, ...]
    spread: dict[str, float]
    agreement: dict[str, float] = Field(default_factory=dict)
    normalization: str = JUDGE_NORMALIZATION


def compare_judging(
    reports: Sequence[ModelReport],
    human_means: dict[str, tuple[float, float]] | None = None,
) -> EffectivenessReport:
    """Set each model's direct judge mean beside its regeneration judge mean.

    ``human_means`` maps model ids to normalized (content, perceptual) means, as
    returned by ``HumanScores.model_means``.

    Raises:
        ValidationError: No report given
        AggregateError: A report has no direct judge scores
    """
    if not reports:
        raise ValidationError("at least one model report is required")
    human_means = human_means or {}
    rows = []
    for r in reports:
        if r.direct_judge is None:
            raise AggregateError(
                f"model {r.model_id} has no direct judge scores; run bench --direct-judge"
            )
        human = human_means.get(r.model_id)
        rows.append(
            EffectivenessRow(
                model_id=r.model_id,
                direct_judge=r.direct_judge,
                regeneration=r.overall.judge_mean,
                user_study=float(np.mean(human)) if human is not None else None,
            )
        )
    spread = {
        column: float(np.ptp([getattr(row, column) for row in rows]))
        for column in ("direct_judge", "regeneration")
    }
    agreement: dict[str, float] = {}
    rated = [row for row in rows if row.user_study is not None]
    if len(rated) == len(rows):
        spread["user_study"] = float(np.ptp([row.user_study for row in rows]))
        users = {row.model_id: row.user_study for row in rows}
        for column in ("direct_judge", "regeneration"):
            try:
                agreement[column] = correlate(
                    {row.model_id: getattr(row, column) for row in rows}, users, column
                ).spearman
            except InsufficientData as e:
                logger.info(f"No agreement for {column}: {e}")
    return EffectivenessReport(rows=tuple(rows), spread=spread, agreement=agreement)


def _cell(value: float | None) -> str:
    return "-" if value is None else f"{value:.4f}"


def render_effectiveness(report: EffectivenessReport) -> str:
    lines = [
        "# Regeneration effectiveness",
        "",
        "| Model | Direct GPT4v | Image Regeneration | User study |",
        "| --- | ---: | ---: | ---: |",
    ]
    for row in report.rows:
        lines.append(
            f"| {row.model_id} | {row.direct_judge:.4f} | {row.regeneration:.4f} | "
            f"{_cell(row.user_study)} |"
        )
    spread = report.spread
    lines.append(
        f"| Spread | {spread['direct_judge']:.4f} | {spread['regeneration']:.4f} | "
        f"{_cell(spread.get('user_study'))} |"
    )
    lines += ["", "Each cell is the mean of the normalized content and perceptual scores."]
    if report.agreement:
        lines.append(
            "Spearman rho against the user study: "
            + ", ".join(f"{k} {v:.4f}" for k, v in sorted(report.agreement.items()))
            + "."
        )
    lines.append("")
    return "\n".join(lines)


def emit_effectiveness(report: EffectivenessReport, out_dir: str | Path) -> list[Path]:
    """Write effectiveness.md and effectiveness.csv."""
    out = Path(out_dir)
    rows: list[list[Any]] = [["model_id", "direct_judge", "regeneration", "user_study"]]
    for row in report.rows:
        user = "" if row.user_study is None else f"{row.user_study:.6f}"
        rows.append(
            [row.model_id, f"{row.direct_judge:.6f}", f"{row.regeneration:.6f}", user]
        )
    paths = [
        _write_text(out / "effectiveness.md", render_effectiveness(report)),
        _write_text(out / "effectiveness.csv", _csv(rows)),
    ]
    logger.info(f"Wrote the judging comparison of {len(report.rows)} models to {out}")
    return paths


class ModeMetrics(BaseModel):
    """Report columns of one initial-prompt mode; ``gpt4v_pct`` is 100 x judge mean."""

    model_config = ConfigDict(frozen=True)

    mode: str
    clip_pct: float
    dino_pct: float
    gpt4v_pct: float
    initial_composite: float
    final_composite: float
    samples: int


def mode_metrics(run: BenchmarkRun, mode: str) -> ModeMetrics:
    """Average the final scores of a run made in one prompt mode.

    Raises:
        AggregateError: No sample succeeded
    """
    ok = [o for o in run.outcomes if o.ok and o.initial_composite is not None]
    if not ok:
        raise AggregateError(f"no successful sample in prompt mode '{mode}'")
    means = _means([o.scores for o in ok])
    return ModeMetrics(
        mode=mode,
        clip_pct=means.clip_pct,
        dino_pct=means.dino_pct,
        gpt4v_pct=100.0 * means.judge_mean,
        initial_composite=float(np.mean([o.initial_composite for o in ok])),
        final_composite=float(np.mean([o.scores.composite for o in ok])),
        samples=len(ok),
    )


class PromptModeComparison(BaseModel):
    """Per-mode report columns of the IUT-based and direct initial prompts."""

    model_config = ConfigDict(frozen=True)

    model_id: str
    modes: tuple[ModeMetrics, ...]

    def mode(self, name: str) -> ModeMetrics:
        return next(m for m in self.modes if m.mode == name)

    @property
    def initial(self) -> dict[str, float]:
        return {m.mode: m.initial_composite for m in self.modes}

    @property
    def final(self) -> dict[str, float]:
        return {m.mode: m.final_composite for m in self.modes}

    @property
    def samples(self) -> int:
        return min(m.samples for m in self.modes)


MODE_LABELS = {"direct": "Direct", "iut": "IUT"}


def render_ablation(comparison: PromptModeComparison) -> str:
    lines = [
        "# Initial prompt ablation",
        "",
        "| Model | Method | CLIP(%) | DINO(%) | GPT4v(%) | Samples |",
        "| --- | --- | ---: | ---: | ---: | ---: |",
    ]
    base = comparison.modes[0]
    for m in comparison.modes:
        cells = [f"{m.clip_pct:.2f}", f"{m.dino_pct:.2f}", f"{m.gpt4v_pct:.1f}"]
        if m is not base:
            cells[0] += f" ({m.clip_pct - base.clip_pct:+.2f})"
            cells[1] += f" ({m.dino_pct - base.dino_pct:+.2f})"
            cells[2] += f" ({m.gpt4v_pct - base.gpt4v_pct:+.1f})"
        label = MODE_LABELS.get(m.mode, m.mode)
        lines.append(
            f"| {comparison.model_id} | {label} | " + " | ".join(cells) + f" | {m.samples} |"
        )
    lines += ["", "GPT4v(%) is 100 times the mean normalized judge score.", ""]
    return "\n".join(lines)


def emit_ablation(comparison: PromptModeComparison, out_dir: str | Path) -> list[Path]:
    """Write ablation.md and ablation.csv."""
    out = Path(out_dir)
    rows: list[list[Any]] = [
        ["model_id", "method", "clip_pct", "dino_pct", "gpt4v_pct", "samples"]
    ]
    for m in comparison.modes:
        rows.append(
            [
                comparison.model_id,
                m.mode,
                f"{m.clip_pct:.6f}",
                f"{m.dino_pct:.6f}",
                f"{m.gpt4v_pct:.6f}",
                m.samples,
            ]
        )
    paths = [
        _write_text(out / "ablation.md", render_ablation(comparison)),
        _write_text(out / "ablation.csv", _csv(rows)),
    ]
    logger.info(f"Wrote the prompt mode ablation to {out}")
    return paths


async def compare_prompt_modes(
    manifest: BenchmarkManifest,
    config: RunConfig,
    make_backends: Callable[[RunConfig], Backends],
    out_dir: str | Path,
) -> PromptModeComparison:
    """Run the manifest with direct and with IUT-based initial prompts.

    Writes ``ablation.md`` and ``ablation.csv`` to ``out_dir``; the direct mode
    is the baseline the IUT row's differences refer to.
    """
    modes = []
    for mode in ("direct", "iut"):
        mode_config = config.model_copy(update={"prompt_mode": mode})
        backends = make_backends(mode_config)
        try:
            run = await run_benchmark(manifest, mode_config, backends, out_dir)
        finally:
            backends.log_stats()
            await backends.aclose()
        metrics = mode_metrics(run, mode)
        logger.info(
            f"Prompt mode {mode}: initial composite {metrics.initial_composite:.4f}, "
            f"final {metrics.final_composite:.4f}, GPT4v {metrics.gpt4v_pct:.1f}%"
        )
        modes.append(metrics)
    comparison = PromptModeComparison(model_id=config.model_id, modes=tuple(modes))
    emit_ablation(comparison, out_dir)
    return comparison
