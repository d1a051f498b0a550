"""Tests for manifests, benchmark runs, reports and human-rating correlation."""

import itertools
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from repaint.bench import (
    BenchmarkRun,
    ManifestKind,
    MetricMeans,
    ModelReport,
    ModeMetrics,
    PromptModeComparison,
    SampleOutcome,
    aggregate,
    category_histogram,
    compare_judging,
    correlate,
    emit_ablation,
    emit_effectiveness,
    emit_report,
    ingest_human_study,
    load_benchmark_run,
    load_manifest,
    mode_metrics,
    read_report_csv,
    render_effectiveness,
    render_markdown,
    run_benchmark,
)
from repaint.core import ImageSettings, RunConfig
from repaint.errors import (
    AggregateError,
    InsufficientData,
    ManifestError,
    StoreError,
    ValidationError,
)
from repaint.mockworld import OBJECTS, STYLES, MockWorld, render_scene_png
from repaint.score import (
    ScoreVector,
    composite_score,
    denormalize_judge,
    normalize_judge,
)

GOLDEN = Path(__file__).parent / "golden"
WEIGHTS = (0.25, 0.25, 0.25, 0.25)
SCENE_PAIRS = list(itertools.combinations(sorted(OBJECTS), 2))


def write_manifest(root, n, categories, kind="StyleDiverse", name="bench"):
    """Write n distinct mock images and a manifest cycling through the categories."""
    styles = sorted(STYLES)
    samples = []
    for i in range(n):
        tokens = set(SCENE_PAIRS[i]) | {styles[i % len(styles)]}
        rel = f"images/img{i:03d}.png"
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / rel).write_bytes(render_scene_png(tokens))
        samples.append({"image": rel, "category": categories[i % len(categories)]})
    path = root / "manifest.json"
    path.write_text(
        json.dumps(
            {"name": name, "kind": kind, "categories": categories, "samples": samples}
        )
    )
    return path


def score(clip, dino, content, perceptual):
    normalized = (
        clip / 100,
        dino / 100,
        normalize_judge(content),
        normalize_judge(perceptual),
    )
    return ScoreVector(
        clip_pct=clip,
        dino_pct=dino,
        judge_content=content,
        judge_perceptual=perceptual,
        composite=composite_score(normalized, WEIGHTS),
    )


def make_run(scores, categories=None, failures=0, model_id="m"):
    categories = categories or ["all"] * len(scores)
    outcomes = [
        SampleOutcome(sample_id=f"s{i}", category=c, ok=True, scores=s)
        for i, (s, c) in enumerate(zip(scores, categories))
    ]
    outcomes += [
        SampleOutcome(sample_id=f"f{i}", category="all", ok=False, error="boom")
        for i in range(failures)
    ]
    return BenchmarkRun(
        run_id="run", manifest="bench", model_id=model_id, outcomes=tuple(outcomes)
    )


def table_run():
    """125 samples whose means are 93.79, 95.34, 0.77 and 0.882."""
    scores = []
    for i in range(125):
        content = 4 if i < 115 else 5
        perceptual = 4 if i < 59 else 5
        scores.append(score(93.79, 95.34, content, perceptual))
    return make_run(scores, model_id="Juggernautv9")


def test_load_style_diverse_manifest(tmp_path):
    """Test a 200-sample manifest with 10 categories."""
    categories = [f"style{i}" for i in range(10)]
    manifest = load_manifest(write_manifest(tmp_path, 200, categories))
    assert manifest.kind == ManifestKind.STYLE_DIVERSE
    assert len(manifest.samples) == 200
    assert category_histogram(manifest) == {c: 20 for c in categories}
    assert manifest.samples[0].id == "img000"


def test_load_content_diverse_manifest(tmp_path):
    """Test a 100-sample manifest with 4 categories."""
    categories = ["Human", "Animal", "Object", "Landscape"]
    path = write_manifest(tmp_path, 100, categories, kind="ContentDiverse")
    histogram = load_manifest(path).histogram()
    assert list(histogram) == categories
    assert sum(histogram.values()) == 100


def test_manifest_unknown_category(tmp_path):
    """Test that categories outside the vocabulary are rejected."""
    path = write_manifest(tmp_path, 3, ["a", "b", "c"])
    data = json.loads(path.read_text())
    data["categories"] = ["a", "b"]
    path.write_text(json.dumps(data))
    with pytest.raises(ManifestError, match="unknown categories"):
        load_manifest(path)


def test_manifest_missing_files_are_listed(tmp_path):
    """Test that every missing image is reported."""
    path = write_manifest(tmp_path, 4, ["a"])
    (tmp_path / "images" / "img001.png").unlink()
    (tmp_path / "images" / "img003.png").unlink()
    with pytest.raises(ManifestError) as info:
        load_manifest(path)
    assert [Path(m).name for m in info.value.missing] == ["img001.png", "img003.png"]


def test_manifest_structural_errors(tmp_path):
    """Test empty, duplicate and malformed manifests."""
    path = tmp_path / "m.json"
    path.write_text(json.dumps({"name": "x", "samples": []}))
    with pytest.raises(ManifestError, match="no samples"):
        load_manifest(path)

    path.write_text("{oops")
    with pytest.raises(ManifestError):
        load_manifest(path)

    manifest = write_manifest(tmp_path, 2, ["a"])
    data = json.loads(manifest.read_text())
    data["samples"][1]["id"] = data["samples"][0]["id"] = "same"
    manifest.write_text(json.dumps(data))
    with pytest.raises(ManifestError, match="repeats sample ids"):
        load_manifest(manifest)

    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "absent.json")


def test_custom_manifest_infers_categories(tmp_path):
    """Test that Custom manifests may omit the category list."""
    path = write_manifest(tmp_path, 4, ["b", "a"], kind="Custom")
    data = json.loads(path.read_text())
    del data["categories"]
    path.write_text(json.dumps(data))
    assert load_manifest(path).categories == ("a", "b")


def test_aggregate_means():
    """Test the overall mean of two samples."""
    report = aggregate(make_run([score(93.00, 95.0, 4, 5), score(94.58, 95.0, 4, 5)]))
    assert report.overall.clip_pct == pytest.approx(93.79)
    assert report.overall.judge_content == pytest.approx(0.75)
    assert report.overall.count == 2


def test_category_means_recombine():
    """Test that count-weighted category means give the overall mean."""
    rng = np.random.default_rng(1)
    scores = [
        score(float(rng.uniform(50, 100)), float(rng.uniform(50, 100)), 3, 4)
        for _ in range(30)
    ]
    categories = [["x", "y", "z"][i % 3] if i < 20 else "x" for i in range(30)]
    report = aggregate(make_run(scores, categories))
    total = sum(m.count * m.clip_pct for m in report.categories.values())
    assert total / report.overall.count == pytest.approx(report.overall.clip_pct)
    assert sum(m.count for m in report.categories.values()) == 30


def test_aggregate_skips_failures():
    """Test that failed samples are counted but not averaged."""
    report = aggregate(make_run([score(80, 80, 3, 3)], failures=2))
    assert report.failed == 2
    assert report.overall.count == 1
    with pytest.raises(AggregateError):
        aggregate(make_run([], failures=3))


def test_report_matches_golden(tmp_path):
    """Test the rendered report of a 125-sample model against the golden file."""
    report = aggregate(table_run())
    paths = emit_report([report], tmp_path)
    assert [p.name for p in paths] == ["report.md", "report.csv", "categories.csv"]
    golden = (GOLDEN / "report.md").read_text(encoding="utf-8")
    assert (tmp_path / "report.md").read_text(encoding="utf-8") == golden
    assert render_markdown([report]) == golden


def test_report_csv_roundtrip(tmp_path):
    """Test that report.csv can be read back for correlation."""
    emit_report([aggregate(table_run())], tmp_path)
    rows = read_report_csv(tmp_path / "report.csv")
    assert rows["Juggernautv9"]["clip_pct"] == pytest.approx(93.79)
    assert rows["Juggernautv9"]["gpt4_per"] == pytest.approx(0.882)
    header = (tmp_path / "categories.csv").read_text().splitlines()[0]
    assert header == "model_id,category,samples,clip_pct,dino_pct,gpt4_con,gpt4_per"


def test_report_needs_a_model(tmp_path):
    """Test that an empty report is rejected and unwritable paths raise StoreError."""
    with pytest.raises(ValidationError):
        emit_report([], tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(StoreError):
        emit_report([aggregate(table_run())], blocker / "reports")


def _human_csv(path, rows):
    lines = ["model_id,sample_id,annotator_id,content,perceptual"]
    lines += [",".join(str(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def test_ingest_human_study(tmp_path):
    """Test annotator counts and normalized means."""
    path = _human_csv(
        tmp_path / "h.csv",
        [("m1", "s1", "a1", 5, 3), ("m1", "s1", "a2", 3, 3), ("m1", "s1", "a3", 4, 3)],
    )
    humans = ingest_human_study(path)
    assert humans.annotator_counts() == {("m1", "s1"): 3}
    assert humans.pair_means()[("m1", "s1")] == (4.0, 3.0)
    assert humans.model_means() == {"m1": (0.75, 0.5)}


def test_ingest_human_study_names_bad_rows(tmp_path):
    """Test that out-of-range ratings are reported with their row numbers."""
    path = _human_csv(
        tmp_path / "h.csv",
        [("m1", "s1", "a1", 5, 3), ("m1", "s1", "a2", 7, 3), ("m1", "s2", "a1", "x", 1)],
    )
    with pytest.raises(ValidationError) as info:
        ingest_human_study(path)
    assert "row 3" in str(info.value)
    assert "row 4" in str(info.value)


def test_correlation_examples():
    """Test perfect agreement and disagreement."""
    harness = {"a": 0.1, "b": 0.2, "c": 0.3}
    report = correlate(harness, {"a": 0.2, "b": 0.5, "c": 0.9})
    assert report.spearman == pytest.approx(1.0)
    assert report.kendall == pytest.approx(1.0)
    assert [r.model_rank for r in report.ranks] == [1.0, 2.0, 3.0]
    reversed_report = correlate(harness, {"a": 0.9, "b": 0.5, "c": 0.2})
    assert reversed_report.spearman == pytest.approx(-1.0)


def test_correlation_with_ties_uses_average_ranks():
    """Test Spearman rho on tied values against Pearson on average ranks."""
    harness = {"a": 1.0, "b": 2.0, "c": 2.0, "d": 3.0, "e": 4.0}
    humans = {"a": 1.0, "b": 3.0, "c": 2.0, "d": 5.0, "e": 4.0}
    report = correlate(harness, humans)
    x_ranks = [1.0, 2.5, 2.5, 4.0, 5.0]
    y_ranks = [1.0, 3.0, 2.0, 5.0, 4.0]
    assert report.spearman == pytest.approx(np.corrcoef(x_ranks, y_ranks)[0, 1])


def test_correlation_matches_brute_force():
    """Test rho and tau on every permutation of up to six models."""
    for n in range(3, 7):
        models = [f"m{i}" for i in range(n)]
        harness = {m: float(i) for i, m in enumerate(models)}
        for perm in itertools.permutations(range(n)):
            humans = {m: float(perm[i]) for i, m in enumerate(models)}
            d2 = sum((i - perm[i]) ** 2 for i in range(n))
            rho = 1 - 6 * d2 / (n * (n * n - 1))
            pairs = list(itertools.combinations(range(n), 2))
            concordant = sum(1 for i, j in pairs if perm[i] < perm[j])
            tau = (2 * concordant - len(pairs)) / len(pairs)
            report = correlate(harness, humans)
            assert report.spearman == pytest.approx(rho, abs=1e-9)
            assert report.kendall == pytest.approx(tau, abs=1e-9)


def test_correlation_edge_cases():
    """Test the error conditions of correlate."""
    with pytest.raises(InsufficientData):
        correlate({"a": 1, "b": 2}, {"a": 1, "b": 2})
    with pytest.raises(InsufficientData):
        correlate({"a": 1, "b": 1, "c": 1}, {"a": 1, "b": 2, "c": 3})
    with pytest.raises(ValidationError):
        correlate({"a": 1, "b": 2, "c": 3}, {"a": 1, "b": 2, "d": 3})


def test_correlation_json(tmp_path):
    """Test that correlation.json is written next to the report."""
    report = aggregate(table_run())
    correlation = correlate({"a": 0.1, "b": 0.2, "c": 0.3}, {"a": 1, "b": 2, "c": 3})
    emit_report([report], tmp_path, correlation)
    data = json.loads((tmp_path / "correlation.json").read_text())
    assert data["spearman"] == pytest.approx(1.0)
    assert data["n"] == 3


def _bench_config():
    return RunConfig(image=ImageSettings(width=32, height=32, steps=1), concurrency=2)


async def test_run_benchmark_on_mock(make_backends, tmp_path):
    """Test a ten-sample benchmark end to end."""
    manifest = load_manifest(write_manifest(tmp_path / "data", 10, ["a", "b"]))
    run = await run_benchmark(
        manifest, _bench_config(), make_backends(MockWorld()), tmp_path / "out"
    )
    assert len(run.outcomes) == 10
    assert run.failures == 0
    assert not run.degraded
    bench_dir = tmp_path / "out" / "bench" / run.run_id
    assert (bench_dir / "histogram.csv").read_text() == "category,count\na,5\nb,5\n"
    assert load_benchmark_run(bench_dir) == run
    for outcome in run.outcomes:
        assert (bench_dir / "samples" / outcome.sample_id / "scores.json").is_file()
        assert outcome.scores.composite == pytest.approx(1.0)


async def test_benchmark_resumes_completed_samples(make_backends, tmp_path):
    """Test that only unfinished samples are regenerated on resume."""
    manifest = load_manifest(write_manifest(tmp_path / "data", 10, ["a"]))
    config = _bench_config()
    first = await run_benchmark(
        manifest, config, make_backends(MockWorld()), tmp_path / "out", "r1"
    )
    samples_dir = tmp_path / "out" / "bench" / "r1" / "samples"
    for sample in manifest.samples[6:]:
        shutil.rmtree(samples_dir / sample.id)

    world = MockWorld()
    second = await run_benchmark(manifest, config, make_backends(world), tmp_path / "out", "r1")
    assert world.t2i.calls == 4 * sum(config.fan_out)
    assert second.outcomes == first.outcomes


async def test_failing_samples_degrade_the_run(make_backends, tmp_path):
    """Test that samples without content fail and mark the run degraded."""
    root = tmp_path / "data"
    path = write_manifest(root, 3, ["a"])
    for i in range(2):
        (root / "images" / f"img{i:03d}.png").write_bytes(render_scene_png(set()))
    run = await run_benchmark(
        load_manifest(path), _bench_config(), make_backends(MockWorld()), tmp_path / "out"
    )
    assert run.failures == 2
    assert run.degraded
    assert "DegenerateScene" in run.outcomes[0].error
    assert aggregate(run).overall.count == 1


TABLE_MODELS = (
    "SD1.4", "SD1.5", "SD1.5-DPO", "SD2.0", "SD2.0-Inpaint", "SDXL1.0",
    "Juggernautv1", "Juggernautv9",
)
TABLE_GPT4_CON = (0.550, 0.566, 0.556, 0.606, 0.622, 0.760, 0.712, 0.770)
TABLE_GPT4_PER = (0.446, 0.476, 0.684, 0.586, 0.602, 0.660, 0.774, 0.882)
TABLE_HUMAN_CON = (0.4216, 0.4338, 0.4544, 0.4960, 0.4892, 0.6726, 0.6472, 0.7056)
TABLE_HUMAN_PER = (0.3682, 0.3976, 0.6388, 0.4626, 0.4920, 0.6448, 0.8072, 0.8590)


def rank_oracle(values):
    """1-based ranks of distinct values by exhaustive comparison."""
    return [1 + sum(other < v for other in values) for v in values]


def brute_force_rho(xs, ys):
    n = len(xs)
    d2 = sum((a - b) ** 2 for a, b in zip(rank_oracle(xs), rank_oracle(ys)))
    return 1 - 6 * d2 / (n * (n * n - 1))


def test_published_judge_columns_track_the_user_study():
    """Test rank agreement of the published judge and user study columns."""
    perceptual = correlate(
        dict(zip(TABLE_MODELS, TABLE_GPT4_PER)), dict(zip(TABLE_MODELS, TABLE_HUMAN_PER))
    )
    assert perceptual.spearman == pytest.approx(
        brute_force_rho(TABLE_GPT4_PER, TABLE_HUMAN_PER)
    )
    # SD1.5-DPO and SDXL1.0 swap places, every other model keeps its rank
    assert perceptual.spearman == pytest.approx(1 - 12 / 504)
    assert perceptual.kendall == pytest.approx(26 / 28)
    swapped = [r.model_id for r in perceptual.ranks if r.model_rank != r.human_rank]
    assert swapped == ["SD1.5-DPO", "SDXL1.0"]

    content = correlate(
        dict(zip(TABLE_MODELS, TABLE_GPT4_CON)), dict(zip(TABLE_MODELS, TABLE_HUMAN_CON))
    )
    assert content.spearman == pytest.approx(
        brute_force_rho(TABLE_GPT4_CON, TABLE_HUMAN_CON)
    )
    assert content.spearman == pytest.approx(1 - 24 / 504)


def test_ingest_human_study_normalizes_means(tmp_path):
    """Test the ratings [1..5] and five fives of one pair each."""
    rows = [("m1", "s1", f"a{i}", r, r) for i, r in enumerate((1, 2, 3, 4, 5))]
    rows += [("m2", "s1", f"a{i}", 5, 5) for i in range(5)]
    humans = ingest_human_study(_human_csv(tmp_path / "h.csv", rows))
    assert humans.normalized_pair_means() == {
        ("m1", "s1"): (0.5, 0.5),
        ("m2", "s1"): (1.0, 1.0),
    }
    assert humans.model_means() == {"m1": (0.5, 0.5), "m2": (1.0, 1.0)}


def test_human_means_survive_normalization_round_trip(tmp_path):
    """Test that denormalizing the normalized pair means gives the raw means."""
    rng = np.random.default_rng(17)
    for case in range(200):
        n_pairs = int(rng.integers(1, 5))
        rows = [
            (f"m{p % 3}", f"s{p}", f"a{k}", *rng.integers(1, 6, size=2).tolist())
            for p in range(n_pairs)
            for k in range(int(rng.integers(1, 6)))
        ]
        humans = ingest_human_study(_human_csv(tmp_path / f"h{case}.csv", rows))
        raw = humans.pair_means()
        for pair, (content, perceptual) in humans.normalized_pair_means().items():
            assert 0.0 <= content <= 1.0 and 0.0 <= perceptual <= 1.0
            assert denormalize_judge(content) == pytest.approx(raw[pair][0])
            assert denormalize_judge(perceptual) == pytest.approx(raw[pair][1])


def _table_report(model_id, con, per, direct):
    means = MetricMeans(
        count=50, clip_pct=90.0, dino_pct=90.0, judge_content=con, judge_perceptual=per
    )
    return ModelReport(
        model_id=model_id, overall=means, categories={}, direct_judge=direct
    )


JUDGING_ROWS = (
    # model, regeneration content, perceptual, direct judge, human content, perceptual
    ("SD1.5", 0.566, 0.476, 0.662, 0.4338, 0.3976),
    ("SDXL1.0", 0.760, 0.660, 0.744, 0.6726, 0.6448),
    ("juggerv1", 0.712, 0.774, 0.696, 0.6472, 0.8072),
    ("juggerv9", 0.770, 0.882, 0.722, 0.7056, 0.8590),
)


def test_compare_judging_reproduces_published_comparison(tmp_path):
    """Test the regeneration and user study columns and their agreement."""
    reports = [_table_report(m, c, p, d) for m, c, p, d, _, _ in JUDGING_ROWS]
    humans = {m: (hc, hp) for m, _, _, _, hc, hp in JUDGING_ROWS}
    judging = compare_judging(reports, humans)
    assert [r.regeneration for r in judging.rows] == pytest.approx(
        [0.521, 0.710, 0.743, 0.826]
    )
    assert [r.user_study for r in judging.rows] == pytest.approx(
        [0.4157, 0.6587, 0.7272, 0.7823]
    )
    assert judging.spread["direct_judge"] == pytest.approx(0.082)
    assert judging.spread["regeneration"] == pytest.approx(0.305)
    assert judging.agreement["regeneration"] == pytest.approx(1.0)
    assert judging.agreement["direct_judge"] == pytest.approx(0.4)

    paths = emit_effectiveness(judging, tmp_path)
    assert [p.name for p in paths] == ["effectiveness.md", "effectiveness.csv"]
    table = (tmp_path / "effectiveness.md").read_text()
    assert "| Model | Direct GPT4v | Image Regeneration | User study |" in table
    assert "| SD1.5 | 0.6620 | 0.5210 | 0.4157 |" in table
    assert "| Spread | 0.0820 | 0.3050 | 0.3666 |" in table
    csv_rows = (tmp_path / "effectiveness.csv").read_text().splitlines()
    assert csv_rows[0] == "model_id,direct_judge,regeneration,user_study"
    assert csv_rows[4] == "juggerv9,0.722000,0.826000,0.782300"


def test_compare_judging_needs_direct_scores():
    """Test that reports without direct judge scores are rejected."""
    with pytest.raises(AggregateError, match="direct-judge"):
        compare_judging([aggregate(table_run())])
    judging = compare_judging([_table_report("a", 0.5, 0.5, 0.7)])
    assert judging.rows[0].user_study is None
    assert judging.agreement == {}
    assert "| a | 0.7000 | 0.5000 | - |" in render_effectiveness(judging)


def test_mode_metrics_columns():
    """Test the per-mode CLIP, DINO and GPT4v(%) arithmetic."""
    run = make_run([score(92.0, 94.0, 4, 5), score(95.0, 96.0, 3, 4)])
    run = run.model_copy(
        update={
            "outcomes": tuple(
                o.model_copy(update={"initial_composite": v})
                for o, v in zip(run.outcomes, (0.5, 0.7))
            )
        }
    )
    metrics = mode_metrics(run, "iut")
    assert metrics.clip_pct == pytest.approx(93.5)
    assert metrics.dino_pct == pytest.approx(95.0)
    # judge means: (0.75 + 1.0) / 2 and (0.5 + 0.75) / 2
    assert metrics.gpt4v_pct == pytest.approx(75.0)
    assert metrics.initial_composite == pytest.approx(0.6)
    assert metrics.samples == 2
    with pytest.raises(AggregateError):
        mode_metrics(make_run([score(90, 90, 3, 3)]), "direct")


def test_ablation_files(tmp_path):
    """Test the ablation table with differences against the direct mode."""
    direct = ModeMetrics(
        mode="direct", clip_pct=93.66, dino_pct=94.83, gpt4v_pct=76.8,
        initial_composite=0.8, final_composite=0.9, samples=100,
    )
    iut = ModeMetrics(
        mode="iut", clip_pct=95.71, dino_pct=95.71, gpt4v_pct=84.4,
        initial_composite=0.85, final_composite=0.92, samples=100,
    )
    comparison = PromptModeComparison(model_id="JuggerXLv9", modes=(direct, iut))
    assert comparison.initial == {"direct": 0.8, "iut": 0.85}
    emit_ablation(comparison, tmp_path)
    table = (tmp_path / "ablation.md").read_text()
    assert "| JuggerXLv9 | Direct | 93.66 | 94.83 | 76.8 | 100 |" in table
    assert "| JuggerXLv9 | IUT | 95.71 (+2.05) | 95.71 (+0.88) | 84.4 (+7.6) | 100 |" in table
    rows = (tmp_path / "ablation.csv").read_text().splitlines()
    assert rows[2] == "JuggerXLv9,iut,95.710000,95.710000,84.400000,100"


async def test_direct_judge_on_mock(make_backends, tmp_path):
    """Test direct judge scores on a fresh and on a resumed benchmark."""
    manifest = load_manifest(write_manifest(tmp_path / "data", 4, ["a"]))
    config = _bench_config()
    plain = await run_benchmark(
        manifest, config, make_backends(MockWorld()), tmp_path / "out", "r1"
    )
    assert all(o.direct_judge is None for o in plain.outcomes)
    assert aggregate(plain).direct_judge is None

    world = MockWorld()
    judged = await run_benchmark(
        manifest, config, make_backends(world), tmp_path / "out", "r1", direct_judge=True
    )
    assert world.t2i.calls == 0
    assert world.mllm.calls == len(manifest.samples)
    assert [o.direct_judge for o in judged.outcomes] == [1.0] * 4
    assert aggregate(judged).direct_judge == pytest.approx(1.0)
