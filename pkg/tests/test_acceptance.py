"""End-to-end behaviour of the harness on the mock world."""

import json
import random
import time

import numpy as np

from repaint.backend import Backends
from repaint.bench import (
    aggregate,
    compare_prompt_modes,
    emit_report,
    load_manifest,
    run_benchmark,
)
from repaint.cache import MemoryCache
from repaint.core import ImageSettings, RunConfig, validate_iut
from repaint.errors import BuildError, SchemaViolation
from repaint.iterate import run_regeneration
from repaint.mockworld import (
    FaultyMllm,
    MockWorld,
    jaccard,
    random_scene,
    read_scene,
    render_scene_png,
)
from repaint.store import RunStore
from repaint.understand import build_iut

SMALL = ImageSettings(width=32, height=32, steps=1)


def corpus(n, seed):
    rng = random.Random(seed)
    return [
        random_scene(
            rng,
            n_objects=rng.randint(1, 3),
            n_colors=rng.randint(0, 1),
            n_details=rng.randint(0, 1),
            n_modifiers=rng.randint(1, 3),
        )
        for _ in range(n)
    ]


def write_corpus(root, scenes, name, categories=("mixed",)):
    """Write the scenes as mock images and load them back as a manifest."""
    root.mkdir(parents=True)
    samples = []
    for i, scene in enumerate(scenes):
        (root / f"s{i}.png").write_bytes(render_scene_png(scene))
        samples.append({"image": f"s{i}.png", "category": categories[i % len(categories)]})
    (root / "manifest.json").write_text(json.dumps({"name": name, "samples": samples}))
    return load_manifest(root / "manifest.json")


async def test_feedback_loop_converges(make_backends, scene_image):
    """Test that nearly every scene reaches a perfect regeneration within a minute.

    The mock MLLM overlooks details and objects alike.
    """
    config = RunConfig(image=SMALL)
    perfect = 0
    scenes = corpus(50, seed=2024)
    started = time.perf_counter()
    for scene in scenes:
        world = MockWorld(world_seed=1, miss_rate=0.5, object_miss_rate=0.3)
        result = await run_regeneration(make_backends(world), scene_image(scene), config)
        selected = [
            jaccard(read_scene(r.selected_candidate().image.data), scene)
            for r in result.iterations
        ]
        assert selected == sorted(selected)
        composites = [r.selected_candidate().scores.composite for r in result.iterations]
        best_so_far = np.maximum.accumulate(composites)
        assert result.global_best.scores.composite == best_so_far[-1]
        perfect += selected[-1] == 1.0
    assert time.perf_counter() - started < 60
    assert perfect >= 0.9 * len(scenes)


async def test_more_iterations_never_hurt(make_backends, scene_image):
    """Test that the four-round schedule ends at least as well as one round."""
    short = RunConfig(image=SMALL, max_iterations=1, fan_out=(4,))
    full = RunConfig(image=SMALL)
    gains = []
    for scene in corpus(20, seed=7):
        image = scene_image(scene)
        one = await run_regeneration(make_backends(MockWorld(miss_rate=0.5)), image, short)
        four = await run_regeneration(make_backends(MockWorld(miss_rate=0.5)), image, full)
        gains.append(four.final_scores.composite - one.final_scores.composite)
    assert min(gains) >= -1e-12
    assert np.mean(gains) > 0


async def test_iut_prompts_beat_direct_prompts(tmp_path):
    """Test that tree-based initial prompts start closer than direct captions."""
    manifest = write_corpus(tmp_path / "data", corpus(12, seed=99), "modes")

    def make(config):
        world = MockWorld()
        return Backends(world.mllm, world.t2i, world.embedder, cache=MemoryCache())

    comparison = await compare_prompt_modes(
        manifest, RunConfig(image=SMALL), make, tmp_path / "out"
    )
    assert comparison.samples == 12
    assert comparison.initial["iut"] > comparison.initial["direct"]
    assert comparison.final["iut"] >= comparison.final["direct"] - 1e-12


async def test_fault_injection_never_persists_invalid_trees(world, scene_image, tmp_path):
    """Test 500 corrupted understanding runs: valid tree or a clean failure."""
    rng = random.Random(5)
    outcomes = {"ok": 0, "schema": 0, "build": 0}
    for trial in range(500):
        mode = "dangling" if trial % 5 == 0 else "truncate"
        mllm = FaultyMllm(world.mllm, rate=0.3, seed=trial, mode=mode)
        backends = Backends(mllm, world.t2i, world.embedder, cache=MemoryCache())
        scene = random_scene(rng, n_objects=rng.randint(1, 3))
        store = RunStore(tmp_path / f"t{trial}")
        try:
            tree = await build_iut(backends, scene_image(scene), store=store)
        except SchemaViolation:
            outcomes["schema"] += 1
            assert not store.exists("iut.json")
            continue
        except BuildError:
            outcomes["build"] += 1
            assert not store.exists("iut.json")
            continue
        outcomes["ok"] += 1
        assert validate_iut(tree).is_valid
        assert store.read_json("iut.json") == tree.to_wire()
    assert outcomes["ok"] > 350
    assert outcomes["build"] > 0


async def test_benchmark_reports_are_reproducible(tmp_path):
    """Test that two runs of the same benchmark write identical reports."""
    manifest = write_corpus(tmp_path / "data", corpus(10, seed=11), "repro", ["a", "b"])

    outputs = []
    for name in ("first", "second"):
        world = MockWorld(world_seed=3, miss_rate=0.4)
        backends = Backends(world.mllm, world.t2i, world.embedder, cache=MemoryCache())
        config = RunConfig(image=SMALL, concurrency=3)
        run = await run_benchmark(manifest, config, backends, tmp_path / name)
        emit_report([aggregate(run)], tmp_path / name / "report")
        outputs.append(
            [
                (tmp_path / name / "report" / f).read_bytes()
                for f in ("report.md", "report.csv", "categories.csv")
            ]
        )
    assert outputs[0] == outputs[1]
