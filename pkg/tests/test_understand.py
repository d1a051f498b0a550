"""Tests for building image understanding trees and initial prompts."""

import json
import random

import pytest

from repaint.backend import Backends, MllmBackend
from repaint.core import (
    Feature,
    ImageUnderstandingTree,
    IutLimits,
    ObjectNode,
    validate_iut,
)
from repaint.errors import BackendUnavailable, BuildError, DegenerateScene
from repaint.mockworld import (
    FaultyMllm,
    MockMllm,
    iut_tokens,
    parse_prompt,
    random_scene,
)
from repaint.store import RunStore
from repaint.understand import (
    build_iut,
    caption,
    extract_object_features,
    extract_scene,
    synthesize_initial_prompt,
)


class TaskMllm(MllmBackend):
    """Answers per task from a mapping; unknown tasks go to the mock MLLM."""

    def __init__(self, answers):
        self.backend_id = "task-mllm"
        self.answers = answers
        self.inner = MockMllm()

    async def query(self, req):
        answer = self.answers.get(req.task)
        if answer is None:
            return await self.inner.query(req)
        if isinstance(answer, Exception):
            raise answer
        return answer


def _task_backends(world, answers):
    return Backends(TaskMllm(answers), world.t2i, world.embedder)


async def test_caption_lists_the_scene(backends, scene_image):
    """Test the caption of a simple scene."""
    image = scene_image({"cat", "forest", "watercolor"})
    result = await caption(backends, image)
    assert result.text == "cat, forest, watercolor"
    assert result.lineage[0].iteration == 0


async def test_caption_is_trimmed(world, scene_image):
    """Test that surrounding whitespace is removed."""
    backends = _task_backends(world, {"caption": "  a cat sleeping  \n"})
    assert (await caption(backends, scene_image({"cat"}))).text == "a cat sleeping"


async def test_empty_scene_is_degenerate(backends, scene_image):
    """Test that an image with nothing to describe raises DegenerateScene."""
    with pytest.raises(DegenerateScene):
        await caption(backends, scene_image(set()))


async def test_caption_falls_back_to_manifest_caption(world, scene_image):
    """Test the manifest caption fallback when the MLLM refuses."""
    refusal = BackendUnavailable("task-mllm", "refused")
    backends = _task_backends(world, {"caption": refusal})
    image = scene_image({"cat"}, caption="a sleepy cat")
    assert (await caption(backends, image)).text == "a sleepy cat"
    with pytest.raises(BackendUnavailable):
        await caption(backends, scene_image({"dog"}))


async def test_extract_scene_relation(backends, scene_image):
    """Test objects and relations of a cat in a park."""
    image = scene_image({"cat", "park"})
    scene = await extract_scene(backends, image, "cat, park")
    assert [o.name for o in scene.objects] == ["cat", "park"]
    assert [(r.subject_id, r.predicate, r.object_id) for r in scene.relations] == [
        ("obj1", "in", "obj2")
    ]
    assert scene.warnings == ()


async def test_extract_scene_truncates_objects(world, scene_image):
    """Test that objects beyond the cap are dropped with a warning."""
    payload = {
        "objects": [{"id": f"o{i}", "name": "thing"} for i in range(12)],
        "relations": [
            {"subject": "o0", "predicate": "near", "object": "o1"},
            {"subject": "o0", "predicate": "near", "object": "o11"},
        ],
    }
    backends = _task_backends(world, {"extract_scene": json.dumps(payload)})
    scene = await extract_scene(backends, scene_image({"cat"}), "things")
    assert len(scene.objects) == 10
    assert len(scene.relations) == 1
    assert any("truncated objects from 12 to 10" in w for w in scene.warnings)


async def test_object_features_are_capped_and_deduplicated(world, scene_image):
    """Test the per-object feature cap and label renaming."""
    features = [{"label": "color", "value": "red"}] + [
        {"label": f"f{i}", "value": "x"} for i in range(8)
    ]
    features.append({"label": "color", "value": "blue"})
    backends = _task_backends(world, {"extract_object": json.dumps({"features": features})})
    obj = ObjectNode(id="obj1", name="cat")
    result = await extract_object_features(backends, scene_image({"cat"}), obj)
    assert len(result) == 8
    assert len({f.label for f in result}) == 8


async def test_build_iut_example(backends, scene_image, tmp_path):
    """Test a full tree for a blue cat in a park, persisted to the store."""
    image = scene_image({"cat", "blue:cat", "park", "watercolor"})
    store = RunStore(tmp_path)
    tree = await build_iut(backends, image, store=store)
    assert validate_iut(tree).is_valid
    assert tree.global_features == (Feature(label="style", value="watercolor"),)
    cat = tree.objects[0]
    assert (cat.name, cat.features) == ("cat", (Feature(label="color", value="blue"),))
    stored = json.loads((tmp_path / "iut.json").read_text())
    assert stored == tree.to_wire()
    assert not (tmp_path / "iut.partial.json").exists()


async def test_build_iut_rejects_dangling_relations(world, scene_image, tmp_path):
    """Test that an invalid tree is never persisted as iut.json."""
    mllm = FaultyMllm(world.mllm, rate=1.0, mode="dangling", tasks={"extract_scene"})
    backends = Backends(mllm, world.t2i, world.embedder)
    store = RunStore(tmp_path)
    with pytest.raises(BuildError) as info:
        await build_iut(backends, scene_image({"cat", "park"}), store=store)
    assert "dangling_relation_endpoint" in info.value.report.codes()
    assert not (tmp_path / "iut.json").exists()
    partial = json.loads((tmp_path / "iut.partial.json").read_text())
    assert partial["caption"] == "cat, park"


async def test_iut_is_complete_for_random_scenes(make_backends, world, scene_image):
    """Test that every perceived token ends up in the tree."""
    backends = make_backends(world)
    rng = random.Random(23)
    for _ in range(1000):
        scene = random_scene(rng, n_objects=rng.randint(1, 4), n_modifiers=3)
        tree = await build_iut(backends, scene_image(scene))
        assert validate_iut(tree).is_valid
        assert iut_tokens(tree.to_wire()) == scene


async def test_initial_prompt_covers_the_tree(backends, scene_image):
    """Test that the initial prompt names every object and feature."""
    scene = {"cat", "blue:cat", "park", "watercolor", "misty"}
    tree = await build_iut(backends, scene_image(scene))
    prompt = await synthesize_initial_prompt(backends, tree)
    assert parse_prompt(prompt.text) == iut_tokens(tree.to_wire())
    assert "cat in park" in prompt.text
    assert [s.iteration for s in prompt.lineage] == [0]


async def test_initial_prompt_without_objects_uses_caption(backends):
    """Test the caption fallback for object-free trees."""
    tree = ImageUnderstandingTree(caption="an empty watercolor sky")
    prompt = await synthesize_initial_prompt(backends, tree)
    assert prompt.text == "an empty watercolor sky"


async def test_initial_prompt_respects_limit(world, caplog):
    """Test that overlong prompts are cut to the limit with a warning."""
    long_caption = "sky " * 100
    backends = _task_backends(world, {"initial_prompt": "a cat, " * 100})
    tree = ImageUnderstandingTree(
        caption=long_caption, objects=(ObjectNode(id="obj1", name="cat"),)
    )
    limits = IutLimits(max_prompt_chars=64)
    with caplog.at_level("WARNING", logger="repaint.understand"):
        prompt = await synthesize_initial_prompt(backends, tree, limits)
    assert len(prompt.text) <= 64
    assert any("truncated to 64" in r.getMessage() for r in caplog.records)


async def test_short_initial_prompt_logs_no_truncation(backends, scene_image, caplog):
    """Test that a prompt within the limit is kept whole and silently."""
    tree = await build_iut(backends, scene_image({"cat", "park"}))
    with caplog.at_level("WARNING", logger="repaint.understand"):
        prompt = await synthesize_initial_prompt(backends, tree)
    assert parse_prompt(prompt.text) >= {"cat", "park"}
    assert not [r for r in caplog.records if "truncated" in r.getMessage()]


async def test_direct_prompt_skips_modifiers(backends, scene_image):
    """Test that direct prompts do not carry per-object features."""
    image = scene_image({"cat", "blue:cat", "park"})
    tree = await build_iut(backends, image)
    prompt = await synthesize_initial_prompt(backends, tree, mode="direct", image=image)
    assert parse_prompt(prompt.text) == {"cat", "park"}
