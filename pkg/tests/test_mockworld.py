"""Tests for the deterministic mock world."""

import json
import random

from repaint.backend import MllmRequest
from repaint.core import Aspect, ImageArtifact
from repaint.mockworld import (
    FaultyMllm,
    MockMllm,
    apply_directives,
    jaccard,
    mock_judge_score,
    normalize_scene,
    paraphrase,
    parse_directive,
    parse_prompt,
    random_scene,
    read_scene,
    render_prompt,
    render_scene_png,
    scene_diff_directives,
    token_class,
)


def test_parse_prompt_binds_attributes_to_next_object():
    """Test attribute binding within comma chunks."""
    assert parse_prompt("a blue cat, watercolor") == {"blue:cat", "cat", "watercolor"}
    assert parse_prompt("cat, blue") == {"cat", "blue"}
    assert parse_prompt("an image of fluffy red dog in park") == {
        "fluffy:dog",
        "red:dog",
        "dog",
        "park",
    }


def test_render_prompt_roundtrips_scenes():
    """Test that rendered prompts describe exactly their scene."""
    rng = random.Random(3)
    for _ in range(200):
        scene = random_scene(rng, n_objects=rng.randint(1, 3))
        assert parse_prompt(render_prompt(scene)) == scene


def test_paraphrases_keep_the_scene():
    """Test that paraphrases differ in text but not in content."""
    text = render_prompt({"cat", "blue:cat", "park", "watercolor", "misty"})
    variants = [paraphrase(text, k) for k in range(12)]
    assert variants[0] == text
    assert len(set(variants)) == 12
    assert all(parse_prompt(v) == parse_prompt(text) for v in variants)


def test_token_classes():
    """Test the aspect of each token kind."""
    assert token_class("cat") == Aspect.OVERALL
    assert token_class("watercolor") == Aspect.STYLE
    assert token_class("blue:cat") == Aspect.COLOR
    assert token_class("misty") == Aspect.DETAIL


def test_scene_diff_directives():
    """Test directives for one aspect only."""
    reference = {"cat", "blue:cat", "watercolor"}
    candidate = {"cat", "sketch", "red"}
    assert scene_diff_directives(reference, candidate, Aspect.COLOR) == [
        "add color blue to cat",
        "remove color red",
    ]
    assert scene_diff_directives(reference, candidate, Aspect.STYLE) == [
        "add style watercolor",
        "remove style sketch",
    ]
    assert scene_diff_directives(reference, reference, Aspect.DETAIL) == []


def test_directives_repair_scenes():
    """Test that applying the diff of every aspect recovers the reference."""
    rng = random.Random(11)
    for _ in range(200):
        reference = random_scene(rng)
        candidate = random_scene(rng)
        for aspect in Aspect:
            candidate = apply_directives(
                candidate, scene_diff_directives(reference, candidate, aspect)
            )
        assert candidate == reference


def test_parse_directive():
    """Test the directive grammar."""
    assert parse_directive("add color blue to cat") == ("add", ["blue:cat"])
    assert parse_directive("remove object dog") == ("remove", ["dog"])
    assert parse_directive("make it nicer") is None


def test_scene_png_roundtrip():
    """Test that mock images carry their tokens."""
    scene = normalize_scene({"red:car", "street"})
    assert read_scene(render_scene_png(scene)) == {"red:car", "car", "street"}
    assert read_scene(b"not a png") == frozenset()


def test_mock_judge_score():
    """Test the overlap to Likert mapping."""
    assert mock_judge_score(1.0) == 5
    assert mock_judge_score(0.0) == 1
    assert mock_judge_score(0.5) == 3
    assert jaccard({"a", "b"}, {"b", "c"}) == 1 / 3


async def test_mock_caption():
    """Test the mock caption of a reference."""
    image = ImageArtifact.from_bytes(render_scene_png({"cat", "forest", "watercolor"}), 64, 64)
    mllm = MockMllm()
    text = await mllm.query(MllmRequest(images=(image,), prompt="c", task="caption"))
    assert text == "cat, forest, watercolor"


async def test_miss_rate_never_hides_objects():
    """Test that perception only drops non-object tokens."""
    scene = normalize_scene({"cat", "blue:cat", "park", "watercolor", "misty"})
    perceived = MockMllm(miss_rate=1.0).perceive(scene)
    assert perceived == {"cat", "park"}
    assert MockMllm(miss_rate=0.0).perceive(scene) == scene


def test_object_misses_take_modifiers_along():
    """Test that overlooked objects lose their modifiers and one object stays."""
    scene = normalize_scene({"cat", "blue:cat", "dog", "park", "watercolor"})
    perceived = MockMllm(object_miss_rate=1.0).perceive(scene)
    objects = {t for t in perceived if t in {"cat", "dog", "park"}}
    assert len(objects) == 1
    assert "watercolor" in perceived
    assert ("blue:cat" in perceived) == ("cat" in objects)
    rng = random.Random(8)
    for _ in range(200):
        sample = random_scene(rng, n_objects=rng.randint(1, 4))
        mllm = MockMllm(world_seed=rng.randint(0, 9), object_miss_rate=0.5)
        seen = mllm.perceive(sample)
        assert seen <= sample
        assert any(":" not in t and token_class(t) == Aspect.OVERALL for t in seen)


async def test_faulty_mllm_truncates_structured_answers():
    """Test that injected faults corrupt structured answers only."""
    image = ImageArtifact.from_bytes(render_scene_png({"cat"}), 64, 64)
    faulty = FaultyMllm(MockMllm(), rate=1.0)
    req = MllmRequest(
        images=(image,), prompt="x", response_schema="iut", task="extract_scene"
    )
    text = await faulty.query(req)
    try:
        json.loads(text)
        parsed = True
    except json.JSONDecodeError:
        parsed = False
    assert not parsed
    free = await faulty.query(MllmRequest(images=(image,), prompt="x", task="caption"))
    assert free == "cat"
    assert faulty.faults == 1
