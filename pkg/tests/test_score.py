"""Tests for similarity and judge arithmetic."""

import math
import random

import numpy as np
import pytest

from repaint.backend import Backends
from repaint.core import ImageArtifact
from repaint.errors import ConfigError, DegenerateEmbedding, ProtocolError, ValidationError
from repaint.mockworld import FaultyMllm, render_scene_png
from repaint.score import (
    ScoreVector,
    composite_score,
    cosine_similarity,
    denormalize_judge,
    judge_mean,
    judge_pair,
    judge_text_image,
    normalize_judge,
    normalize_similarity,
    score_candidate,
)

WEIGHTS = (0.25, 0.25, 0.25, 0.25)


def _artifact(tokens):
    return ImageArtifact.from_bytes(render_scene_png(tokens), 64, 64)


def test_cosine_similarity_examples():
    """Test cosine on simple vectors."""
    assert cosine_similarity([1, 0], [1, 0]) == pytest.approx(1.0)
    assert cosine_similarity([1, 0], [0, 1]) == pytest.approx(0.0)
    assert cosine_similarity([1, 0], [-1, 0]) == pytest.approx(-1.0)


def test_cosine_similarity_errors():
    """Test dimension mismatch and zero vectors."""
    with pytest.raises(ProtocolError):
        cosine_similarity([1, 0], [1, 0, 0])
    with pytest.raises(DegenerateEmbedding):
        cosine_similarity([0, 0], [1, 0])


def test_cosine_properties():
    """Test symmetry, range and scale invariance on random vectors."""
    rng = np.random.default_rng(5)
    for _ in range(250):
        a, b = rng.standard_normal(16), rng.standard_normal(16)
        cos = cosine_similarity(a, b)
        assert -1.0 <= cos <= 1.0
        assert cos == pytest.approx(cosine_similarity(b, a), abs=1e-12)
        scale = float(rng.uniform(0.01, 100))
        assert cos == pytest.approx(cosine_similarity(a * scale, b), abs=1e-9)
        assert cosine_similarity(a, a) == pytest.approx(1.0, abs=1e-12)


def test_normalize_similarity_clamps():
    """Test the percent mapping."""
    assert normalize_similarity(1.0) == 100.0
    assert normalize_similarity(0.5) == 50.0
    assert normalize_similarity(-0.3) == 0.0


def test_normalize_judge():
    """Test the Likert mapping and its inverse."""
    assert normalize_judge(1) == 0.0
    assert normalize_judge(3) == 0.5
    assert normalize_judge(5) == 1.0
    assert denormalize_judge(0.5) == 3.0
    with pytest.raises(ValidationError):
        normalize_judge(0)
    with pytest.raises(ValidationError):
        normalize_judge(6)


def test_composite_examples():
    """Test weighted means of the normalized components."""
    assert composite_score((1, 1, 1, 1), WEIGHTS) == pytest.approx(1.0)
    assert composite_score((0.8, 0.6, 0.5, 0.25), WEIGHTS) == pytest.approx(0.5375)
    assert composite_score((0.8, 0.6, 0.5, 0.25), (1, 0, 0, 0)) == pytest.approx(0.8)


def test_composite_rejects_bad_weights():
    """Test that weights must be four non-negative numbers summing to 1."""
    with pytest.raises(ConfigError) as info:
        composite_score((1, 1, 1, 1), (0.5, 0.5, 0.5, 0.5))
    assert info.value.field_path == "run.weights"
    with pytest.raises(ConfigError):
        composite_score((1, 1, 1, 1), (1.5, -0.5, 0, 0))
    with pytest.raises(ConfigError):
        composite_score((1, 1, 1, 1), (0.5, 0.5))


def test_composite_is_monotone():
    """Test that raising one component never lowers the composite."""
    rng = random.Random(17)
    for _ in range(250):
        raw = [rng.random() for _ in range(4)]
        total = sum(raw)
        weights = [w / total for w in raw]
        weights[3] = 1.0 - sum(weights[:3])
        if weights[3] < 0:
            continue
        components = [rng.random() for _ in range(4)]
        base = composite_score(components, weights)
        assert 0.0 <= base <= 1.0
        k = rng.randrange(4)
        raised = list(components)
        raised[k] = min(1.0, raised[k] + rng.random())
        assert composite_score(raised, weights) >= base - 1e-12


def test_score_vector_recompute():
    """Test that the stored composite matches the recomputation."""
    scores = ScoreVector(
        clip_pct=80.0,
        dino_pct=60.0,
        judge_content=3,
        judge_perceptual=2,
        composite=0.5375,
    )
    assert scores.recompute(WEIGHTS) == pytest.approx(scores.composite)
    assert scores.normalized() == pytest.approx((0.8, 0.6, 0.5, 0.25))


async def test_judge_pair_with_mock(backends):
    """Test that identical scenes get the top judge score."""
    image = _artifact({"cat", "park"})
    result = await judge_pair(backends, image, image)
    assert (result.content, result.perceptual) == (5, 5)
    assert not result.failed

    other = _artifact({"dog", "beach"})
    result = await judge_pair(backends, image, other)
    assert (result.content, result.perceptual) == (1, 1)


async def test_judge_text_image_with_mock(world, backends):
    """Test the text-image judge on matching, partial and unusable answers."""
    image = _artifact({"cat", "park", "watercolor"})
    result = await judge_text_image(backends, "watercolor, cat, park", image)
    assert (result.content, result.perceptual) == (5, 5)
    result = await judge_text_image(backends, "cat, park", _artifact({"cat"}))
    assert (result.content, result.perceptual) == (3, 3)
    assert judge_mean(result.content, result.perceptual) == 0.5

    faulty = FaultyMllm(world.mllm, rate=1.0, tasks={"judge_text"})
    broken = Backends(faulty, world.t2i, world.embedder)
    result = await judge_text_image(broken, "cat", _artifact({"cat"}))
    assert result.failed
    assert judge_mean(result.content, result.perceptual) == 0.0


async def test_score_candidate_identical_scene(backends):
    """Test that a perfect regeneration scores 1."""
    reference = _artifact({"cat", "blue:cat", "park"})
    generated = ImageArtifact.from_bytes(
        render_scene_png({"cat", "blue:cat", "park"}, 32, 32), 32, 32
    )
    scores = await score_candidate(backends, reference, generated, WEIGHTS)
    assert scores.clip_pct == pytest.approx(100.0)
    assert scores.dino_pct == pytest.approx(100.0)
    assert scores.composite == pytest.approx(1.0)


async def test_score_candidate_partial_overlap(backends):
    """Test that a partial regeneration scores strictly between 0 and 1."""
    reference = _artifact({"cat", "park", "watercolor", "blue"})
    generated = _artifact({"cat", "park"})
    scores = await score_candidate(backends, reference, generated, WEIGHTS)
    assert 0.0 < scores.composite < 1.0
    assert scores.judge_content == 3
    # Sum of two of four near-orthogonal unit vectors
    assert scores.clip_pct == pytest.approx(100 / math.sqrt(2), abs=10)
    assert scores.composite == pytest.approx(scores.recompute(WEIGHTS))
