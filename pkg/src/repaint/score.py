"""Similarity and judge arithmetic used to select and report candidates."""

import logging
from typing import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from repaint.backend import Backends, EmbeddingVector, JudgePayload, MllmRequest
from repaint.core import WEIGHT_TOLERANCE, ImageArtifact
from repaint.errors import (
    ConfigError,
    DegenerateEmbedding,
    ProtocolError,
    SchemaViolation,
    ValidationError,
)
from repaint.prompting import render_template

# Configure logger
logger = logging.getLogger(__name__)

CLIP_TAG = "clip-like"
DINO_TAG = "dino-like"
EMBED_TAGS = (CLIP_TAG, DINO_TAG)


class ScoreVector(BaseModel):
    """Per-candidate metrics plus the composite used for selection."""

    model_config = ConfigDict(frozen=True)

    clip_pct: float = Field(ge=0.0, le=100.0)
    dino_pct: float = Field(ge=0.0, le=100.0)
    judge_content: int = Field(ge=1, le=5)
    judge_perceptual: int = Field(ge=1, le=5)
    composite: float = Field(ge=0.0, le=1.0)
    judge_failed: bool = False
    rationale: str = ""

    def normalized(self) -> tuple[float, float, float, float]:
        return (
            self.clip_pct / 100.0,
            self.dino_pct / 100.0,
            normalize_judge(self.judge_content),
            normalize_judge(self.judge_perceptual),
        )

    def recompute(self, weights: Sequence[float]) -> float:
        return composite_score(self.normalized(), weights)


class JudgeResult(BaseModel):
    content: int
    perceptual: int
    rationale: str
    failed: bool = False


def _as_array(v: EmbeddingVector | Sequence[float] | np.ndarray) -> np.ndarray:
    if isinstance(v, EmbeddingVector):
        return v.as_array()
    return np.asarray(v, dtype=np.float64)


def cosine_similarity(
    a: EmbeddingVector | Sequence[float], b: EmbeddingVector | Sequence[float]
) -> float:
    """Cosine of the angle between two embeddings.

    Raises:
        ProtocolError: If the dimensions differ
        DegenerateEmbedding: If either vector is zero
    """
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise ProtocolError(f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")
    nx, ny = float(np.linalg.norm(x)), float(np.linalg.norm(y))
    if nx == 0.0 or ny == 0.0:
        raise DegenerateEmbedding("cosine similarity of a zero vector")
    return float(np.clip(np.dot(x, y) / (nx * ny), -1.0, 1.0))


def normalize_similarity(cos: float) -> float:
    """Map a cosine to the percent scale, clamping negative values at 0."""
    return 100.0 * max(0.0, min(1.0, cos))


def normalize_judge(score: float) -> float:
    """Map a 1-5 judge score (or a mean of such scores) onto [0, 1].

    Raises:
        ValidationError: If the score is outside [1, 5]
    """
    if not 1.0 <= score <= 5.0:
        raise ValidationError(f"judge score {score} is outside [1, 5]")
    return (score - 1.0) / 4.0


def denormalize_judge(value: float) -> float:
    if not 0.0 <= value <= 1.0:
        raise ValidationError(f"normalized judge value {value} is outside [0, 1]")
    return 1.0 + 4.0 * value


def check_weights(weights: Sequence[float]) -> None:
    """Raises ConfigError unless weights are 4 non-negative reals summing to 1."""
    if len(weights) != 4:
        raise ConfigError("run.weights", f"expected 4 weights, got {len(weights)}")
    if any(w < 0 for w in weights):
        raise ConfigError("run.weights", "weights must be non-negative")
    if abs(sum(weights) - 1.0) > WEIGHT_TOLERANCE:
        raise ConfigError("run.weights", f"weights sum to {sum(weights)!r}, not 1")


def composite_score(normalized: Sequence[float], weights: Sequence[float]) -> float:
    """Weighted arithmetic mean of the four normalized components."""
    check_weights(weights)
    if len(normalized) != 4:
        raise ValidationError(f"expected 4 components, got {len(normalized)}")
    value = float(np.dot(np.asarray(weights, dtype=np.float64), np.asarray(normalized)))
    return min(1.0, max(0.0, value))


async def judge_pair(
    backends: Backends, reference: ImageArtifact, generated: ImageArtifact
) -> JudgeResult:
    """Ask the MLLM judge to rate content consistency and perceptual quality.

    A judge response that keeps failing its schema yields the worst score (1, 1)
    with ``failed`` set, so the candidate stays comparable.
    """
    req = MllmRequest(
        images=(reference, generated),
        prompt=render_template("judge"),
        response_schema="judge",
        task="judge",
    )
    try:
        response = await backends.mllm_query(req)
    except SchemaViolation as e:
        logger.warning(f"Judge failed for image {generated.id[:12]}: {e}")
        return JudgeResult(
            content=1, perceptual=1, rationale=f"judge response invalid: {e}", failed=True
        )
    parsed: JudgePayload = response.parsed
    return JudgeResult(
        content=parsed.content,
        perceptual=parsed.perceptual,
        rationale=parsed.rationale,
    )


def judge_mean(content: float, perceptual: float) -> float:
    """Mean of the normalized content and perceptual judge scores."""
    return (normalize_judge(content) + normalize_judge(perceptual)) / 2.0


async def judge_text_image(
    backends: Backends, prompt: str, image: ImageArtifact
) -> JudgeResult:
    """Ask the MLLM judge to rate an image against the text prompt that produced it.

    This is the cross-modal baseline; failures yield (1, 1) with ``failed`` set.
    """
    req = MllmRequest(
        images=(image,),
        prompt=render_template("judge_text", prompt=prompt),
        response_schema="judge",
        task="judge_text",
        context={"prompt": prompt},
    )
    try:
        parsed: JudgePayload = (await backends.mllm_query(req)).parsed
    except SchemaViolation as e:
        logger.warning(f"Text-image judge failed for image {image.id[:12]}: {e}")
        return JudgeResult(
            content=1, perceptual=1, rationale=f"judge response invalid: {e}", failed=True
        )
    return JudgeResult(
        content=parsed.content,
        perceptual=parsed.perceptual,
        rationale=parsed.rationale,
    )


async def embed_reference(
    backends: Backends, reference: ImageArtifact
) -> dict[str, EmbeddingVector]:
    return {tag: await backends.embed_image(reference, tag) for tag in EMBED_TAGS}


async def score_candidate(
    backends: Backends,
    reference: ImageArtifact,
    generated: ImageArtifact,
    weights: Sequence[float],
    reference_embeddings: dict[str, EmbeddingVector] | None = None,
) -> ScoreVector:
    """Score a generated image against the reference."""
    if reference_embeddings is None:
        reference_embeddings = await embed_reference(backends, reference)
    percents = []
    for tag in EMBED_TAGS:
        vector = await backends.embed_image(generated, tag)
        cos = cosine_similarity(reference_embeddings[tag], vector)
        percents.append(normalize_similarity(cos))
    judge = await judge_pair(backends, reference, generated)
    normalized = (
        percents[0] / 100.0,
        percents[1] / 100.0,
        normalize_judge(judge.content),
        normalize_judge(judge.perceptual),
    )
    return ScoreVector(
        clip_pct=percents[0],
        dino_pct=percents[1],
        judge_content=judge.content,
        judge_perceptual=judge.perceptual,
        composite=composite_score(normalized, weights),
        judge_failed=judge.failed,
        rationale=judge.rationale,
    )
