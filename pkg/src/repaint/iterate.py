"""Stage 2: the iterative generate / score / select / feedback / revise loop."""

import asyncio
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

from pydantic import BaseModel, ConfigDict, model_validator

from repaint.backend import Backends, EmbeddingVector, MllmRequest, T2iRequest
from repaint.core import (
    ASPECT_QUEUE,
    Aspect,
    Feedback,
    ImageArtifact,
    ImageUnderstandingTree,
    IutLimits,
    Prompt,
    ReferenceImage,
    RunConfig,
    parse_iut,
)
from repaint.errors import (
    BackendUnavailable,
    DegenerateEmbedding,
    EmptyIteration,
    ProtocolError,
    RepaintError,
    SchemaViolation,
    ValidationError,
)
from repaint.prompting import render_template, template_digests
from repaint.score import ScoreVector, embed_reference, score_candidate
from repaint.store import RunStore
from repaint.understand import build_iut, synthesize_initial_prompt

# Configure logger
logger = logging.getLogger(__name__)

ASPECT_HINTS = {
    Aspect.OVERALL: "which objects and places are present",
    Aspect.STYLE: "the artistic or photographic style",
    Aspect.COLOR: "the colors of the whole image and of each object",
    Aspect.DETAIL: "textures, materials and fine details",
}

# Failures that cost one candidate but not the iteration.
CANDIDATE_ERRORS = (
    BackendUnavailable,
    ProtocolError,
    DegenerateEmbedding,
    ValidationError,
)


class Candidate(BaseModel):
    """One prompt of an iteration with its generated image and scores."""

    model_config = ConfigDict(frozen=True)

    id: str
    index: int
    prompt: Prompt
    seed: int
    image: ImageArtifact | None = None
    scores: ScoreVector | None = None
    error: str | None = None
    selected: bool = False

    @model_validator(mode="after")
    def _check(self) -> "Candidate":
        if self.scores is not None and self.image is None:
            raise ValueError("a scored candidate must have an image")
        return self

    @property
    def failed(self) -> bool:
        return self.scores is None


class IterationRecord(BaseModel):
    """Outcome of iteration ``index``, plus the prompts prepared for the next one.

    ``feedback`` targets the aspect of the next iteration. The first iteration also
    carries ``overall_feedback`` on the whole image, applied in the same revision.
    """

    model_config = ConfigDict(frozen=True)

    index: int
    aspect: Aspect
    candidates: tuple[Candidate, ...]
    selected: str
    feedback: Feedback | None = None
    overall_feedback: Feedback | None = None
    next_prompts: tuple[Prompt, ...] = ()

    @property
    def all_feedback(self) -> tuple[Feedback, ...]:
        """Feedback of this iteration in the order it was applied."""
        return tuple(f for f in (self.overall_feedback, self.feedback) if f is not None)

    @model_validator(mode="after")
    def _check(self) -> "IterationRecord":
        if self.overall_feedback is not None and self.index != 1:
            raise ValueError("only the first iteration carries whole-image feedback")
        chosen = [c for c in self.candidates if c.selected]
        if len(chosen) != 1 or chosen[0].id != self.selected:
            raise ValueError("exactly the selected candidate must be marked selected")
        best = chosen[0]
        if best.scores is None:
            raise ValueError("the selected candidate must be scored")
        for c in self.candidates:
            if c.scores is not None and c.scores.composite > best.scores.composite:
                raise ValueError(f"candidate {c.id} outscores the selected one")
        return self

    def selected_candidate(self) -> Candidate:
        return next(c for c in self.candidates if c.id == self.selected)


class RegenerationResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    run_id: str
    reference_id: str
    prompt_mode: str
    iut: ImageUnderstandingTree
    initial_prompt: Prompt
    iterations: tuple[IterationRecord, ...]
    final: Candidate
    global_best: Candidate
    provenance: dict[str, Any] = {}

    @model_validator(mode="after")
    def _check(self) -> "RegenerationResult":
        if not self.iterations:
            raise ValueError("a result needs at least one iteration")
        if self.final.id not in {c.id for c in self.iterations[-1].candidates}:
            raise ValueError("final must be a candidate of the last iteration")
        return self

    @property
    def final_scores(self) -> ScoreVector:
        assert self.final.scores is not None
        return self.final.scores


@dataclass
class RegenerationState:
    """Everything one reference image's iterations share."""

    backends: Backends
    config: RunConfig
    reference: ReferenceImage
    iut: ImageUnderstandingTree
    store: RunStore | None = None
    reference_embeddings: dict[str, EmbeddingVector] = field(default_factory=dict)

    @property
    def reference_artifact(self) -> ImageArtifact:
        return ImageArtifact.from_reference(self.reference)

    @property
    def limits(self) -> IutLimits:
        return self.config.limits


def aspect_for(t: int, iterations: int | None = None) -> Aspect:
    """Aspect of iteration ``t`` (1-based); the queue cycles when T > 4."""
    if t < 1 or (iterations is not None and t > iterations):
        raise ValidationError(f"iteration {t} is outside 1..{iterations}")
    return ASPECT_QUEUE[(t - 1) % len(ASPECT_QUEUE)]


def feedback_aspects(t: int, iterations: int) -> tuple[Aspect, ...]:
    """Aspects the feedback of iteration ``t`` covers, in the order applied.

    Iteration t prepares the prompts of t + 1, so it targets ``aspect_for(t + 1)``.
    The first iteration also covers ``aspect_for(1)``, which nothing else reaches
    before the queue cycles. The last iteration has no feedback.
    """
    if t < 1 or t > iterations:
        raise ValidationError(f"iteration {t} is outside 1..{iterations}")
    if t == iterations:
        return ()
    following = aspect_for(t + 1, iterations)
    if t == 1:
        return (aspect_for(1), following)
    return (following,)


async def fan_out_prompts(
    backends: Backends, p: Prompt, n: int, limits: IutLimits = IutLimits()
) -> list[Prompt]:
    """Return ``p`` followed by ``n - 1`` paraphrases of it.

    Paraphrases share the lineage of ``p``. When the text LLM fails, the missing
    variants are copies of ``p``.
    """
    if n < 1:
        raise ValidationError(f"fan-out must be at least 1, got {n}")
    if n == 1:
        return [p]
    req = MllmRequest(
        prompt=render_template("paraphrase", count=n - 1, prompt=p.text),
        response_schema="prompts",
        task="paraphrase",
        context={"prompt": p.text, "count": n - 1},
    )
    try:
        texts = (await backends.text_query(req)).parsed.prompts
    except (BackendUnavailable, SchemaViolation, ProtocolError) as e:
        logger.warning(f"Paraphrasing failed, using {n} copies of the prompt: {e}")
        return [p] * n

    variants = [p]
    for text in texts[: n - 1]:
        try:
            variants.append(
                Prompt.create(text, p.lineage, max_chars=limits.max_prompt_chars)
            )
        except ValidationError as e:
            logger.warning(f"Discarded paraphrase: {e}")
            variants.append(p)
    if len(variants) < n:
        logger.warning(f"Paraphraser returned {len(texts)} of {n - 1} variants")
        variants.extend([p] * (n - len(variants)))
    return variants


async def generate_feedback(
    backends: Backends,
    best: Candidate,
    reference: ReferenceImage,
    iut: ImageUnderstandingTree,
    aspect: Aspect,
) -> Feedback:
    """Ask the MLLM how to edit the best prompt on one aspect.

    Raises:
        SchemaViolation: The response kept failing the feedback schema
    """
    if best.image is None:
        raise ValidationError(f"candidate {best.id} has no image to compare")
    wire = iut.to_wire()
    req = MllmRequest(
        images=(ImageArtifact.from_reference(reference), best.image),
        prompt=render_template(
            "feedback",
            iut=json.dumps(wire, ensure_ascii=False, sort_keys=True),
            aspect=aspect.value,
            aspect_hint=ASPECT_HINTS[aspect],
        ),
        response_schema="feedback",
        task="feedback",
        context={"aspect": aspect.value, "iut": wire},
    )
    parsed = (await backends.mllm_query(req)).parsed
    if parsed.aspect is not None and parsed.aspect != aspect:
        logger.warning(
            f"Feedback answered for {parsed.aspect.value}, asked for {aspect.value}"
        )
    directives = tuple(d.strip() for d in parsed.directives if d.strip())
    return Feedback(aspect=aspect, directives=directives, source_candidate=best.id)


async def revise_prompt(
    backends: Backends,
    best_prompt: Prompt,
    feedback: Feedback | Sequence[Feedback],
    n: int,
    iteration: int,
    limits: IutLimits = IutLimits(),
) -> list[Prompt]:
    """Apply the feedback to the best prompt, then fan the revision out to ``n``.

    Several feedbacks are applied in one rewrite, their directives in order. The
    revision's lineage gains one step for ``iteration`` and the last feedback's aspect.
    """
    feedbacks = [feedback] if isinstance(feedback, Feedback) else list(feedback)
    if not feedbacks:
        raise ValidationError("a revision needs at least one feedback")
    aspect = feedbacks[-1].aspect
    directives = [d for f in feedbacks for d in f.directives]
    text = best_prompt.text
    if directives:
        label = " and ".join(
            dict.fromkeys(f.aspect.value for f in feedbacks if not f.is_empty)
        )
        req = MllmRequest(
            prompt=render_template(
                "revise",
                aspect=label,
                directives="\n".join(f"- {d}" for d in directives),
                prompt=best_prompt.text,
            ),
            task="revise",
            context={
                "aspect": label,
                "directives": directives,
                "prompt": best_prompt.text,
            },
        )
        try:
            revised = (await backends.text_query(req)).text.strip()
            if not revised or len(revised) > limits.max_prompt_chars:
                raise ValidationError(f"unusable revision of {len(revised)} characters")
            text = revised
        except (BackendUnavailable, ProtocolError, ValidationError) as e:
            logger.warning(f"Revision failed, keeping the best prompt: {e}")
    revised_prompt = best_prompt.derive(
        text, iteration, aspect, max_chars=limits.max_prompt_chars
    )
    return await fan_out_prompts(backends, revised_prompt, n, limits)


async def _make_candidate(
    state: RegenerationState, t: int, index: int, prompt: Prompt
) -> Candidate:
    config = state.config
    seed = config.seed_for(t, index)
    candidate_id = f"t{t}c{index}"
    image = None
    try:
        image = await state.backends.t2i_generate(
            T2iRequest(
                prompt=prompt.text,
                negative_prompt=config.image.negative_prompt,
                seed=seed,
                width=config.image.width,
                height=config.image.height,
                steps=config.image.steps,
            )
        )
        scores = await score_candidate(
            state.backends,
            state.reference_artifact,
            image,
            config.weights,
            state.reference_embeddings,
        )
    except CANDIDATE_ERRORS as e:
        logger.warning(f"Candidate {candidate_id} failed: {e}")
        return Candidate(
            id=candidate_id,
            index=index,
            prompt=prompt,
            seed=seed,
            image=image,
            error=str(e),
        )
    return Candidate(
        id=candidate_id,
        index=index,
        prompt=prompt,
        seed=seed,
        image=image,
        scores=scores,
    )


def _persist_iteration(store: RunStore, record: IterationRecord) -> None:
    base = f"iter{record.index}"
    for c in record.candidates:
        if c.image is not None:
            store.write_bytes(f"{base}/cand{c.index}.png", c.image.data)
        store.write_json(f"{base}/cand{c.index}.json", c)
    store.write_json(f"{base}/record.json", record)


def load_iteration(store: RunStore, t: int) -> IterationRecord | None:
    """Load a completed iteration, re-attaching candidate image bytes."""
    data = store.read_json(f"iter{t}/record.json")
    if data is None:
        return None
    for c in data["candidates"]:
        if c.get("image") is not None:
            png = store.read_bytes(f"iter{t}/cand{c['index']}.png")
            c["image"]["data"] = png or b""
    return IterationRecord.model_validate(data)


async def run_iteration(
    state: RegenerationState, t: int, prompts: Sequence[Prompt]
) -> IterationRecord:
    """Generate, score and select; then prepare the prompts of iteration t + 1.

    Raises:
        EmptyIteration: Every candidate failed
    """
    if not prompts:
        raise ValidationError(f"iteration {t} has no prompts")
    config = state.config
    prompts = list(prompts)[: config.fan_out[t - 1]]
    aspect = aspect_for(t, config.max_iterations)
    logger.info(f"Iteration {t} ({aspect.value}): {len(prompts)} candidates")

    if not state.reference_embeddings:
        state.reference_embeddings = await embed_reference(
            state.backends, state.reference_artifact
        )
    candidates = await asyncio.gather(
        *(_make_candidate(state, t, i, p) for i, p in enumerate(prompts))
    )
    scored = [c for c in candidates if c.scores is not None]
    if not scored:
        raise EmptyIteration(
            f"all {len(candidates)} candidates of iteration {t} failed"
        )

    best = max(scored, key=lambda c: (c.scores.composite, -c.index))
    best = best.model_copy(update={"selected": True})
    candidates = [best if c.id == best.id else c for c in candidates]
    logger.info(
        f"Iteration {t} selected {best.id} with composite {best.scores.composite:.4f}"
    )

    feedbacks: list[Feedback] = []
    for target in feedback_aspects(t, config.max_iterations):
        try:
            feedbacks.append(
                await generate_feedback(
                    state.backends, best, state.reference, state.iut, target
                )
            )
        except SchemaViolation as e:
            logger.warning(
                f"{target.value} feedback of iteration {t} unusable, revising without: {e}"
            )
            feedbacks.append(Feedback(aspect=target, source_candidate=best.id))
    next_prompts: list[Prompt] = []
    if feedbacks:
        next_prompts = await revise_prompt(
            state.backends,
            best.prompt,
            feedbacks,
            config.fan_out[t],
            t + 1,
            state.limits,
        )

    record = IterationRecord(
        index=t,
        aspect=aspect,
        candidates=tuple(candidates),
        selected=best.id,
        feedback=feedbacks[-1] if feedbacks else None,
        overall_feedback=feedbacks[0] if len(feedbacks) > 1 else None,
        next_prompts=tuple(next_prompts),
    )
    if state.store is not None:
        _persist_iteration(state.store, record)
    return record


def _global_best(records: Sequence[IterationRecord]) -> Candidate:
    scored = [
        (c.scores.composite, -r.index, -c.index, c)
        for r in records
        for c in r.candidates
        if c.scores is not None
    ]
    return max(scored, key=lambda item: item[:3])[3]


async def run_regeneration(
    backends: Backends,
    image: ReferenceImage,
    config: RunConfig,
    store: RunStore | None = None,
    run_id: str = "",
    resume: bool = True,
) -> RegenerationResult:
    """Regenerate one reference image end to end.

    With a store, every stage is persisted and, when ``resume`` is set, completed
    stages and iterations are loaded instead of recomputed.
    """
    await backends.capabilities()
    if store is not None:
        store.write_json("config.json", config.provenance())
        store.write_bytes("reference.png", image.data)

    stored_iut = store.read_json("iut.json") if store is not None and resume else None
    if stored_iut is not None:
        iut = parse_iut(stored_iut)
    else:
        iut = await build_iut(backends, image, config.limits, store)

    reuse = store is not None and resume
    stored_prompt = store.read_json("prompt.json") if reuse else None
    if stored_prompt is not None:
        initial = Prompt.model_validate(stored_prompt)
    else:
        initial = await synthesize_initial_prompt(
            backends, iut, config.limits, config.prompt_mode, image
        )
        if store is not None:
            store.write_json("prompt.json", initial)

    state = RegenerationState(
        backends=backends, config=config, reference=image, iut=iut, store=store
    )
    records: list[IterationRecord] = []
    prompts: list[Prompt] | None = None
    try:
        for t in range(1, config.max_iterations + 1):
            record = load_iteration(store, t) if store is not None and resume else None
            if record is not None:
                logger.info(f"Loaded iteration {t} from the run store")
            else:
                if prompts is None:
                    prompts = await fan_out_prompts(
                        backends, initial, config.fan_out[0], config.limits
                    )
                record = await run_iteration(state, t, prompts)
            records.append(record)
            prompts = list(record.next_prompts)
    except RepaintError as e:
        logger.error(f"Regeneration of {image.id[:12]} stopped: {e}")
        raise

    result = RegenerationResult(
        run_id=run_id,
        reference_id=image.id,
        prompt_mode=config.prompt_mode,
        iut=iut,
        initial_prompt=initial,
        iterations=tuple(records),
        final=records[-1].selected_candidate(),
        global_best=_global_best(records),
        provenance={
            "config_digest": config.digest(),
            "templates": template_digests(),
        },
    )
    if store is not None:
        store.write_json("result.json", result)
    logger.info(
        f"Regeneration of {image.id[:12]} finished: final composite "
        f"{result.final_scores.composite:.4f}"
    )
    return result
