"""Stage 1: build the image understanding tree and the initial prompt."""

import asyncio
import json
import logging
from typing import Any

from pydantic import BaseModel, ConfigDict

from repaint.backend import Backends, MllmRequest
from repaint.core import (
    Aspect,
    Feature,
    ImageArtifact,
    ImageUnderstandingTree,
    IutLimits,
    LineageStep,
    ObjectNode,
    Prompt,
    ReferenceImage,
    Relation,
    validate_iut,
)
from repaint.errors import BackendUnavailable, BuildError, DegenerateScene, RepaintError
from repaint.prompting import render_template
from repaint.store import RunStore

# Configure logger
logger = logging.getLogger(__name__)

ORIGIN = (LineageStep(iteration=0, aspect=Aspect.OVERALL),)


class SceneExtraction(BaseModel):
    """Levels one and two of the tree, before per-object features are attached."""

    model_config = ConfigDict(frozen=True)

    global_features: tuple[Feature, ...] = ()
    objects: tuple[ObjectNode, ...] = ()
    relations: tuple[Relation, ...] = ()
    warnings: tuple[str, ...] = ()


def _artifact(image: ReferenceImage | ImageArtifact) -> ImageArtifact:
    if isinstance(image, ReferenceImage):
        return ImageArtifact.from_reference(image)
    return image


def _dedupe_labels(features: list[Feature]) -> list[Feature]:
    seen: dict[str, int] = {}
    result = []
    for feature in features:
        seen[feature.label] = seen.get(feature.label, 0) + 1
        if seen[feature.label] > 1:
            label = f"{feature.label}_{seen[feature.label]}"
            logger.warning(f"Renamed repeated feature label '{feature.label}' to '{label}'")
            feature = Feature(label=label, value=feature.value)
        result.append(feature)
    return result


async def caption(
    backends: Backends, image: ReferenceImage, limits: IutLimits = IutLimits()
) -> Prompt:
    """Ask the MLLM for a one-line caption of the reference.

    When the MLLM refuses the image and the manifest provides a caption, that caption
    is used instead.

    Raises:
        DegenerateScene: The caption is empty
        BackendUnavailable: The MLLM failed and no manifest caption exists
    """
    req = MllmRequest(
        images=(_artifact(image),), prompt=render_template("caption"), task="caption"
    )
    try:
        text = (await backends.mllm_query(req)).text.strip()
    except BackendUnavailable as e:
        if not image.caption:
            raise
        logger.warning(f"Captioning failed, using the manifest caption: {e}")
        text = image.caption.strip()
    if not text:
        raise DegenerateScene(f"empty caption for image {image.id[:12]}")
    return Prompt.create(text, ORIGIN, max_chars=limits.max_prompt_chars)


async def extract_scene(
    backends: Backends,
    image: ReferenceImage,
    caption_text: str,
    limits: IutLimits = IutLimits(),
) -> SceneExtraction:
    """Extract global features, objects and relations.

    Objects and global features beyond the caps are dropped with a warning; so are
    relations that pointed at a dropped object.

    Raises:
        SchemaViolation: The response kept failing the IUT schema
    """
    req = MllmRequest(
        images=(_artifact(image),),
        prompt=render_template(
            "extract_scene",
            caption=caption_text,
            max_global_features=limits.max_global_features,
            max_objects=limits.max_objects,
        ),
        response_schema="iut",
        task="extract_scene",
        context={"caption": caption_text},
    )
    tree: ImageUnderstandingTree = (await backends.mllm_query(req)).parsed
    warnings = []

    global_features = list(tree.global_features)
    if len(global_features) > limits.max_global_features:
        warnings.append(
            f"truncated global features from {len(global_features)} to "
            f"{limits.max_global_features}"
        )
        global_features = global_features[: limits.max_global_features]

    objects = list(tree.objects)
    dropped: set[str] = set()
    if len(objects) > limits.max_objects:
        warnings.append(f"truncated objects from {len(objects)} to {limits.max_objects}")
        dropped = {o.id for o in objects[limits.max_objects:]}
        objects = objects[: limits.max_objects]
    relations = [r for r in tree.relations if not {r.subject_id, r.object_id} & dropped]

    for warning in warnings:
        logger.warning(f"Scene extraction for {image.id[:12]}: {warning}")
    return SceneExtraction(
        global_features=tuple(global_features),
        objects=tuple(objects),
        relations=tuple(relations),
        warnings=tuple(warnings),
    )


async def extract_object_features(
    backends: Backends,
    image: ReferenceImage,
    obj: ObjectNode,
    caption_text: str = "",
    limits: IutLimits = IutLimits(),
) -> list[Feature]:
    """Describe one object's features (color, texture, position...).

    Raises:
        SchemaViolation: The response kept failing the features schema
    """
    req = MllmRequest(
        images=(_artifact(image),),
        prompt=render_template(
            "extract_object",
            object=obj.name,
            object_id=obj.id,
            caption=caption_text,
            max_features=limits.max_object_features,
        ),
        response_schema="features",
        task="extract_object",
        context={"object": obj.name, "object_id": obj.id},
    )
    features = _dedupe_labels(list((await backends.mllm_query(req)).parsed.features))
    if len(features) > limits.max_object_features:
        logger.warning(
            f"Truncated features of object '{obj.id}' from {len(features)} to "
            f"{limits.max_object_features}"
        )
        features = features[: limits.max_object_features]
    return features


def _partial(
    caption_text: str, scene: SceneExtraction | None, objects: list[ObjectNode] | None
) -> dict[str, Any]:
    if scene is None:
        return {"caption": caption_text}
    tree = ImageUnderstandingTree.model_construct(
        caption=caption_text,
        global_features=scene.global_features,
        objects=tuple(objects) if objects is not None else scene.objects,
        relations=scene.relations,
    )
    return tree.to_wire()


async def build_iut(
    backends: Backends,
    image: ReferenceImage,
    limits: IutLimits = IutLimits(),
    store: RunStore | None = None,
) -> ImageUnderstandingTree:
    """Compose caption, scene extraction and per-object features into a valid tree.

    The tree is written to ``iut.json`` when a store is given. If any stage fails,
    whatever was built so far goes to ``iut.partial.json`` and the error propagates.

    Raises:
        BuildError: The assembled tree fails validation
    """
    caption_text = ""
    scene: SceneExtraction | None = None
    objects: list[ObjectNode] | None = None
    try:
        caption_text = (await caption(backends, image, limits)).text
        scene = await extract_scene(backends, image, caption_text, limits)
        feature_lists = await asyncio.gather(
            *(
                extract_object_features(backends, image, obj, caption_text, limits)
                for obj in scene.objects
            )
        )
        objects = [
            obj.model_copy(update={"features": tuple(features)})
            for obj, features in zip(scene.objects, feature_lists)
        ]
        tree = ImageUnderstandingTree(
            caption=caption_text,
            global_features=scene.global_features,
            objects=tuple(objects),
            relations=scene.relations,
        )
        report = validate_iut(tree, limits)
        if not report.is_valid:
            raise BuildError(
                f"tree for image {image.id[:12]} is invalid: {', '.join(report.codes())}",
                report,
            )
    except RepaintError as e:
        logger.error(f"Building the IUT of {image.id[:12]} failed: {e}")
        if store is not None:
            store.write_json("iut.partial.json", _partial(caption_text, scene, objects))
        raise

    logger.info(
        f"Built IUT for {image.id[:12]}: {len(tree.objects)} objects, "
        f"{len(tree.global_features)} global features, {len(tree.relations)} relations"
    )
    if store is not None:
        store.write_json("iut.json", tree.to_wire())
    return tree


async def synthesize_initial_prompt(
    backends: Backends,
    tree: ImageUnderstandingTree,
    limits: IutLimits = IutLimits(),
    mode: str = "iut",
    image: ReferenceImage | None = None,
) -> Prompt:
    """Write the initial prompt p* of iteration 0.

    In ``iut`` mode the text LLM reads the serialized tree; a tree without objects
    falls back to its caption. In ``direct`` mode the MLLM writes the prompt straight
    from the reference image.

    Raises:
        DegenerateScene: There is nothing to build a prompt from
    """
    if mode == "direct":
        if image is None:
            raise ValueError("direct prompt mode needs the reference image")
        req = MllmRequest(
            images=(_artifact(image),),
            prompt=render_template("direct_prompt"),
            task="direct_prompt",
        )
        text = (await backends.mllm_query(req)).text.strip()
    elif not tree.objects:
        logger.info("Tree has no objects, using the caption as initial prompt")
        text = tree.caption.strip()
    else:
        wire = tree.to_wire()
        req = MllmRequest(
            prompt=render_template(
                "initial_prompt",
                caption=tree.caption,
                iut=json.dumps(wire, ensure_ascii=False, sort_keys=True),
            ),
            task="initial_prompt",
            context={"iut": wire},
        )
        try:
            text = (await backends.text_query(req)).text.strip()
        except BackendUnavailable as e:
            if not tree.caption.strip():
                raise
            logger.warning(f"Prompt synthesis failed, using the caption: {e}")
            text = tree.caption.strip()

    if not text:
        if not tree.caption.strip():
            raise DegenerateScene("no text to build the initial prompt from")
        text = tree.caption.strip()
    if len(text) > limits.max_prompt_chars:
        logger.warning(
            f"Initial prompt of {len(text)} characters truncated "
            f"to {limits.max_prompt_chars}"
        )
        text = text[: limits.max_prompt_chars]
    return Prompt.create(text, ORIGIN, max_chars=limits.max_prompt_chars)
