"""Deterministic in-process backends used for offline runs and as the test oracle.

In the mock world an image is a finite set of attribute tokens. Plain tokens name an
object (``cat``), a style (``watercolor``), a global color (``blue``) or a global
detail (``misty``); modifier tokens ``attr:object`` bind a color or detail to one
object (``blue:cat``). Mock images are small PNGs whose ``repaint:scene`` text chunk
lists their tokens, which is how the mock MLLM and embedder "see" them.
"""

import hashlib
import json
import logging
import random
import re
from typing import Any, Iterable

import numpy as np

from repaint.backend import (
    Capabilities,
    EmbedBackend,
    MllmBackend,
    MllmRequest,
    T2iBackend,
    T2iRequest,
)
from repaint.core import Aspect, ImageArtifact
from repaint.imaging import encode_png, read_png_text

# Configure logger
logger = logging.getLogger(__name__)

SCENE_KEY = "repaint:scene"

ANIMALS = ("bird", "cat", "deer", "dog", "fish", "fox", "horse", "rabbit")
PEOPLE = ("child", "man", "person", "woman")
THINGS = (
    "bicycle", "boat", "bridge", "car", "chair", "flower", "house", "lamp",
    "tree", "umbrella",
)
PLACES = (
    "beach", "city", "desert", "forest", "garden", "lake", "mountain", "park",
    "river", "street",
)
OBJECTS = frozenset(ANIMALS + PEOPLE + THINGS + PLACES)
STYLES = frozenset((
    "anime", "cyberpunk", "impressionist", "minimalist", "oil-painting",
    "photorealistic", "pixel-art", "pop-art", "sketch", "surreal", "ukiyo-e",
    "watercolor",
))
COLORS = frozenset((
    "black", "blue", "brown", "golden", "green", "orange", "pink", "purple",
    "red", "silver", "white", "yellow",
))
DETAILS = frozenset((
    "ancient", "fluffy", "furry", "glowing", "large", "misty", "rusty", "shiny",
    "snowy", "spotted", "striped", "sunny", "tiny", "wooden",
))
ATTRIBUTES = COLORS | DETAILS
VOCABULARY = OBJECTS | STYLES | ATTRIBUTES

RELATION_SUBJECTS = frozenset(ANIMALS + PEOPLE)
RELATION_PLACES = frozenset(PLACES)
RELATION_PREDICATE = "in"

CLASS_WORDS = {"object", "style", "color", "detail"}
DECORATIONS = (
    "an image of",
    "a picture showing",
    "a careful depiction of",
    "an artwork featuring",
    "a scene with",
    "a composition of",
    "a rendering of",
    "an illustration of",
)
EMBED_DIMS = {"clip-like": 256, "dino-like": 384}

_WORD = re.compile(r"[a-z][a-z\-]*")
_CHUNK_SPLIT = re.compile(r"[,;.\n]+")


def split_token(token: str) -> tuple[str | None, str]:
    """Split ``attr:object`` into (attr, object); plain tokens give (None, token)."""
    if ":" in token:
        attr, obj = token.split(":", 1)
        return attr, obj
    return None, token


def is_valid_token(token: str) -> bool:
    attr, base = split_token(token)
    if attr is None:
        return base in VOCABULARY
    return attr in ATTRIBUTES and base in OBJECTS


def normalize_scene(tokens: Iterable[str]) -> frozenset[str]:
    """Add the objects implied by modifier tokens and drop unknown tokens."""
    result = set()
    for token in tokens:
        if not is_valid_token(token):
            continue
        result.add(token)
        attr, base = split_token(token)
        if attr is not None:
            result.add(base)
    return frozenset(result)


def token_class(token: str) -> Aspect:
    """Aspect a token belongs to when feedback is filtered by aspect."""
    attr, base = split_token(token)
    word = attr if attr is not None else base
    if word in COLORS:
        return Aspect.COLOR
    if word in DETAILS:
        return Aspect.DETAIL
    if word in STYLES:
        return Aspect.STYLE
    return Aspect.OVERALL


def jaccard(a: Iterable[str], b: Iterable[str]) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def scene_relations(tokens: Iterable[str]) -> list[tuple[str, str, str]]:
    """Relation table of the mock world: animals and people are ``in`` places."""
    objects = sorted(t for t in normalize_scene(tokens) if t in OBJECTS)
    return [
        (subject, RELATION_PREDICATE, place)
        for subject in objects
        if subject in RELATION_SUBJECTS
        for place in objects
        if place in RELATION_PLACES
    ]


def parse_prompt(text: str) -> frozenset[str]:
    """Extract the scene a prompt describes.

    Within one comma-separated chunk, colors and details bind to the next object
    word; attributes left unbound at the end of a chunk become global tokens.
    """
    tokens: set[str] = set()
    for chunk in _CHUNK_SPLIT.split(text.lower()):
        pending: list[str] = []
        for word in _WORD.findall(chunk):
            if word in ATTRIBUTES:
                pending.append(word)
            elif word in OBJECTS:
                tokens.add(word)
                tokens.update(f"{attr}:{word}" for attr in pending)
                pending = []
            elif word in STYLES:
                tokens.add(word)
        tokens.update(pending)
    return frozenset(tokens)


def prompt_chunks(tokens: Iterable[str]) -> list[str]:
    """Canonical comma chunks describing a token set."""
    scene = normalize_scene(tokens)
    chunks = sorted(t for t in scene if t in STYLES)
    for obj in sorted(t for t in scene if t in OBJECTS):
        attrs = sorted(
            split_token(t)[0] for t in scene if ":" in t and split_token(t)[1] == obj
        )
        chunks.append(" ".join(attrs + [obj]))
    chunks.extend(sorted(t for t in scene if t in COLORS))
    chunks.extend(sorted(t for t in scene if t in DETAILS))
    return chunks


def render_prompt(
    tokens: Iterable[str], relations: Iterable[tuple[str, str, str]] = ()
) -> str:
    chunks = prompt_chunks(tokens)
    chunks.extend(f"{s} {p} {o}" for s, p, o in relations)
    return ", ".join(chunks)


def paraphrase(text: str, k: int) -> str:
    """Deterministic k-th paraphrase: rotated chunks behind a decorative lead-in."""
    if k == 0:
        return text
    chunks = [c.strip() for c in text.split(",") if c.strip()]
    if chunks:
        shift = k % len(chunks)
        chunks = chunks[shift:] + chunks[:shift]
    lead = DECORATIONS[(k - 1) % len(DECORATIONS)]
    parts = [lead] + chunks
    if k > len(DECORATIONS):
        parts.append(f"variation {k}")
    return ", ".join(parts)


def _directive_words(verb: str, token: str) -> str:
    attr, base = split_token(token)
    preposition = "to" if verb == "add" else "from"
    if attr is not None:
        return f"{verb} {token_class(token).value.lower()} {attr} {preposition} {base}"
    label = token_class(token).value.lower()
    if token_class(token) == Aspect.OVERALL:
        label = "object"
    return f"{verb} {label} {base}"


def scene_diff_directives(
    reference: Iterable[str], candidate: Iterable[str], aspect: Aspect
) -> list[str]:
    """Edit directives turning the candidate into the reference on one aspect."""
    ref = normalize_scene(reference)
    cand = normalize_scene(candidate)
    missing = sorted(t for t in ref - cand if token_class(t) == aspect)
    extra = sorted(t for t in cand - ref if token_class(t) == aspect)
    return [_directive_words("add", t) for t in missing] + [
        _directive_words("remove", t) for t in extra
    ]


def parse_directive(text: str) -> tuple[str, list[str]] | None:
    """Read ``add|remove ... [to|from object]`` into (verb, tokens)."""
    words = _WORD.findall(text.lower())
    if not words or words[0] not in ("add", "remove"):
        return None
    verb, rest = words[0], words[1:]
    for preposition in ("to", "from", "on"):
        if preposition in rest:
            idx = rest.index(preposition)
            attrs = [w for w in rest[:idx] if w in ATTRIBUTES]
            targets = [w for w in rest[idx + 1 :] if w in OBJECTS]
            if attrs and targets:
                return verb, [f"{a}:{targets[0]}" for a in attrs]
    tokens = [w for w in rest if w in VOCABULARY and w not in CLASS_WORDS]
    return (verb, tokens) if tokens else None


def apply_directives(tokens: Iterable[str], directives: Iterable[str]) -> frozenset[str]:
    scene = set(normalize_scene(tokens))
    for directive in directives:
        parsed = parse_directive(directive)
        if parsed is None:
            continue
        verb, edit = parsed
        for token in edit:
            if verb == "add":
                scene.add(token)
                attr, base = split_token(token)
                if attr is not None:
                    scene.add(base)
            else:
                scene.discard(token)
                if token in OBJECTS:
                    scene -= {t for t in scene if split_token(t)[1] == token and ":" in t}
    return normalize_scene(scene)


def scene_color(tokens: Iterable[str]) -> tuple[int, int, int]:
    digest = hashlib.sha256(" ".join(sorted(tokens)).encode("utf-8")).digest()
    return digest[0], digest[1], digest[2]


def render_scene_png(tokens: Iterable[str], width: int = 64, height: int = 64) -> bytes:
    """Encode a mock image whose content is the given token set."""
    scene = sorted(normalize_scene(tokens))
    return encode_png(width, height, scene_color(scene), {SCENE_KEY: " ".join(scene)})


def read_scene(data: bytes) -> frozenset[str]:
    """Token set of a mock image (empty for images without the scene chunk)."""
    return normalize_scene(read_png_text(data).get(SCENE_KEY, "").split())


def random_scene(
    rng: random.Random,
    n_objects: int = 2,
    n_styles: int = 1,
    n_colors: int = 1,
    n_details: int = 1,
    n_modifiers: int = 2,
) -> frozenset[str]:
    """Draw a scene from the vocabulary (fixture generator)."""
    objects = rng.sample(sorted(OBJECTS), n_objects)
    tokens = set(objects)
    tokens.update(rng.sample(sorted(STYLES), n_styles))
    tokens.update(rng.sample(sorted(COLORS), n_colors))
    tokens.update(rng.sample(sorted(DETAILS), n_details))
    for _ in range(n_modifiers):
        if objects:
            tokens.add(f"{rng.choice(sorted(ATTRIBUTES))}:{rng.choice(objects)}")
    return normalize_scene(tokens)


def _unit_hash(*parts: Any) -> float:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


def token_vector(token: str, model_tag: str, world_seed: int = 0) -> np.ndarray:
    """Fixed pseudo-random unit vector of a token, seeded by the token text."""
    dim = EMBED_DIMS.get(model_tag, 64)
    seed = hashlib.sha256(f"{world_seed}:{model_tag}:{token}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(seed[:8], "big"))
    vector = rng.standard_normal(dim)
    return vector / np.linalg.norm(vector)


def _numbered_features(pairs: list[tuple[str, str]]) -> list[dict[str, str]]:
    counts: dict[str, int] = {}
    features = []
    for label, value in pairs:
        counts[label] = counts.get(label, 0) + 1
        name = label if counts[label] == 1 else f"{label}_{counts[label]}"
        features.append({"label": name, "value": value})
    return features


GLOBAL_LABELS = {Aspect.STYLE: "style", Aspect.COLOR: "palette", Aspect.DETAIL: "detail"}
OBJECT_LABELS = {Aspect.COLOR: "color", Aspect.DETAIL: "detail"}


def iut_tokens(iut: dict[str, Any]) -> frozenset[str]:
    """Tokens an IUT (wire form) describes, as the mock text-LLM reads it."""
    tokens: set[str] = set()
    for feature in iut.get("global_features", []):
        words = _WORD.findall(str(feature.get("value", "")).lower())
        tokens.update(w for w in words if w in VOCABULARY)
    for obj in iut.get("objects", []):
        name = str(obj.get("name", "")).lower()
        if name not in OBJECTS:
            continue
        tokens.add(name)
        for feature in obj.get("features", []):
            for word in _WORD.findall(str(feature.get("value", "")).lower()):
                if word in ATTRIBUTES:
                    tokens.add(f"{word}:{name}")
    return normalize_scene(tokens)


class MockMllm(MllmBackend):
    """Mock multimodal LLM reading scenes from mock images.

    ``miss_rate`` makes it deterministically overlook non-object tokens of the
    reference when describing it (caption, IUT, direct prompt), which gives the
    feedback loop diffs to repair. ``object_miss_rate`` does the same for objects
    and places, together with their modifiers; at least one object stays visible.
    Feedback and judging always compare true scenes.
    """

    def __init__(
        self, world_seed: int = 0, miss_rate: float = 0.0, object_miss_rate: float = 0.0
    ):
        self.world_seed = world_seed
        self.miss_rate = miss_rate
        self.object_miss_rate = object_miss_rate
        self.backend_id = f"mock-mllm-w{world_seed}-m{round(miss_rate * 1000)}"
        if object_miss_rate:
            self.backend_id += f"-o{round(object_miss_rate * 1000)}"
        self.calls = 0

    def _missed_objects(self, scene: frozenset[str]) -> set[str]:
        objects = sorted(t for t in scene if t in OBJECTS)
        draws = {t: _unit_hash(self.world_seed, "miss-object", t) for t in objects}
        missed = {t for t in objects if draws[t] < self.object_miss_rate}
        if objects and len(missed) == len(objects):
            missed.discard(max(objects, key=lambda t: draws[t]))
        return missed

    def perceive(self, scene: Iterable[str]) -> frozenset[str]:
        scene = normalize_scene(scene)
        missed = self._missed_objects(scene)
        kept = {
            t
            for t in scene
            if split_token(t)[1] not in missed
            and (
                token_class(t) == Aspect.OVERALL
                or _unit_hash(self.world_seed, "miss", t) >= self.miss_rate
            )
        }
        return normalize_scene(kept)

    def _reference(self, req: MllmRequest) -> frozenset[str]:
        return read_scene(req.images[0].data) if req.images else frozenset()

    async def query(self, req: MllmRequest) -> str:
        self.calls += 1
        handler = getattr(self, f"_task_{req.task}", None)
        if handler is None:
            return req.prompt
        return handler(req)

    def _task_caption(self, req: MllmRequest) -> str:
        scene = self.perceive(self._reference(req))
        return ", ".join(sorted(t for t in scene if ":" not in t))

    def _task_direct_prompt(self, req: MllmRequest) -> str:
        scene = self.perceive(self._reference(req))
        return render_prompt(t for t in scene if ":" not in t)

    def _task_extract_scene(self, req: MllmRequest) -> str:
        scene = self.perceive(self._reference(req))
        pairs = sorted(
            (GLOBAL_LABELS[token_class(t)], t)
            for t in scene
            if ":" not in t and token_class(t) != Aspect.OVERALL
        )
        names = sorted(t for t in scene if t in OBJECTS)
        ids = {name: f"obj{i + 1}" for i, name in enumerate(names)}
        payload = {
            "caption": str(req.context.get("caption", "")),
            "global_features": _numbered_features(pairs),
            "objects": [{"id": ids[n], "name": n, "features": []} for n in names],
            "relations": [
                {"subject": ids[s], "predicate": p, "object": ids[o]}
                for s, p, o in scene_relations(scene)
            ],
        }
        return json.dumps(payload)

    def _task_extract_object(self, req: MllmRequest) -> str:
        scene = self.perceive(self._reference(req))
        name = str(req.context.get("object", ""))
        pairs = sorted(
            (OBJECT_LABELS[token_class(t)], split_token(t)[0])
            for t in scene
            if ":" in t and split_token(t)[1] == name
        )
        return json.dumps({"features": _numbered_features(pairs)})

    def _task_initial_prompt(self, req: MllmRequest) -> str:
        iut = req.context.get("iut", {})
        ids = {o.get("id"): str(o.get("name", "")) for o in iut.get("objects", [])}
        relations = [
            (
                ids.get(r.get("subject"), ""),
                str(r.get("predicate", "")),
                ids.get(r.get("object"), ""),
            )
            for r in iut.get("relations", [])
        ]
        return render_prompt(iut_tokens(iut), [r for r in relations if r[0] and r[2]])

    def _task_paraphrase(self, req: MllmRequest) -> str:
        text = str(req.context.get("prompt", ""))
        count = int(req.context.get("count", 1))
        variants = [paraphrase(text, k) for k in range(1, count + 1)]
        return json.dumps({"prompts": variants})

    def _task_revise(self, req: MllmRequest) -> str:
        tokens = parse_prompt(str(req.context.get("prompt", "")))
        revised = apply_directives(tokens, req.context.get("directives", []))
        return render_prompt(revised) or str(req.context.get("prompt", ""))

    def _task_feedback(self, req: MllmRequest) -> str:
        aspect = Aspect(req.context.get("aspect", Aspect.OVERALL.value))
        reference = self._reference(req)
        candidate = read_scene(req.images[1].data) if len(req.images) > 1 else frozenset()
        return json.dumps(
            {
                "aspect": aspect.value,
                "directives": scene_diff_directives(reference, candidate, aspect),
            }
        )

    def _task_judge(self, req: MllmRequest) -> str:
        reference = self._reference(req)
        generated = read_scene(req.images[1].data) if len(req.images) > 1 else frozenset()
        overlap = jaccard(reference, generated)
        score = mock_judge_score(overlap)
        return json.dumps(
            {
                "content": score,
                "perceptual": score,
                "rationale": (
                    f"{len(reference & generated)} of {len(reference | generated)} "
                    "scene elements are shared"
                ),
            }
        )

    def _task_judge_text(self, req: MllmRequest) -> str:
        described = normalize_scene(parse_prompt(str(req.context.get("prompt", ""))))
        generated = self._reference(req)
        score = mock_judge_score(jaccard(described, generated))
        return json.dumps(
            {
                "content": score,
                "perceptual": score,
                "rationale": (
                    f"{len(described & generated)} of {len(described | generated)} "
                    "prompt elements are visible"
                ),
            }
        )


def mock_judge_score(overlap: float) -> int:
    """1 + 4 * Jaccard, rounded half up."""
    return int(np.floor(1 + 4 * overlap + 0.5))


class MockT2i(T2iBackend):
    """Mock generator: the image is the set of vocabulary tokens found in the prompt."""

    model = "mock-t2i"

    def __init__(self, world_seed: int = 0, dropout: float = 0.0):
        self.world_seed = world_seed
        self.dropout = dropout
        self.backend_id = f"mock-t2i-w{world_seed}-d{round(dropout * 1000)}"
        self.calls = 0

    async def generate(self, req: T2iRequest) -> tuple[bytes, str]:
        self.calls += 1
        tokens = {
            t
            for t in parse_prompt(req.prompt)
            if _unit_hash(self.world_seed, req.seed, t) >= self.dropout
        }
        return render_scene_png(tokens, req.width, req.height), self.model


class MockEmbedder(EmbedBackend):
    """Hashed bag-of-tokens embedder: the sum of fixed per-token unit vectors."""

    def __init__(self, world_seed: int = 0):
        self.world_seed = world_seed
        self.backend_id = f"mock-embed-w{world_seed}"
        self.calls = 0

    async def embed(self, image: ImageArtifact, model_tag: str) -> list[float]:
        self.calls += 1
        dim = EMBED_DIMS.get(model_tag, 64)
        total = np.zeros(dim)
        for token in sorted(read_scene(image.data)):
            total += token_vector(token, model_tag, self.world_seed)
        return total.tolist()

    async def capabilities(self) -> Capabilities:
        return Capabilities(
            roles=["embed", "mllm", "t2i", "text"], embed_dims=dict(EMBED_DIMS)
        )


class FaultyMllm(MllmBackend):
    """Fault-injection wrapper corrupting a share of the inner backend's responses.

    ``mode`` is ``truncate`` (malformed JSON) or ``dangling`` (IUT relations pointing
    at a missing object). Faults are a pure function of (seed, prompt), so repair
    attempts, whose prompts differ, draw independently.
    """

    def __init__(
        self,
        inner: MllmBackend,
        rate: float = 0.3,
        seed: int = 0,
        mode: str = "truncate",
        tasks: Iterable[str] | None = None,
    ):
        self.inner = inner
        self.rate = rate
        self.seed = seed
        self.mode = mode
        self.tasks = set(tasks) if tasks is not None else None
        self.backend_id = f"faulty-{mode}-{round(rate * 1000)}-s{seed}-{inner.backend_id}"
        self.calls = 0
        self.faults = 0

    async def query(self, req: MllmRequest) -> str:
        self.calls += 1
        text = await self.inner.query(req)
        if self.tasks is not None and req.task not in self.tasks:
            return text
        if req.response_schema == "freeform":
            return text
        if _unit_hash(self.seed, "fault", req.prompt) >= self.rate:
            return text
        self.faults += 1
        if self.mode == "dangling" and req.response_schema == "iut":
            payload = json.loads(text)
            payload.setdefault("relations", []).append(
                {"subject": "obj1", "predicate": "near", "object": "ghost"}
            )
            return json.dumps(payload)
        return text[: max(1, len(text) // 2)]


class MockWorld:
    """Bundle of the three mock roles sharing one world seed."""

    def __init__(
        self,
        world_seed: int = 0,
        miss_rate: float = 0.0,
        dropout: float = 0.0,
        object_miss_rate: float = 0.0,
    ):
        self.world_seed = world_seed
        self.mllm = MockMllm(world_seed, miss_rate, object_miss_rate)
        self.t2i = MockT2i(world_seed, dropout)
        self.embedder = MockEmbedder(world_seed)

    def total_calls(self) -> int:
        return self.mllm.calls + self.t2i.calls + self.embedder.calls

