"""Uniform access to the three model roles: MLLM, T2I generator and image embedder.

The ``Backends`` facade puts the response cache, the concurrency limit, per-backend
call accounting and the schema repair loop in front of any backend implementation
(remote HTTP or the in-process mock world).
"""

import asyncio
import base64
import json
import logging
import math
import time
from abc import ABC, abstractmethod
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic import ValidationError as PydanticValidationError

from repaint.cache import CacheStrategy, MemoryCache, cache_key
from repaint.core import (
    Aspect,
    Feature,
    ImageArtifact,
    ImageUnderstandingTree,
    canonical_json,
)
from repaint.errors import (
    BackendUnavailable,
    DegenerateEmbedding,
    ProtocolError,
    SchemaViolation,
)

# Configure logger
logger = logging.getLogger(__name__)

SchemaId = Literal["iut", "feedback", "judge", "features", "prompts", "freeform"]


class MllmRequest(BaseModel):
    """A request to the multimodal (or text-only) LLM role.

    ``task`` and ``context`` never travel on the wire: the first labels the call for
    accounting, the second holds the template variables the prompt was rendered from.
    """

    model_config = ConfigDict(frozen=True)

    images: tuple[ImageArtifact, ...] = Field(default=(), max_length=2)
    prompt: str
    response_schema: SchemaId = "freeform"
    temperature: float = Field(default=0.0, ge=0.0)
    max_tokens: int = Field(default=1024, ge=1)
    task: str = "freeform"
    context: dict[str, Any] = Field(default_factory=dict)

    def wire_payload(self) -> dict[str, Any]:
        """Body of ``POST /v1/mllm/query``."""
        return {
            "images": [base64.b64encode(img.data).decode("ascii") for img in self.images],
            "prompt": self.prompt,
            "schema": None if self.response_schema == "freeform" else self.response_schema,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }

    def cache_bytes(self) -> bytes:
        return canonical_json(
            {
                "images": [img.id for img in self.images],
                "prompt": self.prompt,
                "schema": self.response_schema,
                "temperature": self.temperature,
                "max_tokens": self.max_tokens,
                "context": self.context,
            }
        )

    def with_prompt(self, prompt: str) -> "MllmRequest":
        return self.model_copy(update={"prompt": prompt})


class T2iRequest(BaseModel):
    model_config = ConfigDict(frozen=True)

    prompt: str
    negative_prompt: str | None = None
    seed: int = Field(ge=-(2**63), lt=2**64)
    width: int = Field(default=512, ge=1)
    height: int = Field(default=512, ge=1)
    steps: int = Field(default=30, ge=1)

    @field_validator("prompt")
    @classmethod
    def _non_empty(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("prompt must not be empty")
        return value

    def wire_payload(self) -> dict[str, Any]:
        """Body of ``POST /v1/t2i/generate``."""
        return self.model_dump(mode="json")


class EmbeddingVector(BaseModel):
    model_config = ConfigDict(frozen=True)

    values: tuple[float, ...]
    dim: int = Field(ge=1)
    model_tag: str

    @model_validator(mode="after")
    def _check(self) -> "EmbeddingVector":
        if len(self.values) != self.dim:
            raise ValueError(f"vector has {len(self.values)} entries, dim is {self.dim}")
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("vector entries must be finite")
        return self

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


class Capabilities(BaseModel):
    roles: list[str]
    embed_dims: dict[str, int] = Field(default_factory=dict)


class FeaturesPayload(BaseModel):
    features: list[Feature]


class FeedbackPayload(BaseModel):
    aspect: Aspect | None = None
    directives: list[str]


class JudgePayload(BaseModel):
    content: int = Field(ge=1, le=5)
    perceptual: int = Field(ge=1, le=5)
    rationale: str = ""


class PromptsPayload(BaseModel):
    prompts: list[str] = Field(min_length=1)

    @field_validator("prompts")
    @classmethod
    def _non_empty(cls, value: list[str]) -> list[str]:
        if any(not p.strip() for p in value):
            raise ValueError("prompts must be non-empty strings")
        return value


SCHEMAS: dict[str, type[BaseModel]] = {
    "iut": ImageUnderstandingTree,
    "features": FeaturesPayload,
    "feedback": FeedbackPayload,
    "judge": JudgePayload,
    "prompts": PromptsPayload,
}


def extract_json_object(text: str) -> dict[str, Any]:
    """Parse a JSON object from model output, tolerating surrounding prose or fences.

    Raises:
        ValueError: If no JSON object can be recovered
    """
    text = (text or "").strip()
    if not text:
        raise ValueError("empty response")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as direct_error:
        start = text.find("{")
        end = text.rfind("}")
        if start == -1 or end <= start:
            raise ValueError(f"no JSON object found: {direct_error}") from direct_error
        obj = json.loads(text[start : end + 1])
    if not isinstance(obj, dict):
        raise ValueError("response is not a JSON object")
    return obj


def parse_response(schema: str, text: str) -> BaseModel | str:
    """Parse and validate a raw response against a schema id.

    Raises:
        ValueError: If the text does not satisfy the schema
    """
    if schema == "freeform":
        return text
    obj = extract_json_object(text)
    try:
        return SCHEMAS[schema].model_validate(obj)
    except PydanticValidationError as e:
        raise ValueError(str(e)) from e


class MllmResponse(BaseModel):
    """Outcome of an MLLM query: the last raw text, the parsed value and every attempt."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    text: str
    parsed: Any = None
    attempts: list[str] = Field(default_factory=list)

    @property
    def repairs(self) -> int:
        return len(self.attempts) - 1


class MllmBackend(ABC):
    """Backend able to answer (multimodal) LLM queries with raw text."""

    backend_id: str

    @abstractmethod
    async def query(self, req: MllmRequest) -> str:
        raise NotImplementedError("Subclasses must implement query method")


class T2iBackend(ABC):
    """Text-to-image generator under evaluation."""

    backend_id: str

    @abstractmethod
    async def generate(self, req: T2iRequest) -> tuple[bytes, str]:
        """Return the encoded image and the model name that produced it."""
        raise NotImplementedError("Subclasses must implement generate method")


class EmbedBackend(ABC):
    """Image embedder (CLIP-like, DINO-like, ...)."""

    backend_id: str

    @abstractmethod
    async def embed(self, image: ImageArtifact, model_tag: str) -> list[float]:
        raise NotImplementedError("Subclasses must implement embed method")

    @abstractmethod
    async def capabilities(self) -> Capabilities:
        raise NotImplementedError("Subclasses must implement capabilities method")


class BackendCounters(BaseModel):
    calls: int = 0
    cache_hits: int = 0
    failures: int = 0
    retries: int = 0
    repairs: int = 0
    latency_ms: float = 0.0
    cost: float = 0.0


class CallStats:
    """Per-backend call accounting with cost estimation."""

    def __init__(self, costs: dict[str, float] | None = None):
        """Initialize the counters.

        Args:
            costs: Estimated cost per uncached call keyed by role
                (``mllm``, ``text``, ``t2i``, ``embed``)
        """
        self.costs = costs or {}
        self.by_backend: dict[str, BackendCounters] = {}
        self.by_task: dict[str, int] = {}

    def _counters(self, backend_id: str) -> BackendCounters:
        return self.by_backend.setdefault(backend_id, BackendCounters())

    def record_call(
        self, backend_id: str, role: str, latency_ms: float, task: str | None = None
    ) -> None:
        counters = self._counters(backend_id)
        counters.calls += 1
        counters.latency_ms += latency_ms
        counters.cost += self.costs.get(role, 0.0)
        if task:
            self.by_task[task] = self.by_task.get(task, 0) + 1

    def record_hit(self, backend_id: str) -> None:
        self._counters(backend_id).cache_hits += 1

    def record_failure(self, backend_id: str) -> None:
        self._counters(backend_id).failures += 1

    def record_repair(self, backend_id: str) -> None:
        self._counters(backend_id).repairs += 1

    def record_retries(self, backend_id: str, retries: int) -> None:
        self._counters(backend_id).retries = retries

    def total_calls(self) -> int:
        return sum(c.calls for c in self.by_backend.values())

    def as_dict(self) -> dict[str, Any]:
        return {
            "backends": {
                bid: c.model_dump() for bid, c in sorted(self.by_backend.items())
            },
            "tasks": dict(sorted(self.by_task.items())),
            "total_cost": round(sum(c.cost for c in self.by_backend.values()), 6),
        }

    def log(self) -> None:
        logger.info("backend_stats", extra={"backend_stats": self.as_dict()})


REPAIR_SUFFIX = (
    "\n\nYour previous response could not be used: {error}\n"
    "Respond again with only a JSON object that matches the requested schema."
)


class Backends:
    """Facade over the model roles shared by every pipeline stage."""

    def __init__(
        self,
        mllm: MllmBackend,
        t2i: T2iBackend,
        embedder: EmbedBackend,
        text: MllmBackend | None = None,
        cache: CacheStrategy | None = None,
        concurrency: int = 4,
        repair_attempts: int = 3,
        costs: dict[str, float] | None = None,
    ):
        """Initialize the facade.

        Args:
            mllm: Multimodal LLM role
            t2i: Text-to-image role
            embedder: Image embedding role
            text: Optional text-only LLM role, defaults to ``mllm``
            cache: Response cache, defaults to an in-memory cache
            concurrency: Maximum number of in-flight backend calls
            repair_attempts: Total attempts allowed for a schema-bound query
            costs: Estimated cost per uncached call keyed by role
        """
        self.mllm = mllm
        self.text = text or mllm
        self.t2i = t2i
        self.embedder = embedder
        self.cache = cache if cache is not None else MemoryCache()
        self.repair_attempts = repair_attempts
        self.stats = CallStats(costs)
        self._semaphore = asyncio.Semaphore(concurrency)
        self._capabilities: Capabilities | None = None

    async def _raw_query(
        self, backend: MllmBackend, role: str, req: MllmRequest
    ) -> tuple[str, bool]:
        """Return the response text and whether it came from the cache.

        Fresh responses are not cached here; callers store them once validated.
        """
        key = cache_key(backend.backend_id, req.cache_bytes())
        entry = self.cache.get(backend.backend_id, key)
        if entry is not None:
            self.stats.record_hit(backend.backend_id)
            return entry.response.decode("utf-8"), True
        async with self._semaphore:
            started = time.perf_counter()
            try:
                text = await backend.query(req)
            except BackendUnavailable:
                self.stats.record_failure(backend.backend_id)
                raise
            finally:
                latency = (time.perf_counter() - started) * 1000
            self.stats.record_call(backend.backend_id, role, latency, req.task)
        return text, False

    async def _query_with_repair(
        self, backend: MllmBackend, role: str, req: MllmRequest
    ) -> MllmResponse:
        attempts: list[str] = []
        current = req
        last_error = ""
        for attempt in range(self.repair_attempts):
            text, cached = await self._raw_query(backend, role, current)
            attempts.append(text)
            try:
                parsed = parse_response(req.response_schema, text)
            except ValueError as e:
                last_error = str(e).splitlines()[0]
                logger.warning(
                    f"Response for task '{req.task}' failed schema "
                    f"'{req.response_schema}' (attempt {attempt + 1}/"
                    f"{self.repair_attempts}): {last_error}"
                )
                if attempt + 1 < self.repair_attempts:
                    self.stats.record_repair(backend.backend_id)
                current = req.with_prompt(
                    req.prompt + REPAIR_SUFFIX.format(error=last_error)
                )
                continue
            if not cached:
                key = cache_key(backend.backend_id, current.cache_bytes())
                self.cache.set(backend.backend_id, key, text.encode("utf-8"))
            if attempt:
                logger.info(
                    f"Task '{req.task}' recovered after {attempt} repair attempts"
                )
            return MllmResponse(text=text, parsed=parsed, attempts=attempts)
        raise SchemaViolation(req.response_schema, last_error, attempts[-1])

    async def mllm_query(self, req: MllmRequest) -> MllmResponse:
        """Query the multimodal LLM, validating and repairing structured responses.

        Raises:
            BackendUnavailable: Transport failure after retries
            SchemaViolation: The schema kept failing for every attempt
        """
        return await self._query_with_repair(self.mllm, "mllm", req)

    async def text_query(self, req: MllmRequest) -> MllmResponse:
        """Same as ``mllm_query`` but routed to the text-only role."""
        return await self._query_with_repair(self.text, "text", req)

    async def t2i_generate(self, req: T2iRequest) -> ImageArtifact:
        """Generate an image, replaying identical requests from the cache.

        Raises:
            BackendUnavailable: The generator refused or timed out
            ProtocolError: The cached or returned payload is malformed
        """
        backend_id = self.t2i.backend_id
        key = cache_key(backend_id, canonical_json(req.wire_payload()))
        entry = self.cache.get(backend_id, key)
        if entry is not None:
            self.stats.record_hit(backend_id)
            payload = json.loads(entry.response)
        else:
            async with self._semaphore:
                started = time.perf_counter()
                try:
                    data, model = await self.t2i.generate(req)
                except BackendUnavailable:
                    self.stats.record_failure(backend_id)
                    raise
                self.stats.record_call(
                    backend_id, "t2i", (time.perf_counter() - started) * 1000, "t2i"
                )
            payload = {"image": base64.b64encode(data).decode("ascii"), "model": model}
            self.cache.set(backend_id, key, canonical_json(payload))
        try:
            data = base64.b64decode(payload["image"])
        except (KeyError, ValueError) as e:
            raise ProtocolError(f"malformed image payload from {backend_id}") from e
        return ImageArtifact.from_bytes(
            data, req.width, req.height, model=payload.get("model", ""), seed=req.seed
        )

    async def capabilities(self) -> Capabilities:
        if self._capabilities is None:
            self._capabilities = await self.embedder.capabilities()
        return self._capabilities

    async def embed_image(self, image: ImageArtifact, model_tag: str) -> EmbeddingVector:
        """Embed an image and L2-normalize the result.

        Raises:
            ProtocolError: The vector dimension differs from the declared one
            DegenerateEmbedding: The backend returned the zero vector
        """
        backend_id = self.embedder.backend_id
        key = cache_key(
            backend_id, canonical_json({"image": image.id, "model_tag": model_tag})
        )
        entry = self.cache.get(backend_id, key)
        if entry is not None:
            self.stats.record_hit(backend_id)
            values = json.loads(entry.response)
        else:
            async with self._semaphore:
                started = time.perf_counter()
                try:
                    values = await self.embedder.embed(image, model_tag)
                except BackendUnavailable:
                    self.stats.record_failure(backend_id)
                    raise
                self.stats.record_call(
                    backend_id, "embed", (time.perf_counter() - started) * 1000, "embed"
                )
            self.cache.set(backend_id, key, canonical_json([float(v) for v in values]))

        declared = (await self.capabilities()).embed_dims.get(model_tag)
        if declared is not None and len(values) != declared:
            raise ProtocolError(
                f"{backend_id} returned {len(values)} dims for '{model_tag}', "
                f"declared {declared}"
            )
        vector = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(vector)):
            raise ProtocolError(f"{backend_id} returned non-finite embedding entries")
        norm = float(np.linalg.norm(vector))
        if norm == 0.0:
            raise DegenerateEmbedding(
                f"zero embedding for image {image.id[:12]} ({model_tag})"
            )
        vector = vector / norm
        return EmbeddingVector(
            values=tuple(float(v) for v in vector), dim=len(vector), model_tag=model_tag
        )

    async def doctor(self) -> dict[str, Any]:
        """Check that every role is reachable and report the declared capabilities."""
        report: dict[str, Any] = {"healthy": True, "roles": {}}
        for role, backend in (
            ("mllm", self.mllm),
            ("text", self.text),
            ("t2i", self.t2i),
            ("embed", self.embedder),
        ):
            entry: dict[str, Any] = {"backend_id": backend.backend_id}
            capabilities = getattr(backend, "capabilities", None)
            if capabilities is not None:
                try:
                    caps = await capabilities()
                    entry["declared_roles"] = caps.roles
                    entry["embed_dims"] = caps.embed_dims
                    # The text role may be served by an endpoint that only declares mllm.
                    accepted = {role, "mllm"} if role == "text" else {role}
                    if not accepted & set(caps.roles):
                        entry["error"] = f"endpoint does not declare role '{role}'"
                except BackendUnavailable as e:
                    entry["error"] = str(e)
            if "error" in entry:
                report["healthy"] = False
            report["roles"][role] = entry
        return report

    def log_stats(self) -> None:
        """Log the call accounting, including transport retries of remote clients."""
        for backend in self._unique_backends():
            retries = getattr(backend, "retries_used", 0)
            if retries:
                self.stats.record_retries(backend.backend_id, retries)
        self.stats.log()

    def _unique_backends(self) -> list:
        backends = (self.mllm, self.text, self.t2i, self.embedder)
        return list({id(b): b for b in backends}.values())

    async def aclose(self) -> None:
        for backend in self._unique_backends():
            close = getattr(backend, "aclose", None)
            if close is not None:
                await close()
