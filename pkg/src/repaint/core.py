"""Domain types, validation and canonical serialization shared by all stages."""

import hashlib
import json
import logging
from enum import Enum
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from repaint.errors import EncodingError, ValidationError

# Configure logger
logger = logging.getLogger(__name__)


class Aspect(str, Enum):
    """Revision aspects, walked in queue order by the iteration loop."""

    OVERALL = "Overall"
    STYLE = "Style"
    COLOR = "Color"
    DETAIL = "Detail"


ASPECT_QUEUE: tuple[Aspect, ...] = (
    Aspect.OVERALL,
    Aspect.STYLE,
    Aspect.COLOR,
    Aspect.DETAIL,
)

DEFAULT_WEIGHTS = (0.25, 0.25, 0.25, 0.25)
WEIGHT_TOLERANCE = 1e-9

# RunConfig fields that never change results
OPERATIONAL_FIELDS = frozenset(
    {"concurrency", "timeout_s", "cache_dir", "out_dir", "log_level", "log_json", "costs"}
)


def content_hash(data: bytes) -> str:
    """Return the hex SHA-256 digest used for every content-addressed id."""
    return hashlib.sha256(data).hexdigest()


def _json_default(value: Any) -> Any:
    if isinstance(value, BaseModel):
        return value.model_dump(mode="json", by_alias=True)
    if isinstance(value, (set, frozenset)):
        return sorted(value)
    raise TypeError(f"Object of type {type(value).__name__} is not serializable")


def canonical_json(value: Any) -> bytes:
    """Serialize a structured record deterministically.

    Keys are sorted, separators carry no whitespace, output is UTF-8 and floats use
    Python's shortest round-trip repr.

    Args:
        value: A JSON-compatible structure or a pydantic model

    Returns:
        The canonical byte encoding

    Raises:
        EncodingError: If the value (or something nested in it) is not serializable
    """
    if isinstance(value, BaseModel):
        value = value.model_dump(mode="json", by_alias=True)
    try:
        text = json.dumps(
            value,
            sort_keys=True,
            separators=(",", ":"),
            ensure_ascii=False,
            allow_nan=False,
            default=_json_default,
        )
    except (TypeError, ValueError) as e:
        raise EncodingError(f"cannot encode value canonically: {e}") from e
    return text.encode("utf-8")


def canonical_hash(value: Any) -> str:
    """Content hash of the canonical encoding of a record."""
    return content_hash(canonical_json(value))


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)


class ReferenceImage(_Frozen):
    """A reference image to regenerate, identified by the hash of its bytes."""

    id: str
    data: bytes = Field(repr=False, exclude=True)
    width: int
    height: int
    category: str | None = None
    caption: str | None = None
    name: str | None = None

    @model_validator(mode="after")
    def _check(self) -> "ReferenceImage":
        if self.id != content_hash(self.data):
            raise ValueError("id must equal the content hash of the image bytes")
        if self.width < 1 or self.height < 1:
            raise ValueError("width and height must be at least 1")
        return self

    @classmethod
    def from_bytes(
        cls,
        data: bytes,
        width: int,
        height: int,
        category: str | None = None,
        caption: str | None = None,
        name: str | None = None,
    ) -> "ReferenceImage":
        return cls(
            id=content_hash(data),
            data=data,
            width=width,
            height=height,
            category=category,
            caption=caption,
            name=name,
        )


class ImageArtifact(_Frozen):
    """An encoded image produced by a T2I backend, plus its generation metadata."""

    id: str
    data: bytes = Field(repr=False, exclude=True)
    width: int
    height: int
    model: str = ""
    seed: int | None = None
    mime: str = "image/png"

    @classmethod
    def from_bytes(
        cls,
        data: bytes,
        width: int,
        height: int,
        model: str = "",
        seed: int | None = None,
    ) -> "ImageArtifact":
        return cls(
            id=content_hash(data),
            data=data,
            width=width,
            height=height,
            model=model,
            seed=seed,
        )

    @classmethod
    def from_reference(cls, image: ReferenceImage) -> "ImageArtifact":
        return cls(
            id=image.id, data=image.data, width=image.width, height=image.height
        )


class Feature(_Frozen):
    """A labeled text feature, e.g. ``style: watercolor``."""

    label: str
    value: str


class ObjectNode(_Frozen):
    """An object of the scene with its own features."""

    id: str
    name: str
    features: tuple[Feature, ...] = ()


class Relation(_Frozen):
    """A directed relation between two objects of the same tree."""

    subject_id: str = Field(alias="subject")
    predicate: str
    object_id: str = Field(alias="object")


class ImageUnderstandingTree(_Frozen):
    """Two-level description of an image.

    The root holds the caption and the global features, objects hang below it and
    carry their own features; relations link objects by id.
    """

    caption: str = ""
    global_features: tuple[Feature, ...] = ()
    objects: tuple[ObjectNode, ...] = ()
    relations: tuple[Relation, ...] = ()

    def object_by_id(self, object_id: str) -> ObjectNode | None:
        for obj in self.objects:
            if obj.id == object_id:
                return obj
        return None

    def to_wire(self) -> dict[str, Any]:
        """Return the published IUT JSON schema representation."""
        return self.model_dump(mode="json", by_alias=True)


def parse_iut(data: dict[str, Any]) -> ImageUnderstandingTree:
    """Build a tree from its wire representation.

    Raises:
        ValidationError: If the data does not have the IUT shape
    """
    try:
        return ImageUnderstandingTree.model_validate(data)
    except ValueError as e:
        raise ValidationError(f"not an image understanding tree: {e}") from e


class IutLimits(_Frozen):
    """Size caps applied while building and validating trees."""

    max_objects: int = Field(default=10, ge=1)
    max_object_features: int = Field(default=8, ge=1)
    max_global_features: int = Field(default=6, ge=1)
    max_prompt_chars: int = Field(default=2000, ge=16)


class Violation(_Frozen):
    code: str
    message: str
    path: str = ""


class ValidationReport(_Frozen):
    """Result of validating a tree; violations are data, not errors."""

    violations: tuple[Violation, ...] = ()

    @property
    def is_valid(self) -> bool:
        return not self.violations

    def codes(self) -> list[str]:
        return [v.code for v in self.violations]


def _check_features(
    features: tuple[Feature, ...], path: str, unique_labels: bool
) -> list[Violation]:
    found = []
    seen: set[str] = set()
    for j, feature in enumerate(features):
        if not feature.value.strip():
            found.append(
                Violation(
                    code="empty_feature_value",
                    message=f"feature '{feature.label}' has an empty value",
                    path=f"{path}[{j}]",
                )
            )
        if unique_labels:
            if feature.label in seen:
                found.append(
                    Violation(
                        code="duplicate_feature_label",
                        message=f"feature label '{feature.label}' repeats",
                        path=f"{path}[{j}]",
                    )
                )
            seen.add(feature.label)
    return found


def validate_iut(
    tree: ImageUnderstandingTree, limits: IutLimits | None = None
) -> ValidationReport:
    """Check every structural invariant of an Image Understanding Tree.

    Args:
        tree: The tree to check; it is not modified
        limits: Size caps, defaults to ``IutLimits()``

    Returns:
        A report listing every violation found
    """
    limits = limits or IutLimits()
    violations: list[Violation] = []

    if len(tree.objects) > limits.max_objects:
        violations.append(
            Violation(
                code="object_count_exceeds_limit",
                message=(
                    f"{len(tree.objects)} objects exceed the limit of "
                    f"{limits.max_objects}"
                ),
                path="objects",
            )
        )
    if len(tree.global_features) > limits.max_global_features:
        violations.append(
            Violation(
                code="global_feature_count_exceeds_limit",
                message=(
                    f"{len(tree.global_features)} global features exceed the limit "
                    f"of {limits.max_global_features}"
                ),
                path="global_features",
            )
        )
    violations.extend(
        _check_features(tree.global_features, "global_features", unique_labels=False)
    )

    ids: set[str] = set()
    for i, obj in enumerate(tree.objects):
        path = f"objects[{i}]"
        if obj.id in ids:
            violations.append(
                Violation(
                    code="duplicate_object_id",
                    message=f"object id '{obj.id}' is not unique",
                    path=path,
                )
            )
        ids.add(obj.id)
        if len(obj.features) > limits.max_object_features:
            violations.append(
                Violation(
                    code="feature_count_exceeds_limit",
                    message=(
                        f"object '{obj.name}' has {len(obj.features)} features, "
                        f"limit is {limits.max_object_features}"
                    ),
                    path=f"{path}.features",
                )
            )
        violations.extend(
            _check_features(obj.features, f"{path}.features", unique_labels=True)
        )

    for k, relation in enumerate(tree.relations):
        path = f"relations[{k}]"
        for endpoint in (relation.subject_id, relation.object_id):
            if endpoint not in ids:
                violations.append(
                    Violation(
                        code="dangling_relation_endpoint",
                        message=f"relation endpoint '{endpoint}' is not an object id",
                        path=path,
                    )
                )
        if relation.subject_id == relation.object_id:
            violations.append(
                Violation(
                    code="self_relation",
                    message=f"relation links '{relation.subject_id}' to itself",
                    path=path,
                )
            )

    return ValidationReport(violations=tuple(violations))


class LineageStep(_Frozen):
    iteration: int = Field(ge=0)
    aspect: Aspect
    parent_id: str | None = None


class Prompt(_Frozen):
    """A T2I prompt with the history of revisions that produced it."""

    text: str
    lineage: tuple[LineageStep, ...] = ()
    id: str = ""

    @model_validator(mode="before")
    @classmethod
    def _fill_id(cls, data: Any) -> Any:
        if isinstance(data, dict) and not data.get("id") and "text" in data:
            data = {**data, "id": content_hash(str(data["text"]).encode("utf-8"))}
        return data

    @model_validator(mode="after")
    def _check(self) -> "Prompt":
        if not self.text.strip():
            raise ValueError("prompt text must not be empty")
        if self.id != content_hash(self.text.encode("utf-8")):
            raise ValueError("prompt id must equal the hash of its text")
        return self

    @classmethod
    def create(
        cls,
        text: str,
        lineage: tuple[LineageStep, ...] | list[LineageStep] = (),
        max_chars: int | None = None,
    ) -> "Prompt":
        """Create a prompt, enforcing the backend length limit.

        Raises:
            ValidationError: If the text is empty or longer than ``max_chars``
        """
        text = text.strip()
        if not text:
            raise ValidationError("prompt text must not be empty")
        if max_chars is not None and len(text) > max_chars:
            raise ValidationError(
                f"prompt has {len(text)} characters, limit is {max_chars}"
            )
        return cls(text=text, lineage=tuple(lineage))

    def derive(
        self,
        text: str,
        iteration: int,
        aspect: Aspect,
        max_chars: int | None = None,
    ) -> "Prompt":
        """Create a child prompt whose lineage extends this one."""
        step = LineageStep(iteration=iteration, aspect=aspect, parent_id=self.id)
        return Prompt.create(text, self.lineage + (step,), max_chars=max_chars)


class Feedback(_Frozen):
    """Edit directives for one aspect of a prompt.

    An empty directive list means the candidate already matches the reference on
    that aspect; the revision then only paraphrases.
    """

    aspect: Aspect
    directives: tuple[str, ...] = ()
    source_candidate: str

    @property
    def is_empty(self) -> bool:
        return not self.directives


class BackendEndpoints(_Frozen):
    mllm_url: str | None = None
    text_url: str | None = None
    t2i_url: str | None = None
    embed_url: str | None = None
    api_key: str | None = Field(default=None, exclude=True, repr=False)

    @property
    def effective_text_url(self) -> str | None:
        return self.text_url or self.mllm_url


class ImageSettings(_Frozen):
    width: int = Field(default=512, ge=1)
    height: int = Field(default=512, ge=1)
    steps: int = Field(default=30, ge=1)
    negative_prompt: str | None = None


class MockSettings(_Frozen):
    world_seed: int = 0
    miss_rate: float = Field(default=0.0, ge=0.0, le=1.0)
    object_miss_rate: float = Field(default=0.0, ge=0.0, le=1.0)


def default_fan_out(iterations: int) -> tuple[int, ...]:
    """Default schedule: four prompts in the first round, three afterwards."""
    return (4,) + (3,) * (iterations - 1)


class RunConfig(_Frozen):
    """Fully resolved configuration of one regeneration or benchmark run."""

    max_iterations: int = Field(default=4, ge=1)
    fan_out: tuple[int, ...] = (4, 3, 3, 3)
    weights: tuple[float, float, float, float] = DEFAULT_WEIGHTS
    endpoints: BackendEndpoints = BackendEndpoints()
    concurrency: int = Field(default=4, ge=1)
    base_seed: int = 0
    seed_policy: Literal["offset", "fixed"] = "offset"
    prompt_mode: Literal["iut", "direct"] = "iut"
    limits: IutLimits = IutLimits()
    repair_attempts: int = Field(default=3, ge=1)
    transport_retries: int = Field(default=3, ge=1)
    timeout_s: float = Field(default=120.0, gt=0)
    image: ImageSettings = ImageSettings()
    model_id: str = "t2i-under-test"
    costs: dict[str, float] = Field(default_factory=dict)
    cache_dir: str = "cache"
    out_dir: str = "."
    use_mock: bool = False
    mock: MockSettings = MockSettings()
    log_level: str = "INFO"
    log_json: bool = True

    @field_validator("fan_out")
    @classmethod
    def _positive_fan_out(cls, value: tuple[int, ...]) -> tuple[int, ...]:
        if any(n < 1 for n in value):
            raise ValueError("every fan-out entry must be a positive integer")
        return value

    @field_validator("weights")
    @classmethod
    def _check_weights(cls, value: tuple[float, ...]) -> tuple[float, ...]:
        if any(w < 0 for w in value):
            raise ValueError("weights must be non-negative")
        if abs(sum(value) - 1.0) > WEIGHT_TOLERANCE:
            raise ValueError(f"weights must sum to 1, got {sum(value)!r}")
        return value

    @model_validator(mode="after")
    def _check_schedule(self) -> "RunConfig":
        if len(self.fan_out) != self.max_iterations:
            raise ValueError(
                f"fan_out has {len(self.fan_out)} entries but max_iterations is "
                f"{self.max_iterations}"
            )
        return self

    def seed_for(self, iteration: int, index: int) -> int:
        """Seed of candidate ``index`` (0-based) in iteration ``iteration``."""
        if self.seed_policy == "fixed":
            return self.base_seed
        return self.base_seed + 1000 * iteration + index

    def provenance(self) -> dict[str, Any]:
        """Configuration as recorded in run directories (secrets excluded)."""
        return self.model_dump(mode="json")

    def digest(self) -> str:
        """Hash of the settings that affect results; run ids derive from it."""
        return canonical_hash(
            {k: v for k, v in self.provenance().items() if k not in OPERATIONAL_FIELDS}
        )
