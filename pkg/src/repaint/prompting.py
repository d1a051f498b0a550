"""Versioned prompt templates with ``{{placeholder}}`` substitution."""

import logging
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

from repaint.core import content_hash
from repaint.errors import ValidationError

# Configure logger
logger = logging.getLogger(__name__)

TEMPLATE_NAMES = (
    "caption",
    "extract_scene",
    "extract_object",
    "initial_prompt",
    "direct_prompt",
    "paraphrase",
    "revise",
    "feedback",
    "judge",
    "judge_text",
)

_PLACEHOLDER = re.compile(r"\{\{\s*(\w+)\s*\}\}")
_VERSION = re.compile(r"^version:\s*(\S+)\s*$")


@dataclass(frozen=True)
class Template:
    name: str
    version: str
    body: str

    @property
    def digest(self) -> str:
        return content_hash(self.body.encode("utf-8"))

    def placeholders(self) -> set[str]:
        return set(_PLACEHOLDER.findall(self.body))

    def render(self, **values: object) -> str:
        """Substitute every placeholder.

        Raises:
            ValidationError: If a placeholder has no value
        """
        missing = self.placeholders() - values.keys()
        if missing:
            raise ValidationError(
                f"template '{self.name}' is missing values for {sorted(missing)}"
            )
        return _PLACEHOLDER.sub(lambda m: str(values[m.group(1)]), self.body)


@lru_cache(maxsize=None)
def load_template(name: str) -> Template:
    """Load a template shipped in ``repaint/templates``.

    The first line ``version: <v>`` is the template version; the rest is the body.
    """
    if name not in TEMPLATE_NAMES:
        raise ValidationError(f"unknown template '{name}'")
    text = (
        resources.files("repaint").joinpath("templates", f"{name}.txt").read_text("utf-8")
    )
    first, _, rest = text.partition("\n")
    match = _VERSION.match(first)
    if not match:
        logger.warning(f"Template '{name}' has no version header")
        return Template(name=name, version="0", body=text.strip())
    return Template(name=name, version=match.group(1), body=rest.strip())


def render_template(name: str, **values: object) -> str:
    return load_template(name).render(**values)


def template_digests() -> dict[str, str]:
    """Version and short digest of every template, recorded in run provenance."""
    return {
        name: f"v{load_template(name).version}:{load_template(name).digest[:12]}"
        for name in TEMPLATE_NAMES
    }
