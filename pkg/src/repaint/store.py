"""Run-store: the on-disk audit trail of regeneration and benchmark runs.

Layout of one regeneration run::

    <root>/config.json          resolved configuration
    <root>/reference.png        reference image
    <root>/iut.json             image understanding tree
    <root>/prompt.json          initial prompt
    <root>/iter<t>/cand<i>.json candidate record (+ cand<i>.png)
    <root>/iter<t>/record.json  iteration record, including next-round prompts
    <root>/result.json          regeneration result

All JSON is canonical.
"""

import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any

from repaint.core import canonical_hash, canonical_json
from repaint.errors import StoreError

# Configure logger
logger = logging.getLogger(__name__)


def make_run_id(*parts: Any) -> str:
    """Deterministic run id from the records that define a run."""
    return canonical_hash(list(parts))[:16]


class RunStore:
    """File-backed store rooted at one run directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path(self, rel: str) -> Path:
        return self.root / rel

    def exists(self, rel: str) -> bool:
        return self.path(rel).is_file()

    def write_bytes(self, rel: str, data: bytes) -> Path:
        """Atomically write a file below the run root.

        Raises:
            StoreError: If the file cannot be written
        """
        target = self.path(rel)
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp_name = tempfile.mkstemp(dir=target.parent, suffix=".tmp")
            with os.fdopen(fd, "wb") as f:
                f.write(data)
            os.replace(tmp_name, target)
        except OSError as e:
            raise StoreError(f"cannot write {target}: {e}") from e
        return target

    def write_json(self, rel: str, value: Any) -> Path:
        return self.write_bytes(rel, canonical_json(value))

    def read_bytes(self, rel: str) -> bytes | None:
        try:
            return self.path(rel).read_bytes()
        except FileNotFoundError:
            return None
        except OSError as e:
            raise StoreError(f"cannot read {self.path(rel)}: {e}") from e

    def read_json(self, rel: str) -> Any | None:
        data = self.read_bytes(rel)
        if data is None:
            return None
        try:
            return json.loads(data)
        except json.JSONDecodeError as e:
            raise StoreError(f"corrupt JSON in {self.path(rel)}: {e}") from e

    def child(self, rel: str) -> "RunStore":
        return RunStore(self.root / rel)
