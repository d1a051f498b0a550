"""HTTP/JSON client for remote backends.

One wire protocol serves all three roles::

    POST /v1/mllm/query     {"images", "prompt", "schema", "temperature", "max_tokens"}
    POST /v1/t2i/generate   {"prompt", "negative_prompt", "seed", "width", "height",
                            "steps"}
    POST /v1/embed          {"image", "model_tag"}
    GET  /v1/capabilities
"""

import base64
import logging
from typing import Any

import httpx
from tenacity import (
    AsyncRetrying,
    RetryError,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
)

from repaint.backend import (
    Capabilities,
    EmbedBackend,
    MllmBackend,
    MllmRequest,
    T2iBackend,
    T2iRequest,
)
from repaint.core import ImageArtifact, content_hash
from repaint.errors import BackendUnavailable, ProtocolError

# Configure logger
logger = logging.getLogger(__name__)

MIN_WAIT_SECONDS = 1
MAX_WAIT_SECONDS = 10


class _Retryable(Exception):
    """Transient failure (transport error, 429 or 5xx) worth another attempt."""


class RemoteBackend(MllmBackend, T2iBackend, EmbedBackend):
    """Client for one endpoint speaking the harness wire protocol."""

    def __init__(
        self,
        base_url: str,
        api_key: str | None = None,
        timeout_s: float = 120.0,
        retries: int = 3,
        transport: httpx.AsyncBaseTransport | None = None,
        min_wait: float = MIN_WAIT_SECONDS,
    ):
        """Initialize the client.

        Args:
            base_url: Endpoint root, e.g. ``http://localhost:8000``
            api_key: Optional bearer token
            timeout_s: Per-request timeout
            retries: Total attempts for transient failures
            transport: Optional httpx transport (tests use ``httpx.MockTransport``)
            min_wait: Initial backoff in seconds
        """
        self.base_url = base_url.rstrip("/")
        self.backend_id = "http-" + content_hash(self.base_url.encode("utf-8"))[:12]
        self.retries = retries
        self.min_wait = min_wait
        self.retries_used = 0
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.AsyncClient(
            base_url=self.base_url,
            headers=headers,
            timeout=httpx.Timeout(timeout_s),
            transport=transport,
        )

    async def _send(self, method: str, path: str, body: dict[str, Any] | None = None):
        response = await self._client.request(method, path, json=body)
        if response.status_code == 429 or response.status_code >= 500:
            raise _Retryable(f"HTTP {response.status_code} from {path}")
        if response.status_code >= 400:
            raise BackendUnavailable(
                self.backend_id,
                f"{path} refused with HTTP {response.status_code}: "
                f"{response.text[:200]}",
            )
        try:
            payload = response.json()
        except ValueError as e:
            raise ProtocolError(f"{path} returned a non-JSON body") from e
        if not isinstance(payload, dict):
            raise ProtocolError(f"{path} returned {type(payload).__name__}, not an object")
        return payload

    async def _request(
        self, method: str, path: str, body: dict[str, Any] | None = None
    ) -> dict[str, Any]:
        try:
            async for attempt in AsyncRetrying(
                stop=stop_after_attempt(self.retries),
                wait=wait_exponential(multiplier=self.min_wait, max=MAX_WAIT_SECONDS),
                retry=retry_if_exception_type((_Retryable, httpx.TransportError)),
                reraise=False,
            ):
                with attempt:
                    if attempt.retry_state.attempt_number > 1:
                        self.retries_used += 1
                        logger.warning(
                            f"Retrying {path} on {self.backend_id} "
                            f"(attempt {attempt.retry_state.attempt_number})"
                        )
                    return await self._send(method, path, body)
        except RetryError as e:
            cause = e.last_attempt.exception()
            logger.error(f"{path} on {self.backend_id} failed after retries: {cause}")
            raise BackendUnavailable(
                self.backend_id, f"{path} failed after {self.retries} attempts: {cause}"
            ) from cause
        raise BackendUnavailable(self.backend_id, f"{path} produced no response")

    @staticmethod
    def _field(payload: dict[str, Any], name: str, kind: type, path: str) -> Any:
        value = payload.get(name)
        if not isinstance(value, kind):
            raise ProtocolError(f"{path} response lacks a valid '{name}' field")
        return value

    async def query(self, req: MllmRequest) -> str:
        path = "/v1/mllm/query"
        payload = await self._request("POST", path, req.wire_payload())
        return self._field(payload, "text", str, path)

    async def generate(self, req: T2iRequest) -> tuple[bytes, str]:
        path = "/v1/t2i/generate"
        payload = await self._request("POST", path, req.wire_payload())
        encoded = self._field(payload, "image", str, path)
        try:
            data = base64.b64decode(encoded, validate=True)
        except ValueError as e:
            raise ProtocolError(f"{path} returned invalid base64") from e
        return data, str(payload.get("model", ""))

    async def embed(self, image: ImageArtifact, model_tag: str) -> list[float]:
        path = "/v1/embed"
        body = {
            "image": base64.b64encode(image.data).decode("ascii"),
            "model_tag": model_tag,
        }
        payload = await self._request("POST", path, body)
        vector = self._field(payload, "vector", list, path)
        dim = self._field(payload, "dim", int, path)
        if len(vector) != dim:
            raise ProtocolError(f"{path} vector has {len(vector)} entries, dim {dim}")
        try:
            return [float(v) for v in vector]
        except (TypeError, ValueError) as e:
            raise ProtocolError(f"{path} vector has non-numeric entries") from e

    async def capabilities(self) -> Capabilities:
        path = "/v1/capabilities"
        payload = await self._request("GET", path)
        try:
            return Capabilities.model_validate(payload)
        except ValueError as e:
            raise ProtocolError(f"{path} returned an invalid capabilities object") from e

    async def aclose(self) -> None:
        await self._client.aclose()
