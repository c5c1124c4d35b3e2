"""
HTTP client for the storage service ``/v1`` API.

Error bodies are mapped back to the ``RelayError`` subclass registered for
their code. Transport failures and unrecognized server errors become
``TransientNetworkError`` so callers can retry them.
"""

import logging
import time
from typing import Any, Dict, List, Optional

import httpx

from mdx_relay.core.errors import RelayError, TransientNetworkError, error_from_payload
from mdx_relay.core.manifest import FileManifest
from mdx_relay.core.models import ChunkAck, CommitReceipt, DeviceCredential, SessionToken, UploadStatus

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 60.0


class StorageClient:
    """
    Thin typed wrapper over ``httpx.Client``.

    Args:
        base_url: Service URL, e.g. ``http://127.0.0.1:8080``
        http: Pre-built client (a FastAPI ``TestClient`` in tests); its base URL is used
        timeout: Per-request timeout in seconds
    """

    def __init__(
        self,
        base_url: Optional[str] = None,
        http: Optional[httpx.Client] = None,
        timeout: float = DEFAULT_TIMEOUT,
    ):
        if http is None:
            if not base_url:
                raise ValueError("either base_url or http is required")
            http = httpx.Client(base_url=base_url.rstrip("/"), timeout=timeout)
        self.http = http

    def close(self) -> None:
        self.http.close()

    def __enter__(self) -> "StorageClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- plumbing -------------------------------------------------------

    def _request(
        self,
        method: str,
        path: str,
        token: Optional[SessionToken] = None,
        **kwargs: Any,
    ) -> httpx.Response:
        headers = dict(kwargs.pop("headers", None) or {})
        if token is not None:
            headers["Authorization"] = f"Bearer {token.token.get_secret_value()}"
        try:
            response = self.http.request(method, path, headers=headers, **kwargs)
        except httpx.TransportError as exc:
            raise TransientNetworkError(f"{method} {path}: {exc.__class__.__name__}: {exc}") from exc
        if response.status_code >= 400:
            raise self._error(response)
        return response

    @staticmethod
    def _error(response: httpx.Response) -> RelayError:
        try:
            payload = response.json()
        except ValueError:
            payload = response.text
        err = error_from_payload(payload, response.status_code)
        if type(err) is RelayError and response.status_code >= 500:
            return TransientNetworkError(err.message, detail=err.detail)
        return err

    # -- API ------------------------------------------------------------

    def issue_token(self, credential: DeviceCredential) -> SessionToken:
        """
        Authenticate the device.

        The returned token's lifetime is anchored on the local clock so
        refresh scheduling does not depend on clock agreement with the service.
        """
        received = time.time()
        body = self._request(
            "POST",
            "/v1/auth/token",
            json={
                "device_id": credential.device_id,
                "device_secret": credential.device_secret.get_secret_value(),
            },
        ).json()
        return SessionToken(
            token=body["token"],
            expires_at=received + float(body["ttl"]),
            device_id=body.get("device_id", credential.device_id),
            issued_at=received,
        )

    def init_upload(self, token: SessionToken, manifest: FileManifest) -> str:
        response = self._request(
            "POST",
            "/v1/uploads",
            token,
            content=manifest.to_canonical_json().encode("utf-8"),
            headers={"Content-Type": "application/json"},
        )
        return response.json()["upload_id"]

    def put_chunk(self, token: SessionToken, upload_id: str, index: int, payload: bytes, digest: str) -> ChunkAck:
        response = self._request(
            "PUT",
            f"/v1/uploads/{upload_id}/chunks/{index}",
            token,
            content=payload,
            headers={"Content-Type": "application/octet-stream", "X-Chunk-Digest": digest},
        )
        return ChunkAck.model_validate(response.json())

    def upload_status(self, token: SessionToken, upload_id: str) -> UploadStatus:
        return UploadStatus.model_validate(self._request("GET", f"/v1/uploads/{upload_id}", token).json())

    def cancel_upload(self, token: SessionToken, upload_id: str) -> None:
        self._request("DELETE", f"/v1/uploads/{upload_id}", token)

    def complete_upload(self, token: SessionToken, upload_id: str) -> CommitReceipt:
        return CommitReceipt.model_validate(self._request("POST", f"/v1/uploads/{upload_id}/complete", token).json())

    def get_object(self, token: SessionToken, owner: str, relative_path: str) -> bytes:
        """Download a committed object."""
        return self._request("GET", f"/v1/objects/{owner}/{relative_path}", token).content

    def stats(self, token: SessionToken, start: Optional[float] = None, end: Optional[float] = None) -> Dict[str, Any]:
        params = {k: v for k, v in (("from", start), ("to", end)) if v is not None}
        return self._request("GET", "/v1/stats", token, params=params).json()

    def stats_cumulative(self, token: SessionToken, by: str = "month") -> List[Dict[str, Any]]:
        return self._request("GET", "/v1/stats/cumulative", token, params={"by": by}).json()
