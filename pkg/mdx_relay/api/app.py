"""
FastAPI application for the storage service.

This module exposes the ``/v1`` JSON API: device authentication, chunked
uploads, object reads and usage statistics. Every error is rendered as the
uniform body ``{code, message, detail}``.
"""

import logging
import socket
from typing import Any, Dict, Iterator, List, Optional

from fastapi import Depends, FastAPI, Header, Query, Request
from fastapi.concurrency import run_in_threadpool
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, StreamingResponse
from pydantic import BaseModel, SecretStr, ValidationError

from mdx_relay import __version__
from mdx_relay.core.errors import ManifestValidationError, ParameterError, RelayError
from mdx_relay.core.manifest import FileManifest
from mdx_relay.service.auth import DeviceRegistry, TokenAuthority, TokenGrant
from mdx_relay.service.ledger import Period, aggregate_stats, cumulative_series
from mdx_relay.service.store import ObjectStore

logger = logging.getLogger(__name__)

_STREAM_BLOCK = 1024 * 1024


class TokenRequest(BaseModel):
    """Body of ``POST /v1/auth/token``."""

    device_id: str
    device_secret: SecretStr


class TokenResponse(BaseModel):
    token: str
    expires_at: float
    ttl: float
    device_id: str


class UploadCreated(BaseModel):
    upload_id: str


def create_app(
    store: ObjectStore,
    authority: TokenAuthority,
    registry: Optional[DeviceRegistry] = None,
    title: str = "mdx-relay storage service",
    description: str = "Per-user authenticated storage for relayed facility data",
    version: str = __version__,
) -> FastAPI:
    """
    Create the storage service application.

    Args:
        store: Object store backing the API
        authority: Token authority for device authentication
        registry: Device registry (its organization map feeds usage reports)
        title: API title
        description: API description
        version: API version

    Returns:
        FastAPI application
    """
    app = FastAPI(title=title, description=description, version=version)
    app.state.store = store
    app.state.authority = authority
    organizations = (registry or authority.registry).organizations

    @app.exception_handler(RelayError)
    async def relay_error_handler(request: Request, exc: RelayError) -> JSONResponse:
        if exc.status >= 500:
            logger.error("%s %s failed: %s", request.method, request.url.path, exc.message)
        return JSONResponse(status_code=exc.status, content=exc.to_payload())

    @app.exception_handler(RequestValidationError)
    async def validation_error_handler(request: Request, exc: RequestValidationError) -> JSONResponse:
        err = ParameterError("request validation failed", detail=jsonable_errors(exc.errors()))
        return JSONResponse(status_code=err.status, content=err.to_payload())

    def require_grant(authorization: Optional[str] = Header(None)) -> TokenGrant:
        """Resolve the ``Authorization: Bearer`` header."""
        token = None
        if authorization and authorization.lower().startswith("bearer "):
            token = authorization[7:].strip()
        return authority.validate(token)

    @app.get("/status")
    async def status() -> Dict[str, Any]:
        """Status endpoint to check if the API is running."""
        return {"status": "ok", "version": version}

    @app.post("/v1/auth/token", response_model=TokenResponse)
    def issue_token(body: TokenRequest) -> TokenResponse:
        """Exchange device credentials for a bearer token."""
        issued = authority.issue_token(body.device_id, body.device_secret)
        return TokenResponse(
            token=issued.token.get_secret_value(),
            expires_at=issued.expires_at,
            ttl=issued.expires_at - issued.issued_at,
            device_id=issued.device_id,
        )

    @app.post("/v1/uploads", response_model=UploadCreated)
    async def init_upload(request: Request, grant: TokenGrant = Depends(require_grant)) -> UploadCreated:
        """Open an upload session from a canonical manifest."""
        raw = await request.body()
        try:
            manifest = FileManifest.from_canonical_json(raw)
        except ValidationError as exc:
            raise ManifestValidationError(
                [{"invariant": "schema", "message": str(e["msg"]), "field": ".".join(map(str, e["loc"]))}
                 for e in exc.errors()]
            )
        upload_id = await run_in_threadpool(store.init_upload, grant, manifest)
        return UploadCreated(upload_id=upload_id)

    @app.put("/v1/uploads/{upload_id}/chunks/{index}")
    async def put_chunk(
        upload_id: str,
        index: int,
        request: Request,
        x_chunk_digest: Optional[str] = Header(None),
        grant: TokenGrant = Depends(require_grant),
    ) -> Dict[str, Any]:
        """Upload one chunk; acknowledged only after verification."""
        payload = await request.body()
        ack = await run_in_threadpool(store.put_chunk, grant, upload_id, index, payload, x_chunk_digest)
        return ack.model_dump()

    @app.get("/v1/uploads/{upload_id}")
    def upload_status(upload_id: str, grant: TokenGrant = Depends(require_grant)) -> Dict[str, Any]:
        """Acked and pending chunk indices of a session."""
        return store.upload_status(grant, upload_id).model_dump()

    @app.delete("/v1/uploads/{upload_id}")
    def cancel_upload(upload_id: str, grant: TokenGrant = Depends(require_grant)) -> Dict[str, Any]:
        """Cancel an open session and release its quota reservation."""
        store.cancel_upload(grant, upload_id)
        return {"upload_id": upload_id, "cancelled": True}

    @app.post("/v1/uploads/{upload_id}/complete")
    def complete_upload(upload_id: str, grant: TokenGrant = Depends(require_grant)) -> Dict[str, Any]:
        """Reassemble, verify and publish the upload."""
        return store.complete_upload(grant, upload_id).model_dump()

    @app.get("/v1/objects/{owner}/{relative_path:path}")
    def get_object(owner: str, relative_path: str, grant: TokenGrant = Depends(require_grant)):
        """Stream a committed object."""
        obj, fh = store.get_object(grant, owner, relative_path)

        def stream() -> Iterator[bytes]:
            try:
                for block in iter(lambda: fh.read(_STREAM_BLOCK), b""):
                    yield block
            finally:
                fh.close()

        headers = {
            "Content-Length": str(obj.total_size),
            "X-Object-Id": obj.object_id,
            "X-Whole-Digest": obj.whole_digest.value,
        }
        return StreamingResponse(stream(), media_type="application/octet-stream", headers=headers)

    @app.get("/v1/stats")
    def stats(
        start: Optional[float] = Query(None, alias="from"),
        end: Optional[float] = Query(None, alias="to"),
        grant: TokenGrant = Depends(require_grant),
    ) -> Dict[str, Any]:
        """Usage report over ``[from, to)``."""
        report = aggregate_stats(store.ledger.read(), Period(start=start, end=end), organizations)
        return report.model_dump(mode="json")

    @app.get("/v1/stats/cumulative")
    def stats_cumulative(by: str = "month", grant: TokenGrant = Depends(require_grant)) -> List[Dict[str, Any]]:
        """Cumulative monthly series of usage reports."""
        if by != "month":
            raise ParameterError(f"unsupported bucket {by!r}; only 'month' is supported")
        series = cumulative_series(store.ledger.read(), by=by, organizations=organizations)
        return [{"period": label, "report": report.model_dump(mode="json")} for label, report in series]

    return app


def jsonable_errors(errors: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
    return [{"loc": [str(p) for p in e.get("loc", ())], "msg": str(e.get("msg", ""))} for e in errors]


def bind_socket(host: str, port: int) -> socket.socket:
    """
    Bind a listening TCP socket for uvicorn.

    Binding before uvicorn starts lets callers report an occupied port
    immediately and learn the port chosen for ``port=0``.

    Raises:
        OSError: if the address is unavailable
    """
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sock.bind((host, port))
    except OSError:
        sock.close()
        raise
    sock.listen(128)
    sock.set_inheritable(True)
    return sock


def build_server(app: FastAPI, log_level: str = "warning"):
    """Create (but do not start) a uvicorn server for the application."""
    import uvicorn

    config = uvicorn.Config(app, log_level=log_level.lower(), access_log=False, lifespan="off", log_config=None)
    return uvicorn.Server(config)


def run_app(
    app: FastAPI,
    host: str = "127.0.0.1",
    port: int = 8080,
    log_level: str = "info",
    sock: Optional[socket.socket] = None,
) -> None:
    """
    Run the application until the process is signaled.

    Args:
        app: Application from ``create_app``
        host: Host to listen on
        port: Port to listen on
        log_level: uvicorn log level
        sock: Pre-bound listening socket (overrides host/port)
    """
    sock = sock or bind_socket(host, port)
    server = build_server(app, log_level)
    logger.info("Serving on %s:%d", *sock.getsockname()[:2])
    server.run(sockets=[sock])
