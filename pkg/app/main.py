from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from starlette.middleware.base import BaseHTTPMiddleware
import logging, uuid

from .config import settings
from .logging_conf import configure_logging

configure_logging(run_id="service")
log = logging.getLogger(__name__)

app = FastAPI(title="GABI inverse-problem service")

app.add_middleware(
    CORSMiddleware,
    allow_origins=[settings.allow_origin] if settings.allow_origin != "*" else ["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


class RequestIdMiddleware(BaseHTTPMiddleware):
    async def dispatch(self, request: Request, call_next):
        request_id = request.headers.get("X-Request-ID", str(uuid.uuid4()))
        request.state.request_id = request_id
        response = await call_next(request)
        response.headers["X-Request-ID"] = request_id
        return response


app.add_middleware(RequestIdMiddleware)

from .routes.infer import router as infer_router
from .routes.baseline import router as baseline_router
app.include_router(infer_router, prefix="/infer", tags=["infer"])
app.include_router(baseline_router, prefix="/baseline", tags=["baseline"])


@app.get("/health")
def health_check():
    return {
        "status": "healthy",
        "service": "gabi",
        "checkpoint": settings.checkpoint_path,
        "threads": settings.threads,
    }
