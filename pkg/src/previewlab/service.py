"""JSON-over-HTTP API for browsing generation trees.

Endpoints:
    GET  /healthz
    POST /sessions                                {model, decoder, seed}
    GET  /sessions/{s}/tree
    POST /sessions/{s}/nodes/{n}/denoise          {steps, sampler}
    POST /sessions/{s}/nodes/{n}/renoise          {t_p, count, seed}
    POST /sessions/{s}/nodes/{n}/steer            {spec}
    GET  /sessions/{s}/nodes/{n}/preview?modality=&which=[&frame=]

Previews are PNG bytes (a single frame, or a horizontal all-frames strip
when no frame is given) and are cached after the first render. Mutations on
one session serialize through the session lock; reads are lock-free.
"""

from __future__ import annotations

from fastapi import FastAPI, Response
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .tree import Session, TreeError


class CreateSession(BaseModel):
    model: str
    decoder: str
    seed: int = 0


class DenoiseRequest(BaseModel):
    steps: int = Field(ge=1)
    sampler: str = "ode"


class RenoiseRequest(BaseModel):
    t_p: int = Field(ge=0)
    count: int = Field(default=1, ge=1, le=64)
    seed: int = 0


class SteerRequest(BaseModel):
    spec: dict


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": {"code": status, "message": message}})


def create_app() -> FastAPI:
    app = FastAPI(title="previewlab service")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    sessions: dict[str, Session] = {}
    app.state.sessions = sessions

    def get_session(sid: str) -> Session:
        if sid not in sessions:
            raise TreeError(f"unknown session {sid}")
        return sessions[sid]

    @app.exception_handler(TreeError)
    async def tree_error_handler(request, exc: TreeError):
        message = str(exc)
        status = 404 if "unknown" in message else 400
        return _error(status, message)

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "sessions": len(sessions)}

    @app.post("/sessions")
    def create_session(req: CreateSession):
        session = Session(req.model, req.decoder, req.seed)
        sessions[session.session_id] = session
        root = session.nodes[session.root_id]
        return {
            "session_id": session.session_id,
            "root": root.to_json(),
            "schedule_T": session.model.schedule.T,
            "modalities": session.modalities(),
            "branches": session.decoder.cfg.branches,
        }

    @app.get("/sessions/{sid}/tree")
    def get_tree(sid: str):
        return get_session(sid).tree_json()

    @app.post("/sessions/{sid}/nodes/{nid}/denoise")
    def denoise(sid: str, nid: str, req: DenoiseRequest):
        if req.sampler not in ("ode", "ancestral"):
            raise TreeError(f"unknown sampler {req.sampler!r}")
        node = get_session(sid).denoise(nid, req.steps, req.sampler)
        return node.to_json()

    @app.post("/sessions/{sid}/nodes/{nid}/renoise")
    def renoise(sid: str, nid: str, req: RenoiseRequest):
        children = get_session(sid).renoise(nid, req.t_p, req.count, req.seed)
        return {"children": [c.to_json() for c in children]}

    @app.post("/sessions/{sid}/nodes/{nid}/steer")
    def steer(sid: str, nid: str, req: SteerRequest):
        node, info = get_session(sid).steer(nid, req.spec)
        return {"node": node.to_json(), **info}

    @app.get("/sessions/{sid}/nodes/{nid}/preview")
    def preview(sid: str, nid: str, modality: str, which: str = "ensemble", frame: int | None = None):
        data = get_session(sid).preview_png(nid, modality, which, frame)
        return Response(content=data, media_type="image/png")

    return app


def serve(host: str, port: int) -> None:
    import uvicorn

    uvicorn.run(create_app(), host=host, port=port, log_level="warning")
