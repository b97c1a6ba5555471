"""HTTP facade over retrieval and curation for the companion UI.

Single-tenant, read-only except for curation verdicts; a verdict is fsynced
to the log (and applied to the triplet file) before its 200 returns, so it
survives a process restart.
"""

from __future__ import annotations

import base64
import datetime
import io
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import FileResponse, JSONResponse, Response
from fastapi.staticfiles import StaticFiles
from PIL import Image

from .curation import (Candidate, Verdict, append_verdict, apply_verdicts,
                       load_verdicts)
from .data import Dataset
from .encoders import FingerprintMismatchError
from .retrieval import QUERY_MODES, QuerySpec, RetrievalEngine, compose_query


class CurationQueue:
    """Ordered candidate queue with a durable verdict log.

    Candidates are served highest-similarity first; resolved pairs are
    reloaded from the log on construction, so a restarted service resumes at
    the first unresolved pair.
    """

    def __init__(self, candidates: list[Candidate], verdict_log: str | Path,
                 triplets_path: str | Path | None = None):
        self.candidates = sorted(candidates,
                                 key=lambda c: (-c.similarity, c.pair_id))
        self.by_pair = {c.pair_id: c for c in self.candidates}
        self.verdict_log = Path(verdict_log)
        self.triplets_path = Path(triplets_path) if triplets_path else None
        self.resolved = {v.pair_id: v for v in load_verdicts(self.verdict_log)}

    def next_pair(self) -> Candidate | None:
        for cand in self.candidates:
            if cand.pair_id not in self.resolved:
                return cand
        return None

    def remaining(self) -> int:
        return sum(1 for c in self.candidates if c.pair_id not in self.resolved)

    def submit(self, pair_id: str, decision: str, annotator: str = "") -> Verdict:
        if pair_id not in self.by_pair:
            raise KeyError(f"unknown pair_id {pair_id!r}")
        if pair_id in self.resolved:
            raise VerdictConflict(f"pair {pair_id!r} already has a verdict")
        cand = self.by_pair[pair_id]
        verdict = Verdict(pair_id, cand.target_id, cand.candidate_id, decision,
                          annotator, datetime.datetime.now(
                              datetime.timezone.utc).isoformat())
        append_verdict(self.verdict_log, verdict)
        if decision == "accept" and self.triplets_path is not None:
            apply_verdicts(self.triplets_path, [verdict])
        self.resolved[pair_id] = verdict
        return verdict


class VerdictConflict(ValueError):
    pass


@dataclass
class ServiceState:
    engine: RetrievalEngine
    thumbnails: dict[str, str] = field(default_factory=dict)
    curation: CurationQueue | None = None
    triplets: Dataset | None = None
    frontend_dir: str | None = None

    def register_manifest(self, dataset: Dataset) -> None:
        for rec in dataset.records:
            self.thumbnails.setdefault(rec.image_id, rec.path)


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message})


def _thumbnail_url(image_id: str) -> str:
    return f"/api/v1/thumbnails/{image_id}"


def create_app(state: ServiceState) -> FastAPI:
    app = FastAPI(title="persearch", docs_url=None, redoc_url=None)
    app.state.service = state

    @app.post("/api/v1/retrieve")
    async def retrieve(request: Request):
        body = await request.json()
        if not isinstance(body, dict):
            return _error(400, "body must be a JSON object")
        mode = body.get("mode")
        if mode not in QUERY_MODES:
            return _error(400, f"mode must be one of {list(QUERY_MODES)}")
        k = body.get("k", 10)
        if not isinstance(k, int) or k < 1:
            return _error(400, "k must be a positive integer")
        image_id = body.get("image_id")
        image_b64 = body.get("image_b64")
        caption = body.get("caption") or ""
        tinet_ids = tuple(body.get("tinet_ids") or ())
        engine = state.engine
        try:
            if image_b64 is not None:
                try:
                    pixels = Image.open(io.BytesIO(base64.b64decode(image_b64)))
                    pixels.load()
                except Exception:
                    return _error(400, "image_b64 does not decode to an image")
                f_v = engine.encoder.encode_image(pixels).numpy()
                if mode == "composed":
                    nets = engine._resolve_tinets(tinet_ids)
                    vector = compose_query(engine.encoder, nets, f_v, caption)
                elif mode == "image-only":
                    vector = f_v.astype("float64")
                else:
                    return _error(400, f"mode {mode} needs image_id, not image_b64")
                from .retrieval import rank_gallery
                result = rank_gallery(vector, engine.gallery, k)
            else:
                spec = QuerySpec(mode=mode, image_id=image_id, caption=caption,
                                 tinet_ids=tinet_ids)
                result = engine.search(spec, k)
        except FingerprintMismatchError as exc:
            return _error(409, str(exc))
        except KeyError as exc:
            return _error(404, str(exc.args[0]) if exc.args else "unknown id")
        except ValueError as exc:
            return _error(400, str(exc))
        return JSONResponse(content={"results": [
            {"image_id": id_, "score": float(score),
             "thumbnail_url": _thumbnail_url(id_)}
            for id_, score in zip(result.ranked_ids, result.scores)]})

    @app.get("/api/v1/curation/next")
    async def curation_next():
        if state.curation is None:
            return _error(404, "no active curation session")
        cand = state.curation.next_pair()
        if cand is None:
            return Response(status_code=204)
        return JSONResponse(content={
            "pair_id": cand.pair_id,
            "target_id": cand.target_id,
            "candidate_id": cand.candidate_id,
            "similarity": cand.similarity,
            "remaining": state.curation.remaining(),
            "image_urls": {"target": _thumbnail_url(cand.target_id),
                           "candidate": _thumbnail_url(cand.candidate_id)},
        })

    @app.post("/api/v1/curation/verdict")
    async def curation_verdict(request: Request):
        if state.curation is None:
            return _error(404, "no active curation session")
        body = await request.json()
        pair_id = body.get("pair_id")
        decision = body.get("decision")
        if decision not in ("accept", "reject"):
            return _error(400, "decision must be accept or reject")
        if not isinstance(pair_id, str):
            return _error(400, "pair_id must be a string")
        try:
            verdict = state.curation.submit(pair_id, decision,
                                            body.get("annotator", ""))
        except KeyError as exc:
            return _error(404, str(exc.args[0]))
        except VerdictConflict as exc:
            return _error(409, str(exc))
        return JSONResponse(content={
            "status": "recorded", "pair_id": verdict.pair_id,
            "decision": verdict.decision,
            "remaining": state.curation.remaining()})

    @app.get("/api/v1/thumbnails/{image_id}")
    async def thumbnail(image_id: str):
        path = state.thumbnails.get(image_id)
        if path is None or not Path(path).exists():
            return _error(404, f"no thumbnail for {image_id!r}")
        return FileResponse(path)

    @app.get("/api/v1/images")
    async def list_images(limit: int = 200):
        ids = list(state.thumbnails)[:max(0, limit)]
        return JSONResponse(content={"images": [
            {"image_id": id_, "thumbnail_url": _thumbnail_url(id_)}
            for id_ in ids]})

    @app.get("/api/v1/tinets")
    async def list_tinets():
        return JSONResponse(content={"tinets": sorted(state.engine.tinets)})

    @app.get("/api/v1/triplets")
    async def triplet_list():
        if state.triplets is None:
            return _error(404, "no triplet file loaded")
        return JSONResponse(content={"triplets": [
            {"query_image_id": t.query_image_id,
             "relative_caption": t.relative_caption,
             "target_image_ids": list(t.target_image_ids)}
            for t in state.triplets.triplets]})

    if state.frontend_dir and Path(state.frontend_dir).is_dir():
        app.mount("/ui", StaticFiles(directory=state.frontend_dir, html=True),
                  name="ui")
    return app


def build_service_state(cfg: dict) -> ServiceState:
    """Assemble engine + curation session from a validated run config."""
    from .config import require, section
    from .curation import load_candidates
    from .data import load_manifest
    from .encoders import FeatureCache
    from .tinet import load_checkpoint
    from .training import load_encoder_checkpoint

    encoder = load_encoder_checkpoint(require(cfg, "encoder.checkpoint")).freeze()
    serve_cfg = section(cfg, "serve")
    data_cfg = section(cfg, "data")
    gallery = FeatureCache.load(serve_cfg.get("cache_dir")
                                or require(cfg, "eval.cache_dir"),
                                expected_fingerprint=encoder.fingerprint())
    tinets = {}
    for path in serve_cfg.get("tinets", []) or section(cfg, "eval").get("tinets", []):
        tinets[Path(path).stem] = load_checkpoint(path)
    query_manifest = None
    if "query_manifest" in data_cfg:
        query_manifest = load_manifest(data_cfg["query_manifest"], "image-only")
    engine = RetrievalEngine(encoder, gallery, tinets=tinets,
                             query_manifest=query_manifest)
    state = ServiceState(engine=engine,
                         frontend_dir=serve_cfg.get("frontend_dir"))
    if query_manifest is not None:
        state.register_manifest(query_manifest)
    if "gallery_manifest" in data_cfg:
        gallery_manifest = load_manifest(data_cfg["gallery_manifest"],
                                         "image-caption")
        state.register_manifest(gallery_manifest)
    if "triplets" in data_cfg:
        state.triplets = load_manifest(data_cfg["triplets"], "triplets")
    if "candidates" in serve_cfg and "verdicts" in serve_cfg:
        state.curation = CurationQueue(
            load_candidates(serve_cfg["candidates"]),
            serve_cfg["verdicts"],
            triplets_path=data_cfg.get("triplets"))
    return state
