import dataclasses
import logging
import threading
import uuid
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import anyio
import uvicorn
from fastapi import FastAPI, Query, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import Response
from pydantic import BaseModel

from .annotate import AliasTable, annotate_document, build_alias_table, load_alias_table
from .config import RerankWeights, ServiceConfig
from .errors import EntityNotFoundError, IdOutOfRangeError
from .index import KnnIndex, build_index, entity_similarity, entity_types, load_index, load_model
from .jsonio import dumps
from .model import EmbeddingModel
from .services import neighbors_to_dicts, rank_facts, related_entities, verify_facts
from .store import GraphStore, load_store, resolve_entity

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class Snapshot:
    """Everything one request needs; never mutated after construction."""

    id: str
    store: GraphStore
    model: EmbeddingModel
    index: KnnIndex
    related_model: EmbeddingModel
    related_index: KnnIndex
    alias_table: AliasTable
    weights: RerankWeights
    max_candidates: int
    _entity_ids: Dict[str, int] = field(default_factory=dict, repr=False)
    _predicate_ids: Dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._entity_ids = {name: i for i, name in enumerate(self.model.entity_names)}
        self._predicate_ids = {name: i for i, name in enumerate(self.model.predicate_names)}

    def entity(self, key: str) -> int:
        """Model vocabulary first, then store keys and unique canonical names."""
        if key in self._entity_ids:
            return self._entity_ids[key]
        resolution = resolve_entity(self.store, key)
        if resolution.found and resolution.entity < self.model.entity_count:
            return resolution.entity
        raise EntityNotFoundError(key)

    def predicate(self, key: str) -> int:
        if key in self._predicate_ids:
            return self._predicate_ids[key]
        raise EntityNotFoundError(key, f"Unknown predicate: {key!r}")


def load_snapshot(config: ServiceConfig) -> Snapshot:
    store = load_store(config.store)
    model = load_model(config.model)
    index = load_index(config.index, model)
    if config.related_model:
        related_model = load_model(config.related_model)
        if config.related_index:
            related_index = load_index(config.related_index, related_model)
        else:
            related_index = build_index(
                related_model, type_of=entity_types(store, related_model.entity_count)
            )
    else:
        related_model, related_index = model, index
    table = (
        load_alias_table(config.alias_table)
        if config.alias_table
        else build_alias_table(store)
    )
    logger.info(
        "Loaded snapshot %s: %d entities, %d alias keys",
        config.snapshot_id,
        model.entity_count,
        len(table),
    )
    return Snapshot(
        config.snapshot_id,
        store,
        model,
        index,
        related_model,
        related_index,
        table,
        config.weights,
        config.max_candidates,
    )


class SnapshotHolder:
    """Current snapshot reference; reloads build fully before swapping."""

    def __init__(self, config: ServiceConfig, loader: Callable[[ServiceConfig], Snapshot]):
        self.config = config
        self.loader = loader
        self.current = loader(config)
        self._reload_lock = threading.Lock()

    def reload(self, **changes) -> Snapshot:
        with self._reload_lock:
            config = dataclasses.replace(self.config, **changes) if changes else self.config
            snapshot = self.loader(config)
            self.config = config
            self.current = snapshot
        logger.info("Swapped in snapshot %s", snapshot.id)
        return snapshot


class TripleBody(BaseModel):
    head: str
    predicate: str
    tail: str


class VerifyRequest(BaseModel):
    triples: List[TripleBody]
    tau: float


class RankRequest(BaseModel):
    subject: str
    predicate: str
    candidates: Optional[List[str]] = None


class AnnotateRequest(BaseModel):
    text: str
    doc_id: str = "request"


class ReloadRequest(BaseModel):
    snapshot_id: Optional[str] = None
    store: Optional[str] = None
    model: Optional[str] = None
    index: Optional[str] = None
    related_model: Optional[str] = None
    related_index: Optional[str] = None
    alias_table: Optional[str] = None


def _json(payload, status_code: int = 200) -> Response:
    return Response(dumps(payload), status_code=status_code, media_type="application/json")


def create_app(
    config: ServiceConfig, loader: Callable[[ServiceConfig], Snapshot] = load_snapshot
) -> FastAPI:
    holder = SnapshotHolder(config, loader)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        anyio.to_thread.current_default_thread_limiter().total_tokens = max(
            holder.config.workers, 1
        )
        yield

    app = FastAPI(title="kgforge", lifespan=lifespan)
    app.state.snapshots = holder

    @app.exception_handler(RequestValidationError)
    async def validation_error(request: Request, exc: RequestValidationError):
        fields = [
            {"field": ".".join(str(part) for part in error["loc"]), "message": error["msg"]}
            for error in exc.errors()
        ]
        return _json({"error": "invalid request", "fields": fields}, 400)

    @app.exception_handler(EntityNotFoundError)
    async def not_found(request: Request, exc: EntityNotFoundError):
        return _json({"error": str(exc)}, 404)

    @app.exception_handler(IdOutOfRangeError)
    async def out_of_range(request: Request, exc: IdOutOfRangeError):
        return _json({"error": str(exc)}, 404)

    @app.exception_handler(Exception)
    async def internal_error(request: Request, exc: Exception):
        error_id = uuid.uuid4().hex
        logger.error("Request %s %s failed [%s]", request.method, request.url.path, error_id, exc_info=exc)
        return _json({"error": "internal error", "id": error_id}, 500)

    @app.get("/healthz")
    def healthz():
        snapshot = holder.current
        return _json({"snapshot": snapshot.id, "entities": snapshot.model.entity_count})

    @app.post("/annotate")
    def annotate(body: AnnotateRequest):
        snapshot = holder.current
        annotation = annotate_document(
            body.doc_id,
            body.text,
            snapshot.alias_table,
            snapshot.model,
            snapshot.weights,
            snapshot.max_candidates,
        )
        return _json(annotation)

    @app.get("/related/{entity}")
    def related(
        entity: str,
        k: int = Query(10, ge=1),
        type: Optional[str] = None,
        nprobe: int = Query(1, ge=1),
    ):
        snapshot = holder.current
        entity_id = snapshot.entity(entity)
        type_filter = None
        if type is not None:
            if type not in snapshot.store.type_names:
                raise EntityNotFoundError(type, f"Unknown type: {type!r}")
            type_filter = snapshot.store.type_names.index(type)
        neighbors = related_entities(snapshot.related_index, entity_id, k, type_filter, nprobe)
        return _json(neighbors_to_dicts(neighbors, snapshot.related_model.entity_names))

    @app.post("/verify")
    def verify(body: VerifyRequest):
        snapshot = holder.current
        triples = [
            (snapshot.entity(t.head), snapshot.predicate(t.predicate), snapshot.entity(t.tail))
            for t in body.triples
        ]
        return _json(verify_facts(snapshot.model, triples, body.tau))

    @app.post("/rank")
    def rank(body: RankRequest):
        snapshot = holder.current
        candidates = (
            None if body.candidates is None else [snapshot.entity(c) for c in body.candidates]
        )
        ranked = rank_facts(
            snapshot.model,
            snapshot.entity(body.subject),
            snapshot.predicate(body.predicate),
            candidates,
            store=snapshot.store,
        )
        return _json(ranked)

    @app.get("/similar/{a}/{b}")
    def similar(a: str, b: str, metric: str = Query("cosine", pattern="^(cosine|euclidean)$")):
        snapshot = holder.current
        value = entity_similarity(
            snapshot.related_model, snapshot.entity(a), snapshot.entity(b), metric
        )
        return _json({"a": a, "b": b, "metric": metric, "similarity": value})

    @app.post("/admin/reload")
    def reload(body: Optional[ReloadRequest] = None):
        changes = {} if body is None else body.model_dump(exclude_none=True)
        snapshot = holder.reload(**changes)
        return _json({"snapshot": snapshot.id, "entities": snapshot.model.entity_count})

    return app


def serve(config: ServiceConfig) -> None:
    """Run the HTTP service until interrupted."""
    app = create_app(config)
    uvicorn.run(app, host=config.host, port=config.port, log_level="info")
