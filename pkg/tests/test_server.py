import asyncio
import dataclasses
import threading
import time

import httpx
import numpy as np
import pytest
from fastapi.testclient import TestClient

from kgforge.annotate import annotate_document, build_alias_table
from kgforge.config import RerankWeights, ServiceConfig
from kgforge.index import build_index, entity_similarity, entity_types
from kgforge.jsonio import dumps
from kgforge.model import EmbeddingModel
from kgforge.server import Snapshot, create_app
from kgforge.services import neighbors_to_dicts, rank_facts, related_entities, verify_facts

CONFIG = ServiceConfig(store="store", model="v1", index="index", snapshot_id="v1")

VECTORS = [[1, 0.1], [1, 0.2], [0.5, 0.5], [1, 0], [0, 1], [0.2, 1], [0.1, 1]]


def snapshot_for(store, vectors, snapshot_id, extra_names=()):
    names = list(store.entity_keys) + list(extra_names)
    model = EmbeddingModel(
        "translational",
        np.asarray(vectors, dtype=np.float32),
        np.full((store.predicate_count, 2), 0.1, dtype=np.float32),
        names,
        list(store.predicate_keys),
    )
    index = build_index(model, type_of=entity_types(store, model.entity_count))
    return Snapshot(
        snapshot_id,
        store,
        model,
        index,
        model,
        index,
        build_alias_table(store),
        RerankWeights(),
        10,
    )


@pytest.fixture
def snapshots(people_store):
    return {
        "v1": snapshot_for(people_store, VECTORS, "v1"),
        "v2": snapshot_for(people_store, VECTORS + [[0.99, 0.05]], "v2", ["new_entity"]),
    }


@pytest.fixture
def app(snapshots):
    return create_app(CONFIG, loader=lambda config: snapshots[config.model])


@pytest.fixture
def client(app):
    return TestClient(app, raise_server_exceptions=False)


def test_healthz(client):
    response = client.get("/healthz")
    assert response.status_code == 200
    assert response.json() == {"snapshot": "v1", "entities": 7}


def test_annotate_matches_library(client, snapshots):
    text = "Michael Jordan and the Chicago Bulls"
    response = client.post("/annotate", json={"text": text})
    snapshot = snapshots["v1"]
    expected = annotate_document(
        "request", text, snapshot.alias_table, snapshot.model, snapshot.weights, 10
    )
    assert response.status_code == 200
    assert response.content == dumps(expected).encode("utf-8")


def test_verify_matches_library(client, snapshots):
    body = {
        "triples": [{"head": "jordan_player", "predicate": "occupation", "tail": "actor"}],
        "tau": -1.0,
    }
    response = client.post("/verify", json=body)
    expected = verify_facts(snapshots["v1"].model, [(0, 0, 2)], -1.0)
    assert response.content == dumps(expected).encode("utf-8")


def test_verify_empty_batch(client):
    response = client.post("/verify", json={"triples": [], "tau": 0.0})
    assert response.status_code == 200
    assert response.json() == []


def test_rank_matches_library(client, snapshots, people_store):
    response = client.post("/rank", json={"subject": "jordan_player", "predicate": "occupation"})
    expected = rank_facts(snapshots["v1"].model, 0, 0, store=people_store)
    assert response.content == dumps(expected).encode("utf-8")
    explicit = client.post(
        "/rank",
        json={"subject": "Chicago Bulls", "predicate": "member_of", "candidates": ["actor"]},
    )
    assert [c["entity"] for c in explicit.json()["candidates"]] == [2]


def test_related_matches_library(client, snapshots):
    snapshot = snapshots["v1"]
    response = client.get("/related/bulls", params={"k": 3})
    expected = neighbors_to_dicts(
        related_entities(snapshot.related_index, 3, 3), snapshot.model.entity_names
    )
    assert response.content == dumps(expected).encode("utf-8")
    typed = client.get("/related/bulls", params={"k": 10, "type": "person"}).json()
    assert sorted(row["key"] for row in typed) == ["jordan_player", "jordan_prof"]


def test_similar(client, snapshots):
    response = client.get("/similar/jordan_player/bulls")
    value = entity_similarity(snapshots["v1"].model, 0, 3)
    assert response.json()["similarity"] == pytest.approx(value)


def test_malformed_body_is_400(client):
    response = client.post("/verify", json={"triples": [{"head": "bulls"}]})
    assert response.status_code == 400
    fields = {f["field"] for f in response.json()["fields"]}
    assert {"body.tau", "body.triples.0.predicate", "body.triples.0.tail"} <= fields
    assert client.get("/related/bulls", params={"k": 0}).status_code == 400


def test_unknown_entities_are_404(client):
    assert client.get("/related/nobody").status_code == 404
    assert client.get("/related/bulls", params={"type": "galaxy"}).status_code == 404
    body = {"triples": [{"head": "nobody", "predicate": "occupation", "tail": "actor"}], "tau": 0}
    assert client.post("/verify", json=body).status_code == 404
    body = {"subject": "bulls", "predicate": "likes"}
    assert client.post("/rank", json=body).status_code == 404


def test_internal_failure_is_opaque_500(client, mocker):
    mocker.patch("kgforge.server.rank_facts", side_effect=RuntimeError("disk on fire"))
    response = client.post("/rank", json={"subject": "jordan_player", "predicate": "occupation"})
    assert response.status_code == 500
    payload = response.json()
    assert payload["error"] == "internal error"
    assert len(payload["id"]) == 32
    assert "disk" not in response.text


def test_reload_exposes_new_entity(client):
    before = [row["key"] for row in client.get("/related/bulls", params={"k": 10}).json()]
    assert "new_entity" not in before
    response = client.post("/admin/reload", json={"model": "v2", "snapshot_id": "v2"})
    assert response.json() == {"snapshot": "v2", "entities": 8}
    after = client.get("/related/bulls", params={"k": 10}).json()
    assert after[0]["key"] == "new_entity"
    assert client.get("/healthz").json()["snapshot"] == "v2"


@pytest.fixture
def anyio_backend():
    return "asyncio"


@pytest.mark.anyio
async def test_in_flight_request_keeps_old_snapshot(app, mocker):
    entered, release = threading.Event(), threading.Event()
    real = related_entities

    def blocking(*args, **kwargs):
        entered.set()
        release.wait(5)
        return real(*args, **kwargs)

    mocker.patch("kgforge.server.related_entities", side_effect=blocking)
    transport = httpx.ASGITransport(app=app)
    async with httpx.AsyncClient(transport=transport, base_url="http://test") as client:
        in_flight = asyncio.create_task(client.get("/related/bulls", params={"k": 10}))
        while not entered.is_set():
            await asyncio.sleep(0.01)
        reloaded = await client.post("/admin/reload", json={"model": "v2", "snapshot_id": "v2"})
        release.set()
        old = await in_flight
        new = await client.get("/related/bulls", params={"k": 10})

    assert reloaded.json()["snapshot"] == "v2"
    assert len(old.json()) == 6
    assert "new_entity" not in {row["key"] for row in old.json()}
    assert "new_entity" in {row["key"] for row in new.json()}


@pytest.fixture
def related_bodies(snapshots):
    bodies = {}
    for name in snapshots:
        config = dataclasses.replace(CONFIG, model=name, snapshot_id=name)
        with TestClient(create_app(config, loader=lambda c: snapshots[c.model])) as fresh:
            bodies[name] = fresh.get("/related/bulls", params={"k": 10}).json()
    return bodies


@pytest.mark.anyio
async def test_reload_under_concurrent_requests(app, mocker, related_bodies):
    entered = threading.Event()
    real = related_entities

    def slow(*args, **kwargs):
        entered.set()
        time.sleep(0.005)
        return real(*args, **kwargs)

    mocker.patch("kgforge.server.related_entities", side_effect=slow)
    transport = httpx.ASGITransport(app=app)
    async with httpx.AsyncClient(transport=transport, base_url="http://test") as client:
        requests = [
            asyncio.create_task(client.get("/related/bulls", params={"k": 10}))
            for _ in range(100)
        ]
        while not entered.is_set():
            await asyncio.sleep(0.001)
        reloaded = await client.post("/admin/reload", json={"model": "v2", "snapshot_id": "v2"})
        responses = await asyncio.gather(*requests)
        after = await client.get("/related/bulls", params={"k": 10})

    assert reloaded.json()["snapshot"] == "v2"
    assert len(responses) == 100
    assert all(r.status_code == 200 for r in responses)
    bodies = [r.json() for r in responses]
    assert all(body in (related_bodies["v1"], related_bodies["v2"]) for body in bodies)
    assert related_bodies["v1"] in bodies
    assert after.json() == related_bodies["v2"]
