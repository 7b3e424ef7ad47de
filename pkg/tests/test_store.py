import json

import numpy as np
import pytest

from kgforge.errors import EntityNotFoundError, StoreStateError
from kgforge.store import (
    EntityRecord,
    GraphStore,
    Literal,
    export_triples,
    get_neighbors,
    ingest_triples,
    load_entities,
    load_store,
    predicate_stats,
    resolve_entity,
    save_store,
)


def write_lines(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def test_ingest_counts_unique_duplicates_rejected(tmp_path):
    path = write_lines(
        tmp_path / "triples.tsv",
        [
            "a\tp\tb\tentity",
            "a\tp\tc\tentity",
            "a\tq\t7\tliteral",
            "a\tp\tb\tentity",
            "broken\tline",
        ],
    )
    report = ingest_triples(path, GraphStore())
    assert report.to_dict() == {"unique": 3, "duplicates": 1, "rejected": 1}


def test_ingest_logs_rejected_line_number(tmp_path, caplog):
    path = write_lines(tmp_path / "t.tsv", ["a\tp\tb\tentity", "a\tp\tb\tplanet"])
    ingest_triples(path, GraphStore())
    assert "t.tsv:2" in caplog.text


def test_ingest_empty_file(tmp_path):
    path = write_lines(tmp_path / "empty.tsv", [])
    assert ingest_triples(path, GraphStore()).to_dict() == {
        "unique": 0,
        "duplicates": 0,
        "rejected": 0,
    }


def test_ingest_twice_is_idempotent(tmp_path):
    path = write_lines(
        tmp_path / "t.tsv", ["a\tp\tb\tentity", "b\tp\tc\tentity", "x\ty"]
    )
    store = GraphStore()
    first = ingest_triples(path, store)
    second = ingest_triples(path, store)
    assert second.unique == 0
    assert second.duplicates == first.unique
    assert second.rejected == first.rejected


def test_comments_and_provenance_do_not_create_triples(tmp_path):
    path = write_lines(
        tmp_path / "t.tsv",
        ["# header", "a\tp\tb\tentity\tsource-1", "a\tp\tb\tentity\tsource-2"],
    )
    store = GraphStore()
    report = ingest_triples(path, store)
    assert (report.unique, report.duplicates, report.rejected) == (1, 1, 0)
    assert store.triples[0].provenance == "source-1"


def test_ids_are_dense_in_first_seen_order(tmp_path):
    path = write_lines(
        tmp_path / "t.tsv", ["c\tq\ta\tentity", "a\tp\tb\tentity", "b\tq\t5\tliteral"]
    )
    store = GraphStore()
    ingest_triples(path, store)
    assert store.entity_keys == ["c", "a", "b"]
    assert store.predicate_keys == ["q", "p"]
    assert store.triples[2].tail == Literal("5")


def test_sealed_store_rejects_writes_and_unsealed_rejects_reads():
    store = GraphStore()
    store.add_triple("a", "p", "b")
    with pytest.raises(StoreStateError):
        predicate_stats(store)
    store.seal()
    with pytest.raises(StoreStateError):
        store.add_triple("a", "p", "c")


def test_entity_record_dedups_aliases_after_folding():
    record = EntityRecord(0, "Michael Jordan", ["michael jordan", "MJ", "mj", " MJ "])
    assert record.aliases == ["MJ"]
    assert record.popularity == 0.0


def test_entity_record_requires_name():
    with pytest.raises(ValueError):
        EntityRecord(0, "  ")


def test_resolve_entity(people_store):
    assert resolve_entity(people_store, "bulls").entity == people_store.lookup_entity("bulls")
    assert resolve_entity(people_store, "chicago bulls").entity == people_store.lookup_entity(
        "bulls"
    )
    ambiguous = resolve_entity(people_store, "Michael Jordan")
    assert not ambiguous.found and ambiguous.ambiguous
    assert resolve_entity(people_store, "JORDAN_PROF").found
    unknown = resolve_entity(people_store, "nobody")
    assert not unknown.found and not unknown.ambiguous


def test_ids_colliding_after_folding_are_ambiguous():
    store = GraphStore()
    store.add_triple("Paris", "capital_of", "France")
    store.add_triple("paris", "located_in", "Texas")
    store.seal()
    for key in ("Paris", "paris", "PARIS"):
        resolution = resolve_entity(store, key)
        assert not resolution.found and resolution.ambiguous
    assert store.lookup_entity("Paris") != store.lookup_entity("paris")
    assert resolve_entity(store, "france").entity == store.lookup_entity("France")


def test_predicate_stats_example():
    store = GraphStore()
    store.add_triple("a", "p", "b")
    store.add_triple("a", "p", "c")
    store.add_triple("a", "q", "7", tail_kind="literal")
    stats = predicate_stats(store.seal())
    p, q = store.lookup_predicate("p"), store.lookup_predicate("q")
    assert stats[p].frequency == 2 and stats[p].literal_fraction == 0.0
    assert stats[q].frequency == 1 and stats[q].literal_fraction == 1.0


def test_predicate_stats_matches_recount_on_random_stores():
    rng = np.random.default_rng(3)
    for _ in range(20):
        store = GraphStore()
        for _ in range(int(rng.integers(1, 60))):
            kind = "literal" if rng.random() < 0.3 else "entity"
            store.add_triple(
                f"e{rng.integers(8)}", f"p{rng.integers(4)}", f"e{rng.integers(8)}", kind
            )
        stats = predicate_stats(store.seal())
        assert sum(s.frequency for s in stats.values()) == len(store.triples)
        for predicate, stat in stats.items():
            rows = [t for t in store.triples if t.predicate == predicate]
            literal = sum(t.is_literal for t in rows)
            assert stat.frequency == len(rows)
            assert stat.literal_fraction == literal / len(rows)


def test_get_neighbors_order_and_limit():
    store = GraphStore()
    store.add_triple("hub", "q", "x")
    store.add_triple("hub", "p", "z")
    store.add_triple("hub", "p", "y")
    store.entity_id("alone")
    store.seal()
    hub = store.lookup_entity("hub")
    top = get_neighbors(store, hub, "out", limit=2)
    assert [(store.predicate_keys[t.predicate], store.entity_keys[t.tail]) for t in top] == [
        ("q", "x"),
        ("p", "z"),
    ]
    assert get_neighbors(store, store.lookup_entity("alone"), "both") == []
    with pytest.raises(EntityNotFoundError):
        get_neighbors(store, 99)


def test_get_neighbors_self_loop_reported_once():
    store = GraphStore()
    store.add_triple("a", "p", "a")
    store.seal()
    assert len(get_neighbors(store, 0, "both")) == 1


def test_export_after_ingest_reproduces_sorted_file(tmp_path):
    lines = sorted(
        ["a\tp\tb\tentity", "a\tq\t7\tliteral", "b\tp\tc\tentity", "c\tr\ta\tentity"]
    )
    source = write_lines(tmp_path / "in.tsv", lines + [lines[0]])
    store = GraphStore()
    ingest_triples(source, store)
    export_triples(store.seal(), tmp_path / "out.tsv")
    assert (tmp_path / "out.tsv").read_bytes() == "".join(l + "\n" for l in lines).encode()


def test_load_entities_skips_unnamed(tmp_path):
    path = tmp_path / "entities.jsonl"
    path.write_text(
        "\n".join(
            [
                json.dumps({"id": "a", "name": "Alpha", "aliases": ["A"], "type": "letter"}),
                json.dumps({"id": "b"}),
                "not json",
            ]
        ),
        encoding="utf-8",
    )
    store = GraphStore()
    assert load_entities(path, store) == 1
    assert store.entity_keys == ["a", "b"]
    assert store.records[0].entity_type == store.type_names.index("letter")


def test_save_and_load_store_keeps_ids(tmp_path, people_store):
    save_store(people_store, tmp_path / "store")
    loaded = load_store(tmp_path / "store")
    assert loaded.entity_keys == people_store.entity_keys
    assert loaded.predicate_keys == people_store.predicate_keys
    assert loaded.type_names == people_store.type_names
    assert loaded.triples == people_store.triples
    assert loaded.records[0].aliases == people_store.records[0].aliases
    assert loaded.popularity(0) == 100.0
