import json
import logging
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

from .errors import EntityNotFoundError, StoreStateError

logger = logging.getLogger(__name__)

TAIL_KINDS = ("entity", "literal")
DIRECTIONS = ("out", "in", "both")


def fold(text: str) -> str:
    """Case-fold and collapse whitespace for name lookup."""
    return " ".join(text.lower().split())


@dataclass(frozen=True)
class Literal:
    value: str


@dataclass(frozen=True)
class Triple:
    head: int
    predicate: int
    tail: Union[int, Literal]
    provenance: Optional[str] = field(default=None, compare=False)

    @property
    def is_literal(self) -> bool:
        return isinstance(self.tail, Literal)


@dataclass
class EntityRecord:
    id: int
    canonical_name: str
    aliases: List[str] = field(default_factory=list)
    entity_type: Optional[int] = None
    popularity: float = 0.0

    def __post_init__(self):
        if not self.canonical_name or not self.canonical_name.strip():
            raise ValueError(f"Entity {self.id} has an empty canonical name")
        if self.popularity is None:
            self.popularity = 0.0
        if self.popularity < 0:
            raise ValueError(f"Entity {self.id} has negative popularity")
        seen = {fold(self.canonical_name)}
        aliases = []
        for alias in self.aliases:
            key = fold(alias)
            if key and key not in seen:
                seen.add(key)
                aliases.append(alias)
        self.aliases = aliases


@dataclass
class IngestReport:
    unique: int = 0
    duplicates: int = 0
    rejected: int = 0

    def to_dict(self) -> Dict[str, int]:
        return {"unique": self.unique, "duplicates": self.duplicates, "rejected": self.rejected}


@dataclass(frozen=True)
class Resolution:
    entity: Optional[int]
    ambiguous: bool = False

    @property
    def found(self) -> bool:
        return self.entity is not None


@dataclass(frozen=True)
class PredicateStat:
    frequency: int
    literal_fraction: float

    def to_dict(self):
        return {"frequency": self.frequency, "literal_fraction": self.literal_fraction}


class GraphStore:
    """Dictionary-encoded triple store.

    Writable until :meth:`seal`; afterwards read-only and safe to share
    between threads.
    """

    def __init__(self):
        self.entity_keys: List[str] = []
        self.predicate_keys: List[str] = []
        self.type_names: List[str] = []
        self.records: Dict[int, EntityRecord] = {}
        self.triples: List[Triple] = []
        self.sealed = False
        self._entity_index: Dict[str, int] = {}
        self._predicate_index: Dict[str, int] = {}
        self._type_index: Dict[str, int] = {}
        self._triple_set = set()
        self._write_lock = threading.Lock()
        self._out: List[List[int]] = []
        self._in: List[List[int]] = []
        self._key_index: Dict[str, List[int]] = {}
        self._name_index: Dict[str, List[int]] = {}

    @property
    def entity_count(self) -> int:
        return len(self.entity_keys)

    @property
    def predicate_count(self) -> int:
        return len(self.predicate_keys)

    def _check_writable(self):
        if self.sealed:
            raise StoreStateError("Store is sealed; no further writes are accepted")

    def check_readable(self):
        if not self.sealed:
            raise StoreStateError("Store must be sealed before it is read")

    def entity_id(self, key: str) -> int:
        """Return the id for ``key``, assigning the next dense id if new."""
        entity = self._entity_index.get(key)
        if entity is None:
            self._check_writable()
            entity = len(self.entity_keys)
            self._entity_index[key] = entity
            self.entity_keys.append(key)
        return entity

    def predicate_id(self, key: str) -> int:
        predicate = self._predicate_index.get(key)
        if predicate is None:
            self._check_writable()
            predicate = len(self.predicate_keys)
            self._predicate_index[key] = predicate
            self.predicate_keys.append(key)
        return predicate

    def type_id(self, name: str) -> int:
        type_id = self._type_index.get(name)
        if type_id is None:
            self._check_writable()
            type_id = len(self.type_names)
            self._type_index[name] = type_id
            self.type_names.append(name)
        return type_id

    def lookup_entity(self, key: str) -> Optional[int]:
        return self._entity_index.get(key)

    def lookup_predicate(self, key: str) -> Optional[int]:
        return self._predicate_index.get(key)

    def add_triple(
        self,
        head: str,
        predicate: str,
        tail: str,
        tail_kind: str = "entity",
        provenance: Optional[str] = None,
    ) -> bool:
        """Insert a triple by external keys; False if it was already stored."""
        with self._write_lock:
            self._check_writable()
            h = self.entity_id(head)
            p = self.predicate_id(predicate)
            t = self.entity_id(tail) if tail_kind == "entity" else Literal(tail)
            triple = Triple(h, p, t, provenance)
            if triple in self._triple_set:
                return False
            self._triple_set.add(triple)
            self.triples.append(triple)
            return True

    def set_record(
        self,
        key: str,
        name: str,
        aliases: List[str] = (),
        entity_type: Optional[str] = None,
        popularity: Optional[float] = None,
    ) -> EntityRecord:
        with self._write_lock:
            self._check_writable()
            entity = self.entity_id(key)
            record = EntityRecord(
                id=entity,
                canonical_name=name,
                aliases=list(aliases or []),
                entity_type=self.type_id(entity_type) if entity_type else None,
                popularity=float(popularity) if popularity is not None else 0.0,
            )
            self.records[entity] = record
            return record

    def seal(self) -> "GraphStore":
        """Freeze the store and build read indexes."""
        if self.sealed:
            return self
        out = [[] for _ in range(self.entity_count)]
        inc = [[] for _ in range(self.entity_count)]
        for position, triple in enumerate(self.triples):
            if not triple.is_literal:
                out[triple.head].append(position)
                inc[triple.tail].append(position)
        self._out, self._in = out, inc
        keys = defaultdict(list)
        for entity, key in enumerate(self.entity_keys):
            keys[fold(key)].append(entity)
        self._key_index = dict(keys)
        names = defaultdict(list)
        for entity, record in sorted(self.records.items()):
            names[fold(record.canonical_name)].append(entity)
        self._name_index = dict(names)
        self.sealed = True
        return self

    def entity_triples(self) -> Iterator[Triple]:
        self.check_readable()
        return (t for t in self.triples if not t.is_literal)

    def popularity(self, entity: int) -> float:
        record = self.records.get(entity)
        return record.popularity if record else 0.0

    def type_of(self, entity: int) -> Optional[int]:
        record = self.records.get(entity)
        return record.entity_type if record else None

    def tail_key(self, triple: Triple) -> str:
        if triple.is_literal:
            return triple.tail.value
        return self.entity_keys[triple.tail]


def _parse_line(line: str) -> Optional[Tuple[str, str, str, str, Optional[str]]]:
    columns = [c.strip() for c in line.rstrip("\r\n").split("\t")]
    if len(columns) not in (4, 5):
        return None
    head, predicate, tail, kind = columns[:4]
    provenance = columns[4] if len(columns) == 5 and columns[4] else None
    if not head or not predicate or not tail or kind not in TAIL_KINDS:
        return None
    return head, predicate, tail, kind, provenance


def ingest_triples(path: Union[str, Path], store: GraphStore) -> IngestReport:
    """Ingest a triples TSV file; malformed lines are counted and skipped."""
    report = IngestReport()
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            parsed = _parse_line(line)
            if parsed is None:
                report.rejected += 1
                logger.warning("%s:%d: malformed triple line, skipped", path, line_number)
                continue
            if store.add_triple(*parsed):
                report.unique += 1
            else:
                report.duplicates += 1
    logger.info(
        "Ingested %s: %d unique, %d duplicates, %d rejected",
        path,
        report.unique,
        report.duplicates,
        report.rejected,
    )
    return report


def load_entities(path: Union[str, Path], store: GraphStore) -> int:
    """Load entity metadata JSONL; entities without a name get no record."""
    loaded = 0
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
                key = str(data["id"])
            except (json.JSONDecodeError, KeyError, TypeError):
                logger.warning("%s:%d: malformed entity line, skipped", path, line_number)
                continue
            name = data.get("name")
            if not name or not str(name).strip():
                store.entity_id(key)
                continue
            store.set_record(
                key,
                str(name),
                aliases=data.get("aliases") or [],
                entity_type=data.get("type"),
                popularity=data.get("popularity"),
            )
            loaded += 1
    return loaded


def resolve_entity(store: GraphStore, key: str) -> Resolution:
    """Resolve an external id or a unique canonical name to an entity id.

    Ids that collide after case folding are ambiguous, like shared names.
    """
    store.check_readable()
    folded = fold(key)
    ids = store._key_index.get(folded, [])
    if len(ids) == 1:
        return Resolution(ids[0])
    if ids:
        return Resolution(None, ambiguous=True)
    matches = store._name_index.get(folded, [])
    if len(matches) == 1:
        return Resolution(matches[0])
    return Resolution(None, ambiguous=len(matches) > 1)


def predicate_stats(store: GraphStore) -> Dict[int, PredicateStat]:
    store.check_readable()
    frequency = defaultdict(int)
    literals = defaultdict(int)
    for triple in store.triples:
        frequency[triple.predicate] += 1
        if triple.is_literal:
            literals[triple.predicate] += 1
    return {
        p: PredicateStat(frequency[p], literals[p] / frequency[p])
        for p in sorted(frequency)
    }


def get_neighbors(
    store: GraphStore, entity: int, direction: str = "out", limit: int = 100
) -> List[Triple]:
    """Entity-tail triples touching ``entity``, ordered by predicate then neighbor."""
    store.check_readable()
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    if limit < 1:
        raise ValueError("limit must be a positive integer")
    if not 0 <= entity < store.entity_count:
        raise EntityNotFoundError(entity)
    positions = set()
    if direction in ("out", "both"):
        positions.update(store._out[entity])
    if direction in ("in", "both"):
        positions.update(store._in[entity])
    triples = [store.triples[p] for p in positions]

    def order(t: Triple):
        neighbor = t.tail if t.head == entity else t.head
        return (t.predicate, neighbor, t.head, t.tail)

    return sorted(triples, key=order)[:limit]


def _triple_line(store: GraphStore, triple: Triple) -> Tuple[str, str, str, str]:
    kind = "literal" if triple.is_literal else "entity"
    return (
        store.entity_keys[triple.head],
        store.predicate_keys[triple.predicate],
        store.tail_key(triple),
        kind,
    )


def export_triples(store: GraphStore, path: Union[str, Path]) -> int:
    """Write the stored triple set as canonically sorted TSV."""
    rows = sorted(_triple_line(store, t) for t in store.triples)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write("\t".join(row) + "\n")
    return len(rows)


def save_store(store: GraphStore, directory: Union[str, Path]) -> None:
    """Persist dictionaries and triples so ids are stable across reloads."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "types.txt").write_text(
        "".join(f"{name}\n" for name in store.type_names), encoding="utf-8"
    )
    (directory / "predicates.txt").write_text(
        "".join(f"{key}\n" for key in store.predicate_keys), encoding="utf-8"
    )
    with open(directory / "entities.jsonl", "w", encoding="utf-8") as f:
        for entity, key in enumerate(store.entity_keys):
            data = {"id": key}
            record = store.records.get(entity)
            if record is not None:
                data["name"] = record.canonical_name
                data["aliases"] = record.aliases
                data["type"] = (
                    store.type_names[record.entity_type]
                    if record.entity_type is not None
                    else None
                )
                data["popularity"] = record.popularity
            f.write(json.dumps(data, ensure_ascii=False) + "\n")
    with open(directory / "triples.tsv", "w", encoding="utf-8", newline="\n") as f:
        for triple in store.triples:
            row = list(_triple_line(store, triple))
            if triple.provenance:
                row.append(triple.provenance)
            f.write("\t".join(row) + "\n")


def load_store(directory: Union[str, Path], seal: bool = True) -> GraphStore:
    directory = Path(directory)
    store = GraphStore()
    for name in (directory / "types.txt").read_text(encoding="utf-8").splitlines():
        store.type_id(name)
    load_entities(directory / "entities.jsonl", store)
    for key in (directory / "predicates.txt").read_text(encoding="utf-8").splitlines():
        store.predicate_id(key)
    ingest_triples(directory / "triples.tsv", store)
    return store.seal() if seal else store
