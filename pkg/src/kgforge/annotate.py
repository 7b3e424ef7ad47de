import json
import logging
import math
import re
import threading
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import xxhash
from rapidfuzz.distance import Levenshtein

from .config import RerankWeights
from .errors import CandidateError, CorruptStateError, KgForgeError, StaleMentionError
from .jsonio import dumps
from .model import EmbeddingModel
from .store import GraphStore, fold

logger = logging.getLogger(__name__)

TOKEN = re.compile(r"\w+")
ALIAS_TABLE_VERSION = 1
_SECOND_NS = 1_000_000_000


@dataclass(frozen=True)
class AliasEntity:
    key: str
    name: str
    popularity: float
    entity_type: Optional[str] = None


@dataclass
class AliasTable:
    """Folded alias -> [(entity, popularity)], most popular first."""

    entries: Dict[str, List[Tuple[int, float]]] = field(default_factory=dict)
    entities: Dict[int, AliasEntity] = field(default_factory=dict)
    type_terms: Dict[str, str] = field(default_factory=dict)
    skipped: int = 0
    max_tokens: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def candidates(self, key: str) -> List[Tuple[int, float]]:
        return self.entries[key]


def _type_term_forms(type_name: str) -> List[str]:
    term = fold(type_name.replace("_", " "))
    forms = [term]
    if term.endswith("y") and len(term) > 1:
        forms.append(term[:-1] + "ies")
    elif term.endswith(("s", "x", "ch", "sh")):
        forms.append(term + "es")
    else:
        forms.append(term + "s")
    return forms


def build_alias_table(store: GraphStore) -> AliasTable:
    """Index canonical names and aliases; entities without a record are skipped."""
    store.check_readable()
    grouped: Dict[str, Dict[int, float]] = defaultdict(dict)
    table = AliasTable()
    for entity in range(store.entity_count):
        record = store.records.get(entity)
        if record is None:
            table.skipped += 1
            continue
        type_name = (
            store.type_names[record.entity_type] if record.entity_type is not None else None
        )
        table.entities[entity] = AliasEntity(
            store.entity_keys[entity], record.canonical_name, record.popularity, type_name
        )
        for surface in [record.canonical_name, *record.aliases]:
            key = fold(surface)
            if key:
                grouped[key][entity] = record.popularity
    for key in sorted(grouped):
        table.entries[key] = sorted(grouped[key].items(), key=lambda c: (-c[1], c[0]))
        table.max_tokens = max(table.max_tokens, len(TOKEN.findall(key)))
    for type_name in store.type_names:
        for form in _type_term_forms(type_name):
            table.type_terms.setdefault(form, type_name)
    logger.info(
        "Alias table: %d keys, %d entities skipped without a name",
        len(table.entries),
        table.skipped,
    )
    return table


def save_alias_table(table: AliasTable, path: Union[str, Path]) -> None:
    data = {
        "version": ALIAS_TABLE_VERSION,
        "skipped": table.skipped,
        "entities": {
            str(e): [a.key, a.name, a.popularity, a.entity_type]
            for e, a in sorted(table.entities.items())
        },
        "entries": {k: [[e, p] for e, p in v] for k, v in table.entries.items()},
        "type_terms": table.type_terms,
    }
    Path(path).write_text(json.dumps(data, ensure_ascii=False), encoding="utf-8")


def load_alias_table(path: Union[str, Path]) -> AliasTable:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if data.get("version") != ALIAS_TABLE_VERSION:
        raise ValueError(f"{path}: unsupported alias table version {data.get('version')!r}")
    table = AliasTable(skipped=data["skipped"], type_terms=dict(data["type_terms"]))
    for entity, (key, name, popularity, entity_type) in data["entities"].items():
        table.entities[int(entity)] = AliasEntity(key, name, popularity, entity_type)
    for key, candidates in data["entries"].items():
        table.entries[key] = [(int(e), float(p)) for e, p in candidates]
        table.max_tokens = max(table.max_tokens, len(TOKEN.findall(key)))
    return table


@dataclass(frozen=True)
class Mention:
    doc_id: str
    start: int
    end: int
    surface: str
    candidates: Tuple[int, ...] = ()

    @property
    def key(self) -> str:
        return fold(self.surface)


def detect_mentions(text: str, table: AliasTable, doc_id: str = "") -> List[Mention]:
    """Greedy longest match over word-token spans, left to right, no overlaps."""
    tokens = [m.span() for m in TOKEN.finditer(text)]
    mentions = []
    i = 0
    while i < len(tokens):
        longest = min(table.max_tokens, len(tokens) - i)
        for n in range(longest, 0, -1):
            start, end = tokens[i][0], tokens[i + n - 1][1]
            surface = text[start:end]
            if fold(surface) in table:
                mentions.append(Mention(doc_id, start, end, surface))
                i += n
                break
        else:
            i += 1
    return mentions


def generate_candidates(mention: Mention, table: AliasTable, max_c: int) -> Mention:
    if max_c < 1:
        raise ValueError("max_c must be a positive integer")
    if mention.key not in table:
        raise StaleMentionError(f"Alias {mention.key!r} is not in the alias table")
    top = table.candidates(mention.key)[:max_c]
    return Mention(
        mention.doc_id,
        mention.start,
        mention.end,
        mention.surface,
        tuple(entity for entity, _ in top),
    )


ContextFn = Callable[[Mention, Sequence[Mention], EmbeddingModel], np.ndarray]


def co_mention_context(
    mention: Mention, mentions: Sequence[Mention], model: EmbeddingModel
) -> np.ndarray:
    """Mean embedding of the document's other unambiguous mentions, else zeros."""
    anchors = [
        m.candidates[0]
        for m in mentions
        if len(m.candidates) == 1
        and (m.start, m.end) != (mention.start, mention.end)
        and m.candidates[0] < model.entity_count
    ]
    if not anchors:
        return np.zeros(model.dim, dtype=np.float32)
    return model.entities[anchors].mean(axis=0)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b)) / (na * nb)


def rerank_candidates(
    mention: Mention,
    mentions: Sequence[Mention],
    model: EmbeddingModel,
    weights: RerankWeights,
    table: AliasTable,
    context_fn: ContextFn = co_mention_context,
) -> Tuple[int, float]:
    """Pick the candidate maximizing context, popularity and lexical evidence.

    Ties go to the lowest entity id.
    """
    if not mention.candidates:
        raise CandidateError(f"Mention {mention.surface!r} has no candidates")
    missing = [c for c in mention.candidates if not 0 <= c < model.entity_count]
    if missing:
        raise CandidateError(f"Candidates {missing} are not covered by the model")
    context = context_fn(mention, mentions, model)
    popularity = {c: _popularity(table, c) for c in mention.candidates}
    denominator = math.log1p(max(popularity.values()))
    surface = fold(mention.surface)
    best, best_score = None, -math.inf
    for candidate in sorted(mention.candidates):
        prior = math.log1p(popularity[candidate]) / denominator if denominator > 0 else 0.0
        info = table.entities.get(candidate)
        lexical = (
            Levenshtein.normalized_similarity(surface, fold(info.name)) if info else 0.0
        )
        score = (
            weights.alpha * _cosine(context, model.entities[candidate])
            + weights.beta * prior
            + weights.delta * lexical
        )
        if score > best_score:
            best, best_score = candidate, score
    return best, best_score


def _popularity(table: AliasTable, entity: int) -> float:
    info = table.entities.get(entity)
    return info.popularity if info else 0.0


def content_hash(text: str) -> str:
    return f"{xxhash.xxh3_64_intdigest(text.encode('utf-8')):016x}"


@dataclass(frozen=True)
class LinkedMention:
    start: int
    end: int
    surface: str
    entity: str
    entity_type: Optional[str]
    score: float

    def to_dict(self) -> Dict:
        return {
            "start": self.start,
            "end": self.end,
            "surface": self.surface,
            "entity": self.entity,
            "type": self.entity_type,
            "score": self.score,
        }


@dataclass(frozen=True)
class Annotation:
    doc_id: str
    content_hash: str
    mentions: List[LinkedMention]
    types: Optional[List[Dict]] = None

    def to_dict(self) -> Dict:
        data = {
            "doc_id": self.doc_id,
            "hash": self.content_hash,
            "mentions": [m.to_dict() for m in self.mentions],
        }
        if self.types is not None:
            data["types"] = self.types
        return data


def detect_type_terms(text: str, table: AliasTable) -> List[Dict]:
    """Single-token type keywords such as "movies" outside any entity mention."""
    found = []
    for match in TOKEN.finditer(text):
        type_name = table.type_terms.get(fold(match.group()))
        if type_name is not None:
            found.append(
                {"start": match.start(), "end": match.end(), "surface": match.group(), "type": type_name}
            )
    return found


def annotate_document(
    doc_id: str,
    text: str,
    table: AliasTable,
    model: EmbeddingModel,
    weights: RerankWeights,
    max_candidates: int = 10,
    detect_types: bool = False,
    context_fn: ContextFn = co_mention_context,
) -> Annotation:
    """Detect, generate candidates and rerank every mention of one document."""
    mentions = []
    for mention in detect_mentions(text, table, doc_id):
        try:
            mentions.append(generate_candidates(mention, table, max_candidates))
        except KgForgeError as e:
            logger.warning("%s [%d, %d): %s", doc_id, mention.start, mention.end, e)
    linked = []
    for mention in mentions:
        try:
            entity, score = rerank_candidates(mention, mentions, model, weights, table, context_fn)
        except KgForgeError as e:
            logger.warning("%s [%d, %d): %s", doc_id, mention.start, mention.end, e)
            continue
        info = table.entities.get(entity)
        linked.append(
            LinkedMention(
                mention.start,
                mention.end,
                mention.surface,
                info.key if info else str(entity),
                info.entity_type if info else None,
                score,
            )
        )
    types = None
    if detect_types:
        covered = [(m.start, m.end) for m in mentions]
        types = [
            t
            for t in detect_type_terms(text, table)
            if not any(s <= t["start"] < e for s, e in covered)
        ]
    return Annotation(doc_id, content_hash(text), linked, types)


@dataclass
class CorpusReport:
    annotated: int = 0
    skipped: int = 0
    removed: int = 0
    unreadable: int = 0

    def to_dict(self) -> Dict[str, int]:
        data = {"annotated": self.annotated, "skipped": self.skipped, "removed": self.removed}
        if self.unreadable:
            data["unreadable"] = self.unreadable
        return data


class DocumentReader:
    """Reads corpus files and counts how many it touched."""

    def __init__(self):
        self.reads = 0
        self._lock = threading.Lock()

    def __call__(self, path: Path) -> str:
        with self._lock:
            self.reads += 1
        return path.read_text(encoding="utf-8")


def _load_state(state_path: Path) -> Dict[str, Dict]:
    if not state_path.exists():
        return {}
    hint = "; re-run with --full to rebuild it"
    try:
        state = json.loads(state_path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CorruptStateError(f"{state_path}: unreadable state ({e}){hint}") from None
    if not isinstance(state, dict) or not all(
        isinstance(v, dict) and isinstance(v.get("hash"), str) for v in state.values()
    ):
        raise CorruptStateError(f"{state_path}: unexpected state layout{hint}")
    return state


def _load_annotation_lines(path: Path) -> Dict[str, str]:
    lines = {}
    if not path.exists():
        return lines
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if line:
                try:
                    lines[json.loads(line)["doc_id"]] = line
                except (json.JSONDecodeError, KeyError, TypeError):
                    logger.warning("%s: dropping unreadable annotation line", path)
    return lines


def default_annotations_path(state_path: Union[str, Path]) -> Path:
    state_path = Path(state_path)
    return state_path.with_name(state_path.stem + ".annotations.jsonl")


def annotate_corpus(
    corpus_dir: Union[str, Path],
    state_path: Union[str, Path],
    table: AliasTable,
    model: EmbeddingModel,
    weights: RerankWeights,
    annotations_path: Optional[Union[str, Path]] = None,
    full: bool = False,
    workers: int = 1,
    max_candidates: int = 10,
    detect_types: bool = False,
    reader: Optional[DocumentReader] = None,
    on_document: Optional[Callable[[str], None]] = None,
) -> CorpusReport:
    """Annotate the ``.txt`` files of ``corpus_dir``, skipping unchanged ones.

    A document is unchanged when its size and sub-second mtime match the state
    entry, or failing that, when its content hash does. Whole-second mtimes are
    always re-hashed. Deleted documents get a ``removed`` marker that is
    dropped on the following run. Documents that cannot be read or decoded are
    logged, counted as ``unreadable`` and left out of state and annotations.
    """
    corpus_dir = Path(corpus_dir)
    state_path = Path(state_path)
    annotations_path = (
        Path(annotations_path) if annotations_path else default_annotations_path(state_path)
    )
    reader = reader or DocumentReader()
    previous = {} if full else _load_state(state_path)
    previous_lines = {} if full else _load_annotation_lines(annotations_path)

    documents = {p.stem: p for p in sorted(corpus_dir.glob("*.txt")) if p.is_file()}
    report = CorpusReport()
    state: Dict[str, Dict] = {}
    lines: Dict[str, str] = {}
    pending: List[Tuple[str, Path, object, Optional[str]]] = []

    for doc_id, path in documents.items():
        stat = path.stat()
        entry = previous.get(doc_id)
        reusable = (
            entry is not None and not entry.get("removed") and doc_id in previous_lines
        )
        if (
            reusable
            and entry.get("size") == stat.st_size
            and entry.get("mtime_ns") == stat.st_mtime_ns
            and stat.st_mtime_ns % _SECOND_NS != 0
        ):
            state[doc_id] = entry
            lines[doc_id] = previous_lines[doc_id]
            report.skipped += 1
            if on_document is not None:
                on_document(doc_id)
            continue
        pending.append((doc_id, path, stat, entry["hash"] if reusable else None))

    def process(item):
        doc_id, path, stat, known_hash = item
        try:
            text = reader(path)
        except (OSError, UnicodeDecodeError) as e:
            logger.warning("%s: cannot read %s: %s", doc_id, path, e)
            return doc_id, stat, None, None
        digest = content_hash(text)
        if digest == known_hash:
            return doc_id, stat, digest, None
        annotation = annotate_document(
            doc_id, text, table, model, weights, max_candidates, detect_types
        )
        return doc_id, stat, digest, annotation

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(process, pending))
    else:
        results = [process(item) for item in pending]

    for doc_id, stat, digest, annotation in results:
        if digest is None:
            report.unreadable += 1
        else:
            state[doc_id] = {"hash": digest, "size": stat.st_size, "mtime_ns": stat.st_mtime_ns}
            if annotation is None:
                lines[doc_id] = previous_lines[doc_id]
                report.skipped += 1
            else:
                lines[doc_id] = dumps(annotation)
                report.annotated += 1
        if on_document is not None:
            on_document(doc_id)

    for doc_id, entry in previous.items():
        if doc_id not in documents and not entry.get("removed"):
            state[doc_id] = {"hash": entry["hash"], "removed": True}
            report.removed += 1

    annotations_path.parent.mkdir(parents=True, exist_ok=True)
    with open(annotations_path, "w", encoding="utf-8", newline="\n") as f:
        for doc_id in sorted(lines):
            f.write(lines[doc_id] + "\n")
    state_path.parent.mkdir(parents=True, exist_ok=True)
    state_path.write_text(
        json.dumps(dict(sorted(state.items())), indent=2), encoding="utf-8"
    )
    logger.info(
        "Corpus %s: %d annotated, %d skipped, %d removed, %d unreadable",
        corpus_dir,
        report.annotated,
        report.skipped,
        report.removed,
        report.unreadable,
    )
    return report
