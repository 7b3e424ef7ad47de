import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Set, Tuple, Union

import numpy as np

from .config import ModelConfig, TrainConfig, ViewSpec, to_dict
from .errors import MemoryBudgetError, NegativeSamplingError
from .index import load_model, save_model
from .model import (
    EmbeddingModel,
    init_model,
    loss_gradients,
    loss_values,
    project_to_unit_ball,
    score_gradients,
    scores,
)
from .store import GraphStore
from .views import (
    GraphView,
    PartitionedView,
    build_view,
    encode_edges,
    latin_square_schedule,
    partition_edges,
)

logger = logging.getLogger(__name__)

_ADAGRAD_EPS = 1e-10
_FLOAT_BYTES = 4
_SEED_MASK = 0xFFFFFFFFFFFFFFFF


@dataclass
class EpochReport:
    epoch: int
    mean_loss: float
    edges_processed: int
    buckets_visited: int
    wall_time: float

    def to_dict(self) -> Dict:
        return asdict(self)


def _rng(*parts: int) -> np.random.Generator:
    return np.random.default_rng([p & _SEED_MASK for p in parts])


def _contains(sorted_keys: np.ndarray, keys: np.ndarray) -> np.ndarray:
    if len(sorted_keys) == 0:
        return np.zeros(keys.shape, dtype=bool)
    positions = np.searchsorted(sorted_keys, keys)
    positions = np.minimum(positions, len(sorted_keys) - 1)
    return sorted_keys[positions] == keys


def sample_negatives(
    view: GraphView, positive: Tuple[int, int, int], k: int, seed: int, max_retries: int = 100
) -> np.ndarray:
    """Corrupt head or tail of ``positive`` k times, rejecting edges of ``view``.

    Draw ``n`` depends only on (seed, positive, n). Returns a (k, 3) array.
    """
    if k < 1:
        raise ValueError("k must be a positive integer")
    if view.entity_count < 2:
        raise NegativeSamplingError("Negative sampling needs at least two entities")
    known = np.sort(view.edge_keys())
    h, r, t = (int(x) for x in positive)
    negatives = np.empty((k, 3), dtype=np.int64)
    for draw in range(k):
        rng = _rng(seed, h, r, t, draw)
        for _ in range(max_retries):
            entity = int(rng.integers(view.entity_count))
            candidate = (entity, r, t) if rng.random() < 0.5 else (h, r, entity)
            key = encode_edges(np.array([candidate]), view.entity_count, view.predicate_count)
            if not _contains(known, key)[0]:
                negatives[draw] = candidate
                break
        else:
            raise NegativeSamplingError(
                f"No valid corruption of {positive} after {max_retries} draws"
            )
    return negatives


def training_footprint(rows: int, dim: int) -> int:
    """Bytes for ``rows`` embedding rows plus their Adagrad accumulators."""
    return 2 * rows * dim * _FLOAT_BYTES


def required_budget(
    pview: PartitionedView, predicate_count: int, dim: int, workers: int = 1
) -> int:
    """Largest entity partitions one round keeps resident plus the predicate matrix,
    with optimizer state.

    A sequential run holds two partitions. With ``workers`` > 1 a round holds up
    to two per worker, and each worker keeps a predicate gradient shard.
    """
    sizes = sorted(pview.partition_sizes(), reverse=True)
    resident = sum(sizes[: 2 * workers])
    shards = workers * predicate_count * dim * _FLOAT_BYTES if workers > 1 else 0
    return training_footprint(resident + predicate_count, dim) + shards


class PartitionBuffer:
    """All entity partitions held in memory; the reference backend."""

    def __init__(self, partitions: List[Tuple[np.ndarray, np.ndarray]], fixed_bytes: int):
        self._resident: Dict[int, Tuple[np.ndarray, np.ndarray]] = dict(enumerate(partitions))
        self._sizes = [emb.nbytes + state.nbytes for emb, state in partitions]
        self.fixed_bytes = fixed_bytes
        self.peak_bytes = self.resident_bytes

    @property
    def count(self) -> int:
        return len(self._sizes)

    @property
    def resident_bytes(self) -> int:
        return self.fixed_bytes + sum(self._sizes[p] for p in self._resident)

    def acquire(self, needed: Set[int], bucket: Tuple[int, int]) -> None:
        pass

    def get(self, partition: int) -> Tuple[np.ndarray, np.ndarray]:
        return self._resident[partition]

    def release_all(self) -> None:
        pass

    def gather(self, members: List[np.ndarray], rows: int, dim: int) -> Tuple[np.ndarray, np.ndarray]:
        """Assemble full entity and accumulator matrices in global id order."""
        entities = np.empty((rows, dim), dtype=np.float32)
        state = np.empty((rows, dim), dtype=np.float32)
        for p, ids in enumerate(members):
            emb, acc = self._load_for_gather(p)
            entities[ids] = emb
            state[ids] = acc
        return entities, state

    def _load_for_gather(self, partition: int) -> Tuple[np.ndarray, np.ndarray]:
        return self._resident[partition]


class DiskPartitionBuffer(PartitionBuffer):
    """Partitions live in ``directory``; only those of the current bucket or round are loaded."""

    def __init__(
        self,
        partitions: List[Tuple[np.ndarray, np.ndarray]],
        fixed_bytes: int,
        directory: Union[str, Path],
        budget: int,
    ):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.budget = budget
        self.fixed_bytes = fixed_bytes
        self._sizes = [emb.nbytes + state.nbytes for emb, state in partitions]
        self._resident = {}
        for p, arrays in enumerate(partitions):
            self._write(p, arrays)
        self.peak_bytes = self.resident_bytes

    def _paths(self, partition: int) -> Tuple[Path, Path]:
        return (
            self.directory / f"entities_{partition}.npy",
            self.directory / f"adagrad_{partition}.npy",
        )

    def _write(self, partition: int, arrays: Tuple[np.ndarray, np.ndarray]) -> None:
        emb_path, state_path = self._paths(partition)
        np.save(emb_path, arrays[0])
        np.save(state_path, arrays[1])

    def _read(self, partition: int) -> Tuple[np.ndarray, np.ndarray]:
        emb_path, state_path = self._paths(partition)
        return np.load(emb_path), np.load(state_path)

    def acquire(self, needed: Set[int], bucket: Tuple[int, int]) -> None:
        for p in sorted(set(self._resident) - needed):
            self._write(p, self._resident.pop(p))
        for p in sorted(needed - set(self._resident)):
            if self.resident_bytes + self._sizes[p] > self.budget:
                raise MemoryBudgetError(
                    f"Loading partition {p} for bucket {bucket} needs "
                    f"{self.resident_bytes + self._sizes[p]} bytes, budget is {self.budget}",
                    bucket=bucket,
                )
            self._resident[p] = self._read(p)
            self.peak_bytes = max(self.peak_bytes, self.resident_bytes)

    def release_all(self) -> None:
        for p in sorted(self._resident):
            self._write(p, self._resident.pop(p))

    def _load_for_gather(self, partition: int) -> Tuple[np.ndarray, np.ndarray]:
        if partition in self._resident:
            return self._resident[partition]
        return self._read(partition)


class TrainingSession:
    """Partitioned Adagrad training of one model over a fixed bucket layout.

    With ``workdir`` set, entity partitions are swapped to disk and only the
    partitions of the current bucket or round are resident.

    With ``cfg.workers`` > 1, buckets whose partitions do not overlap train
    concurrently in rounds. Predicates are read-only inside a round; each
    bucket sums its predicate gradients into a shard and the merged shards
    are applied once the round finishes.
    """

    def __init__(
        self,
        model: EmbeddingModel,
        pview: PartitionedView,
        full_view: GraphView,
        cfg: TrainConfig,
        workdir: Optional[Union[str, Path]] = None,
        entity_state: Optional[np.ndarray] = None,
        predicate_state: Optional[np.ndarray] = None,
        epoch: int = 0,
    ):
        self.scorer = model.scorer
        self.dim = model.dim
        self.entity_names = list(model.entity_names)
        self.predicate_names = list(model.predicate_names)
        self.pview = pview
        self.cfg = cfg
        self.epoch = epoch
        self.entity_count = model.entity_count
        self.known = np.sort(full_view.edge_keys())
        self._key_shape = (full_view.entity_count, full_view.predicate_count)
        self.predicates = model.predicates.astype(np.float32, copy=True)
        self.predicate_state = (
            np.zeros_like(self.predicates)
            if predicate_state is None
            else predicate_state.astype(np.float32, copy=True)
        )
        if entity_state is None:
            entity_state = np.zeros_like(model.entities, dtype=np.float32)
        partitions = [
            (
                model.entities[ids].astype(np.float32),
                entity_state[ids].astype(np.float32),
            )
            for ids in pview.members
        ]
        fixed = self.predicates.nbytes + self.predicate_state.nbytes
        if cfg.workers > 1:
            fixed += cfg.workers * self.predicates.nbytes
        if workdir is None:
            self.buffer = PartitionBuffer(partitions, fixed)
        else:
            needed = required_budget(pview, model.predicate_count, model.dim, cfg.workers)
            if cfg.memory_budget_bytes < needed:
                raise MemoryBudgetError(
                    f"memory_budget_bytes={cfg.memory_budget_bytes} is below the "
                    f"{needed} bytes the resident partitions and the predicate matrix need"
                )
            self.buffer = DiskPartitionBuffer(
                partitions, fixed, workdir, cfg.memory_budget_bytes
            )

    def schedule(self) -> List[Tuple[int, int]]:
        order = latin_square_schedule(self.pview.partitions)
        if self.cfg.schedule == "shuffled":
            permutation = _rng(self.cfg.seed, self.epoch, 0x5C4ED).permutation(len(order))
            order = [order[i] for i in permutation]
        return order

    def rounds(self) -> List[List[Tuple[int, int]]]:
        """The schedule grouped into rounds of buckets with pairwise disjoint partitions.

        Greedy in schedule order, at most ``cfg.workers`` buckets per round.
        """
        pending = self.schedule()
        grouped = []
        while pending:
            current: List[Tuple[int, int]] = []
            taken: Set[int] = set()
            rest = []
            for bucket in pending:
                if len(current) < self.cfg.workers and not taken.intersection(bucket):
                    current.append(bucket)
                    taken.update(bucket)
                else:
                    rest.append(bucket)
            grouped.append(current)
            pending = rest
        return grouped

    def run_epoch(self) -> EpochReport:
        started = time.perf_counter()
        total_loss = 0.0
        edges = 0
        visited = 0
        if self.cfg.workers == 1:
            for i, j in self.schedule():
                self.buffer.acquire({i, j}, (i, j))
                bucket = self.pview.bucket(i, j)
                total_loss += self._train_bucket(i, j, bucket)
                edges += len(bucket)
                visited += 1
        else:
            with ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
                for buckets in self.rounds():
                    total_loss += self._train_round(buckets, pool)
                    edges += sum(len(self.pview.bucket(i, j)) for i, j in buckets)
                    visited += len(buckets)
        report = EpochReport(
            epoch=self.epoch,
            mean_loss=total_loss / max(edges, 1),
            edges_processed=edges,
            buckets_visited=visited,
            wall_time=time.perf_counter() - started,
        )
        logger.info(
            "Epoch %d: mean loss %.6f over %d edges (%d buckets, %.2fs)",
            report.epoch,
            report.mean_loss,
            report.edges_processed,
            report.buckets_visited,
            report.wall_time,
        )
        self.epoch += 1
        return report

    def _train_round(self, buckets: List[Tuple[int, int]], pool: ThreadPoolExecutor) -> float:
        needed: Set[int] = set()
        for bucket in buckets:
            needed.update(bucket)
        self.buffer.acquire(needed, buckets[0])
        shards = [np.zeros_like(self.predicates) for _ in buckets]

        def work(item):
            (i, j), shard = item
            return self._train_bucket(i, j, self.pview.bucket(i, j), shard)

        losses = list(pool.map(work, zip(buckets, shards)))
        merged = np.sum(shards, axis=0)
        touched = np.flatnonzero(np.any(merged != 0, axis=1))
        if len(touched):
            self._adagrad(
                self.predicates, self.predicate_state, touched, merged[touched], entity=False
            )
        return sum(losses)

    def _negatives(
        self, h: np.ndarray, r: np.ndarray, t: np.ndarray, i: int, j: int, rng: np.random.Generator
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        k = self.cfg.negatives
        heads_pool = self.pview.members[i]
        tails_pool = self.pview.members[j]
        corrupt_head = rng.random((len(h), k)) < 0.5
        neg_h = np.where(corrupt_head, heads_pool[rng.integers(len(heads_pool), size=corrupt_head.shape)], h[:, None])
        neg_t = np.where(corrupt_head, t[:, None], tails_pool[rng.integers(len(tails_pool), size=corrupt_head.shape)])
        valid = np.ones(corrupt_head.shape, dtype=bool)
        if not self.cfg.filtered_negatives:
            return neg_h, neg_t, valid
        rel = np.broadcast_to(r[:, None], neg_h.shape)
        for _ in range(self.cfg.max_negative_retries):
            keys = encode_edges(
                np.stack([neg_h, rel, neg_t], axis=-1), *self._key_shape
            ).reshape(neg_h.shape)
            bad = _contains(self.known, keys)
            if not bad.any():
                break
            rows, cols = np.nonzero(bad)
            heads_redraw = corrupt_head[rows, cols]
            fresh_h = heads_pool[rng.integers(len(heads_pool), size=len(rows))]
            fresh_t = tails_pool[rng.integers(len(tails_pool), size=len(rows))]
            neg_h[rows, cols] = np.where(heads_redraw, fresh_h, neg_h[rows, cols])
            neg_t[rows, cols] = np.where(heads_redraw, neg_t[rows, cols], fresh_t)
        else:
            keys = encode_edges(
                np.stack([neg_h, rel, neg_t], axis=-1), *self._key_shape
            ).reshape(neg_h.shape)
            bad = _contains(self.known, keys)
        valid = ~bad
        return neg_h, neg_t, valid

    def _train_bucket(
        self, i: int, j: int, edges: np.ndarray, predicate_shard: Optional[np.ndarray] = None
    ) -> float:
        if len(edges) == 0:
            return 0.0
        cfg = self.cfg
        rng = _rng(cfg.seed, self.epoch, i, j)
        emb_i, state_i = self.buffer.get(i)
        emb_j, state_j = self.buffer.get(j)
        local = self.pview.local_row
        order = rng.permutation(len(edges))
        total = 0.0
        for start in range(0, len(edges), cfg.batch_size):
            batch = edges[order[start : start + cfg.batch_size]]
            h, r, t = batch[:, 0], batch[:, 1], batch[:, 2]
            neg_h, neg_t, valid = self._negatives(h, r, t, i, j, rng)
            mask = valid.astype(np.float32)

            H = emb_i[local[h]]
            T = emb_j[local[t]]
            R = self.predicates[r]
            NH = emb_i[local[neg_h]]
            NT = emb_j[local[neg_t]]
            sp = scores(self.scorer, H, R, T)
            sn = scores(self.scorer, NH, R[:, None, :], NT)
            total += float(loss_values(cfg.loss, cfg.margin, sp, sn, mask).sum())
            dsp, dsn = loss_gradients(cfg.loss, cfg.margin, sp, sn, mask)

            gh, gr, gt = score_gradients(self.scorer, H, R, T)
            gnh, gnr, gnt = score_gradients(self.scorer, NH, R[:, None, :], NT)
            dsp = dsp[:, None]
            dsn = dsn[..., None]
            head_rows = np.concatenate([local[h], local[neg_h].ravel()])
            head_grads = np.concatenate([dsp * gh, (dsn * gnh).reshape(-1, self.dim)])
            tail_rows = np.concatenate([local[t], local[neg_t].ravel()])
            tail_grads = np.concatenate([dsp * gt, (dsn * gnt).reshape(-1, self.dim)])
            pred_grads = dsp * gr + (dsn * gnr).sum(axis=1)

            if i == j:
                self._adagrad(
                    emb_i,
                    state_i,
                    np.concatenate([head_rows, tail_rows]),
                    np.concatenate([head_grads, tail_grads]),
                    entity=True,
                )
            else:
                self._adagrad(emb_i, state_i, head_rows, head_grads, entity=True)
                self._adagrad(emb_j, state_j, tail_rows, tail_grads, entity=True)
            if predicate_shard is None:
                self._adagrad(self.predicates, self.predicate_state, r, pred_grads, entity=False)
            else:
                np.add.at(predicate_shard, r, pred_grads.astype(np.float32))
        return total

    def _adagrad(
        self, params: np.ndarray, state: np.ndarray, rows: np.ndarray, grads: np.ndarray, entity: bool
    ) -> None:
        unique, inverse = np.unique(rows, return_inverse=True)
        summed = np.zeros((len(unique), self.dim), dtype=np.float32)
        np.add.at(summed, inverse.ravel(), grads.astype(np.float32))
        state[unique] += summed * summed
        params[unique] -= self.cfg.learning_rate * summed / (
            np.sqrt(state[unique]) + _ADAGRAD_EPS
        )
        if entity and self.scorer == "translational":
            project_to_unit_ball(params, unique)

    def export(self) -> Tuple[EmbeddingModel, np.ndarray]:
        """Current model and entity Adagrad state in global id order."""
        entities, state = self.buffer.gather(self.pview.members, self.entity_count, self.dim)
        model = EmbeddingModel(
            self.scorer,
            entities,
            self.predicates.copy(),
            list(self.entity_names),
            list(self.predicate_names),
        )
        return model, state


def train_epoch(
    model: EmbeddingModel,
    pview: PartitionedView,
    full_view: GraphView,
    cfg: TrainConfig,
    epoch: int = 0,
    workdir: Optional[Union[str, Path]] = None,
) -> EpochReport:
    """Run one epoch with fresh optimizer state, updating ``model`` in place."""
    session = TrainingSession(model, pview, full_view, cfg, workdir=workdir, epoch=epoch)
    report = session.run_epoch()
    trained, _ = session.export()
    model.entities[...] = trained.entities
    model.predicates[...] = trained.predicates
    return report


def _checkpoint_paths(directory: Path, epoch: int) -> Tuple[Path, Path, Path]:
    stem = directory / f"epoch_{epoch:04d}"
    return (
        stem.with_suffix(".kgem"),
        stem.with_suffix(".state.npz"),
        stem.with_suffix(".json"),
    )


def save_checkpoint(
    session: TrainingSession, directory: Union[str, Path], reports: List[EpochReport]
) -> Path:
    """Write model, optimizer state and a JSON sidecar for the finished epoch."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    model, entity_state = session.export()
    model_path, state_path, sidecar_path = _checkpoint_paths(directory, session.epoch)
    save_model(model, model_path)
    np.savez(state_path, entities=entity_state, predicates=session.predicate_state)
    sidecar = {
        "epoch": session.epoch,
        "model": model_path.name,
        "optimizer_state": state_path.name,
        "train_config": to_dict(session.cfg),
        "reports": [r.to_dict() for r in reports],
    }
    sidecar_path.write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    return sidecar_path


def latest_checkpoint(directory: Union[str, Path]) -> Optional[Path]:
    sidecars = sorted(Path(directory).glob("epoch_*.json"))
    return sidecars[-1] if sidecars else None


def load_checkpoint(sidecar_path: Union[str, Path]):
    """Return (model, entity_state, predicate_state, epoch, reports)."""
    sidecar_path = Path(sidecar_path)
    sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    model = load_model(sidecar_path.parent / sidecar["model"])
    with np.load(sidecar_path.parent / sidecar["optimizer_state"]) as state:
        entity_state = state["entities"]
        predicate_state = state["predicates"]
    reports = [EpochReport(**r) for r in sidecar["reports"]]
    return model, entity_state, predicate_state, sidecar["epoch"], reports


def train(
    source: Union[GraphStore, GraphView],
    view_spec: ViewSpec,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    full_view: Optional[GraphView] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
    resume: bool = False,
    workdir: Optional[Union[str, Path]] = None,
    on_epoch: Optional[Callable[[EpochReport], None]] = None,
) -> Tuple[EmbeddingModel, List[EpochReport]]:
    """View, partition, initialize and run epochs, checkpointing after each.

    ``full_view`` (default: the training view) is what negatives are filtered
    against, so held-out edges can still be excluded.
    """
    view = source if isinstance(source, GraphView) else build_view(source, view_spec)
    full_view = view if full_view is None else full_view
    pview = partition_edges(view, train_cfg.partitions, train_cfg.seed)

    entity_state = predicate_state = None
    reports: List[EpochReport] = []
    start_epoch = 0
    sidecar = latest_checkpoint(checkpoint_dir) if (resume and checkpoint_dir) else None
    if sidecar is not None:
        model, entity_state, predicate_state, start_epoch, reports = load_checkpoint(sidecar)
        logger.info("Resuming from %s at epoch %d", sidecar, start_epoch)
    else:
        model = init_model(view, model_cfg, train_cfg.seed)

    session = TrainingSession(
        model,
        pview,
        full_view,
        train_cfg,
        workdir=workdir,
        entity_state=entity_state,
        predicate_state=predicate_state,
        epoch=start_epoch,
    )
    del model
    while session.epoch < train_cfg.epochs:
        report = session.run_epoch()
        reports.append(report)
        if checkpoint_dir is not None:
            session.buffer.release_all()
            save_checkpoint(session, checkpoint_dir, reports)
        if on_epoch is not None:
            on_epoch(report)
    model, _ = session.export()
    return model, reports
