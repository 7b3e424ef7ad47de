#!/usr/bin/env python3
import dataclasses
import sys
from pathlib import Path

import click
from rich.console import Console
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn

from . import __version__
from .annotate import (
    annotate_corpus,
    build_alias_table,
    default_annotations_path,
    load_alias_table,
)
from .config import (
    ModelConfig,
    RerankWeights,
    ServiceConfig,
    TrainConfig,
    ViewSpec,
    WalkConfig,
    apply_env_overrides,
    from_dict,
    load_config,
    read_json,
)
from .errors import ConfigError, EntityNotFoundError, KgForgeError
from .evaluate import evaluate_link_prediction
from .index import build_index, entity_similarity, entity_types, load_index, load_model, save_index, save_model
from .jsonio import dumps, read_jsonl, write_jsonl
from .logs import configure_logging
from .services import calibrate_threshold, neighbors_to_dicts, rank_facts, related_entities, verify_facts
from .store import GraphStore, ingest_triples, load_entities, load_store, save_store
from .train import train as run_training
from .views import build_view, load_view, save_view, split_view
from .walks import export_pairs, pairs_from_walks, pairs_to_view, sample_walks, save_walks

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class PipelineGroup(click.Group):
    """Maps failures onto exit codes: 1 for usage and config, 2 for runtime."""

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        try:
            rv = super().main(args, prog_name, complete_var, standalone_mode=False, **extra)
            code = rv if isinstance(rv, int) else EXIT_OK
        except click.exceptions.Exit as e:
            code = e.exit_code
        except click.UsageError as e:
            e.show()
            code = EXIT_USAGE
        except ConfigError as e:
            click.echo(f"Error: {e}", err=True)
            code = EXIT_USAGE
        except click.ClickException as e:
            e.show()
            code = EXIT_RUNTIME
        except click.Abort:
            click.echo("Aborted!", err=True)
            code = EXIT_RUNTIME
        except (KgForgeError, OSError, ValueError) as e:
            click.echo(f"Error: {e}", err=True)
            code = EXIT_RUNTIME
        if standalone_mode:
            sys.exit(code)
        return code


def _progress() -> Progress:
    return Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        TextColumn("[progress.percentage]{task.percentage:>3.0f}%"),
        console=Console(stderr=True),
        transient=True,
    )


def _emit(ctx: click.Context, payload, human: str) -> None:
    click.echo(dumps(payload) if ctx.obj["json"] else human)


def _entity(names, value: str) -> int:
    """External key from the model vocabulary, or a raw integer id."""
    lookup = {name: i for i, name in enumerate(names)}
    if value in lookup:
        return lookup[value]
    if value.isdigit():
        return int(value)
    raise EntityNotFoundError(value)


def _triple(model, record) -> tuple:
    head = record["head"]
    predicate = record["predicate"]
    tail = record["tail"]
    return (
        head if isinstance(head, int) else _entity(model.entity_names, head),
        predicate if isinstance(predicate, int) else _entity(model.predicate_names, predicate),
        tail if isinstance(tail, int) else _entity(model.entity_names, tail),
    )


@click.group(cls=PipelineGroup, context_settings={"auto_envvar_prefix": "KGF"})
@click.option("--json", "as_json", is_flag=True, help="Machine-readable JSON output.")
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
@click.version_option(__version__, prog_name="kgforge")
@click.pass_context
def main(ctx, as_json, verbose):
    """kgforge: knowledge graph embedding pipeline and services"""
    configure_logging(verbose)
    ctx.obj = {"json": as_json}


@main.command()
@click.argument("triples", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--entities", type=click.Path(exists=True, dir_okay=False), help="Entity metadata JSONL.")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Store directory.")
@click.pass_context
def ingest(ctx, triples, entities, out):
    """Ingest triples TSV files into a store directory"""
    store = GraphStore()
    totals = {"unique": 0, "duplicates": 0, "rejected": 0}
    for path in triples:
        report = ingest_triples(path, store)
        for key, value in report.to_dict().items():
            totals[key] += value
    named = load_entities(entities, store) if entities else 0
    store.seal()
    save_store(store, out)
    payload = {
        **totals,
        "entities": store.entity_count,
        "predicates": store.predicate_count,
        "named_entities": named,
    }
    _emit(
        ctx,
        payload,
        f"Ingested {totals['unique']} triples ({totals['duplicates']} duplicates, "
        f"{totals['rejected']} rejected) into {out}",
    )


@main.command()
@click.option("--store", "store_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--spec", type=click.Path(exists=True, dir_okay=False), help="ViewSpec JSON.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.pass_context
def view(ctx, store_dir, spec, out):
    """Build a filtered training view from a store"""
    view_spec = load_config(spec, ViewSpec) if spec else ViewSpec()
    graph_view = build_view(load_store(store_dir), view_spec)
    save_view(graph_view, out)
    payload = {
        "edges": len(graph_view),
        "entities": graph_view.entity_count,
        "predicates": graph_view.predicate_count,
    }
    _emit(ctx, payload, f"Wrote view with {len(graph_view)} edges to {out}")


@main.command()
@click.argument("view_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--ratios", nargs=3, type=float, default=(0.8, 0.1, 0.1), show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.pass_context
def split(ctx, view_path, ratios, seed, out_dir):
    """Split a view into train, valid and test views"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    parts = split_view(load_view(view_path), tuple(ratios), seed)
    payload = {}
    for name, part in zip(("train", "valid", "test"), parts):
        save_view(part, out_dir / f"{name}.kgvw")
        payload[name] = len(part)
    _emit(ctx, payload, f"Split into {payload['train']}/{payload['valid']}/{payload['test']} edges")


def _train_configs(path):
    data = read_json(path)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    unknown = sorted(set(data) - {"view", "model", "train"})
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown section", field=unknown[0])
    if "model" not in data:
        raise ConfigError("model: missing required section", field="model")
    return (
        from_dict(ViewSpec, data.get("view", {}), "view."),
        from_dict(ModelConfig, data["model"], "model."),
        from_dict(TrainConfig, data.get("train", {}), "train."),
    )


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--view", "view_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--store", "store_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--full-view", type=click.Path(exists=True, dir_okay=False), help="View to filter negatives against.")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Model file.")
@click.option("--checkpoints", type=click.Path(file_okay=False))
@click.option("--resume", is_flag=True)
@click.option("--workdir", type=click.Path(file_okay=False), help="Disk-backed partition swap directory.")
@click.option("--reports", type=click.Path(dir_okay=False), help="Epoch reports JSONL.")
@click.option("--workers", type=int, help="Train disjoint buckets concurrently; overrides train.workers.")
@click.pass_context
def train(ctx, config_path, view_path, store_dir, full_view, out, checkpoints, resume, workdir, reports, workers):
    """Train an embedding model from a view or a store"""
    view_spec, model_cfg, train_cfg = _train_configs(config_path)
    if workers is not None:
        train_cfg = dataclasses.replace(train_cfg, workers=workers)
    if bool(view_path) == bool(store_dir):
        raise click.UsageError("Pass exactly one of --view or --store")
    source = load_view(view_path) if view_path else load_store(store_dir)
    with _progress() as progress:
        task = progress.add_task("Training", total=train_cfg.epochs)
        model, epoch_reports = run_training(
            source,
            view_spec,
            model_cfg,
            train_cfg,
            full_view=load_view(full_view) if full_view else None,
            checkpoint_dir=checkpoints,
            resume=resume,
            workdir=workdir,
            on_epoch=lambda report: progress.update(task, completed=report.epoch + 1),
        )
    save_model(model, out)
    if reports:
        write_jsonl(reports, epoch_reports)
    if ctx.obj["json"]:
        for report in epoch_reports:
            click.echo(dumps(report))
    else:
        last = epoch_reports[-1] if epoch_reports else None
        loss = f", final loss {last.mean_loss:.6f}" if last else ""
        click.echo(f"Trained {len(epoch_reports)} epochs{loss}; model written to {out}")


@main.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--test", "test_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--full", "full_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def evaluate(ctx, model_path, test_path, full_path):
    """Filtered link prediction metrics on a test view"""
    report = evaluate_link_prediction(
        load_model(model_path), load_view(test_path), load_view(full_path)
    )
    _emit(
        ctx,
        report,
        f"MRR {report.mrr:.4f}  Hits@1 {report.hits_at_1:.4f}  Hits@10 {report.hits_at_10:.4f}",
    )


@main.command()
@click.option("--view", "view_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="WalkConfig JSON.")
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--min-count", type=int, default=1, show_default=True)
@click.option("--out-walks", type=click.Path(dir_okay=False))
@click.option("--out-pairs", type=click.Path(dir_okay=False), help="Pairs as triples TSV.")
@click.option("--out-view", type=click.Path(dir_okay=False), help="Pairs as a co-occurrence view.")
@click.pass_context
def walks(ctx, view_path, config_path, workers, min_count, out_walks, out_pairs, out_view):
    """Sample random walks and derive co-occurrence pairs"""
    cfg = load_config(config_path, WalkConfig) if config_path else WalkConfig()
    graph_view = load_view(view_path)
    corpus = sample_walks(graph_view, cfg, workers=workers)
    pairs = pairs_from_walks(corpus, cfg.window)
    if out_walks:
        save_walks(corpus, out_walks)
    if out_pairs:
        export_pairs(pairs, graph_view.entity_names, out_pairs)
    if out_view:
        save_view(pairs_to_view(pairs, graph_view.entity_names, min_count), out_view)
    payload = {"walks": len(corpus), "pairs": len(pairs)}
    _emit(ctx, payload, f"Sampled {len(corpus)} walks, {len(pairs)} distinct pairs")


@main.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--metric", type=click.Choice(["cosine", "euclidean"]), default="cosine", show_default=True)
@click.option("--mode", type=click.Choice(["exact", "ivf"]), default="exact", show_default=True)
@click.option("--clusters", type=int, default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--store", "store_dir", type=click.Path(exists=True, file_okay=False), help="Store for entity types.")
@click.pass_context
def index(ctx, model_path, out, metric, mode, clusters, seed, store_dir):
    """Build a kNN index over a model's entity vectors"""
    model = load_model(model_path)
    type_of = entity_types(load_store(store_dir), model.entity_count) if store_dir else None
    knn = build_index(model, metric, mode, clusters, seed, type_of)
    save_index(knn, out)
    payload = {"metric": metric, "mode": mode, "clusters": knn.n_clusters, "entities": knn.entity_count}
    _emit(ctx, payload, f"Wrote {mode} {metric} index over {knn.entity_count} entities to {out}")


@main.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--input", "input_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--tau", type=float, required=True)
@click.pass_context
def verify(ctx, model_path, input_path, tau):
    """Score triples JSONL against a threshold"""
    model = load_model(model_path)
    triples = [_triple(model, record) for record in read_jsonl(input_path)]
    verdicts = verify_facts(model, triples, tau)
    for verdict in verdicts:
        if ctx.obj["json"]:
            click.echo(dumps(verdict))
        else:
            mark = "accept" if verdict.accepted else "reject"
            click.echo(f"{mark}\t{verdict.score:.6f}\t{verdict.triple}")


@main.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--input", "input_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def calibrate(ctx, model_path, input_path):
    """Choose a verification threshold from labeled triples JSONL"""
    model = load_model(model_path)
    labeled = [(_triple(model, r), bool(r["label"])) for r in read_jsonl(input_path)]
    calibration = calibrate_threshold(model, labeled)
    _emit(
        ctx,
        calibration,
        f"tau {calibration.threshold:.6f}  balanced accuracy "
        f"{calibration.balanced_accuracy:.4f}  AUC {calibration.auc:.4f}",
    )


@main.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--store", "store_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--subject", required=True)
@click.option("--predicate", required=True)
@click.option("--candidate", "candidates", multiple=True, help="Repeatable; defaults to the store's objects.")
@click.option("--popularity-weight", type=float, default=0.0, show_default=True)
@click.pass_context
def rank(ctx, model_path, store_dir, subject, predicate, candidates, popularity_weight):
    """Rank candidate objects for a subject and predicate"""
    if not candidates and not store_dir:
        raise click.UsageError("Pass --candidate values or a --store to rank existing facts")
    model = load_model(model_path)
    ranked = rank_facts(
        model,
        _entity(model.entity_names, subject),
        _entity(model.predicate_names, predicate),
        [_entity(model.entity_names, c) for c in candidates] if candidates else None,
        store=load_store(store_dir) if store_dir else None,
        popularity_weight=popularity_weight,
    )
    if ctx.obj["json"]:
        click.echo(dumps(ranked))
    else:
        for position, (entity, score) in enumerate(ranked.candidates, start=1):
            click.echo(f"{position}\t{model.entity_names[entity]}\t{score:.6f}")


@main.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--index", "index_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--entity", required=True)
@click.option("--k", type=int, default=10, show_default=True)
@click.option("--type", "type_name", help="Only neighbors of this type (needs --store).")
@click.option("--store", "store_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--nprobe", type=int, default=1, show_default=True)
@click.pass_context
def related(ctx, model_path, index_path, entity, k, type_name, store_dir, nprobe):
    """Nearest entities in embedding space"""
    model = load_model(model_path)
    store = load_store(store_dir) if store_dir else None
    if index_path:
        knn = load_index(index_path, model)
    else:
        knn = build_index(model, type_of=entity_types(store, model.entity_count) if store else None)
    type_filter = None
    if type_name is not None:
        if store is None or type_name not in store.type_names:
            raise click.BadParameter(f"unknown type {type_name!r}", param_hint="--type")
        type_filter = store.type_names.index(type_name)
    neighbors = related_entities(knn, _entity(model.entity_names, entity), k, type_filter, nprobe)
    for row in neighbors_to_dicts(neighbors, model.entity_names):
        if ctx.obj["json"]:
            click.echo(dumps(row))
        else:
            similarity = "nan" if row["similarity"] is None else f"{row['similarity']:.6f}"
            click.echo(f"{row['rank']}\t{row['key']}\t{similarity}")


@main.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.argument("a")
@click.argument("b")
@click.option("--metric", type=click.Choice(["cosine", "euclidean"]), default="cosine", show_default=True)
@click.pass_context
def similar(ctx, model_path, a, b, metric):
    """Similarity between two entities"""
    model = load_model(model_path)
    value = entity_similarity(
        model, _entity(model.entity_names, a), _entity(model.entity_names, b), metric
    )
    _emit(ctx, {"a": a, "b": b, "metric": metric, "similarity": value}, f"{value:.6f}")


@main.command()
@click.option("--corpus", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--state", "state_path", required=True, type=click.Path(dir_okay=False))
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--store", "store_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--alias-table", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), help="Annotations JSONL.")
@click.option("--full", is_flag=True, help="Ignore previous state and annotate everything.")
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--types", "detect_types", is_flag=True, help="Also tag type keywords.")
@click.option("--max-candidates", type=int, default=10, show_default=True)
@click.option("--alpha", type=float, default=RerankWeights.alpha, show_default=True)
@click.option("--beta", type=float, default=RerankWeights.beta, show_default=True)
@click.option("--delta", type=float, default=RerankWeights.delta, show_default=True)
@click.pass_context
def annotate(
    ctx, corpus, state_path, model_path, store_dir, alias_table, out, full, workers,
    detect_types, max_candidates, alpha, beta, delta,
):
    """Link entity mentions across a corpus, re-annotating only changed files"""
    if alias_table:
        table = load_alias_table(alias_table)
    elif store_dir:
        table = build_alias_table(load_store(store_dir))
    else:
        raise click.UsageError("Pass --alias-table or --store")
    weights = from_dict(RerankWeights, {"alpha": alpha, "beta": beta, "delta": delta})
    total = len(list(Path(corpus).glob("*.txt")))
    with _progress() as progress:
        task = progress.add_task("Annotating", total=total)
        report = annotate_corpus(
            corpus,
            state_path,
            table,
            load_model(model_path),
            weights,
            annotations_path=out,
            full=full,
            workers=workers,
            max_candidates=max_candidates,
            detect_types=detect_types,
            on_document=lambda doc_id: progress.advance(task),
        )
    _emit(
        ctx,
        report,
        f"{report.annotated} annotated, {report.skipped} skipped, {report.removed} removed; "
        f"annotations in {out or default_annotations_path(state_path)}",
    )


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--host")
@click.option("--port", type=int, envvar="KGF_PORT")
@click.option("--workers", type=int, envvar="KGF_WORKERS")
@click.option("--snapshot-id", envvar="KGF_SNAPSHOT_ID")
def serve(config_path, host, port, workers, snapshot_id):
    """Run the HTTP service"""
    from .server import serve as run_server

    config = apply_env_overrides(load_config(config_path, ServiceConfig))
    overrides = {"host": host, "port": port, "workers": workers, "snapshot_id": snapshot_id}
    config = dataclasses.replace(
        config, **{k: v for k, v in overrides.items() if v is not None}
    )
    run_server(config)


if __name__ == "__main__":
    main()
