"""Command-line entry point for the retrieval + captioning pipeline.

Exit codes: 0 success, 1 data/validation failure, 2 usage error. Outputs
are written atomically and never overwritten unless --force is given, so
evaluation artifacts keep their audit value.
"""

from __future__ import annotations

import functools
import json
import os
import sys
from typing import Iterable, Mapping

import click

from fusecap import caption_metrics, captioning, fileio, fixture, fusion, retrieval_metrics
from fusecap.catalog import load_catalog
from fusecap.search import RankedList, batch_search, read_run, write_run
from fusecap.store import load_embeddings

_DATA_ERRORS = (ValueError, OSError, RuntimeError)


def _fail(message: str) -> "SystemExit":
    click.echo(f"error: {message}", err=True)
    return SystemExit(1)


def _data_errors(fn):
    """Map domain failures to exit code 1, leaving usage errors to click."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except _DATA_ERRORS as exc:
            raise _fail(str(exc)) from exc

    return wrapper


def _guard_outputs(paths: Iterable[str], force: bool) -> None:
    existing = [p for p in paths if os.path.exists(p)]
    if existing and not force:
        raise _fail(
            "refusing to overwrite existing outputs (use --force): "
            + ", ".join(sorted(existing))
        )


@click.group()
@click.option("--threads", type=int, default=1, show_default=True, help="Worker thread cap.")
@click.option("--seed", type=int, default=0, show_default=True, help="RNG seed (fixture generation).")
@click.option("--force", is_flag=True, help="Overwrite existing output files.")
@click.option("--verbose", is_flag=True, help="Chatty progress output.")
@click.pass_context
def main(ctx: click.Context, threads: int, seed: int, force: bool, verbose: bool) -> None:
    """Ensemble image retrieval, rank fusion, captioning, and evaluation."""
    if threads < 1:
        raise click.UsageError("--threads must be >= 1")
    ctx.obj = {"threads": threads, "seed": seed, "force": force, "verbose": verbose}


def _say(ctx: click.Context, message: str) -> None:
    if ctx.obj["verbose"]:
        click.echo(message)


@main.command()
@click.argument("files", nargs=-1, required=True, type=click.Path())
def validate(files: tuple[str, ...]) -> None:
    """Validate embedding FILES; exit 0 only if every file is valid."""
    failures = 0
    for path in files:
        try:
            matrix = load_embeddings(path)
        except _DATA_ERRORS as exc:
            click.echo(f"FAIL {path}: {exc}")
            failures += 1
            continue
        click.echo(
            f"OK {path}: model={matrix.model_id} dim={matrix.dim} "
            f"count={matrix.count} normalized={matrix.normalized}"
        )
    if failures:
        raise SystemExit(1)


@main.command()
@click.option("--queries", "queries_path", required=True, type=click.Path(exists=True))
@click.option("--db", "db_path", required=True, type=click.Path(exists=True))
@click.option("-k", "k", type=int, required=True, help="Neighbors per query.")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.pass_context
@_data_errors
def search(ctx: click.Context, queries_path: str, db_path: str, k: int, out_path: str) -> None:
    """Exact L2 top-k of every query against one embedding database."""
    _guard_outputs([out_path], ctx.obj["force"])
    queries = load_embeddings(queries_path)
    db = load_embeddings(db_path)
    lists = batch_search(queries, db, k, threads=ctx.obj["threads"])
    write_run(lists, out_path)
    _say(ctx, f"wrote {len(lists)} ranked lists to {out_path}")


def _group_runs(runs: Iterable[RankedList]) -> dict[str, dict[str, RankedList]]:
    by_query: dict[str, dict[str, RankedList]] = {}
    for ranked in runs:
        models = by_query.setdefault(ranked.query_id, {})
        if ranked.model_id in models:
            raise ValueError(
                f"duplicate list for query {ranked.query_id!r}, model {ranked.model_id!r}"
            )
        models[ranked.model_id] = ranked
    return by_query


@main.command()
@click.argument("run_files", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.pass_context
@_data_errors
def fuse(ctx: click.Context, run_files: tuple[str, ...], config_path: str, out_path: str) -> None:
    """Fuse per-model RUN_FILES into one ranking per query."""
    _guard_outputs([out_path], ctx.obj["force"])
    config = fusion.load_fusion_config(config_path)
    all_lists: list[RankedList] = []
    for path in run_files:
        all_lists.extend(read_run(path))
    by_query = _group_runs(all_lists)
    if not by_query:
        raise ValueError("no ranked lists found in the given run files")
    model_sets = {frozenset(models) for models in by_query.values()}
    if len(model_sets) > 1:
        raise ValueError("queries disagree on which models ranked them")
    fused = [fusion.fuse(config, by_query[qid]) for qid in sorted(by_query)]
    write_run(fused, out_path)
    _say(ctx, f"fused {len(fused)} queries to {out_path}")


@main.command("eval-retrieval")
@click.option("--run", "run_path", required=True, type=click.Path(exists=True))
@click.option("--ground-truth", "gt_path", required=True, type=click.Path(exists=True))
@click.option("--ks", default="1,10", show_default=True, help="Comma-separated recall cutoffs.")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.pass_context
@_data_errors
def eval_retrieval(
    ctx: click.Context, run_path: str, gt_path: str, ks: str, out_path: str
) -> None:
    """Score a run against ground truth (mAP, recall@k)."""
    _guard_outputs([out_path], ctx.obj["force"])
    try:
        cutoffs = [int(part) for part in ks.split(",") if part.strip()]
    except ValueError as exc:
        raise click.UsageError(f"--ks must be comma-separated integers: {exc}") from exc
    run = read_run(run_path)
    gt = retrieval_metrics.load_ground_truth(gt_path)
    report = retrieval_metrics.evaluate_run(run, gt, cutoffs)
    fileio.write_json(out_path, report.to_json_obj())
    click.echo(f"map={report.map_score:.6f} " + " ".join(
        f"recall@{k}={report.recall_at[k]:.6f}" for k in sorted(report.recall_at)
    ))


def _load_image_manifest(path: str | None) -> dict[str, str]:
    if path is None:
        return {}
    return {obj["query_id"]: obj["image_ref"] for obj in fileio.read_jsonl(path)}


@main.command()
@click.option("--run", "run_path", required=True, type=click.Path(exists=True))
@click.option("--articles", "articles_path", required=True, type=click.Path(exists=True))
@click.option("--mapping", "mapping_path", required=True, type=click.Path(exists=True))
@click.option("--endpoint-config", "endpoint_path", required=True, type=click.Path(exists=True))
@click.option("--template", "template_path", type=click.Path(exists=True), default=None,
              help="Override the packaged prompt asset.")
@click.option("--images", "images_path", type=click.Path(exists=True), default=None,
              help="JSONL manifest {query_id, image_ref}; defaults image_ref to query_id.")
@click.option("--article-budget", type=int, default=captioning.DEFAULT_ARTICLE_BUDGET,
              show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--failures", "failures_path", type=click.Path(), default=None,
              help="Failure log path [default: OUT.failures.jsonl].")
@click.pass_context
@_data_errors
def caption(
    ctx: click.Context,
    run_path: str,
    articles_path: str,
    mapping_path: str,
    endpoint_path: str,
    template_path: str | None,
    images_path: str | None,
    article_budget: int,
    out_path: str,
    failures_path: str | None,
) -> None:
    """Generate captions for every query in a fused run."""
    failures_path = failures_path or f"{out_path}.failures.jsonl"
    _guard_outputs([out_path, failures_path], ctx.obj["force"])
    run = read_run(run_path)
    catalog = load_catalog(articles_path, mapping_path)
    template = captioning.load_prompt_template(template_path)
    endpoint = captioning.load_endpoint_config(endpoint_path)
    client = captioning.make_client(endpoint)
    image_refs = _load_image_manifest(images_path)
    queries = [(r.query_id, image_refs.get(r.query_id, r.query_id)) for r in run]
    outputs, failures = captioning.run_caption_stage(
        queries, run, catalog, template, client,
        article_budget=article_budget,
        max_concurrent=max(endpoint.max_concurrent, ctx.obj["threads"]),
    )
    fileio.write_jsonl(out_path, (o.to_json_obj() for o in outputs))
    fileio.write_jsonl(failures_path, (f.to_json_obj() for f in failures))
    click.echo(f"captions={len(outputs)} failures={len(failures)}")
    if failures:
        raise SystemExit(1)


@main.command("eval-caption")
@click.option("--captions", "captions_path", required=True, type=click.Path(exists=True))
@click.option("--references", "references_path", required=True, type=click.Path(exists=True))
@click.option("--caption-embeddings", "cap_emb_path", type=click.Path(exists=True), default=None)
@click.option("--image-embeddings", "img_emb_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.pass_context
@_data_errors
def eval_caption(
    ctx: click.Context,
    captions_path: str,
    references_path: str,
    cap_emb_path: str | None,
    img_emb_path: str | None,
    out_path: str,
) -> None:
    """Score generated captions (CIDEr-D, and CLIPScore when embeddings are given)."""
    _guard_outputs([out_path], ctx.obj["force"])
    references = {
        obj["query_id"]: list(obj["references"]) for obj in fileio.read_jsonl(references_path)
    }
    records = caption_metrics.join_captions_with_references(
        fileio.read_jsonl(captions_path), references
    )
    cap_emb = load_embeddings(cap_emb_path) if cap_emb_path else None
    img_emb = load_embeddings(img_emb_path) if img_emb_path else None
    report = caption_metrics.score_captions(records, cap_emb, img_emb)
    fileio.write_json(out_path, report.to_json_obj())
    clip_part = f" clipscore={report.clipscore:.6f}" if report.clipscore is not None else ""
    click.echo(f"cider={report.cider:.6f}{clip_part} records={report.num_records}")


def _resolve(base_dir: str, value: str) -> str:
    return value if os.path.isabs(value) else os.path.join(base_dir, value)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out-dir", "out_dir", required=True, type=click.Path())
@click.pass_context
@_data_errors
def pipeline(ctx: click.Context, config_path: str, out_dir: str) -> None:
    """Run search, fusion, captioning, and both evaluations end to end."""
    with open(config_path, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    base = os.path.dirname(os.path.abspath(config_path))
    for required in ("models", "k", "fusion_config", "ground_truth",
                     "articles", "mapping", "references", "endpoint_config"):
        if required not in cfg:
            raise click.UsageError(f"pipeline config missing field: {required!r}")

    os.makedirs(out_dir, exist_ok=True)
    model_ids = sorted(cfg["models"])
    out_paths = {
        "fused": os.path.join(out_dir, "run.fused.jsonl"),
        "retrieval_report": os.path.join(out_dir, "retrieval_report.json"),
        "captions": os.path.join(out_dir, "captions.jsonl"),
        "caption_failures": os.path.join(out_dir, "caption_failures.jsonl"),
        "caption_report": os.path.join(out_dir, "caption_report.json"),
    }
    for model_id in model_ids:
        out_paths[f"run.{model_id}"] = os.path.join(out_dir, f"run.{model_id}.jsonl")
    _guard_outputs(out_paths.values(), ctx.obj["force"])

    fusion_config = fusion.load_fusion_config(_resolve(base, cfg["fusion_config"]))
    gt = retrieval_metrics.load_ground_truth(_resolve(base, cfg["ground_truth"]))
    catalog = load_catalog(_resolve(base, cfg["articles"]), _resolve(base, cfg["mapping"]))
    endpoint = captioning.load_endpoint_config(_resolve(base, cfg["endpoint_config"]))
    template = captioning.load_prompt_template(
        _resolve(base, cfg["template"]) if "template" in cfg else None
    )
    references = {
        obj["query_id"]: list(obj["references"])
        for obj in fileio.read_jsonl(_resolve(base, cfg["references"]))
    }

    per_model_runs: dict[str, list[RankedList]] = {}
    for model_id in model_ids:
        entry = cfg["models"][model_id]
        queries = load_embeddings(_resolve(base, entry["queries"]))
        db = load_embeddings(_resolve(base, entry["db"]))
        lists = batch_search(queries, db, int(cfg["k"]), threads=ctx.obj["threads"])
        per_model_runs[model_id] = lists
        write_run(lists, out_paths[f"run.{model_id}"])
        _say(ctx, f"searched {model_id}: {len(lists)} queries")

    by_query: dict[str, dict[str, RankedList]] = {}
    for model_id, lists in per_model_runs.items():
        for ranked in lists:
            by_query.setdefault(ranked.query_id, {})[model_id] = ranked
    fused = [fusion.fuse(fusion_config, by_query[qid]) for qid in sorted(by_query)]
    write_run(fused, out_paths["fused"])

    report = retrieval_metrics.evaluate_run(fused, gt, cfg.get("ks", (1, 10)))
    fileio.write_json(out_paths["retrieval_report"], report.to_json_obj())
    click.echo(f"retrieval: map={report.map_score:.6f}")

    image_refs = _load_image_manifest(
        _resolve(base, cfg["images"]) if cfg.get("images") else None
    )
    queries_list = [(r.query_id, image_refs.get(r.query_id, r.query_id)) for r in fused]
    client = captioning.make_client(endpoint)
    outputs, failures = captioning.run_caption_stage(
        queries_list, fused, catalog, template, client,
        article_budget=int(cfg.get("article_budget", captioning.DEFAULT_ARTICLE_BUDGET)),
        max_concurrent=max(endpoint.max_concurrent, ctx.obj["threads"]),
    )
    fileio.write_jsonl(out_paths["captions"], (o.to_json_obj() for o in outputs))
    fileio.write_jsonl(out_paths["caption_failures"], (f.to_json_obj() for f in failures))
    click.echo(f"captioning: {len(outputs)} captions, {len(failures)} failures")

    records = caption_metrics.join_captions_with_references(
        (o.to_json_obj() for o in outputs), references
    )
    cap_emb = (
        load_embeddings(_resolve(base, cfg["caption_embeddings"]))
        if cfg.get("caption_embeddings") else None
    )
    img_emb = (
        load_embeddings(_resolve(base, cfg["image_embeddings"]))
        if cfg.get("image_embeddings") else None
    )
    caption_report = caption_metrics.score_captions(records, cap_emb, img_emb)
    fileio.write_json(out_paths["caption_report"], caption_report.to_json_obj())
    click.echo(f"captions scored: cider={caption_report.cider:.6f}")
    if failures:
        raise SystemExit(1)


@main.command("make-fixture")
@click.option("--out-dir", "out_dir", required=True, type=click.Path())
@click.option("--num-images", type=int, default=10, show_default=True)
@click.option("--dim", type=int, default=16, show_default=True)
@click.pass_context
@_data_errors
def make_fixture_cmd(ctx: click.Context, out_dir: str, num_images: int, dim: int) -> None:
    """Generate the synthetic end-to-end fixture."""
    paths = fixture.make_fixture(out_dir, seed=ctx.obj["seed"], num_images=num_images, dim=dim)
    click.echo(f"fixture written to {paths.root} (pipeline config: {paths.pipeline_config})")


if __name__ == "__main__":
    main()
