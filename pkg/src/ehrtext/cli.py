"""Command-line pipeline: gen-synthetic, serialize, embed, eval, report.

Every stage writes its outputs plus a manifest entry keyed by config and
input digests; re-running a completed stage with unchanged inputs is a
no-op. Configuration comes from a single YAML or JSON file (--config),
with --seed and --jobs as global overrides and EHRTEXT_PROVIDER_URL /
EHRTEXT_CACHE_DIR read from the environment.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import click
import numpy as np
import yaml

from .counts import build_feature_space, counts_config_from_dict, featurize_instances
from .embeddings import (
    CachedProvider,
    EmbeddingStore,
    MemeEmbedder,
    VectorCache,
    provider_from_dict,
)
from .events import ingest_events, ingest_labels, merge_labels
from .evaluation import load_split_assignments
from .experiment import fewshot_config_from_dict, run_fewshot
from .instructions import InstructionMode, build_prompt, default_instruction_set, load_instruction_set
from .ontology import OntologyIndex, default_concept_table
from .pipeline import RunManifest, config_digest
from .serialize import serialization_config_from_dict, serialize_record, component_texts
from .synthetic import generate_cohort


def _load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    loaded = yaml.safe_load(Path(path).read_text("utf-8"))
    if loaded is None:
        return {}
    if not isinstance(loaded, dict):
        raise click.ClickException(f"config file {path} must contain a mapping")
    return loaded


def _require_files(**named_paths: Optional[str]) -> None:
    missing = [f"{name}: {path}" for name, path in named_paths.items()
               if path is not None and not Path(path).exists()]
    if missing:
        raise click.ClickException("missing input files:\n  " + "\n  ".join(missing))


def _read_lines(path: str) -> list[str]:
    return Path(path).read_text("utf-8").splitlines()


def _load_ontology(descriptions: Optional[str], hierarchy: Optional[str]) -> OntologyIndex:
    return OntologyIndex.from_tsv(
        _read_lines(descriptions) if descriptions else (),
        _read_lines(hierarchy) if hierarchy else (),
    )


def _load_tasks(instructions_file: Optional[str], groups_file: Optional[str]):
    if instructions_file:
        return load_instruction_set(instructions_file, groups_file)
    return default_instruction_set()


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, "utf-8")
    os.replace(tmp, path)


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="YAML or JSON configuration file.")
@click.option("--jobs", type=int, default=1, show_default=True,
              help="Worker threads for serialization and embedding.")
@click.option("--seed", type=int, default=None, help="Override the configured seed.")
@click.pass_context
def main(ctx: click.Context, config_path: Optional[str], jobs: int, seed: Optional[int]) -> None:
    if config_path:
        _require_files(config=config_path)
    ctx.obj = {"config": _load_config(config_path), "jobs": max(1, jobs), "seed": seed}


def _seed_of(ctx_obj: dict, section: dict, default: int = 0) -> int:
    if ctx_obj["seed"] is not None:
        return ctx_obj["seed"]
    return int(section.get("seed", ctx_obj["config"].get("seed", default)))


@main.command("gen-synthetic")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--n", "n_patients", type=int, default=None, help="Cohort size.")
@click.option("--prevalence", type=float, default=None, help="Positive-label fraction.")
@click.pass_context
def gen_synthetic_cmd(ctx: click.Context, out_dir: str, n_patients: Optional[int],
                      prevalence: Optional[float]) -> None:
    """Generate the synthetic cohort with its planted label rule."""
    section = ctx.obj["config"].get("synthetic", {})
    n = n_patients if n_patients is not None else int(section.get("n_patients", 2000))
    prev = prevalence if prevalence is not None else float(section.get("prevalence", 0.3))
    seed = _seed_of(ctx.obj, section)
    out = Path(out_dir)
    manifest = RunManifest(out / "manifest.json")
    cfg_digest = config_digest({"n": n, "prevalence": prev, "seed": seed})
    outputs = [out / name for name in
               ("events.jsonl", "labels.jsonl", "splits.jsonl", "descriptions.tsv", "hierarchy.tsv")]
    if all(p.exists() for p in outputs) and manifest.stage_current("gen-synthetic", cfg_digest, []):
        click.echo("gen-synthetic: up to date, skipping")
        return
    summary = generate_cohort(out, n_patients=n, seed=seed, prevalence=prev)
    manifest.mark_stage("gen-synthetic", cfg_digest, [], outputs)
    click.echo(
        f"gen-synthetic: {summary.n_patients} patients, {summary.n_events} events, "
        f"prevalence {summary.prevalence:.3f}, splits {summary.split_sizes}"
    )


@main.command("serialize")
@click.option("--events", "events_path", required=True, type=click.Path())
@click.option("--labels", "labels_path", required=True, type=click.Path())
@click.option("--descriptions", "descriptions_path", type=click.Path(), default=None)
@click.option("--hierarchy", "hierarchy_path", type=click.Path(), default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.pass_context
def serialize_cmd(ctx: click.Context, events_path: str, labels_path: str,
                  descriptions_path: Optional[str], hierarchy_path: Optional[str],
                  out_dir: str) -> None:
    """Serialize one record per merged prediction instance."""
    _require_files(events=events_path, labels=labels_path,
                   descriptions=descriptions_path, hierarchy=hierarchy_path)
    section = ctx.obj["config"].get("serialization", {})
    ser_cfg = serialization_config_from_dict(section)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(out / "manifest.json")
    inputs = [p for p in (events_path, labels_path, descriptions_path, hierarchy_path) if p]
    cfg_digest = config_digest({"serialization": section})
    out_path = out / "serialized.jsonl"
    if out_path.exists() and manifest.stage_current("serialize", cfg_digest, inputs):
        click.echo("serialize: up to date, skipping")
        return

    ontology = _load_ontology(descriptions_path, hierarchy_path)
    concepts = default_concept_table()
    ingest = ingest_events(_read_lines(events_path))
    instances = merge_labels(ingest_labels(_read_lines(labels_path)))
    missing_patients = sorted({i.patient_id for i in instances} - set(ingest.patients))
    if missing_patients:
        raise click.ClickException(
            f"{len(missing_patients)} labeled patients have no events, first: {missing_patients[:5]}"
        )

    def build_row(inst) -> str:
        patient = ingest.patients[inst.patient_id]
        record = serialize_record(patient, inst.prediction_time, ser_cfg, ontology, concepts)
        components = component_texts(patient, inst.prediction_time, ser_cfg, ontology, concepts)
        return json.dumps(
            {
                "instance_key": inst.instance_key,
                "text": record.text,
                "token_estimate": record.token_estimate,
                "truncated": record.truncated,
                "sections": {k: list(v) for k, v in record.sections.items()},
                "components": components,
            },
            ensure_ascii=False,
        )

    if ctx.obj["jobs"] > 1:
        with ThreadPoolExecutor(max_workers=ctx.obj["jobs"]) as pool:
            rows = list(pool.map(build_row, instances))
    else:
        rows = [build_row(inst) for inst in instances]
    _atomic_write(out_path, "".join(r + "\n" for r in rows))
    manifest.mark_stage("serialize", cfg_digest, inputs, [out_path])
    click.echo(
        f"serialize: wrote {len(rows)} records to {out_path} "
        f"({ingest.rows_rejected}/{ingest.rows_read} event rows rejected)"
    )


@main.command("embed")
@click.option("--serialized", "serialized_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--cache-dir", "cache_dir", type=click.Path(), default=None,
              help="Vector cache location (default: EHRTEXT_CACHE_DIR or <out>/cache).")
@click.option("--instructions-file", type=click.Path(), default=None)
@click.option("--groups-file", type=click.Path(), default=None)
@click.pass_context
def embed_cmd(ctx: click.Context, serialized_path: str, out_dir: str,
              cache_dir: Optional[str], instructions_file: Optional[str],
              groups_file: Optional[str]) -> None:
    """Embed serialized records through the configured provider."""
    if Path(serialized_path).is_dir():
        serialized_path = str(Path(serialized_path) / "serialized.jsonl")
    _require_files(serialized=serialized_path, instructions=instructions_file,
                   groups=groups_file)
    section = ctx.obj["config"].get("provider", {})
    mode = InstructionMode(section.get("instruction_mode", "task_specific"))
    provider_cfg = {k: v for k, v in section.items() if k != "instruction_mode"}
    provider = provider_from_dict(provider_cfg, os.environ.get("EHRTEXT_PROVIDER_URL"))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(out / "manifest.json")
    cfg_digest = config_digest({"provider": section, "provider_id": provider.provider_id})
    store = EmbeddingStore(out / "store")
    if (out / "store" / "meta.json").exists() and manifest.stage_current(
        "embed", cfg_digest, [serialized_path]
    ):
        click.echo("embed: up to date, skipping")
        return

    cache_path = cache_dir or os.environ.get("EHRTEXT_CACHE_DIR") or str(out / "cache")
    cache = VectorCache(cache_path)
    is_meme = isinstance(provider, MemeEmbedder)
    if is_meme:
        provider.base = CachedProvider(provider.base, cache)
        counter = provider.base
    else:
        provider = CachedProvider(provider, cache)
        counter = provider
    tasks = _load_tasks(instructions_file, groups_file)

    rows = [json.loads(line) for line in _read_lines(serialized_path) if line.strip()]

    def embed_row(row: dict) -> np.ndarray:
        task_id = row["instance_key"].split("|")[1]
        instruction = build_prompt(tasks.require(task_id), mode)
        if is_meme:
            return provider.embed_sections(instruction, row.get("components", {}))
        return provider.embed(instruction, row["text"])

    if ctx.obj["jobs"] > 1:
        with ThreadPoolExecutor(max_workers=ctx.obj["jobs"]) as pool:
            vectors = list(pool.map(embed_row, rows))
    else:
        vectors = [embed_row(row) for row in rows]
    if not vectors:
        raise click.ClickException("no serialized records to embed")
    matrix = np.vstack(vectors)
    keys = [row["instance_key"] for row in rows]
    store.write(keys, matrix, provider.provider_id, provider.model_id)
    cache.close()
    manifest.mark_stage("embed", cfg_digest, [serialized_path], [out / "store"])
    click.echo(
        f"embed: {matrix.shape[0]} vectors of dim {matrix.shape[1]} "
        f"({counter.hits} cache hits, {counter.misses} misses)"
    )


@main.command("eval")
@click.option("--labels", "labels_path", required=True, type=click.Path())
@click.option("--splits", "splits_path", required=True, type=click.Path())
@click.option("--embeddings", "embeddings_dir", type=click.Path(), default=None,
              help="Embedding store directory written by the embed stage.")
@click.option("--counts-events", "counts_events", type=click.Path(), default=None,
              help="Evaluate the count-based baseline built from this event file.")
@click.option("--descriptions", "descriptions_path", type=click.Path(), default=None)
@click.option("--hierarchy", "hierarchy_path", type=click.Path(), default=None)
@click.option("--instructions-file", type=click.Path(), default=None)
@click.option("--groups-file", type=click.Path(), default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.pass_context
def eval_cmd(ctx: click.Context, labels_path: str, splits_path: str,
             embeddings_dir: Optional[str], counts_events: Optional[str],
             descriptions_path: Optional[str], hierarchy_path: Optional[str],
             instructions_file: Optional[str], groups_file: Optional[str],
             out_dir: str) -> None:
    """Run the few-shot protocol and write report artifacts."""
    if (embeddings_dir is None) == (counts_events is None):
        raise click.ClickException("pass exactly one of --embeddings or --counts-events")
    _require_files(labels=labels_path, splits=splits_path,
                   embeddings=embeddings_dir, events=counts_events,
                   descriptions=descriptions_path, hierarchy=hierarchy_path,
                   instructions=instructions_file, groups=groups_file)
    section = ctx.obj["config"].get("evaluation", {})
    fs_cfg = fewshot_config_from_dict(section)
    if ctx.obj["seed"] is not None:
        fs_cfg = fewshot_config_from_dict({**section, "base_seed": ctx.obj["seed"]})
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(out / "manifest.json")
    feature_input = embeddings_dir or counts_events
    inputs = [p for p in (labels_path, splits_path, feature_input,
                          descriptions_path, hierarchy_path) if p]
    counts_section = ctx.obj["config"].get("counts", {})
    cfg_digest = config_digest({"evaluation": section, "counts": counts_section,
                                "seed": fs_cfg.base_seed})
    report_path = out / "report.json"
    if report_path.exists() and manifest.stage_current("eval", cfg_digest, inputs):
        click.echo("eval: up to date, skipping")
        return

    instances = merge_labels(ingest_labels(_read_lines(labels_path)))
    split_of = load_split_assignments(_read_lines(splits_path))
    tasks = _load_tasks(instructions_file, groups_file).tasks

    if embeddings_dir is not None:
        # accept either the store itself or the embed output dir around it
        store_dir = Path(embeddings_dir)
        if (store_dir / "store" / "meta.json").exists():
            store_dir = store_dir / "store"
        keys, matrix, _meta = EmbeddingStore(store_dir).read()
        features = {key: matrix[i] for i, key in enumerate(keys)}
    else:
        counts_cfg = counts_config_from_dict(counts_section)
        ontology = _load_ontology(descriptions_path, hierarchy_path)
        ingest = ingest_events(_read_lines(counts_events))
        # vocabulary support comes from train and valid instances only
        fit_instances = [i for i in instances if split_of.get(i.patient_id) in ("train", "valid")]
        space = build_feature_space(ingest.patients, fit_instances, ontology, counts_cfg)
        keys, X, _y = featurize_instances(ingest.patients, instances, space, ontology)
        features = {key: X[i] for i, key in enumerate(keys)}

    report = run_fewshot(instances, split_of, features, tasks, fs_cfg)
    _atomic_write(report_path, report.to_json())
    _atomic_write(out / "report.csv", report.to_csv())
    _atomic_write(out / "plot_data.csv", report.to_plot_csv())
    manifest.mark_stage("eval", cfg_digest, inputs,
                        [report_path, out / "report.csv", out / "plot_data.csv"])
    click.echo(f"eval: {len(report.entries)} metric entries, {len(report.skipped)} skipped "
               f"-> {report_path}")


@main.command("report")
@click.option("--report-json", "report_path", required=True, type=click.Path())
def report_cmd(report_path: str) -> None:
    """Print a human-readable summary of an eval report."""
    _require_files(report=report_path)
    payload = json.loads(Path(report_path).read_text("utf-8"))
    agg = payload.get("aggregates", {})
    click.echo("macro averages:")
    for metric in sorted(agg.get("macro", {})):
        for k, value in agg["macro"][metric].items():
            click.echo(f"  {metric:>6}  k={k:>4}  {value:.4f}")
    for group in sorted(agg.get("groups", {})):
        click.echo(f"group {group}:")
        for metric in sorted(agg["groups"][group]):
            for k, value in agg["groups"][group][metric].items():
                click.echo(f"  {metric:>6}  k={k:>4}  {value:.4f}")
    skipped = payload.get("skipped", [])
    if skipped:
        click.echo(f"skipped entries: {len(skipped)}")


if __name__ == "__main__":
    main()
