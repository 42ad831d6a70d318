"""Command-line pipeline orchestration.

Each stage reads its predecessor's checkpoint files from the output directory
and writes its own, so expensive backend stages can be re-run independently:

    personas -> personas.jsonl
    contexts -> contexts.jsonl
    plots    -> plots.jsonl
    realize  -> dialogs.jsonl
    qc       -> qc_report.jsonl + dataset.jsonl
    stats    -> stats.txt (+ CSV tables)
    split    -> split.json
    run-all  -> all of the above in order
"""

from __future__ import annotations

import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import click

from . import dataset as dataset_mod
from . import qc as qc_mod
from .config import ConfigError, PipelineConfig, load_config
from .context import generate_contexts, sample_current_time, AppContext
from .dataset import Datapoint, compute_stats, read_dataset, split as split_corpus, \
    stats_to_text, write_dataset
from .llm import make_backend
from .persona import Persona, generate_pool, read_pool, write_pool
from .plot import Plot, build_plot
from .realizer import realize_dialog
from .rng import derive_rng
from .sampler import DialogSpecimen, sample_specimen
from .schema import SchemaSet, load_schema_set

_STAGE_ERRORS = (ConfigError, ValueError, RuntimeError, OSError, KeyError)


def _fail(stage: str, error: Exception) -> None:
    summary = {"stage": stage, "error": type(error).__name__,
               "message": str(error)}
    click.echo(json.dumps(summary), err=True)
    sys.exit(1)


def _build_config(config, seed, count, services, backend, out) -> PipelineConfig:
    overrides: dict = {}
    if seed is not None:
        overrides["seed"] = seed
    if count is not None:
        overrides["dialog_count"] = count
    if services:
        overrides["services"] = tuple(s.strip() for s in services.split(","))
    if out is not None:
        overrides["output_dir"] = out
    cfg = load_config(config, **overrides)
    if backend is not None:
        cfg = replace(
            cfg,
            user_backend=replace(cfg.user_backend, kind=backend),
            system_backend=replace(cfg.system_backend, kind=backend),
            evaluator_backend=replace(cfg.evaluator_backend, kind=backend),
        )
    return cfg


def _schemas(cfg: PipelineConfig) -> SchemaSet:
    schemas = load_schema_set(cfg.schema_manifest_path)
    if cfg.services:
        schemas = schemas.subset(cfg.services)
    return schemas


def _outdir(cfg: PipelineConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise ConfigError(f"missing input {path}; run the {producer!r} stage first")
    return path


def _common_options(fn):
    fn = click.option("--config", type=click.Path(), default=None,
                      help="YAML config file.")(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="Override the pipeline seed.")(fn)
    fn = click.option("--count", type=int, default=None,
                      help="Override the dialog count.")(fn)
    fn = click.option("--services", type=str, default=None,
                      help="Comma-separated service subset.")(fn)
    fn = click.option("--backend", type=click.Choice(["mock", "http"]),
                      default=None, help="Override all backend kinds.")(fn)
    fn = click.option("--out", type=click.Path(), default=None,
                      help="Override the output directory.")(fn)
    return fn


@click.group()
def main() -> None:
    """Schema-driven synthetic task-oriented dialog generation."""


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def stage_personas(cfg: PipelineConfig) -> list:
    out = _outdir(cfg)
    llm = make_backend(cfg.user_backend)
    pool = generate_pool(cfg, llm)
    write_pool(pool, out / "personas.jsonl")
    return pool


def stage_contexts(cfg: PipelineConfig) -> list:
    """Per dialog: assign a persona, sample a clock, generate app contexts."""
    out = _outdir(cfg)
    pool = read_pool(_require(out / "personas.jsonl", "personas"))
    schemas = _schemas(cfg)
    llm = make_backend(cfg.user_backend)
    rows = []
    with open(out / "contexts.jsonl", "w", encoding="utf-8") as f:
        for i in range(cfg.dialog_count):
            assign_rng = derive_rng(cfg.seed, "assign", i)
            persona = pool[assign_rng.randrange(len(pool))]
            now = sample_current_time(
                derive_rng(cfg.seed, "clock", i), cfg.time_window
            )
            contexts = generate_contexts(
                persona, schemas, now, llm, cfg, derive_rng(cfg.seed, "ctx", i)
            )
            row = {
                "dialog_id": f"dlg-{i:05d}",
                "persona_id": persona.id,
                "contexts": [c.to_dict() for c in contexts.values()],
            }
            f.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
            rows.append(row)
    return rows


def _read_jsonl(path: Path) -> list:
    rows = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def stage_plots(cfg: PipelineConfig) -> list:
    out = _outdir(cfg)
    pool = {p.id: p for p in read_pool(_require(out / "personas.jsonl", "personas"))}
    ctx_rows = _read_jsonl(_require(out / "contexts.jsonl", "contexts"))
    schemas = _schemas(cfg)
    llm = make_backend(cfg.user_backend)
    rows = []
    with open(out / "plots.jsonl", "w", encoding="utf-8") as f:
        for i, ctx_row in enumerate(ctx_rows):
            persona = pool[ctx_row["persona_id"]]
            contexts = {
                c["service_name"]: AppContext.from_dict(c)
                for c in ctx_row["contexts"]
            }
            rng = derive_rng(cfg.seed, "dialog", i)
            spec = sample_specimen(
                rng, schemas, persona, contexts, llm, cfg,
                dialog_id=ctx_row["dialog_id"],
            )
            plot = build_plot(spec, schemas, contexts, rng, llm, cfg)
            row = {
                "dialog_id": ctx_row["dialog_id"],
                "persona_id": persona.id,
                "specimen": spec.to_dict(),
                "plot": plot.to_dict(),
            }
            f.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
            rows.append(row)
    return rows


def stage_realize(cfg: PipelineConfig) -> list:
    out = _outdir(cfg)
    pool = {p.id: p for p in read_pool(_require(out / "personas.jsonl", "personas"))}
    ctx_rows = {
        r["dialog_id"]: r
        for r in _read_jsonl(_require(out / "contexts.jsonl", "contexts"))
    }
    plot_rows = _read_jsonl(_require(out / "plots.jsonl", "plots"))
    user_llm = make_backend(cfg.user_backend)
    system_llm = make_backend(cfg.system_backend)
    dps = []
    for row in plot_rows:
        plot = Plot.from_dict(row["plot"])
        persona = pool[row["persona_id"]]
        contexts = {
            c["service_name"]: AppContext.from_dict(c)
            for c in ctx_rows[row["dialog_id"]]["contexts"]
        }
        record = realize_dialog(
            plot, persona, contexts, user_llm, system_llm, cfg
        )
        dps.append(
            Datapoint(
                id=row["dialog_id"],
                plot=plot,
                dialog=record,
                persona_id=persona.id,
                contexts=contexts,
            )
        )
    write_dataset(dps, out / "dialogs.jsonl")
    return dps


def stage_qc(cfg: PipelineConfig) -> list:
    out = _outdir(cfg)
    dps = read_dataset(_require(out / "dialogs.jsonl", "realize"))
    llm = make_backend(cfg.evaluator_backend)
    reports = qc_mod.run_qc(dps, llm, cfg)
    with open(out / "qc_report.jsonl", "w", encoding="utf-8") as f:
        for r in reports:
            f.write(json.dumps(r.to_dict(), ensure_ascii=False, sort_keys=True))
            f.write("\n")
    dropped = {r.datapoint_id for r in reports if r.disposition == "drop"}
    kept = [dp for dp in dps if dp.id not in dropped]
    write_dataset(kept, out / "dataset.jsonl")
    return reports


def _dataset_for_reporting(cfg: PipelineConfig) -> list:
    out = _outdir(cfg)
    path = out / "dataset.jsonl"
    if not path.exists():
        path = _require(out / "dialogs.jsonl", "realize")
    return read_dataset(path)


def stage_stats(cfg: PipelineConfig) -> dict:
    out = _outdir(cfg)
    stats = compute_stats(_dataset_for_reporting(cfg))
    (out / "stats.txt").write_text(stats_to_text(stats), encoding="utf-8")
    for name in ("dialog_length_hist", "utterance_word_hist",
                 "service_coverage", "action_head_dist"):
        with open(out / f"stats_{name}.csv", "w", newline="",
                  encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["key", "count"])
            for k, v in stats[name].items():
                writer.writerow([k, v])
    return stats


def stage_split(cfg: PipelineConfig) -> dataset_mod.SplitManifest:
    out = _outdir(cfg)
    dps = _dataset_for_reporting(cfg)
    manifest = split_corpus(
        dps, cfg.held_out_service, cfg.test_fraction, cfg.seed
    )
    (out / "split.json").write_text(
        json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    return manifest


_STAGES = (
    ("personas", stage_personas),
    ("contexts", stage_contexts),
    ("plots", stage_plots),
    ("realize", stage_realize),
    ("qc", stage_qc),
    ("stats", stage_stats),
    ("split", stage_split),
)


def _run_stage(name: str, cfg: PipelineConfig):
    for stage_name, fn in _STAGES:
        if stage_name == name:
            try:
                return fn(cfg)
            except _STAGE_ERRORS as e:
                _fail(name, e)
    raise ValueError(f"unknown stage {name!r}")


def _make_command(stage_name: str, help_text: str):
    @main.command(name=stage_name, help=help_text)
    @_common_options
    def command(config, seed, count, services, backend, out):
        try:
            cfg = _build_config(config, seed, count, services, backend, out)
        except _STAGE_ERRORS as e:
            _fail(stage_name, e)
        result = _run_stage(stage_name, cfg)
        size = len(result) if hasattr(result, "__len__") else 1
        click.echo(f"{stage_name}: wrote {size} records to {cfg.output_dir}")

    return command


_make_command("personas", "Generate the persona pool.")
_make_command("contexts", "Generate per-dialog app contexts.")
_make_command("plots", "Sample specimens and build action plots.")
_make_command("realize", "Realize plots into utterances.")
_make_command("qc", "Run quality control and write the filtered dataset.")
_make_command("stats", "Compute corpus statistics.")
_make_command("split", "Produce the train/test/zero-shot split manifest.")


@main.command(name="run-all", help="Run every stage in order.")
@_common_options
def run_all(config, seed, count, services, backend, out):
    try:
        cfg = _build_config(config, seed, count, services, backend, out)
    except _STAGE_ERRORS as e:
        _fail("run-all", e)
    for stage_name, fn in _STAGES:
        try:
            fn(cfg)
        except _STAGE_ERRORS as e:
            _fail(stage_name, e)
        click.echo(f"{stage_name}: done")
    click.echo(f"pipeline complete; artifacts in {cfg.output_dir}")


if __name__ == "__main__":
    main()
