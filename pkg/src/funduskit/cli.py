"""Command-line entry point.

Subcommands: acquire-dk, build-vocab, extract-vf, compose, qc, export,
serve-score, eval. Exit codes: 0 success, 1 usage error, 2 partial failure,
3 hard failure.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from funduskit.config import PipelineConfig, load_config
from funduskit.core import SynonymMap, default_synonyms, parse_trace
from funduskit.findings import VfStore
from funduskit.knowledge import DkStore
from funduskit.metrics import render_report_json, render_report_table
from funduskit import pipeline
from funduskit.traces import QualityReport, TraceRecord, quality_check
from funduskit.core import ReasoningTrace

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PARTIAL = 2
EXIT_HARD = 3

log = logging.getLogger("funduskit")


class AppContext:
    def __init__(self, cfg: PipelineConfig, replay: bool, force: bool):
        self.cfg = cfg
        self.replay = replay
        self.force = force
        self.synonyms = (
            SynonymMap.from_file(cfg.synonyms_file)
            if cfg.synonyms_file else default_synonyms()
        )

    def gateway(self):
        return pipeline.make_gateway(self.cfg, self.replay)

    def dk_store(self) -> DkStore:
        return DkStore(self.cfg.dk_store, self.synonyms)

    def vf_store(self) -> VfStore:
        return VfStore(self.cfg.vf_store, self.synonyms)


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="TOML config file.")
@click.option("--replay/--live", default=True,
              help="Serve gateway exchanges from the recorded cache (default) or hit live endpoints.")
@click.option("--workers", type=int, default=None, help="Worker pool size override.")
@click.option("--seed", type=int, default=None, help="Shuffle seed override.")
@click.option("--force", is_flag=True, help="Redo work whose outputs already exist.")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def cli(ctx, config_path, replay, workers, seed, force, verbose):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING)
    cfg = load_config(config_path)
    if workers is not None:
        cfg.workers = workers
    if seed is not None:
        cfg.seed = seed
    ctx.obj = AppContext(cfg, replay=replay, force=force)


def _finish(result: pipeline.StageResult, label: str) -> None:
    click.echo(
        f"{label}: {result.succeeded} done, {result.skipped} skipped, "
        f"{result.failed} failed"
        + (f", {result.accepted} accepted, {result.rejected} rejected"
           if result.accepted or result.rejected else "")
    )
    for error in result.errors:
        click.echo(f"  error: {error}", err=True)
    if result.failed:
        sys.exit(EXIT_PARTIAL)


@cli.command("acquire-dk")
@click.argument("manifest", type=click.Path(exists=True))
@click.pass_obj
def acquire_dk(app: AppContext, manifest):
    """Build domain-knowledge records for every (label, modality) pair in
    MANIFEST."""
    entries = pipeline.load_manifest(manifest)
    result = pipeline.run_acquire_dk(
        entries, app.gateway(), app.dk_store(), app.cfg, force=app.force
    )
    _finish(result, "acquire-dk")


@cli.command("build-vocab")
@click.option("--out", type=click.Path(), required=True)
@click.pass_obj
def build_vocab(app: AppContext, out):
    """Emit the merged finding vocabulary for every stored DK record."""
    count = pipeline.run_build_vocab(app.dk_store(), out)
    click.echo(f"build-vocab: {count} vocabularies written to {out}")


@cli.command("extract-vf")
@click.argument("samples", type=click.Path(exists=True))
@click.pass_obj
def extract_vf_cmd(app: AppContext, samples):
    """Extract voted visual findings for every sample in SAMPLES (JSONL)."""
    records = pipeline.load_samples(samples, app.synonyms)
    try:
        result = pipeline.run_extract_vf(
            records, app.dk_store(), app.vf_store(), app.gateway(), app.cfg
        )
    except pipeline.MissingVocabError as exc:
        click.echo(f"extract-vf: {exc}", err=True)
        sys.exit(EXIT_HARD)
    _finish(result, "extract-vf")


@cli.command("compose")
@click.argument("samples", type=click.Path(exists=True))
@click.pass_obj
def compose(app: AppContext, samples):
    """Compose knowledge-aware traces, run the quality gate, and write the
    SFT/RL exports and rejected log."""
    records = pipeline.load_samples(samples, app.synonyms)
    gateway = app.gateway()
    result = pipeline.run_compose(
        records, app.dk_store(), app.vf_store(), gateway, gateway, app.cfg
    )
    total = result.accepted + result.rejected
    rate = result.accepted / total if total else 1.0
    click.echo(
        f"compose: {result.succeeded} composed, {result.skipped} skipped, "
        f"{result.failed} failed, {result.accepted} accepted, {result.rejected} rejected"
    )
    for error in result.errors:
        click.echo(f"  error: {error}", err=True)
    if result.failed or rate < app.cfg.acceptance_floor:
        sys.exit(EXIT_PARTIAL)


@cli.command("qc")
@click.argument("samples", type=click.Path(exists=True))
@click.option("--traces", type=click.Path(exists=True), required=True,
              help="Composed trace file (JSONL with trace_serialized).")
@click.option("--out", type=click.Path(), default=None)
@click.pass_obj
def qc(app: AppContext, samples, traces, out):
    """Re-run the quality gate over an existing trace file."""
    sample_map = {s.id: s for s in pipeline.load_samples(samples, app.synonyms)}
    dk_store = app.dk_store()
    vf_map = app.vf_store().load()
    judge = app.gateway()
    lines = []
    failures = 0
    with open(traces, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            raw = json.loads(line)
            sample = sample_map.get(raw["sample_id"])
            if sample is None:
                click.echo(f"qc: unknown sample {raw['sample_id']}", err=True)
                failures += 1
                continue
            dk = dk_store.load(sample.gold_answer, sample.modality)
            vf = vf_map.get(sample.id)
            if dk is None or vf is None:
                click.echo(f"qc: missing stores for {sample.id}", err=True)
                failures += 1
                continue
            trace = (
                parse_trace(raw["trace_serialized"])
                if raw.get("trace_serialized") else None
            )
            record = TraceRecord(
                sample_id=sample.id,
                question=raw.get("question", sample.question),
                gold_answer=sample.gold_answer,
                trace=trace,
                vf_used=vf,
                dk_key=(dk.label, dk.modality.value),
            )
            report = quality_check(record, dk, judge,
                                   options=raw.get("options") or sample.options,
                                   synonyms=app.synonyms)
            lines.append({"sample_id": sample.id, **report.to_dict()})
    payload = "\n".join(json.dumps(l, sort_keys=True) for l in lines)
    if out:
        Path(out).write_text(payload + "\n", encoding="utf-8")
    else:
        click.echo(payload)
    if failures:
        sys.exit(EXIT_PARTIAL)


@cli.command("export")
@click.argument("samples", type=click.Path(exists=True))
@click.option("--traces", type=click.Path(exists=True), required=True)
@click.pass_obj
def export(app: AppContext, samples, traces):
    """Re-derive the SFT/RL exports from a composed trace file."""
    records = pipeline.load_samples(samples, app.synonyms)
    try:
        sft_count, rl_count = pipeline.run_export(
            Path(traces), records, app.cfg.sft_export, app.cfg.rl_export
        )
    except pipeline.UnmatchedIdError as exc:
        click.echo(f"export: {exc}", err=True)
        sys.exit(EXIT_HARD)
    click.echo(f"export: {sft_count} SFT records, {rl_count} RL records")


@cli.command("serve-score")
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8080)
@click.pass_obj
def serve_score(app: AppContext, host, port):
    """Run the reward-scoring HTTP service."""
    import uvicorn
    from funduskit.service import ScoringService, create_app

    service = ScoringService(
        judge=app.gateway(),
        dk_store=app.dk_store(),
        vf_store=app.vf_store(),
        synonyms=app.synonyms,
        advantage_mode=app.cfg.advantage_mode,
        strict_judge=app.cfg.strict_judge,
    )
    uvicorn.run(create_app(service), host=host, port=port)


@cli.command("eval")
@click.argument("predictions", type=click.Path(exists=True))
@click.argument("samples", type=click.Path(exists=True))
@click.argument("manifest", type=click.Path(exists=True))
@click.option("--json-out", type=click.Path(), default=None)
@click.pass_obj
def eval_cmd(app: AppContext, predictions, samples, manifest, json_out):
    """Score a prediction file against SAMPLES per the task MANIFEST."""
    records = pipeline.load_samples(samples, app.synonyms)
    tasks = json.loads(Path(manifest).read_text(encoding="utf-8"))
    try:
        reports = pipeline.run_eval(predictions, records, tasks)
    except pipeline.UnmatchedIdError as exc:
        click.echo(f"eval: {exc}", err=True)
        sys.exit(EXIT_HARD)
    click.echo(render_report_table(reports))
    if json_out:
        Path(json_out).write_text(render_report_json(reports), encoding="utf-8")


def main():
    try:
        cli(standalone_mode=False)
    except click.UsageError as exc:
        exc.show()
        sys.exit(EXIT_USAGE)
    except click.ClickException as exc:
        exc.show()
        sys.exit(EXIT_USAGE)
    except click.Abort:
        sys.exit(EXIT_USAGE)


if __name__ == "__main__":
    main()
