"""Stage orchestration for the end-to-end pipeline: domain-knowledge
acquisition, vocabulary building, visual-finding extraction, trace
composition with the quality gate, exports, and evaluation.

Stages are resumable: each skips per-sample work whose output already exists,
and appends only the missing records in input order.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from funduskit.config import PipelineConfig
from funduskit.core import (
    Modality,
    SynonymMap,
    VqaSample,
    normalize_answer,
    parse_trace,
    TraceFormatError,
)
from funduskit.findings import VfStore, extract_vf
from funduskit.gateway import Gateway, GatewayError, HttpGateway, ReplayCache, ReplayGateway
from funduskit.knowledge import (
    DkStore,
    build_query,
    compose_description,
    extract_dk,
    NarrativeFilterError,
    text_to_findings,
)
from funduskit.metrics import TaskReport, accuracy, macro_f1
from funduskit.traces import (
    AnswerMismatchError,
    CompositionFormatError,
    DEFECT_ANSWER,
    DEFECT_FORMAT,
    QualityReport,
    TraceRecord,
    compose_trace,
    load_templates,
    quality_check,
    render_question,
    rl_line,
)

log = logging.getLogger(__name__)

DEFAULT_SOURCES = ("eyewiki", "aao", "pmc")


class MissingVocabError(RuntimeError):
    """One or more samples have no DK record for their (label, modality)."""

    def __init__(self, pairs: Sequence[tuple[str, str]]):
        self.pairs = list(pairs)
        listed = ", ".join(f"({label}, {mod})" for label, mod in self.pairs)
        super().__init__(f"no domain knowledge for: {listed}")


class UnmatchedIdError(RuntimeError):
    def __init__(self, orphans: Sequence[str]):
        self.orphans = list(orphans)
        super().__init__(f"unmatched sample ids: {', '.join(self.orphans)}")


@dataclass
class StageResult:
    succeeded: int = 0
    failed: int = 0
    skipped: int = 0
    accepted: int = 0
    rejected: int = 0
    errors: list[str] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return 2 if self.failed else 0


def make_gateway(cfg: PipelineConfig, replay: bool) -> Gateway:
    if replay:
        return ReplayGateway(ReplayCache(cfg.cache_dir), call_log=cfg.call_log)
    return HttpGateway(
        cfg.endpoints,
        cache=ReplayCache(cfg.cache_dir),
        call_log=cfg.call_log,
    )


def load_samples(path: str | Path, synonyms: Optional[SynonymMap] = None) -> list[VqaSample]:
    samples = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            sample = VqaSample.from_dict(json.loads(line), synonyms)
            if sample.id in seen:
                raise ValueError(f"duplicate sample id {sample.id}")
            seen.add(sample.id)
            samples.append(sample)
    return samples


def load_manifest(path: str | Path) -> list[dict]:
    """DK manifest: JSON list or JSON-lines of {label, modality, sources?}."""
    text = Path(path).read_text(encoding="utf-8").strip()
    if not text:
        return []
    if text.startswith("["):
        entries = json.loads(text)
    else:
        entries = [json.loads(line) for line in text.splitlines() if line.strip()]
    for entry in entries:
        Modality.parse(entry["modality"])  # validate early
        if not entry.get("label"):
            raise ValueError("manifest entry without label")
    return entries


def run_acquire_dk(
    manifest: Sequence[dict],
    gateway: Gateway,
    store: DkStore,
    cfg: PipelineConfig,
    force: bool = False,
) -> StageResult:
    """One DomainKnowledgeRecord per (label, modality) pair; idempotent
    unless forced."""
    result = StageResult()
    for entry in manifest:
        label = entry["label"]
        modality = Modality.parse(entry["modality"])
        sources = tuple(entry.get("sources", DEFAULT_SOURCES))
        if store.exists(label, modality) and not force:
            result.skipped += 1
            continue
        try:
            query = build_query(label, modality)
            passages = gateway.retrieve(query, sources)
            if not passages:
                raise NarrativeFilterError("retrieval returned no passages")
            narrative, retained = compose_description(passages)
            record = extract_dk(
                narrative, label, modality, gateway,
                sources=tuple(p.url for p in retained),
                synonyms=store.synonyms,
                max_reprompts=cfg.reprompt_budget,
            )
            store.save(record)
            result.succeeded += 1
        except Exception as exc:
            result.failed += 1
            result.errors.append(f"({label}, {modality.value}): {exc}")
            log.error("acquire-dk failed for (%s, %s): %s", label, modality.value, exc)
    return result


def run_build_vocab(store: DkStore, out_path: str | Path) -> int:
    """Emit one vocabulary line per stored DK record."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(out_path, "w", encoding="utf-8") as fh:
        for record in store.load_all():
            vocab = text_to_findings(record)
            fh.write(json.dumps({
                "label": vocab.label,
                "modality": vocab.modality.value,
                "entries": [f.name for f in vocab.entries],
            }, sort_keys=True, ensure_ascii=False) + "\n")
            count += 1
    return count


def run_extract_vf(
    samples: Sequence[VqaSample],
    dk_store: DkStore,
    vf_store: VfStore,
    gateway: Gateway,
    cfg: PipelineConfig,
) -> StageResult:
    """One VF line per sample; pixel-labeled samples bypass the gateway.

    Fails hard (MissingVocabError) when any non-pixel sample lacks a DK
    record for its (label, modality) pair.
    """
    missing: set[tuple[str, str]] = set()
    vocabs = {}
    for sample in samples:
        if sample.pixel_findings is not None:
            continue
        key = (sample.gold_answer, sample.modality)
        if key in vocabs or (key[0], key[1].value) in missing:
            continue
        record = dk_store.load(sample.gold_answer, sample.modality)
        if record is None:
            missing.add((sample.gold_answer, sample.modality.value))
        else:
            vocabs[key] = text_to_findings(record)
    if missing:
        raise MissingVocabError(sorted(missing))

    existing = vf_store.load()
    result = StageResult()
    pending = [s for s in samples if s.id not in existing]
    result.skipped = len(samples) - len(pending)

    def work(sample: VqaSample):
        if sample.pixel_findings is not None:
            return extract_vf(sample, None, gateway)  # vocab unused on bypass
        vocab = vocabs[(sample.gold_answer, sample.modality)]
        return extract_vf(
            sample, vocab, gateway,
            k=cfg.k_rollouts, threshold=cfg.vote_threshold,
            temperature=cfg.temperature, synonyms=vf_store.synonyms,
        )

    outcomes = []
    with ThreadPoolExecutor(max_workers=max(1, cfg.workers)) as pool:
        for sample, future in [(s, pool.submit(work, s)) for s in pending]:
            try:
                outcomes.append((sample, future.result(), None))
            except Exception as exc:
                outcomes.append((sample, None, exc))
    for sample, vf, error in outcomes:
        if error is not None:
            result.failed += 1
            result.errors.append(f"{sample.id}: {error}")
            log.error("extract-vf failed for %s: %s", sample.id, error)
        else:
            vf_store.append(vf)
            result.succeeded += 1
    return result


def _append_jsonl(path: Path, record: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")


def _processed_ids(path: Path) -> set[str]:
    if not path.exists():
        return set()
    ids = set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                ids.add(json.loads(line)["sample_id"])
    return ids


def run_compose(
    samples: Sequence[VqaSample],
    dk_store: DkStore,
    vf_store: VfStore,
    gateway: Gateway,
    judge: Gateway,
    cfg: PipelineConfig,
) -> StageResult:
    """Compose traces, run the quality gate, and write the exports.

    Accepted records go to the SFT export; every sample goes to the RL
    export; rejected traces (and composition failures) land in the rejected
    log with their defect lists. Per-sample failures never stop the run.
    """
    templates = load_templates(cfg.templates_file)
    vf_map = vf_store.load()
    processed = _processed_ids(cfg.rl_export)
    result = StageResult()
    # Label universes for template rendering, per dataset tag.
    universes: dict[str, list[str]] = {}
    for sample in samples:
        universes.setdefault(sample.dataset_tag, [])
        if sample.gold_answer not in universes[sample.dataset_tag]:
            universes[sample.dataset_tag].append(sample.gold_answer)

    for sample in samples:
        if sample.id in processed:
            result.skipped += 1
            continue
        question = sample.question
        options = sample.options
        try:
            if not question.strip():
                template = templates.get(sample.dataset_tag)
                if template is None:
                    raise ValueError(
                        f"sample {sample.id}: no question and no template for "
                        f"tag {sample.dataset_tag!r}"
                    )
                question, options = render_question(
                    template, sample, universes[sample.dataset_tag], seed=cfg.seed
                )
            dk = dk_store.load(sample.gold_answer, sample.modality)
            if dk is None:
                raise ValueError(
                    f"no domain knowledge for ({sample.gold_answer}, {sample.modality.value})"
                )
            vf = vf_map.get(sample.id)
            if vf is None:
                raise ValueError(f"no visual findings for sample {sample.id}")
        except Exception as exc:
            result.failed += 1
            result.errors.append(f"{sample.id}: {exc}")
            log.error("compose setup failed for %s: %s", sample.id, exc)
            continue

        rl_record = rl_line(sample, question)
        if options:
            rl_record["options"] = list(options)
        defects: Optional[tuple[str, ...]] = None
        trace = None
        try:
            trace = compose_trace(
                question, sample.gold_answer, dk, vf, gateway,
                options=options, max_reprompts=cfg.reprompt_budget,
            )
        except AnswerMismatchError:
            defects = (DEFECT_ANSWER,)
        except CompositionFormatError:
            defects = (DEFECT_FORMAT,)
        except Exception as exc:
            result.failed += 1
            result.errors.append(f"{sample.id}: {exc}")
            _append_jsonl(cfg.rl_export, rl_record)
            continue

        if trace is not None:
            record = TraceRecord(
                sample_id=sample.id,
                question=question,
                gold_answer=sample.gold_answer,
                trace=trace,
                vf_used=vf,
                dk_key=(dk.label, dk.modality.value),
            )
            quality = quality_check(record, dk, judge, options=options,
                                    synonyms=vf_store.synonyms)
        else:
            quality = QualityReport(defects=defects, accepted=False)

        _append_jsonl(cfg.traces_out, {
            "sample_id": sample.id,
            "question": question,
            "options": list(options) if options else [],
            "gold_answer": sample.gold_answer,
            "trace_serialized": trace.serialize() if trace else None,
            "quality": quality.to_dict(),
        })
        _append_jsonl(cfg.rl_export, rl_record)
        if quality.accepted:
            _append_jsonl(cfg.sft_export, {
                "sample_id": sample.id,
                "image_ref": sample.image_ref,
                "question": question,
                "options": list(options) if options else [],
                "gold_answer": sample.gold_answer,
                "trace_serialized": trace.serialize(),
            })
            result.accepted += 1
        else:
            _append_jsonl(cfg.rejected_log, {
                "sample_id": sample.id,
                "defects": list(quality.defects),
                "judge_resolved": quality.judge_resolved,
            })
            result.rejected += 1
        result.succeeded += 1
    return result


def run_export(traces_path: Path, samples: Sequence[VqaSample],
               sft_path: Path, rl_path: Path) -> tuple[int, int]:
    """Re-derive the SFT/RL exports from a composed trace file."""
    by_id = {s.id: s for s in samples}
    sft_count = rl_count = 0
    sft_path.parent.mkdir(parents=True, exist_ok=True)
    with open(traces_path, encoding="utf-8") as fh, \
            open(sft_path, "w", encoding="utf-8") as sft_fh, \
            open(rl_path, "w", encoding="utf-8") as rl_fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            sample = by_id.get(record["sample_id"])
            if sample is None:
                raise UnmatchedIdError([record["sample_id"]])
            rl_record = rl_line(sample, record["question"])
            if record.get("options"):
                rl_record["options"] = record["options"]
            rl_fh.write(json.dumps(rl_record, sort_keys=True, ensure_ascii=False) + "\n")
            rl_count += 1
            if record["quality"]["accepted"]:
                sft_fh.write(json.dumps({
                    "sample_id": sample.id,
                    "image_ref": sample.image_ref,
                    "question": record["question"],
                    "options": record.get("options", []),
                    "gold_answer": sample.gold_answer,
                    "trace_serialized": record["trace_serialized"],
                }, sort_keys=True, ensure_ascii=False) + "\n")
                sft_count += 1
    return sft_count, rl_count


def extract_predicted_answer(raw_output: str, options: Optional[Sequence[str]]) -> str:
    """Unified answer extraction: use the trace's answer segment when the
    output parses, otherwise normalize the whole output."""
    try:
        trace = parse_trace(raw_output)
        return normalize_answer(trace.answer, options)
    except TraceFormatError:
        return normalize_answer(raw_output, options)


def run_eval(
    predictions_path: str | Path,
    samples: Sequence[VqaSample],
    task_manifest: Sequence[dict],
) -> list[TaskReport]:
    """Per-task reports from a prediction file joined to samples by id.

    Manifest entries: {task_tag, metric: "accuracy"|"f1", classes?}; samples
    are assigned to tasks via dataset_tag.
    """
    predictions: dict[str, str] = {}
    with open(predictions_path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            predictions[record["sample_id"]] = record["raw_output"]
    by_id = {s.id: s for s in samples}
    orphans = sorted(set(predictions) ^ set(by_id))
    if orphans:
        raise UnmatchedIdError(orphans)

    reports = []
    for entry in task_manifest:
        tag = entry["task_tag"]
        metric = entry["metric"]
        task_samples = [s for s in samples if s.dataset_tag == tag]
        if not task_samples:
            raise ValueError(f"task {tag!r}: no samples with that dataset_tag")
        preds = [
            extract_predicted_answer(predictions[s.id], s.options) for s in task_samples
        ]
        golds = [s.gold_answer for s in task_samples]
        if metric == "accuracy":
            value = accuracy(preds, golds, [s.options for s in task_samples])
            reports.append(TaskReport(task_tag=tag, metric_name="accuracy",
                                      value=value, n_items=len(task_samples)))
        elif metric == "f1":
            classes = entry.get("classes") or sorted({normalize_answer(g) for g in golds})
            value, per_class = macro_f1(preds, golds, classes)
            reports.append(TaskReport(task_tag=tag, metric_name="f1", value=value,
                                      per_class=per_class, n_items=len(task_samples)))
        else:
            raise ValueError(f"task {tag!r}: unknown metric {metric!r}")
    return reports
