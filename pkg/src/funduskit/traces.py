"""Question rendering, knowledge-aware reasoning-trace composition, and the
trace quality gate."""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from funduskit.core import (
    Modality,
    ReasoningTrace,
    SynonymMap,
    TraceFormatError,
    VqaSample,
    _term_key,
    default_synonyms,
    finding_mentioned,
    normalize_answer,
    parse_trace,
)
from funduskit.findings import VisualFindingSet
from funduskit.gateway import ChatMessage, ChatRequest, Gateway, GatewayError, JUDGE_LLM, KNOWLEDGE_LLM
from funduskit.knowledge import DomainKnowledgeRecord, text_to_findings

DEFECT_MODALITY = "modality-inconsistency"
DEFECT_REQUIRED_OMITTED = "required-vf-omitted"
DEFECT_REDUNDANT = "redundant-or-incorrect-vf"
DEFECT_DK = "dk-omitted-or-mismatched"
DEFECT_ANSWER = "answer-mismatch"
DEFECT_FORMAT = "format-invalid"

DEFECT_KINDS = (
    DEFECT_MODALITY,
    DEFECT_REQUIRED_OMITTED,
    DEFECT_REDUNDANT,
    DEFECT_DK,
    DEFECT_ANSWER,
    DEFECT_FORMAT,
)

# Tokens that pin a trace to one imaging modality. Matched on the
# punctuation-normalized think text with word boundaries.
_MODALITY_TOKENS = {
    Modality.CFP: ("cfp", "color fundus photograph", "color fundus photography"),
    Modality.OCT: ("oct", "optical coherence tomography"),
    Modality.UWF: ("uwf", "ultra widefield", "ultra wide field"),
}


class GoldNotInUniverseError(ValueError):
    pass


class AnswerMismatchError(RuntimeError):
    """Composed trace answered something other than the gold answer; this
    signals a conditioning bug, not sampling noise, so it is never
    reprompted."""


class CompositionFormatError(RuntimeError):
    """The composer never produced a well-formed trace within the reprompt
    budget."""


@dataclass(frozen=True)
class QuestionTemplate:
    task_tag: str
    template: str
    option_source: str  # "fixed-list" or "label-universe"
    fixed_options: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        if self.option_source not in ("fixed-list", "label-universe"):
            raise ValueError(f"unknown option_source: {self.option_source!r}")
        if self.option_source == "fixed-list" and not self.fixed_options:
            raise ValueError(f"template {self.task_tag}: fixed-list without options")


def load_templates(path: Optional[str | Path] = None) -> dict[str, QuestionTemplate]:
    """Load question templates keyed by task_tag; defaults to the shipped
    table."""
    if path is None:
        raw = json.loads(
            (resources.files("funduskit.data") / "question_templates.json")
            .read_text(encoding="utf-8")
        )
    else:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    templates = {}
    for tag, spec in raw.items():
        templates[tag] = QuestionTemplate(
            task_tag=tag,
            template=spec["template"],
            option_source=spec["option_source"],
            fixed_options=tuple(spec["options"]) if "options" in spec else None,
        )
    return templates


def render_question(
    template: QuestionTemplate,
    sample: VqaSample,
    label_universe: Sequence[str],
    seed: int = 0,
) -> tuple[str, tuple[str, ...]]:
    """Render the question text and option list for one sample.

    Option order is shuffled deterministically from (seed, sample id), so a
    fixed seed reproduces the same dataset and different seeds vary it.
    """
    gold_norm = normalize_answer(sample.gold_answer)
    if gold_norm not in [normalize_answer(label) for label in label_universe]:
        raise GoldNotInUniverseError(
            f"sample {sample.id}: gold {sample.gold_answer!r} not in label universe"
        )
    if template.option_source == "fixed-list":
        pool = list(template.fixed_options)
    else:
        pool = list(label_universe)
    if not any(normalize_answer(o) == gold_norm for o in pool):
        raise GoldNotInUniverseError(
            f"sample {sample.id}: gold {sample.gold_answer!r} not among options"
        )
    rng = random.Random(f"{seed}:{sample.id}")
    options = list(pool)
    rng.shuffle(options)
    question = template.template.replace("{label-set}", ", ".join(options))
    return question, tuple(options)


_COMPOSE_INSTRUCTION = """You write diagnostic reasoning traces for fundus VQA training data.

Question: {question}
Correct answer: {gold}

Visual findings observed in this image: {findings}

Diagnostic knowledge for "{gold}" on {modality} imaging:
Required findings: {required}
Supportive findings: {supportive}
Findings that should be absent: {exclusions}
Description: {narrative}

Write a reasoning trace that (i) summarizes the visual findings listed above,
(ii) connects those findings to the diagnostic knowledge, and (iii) derives
the answer "{gold}". Mention only the findings listed above. Reply with
exactly this layout and nothing else:
<think>...reasoning...</think><answer>{gold}</answer>"""


def build_compose_prompt(
    question: str,
    gold_answer: str,
    dk: DomainKnowledgeRecord,
    vf: VisualFindingSet,
) -> str:
    return _COMPOSE_INSTRUCTION.format(
        question=question,
        gold=gold_answer,
        modality=dk.modality.value,
        findings=", ".join(sorted(f.name for f in vf.findings)) or "(none)",
        required=", ".join(f.name for f in dk.required_findings) or "(none)",
        supportive=", ".join(f.name for f in dk.supportive_findings) or "(none)",
        exclusions=", ".join(f.name for f in dk.exclusion_findings) or "(none)",
        narrative=dk.narrative,
    )


def compose_trace(
    question: str,
    gold_answer: str,
    dk: DomainKnowledgeRecord,
    vf: VisualFindingSet,
    gateway: Gateway,
    options: Optional[Sequence[str]] = None,
    max_reprompts: int = 2,
) -> ReasoningTrace:
    """Compose a knowledge-aware trace for one VQA triplet.

    Format errors are reprompted up to the budget; an answer mismatch fails
    immediately.
    """
    prompt = build_compose_prompt(question, gold_answer, dk, vf)
    last_error: Exception | None = None
    for attempt in range(1 + max_reprompts):
        reply = gateway.chat(
            ChatRequest(
                endpoint_role=KNOWLEDGE_LLM,
                messages=(ChatMessage(role="user", content=prompt),),
                rollout_index=attempt,
            )
        )
        try:
            trace = parse_trace(reply.text)
        except TraceFormatError as exc:
            last_error = exc
            continue
        if normalize_answer(trace.answer, options) != normalize_answer(gold_answer, options):
            raise AnswerMismatchError(
                f"composed answer {trace.answer!r} != gold {gold_answer!r}"
            )
        return trace
    raise CompositionFormatError(
        f"no well-formed trace after {1 + max_reprompts} attempts: {last_error}"
    )


@dataclass(frozen=True)
class QualityReport:
    defects: tuple[str, ...]
    accepted: bool
    judge_resolved: bool = True

    def to_dict(self) -> dict:
        return {
            "defects": list(self.defects),
            "accepted": self.accepted,
            "judge_resolved": self.judge_resolved,
        }


@dataclass(frozen=True)
class TraceRecord:
    sample_id: str
    question: str
    gold_answer: str
    trace: Optional[ReasoningTrace]
    vf_used: VisualFindingSet
    dk_key: tuple[str, str]  # (label, modality value)
    quality: Optional[QualityReport] = None


_NEGATION_CUES = ("no ", "without ", "absence of", "absent", "not observed",
                  "is not", "are not", "free of", "rather than")
_SENTENCE_SPLIT = re.compile(r"[.;!?]")


def _strip_negated_clauses(text: str) -> str:
    """Drop sentences that negate findings, so 'no neovascularization is
    seen' does not count as a redundant mention."""
    kept = []
    for sentence in _SENTENCE_SPLIT.split(text):
        lowered = f" {sentence.casefold()} "
        if any(cue in lowered for cue in _NEGATION_CUES):
            continue
        kept.append(sentence)
    return ". ".join(kept)


def _foreign_modality(think: str, modality: Modality) -> bool:
    haystack = f" {_term_key(think)} "
    for other, tokens in _MODALITY_TOKENS.items():
        if other is modality:
            continue
        if any(f" {token} " in haystack for token in tokens):
            return True
    return False


def build_qc_judge_prompt(dk: DomainKnowledgeRecord, think: str) -> str:
    """The single judge prompt used for the knowledge-mismatch screen."""
    return (resources.files("funduskit.data") / "judge_rubric_qc.txt").read_text(
        encoding="utf-8"
    ).format(
        label=dk.label,
        modality=dk.modality.value,
        required=", ".join(f.name for f in dk.required_findings) or "(none)",
        supportive=", ".join(f.name for f in dk.supportive_findings) or "(none)",
        narrative=dk.narrative,
        think=think,
    )


def quality_check(
    record: TraceRecord,
    dk: DomainKnowledgeRecord,
    judge: Optional[Gateway],
    options: Optional[Sequence[str]] = None,
    synonyms: Optional[SynonymMap] = None,
) -> QualityReport:
    """Run the quality gate on a composed trace.

    Deterministic string-level checks run first (format, answer match,
    modality consistency, required-VF coverage, redundant-VF detection); a
    single judge call then screens for omitted or mismatched domain
    knowledge. A judge outage leaves the report unresolved and not accepted,
    without inventing a defect.
    """
    synonyms = synonyms or default_synonyms()
    defects: list[str] = []
    if record.trace is None:
        return QualityReport(defects=(DEFECT_FORMAT,), accepted=False)
    think = record.trace.think

    if normalize_answer(record.trace.answer, options) != normalize_answer(
        record.gold_answer, options
    ):
        defects.append(DEFECT_ANSWER)

    if _foreign_modality(think, dk.modality):
        defects.append(DEFECT_MODALITY)

    required_names = {f.name for f in dk.required_findings}
    required_used = [f for f in record.vf_used.findings if f.name in required_names]
    if any(not finding_mentioned(think, f, synonyms) for f in required_used):
        defects.append(DEFECT_REQUIRED_OMITTED)

    # Exclusion findings join the scan: affirming a finding the knowledge
    # record says should be absent is an incorrect-VF claim too.
    scan_set = text_to_findings(dk).entries + dk.exclusion_findings
    used_names = {f.name for f in record.vf_used.findings}
    affirmative = _strip_negated_clauses(think)
    if any(
        finding_mentioned(affirmative, f, synonyms)
        for f in scan_set
        if f.name not in used_names
    ):
        defects.append(DEFECT_REDUNDANT)

    judge_resolved = True
    if judge is not None:
        prompt = build_qc_judge_prompt(dk, think)
        try:
            reply = judge.chat(
                ChatRequest(
                    endpoint_role=JUDGE_LLM,
                    messages=(ChatMessage(role="user", content=prompt),),
                )
            )
            lowered = reply.text.casefold()
            if "mismatch" in lowered or "inconsistent" in lowered or "omitted" in lowered:
                defects.append(DEFECT_DK)
        except GatewayError:
            judge_resolved = False

    return QualityReport(
        defects=tuple(defects),
        accepted=not defects and judge_resolved,
        judge_resolved=judge_resolved,
    )


def sft_line(sample: VqaSample, record: TraceRecord) -> dict:
    """One SFT export line: the VQA triplet plus the serialized trace."""
    return {
        "sample_id": sample.id,
        "image_ref": sample.image_ref,
        "question": record.question,
        "options": list(sample.options) if sample.options else [],
        "gold_answer": sample.gold_answer,
        "trace_serialized": record.trace.serialize(),
    }


def rl_line(sample: VqaSample, question: Optional[str] = None) -> dict:
    """One RL export line: the VQA triplet only."""
    return {
        "sample_id": sample.id,
        "image_ref": sample.image_ref,
        "question": question if question is not None else sample.question,
        "options": list(sample.options) if sample.options else [],
        "gold_answer": sample.gold_answer,
    }
