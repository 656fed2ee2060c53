"""Builds label-and-modality-specific domain knowledge records from retrieved
reference text and derives the finding vocabulary used for visual-finding
extraction."""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from funduskit.core import (
    CanonicalFinding,
    Modality,
    SynonymMap,
    normalize_finding,
)
from funduskit.gateway import ChatMessage, ChatRequest, Gateway, KNOWLEDGE_LLM

log = logging.getLogger(__name__)

PASSAGE_SOURCES = ("eyewiki", "aao", "pmc", "other")

# Section kinds worth keeping when assembling a narrative: characteristic
# symptoms, diagnostic criteria, and modality-specific manifestations.
DEFAULT_RETAINED_KEYWORDS = (
    "symptom",
    "diagnos",
    "finding",
    "manifestation",
    "characteristic",
    "presentation",
    "lesion",
)


class NarrativeFilterError(ValueError):
    """Every passage was filtered out; nothing left to describe."""


class SchemaParseError(RuntimeError):
    """The knowledge extractor never produced a parseable structured record."""


class EmptyRequiredFindingsError(ValueError):
    """An extracted record has no required findings and cannot be accepted."""


@dataclass(frozen=True)
class ReferencePassage:
    source: str
    url: str
    section_title: str
    body: str

    def __post_init__(self):
        if self.source not in PASSAGE_SOURCES:
            raise ValueError(f"unknown passage source: {self.source!r}")
        if not self.body.strip():
            raise ValueError("empty passage body")

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "url": self.url,
            "section_title": self.section_title,
            "body": self.body,
        }

    @classmethod
    def from_dict(cls, record: dict) -> "ReferencePassage":
        return cls(
            source=record.get("source", "other"),
            url=record.get("url", ""),
            section_title=record.get("section_title", ""),
            body=record["body"],
        )


@dataclass(frozen=True)
class DomainKnowledgeRecord:
    """Structured diagnostic knowledge for one (label, modality) pair.

    Required findings are core decisive evidence; supportive findings are
    auxiliary non-decisive cues; the two groups are disjoint. Exclusion
    findings are absences the narrative calls out (e.g. no neovascularization
    in moderate NPDR) and feed the quality gate and judge prompts.
    """

    label: str
    modality: Modality
    narrative: str
    required_findings: tuple[CanonicalFinding, ...]
    supportive_findings: tuple[CanonicalFinding, ...]
    exclusion_findings: tuple[CanonicalFinding, ...] = ()
    sources: tuple[str, ...] = ()

    def __post_init__(self):
        required = tuple(dict.fromkeys(self.required_findings))
        required_names = {f.name for f in required}
        supportive = tuple(
            dict.fromkeys(f for f in self.supportive_findings if f.name not in required_names)
        )
        exclusion = tuple(dict.fromkeys(self.exclusion_findings))
        object.__setattr__(self, "required_findings", required)
        object.__setattr__(self, "supportive_findings", supportive)
        object.__setattr__(self, "exclusion_findings", exclusion)
        if not required:
            raise EmptyRequiredFindingsError(
                f"no required findings for ({self.label}, {self.modality.value})"
            )

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "modality": self.modality.value,
            "narrative": self.narrative,
            "required_findings": [f.name for f in self.required_findings],
            "supportive_findings": [f.name for f in self.supportive_findings],
            "exclusion_findings": [f.name for f in self.exclusion_findings],
            "sources": list(self.sources),
        }

    @classmethod
    def from_dict(cls, record: dict, synonyms: Optional[SynonymMap] = None) -> "DomainKnowledgeRecord":
        return cls(
            label=record["label"],
            modality=Modality.parse(record["modality"]),
            narrative=record.get("narrative", ""),
            required_findings=tuple(
                normalize_finding(t, synonyms) for t in record["required_findings"]
            ),
            supportive_findings=tuple(
                normalize_finding(t, synonyms) for t in record.get("supportive_findings", [])
            ),
            exclusion_findings=tuple(
                normalize_finding(t, synonyms) for t in record.get("exclusion_findings", [])
            ),
            sources=tuple(record.get("sources", [])),
        )


@dataclass(frozen=True)
class FindingVocabulary:
    """Merged required + supportive findings for one (label, modality) pair,
    required-first and order-stable."""

    label: str
    modality: Modality
    entries: tuple[CanonicalFinding, ...]


def build_query(label: str, modality: Modality) -> str:
    """Fixed retrieval query template for one (label, modality) pair."""
    if not label.strip():
        raise ValueError("empty label")
    return f"What are the key {modality.value} findings for diagnosing {label}?"


def compose_description(
    passages: Sequence[ReferencePassage],
    retained_keywords: Sequence[str] = DEFAULT_RETAINED_KEYWORDS,
) -> tuple[str, list[ReferencePassage]]:
    """Assemble a narrative from the retained passages, in input order.

    A passage is retained when its section title or body matches any of the
    retained-topic keywords. Returns the narrative and the contributing
    passages; raises NarrativeFilterError when nothing survives.
    """
    if not passages:
        raise ValueError("no passages")
    keywords = [k.lower() for k in retained_keywords]
    retained = [
        p for p in passages
        if any(k in p.section_title.lower() or k in p.body.lower() for k in keywords)
    ]
    if not retained:
        raise NarrativeFilterError("no passage matched the retained-topic keywords")
    narrative = "\n\n".join(p.body.strip() for p in retained)
    return narrative, retained


_EXTRACTION_INSTRUCTION = """You are a clinical knowledge extractor for retinal imaging.
Given the reference description below for diagnosing "{label}" on {modality} imaging,
produce a single JSON object with exactly these keys:
  "required_findings": findings that are core, decisive evidence for the label,
  "supportive_findings": auxiliary, non-decisive cues,
  "exclusion_findings": findings whose absence the description calls out.
Each value is a list of short finding terms. Reply with the JSON object only.

Reference description:
{narrative}"""

_JSON_BLOCK = re.compile(r"\{.*\}", re.DOTALL)


def build_extraction_prompt(label: str, modality: Modality, narrative: str) -> str:
    """The schema-constrained instruction sent to the knowledge extractor."""
    return _EXTRACTION_INSTRUCTION.format(
        label=label, modality=modality.value, narrative=narrative
    )


def _parse_structured_reply(text: str) -> dict:
    match = _JSON_BLOCK.search(text)
    if not match:
        raise SchemaParseError("no JSON object in reply")
    try:
        record = json.loads(match.group(0))
    except json.JSONDecodeError as exc:
        raise SchemaParseError(f"invalid JSON in reply: {exc}") from exc
    if not isinstance(record, dict) or "required_findings" not in record:
        raise SchemaParseError("reply JSON lacks required_findings")
    return record


def extract_dk(
    narrative: str,
    label: str,
    modality: Modality,
    gateway: Gateway,
    sources: Sequence[str] = (),
    synonyms: Optional[SynonymMap] = None,
    max_reprompts: int = 2,
) -> DomainKnowledgeRecord:
    """Prompt the text-LLM to distill a narrative into a structured record.

    Schema failures are reprompted up to ``max_reprompts`` times (each attempt
    is a distinct exchange under replay); the disjointness invariant is
    enforced by dropping duplicates from the supportive group.
    """
    if not narrative.strip():
        raise ValueError("empty narrative")
    prompt = build_extraction_prompt(label, modality, narrative)
    last_error: Exception | None = None
    for attempt in range(1 + max_reprompts):
        request = ChatRequest(
            endpoint_role=KNOWLEDGE_LLM,
            messages=(ChatMessage(role="user", content=prompt),),
            rollout_index=attempt,
        )
        reply = gateway.chat(request)
        try:
            record = _parse_structured_reply(reply.text)
        except SchemaParseError as exc:
            last_error = exc
            continue
        return DomainKnowledgeRecord(
            label=label,
            modality=modality,
            narrative=narrative,
            required_findings=tuple(
                normalize_finding(t, synonyms) for t in record.get("required_findings", [])
            ),
            supportive_findings=tuple(
                normalize_finding(t, synonyms) for t in record.get("supportive_findings", [])
            ),
            exclusion_findings=tuple(
                normalize_finding(t, synonyms) for t in record.get("exclusion_findings", [])
            ),
            sources=tuple(sources),
        )
    raise SchemaParseError(
        f"no structured reply after {1 + max_reprompts} attempts: {last_error}"
    )


def text_to_findings(record: DomainKnowledgeRecord) -> FindingVocabulary:
    """Merge required and supportive findings into the vocabulary, preserving
    required-first order."""
    entries = tuple(dict.fromkeys(record.required_findings + record.supportive_findings))
    return FindingVocabulary(label=record.label, modality=record.modality, entries=entries)


def dk_key(label: str, modality: Modality) -> str:
    """URL-safe content hash naming the store file for one (label, modality)."""
    return hashlib.sha256(f"{label}\x1f{modality.value}".encode("utf-8")).hexdigest()[:32]


class DkStore:
    """Directory of one structured JSON record per (label, modality), with the
    narrative cached alongside. Last writer wins."""

    def __init__(self, root: str | Path, synonyms: Optional[SynonymMap] = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.synonyms = synonyms

    def _path(self, label: str, modality: Modality) -> Path:
        return self.root / f"{dk_key(label, modality)}.json"

    def exists(self, label: str, modality: Modality) -> bool:
        return self._path(label, modality).exists()

    def save(self, record: DomainKnowledgeRecord) -> Path:
        path = self._path(record.label, record.modality)
        if path.exists():
            log.info(
                "overwriting DK record for (%s, %s); keeping the newer extraction",
                record.label, record.modality.value,
            )
        path.write_text(
            json.dumps(record.to_dict(), sort_keys=True, ensure_ascii=False, indent=1),
            encoding="utf-8",
        )
        narrative_path = path.with_suffix(".narrative.txt")
        narrative_path.write_text(record.narrative, encoding="utf-8")
        return path

    def load(self, label: str, modality: Modality) -> Optional[DomainKnowledgeRecord]:
        path = self._path(label, modality)
        if not path.exists():
            return None
        return DomainKnowledgeRecord.from_dict(
            json.loads(path.read_text(encoding="utf-8")), self.synonyms
        )

    def load_all(self) -> list[DomainKnowledgeRecord]:
        records = []
        for path in sorted(self.root.glob("*.json")):
            records.append(
                DomainKnowledgeRecord.from_dict(
                    json.loads(path.read_text(encoding="utf-8")), self.synonyms
                )
            )
        return records
