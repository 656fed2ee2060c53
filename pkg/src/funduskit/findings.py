"""Image-specific visual-finding extraction: presence-prompt a vision MLLM k
times and aggregate by majority vote, with a pixel-label bypass for samples
that already carry lesion annotations."""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

from funduskit.core import (
    CanonicalFinding,
    Modality,
    SynonymMap,
    VqaSample,
    _term_key,
    default_synonyms,
)
from funduskit.gateway import ChatMessage, ChatRequest, Gateway, VISION_MLLM
from funduskit.knowledge import FindingVocabulary

log = logging.getLogger(__name__)

DEFAULT_K = 5
DEFAULT_THRESHOLD = 2

PROVENANCE_VOTED = "voted"
PROVENANCE_PIXEL = "pixel-label"


class EmptyVocabularyError(ValueError):
    pass


class AllUnparsedError(RuntimeError):
    """No rollout yielded a single decodable verdict."""


class Verdict(enum.Enum):
    PRESENT = "present"
    ABSENT = "absent"
    UNPARSED = "unparsed"


@dataclass(frozen=True)
class PresenceVerdictSet:
    """Per-finding presence verdicts for one rollout; keys are exactly the
    vocabulary entries."""

    verdicts: tuple[tuple[CanonicalFinding, Verdict], ...]

    def as_dict(self) -> dict[CanonicalFinding, Verdict]:
        return dict(self.verdicts)


@dataclass(frozen=True)
class VisualFindingSet:
    sample_id: str
    findings: frozenset[CanonicalFinding]
    votes: tuple[tuple[str, int], ...] = ()
    provenance: str = PROVENANCE_VOTED

    def vote_map(self) -> dict[str, int]:
        return dict(self.votes)

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "findings": sorted(f.name for f in self.findings),
            "votes": dict(self.votes),
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, record: dict, synonyms: Optional[SynonymMap] = None) -> "VisualFindingSet":
        from funduskit.core import normalize_finding

        return cls(
            sample_id=record["sample_id"],
            findings=frozenset(
                normalize_finding(t, synonyms) for t in record["findings"]
            ),
            votes=tuple(sorted(record.get("votes", {}).items())),
            provenance=record.get("provenance", PROVENANCE_VOTED),
        )


def make_prompt(modality: Modality, vocab: FindingVocabulary) -> str:
    """Fixed presence-question template over the whole vocabulary."""
    if not vocab.entries:
        raise EmptyVocabularyError(
            f"empty vocabulary for ({vocab.label}, {vocab.modality.value})"
        )
    joined = ", ".join(f.name for f in vocab.entries)
    return (
        f"In this {modality.value} image, determine the presence of the "
        f"following findings: {joined}. Answer with present or absent for each finding"
    )


def _segment_verdict(segment_key: str) -> Optional[Verdict]:
    padded = f" {segment_key} "
    if " absent " in padded or " not present " in padded:
        return Verdict.ABSENT
    if " present " in padded:
        return Verdict.PRESENT
    return None


def parse_presence(
    response: str,
    vocab: FindingVocabulary,
    synonyms: Optional[SynonymMap] = None,
) -> PresenceVerdictSet:
    """Decode per-finding present/absent markers from a rollout reply.

    The reply is split into line/semicolon segments; a finding gets the
    verdict of the first segment that mentions it (under any synonym) next to
    a decodable marker. Findings with no decodable marker stay unparsed.
    """
    synonyms = synonyms or default_synonyms()
    segments = [
        seg for chunk in response.splitlines() for seg in chunk.split(";") if seg.strip()
    ]
    segment_keys = [_term_key(seg) for seg in segments]
    verdicts = []
    for finding in vocab.entries:
        keys = synonyms.mention_keys(finding.name)
        abbr = synonyms.abbreviation(finding.name)
        if abbr:
            keys.append(abbr.lower())
        verdict = Verdict.UNPARSED
        for seg_key in segment_keys:
            padded = f" {seg_key} "
            if any(f" {key} " in padded for key in keys):
                decoded = _segment_verdict(seg_key)
                if decoded is not None:
                    verdict = decoded
                    break
        verdicts.append((finding, verdict))
    return PresenceVerdictSet(verdicts=tuple(verdicts))


def aggregate_votes(
    verdict_sets: Iterable[PresenceVerdictSet],
    vocab: FindingVocabulary,
    threshold: int = DEFAULT_THRESHOLD,
) -> tuple[frozenset[CanonicalFinding], dict[str, int]]:
    """Pure vote fold: one vote per rollout in which a finding is present;
    a finding is included iff its vote count strictly exceeds the threshold.
    Unparsed counts as absent."""
    votes = {f.name: 0 for f in vocab.entries}
    for verdict_set in verdict_sets:
        for finding, verdict in verdict_set.verdicts:
            if verdict is Verdict.PRESENT:
                votes[finding.name] += 1
    included = frozenset(f for f in vocab.entries if votes[f.name] > threshold)
    return included, votes


def extract_vf(
    sample: VqaSample,
    vocab: FindingVocabulary,
    gateway: Gateway,
    k: int = DEFAULT_K,
    threshold: int = DEFAULT_THRESHOLD,
    temperature: float = 1.0,
    synonyms: Optional[SynonymMap] = None,
) -> VisualFindingSet:
    """Extract VFs for one sample: pixel-label bypass when lesion annotations
    exist, otherwise k sampled rollouts aggregated by majority vote."""
    if sample.pixel_findings is not None:
        return VisualFindingSet(
            sample_id=sample.id,
            findings=frozenset(sample.pixel_findings),
            votes=(),
            provenance=PROVENANCE_PIXEL,
        )
    prompt = make_prompt(sample.modality, vocab)
    verdict_sets = []
    for index in range(k):
        reply = gateway.chat(
            ChatRequest(
                endpoint_role=VISION_MLLM,
                messages=(
                    ChatMessage(role="user", content=prompt, image_ref=sample.image_ref),
                ),
                temperature=temperature,
                rollout_index=index,
            )
        )
        verdict_sets.append(parse_presence(reply.text, vocab, synonyms))
    if all(
        verdict is Verdict.UNPARSED
        for vs in verdict_sets
        for _, verdict in vs.verdicts
    ):
        raise AllUnparsedError(f"sample {sample.id}: no decodable rollout")
    included, votes = aggregate_votes(verdict_sets, vocab, threshold)
    return VisualFindingSet(
        sample_id=sample.id,
        findings=included,
        votes=tuple(sorted(votes.items())),
        provenance=PROVENANCE_VOTED,
    )


class VfStore:
    """JSON-lines store: one line per sample."""

    def __init__(self, path: str | Path, synonyms: Optional[SynonymMap] = None):
        self.path = Path(path)
        self.synonyms = synonyms

    def load(self) -> dict[str, VisualFindingSet]:
        if not self.path.exists():
            return {}
        records = {}
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                vf = VisualFindingSet.from_dict(json.loads(line), self.synonyms)
                records[vf.sample_id] = vf
        return records

    def append(self, vf: VisualFindingSet) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(vf.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")
