"""Shared domain types: modalities, canonical findings, VQA samples, and the
think/answer trace grammar, plus the answer/finding normalizers used everywhere
else in the toolkit."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Mapping, Optional, Sequence


class Modality(enum.Enum):
    CFP = "CFP"
    OCT = "OCT"
    UWF = "UWF"

    @classmethod
    def parse(cls, token: str) -> "Modality":
        try:
            return cls[token.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown modality: {token!r}") from None


class TraceFormatError(ValueError):
    """Raised when a raw model output does not follow the think/answer grammar.

    ``kind`` is one of: missing-tag, duplicate-tag, wrong-order,
    trailing-content.
    """

    def __init__(self, kind: str, detail: str = ""):
        self.kind = kind
        super().__init__(f"{kind}: {detail}" if detail else kind)


_NON_ALNUM = re.compile(r"[^a-z0-9]+")
_WS = re.compile(r"\s+")


def _term_key(term: str) -> str:
    """Lowercase a term and squash all punctuation/whitespace runs to single
    spaces, giving a lookup key that is stable under casing and hyphenation."""
    return _NON_ALNUM.sub(" ", term.casefold()).strip()


@dataclass(frozen=True)
class CanonicalFinding:
    """A canonical visual-finding term, e.g. ``microaneurysm`` (MA)."""

    name: str
    abbreviation: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        if not self.name or self.name != _WS.sub(" ", self.name.strip().lower()):
            raise ValueError(f"non-canonical finding name: {self.name!r}")


class SynonymMap:
    """Variant -> canonical finding-name table.

    File format: UTF-8, one ``variant<TAB>canonical`` pair per line, ``#``
    comments allowed. Variants are matched on their normalized key, so casing,
    hyphenation, and stray punctuation in the variant never matter.
    """

    def __init__(self, pairs: Iterable[tuple[str, str]] = ()):
        self._canonical: dict[str, str] = {}
        self._abbrev: dict[str, str] = {}
        self._variants: dict[str, list[str]] = {}
        for variant, canonical in pairs:
            self.add(variant, canonical)

    def add(self, variant: str, canonical: str) -> None:
        vkey = _term_key(variant)
        if not vkey:
            raise ValueError("empty synonym variant")
        canonical = _WS.sub(" ", canonical.strip().lower())
        self._canonical[vkey] = canonical
        # A canonical name containing punctuation must round-trip through its
        # own key, otherwise normalization would not be idempotent.
        self._canonical.setdefault(_term_key(canonical), canonical)
        self._variants.setdefault(canonical, []).append(vkey)
        if " " not in vkey and len(vkey) <= 4 and vkey != _term_key(canonical):
            self._abbrev.setdefault(canonical, vkey.upper())

    @classmethod
    def from_file(cls, path) -> "SynonymMap":
        table = cls()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "\t" not in line:
                    raise ValueError(f"{path}:{lineno}: expected variant<TAB>canonical")
                variant, canonical = line.split("\t", 1)
                table.add(variant, canonical)
        return table

    @classmethod
    def default(cls) -> "SynonymMap":
        with resources.as_file(
            resources.files("funduskit.data") / "synonyms.tsv"
        ) as path:
            return cls.from_file(path)

    def canonical_name(self, term: str) -> str:
        key = _term_key(term)
        return self._canonical.get(key, key)

    def abbreviation(self, canonical: str) -> Optional[str]:
        return self._abbrev.get(canonical)

    def mention_keys(self, canonical: str) -> list[str]:
        """All normalized keys that count as a mention of ``canonical``."""
        keys = [_term_key(canonical)]
        for vkey in self._variants.get(canonical, []):
            if vkey not in keys:
                keys.append(vkey)
        return keys


_DEFAULT_SYNONYMS: Optional[SynonymMap] = None


def default_synonyms() -> SynonymMap:
    global _DEFAULT_SYNONYMS
    if _DEFAULT_SYNONYMS is None:
        _DEFAULT_SYNONYMS = SynonymMap.default()
    return _DEFAULT_SYNONYMS


def normalize_finding(term: str, synonyms: Optional[SynonymMap] = None) -> CanonicalFinding:
    """Map a free-form finding term to its canonical form.

    Lowercases, strips punctuation, collapses whitespace, then resolves the
    result through the synonym map. Idempotent: canonical names map to
    themselves.
    """
    if not term or not _term_key(term):
        raise ValueError("empty finding term")
    synonyms = synonyms or default_synonyms()
    name = synonyms.canonical_name(term)
    return CanonicalFinding(name, synonyms.abbreviation(name))


def finding_mentioned(text: str, finding: CanonicalFinding,
                      synonyms: Optional[SynonymMap] = None) -> bool:
    """Synonym-aware containment: does ``text`` mention the finding under any
    of its known variants or abbreviation?"""
    synonyms = synonyms or default_synonyms()
    haystack = f" {_term_key(text)} "
    keys = synonyms.mention_keys(finding.name)
    abbr = synonyms.abbreviation(finding.name)
    if abbr:
        keys.append(abbr.lower())
    return any(f" {key} " in haystack for key in keys)


_LETTER = re.compile(r"^\(?([a-z])[\).:]?$")


def _clean_answer(text: str) -> str:
    cleaned = _WS.sub(" ", text.strip().casefold())
    return cleaned.strip(" .,:;!?\"'()[]")


def normalize_answer(text: str, options: Optional[Sequence[str]] = None) -> str:
    """Unified answer normalization.

    Case-folds and trims; with an option list, resolves a bare option letter
    (A/B/C/...) or an option-text match to the option's canonical text.
    Multiple substring hits resolve to the longest option text (ties go to
    option order); zero hits return the cleaned raw text.
    """
    cleaned = _clean_answer(text)
    if not options:
        return cleaned
    normalized_options = [_clean_answer(o) for o in options]
    m = _LETTER.match(cleaned)
    if m:
        index = ord(m.group(1)) - ord("a")
        if 0 <= index < len(normalized_options):
            return normalized_options[index]
    if cleaned in normalized_options:
        return cleaned
    best = None
    for opt in normalized_options:
        if opt and re.search(rf"\b{re.escape(opt)}\b", cleaned):
            if best is None or len(opt) > len(best):
                best = opt
    return best if best is not None else cleaned


@dataclass(frozen=True)
class ReasoningTrace:
    """A think/answer pair; the serialized form is the tagged trace layout."""

    think: str
    answer: str

    def serialize(self) -> str:
        return f"<think>{self.think}</think><answer>{self.answer}</answer>"


_TAGS = ("<think>", "</think>", "<answer>", "</answer>")


def parse_trace(raw_text: str) -> ReasoningTrace:
    """Parse a raw model output into a ReasoningTrace.

    Accepts exactly one think block followed by exactly one answer block with
    nothing but whitespace before, between, or after; anything else raises
    TraceFormatError with the defect kind.
    """
    positions = {}
    for tag in _TAGS:
        count = raw_text.count(tag)
        if count == 0:
            raise TraceFormatError("missing-tag", tag)
        if count > 1:
            raise TraceFormatError("duplicate-tag", tag)
        positions[tag] = raw_text.index(tag)
    ot, ct = positions["<think>"], positions["</think>"]
    oa, ca = positions["<answer>"], positions["</answer>"]
    if not (ot < ct < oa < ca):
        raise TraceFormatError("wrong-order")
    head = raw_text[:ot]
    middle = raw_text[ct + len("</think>"):oa]
    tail = raw_text[ca + len("</answer>"):]
    if head.strip() or middle.strip() or tail.strip():
        raise TraceFormatError("trailing-content")
    return ReasoningTrace(
        think=raw_text[ot + len("<think>"):ct],
        answer=raw_text[oa + len("<answer>"):ca],
    )


@dataclass(frozen=True)
class Rollout:
    """One sampled model output; ``trace`` is absent when the raw text is
    malformed, and ``predicted_answer`` is the normalized trace answer."""

    raw_text: str
    trace: Optional[ReasoningTrace] = None
    predicted_answer: Optional[str] = None

    @classmethod
    def from_raw(cls, raw_text: str, options: Optional[Sequence[str]] = None) -> "Rollout":
        try:
            trace = parse_trace(raw_text)
        except TraceFormatError:
            return cls(raw_text=raw_text)
        return cls(
            raw_text=raw_text,
            trace=trace,
            predicted_answer=normalize_answer(trace.answer, options),
        )


@dataclass(frozen=True)
class VqaSample:
    """One image/question/gold-answer record with modality and optional
    pixel-level lesion labels."""

    id: str
    image_ref: str
    modality: Modality
    question: str
    gold_answer: str
    options: Optional[tuple[str, ...]] = None
    dataset_tag: str = ""
    pixel_findings: Optional[tuple[CanonicalFinding, ...]] = None

    def __post_init__(self):
        if not self.gold_answer.strip():
            raise ValueError(f"sample {self.id}: empty gold answer")
        if self.options is not None:
            normalized = [normalize_answer(o) for o in self.options]
            hits = normalized.count(normalize_answer(self.gold_answer))
            if hits != 1:
                raise ValueError(
                    f"sample {self.id}: gold answer matches {hits} options, expected 1"
                )
        if self.pixel_findings is not None:
            deduped = tuple(dict.fromkeys(self.pixel_findings))
            object.__setattr__(self, "pixel_findings", deduped)

    def to_dict(self) -> dict:
        record = {
            "id": self.id,
            "image_ref": self.image_ref,
            "modality": self.modality.value,
            "question": self.question,
            "gold_answer": self.gold_answer,
            "dataset_tag": self.dataset_tag,
        }
        if self.options is not None:
            record["options"] = list(self.options)
        if self.pixel_findings is not None:
            record["pixel_findings"] = [f.name for f in self.pixel_findings]
        return record

    @classmethod
    def from_dict(cls, record: Mapping, synonyms: Optional[SynonymMap] = None) -> "VqaSample":
        pixel = record.get("pixel_findings")
        options = record.get("options")
        return cls(
            id=record["id"],
            image_ref=record.get("image_ref", ""),
            modality=Modality.parse(record["modality"]),
            question=record.get("question", ""),
            gold_answer=record["gold_answer"],
            options=tuple(options) if options is not None else None,
            dataset_tag=record.get("dataset_tag", ""),
            pixel_findings=(
                tuple(normalize_finding(t, synonyms) for t in pixel)
                if pixel is not None else None
            ),
        )
