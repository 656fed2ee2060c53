"""Rollout scoring for RLVR: format and answer rewards, the answer-dependent
process reward, totals, and group-relative advantages.

The process reward has two mutually exclusive branches keyed on answer
correctness: a correct answer is judged against the image's visual findings
(plausible/tenuous/flawed -> 0.4 / 0 / -0.4), an incorrect answer against the
domain knowledge of the predicted label (0.2 if plausible, else 0). At most
one judge call is made per rollout; the two branch values are never summed.
"""

from __future__ import annotations

import enum
import logging
import re
from dataclasses import dataclass
from importlib import resources
from typing import Callable, Optional, Sequence

import numpy as np

from funduskit.core import Modality, Rollout, normalize_answer
from funduskit.findings import VisualFindingSet
from funduskit.gateway import ChatMessage, ChatRequest, Gateway, GatewayError, JUDGE_LLM
from funduskit.knowledge import DomainKnowledgeRecord

log = logging.getLogger(__name__)

TIER_VALUES_CORRECT = {"plausible": 0.4, "tenuous": 0.0, "flawed": -0.4}
INCORRECT_PLAUSIBLE_VALUE = 0.2
ADVANTAGE_EPS = 1e-6


class JudgeTier(enum.Enum):
    PLAUSIBLE = "plausible"
    TENUOUS = "tenuous"
    FLAWED = "flawed"


_TIER_PATTERNS = {
    JudgeTier.PLAUSIBLE: re.compile(r"(?<!not )(?<!not-)(?<!im)\bplausible\b"),
    JudgeTier.TENUOUS: re.compile(r"\btenuous\b"),
    JudgeTier.FLAWED: re.compile(r"\bflawed\b"),
}


def decode_tier(reply: str) -> Optional[JudgeTier]:
    """Earliest tier word in the reply wins; negated 'plausible' never
    matches. Returns None when no tier is decodable."""
    text = reply.casefold()
    best: tuple[int, JudgeTier] | None = None
    for tier, pattern in _TIER_PATTERNS.items():
        match = pattern.search(text)
        if match and (best is None or match.start() < best[0]):
            best = (match.start(), tier)
    return best[1] if best else None


@dataclass(frozen=True)
class RewardBreakdown:
    r_ans: float
    r_fmt: float
    r_pro: float
    total: float

    def to_dict(self) -> dict:
        return {
            "r_ans": self.r_ans,
            "r_fmt": self.r_fmt,
            "r_pro": self.r_pro,
            "total": self.total,
        }


class RewardRangeError(ValueError):
    pass


@dataclass
class RolloutGroup:
    sample_id: str
    rollouts: list[Rollout]
    breakdowns: list[RewardBreakdown]
    advantages: list[float]
    judge_verdicts: list[Optional[str]]


def format_reward(rollout: Rollout) -> int:
    """1 iff the raw output parses under the think/answer grammar."""
    return 1 if rollout.trace is not None else 0


def answer_reward(rollout: Rollout, gold: str, options: Optional[Sequence[str]] = None) -> int:
    """1 iff the normalized predicted answer equals the normalized gold;
    malformed rollouts score 0."""
    if rollout.predicted_answer is None:
        return 0
    return 1 if rollout.predicted_answer == normalize_answer(gold, options) else 0


def _rubric(name: str) -> str:
    return (resources.files("funduskit.data") / name).read_text(encoding="utf-8")


def build_correct_judge_prompt(rollout: Rollout, vf: VisualFindingSet) -> str:
    findings = ", ".join(sorted(f.name for f in vf.findings)) or "(none)"
    return _rubric("judge_rubric_vf.txt").format(
        findings=findings, think=rollout.trace.think
    )


def build_incorrect_judge_prompt(
    rollout: Rollout, dk: DomainKnowledgeRecord, modality: Modality
) -> str:
    return _rubric("judge_rubric_dk.txt").format(
        predicted=rollout.predicted_answer,
        modality=modality.value,
        required=", ".join(f.name for f in dk.required_findings) or "(none)",
        supportive=", ".join(f.name for f in dk.supportive_findings) or "(none)",
        narrative=dk.narrative,
        think=rollout.trace.think,
    )


@dataclass(frozen=True)
class ProcessJudgment:
    value: float
    branch: str  # "correct", "incorrect", or "skipped"
    verdict: Optional[str] = None


def _judge(gateway: Gateway, prompt: str) -> str:
    reply = gateway.chat(
        ChatRequest(
            endpoint_role=JUDGE_LLM,
            messages=(ChatMessage(role="user", content=prompt),),
        )
    )
    return reply.text


def process_reward_detailed(
    rollout: Rollout,
    gold: str,
    vf: VisualFindingSet,
    dk_lookup: Callable[[str, Modality], Optional[DomainKnowledgeRecord]],
    modality: Modality,
    judge: Gateway,
    options: Optional[Sequence[str]] = None,
) -> ProcessJudgment:
    """Answer-dependent process reward with the judge verdict attached.

    Judge outages degrade the value to 0 and are logged; scoring must always
    complete during training.
    """
    if rollout.trace is None:
        return ProcessJudgment(0.0, "skipped")
    correct = rollout.predicted_answer == normalize_answer(gold, options)
    try:
        if correct:
            reply = _judge(judge, build_correct_judge_prompt(rollout, vf))
            tier = decode_tier(reply) or JudgeTier.TENUOUS
            return ProcessJudgment(TIER_VALUES_CORRECT[tier.value], "correct", tier.value)
        dk = dk_lookup(rollout.predicted_answer, modality)
        if dk is None:
            return ProcessJudgment(0.0, "incorrect", None)
        reply = _judge(judge, build_incorrect_judge_prompt(rollout, dk, modality))
        tier = decode_tier(reply)
        if tier is JudgeTier.PLAUSIBLE:
            return ProcessJudgment(INCORRECT_PLAUSIBLE_VALUE, "incorrect", "plausible")
        return ProcessJudgment(0.0, "incorrect", "not-plausible")
    except GatewayError as exc:
        log.warning("judge unavailable, process reward degraded to 0: %s", exc)
        return ProcessJudgment(0.0, "correct" if correct else "incorrect", None)


def process_reward(
    rollout: Rollout,
    gold: str,
    vf: VisualFindingSet,
    dk_lookup: Callable[[str, Modality], Optional[DomainKnowledgeRecord]],
    modality: Modality,
    judge: Gateway,
    options: Optional[Sequence[str]] = None,
) -> float:
    return process_reward_detailed(
        rollout, gold, vf, dk_lookup, modality, judge, options
    ).value


def total_reward(r_ans: float, r_fmt: float, r_pro: float) -> RewardBreakdown:
    """Exact component sum with range validation; no clipping."""
    if r_ans not in (0, 1):
        raise RewardRangeError(f"r_ans out of range: {r_ans}")
    if r_fmt not in (0, 1):
        raise RewardRangeError(f"r_fmt out of range: {r_fmt}")
    if r_pro not in (-0.4, 0.0, 0.2, 0.4):
        raise RewardRangeError(f"r_pro out of range: {r_pro}")
    return RewardBreakdown(
        r_ans=float(r_ans), r_fmt=float(r_fmt), r_pro=float(r_pro),
        total=float(r_ans) + float(r_fmt) + float(r_pro),
    )


def group_advantage(rewards: Sequence[float], normalize_by_std: bool = True,
                    eps: float = ADVANTAGE_EPS) -> list[float]:
    """Group-relative advantages: reward minus the group mean, optionally
    divided by (std + eps). Zero-variance groups return all zeros in either
    mode."""
    if len(rewards) == 0:
        raise ValueError("empty reward group")
    values = np.asarray(rewards, dtype=np.float64)
    centered = values - values.mean()
    if np.all(centered == 0.0):
        return [0.0] * len(rewards)
    if normalize_by_std:
        centered = centered / (values.std() + eps)
    return centered.tolist()


def score_group(
    sample_id: str,
    raw_rollouts: Sequence[str],
    gold: str,
    vf: VisualFindingSet,
    dk_lookup: Callable[[str, Modality], Optional[DomainKnowledgeRecord]],
    modality: Modality,
    judge: Gateway,
    options: Optional[Sequence[str]] = None,
    normalize_by_std: bool = True,
) -> RolloutGroup:
    """Score a full GRPO group: per-rollout breakdowns plus advantages."""
    rollouts = [Rollout.from_raw(text, options) for text in raw_rollouts]
    breakdowns = []
    verdicts: list[Optional[str]] = []
    for rollout in rollouts:
        r_fmt = format_reward(rollout)
        r_ans = answer_reward(rollout, gold, options)
        judgment = process_reward_detailed(
            rollout, gold, vf, dk_lookup, modality, judge, options
        )
        breakdowns.append(total_reward(r_ans, r_fmt, judgment.value))
        verdicts.append(judgment.verdict)
    advantages = group_advantage(
        [b.total for b in breakdowns], normalize_by_std=normalize_by_std
    )
    return RolloutGroup(
        sample_id=sample_id,
        rollouts=rollouts,
        breakdowns=breakdowns,
        advantages=advantages,
        judge_verdicts=verdicts,
    )
