import math
import statistics

import pytest
from hypothesis import given, strategies as st

from funduskit.core import Modality, Rollout
from funduskit.gateway import GatewayError, ScriptedGateway
from funduskit.rewards import (
    JudgeTier,
    RewardRangeError,
    answer_reward,
    decode_tier,
    format_reward,
    group_advantage,
    process_reward,
    process_reward_detailed,
    score_group,
    total_reward,
)

GOLD = "Moderate NPDR"
OPTIONS = ("Mild NPDR", "Moderate NPDR", "Severe NPDR", "PDR")


def rollout(answer=GOLD, think="microaneurysms and hemorrhages are seen"):
    return Rollout.from_raw(f"<think>{think}</think><answer>{answer}</answer>",
                            options=OPTIONS)


MALFORMED = Rollout.from_raw("no tags", options=OPTIONS)


def judge_saying(word):
    return ScriptedGateway(lambda req: word)


def failing_judge():
    def responder(req):
        raise GatewayError("judge endpoint down")
    return ScriptedGateway(responder)


def dk_lookup_for(dk):
    def lookup(label, modality):
        if dk is not None and label == "severe npdr" and modality is dk.modality:
            return dk
        return None
    return lookup


class TestDecodeTier:
    def test_single_words(self):
        assert decode_tier("plausible") is JudgeTier.PLAUSIBLE
        assert decode_tier("Tenuous.") is JudgeTier.TENUOUS
        assert decode_tier("FLAWED") is JudgeTier.FLAWED

    def test_negated_plausible_does_not_match(self):
        assert decode_tier("not plausible") is None
        assert decode_tier("not-plausible") is None
        assert decode_tier("implausible") is None

    def test_earliest_wins(self):
        assert decode_tier("flawed, though almost plausible") is JudgeTier.FLAWED

    def test_undecodable(self):
        assert decode_tier("I decline to answer") is None


class TestFormatAndAnswer:
    def test_format_reward(self):
        assert format_reward(rollout()) == 1
        assert format_reward(MALFORMED) == 0

    def test_answer_reward(self):
        assert answer_reward(rollout(GOLD), GOLD, OPTIONS) == 1
        assert answer_reward(rollout("B"), GOLD, OPTIONS) == 1
        assert answer_reward(rollout("PDR"), GOLD, OPTIONS) == 0
        assert answer_reward(MALFORMED, GOLD, OPTIONS) == 0


class TestProcessReward:
    def test_correct_branch_all_tiers(self, vf_moderate_npdr):
        for word, expected in (("plausible", 0.4), ("tenuous", 0.0), ("flawed", -0.4)):
            value = process_reward(
                rollout(GOLD), GOLD, vf_moderate_npdr, dk_lookup_for(None),
                Modality.CFP, judge_saying(word), OPTIONS,
            )
            assert value == expected

    def test_correct_branch_undecodable_is_tenuous(self, vf_moderate_npdr):
        value = process_reward(
            rollout(GOLD), GOLD, vf_moderate_npdr, dk_lookup_for(None),
            Modality.CFP, judge_saying("no comment"), OPTIONS,
        )
        assert value == 0.0

    def test_incorrect_branch_uses_predicted_label_dk(self, vf_moderate_npdr,
                                                      dk_moderate_npdr):
        judge = judge_saying("plausible")
        detail = process_reward_detailed(
            rollout("Severe NPDR"), GOLD, vf_moderate_npdr,
            dk_lookup_for(dk_moderate_npdr), Modality.CFP, judge, OPTIONS,
        )
        assert detail.value == 0.2
        assert detail.branch == "incorrect"
        assert len(judge.chat_calls) == 1

    def test_incorrect_branch_not_plausible(self, vf_moderate_npdr, dk_moderate_npdr):
        value = process_reward(
            rollout("Severe NPDR"), GOLD, vf_moderate_npdr,
            dk_lookup_for(dk_moderate_npdr), Modality.CFP,
            judge_saying("not plausible"), OPTIONS,
        )
        assert value == 0.0

    def test_incorrect_without_dk_record_skips_judge(self, vf_moderate_npdr):
        judge = judge_saying("plausible")
        value = process_reward(
            rollout("PDR"), GOLD, vf_moderate_npdr, dk_lookup_for(None),
            Modality.CFP, judge, OPTIONS,
        )
        assert value == 0.0
        assert judge.chat_calls == []

    def test_malformed_rollout_skips_judge(self, vf_moderate_npdr):
        judge = judge_saying("plausible")
        value = process_reward(
            MALFORMED, GOLD, vf_moderate_npdr, dk_lookup_for(None),
            Modality.CFP, judge, OPTIONS,
        )
        assert value == 0.0
        assert judge.chat_calls == []

    def test_judge_outage_degrades_to_zero(self, vf_moderate_npdr, caplog):
        with caplog.at_level("WARNING", logger="funduskit.rewards"):
            value = process_reward(
                rollout(GOLD), GOLD, vf_moderate_npdr, dk_lookup_for(None),
                Modality.CFP, failing_judge(), OPTIONS,
            )
        assert value == 0.0
        assert any("judge unavailable" in r.message for r in caplog.records)

    def test_at_most_one_judge_call_per_rollout(self, vf_moderate_npdr,
                                                dk_moderate_npdr):
        for r in (rollout(GOLD), rollout("Severe NPDR"), rollout("PDR"), MALFORMED):
            judge = judge_saying("plausible")
            process_reward(
                r, GOLD, vf_moderate_npdr, dk_lookup_for(dk_moderate_npdr),
                Modality.CFP, judge, OPTIONS,
            )
            assert len(judge.chat_calls) <= 1

    def test_branches_never_summed(self, vf_moderate_npdr, dk_moderate_npdr):
        # Whatever the judge says, the value stays inside one branch's range.
        for word in ("plausible", "tenuous", "flawed", "garbled"):
            for r in (rollout(GOLD), rollout("Severe NPDR")):
                value = process_reward(
                    r, GOLD, vf_moderate_npdr, dk_lookup_for(dk_moderate_npdr),
                    Modality.CFP, judge_saying(word), OPTIONS,
                )
                assert value in (-0.4, 0.0, 0.2, 0.4)


class TestTotalReward:
    def test_component_sum(self):
        b = total_reward(1, 1, 0.4)
        assert b.total == pytest.approx(2.4)
        assert (b.r_ans, b.r_fmt, b.r_pro) == (1.0, 1.0, 0.4)

    def test_range_validation(self):
        with pytest.raises(RewardRangeError):
            total_reward(2, 1, 0.0)
        with pytest.raises(RewardRangeError):
            total_reward(1, 0.5, 0.0)
        with pytest.raises(RewardRangeError):
            total_reward(1, 1, 0.3)

    def test_correct_dominates_incorrect(self):
        # Any correct-answer total beats any incorrect-answer total.
        correct_totals = [total_reward(1, f, p).total
                          for f in (0, 1) for p in (-0.4, 0.0, 0.4)]
        incorrect_totals = [total_reward(0, f, p).total
                            for f in (0, 1) for p in (0.0, 0.2)]
        assert min(correct_totals) > max(incorrect_totals) - 1.0
        # With format held equal, the dominance is strict:
        for f in (0, 1):
            worst_correct = min(total_reward(1, f, p).total for p in (-0.4, 0.0, 0.4))
            best_incorrect = max(total_reward(0, f, p).total for p in (0.0, 0.2))
            assert worst_correct > best_incorrect


class TestGroupAdvantage:
    def test_mean_only_mode(self):
        assert group_advantage([2.4, 1.6, 1.2, 0.0], normalize_by_std=False) == (
            pytest.approx([1.1, 0.3, -0.1, -1.3])
        )

    def test_std_mode_matches_oracle(self):
        rewards = [2.4, 1.6, 1.2, 0.0]
        mean = statistics.fmean(rewards)
        std = statistics.pstdev(rewards)
        expected = [(r - mean) / (std + 1e-6) for r in rewards]
        assert group_advantage(rewards) == pytest.approx(expected, abs=1e-12)

    def test_zero_variance_both_modes(self):
        assert group_advantage([1.4] * 4) == [0.0] * 4
        assert group_advantage([1.4] * 4, normalize_by_std=False) == [0.0] * 4

    def test_empty_group_rejected(self):
        with pytest.raises(ValueError):
            group_advantage([])

    @given(st.lists(st.floats(min_value=-1.0, max_value=3.0), min_size=1, max_size=16),
           st.booleans())
    def test_sum_to_zero_and_shift_invariance(self, rewards, std_mode):
        adv = group_advantage(rewards, normalize_by_std=std_mode)
        assert math.isclose(sum(adv), 0.0, abs_tol=1e-9)
        shifted = group_advantage([r + 0.7 for r in rewards], normalize_by_std=std_mode)
        assert adv == pytest.approx(shifted, abs=1e-9)

    @given(st.lists(st.floats(min_value=-1.0, max_value=3.0), min_size=2, max_size=16))
    def test_order_preserving(self, rewards):
        adv = group_advantage(rewards)
        for (ri, ai), (rj, aj) in zip(
            zip(rewards, adv), list(zip(rewards, adv))[1:]
        ):
            if ri < rj:
                assert ai <= aj
            elif ri > rj:
                assert ai >= aj


class TestScoreGroup:
    def test_full_group(self, vf_moderate_npdr, dk_moderate_npdr):
        raw = [
            "<think>microaneurysms seen</think><answer>Moderate NPDR</answer>",
            "<think>some lesions</think><answer>Moderate NPDR</answer>",
            "<think>looks severe</think><answer>Severe NPDR</answer>",
            "malformed output",
        ]
        replies = iter(["plausible", "tenuous", "plausible"])
        judge = ScriptedGateway(lambda req: next(replies))
        group = score_group(
            "s1", raw, GOLD, vf_moderate_npdr, dk_lookup_for(dk_moderate_npdr),
            Modality.CFP, judge, OPTIONS, normalize_by_std=False,
        )
        assert [b.total for b in group.breakdowns] == pytest.approx(
            [2.4, 2.0, 1.2, 0.0]
        )
        assert group.advantages == pytest.approx([1.0, 0.6, -0.2, -1.4])
        assert group.judge_verdicts == ["plausible", "tenuous", "plausible", None]
        assert len(judge.chat_calls) == 3
