import pytest

from funduskit.core import Modality, ReasoningTrace, VqaSample, normalize_finding
from funduskit.findings import VisualFindingSet
from funduskit.gateway import GatewayError, ScriptedGateway
from funduskit.traces import (
    DEFECT_ANSWER,
    DEFECT_DK,
    DEFECT_MODALITY,
    DEFECT_REDUNDANT,
    DEFECT_REQUIRED_OMITTED,
    AnswerMismatchError,
    CompositionFormatError,
    GoldNotInUniverseError,
    QuestionTemplate,
    TraceRecord,
    compose_trace,
    load_templates,
    quality_check,
    render_question,
)

DR_UNIVERSE = ("Mild NPDR", "Moderate NPDR", "Severe NPDR", "PDR")


def sample(id="s1", gold="Moderate NPDR", modality=Modality.CFP):
    return VqaSample(id=id, image_ref=f"{id}.png", modality=modality,
                     question="", gold_answer=gold)


class TestLoadTemplates:
    def test_shipped_table(self):
        templates = load_templates()
        assert set(templates) >= {"dr-grading", "amd-typing",
                                  "disease-screening", "disease-diagnosis"}
        dr = templates["dr-grading"]
        assert dr.option_source == "fixed-list"
        assert dr.fixed_options == DR_UNIVERSE

    def test_fixed_list_without_options_rejected(self):
        with pytest.raises(ValueError):
            QuestionTemplate(task_tag="x", template="q?",
                             option_source="fixed-list")

    def test_unknown_option_source_rejected(self):
        with pytest.raises(ValueError):
            QuestionTemplate(task_tag="x", template="q?", option_source="other")


class TestRenderQuestion:
    def test_dr_grading_fixed_question(self):
        template = load_templates()["dr-grading"]
        question, options = render_question(template, sample(), DR_UNIVERSE)
        assert question == (
            "Which level of diabetic retinopathy is shown in the fundus image?"
        )
        assert sorted(options) == sorted(DR_UNIVERSE)

    def test_label_set_slot_filled(self):
        template = load_templates()["disease-diagnosis"]
        question, options = render_question(template, sample(), DR_UNIVERSE)
        assert "{label-set}" not in question
        assert ", ".join(options) in question

    def test_same_seed_reproduces(self):
        template = load_templates()["dr-grading"]
        a = render_question(template, sample(), DR_UNIVERSE, seed=3)
        b = render_question(template, sample(), DR_UNIVERSE, seed=3)
        assert a == b

    def test_seed_varies_option_order_across_corpus(self):
        template = load_templates()["dr-grading"]
        samples = [sample(id=f"s{i}") for i in range(100)]
        per_seed = []
        for seed in (0, 1):
            per_seed.append([
                render_question(template, s, DR_UNIVERSE, seed=seed)[1]
                for s in samples
            ])
        differing = sum(1 for a, b in zip(*per_seed) if a != b)
        assert differing > 50

    def test_option_order_varies_across_samples(self):
        template = load_templates()["dr-grading"]
        orders = {
            render_question(template, sample(id=f"s{i}"), DR_UNIVERSE, seed=0)[1]
            for i in range(50)
        }
        assert len(orders) > 1

    def test_gold_outside_universe_rejected(self):
        template = load_templates()["amd-typing"]
        with pytest.raises(GoldNotInUniverseError):
            render_question(template, sample(gold="Moderate NPDR",
                                             modality=Modality.OCT),
                            ("Dry AMD", "Exudative AMD"))

    def test_gold_missing_from_fixed_list_rejected(self):
        template = QuestionTemplate(
            task_tag="t", template="q?", option_source="fixed-list",
            fixed_options=("Mild NPDR", "PDR"),
        )
        with pytest.raises(GoldNotInUniverseError):
            render_question(template, sample(), DR_UNIVERSE)


GOOD_THINK = (
    "The image shows multiple microaneurysms together with retinal "
    "hemorrhages, and hard exudates with cotton-wool spots are also visible. "
    "These lesions match the required findings for Moderate NPDR, and the "
    "supportive findings reinforce the grade, so the answer is Moderate NPDR."
)


def good_reply(think=GOOD_THINK, answer="Moderate NPDR"):
    return f"<think>{think}</think><answer>{answer}</answer>"


class TestComposeTrace:
    def test_happy_path(self, dk_moderate_npdr, vf_moderate_npdr):
        gateway = ScriptedGateway(lambda req: good_reply())
        trace = compose_trace("q?", "Moderate NPDR", dk_moderate_npdr,
                              vf_moderate_npdr, gateway, options=DR_UNIVERSE)
        assert trace.answer == "Moderate NPDR"
        assert len(gateway.chat_calls) == 1

    def test_format_error_reprompted(self, dk_moderate_npdr, vf_moderate_npdr):
        replies = iter(["not a trace", good_reply()])
        gateway = ScriptedGateway(lambda req: next(replies))
        trace = compose_trace("q?", "Moderate NPDR", dk_moderate_npdr,
                              vf_moderate_npdr, gateway, options=DR_UNIVERSE)
        assert trace.think == GOOD_THINK
        assert len(gateway.chat_calls) == 2

    def test_format_budget_exhausted(self, dk_moderate_npdr, vf_moderate_npdr):
        gateway = ScriptedGateway(lambda req: "still not a trace")
        with pytest.raises(CompositionFormatError):
            compose_trace("q?", "Moderate NPDR", dk_moderate_npdr,
                          vf_moderate_npdr, gateway, max_reprompts=2)
        assert len(gateway.chat_calls) == 3

    def test_answer_mismatch_not_reprompted(self, dk_moderate_npdr,
                                            vf_moderate_npdr):
        gateway = ScriptedGateway(lambda req: good_reply(answer="PDR"))
        with pytest.raises(AnswerMismatchError):
            compose_trace("q?", "Moderate NPDR", dk_moderate_npdr,
                          vf_moderate_npdr, gateway, options=DR_UNIVERSE)
        assert len(gateway.chat_calls) == 1

    def test_prompt_carries_vf_and_dk(self, dk_moderate_npdr, vf_moderate_npdr):
        seen = []

        def responder(req):
            seen.append(req.messages[0].content)
            return good_reply()

        compose_trace("q?", "Moderate NPDR", dk_moderate_npdr, vf_moderate_npdr,
                      ScriptedGateway(responder))
        prompt = seen[0]
        assert "microaneurysm" in prompt
        assert dk_moderate_npdr.narrative in prompt
        assert "Moderate NPDR" in prompt


def record(think=GOOD_THINK, answer="Moderate NPDR", vf=None, trace=...):
    if trace is ...:
        trace = ReasoningTrace(think=think, answer=answer)
    return TraceRecord(
        sample_id="s1", question="q?", gold_answer="Moderate NPDR",
        trace=trace, vf_used=vf, dk_key=("Moderate NPDR", "CFP"),
    )


def consistent_judge():
    return ScriptedGateway(lambda req: "consistent")


class TestQualityCheck:
    def test_clean_trace_accepted(self, dk_moderate_npdr, vf_moderate_npdr):
        report = quality_check(record(vf=vf_moderate_npdr), dk_moderate_npdr,
                               consistent_judge(), options=DR_UNIVERSE)
        assert report.accepted
        assert report.defects == ()
        assert report.judge_resolved

    def test_modality_inconsistency(self, dk_moderate_npdr, vf_moderate_npdr):
        think = "The OCT demonstrates microaneurysms and retinal hemorrhages. " \
                "Hard exudates and cotton-wool spots are visible too."
        report = quality_check(record(think=think, vf=vf_moderate_npdr),
                               dk_moderate_npdr, consistent_judge(),
                               options=DR_UNIVERSE)
        assert DEFECT_MODALITY in report.defects
        assert not report.accepted

    def test_required_vf_omitted(self, dk_moderate_npdr, vf_moderate_npdr):
        think = ("Retinal hemorrhages are present alongside hard exudates and "
                 "cotton-wool spots, consistent with Moderate NPDR.")
        report = quality_check(record(think=think, vf=vf_moderate_npdr),
                               dk_moderate_npdr, consistent_judge(),
                               options=DR_UNIVERSE)
        assert report.defects == (DEFECT_REQUIRED_OMITTED,)

    def test_redundant_vf_from_exclusion_list(self, dk_moderate_npdr,
                                              vf_moderate_npdr):
        think = GOOD_THINK + " Venous beading is also apparent in two quadrants."
        report = quality_check(record(think=think, vf=vf_moderate_npdr),
                               dk_moderate_npdr, consistent_judge(),
                               options=DR_UNIVERSE)
        assert report.defects == (DEFECT_REDUNDANT,)

    def test_negated_mention_not_redundant(self, dk_moderate_npdr,
                                           vf_moderate_npdr):
        think = GOOD_THINK + " There is no venous beading or neovascularization."
        report = quality_check(record(think=think, vf=vf_moderate_npdr),
                               dk_moderate_npdr, consistent_judge(),
                               options=DR_UNIVERSE)
        assert report.accepted

    def test_unused_vocab_finding_is_redundant(self, dk_moderate_npdr):
        # VF set lacks hard exudate; affirming it anyway is flagged.
        vf = VisualFindingSet(
            sample_id="s1",
            findings=frozenset({normalize_finding("microaneurysm"),
                                normalize_finding("retinal hemorrhage")}),
        )
        think = ("Microaneurysms and retinal hemorrhages are seen, and hard "
                 "exudates are present as well.")
        report = quality_check(record(think=think, vf=vf), dk_moderate_npdr,
                               consistent_judge(), options=DR_UNIVERSE)
        assert report.defects == (DEFECT_REDUNDANT,)

    def test_answer_mismatch_defect(self, dk_moderate_npdr, vf_moderate_npdr):
        report = quality_check(record(answer="PDR", vf=vf_moderate_npdr),
                               dk_moderate_npdr, consistent_judge(),
                               options=DR_UNIVERSE)
        assert DEFECT_ANSWER in report.defects

    def test_judge_mismatch_defect(self, dk_moderate_npdr, vf_moderate_npdr):
        judge = ScriptedGateway(lambda req: "mismatch")
        report = quality_check(record(vf=vf_moderate_npdr), dk_moderate_npdr,
                               judge, options=DR_UNIVERSE)
        assert report.defects == (DEFECT_DK,)
        assert not report.accepted

    def test_judge_outage_unresolved_not_accepted(self, dk_moderate_npdr,
                                                  vf_moderate_npdr):
        def responder(req):
            raise GatewayError("down")
        report = quality_check(record(vf=vf_moderate_npdr), dk_moderate_npdr,
                               ScriptedGateway(responder), options=DR_UNIVERSE)
        assert report.defects == ()
        assert not report.accepted
        assert not report.judge_resolved

    def test_single_judge_call(self, dk_moderate_npdr, vf_moderate_npdr):
        judge = consistent_judge()
        quality_check(record(vf=vf_moderate_npdr), dk_moderate_npdr, judge,
                      options=DR_UNIVERSE)
        assert len(judge.chat_calls) == 1

    def test_multiple_defects_all_reported(self, dk_moderate_npdr,
                                           vf_moderate_npdr):
        think = ("The OCT scan shows hard exudates and cotton-wool spots and "
                 "venous beading.")
        judge = ScriptedGateway(lambda req: "mismatch")
        report = quality_check(record(think=think, answer="PDR",
                                      vf=vf_moderate_npdr),
                               dk_moderate_npdr, judge, options=DR_UNIVERSE)
        assert set(report.defects) == {
            DEFECT_ANSWER, DEFECT_MODALITY, DEFECT_REQUIRED_OMITTED,
            DEFECT_REDUNDANT, DEFECT_DK,
        }
