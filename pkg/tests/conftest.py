import pytest

from funduskit.core import Modality, normalize_finding
from funduskit.findings import VisualFindingSet
from funduskit.knowledge import DomainKnowledgeRecord


def finding(name):
    return normalize_finding(name)


@pytest.fixture
def dk_moderate_npdr():
    """Moderate NPDR on CFP: microaneurysms and retinal hemorrhages are
    decisive, exudates and cotton-wool spots supportive, no signs of more
    advanced vascular damage."""
    return DomainKnowledgeRecord(
        label="Moderate NPDR",
        modality=Modality.CFP,
        narrative=(
            "On CFP, Moderate NPDR is characterized by multiple microaneurysms "
            "and dot-blot intraretinal hemorrhages, which together reflect a "
            "greater lesion burden than that seen in mild disease. At the same "
            "time, there should be no evidence of neovascularization. In "
            "addition to these core findings, hard exudates and cotton-wool "
            "spots may also be observed."
        ),
        required_findings=(finding("microaneurysm"), finding("retinal hemorrhage")),
        supportive_findings=(finding("hard exudate"), finding("cotton-wool spot")),
        exclusion_findings=(finding("neovascularization"), finding("venous beading")),
        sources=("https://eyewiki.example/moderate-npdr",),
    )


@pytest.fixture
def dk_exudative_amd():
    return DomainKnowledgeRecord(
        label="Exudative AMD",
        modality=Modality.OCT,
        narrative=(
            "On OCT, exudative AMD typically demonstrates pigment epithelial "
            "detachment together with subretinal fluid and intraretinal fluid, "
            "indicating active neovascular leakage."
        ),
        required_findings=(
            finding("pigment epithelial detachment"),
            finding("subretinal fluid"),
        ),
        supportive_findings=(finding("intraretinal fluid"), finding("drusen")),
        sources=("https://eyewiki.example/exudative-amd",),
    )


@pytest.fixture
def dr_options():
    return ("Mild NPDR", "Moderate NPDR", "Severe NPDR", "PDR")


@pytest.fixture
def vf_moderate_npdr(dk_moderate_npdr):
    return VisualFindingSet(
        sample_id="s1",
        findings=frozenset(
            {finding("microaneurysm"), finding("retinal hemorrhage"),
             finding("hard exudate"), finding("cotton-wool spot")}
        ),
        votes=(("cotton-wool spot", 4), ("hard exudate", 3),
               ("microaneurysm", 5), ("retinal hemorrhage", 5)),
        provenance="voted",
    )
