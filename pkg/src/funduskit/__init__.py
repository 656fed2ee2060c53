"""funduskit: knowledge-aware reasoning-trace synthesis and RLVR reward
scoring for fundus VQA."""

from funduskit.core import (
    CanonicalFinding,
    Modality,
    ReasoningTrace,
    Rollout,
    SynonymMap,
    TraceFormatError,
    VqaSample,
    normalize_answer,
    normalize_finding,
    parse_trace,
)
from funduskit.findings import VisualFindingSet, extract_vf, make_prompt, parse_presence
from funduskit.knowledge import (
    DomainKnowledgeRecord,
    FindingVocabulary,
    ReferencePassage,
    build_query,
    compose_description,
    extract_dk,
    text_to_findings,
)
from funduskit.metrics import ConfusionCounts, accuracy, macro_f1, s2_metric
from funduskit.rewards import (
    JudgeTier,
    RewardBreakdown,
    RolloutGroup,
    answer_reward,
    format_reward,
    group_advantage,
    process_reward,
    score_group,
    total_reward,
)
from funduskit.traces import (
    QualityReport,
    QuestionTemplate,
    TraceRecord,
    compose_trace,
    quality_check,
    render_question,
)

__version__ = "0.1.0"
