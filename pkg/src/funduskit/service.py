"""HTTP reward-scoring service for external RL trainers.

POST /v1/score applies the format/answer/process rewards and group-relative
advantages to a group of rollouts; GET /v1/health reports readiness. Requests
are independent: there is no shared mutable state beyond the read-only stores
and the gateway cache.
"""

from __future__ import annotations

import time
from typing import Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from funduskit.core import Modality, SynonymMap, normalize_answer, normalize_finding
from funduskit.findings import VfStore, VisualFindingSet
from funduskit.gateway import Gateway, GatewayError
from funduskit.knowledge import DkStore, DomainKnowledgeRecord
from funduskit.rewards import score_group


class JudgeUnavailableError(RuntimeError):
    """Raised instead of degrading the process reward when strict mode is
    on."""


class _StrictJudge(Gateway):
    """Passthrough wrapper that converts gateway failures into a non-gateway
    exception, so the reward engine's degrade-to-zero policy cannot swallow
    them."""

    def __init__(self, inner: Gateway):
        super().__init__()
        self.inner = inner

    def chat(self, request):
        try:
            return self.inner.chat(request)
        except GatewayError as exc:
            raise JudgeUnavailableError(str(exc)) from exc

    def retrieve(self, query, sources=()):
        return self.inner.retrieve(query, sources)


class ScoreRequest(BaseModel):
    sample_id: str
    gold_answer: str
    modality: str
    rollouts: list[str] = Field(min_length=1)
    options: Optional[list[str]] = None
    vf: Optional[list[str]] = None
    advantage_mode: Optional[str] = None  # "std" or "mean"; default from config


class ScoreResponse(BaseModel):
    sample_id: str
    breakdowns: list[dict]
    advantages: list[float]
    judge_verdicts: list[Optional[str]]
    timing_ms: float


class ScoringService:
    def __init__(
        self,
        judge: Gateway,
        dk_store: Optional[DkStore] = None,
        vf_store: Optional[VfStore] = None,
        synonyms: Optional[SynonymMap] = None,
        advantage_mode: str = "std",
        strict_judge: bool = False,
    ):
        self.judge = _StrictJudge(judge) if strict_judge else judge
        self.synonyms = synonyms
        self.advantage_mode = advantage_mode
        self.ready = False
        self._dk_by_label: dict[tuple[str, str], DomainKnowledgeRecord] = {}
        self._vf_by_sample: dict[str, VisualFindingSet] = {}
        self._dk_store = dk_store
        self._vf_store = vf_store

    def load_stores(self) -> None:
        if self._dk_store is not None:
            for record in self._dk_store.load_all():
                key = (normalize_answer(record.label), record.modality.value)
                self._dk_by_label[key] = record
        if self._vf_store is not None:
            self._vf_by_sample = self._vf_store.load()
        self.ready = True

    def dk_lookup(self, label: str, modality: Modality) -> Optional[DomainKnowledgeRecord]:
        return self._dk_by_label.get((normalize_answer(label), modality.value))

    def score(self, request: ScoreRequest) -> ScoreResponse:
        started = time.perf_counter()
        try:
            modality = Modality.parse(request.modality)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        if request.vf is not None:
            vf = VisualFindingSet(
                sample_id=request.sample_id,
                findings=frozenset(
                    normalize_finding(t, self.synonyms) for t in request.vf
                ),
            )
        else:
            vf = self._vf_by_sample.get(request.sample_id)
            if vf is None:
                raise HTTPException(
                    status_code=400,
                    detail=f"no visual findings supplied or stored for {request.sample_id}",
                )
        mode = request.advantage_mode or self.advantage_mode
        if mode not in ("std", "mean"):
            raise HTTPException(status_code=400, detail=f"bad advantage_mode {mode!r}")
        try:
            group = score_group(
                sample_id=request.sample_id,
                raw_rollouts=request.rollouts,
                gold=request.gold_answer,
                vf=vf,
                dk_lookup=self.dk_lookup,
                modality=modality,
                judge=self.judge,
                options=request.options,
                normalize_by_std=(mode == "std"),
            )
        except JudgeUnavailableError as exc:
            raise HTTPException(status_code=503, detail=f"judge unreachable: {exc}") from exc
        return ScoreResponse(
            sample_id=request.sample_id,
            breakdowns=[b.to_dict() for b in group.breakdowns],
            advantages=group.advantages,
            judge_verdicts=group.judge_verdicts,
            timing_ms=(time.perf_counter() - started) * 1000.0,
        )


def create_app(service: ScoringService, load_stores: bool = True) -> FastAPI:
    app = FastAPI(title="funduskit-score")
    if load_stores:
        service.load_stores()

    @app.get("/v1/health")
    def health():
        return {"ready": service.ready}

    @app.post("/v1/score", response_model=ScoreResponse)
    def score(request: ScoreRequest) -> ScoreResponse:
        return service.score(request)

    return app
