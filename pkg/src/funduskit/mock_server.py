"""Embedded OpenAI-compatible mock chat-completion server for deterministic
tests of the live gateway path.

The script maps a request cache key (sent by the client as ``x_cache_key``)
to a response text, optionally preceded by a scripted number of 500 failures.
A ``default`` entry catches unscripted requests.
"""

from __future__ import annotations

import json
import threading
from pathlib import Path

from fastapi import FastAPI, Response


def create_app(script: dict) -> FastAPI:
    """Build the mock app from a script dict:

    ``{"by_key": {<cache_key>: {"text": ..., "fail_times": n}},
       "default": {"text": ..., "fail_times": n}}``
    """
    app = FastAPI(title="funduskit-mock-llm")
    attempts: dict[str, int] = {}
    failures_left: dict[str, int] = {}
    lock = threading.Lock()

    def _entry(key: str) -> dict | None:
        by_key = script.get("by_key", {})
        if key in by_key:
            return by_key[key]
        return script.get("default")

    @app.get("/")
    def root():
        return {"ok": True}

    @app.get("/v1/attempts")
    def get_attempts():
        with lock:
            return dict(attempts)

    @app.post("/v1/chat/completions")
    def chat_completions(payload: dict):
        key = payload.get("x_cache_key", "")
        entry = _entry(key)
        with lock:
            attempts[key] = attempts.get(key, 0) + 1
            if entry is not None and key not in failures_left:
                failures_left[key] = int(entry.get("fail_times", 0))
            if entry is not None and failures_left[key] > 0:
                failures_left[key] -= 1
                return Response(
                    content=json.dumps({"error": "scripted failure"}),
                    status_code=500,
                    media_type="application/json",
                )
        if entry is None:
            return Response(
                content=json.dumps({"error": f"unscripted request {key}"}),
                status_code=404,
                media_type="application/json",
            )
        return {
            "choices": [
                {
                    "message": {"role": "assistant", "content": entry["text"]},
                    "finish_reason": "stop",
                }
            ],
            "model": payload.get("model", "mock"),
            "usage": {"prompt_tokens": 0, "completion_tokens": 0, "total_tokens": 0},
        }

    return app


def create_app_from_file(path: str | Path) -> FastAPI:
    return create_app(json.loads(Path(path).read_text(encoding="utf-8")))
