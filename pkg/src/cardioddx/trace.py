"""Execution tracing: per-stage logs, deterministic clocks, JSONL persistence."""

from __future__ import annotations

import threading
import time

from .model import LlmCall, StageRecord, ToolCall, canonical_json, digest_of


class WallClock:
    def now(self) -> float:
        return time.time()


class CounterClock:
    """Monotone logical clock. Makes stage timestamps replay-stable.

    Wall time breaks byte-identical replay, so scripted runs use this by
    default. Thread-safe: parallel stages still get deterministic stamps
    because only the coordinating thread reads the clock.
    """

    def __init__(self, start: float = 0.0):
        self._value = start
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            value = self._value
            self._value += 1.0
            return value


class StageLog:
    """Mutable accumulator for one stage's tool calls, LLM exchanges, warnings."""

    def __init__(self, stage: str):
        self.stage = stage
        self.tool_calls: list[ToolCall] = []
        self.llm_calls: list[LlmCall] = []
        self.warnings: list[str] = []
        self._lock = threading.Lock()

    def tool(self, name: str, request, response) -> None:
        call = ToolCall(
            tool=name,
            request=request,
            response=response,
            request_digest=digest_of(request),
            response_digest=digest_of(response),
        )
        with self._lock:
            self.tool_calls.append(call)

    def llm(self, tag: str, temperature: float, messages, response_text: str) -> None:
        call = LlmCall(
            tag=tag,
            temperature=temperature,
            request_messages=tuple(dict(m) for m in messages),
            response_text=response_text,
            request_digest=digest_of([dict(m) for m in messages]),
            response_digest=digest_of(response_text),
        )
        with self._lock:
            self.llm_calls.append(call)

    def warn(self, message: str) -> None:
        with self._lock:
            self.warnings.append(message)


class Tracer:
    """Builds the ordered list of StageRecords for one pipeline run."""

    def __init__(self, clock=None):
        self.clock = clock if clock is not None else WallClock()
        self.records: list[StageRecord] = []

    def open_stage(self, stage: str) -> tuple[StageLog, float]:
        return StageLog(stage), self.clock.now()

    def close_stage(self, log: StageLog, started: float, inputs, outputs, summary: dict) -> StageRecord:
        record = StageRecord(
            stage=log.stage,
            inputs_digest=digest_of(inputs),
            outputs_digest=digest_of(outputs),
            summary=summary,
            tool_calls=list(log.tool_calls),
            llm_calls=list(log.llm_calls),
            warnings=list(log.warnings),
            started=started,
            ended=self.clock.now(),
        )
        self.records.append(record)
        return record


def save_trace(path, records) -> None:
    """Persist a trace as JSON Lines, one canonical record per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(canonical_json(record.to_json_dict()))
            fh.write("\n")


def load_trace(path):
    import json

    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(StageRecord.from_json_dict(json.loads(line)))
    return records
