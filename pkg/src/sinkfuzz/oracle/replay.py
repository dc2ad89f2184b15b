"""Scripted oracle: answers come from a JSON transcript, in order."""

from __future__ import annotations

import json
from pathlib import Path

from .types import MODES, OracleError, OracleRequest, OracleResponse, UsageCounters


class TranscriptExhausted(OracleError):
    pass


class ReplayOracle:
    """Transcript entries are ``{"mode": ..., "response": ...}`` objects.

    Responses are validated at load time, so a drop without evidence is a
    load error rather than a runtime surprise. Single consumer.
    """

    name = "replay"

    def __init__(self, entries, source: str = "<memory>"):
        self.source = source
        self.entries = []
        for i, raw in enumerate(entries):
            if not isinstance(raw, dict) or "mode" not in raw or "response" not in raw:
                raise ValueError(f"{source}: entry {i} needs mode and response")
            if raw["mode"] not in MODES:
                raise ValueError(f"{source}: entry {i} has unknown mode {raw['mode']!r}")
            try:
                self.entries.append(OracleResponse.from_dict(raw["mode"], raw["response"]))
            except ValueError as err:
                raise ValueError(f"{source}: entry {i}: {err}") from None
        self.position = 0
        self.usage = UsageCounters()

    @classmethod
    def load(cls, path) -> "ReplayOracle":
        path = Path(path)
        with path.open(encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, list):
            raise ValueError(f"{path}: transcript must be a JSON array")
        return cls(data, str(path))

    @property
    def remaining(self) -> int:
        return len(self.entries) - self.position

    def ask(self, request: OracleRequest) -> OracleResponse:
        self.usage.count(request.mode)
        if self.position >= len(self.entries):
            self.usage.errors += 1
            raise TranscriptExhausted(f"{self.source}: transcript exhausted after {len(self.entries)} call(s)")
        resp = self.entries[self.position]
        if resp.mode != request.mode:
            self.usage.errors += 1
            raise OracleError(f"{self.source}: entry {self.position} is {resp.mode}, "
                              f"request was {request.mode}")
        self.position += 1
        return resp
