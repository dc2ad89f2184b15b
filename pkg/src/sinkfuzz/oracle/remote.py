"""Chat-completions backend for a hosted model.

The endpoint must accept an OpenAI-style ``POST {base_url}/chat/completions``.
Temperature is pinned to 0. Transient failures (transport errors, 429, 5xx)
and unparseable replies are retried with exponential backoff, at most
``max_retries`` times.
"""

from __future__ import annotations

import json
import os
import re
import time
from dataclasses import dataclass
from importlib import resources
from typing import Callable, Optional

import httpx

from ..minij.catalog import CWE_NAMES
from .dsl import DSLError, parse_generator
from .types import EXPLOIT, EXPLORE, FILTER, OracleError, OracleRequest, OracleResponse, UsageCounters

DEFAULT_KEY_ENV = "SINKFUZZ_API_KEY"
_DSL_BLOCK = re.compile(r"```(?:dsl)?[ \t]*\n(.*?)```", re.DOTALL)
_JSON_OBJECT = re.compile(r"\{.*\}", re.DOTALL)


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str = "http://localhost:8000/v1"
    model: str = "default"
    api_key_env: str = DEFAULT_KEY_ENV
    timeout: float = 120.0
    max_retries: int = 3
    backoff: float = 1.0
    max_tokens: int = 2048

    @classmethod
    def from_dict(cls, raw: dict) -> "EndpointConfig":
        known = {k: raw[k] for k in cls.__dataclass_fields__ if k in raw}
        return cls(**known)


def load_template(name: str) -> str:
    return resources.files("sinkfuzz.oracle").joinpath("prompts", f"{name}.txt").read_text(encoding="utf-8")


def _fmt(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) if not isinstance(obj, str) else obj


def render_prompt(request: OracleRequest) -> str:
    ctx = request.context
    feedback = _fmt(request.feedback) if request.feedback else "none (first attempt)"
    if request.mode == FILTER:
        sink = ctx["sink"]
        if request.phase == "report":
            path = ctx.get("path")
            return load_template("filter_report").format(
                sink_text=sink["text"], cwe=sink["cwe"], cwe_name=CWE_NAMES.get(sink["cwe"], ""),
                function=sink["function"], line=sink["line"], condition=sink["condition"],
                path=" -> ".join(path["path"]) if path else "none",
                function_source=ctx.get("function_source", ""),
            )
        return load_template("filter_decision").format(report=(request.feedback or {}).get("report", ""))
    if request.mode == EXPLORE:
        sink = ctx["sink"]
        functions = "\n\n".join(f"// {f['name']}\n{f['source']}" for f in ctx["functions"])
        return load_template("explore").format(
            sink_text=sink["text"], function=sink["function"], line=sink["line"],
            path=" -> ".join(ctx["path"]), input_plan=_fmt(ctx["input_plan"]),
            functions=functions, feedback=feedback,
        )
    frames = "\n\n".join(f"// {f['function']} (line {f['line']})\n{f['source']}" for f in ctx["frames"])
    return load_template("exploit").format(
        sink_text=ctx["sink"].get("text", ctx["sink"]["builtin"]), cwe=ctx["cwe"],
        cwe_name=CWE_NAMES.get(ctx["cwe"], ""), condition=ctx["condition"],
        input_b64=ctx["input_b64"], sink_args=_fmt(ctx["sink"].get("args", [])),
        stack=_fmt(ctx["stack"]), frames=frames, feedback=feedback,
    )


def parse_reply(request: OracleRequest, text: str) -> OracleResponse:
    if request.mode == FILTER and request.phase == "report":
        if not text.strip():
            raise ValueError("empty report")
        return OracleResponse(FILTER, report=text.strip())
    if request.mode == FILTER:
        m = _JSON_OBJECT.search(text)
        if not m:
            raise ValueError("no JSON decision object in reply")
        raw = json.loads(m.group(0))
        return OracleResponse.from_dict(FILTER, raw)
    m = _DSL_BLOCK.search(text)
    if not m:
        raise ValueError("no ```dsl block in reply")
    source = m.group(1)
    try:
        parse_generator(source)
    except DSLError as err:
        raise ValueError(f"generator does not parse: {err}") from None
    return OracleResponse(request.mode, dsl=source)


class RemoteOracle:
    name = "remote"

    def __init__(self, config: EndpointConfig = EndpointConfig(), client: Optional[httpx.Client] = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self.sleep = sleep
        key = os.environ.get(config.api_key_env, "")
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        self.client = client or httpx.Client(timeout=config.timeout)
        self.headers = headers
        self.usage = UsageCounters()

    def _post(self, prompt: str) -> str:
        body = {
            "model": self.config.model,
            "temperature": 0,
            "max_tokens": self.config.max_tokens,
            "messages": [{"role": "user", "content": prompt}],
        }
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        resp = self.client.post(url, json=body, headers=self.headers)
        if resp.status_code == 429 or resp.status_code >= 500:
            raise httpx.HTTPStatusError(f"transient status {resp.status_code}", request=resp.request,
                                        response=resp)
        resp.raise_for_status()
        data = resp.json()
        usage = data.get("usage") or {}
        self.usage.prompt_tokens += int(usage.get("prompt_tokens", 0))
        self.usage.completion_tokens += int(usage.get("completion_tokens", 0))
        return data["choices"][0]["message"]["content"] or ""

    def ask(self, request: OracleRequest) -> OracleResponse:
        self.usage.count(request.mode)
        prompt = render_prompt(request)
        last = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                self.usage.retries += 1
                self.sleep(self.config.backoff * 2 ** (attempt - 1))
            try:
                return parse_reply(request, self._post(prompt))
            except httpx.HTTPStatusError as err:
                last = err
                if err.response.status_code != 429 and err.response.status_code < 500:
                    break
            except (httpx.TransportError, ValueError, KeyError, IndexError) as err:
                last = err
        self.usage.errors += 1
        raise OracleError(f"remote oracle failed: {last}")
