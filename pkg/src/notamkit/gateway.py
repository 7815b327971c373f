"""Uniform generator abstraction over the toy policy, scripted mocks, the
rule baseline (knowledge-grounded or not), and remote chat-completion models.

All backends consume the same request shape and return parsed records, so the
refinement loop and multi-view inference can swap them freely. Reply
extraction takes the last well-formed record block because reasoning-style
models emit think-aloud text before the answer.
"""

from __future__ import annotations

import json
import os
import re
import threading
import time
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import requests

from .core import Notam, NotamError, StructuredRecord, record_from_dict, serialize_records
from .knowledge import EMPTY_BUNDLE, KnowledgeBundle
from .policy import LogLinearPolicy, TaskInput, generate as policy_generate
from .rules import RuleSet, extract_records

DEFAULT_TIMEOUT_S = 60.0


class GeneratorError(NotamError):
    pass


class UnknownTemplate(GeneratorError):
    pass


class Timeout(GeneratorError):
    pass


class RemoteError(GeneratorError):
    def __init__(self, status: int, message: str = ""):
        self.status = status
        super().__init__(f"remote returned status {status}" + (f": {message}" if message else ""))


class ExtractionFailed(GeneratorError):
    """Reply contained no parseable record block."""


@dataclass(frozen=True)
class GeneratorRequest:
    template_id: str
    notam: Notam
    bundle: KnowledgeBundle = EMPTY_BUNDLE
    mode: str = "argmax"
    seed: int | None = None
    timeout_s: float = DEFAULT_TIMEOUT_S
    input_id: str | None = None
    variant_index: int = 0
    variant_text: str | None = None

    def effective_input_id(self) -> str:
        return self.input_id if self.input_id is not None else self.notam.id

    def effective_body(self) -> str:
        return self.variant_text if self.variant_text is not None else self.notam.body


@dataclass(frozen=True)
class GeneratorResponse:
    raw_text: str
    records: tuple[StructuredRecord, ...] | None
    latency_s: float
    provider: str


_TEMPLATES = {"runway": "prompt_runway.txt"}


def render_prompt(template_id: str, notam: Notam, bundle: KnowledgeBundle = EMPTY_BUNDLE) -> str:
    """Render the instruction block, knowledge facts and raw notice; byte-stable."""
    if template_id not in _TEMPLATES:
        raise UnknownTemplate(f"no template {template_id!r}")
    template = resources.files("notamkit.data").joinpath(_TEMPLATES[template_id]).read_text(encoding="utf-8")
    lines = bundle.fact_lines()
    knowledge = "\n".join(lines) if lines else "(none)"
    return template.format(knowledge=knowledge, notam=notam.raw_text.strip())


def extract_records_block(text: str):
    """Extract the last well-formed JSON record array from reply text.

    Idempotent on canonical serializations; raises ExtractionFailed when no
    block parses into valid records.
    """
    decoder = json.JSONDecoder()
    found = None
    for match in re.finditer(r"\[", text):
        start = match.start()
        try:
            value, _ = decoder.raw_decode(text[start:])
        except json.JSONDecodeError:
            continue
        if not isinstance(value, list) or not value:
            continue
        if not all(isinstance(item, dict) and "airport" in item for item in value):
            continue
        try:
            records = tuple(record_from_dict(item) for item in value)
        except NotamError:
            continue
        found = records
    if found is None:
        raise ExtractionFailed("no parseable record block in reply")
    return found


class ToyPolicyBackend:
    """Scores the enumerated candidate space with a trained log-linear policy."""

    provider = "toy"

    def __init__(self, policy: LogLinearPolicy):
        self.policy = policy

    def generate(self, request: GeneratorRequest) -> GeneratorResponse:
        started = time.monotonic()
        task_input = TaskInput(
            input_id=f"{request.effective_input_id()}#{request.variant_index}",
            source_id=request.effective_input_id(),
            text=request.effective_body(),
            facts=request.bundle.fact_lines(),
        )
        candidate = policy_generate(self.policy, task_input, mode=request.mode, seed=request.seed)
        records = tuple(candidate)
        return GeneratorResponse(
            raw_text=serialize_records(records),
            records=records,
            latency_s=time.monotonic() - started,
            provider=self.provider,
        )


class RuleBaselineBackend:
    """Deterministic regex/keyword baseline applied to the (variant) body."""

    provider = "baseline"

    def __init__(self, ruleset: RuleSet | None = None):
        self.ruleset = ruleset

    def _records(self, request: GeneratorRequest):
        notam = replace(request.notam, body=request.effective_body())
        return tuple(extract_records(notam, self.ruleset))

    def generate(self, request: GeneratorRequest) -> GeneratorResponse:
        started = time.monotonic()
        records = self._records(request)
        return GeneratorResponse(
            raw_text=serialize_records(records),
            records=records,
            latency_s=time.monotonic() - started,
            provider=self.provider,
        )


class GroundedBackend(RuleBaselineBackend):
    """Rule baseline enriched with retrieved knowledge: an airport-wide
    restriction propagates onto every runway the bundle lists."""

    provider = "grounded"

    def generate(self, request: GeneratorRequest) -> GeneratorResponse:
        started = time.monotonic()
        records = list(self._records(request))
        runways = request.bundle.runways()
        if runways:
            expanded = []
            for record in records:
                if record.runway == "":
                    expanded.extend(replace(record, runway=rwy) for rwy in runways)
                else:
                    expanded.append(record)
            records = expanded
        records = tuple(records)
        return GeneratorResponse(
            raw_text=serialize_records(records),
            records=records,
            latency_s=time.monotonic() - started,
            provider=self.provider,
        )


class MockBackend:
    """Replays a scripted (input_id, variant_index) -> outcome table.

    Script values are record lists, or the markers {"error": "timeout"} /
    {"error": "malformed"} to exercise failure paths. Unscripted slots go to
    the fallback backend when one is configured.
    """

    provider = "mock"

    def __init__(self, script: dict, fallback=None):
        self.script = dict(script)
        self.fallback = fallback

    def generate(self, request: GeneratorRequest) -> GeneratorResponse:
        started = time.monotonic()
        key = (request.effective_input_id(), request.variant_index)
        if key not in self.script:
            if self.fallback is not None:
                return self.fallback.generate(request)
            raise ExtractionFailed(f"no scripted output for {key}")
        entry = self.script[key]
        if isinstance(entry, dict) and "error" in entry:
            if entry["error"] == "timeout":
                raise Timeout(f"scripted timeout for {key}")
            raise ExtractionFailed(f"scripted malformed reply for {key}")
        records = tuple(entry)
        return GeneratorResponse(
            raw_text=serialize_records(records),
            records=records,
            latency_s=time.monotonic() - started,
            provider=self.provider,
        )


def load_mock_script(path: str | Path) -> dict:
    """Line-delimited script: {"input_id", "variant_index", "records"|"error"}."""
    script: dict = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        data = json.loads(line)
        key = (str(data["input_id"]), int(data.get("variant_index", 0)))
        if "error" in data:
            script[key] = {"error": data["error"]}
        else:
            script[key] = tuple(record_from_dict(r) for r in data["records"])
    return script


class RemoteBackend:
    """Chat-completion style endpoint; request shape is the widely used
    {model, messages, temperature} POST to <base_url>/chat/completions."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = "NOTAMKIT_API_KEY",
        request_limit: int = 4,
        template_id: str = "runway",
        temperature: float = 0.0,
        session=None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.template_id = template_id
        self.temperature = temperature
        self.session = session or requests.Session()
        self._slots = threading.Semaphore(max(1, request_limit))
        self.provider = f"remote:{model}"

    def generate(self, request: GeneratorRequest) -> GeneratorResponse:
        started = time.monotonic()
        notam = replace(request.notam, body=request.effective_body())
        prompt = render_prompt(self.template_id, notam, request.bundle)
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0.0 if request.mode == "argmax" else self.temperature,
        }
        if request.seed is not None:
            payload["seed"] = request.seed
        headers = {}
        api_key = os.environ.get(self.api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        with self._slots:
            try:
                response = self.session.post(
                    f"{self.base_url}/chat/completions",
                    json=payload,
                    headers=headers,
                    timeout=request.timeout_s,
                )
            except requests.Timeout as exc:
                raise Timeout(f"request timed out after {request.timeout_s}s") from exc
            except requests.RequestException as exc:
                raise RemoteError(0, str(exc)) from exc
        if response.status_code != 200:
            raise RemoteError(response.status_code, response.text[:200])
        try:
            content = response.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, ValueError) as exc:
            raise RemoteError(response.status_code, f"malformed response body: {exc}") from exc
        records = extract_records_block(content)
        return GeneratorResponse(
            raw_text=content,
            records=records,
            latency_s=time.monotonic() - started,
            provider=self.provider,
        )


def generate(backend, request: GeneratorRequest) -> GeneratorResponse:
    """Run one generation request against any backend."""
    return backend.generate(request)


def variant_generator(backend, notam: Notam, bundle: KnowledgeBundle, mode: str = "argmax", seed: int | None = None):
    """Adapt a backend to multiview's (variant_text, variant_index) callable."""

    def call(variant_text: str, variant_index: int):
        request = GeneratorRequest(
            template_id="runway",
            notam=notam,
            bundle=bundle,
            mode=mode,
            seed=seed,
            variant_index=variant_index,
            variant_text=variant_text,
        )
        response = backend.generate(request)
        if response.records is None:
            raise ExtractionFailed("backend returned no records")
        return list(response.records)

    return call
