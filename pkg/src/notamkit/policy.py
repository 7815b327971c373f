"""Log-linear policy over enumerable candidate outputs.

Gives the refinement loop a fully verifiable generator: exact softmax
log-probabilities over a finite candidate list per input, analytic gradients,
and copy-semantics parameter updates so reference snapshots stay frozen.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .core import NotamError, StructuredRecord, serialize_records
from .knowledge import KnowledgeBundle
from .rules import detect_actype, detect_flight_types, detect_region, extract_records

FeaturePairs = Sequence[tuple[str, float]]


class PolicyError(NotamError):
    pass


class UnknownCandidate(PolicyError):
    """Candidate is not in the input's enumerated candidate list."""


class NonFiniteGradient(PolicyError):
    pass


class CheckpointMismatch(PolicyError):
    """Checkpoint featurizer schema does not match the task."""


@dataclass(frozen=True)
class TaskInput:
    """Policy-side view of one input: text plus rendered knowledge facts.

    source_id keys the candidate list, so rewritten variants of an input
    share the original's candidate space.
    """

    input_id: str
    source_id: str
    text: str
    facts: tuple[str, ...] = ()


@dataclass(frozen=True)
class CandidateTask:
    """Featurizer + candidate enumerator defining one scoring problem."""

    dim: int
    features: Callable[[TaskInput, Any], FeaturePairs]
    candidates: Callable[[TaskInput], Sequence[Any]]
    serialize: Callable[[Any], str]
    schema_id: str
    # feature vectors are theta-independent; memo shared across policy updates
    _phi_cache: dict = field(default_factory=dict, compare=False, repr=False)


def feature_index(name: str, dim: int) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % dim


def feature_vector(pairs: FeaturePairs, dim: int) -> np.ndarray:
    vec = np.zeros(dim)
    for name, weight in pairs:
        vec[feature_index(name, dim)] += weight
    return vec


@dataclass(frozen=True)
class LogLinearPolicy:
    task: CandidateTask
    theta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        if theta.shape != (self.task.dim,):
            raise PolicyError(f"theta shape {theta.shape} != ({self.task.dim},)")
        theta = theta.copy()
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    def phi(self, input: TaskInput, candidate: Any) -> np.ndarray:
        try:
            key = (input, candidate)
            cached = self.task._phi_cache.get(key)
        except TypeError:
            return feature_vector(self.task.features(input, candidate), self.task.dim)
        if cached is None:
            cached = feature_vector(self.task.features(input, candidate), self.task.dim)
            cached.setflags(write=False)
            self.task._phi_cache[key] = cached
        return cached


def new_policy(task: CandidateTask, theta: np.ndarray | None = None) -> LogLinearPolicy:
    return LogLinearPolicy(task=task, theta=theta if theta is not None else np.zeros(task.dim))


def _logsumexp(scores: np.ndarray) -> float:
    # max-subtraction keeps exp() in range for arbitrary score shifts
    peak = float(np.max(scores))
    return peak + float(np.log(np.sum(np.exp(scores - peak))))


def _candidate_table(policy: LogLinearPolicy, input: TaskInput):
    candidates = list(policy.task.candidates(input))
    if not candidates:
        raise PolicyError(f"no candidates for input {input.input_id}")
    keys = [policy.task.serialize(c) for c in candidates]
    if len(set(keys)) != len(keys):
        raise PolicyError(f"duplicate candidates for input {input.input_id}")
    return candidates, keys


def score_candidates(policy: LogLinearPolicy, input: TaskInput):
    """Return (candidates, keys, log-probabilities) for every candidate."""
    candidates, keys = _candidate_table(policy, input)
    scores = np.array([float(policy.theta @ policy.phi(input, c)) for c in candidates])
    logps = scores - _logsumexp(scores)
    return candidates, keys, logps


def log_prob(policy: LogLinearPolicy, input: TaskInput, candidate: Any) -> float:
    candidates, keys, logps = score_candidates(policy, input)
    key = policy.task.serialize(candidate)
    try:
        index = keys.index(key)
    except ValueError:
        raise UnknownCandidate(f"{key!r} not enumerated for input {input.input_id}") from None
    return float(logps[index])


def grad_log_prob(policy: LogLinearPolicy, input: TaskInput, candidate: Any) -> np.ndarray:
    """phi(x, y) minus the exact policy expectation of phi over candidates."""
    candidates, keys, logps = score_candidates(policy, input)
    key = policy.task.serialize(candidate)
    try:
        index = keys.index(key)
    except ValueError:
        raise UnknownCandidate(f"{key!r} not enumerated for input {input.input_id}") from None
    probs = np.exp(logps)
    expectation = np.zeros(policy.task.dim)
    for p, cand in zip(probs, candidates):
        expectation += p * policy.phi(input, cand)
    return policy.phi(input, candidates[index]) - expectation


def generate(
    policy: LogLinearPolicy,
    input: TaskInput,
    mode: str = "argmax",
    seed: int | None = None,
) -> Any:
    """Pick a candidate: argmax with lexicographic tie-break, or seeded sampling."""
    candidates, keys, logps = score_candidates(policy, input)
    if mode == "argmax":
        top = float(np.max(logps))
        tied = [i for i in range(len(candidates)) if logps[i] >= top - 1e-12]
        index = min(tied, key=lambda i: keys[i])
        return candidates[index]
    if mode == "sample":
        rng = np.random.default_rng(seed)
        probs = np.exp(logps)
        probs = probs / probs.sum()
        index = int(rng.choice(len(candidates), p=probs))
        return candidates[index]
    raise PolicyError(f"unknown decode mode {mode!r}")


def apply_update(policy: LogLinearPolicy, gradient: np.ndarray, learning_rate: float) -> LogLinearPolicy:
    """theta' = theta - lr * gradient; returns a new policy value."""
    gradient = np.asarray(gradient, dtype=float)
    if gradient.shape != policy.theta.shape:
        raise PolicyError(f"gradient shape {gradient.shape} != {policy.theta.shape}")
    if not np.all(np.isfinite(gradient)):
        raise NonFiniteGradient("gradient contains non-finite entries")
    return replace(policy, theta=policy.theta - learning_rate * gradient)


CHECKPOINT_VERSION = 1


def save_checkpoint(policy: LogLinearPolicy, path: str | Path) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "schema_id": policy.task.schema_id,
        "theta": policy.theta.tolist(),
    }
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(payload), encoding="utf-8")
    tmp.replace(path)


def load_checkpoint(path: str | Path, task: CandidateTask) -> LogLinearPolicy:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointMismatch(f"unsupported checkpoint version {payload.get('version')}")
    if payload.get("schema_id") != task.schema_id:
        raise CheckpointMismatch(
            f"checkpoint schema {payload.get('schema_id')!r} != task schema {task.schema_id!r}"
        )
    return LogLinearPolicy(task=task, theta=np.array(payload["theta"], dtype=float))


# --- Record-list task over NOTAM rows -------------------------------------

RecordsCandidate = tuple[StructuredRecord, ...]

_REGION_CHOICES = ("TAKEOFFS", "LANDINGS", "TAKEOFFS,LANDINGS")
_FLIGHT_CHOICES = (
    ("International", "Domestic", "Regional"),
    ("International",),
    ("Domestic",),
)


def record_features(input: TaskInput, candidate: RecordsCandidate) -> list[tuple[str, float]]:
    """Indicator features over record field values, knowledge/body overlap
    counters, and agreement with keyword cues detected in the body."""
    pairs: list[tuple[str, float]] = [(f"n_records={len(candidate)}", 1.0)]
    fact_text = " ".join(input.facts).upper()
    body = input.text.upper()
    region_cue = detect_region(body)
    flights_cue = detect_flight_types(body)
    actype_cue = detect_actype(body)
    for record in candidate:
        pairs.append((f"airport={record.airport}", 1.0))
        pairs.append((f"runway={record.runway}", 1.0))
        pairs.append((f"region={record.affect_region}", 1.0))
        pairs.append((f"flights={','.join(record.flight_type)}", 1.0))
        pairs.append((f"actype={record.affect_actype or 'null'}", 1.0))
        expected_region = region_cue if region_cue is not None else "TAKEOFFS,LANDINGS"
        pairs.append(("region_cue_match" if record.affect_region == expected_region else "region_cue_miss", 1.0))
        expected_flights = flights_cue if flights_cue is not None else _FLIGHT_CHOICES[0]
        pairs.append(("flights_cue_match" if record.flight_type == expected_flights else "flights_cue_miss", 1.0))
        expected_actype = actype_cue  # None means no cue in the body
        pairs.append(("actype_cue_match" if record.affect_actype == expected_actype else "actype_cue_miss", 1.0))
        if record.runway:
            bare = record.runway.removeprefix("RWY ")
            if f"RWY {bare}" in fact_text or record.runway in fact_text:
                pairs.append(("runway_in_knowledge", 1.0))
            if bare in body:
                pairs.append(("runway_in_body", 1.0))
        else:
            pairs.append(("empty_runway", 1.0))
    return pairs


def _vary_records(
    base: RecordsCandidate, bundle_runways: Sequence[str]
) -> list[RecordsCandidate]:
    variants: list[RecordsCandidate] = []
    if not base:
        return variants
    runway_options: list[str] = []
    for rwy in list(bundle_runways) + ["33C"]:
        bare = rwy.removeprefix("RWY ")
        if bare not in runway_options:
            runway_options.append(bare)
    for region in _REGION_CHOICES:
        variants.append(tuple(replace(r, affect_region=region) for r in base))
    for flights in _FLIGHT_CHOICES:
        variants.append(tuple(replace(r, flight_type=flights) for r in base))
    for runway in runway_options:
        try:
            variants.append(tuple(replace(r, runway=runway) for r in base))
        except NotamError:
            continue  # knowledge strings that are not valid designators
    variants.append(tuple(replace(r, runway="") for r in base))
    return variants


def build_record_task(rows: Iterable[Any], dim: int = 512, cap: int = 32) -> CandidateTask:
    """Candidate task for NOTAM rows: baseline extraction output, the gold
    answer, and systematic single-field perturbations, capped per input.

    Rows need .input_id, .notam, .bundle and .gold attributes.
    """
    spaces: dict[str, tuple[RecordsCandidate, ...]] = {}
    for row in rows:
        gold: RecordsCandidate = tuple(row.gold)
        baseline: RecordsCandidate = tuple(extract_records(row.notam))
        bundle: KnowledgeBundle = row.bundle
        pool: dict[str, RecordsCandidate] = {}

        def add(candidate: RecordsCandidate):
            pool.setdefault(serialize_records(candidate), candidate)

        add(gold)
        add(baseline)
        for seed_candidate in (gold, baseline):
            for variant in _vary_records(seed_candidate, bundle.runways()):
                add(variant)
        gold_key = serialize_records(gold)
        others = sorted(k for k in pool if k != gold_key)
        keys = [gold_key] + others[: cap - 1]
        spaces[row.input_id] = tuple(pool[k] for k in sorted(keys))

    def candidates(input: TaskInput) -> Sequence[RecordsCandidate]:
        try:
            return spaces[input.source_id]
        except KeyError:
            raise PolicyError(f"no candidate space for input {input.source_id}") from None

    schema_id = hashlib.sha256(f"records-v1:{dim}".encode()).hexdigest()[:16]
    return CandidateTask(
        dim=dim,
        features=record_features,
        candidates=candidates,
        serialize=serialize_records,
        schema_id=schema_id,
    )
