"""Self-optimizing refinement loop.

One iteration interleaves two generation phases with SFT and curriculum-
weighted DPO: generate with the current model and pool the responses, fine
tune on every input that has pooled a correct answer, regenerate with the
fine-tuned model, then run preference optimization against the iteration-start
snapshot as reference. Inputs whose recent-window error rate crosses the
threshold get rewritten variants added to the preference set. The loop stops
once test accuracy reaches the target.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .core import Notam, NotamError, NotamFixture
from .gateway import ExtractionFailed
from .knowledge import EMPTY_BUNDLE, KnowledgeBundle, KnowledgeGraph, ReferenceTable, kg_tablerag_retrieve
from .multiview import RewriteRuleTable, rewrite
from .policy import (
    LogLinearPolicy,
    TaskInput,
    UnknownCandidate,
    apply_update,
    generate,
    grad_log_prob,
    log_prob,
)


class EvolveError(NotamError):
    pass


class DegenerateTriple(EvolveError):
    """Preference triple with chosen equal to rejected."""


class CandidateNotRepresentable(EvolveError):
    """A gold output has zero support under the policy's candidate space."""


@dataclass(frozen=True)
class EvolveConfig:
    """Hyperparameters of the refinement loop."""

    max_iterations: int = 10
    lookback: int = 4
    error_threshold: float = 0.5
    augmentation_count: int = 2
    weight_sharpness: float = 1.0
    dpo_beta: float = 0.5
    target_accuracy: float = 0.95
    sft_epochs: int = 40
    dpo_epochs: int = 15
    learning_rate: float = 0.5
    seed: int = 0
    split_ratio: float = 0.8
    decode: str = "sample"

    def __post_init__(self):
        checks = [
            (self.max_iterations >= 0, "max_iterations must be >= 0"),
            (self.lookback >= 1, "lookback must be >= 1"),
            (0.0 <= self.error_threshold <= 1.0, "error_threshold must be in [0,1]"),
            (self.augmentation_count >= 0, "augmentation_count must be >= 0"),
            (self.weight_sharpness >= 0.0, "weight_sharpness must be >= 0"),
            (self.dpo_beta > 0.0, "dpo_beta must be positive"),
            (0.0 < self.target_accuracy <= 1.0, "target_accuracy must be in (0,1]"),
            (self.sft_epochs >= 1, "sft_epochs must be positive"),
            (self.dpo_epochs >= 1, "dpo_epochs must be positive"),
            (self.learning_rate > 0.0, "learning_rate must be positive"),
            (0.0 < self.split_ratio < 1.0, "split_ratio must be in (0,1)"),
            (self.decode in ("sample", "argmax"), "decode must be sample or argmax"),
        ]
        for ok, message in checks:
            if not ok:
                raise EvolveError(message)


@dataclass(frozen=True)
class DatasetRow:
    input_id: str
    notam: Notam
    bundle: KnowledgeBundle
    gold: tuple
    task_input: TaskInput


@dataclass(frozen=True)
class Dataset:
    rows: tuple[DatasetRow, ...]
    split: str

    def __post_init__(self):
        ids = [r.input_id for r in self.rows]
        if len(set(ids)) != len(ids):
            raise EvolveError(f"duplicate input_ids in {self.split} split")


def build_dataset_rows(
    fixtures: Sequence[NotamFixture],
    graph: KnowledgeGraph | None = None,
    tables: Sequence[ReferenceTable] = (),
    use_kg: bool = True,
) -> list[DatasetRow]:
    """Assemble dataset rows: retrieve knowledge per notice and derive the
    policy-side task input (x paired with rendered K)."""
    rows = []
    for fixture in fixtures:
        if use_kg and graph is not None:
            bundle = kg_tablerag_retrieve(fixture.notam, graph, list(tables))
        else:
            bundle = EMPTY_BUNDLE
        task_input = TaskInput(
            input_id=fixture.id,
            source_id=fixture.id,
            text=fixture.notam.body,
            facts=bundle.fact_lines(),
        )
        rows.append(
            DatasetRow(
                input_id=fixture.id,
                notam=fixture.notam,
                bundle=bundle,
                gold=tuple(fixture.gold),
                task_input=task_input,
            )
        )
    return rows


def split_dataset(rows: Sequence[DatasetRow], ratio: float = 0.8, seed: int = 0):
    """Deterministic shuffle-and-split into (train, test) datasets."""
    if len(rows) < 2:
        raise EvolveError("need at least 2 rows to split")
    order = np.random.default_rng(seed).permutation(len(rows))
    n_train = min(len(rows) - 1, max(1, round(len(rows) * ratio)))
    shuffled = [rows[i] for i in order]
    return (
        Dataset(rows=tuple(shuffled[:n_train]), split="train"),
        Dataset(rows=tuple(shuffled[n_train:]), split="test"),
    )


@dataclass(frozen=True)
class PoolEntry:
    input_id: str
    iteration: int
    phase: int
    key: str | None  # canonical serialization; None when generation failed
    candidate: Any
    is_correct: bool


class ResponsePool:
    """Append-only archive of generated responses, indexed by input id."""

    def __init__(self):
        self._entries: list[PoolEntry] = []
        self._by_input: dict[str, list[PoolEntry]] = {}

    def add(self, entry: PoolEntry) -> None:
        self._entries.append(entry)
        self._by_input.setdefault(entry.input_id, []).append(entry)

    @property
    def entries(self) -> tuple[PoolEntry, ...]:
        return tuple(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def for_input(self, input_id: str) -> tuple[PoolEntry, ...]:
        return tuple(self._by_input.get(input_id, ()))


def error_rate(pool: ResponsePool, input_id: str, lookback: int) -> float:
    """Fraction of incorrect responses in the last min(lookback, available)
    entries; 0.0 with no history (optimistic start)."""
    if lookback < 1:
        raise EvolveError(f"lookback must be >= 1, got {lookback}")
    entries = pool.for_input(input_id)
    if not entries:
        return 0.0
    window = entries[-min(lookback, len(entries)):]
    return sum(1 for e in window if not e.is_correct) / len(window)


@dataclass(frozen=True)
class SftRow:
    input: TaskInput
    gold: Any


def build_sft_dataset(pool: ResponsePool, data: Dataset) -> list[SftRow]:
    """One gold pair per train input that ever pooled a correct response."""
    rows = []
    for row in data.rows:
        if any(e.is_correct for e in pool.for_input(row.input_id)):
            rows.append(SftRow(input=row.task_input, gold=row.gold))
    return rows


def _gold_logprob_and_grad(policy: LogLinearPolicy, row: SftRow, want_grad: bool):
    try:
        lp = log_prob(policy, row.input, row.gold)
        grad = grad_log_prob(policy, row.input, row.gold) if want_grad else None
    except UnknownCandidate as exc:
        raise CandidateNotRepresentable(str(exc)) from exc
    if lp == float("-inf"):
        raise CandidateNotRepresentable(f"gold has zero support for {row.input.input_id}")
    return lp, grad


def sft_loss(policy: LogLinearPolicy, rows: Sequence[SftRow]) -> float:
    """Mean negative log-likelihood of the gold outputs."""
    if not rows:
        raise EvolveError("sft_loss needs at least one row")
    total = 0.0
    for row in rows:
        lp, _ = _gold_logprob_and_grad(policy, row, want_grad=False)
        total -= lp
    return total / len(rows)


def sft_loss_and_grad(policy: LogLinearPolicy, rows: Sequence[SftRow]):
    if not rows:
        raise EvolveError("sft_loss needs at least one row")
    total = 0.0
    grad = np.zeros(policy.task.dim)
    for row in rows:
        lp, g = _gold_logprob_and_grad(policy, row, want_grad=True)
        total -= lp
        grad -= g
    return total / len(rows), grad / len(rows)


@dataclass(frozen=True)
class PreferenceTriple:
    """(input or variant, chosen, rejected); chosen != rejected canonically."""

    input: TaskInput
    source_input_id: str
    chosen: Any
    rejected: Any
    chosen_key: str
    rejected_key: str

    def __post_init__(self):
        if self.chosen_key == self.rejected_key:
            raise DegenerateTriple(f"chosen equals rejected for {self.source_input_id}")


Rewriter = Callable[[DatasetRow, int, int], list[TaskInput]]


def variant_rewriter(rules: RewriteRuleTable | None = None) -> Rewriter:
    """Rewriter backed by the terminology-preserving body transforms.

    Produces up to n distinct variant inputs; fewer when the transforms
    cannot generate enough distinct texts (truncated, never padded).
    """

    def rewriter(row: DatasetRow, n: int, seed: int) -> list[TaskInput]:
        extra = (row.notam.location,) if row.notam.location else ()
        seen = {row.task_input.text}
        variants: list[TaskInput] = []
        index = 1
        while len(variants) < n and index <= 3 * n + 4:
            result = rewrite(row.task_input.text, index, seed, rules, extra_protected=extra)
            index += 1
            if result.noop or result.text in seen:
                continue
            seen.add(result.text)
            variants.append(
                TaskInput(
                    input_id=f"{row.input_id}#v{len(variants) + 1}",
                    source_id=row.task_input.source_id,
                    text=result.text,
                    facts=row.task_input.facts,
                )
            )
        return variants

    return rewriter


def _distinct_incorrect(entries: Sequence[PoolEntry]) -> list[PoolEntry]:
    seen: set[str] = set()
    out = []
    for entry in entries:
        if entry.is_correct or entry.key is None:
            continue
        if entry.key in seen:
            continue
        seen.add(entry.key)
        out.append(entry)
    return out


def build_preference_dataset(
    pool: ResponsePool,
    data: Dataset,
    rewriter: Rewriter | None,
    cfg: EvolveConfig,
) -> list[PreferenceTriple]:
    """Base triples pair each distinct incorrect response with the most recent
    correct one; inputs at or above the error threshold additionally
    contribute the same pairs under rewritten variants."""
    triples: list[PreferenceTriple] = []
    for row in data.rows:
        entries = pool.for_input(row.input_id)
        corrects = [e for e in entries if e.is_correct]
        incorrects = _distinct_incorrect(entries)
        if not corrects or not incorrects:
            continue
        chosen = corrects[-1]
        base_inputs = [row.task_input]
        if (
            rewriter is not None
            and cfg.augmentation_count > 0
            and error_rate(pool, row.input_id, cfg.lookback) >= cfg.error_threshold
        ):
            base_inputs.extend(rewriter(row, cfg.augmentation_count, cfg.seed))
        for task_input in base_inputs:
            for rejected in incorrects:
                triples.append(
                    PreferenceTriple(
                        input=task_input,
                        source_input_id=row.input_id,
                        chosen=chosen.candidate,
                        rejected=rejected.candidate,
                        chosen_key=chosen.key,
                        rejected_key=rejected.key,
                    )
                )
    return triples


def curriculum_weights(e: int, total_iterations: int, beta_weight: float, xi: Sequence[float]) -> np.ndarray:
    """Interpolate from uniform to an error-rate softmax as iterations advance.

    w_e(x) = (1 - alpha_e)/N + alpha_e * softmax(beta_weight * xi),
    alpha_e = min(e / E, 1).
    """
    n = len(xi)
    if n < 1:
        raise EvolveError("need at least one error rate")
    if e < 0:
        raise EvolveError(f"iteration must be >= 0, got {e}")
    if total_iterations < 1:
        raise EvolveError(f"total_iterations must be >= 1, got {total_iterations}")
    alpha = min(e / total_iterations, 1.0)
    z = beta_weight * np.asarray(xi, dtype=float)
    z = z - np.max(z)
    soft = np.exp(z)
    soft = soft / soft.sum()
    return (1.0 - alpha) / n + alpha * soft


def dpo_loss_and_grad(
    policy: LogLinearPolicy,
    reference: LogLinearPolicy,
    triples: Sequence[PreferenceTriple],
    weights: Sequence[float],
    dpo_beta: float,
):
    """Weighted preference loss -E[log sigmoid(beta * margin)] and its exact
    analytic gradient; the expectation is a weight-proportional sum over the
    triple set so repeated evaluation is reproducible."""
    if not triples:
        raise EvolveError("dpo loss needs at least one triple")
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(triples),):
        raise EvolveError(f"weights shape {w.shape} != ({len(triples)},)")
    if np.any(w < 0) or w.sum() <= 0:
        raise EvolveError("weights must be non-negative with positive sum")
    probs = w / w.sum()
    loss = 0.0
    grad = np.zeros(policy.task.dim)
    for p, triple in zip(probs, triples):
        if triple.chosen_key == triple.rejected_key:
            raise DegenerateTriple(f"chosen equals rejected for {triple.source_input_id}")
        margin = (
            log_prob(policy, triple.input, triple.chosen)
            - log_prob(reference, triple.input, triple.chosen)
            - log_prob(policy, triple.input, triple.rejected)
            + log_prob(reference, triple.input, triple.rejected)
        )
        z = dpo_beta * margin
        loss += p * float(np.logaddexp(0.0, -z))  # -log sigmoid(z)
        sig_neg = float(np.exp(-np.logaddexp(0.0, z)))  # sigmoid(-z)
        diff = grad_log_prob(policy, triple.input, triple.chosen) - grad_log_prob(
            policy, triple.input, triple.rejected
        )
        grad += p * (-sig_neg * dpo_beta) * diff
    return loss, grad


@dataclass(frozen=True)
class IterationStats:
    iteration: int
    accuracy: float | None = None
    sft_rows: int = 0
    sft_loss_start: float | None = None
    sft_loss_end: float | None = None
    dpo_loss_start: float | None = None
    dpo_loss_end: float | None = None
    pairs_observed: int = 0
    pairs_effective: int = 0
    dpo_skipped: bool = True
    pool_size: int = 0
    wall_time_s: float | None = None
    theoretical_pairs: float | None = None


@dataclass
class EvolveState:
    policy: LogLinearPolicy
    pool: ResponsePool
    train: Dataset
    test: Dataset
    iteration: int = 0
    history: list[IterationStats] = field(default_factory=list)


Generator = Callable[[LogLinearPolicy, DatasetRow, int, int], Any]


def derive_seed(seed: int, iteration: int, phase: int, input_id: str) -> int:
    digest = hashlib.sha256(f"gen:{seed}:{iteration}:{phase}:{input_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def policy_generator(cfg: EvolveConfig) -> Generator:
    """Default generator: decode from the policy itself (seeded sampling by
    default so early uniform policies still explore)."""

    def generator(policy: LogLinearPolicy, row: DatasetRow, iteration: int, phase: int):
        if cfg.decode == "argmax":
            return generate(policy, row.task_input, mode="argmax")
        seed = derive_seed(cfg.seed, iteration, phase, row.input_id)
        return generate(policy, row.task_input, mode="sample", seed=seed)

    return generator


def _generate_phase(
    policy: LogLinearPolicy,
    data: Dataset,
    pool: ResponsePool,
    generator: Generator,
    iteration: int,
    phase: int,
    serialize: Callable[[Any], str],
) -> None:
    for row in data.rows:
        gold_key = serialize(row.gold)
        try:
            candidate = generator(policy, row, iteration, phase)
        except ExtractionFailed:
            # unparseable reply still counts against the error rate
            pool.add(PoolEntry(row.input_id, iteration, phase, None, None, False))
            continue
        except Exception as exc:
            raise EvolveError(f"generation failed for input {row.input_id}: {exc}") from exc
        key = serialize(candidate)
        pool.add(PoolEntry(row.input_id, iteration, phase, key, candidate, key == gold_key))


def _train_sft(policy: LogLinearPolicy, rows: Sequence[SftRow], cfg: EvolveConfig):
    loss_start = sft_loss(policy, rows)
    current = policy
    loss = loss_start
    for _ in range(cfg.sft_epochs):
        loss, grad = sft_loss_and_grad(current, rows)
        current = apply_update(current, grad, cfg.learning_rate)
    return current, loss_start, loss


def run_iteration(
    state: EvolveState,
    cfg: EvolveConfig,
    generator: Generator | None = None,
    rewriter: Rewriter | None = None,
) -> EvolveState:
    """Execute one full iteration: generate/pool, SFT, regenerate/pool, build
    preferences, then DPO against the iteration-start reference (skipped when
    no preference pair exists)."""
    if state.iteration >= cfg.max_iterations:
        return state
    e = state.iteration + 1
    gen = generator or policy_generator(cfg)
    serialize = state.policy.task.serialize
    reference = state.policy  # pi_e snapshot; policy values are immutable

    _generate_phase(state.policy, state.train, state.pool, gen, e, 1, serialize)

    sft_rows = build_sft_dataset(state.pool, state.train)
    if sft_rows:
        policy_sft, sft_start, sft_end = _train_sft(state.policy, sft_rows, cfg)
    else:
        policy_sft, sft_start, sft_end = state.policy, None, None

    _generate_phase(policy_sft, state.train, state.pool, gen, e, 2, serialize)

    triples = build_preference_dataset(state.pool, state.train, rewriter, cfg)
    if triples:
        xi = [error_rate(state.pool, t.source_input_id, cfg.lookback) for t in triples]
        weights = curriculum_weights(e, cfg.max_iterations, cfg.weight_sharpness, xi)
        current = policy_sft
        dpo_start, _ = dpo_loss_and_grad(current, reference, triples, weights, cfg.dpo_beta)
        dpo_end = dpo_start
        for _ in range(cfg.dpo_epochs):
            dpo_end, grad = dpo_loss_and_grad(current, reference, triples, weights, cfg.dpo_beta)
            current = apply_update(current, grad, cfg.learning_rate)
        next_policy = current
        stats = IterationStats(
            iteration=e,
            sft_rows=len(sft_rows),
            sft_loss_start=sft_start,
            sft_loss_end=sft_end,
            dpo_loss_start=dpo_start,
            dpo_loss_end=dpo_end,
            pairs_observed=len(triples),
            pairs_effective=len(triples),
            dpo_skipped=False,
            pool_size=len(state.pool),
        )
    else:
        next_policy = policy_sft
        stats = IterationStats(
            iteration=e,
            sft_rows=len(sft_rows),
            sft_loss_start=sft_start,
            sft_loss_end=sft_end,
            dpo_skipped=True,
            pool_size=len(state.pool),
        )

    return EvolveState(
        policy=next_policy,
        pool=state.pool,
        train=state.train,
        test=state.test,
        iteration=e,
        history=state.history + [stats],
    )


def accuracy(policy: LogLinearPolicy, data: Dataset) -> float:
    """Exact-match accuracy of argmax decoding against the gold outputs."""
    if not data.rows:
        raise EvolveError("accuracy needs a non-empty dataset")
    serialize = policy.task.serialize
    hits = 0
    for row in data.rows:
        prediction = generate(policy, row.task_input, mode="argmax")
        hits += serialize(prediction) == serialize(row.gold)
    return hits / len(data.rows)


def check_termination(policy: LogLinearPolicy, test: Dataset, eta: float) -> bool:
    return accuracy(policy, test) >= eta


def run_evolution(
    state: EvolveState,
    cfg: EvolveConfig,
    generator: Generator | None = None,
    rewriter: Rewriter | None = None,
    on_iteration: Callable[[IterationStats, EvolveState], None] | None = None,
) -> EvolveState:
    """Drive iterations until the target accuracy is reached or the budget is
    spent; per-iteration stats gain the measured test accuracy."""
    while state.iteration < cfg.max_iterations:
        state = run_iteration(state, cfg, generator, rewriter)
        acc = accuracy(state.policy, state.test)
        stats = replace(state.history[-1], accuracy=acc)
        state.history[-1] = stats
        if on_iteration is not None:
            on_iteration(stats, state)
        if acc >= cfg.target_accuracy:
            break
    return state


# --- Complexity report ------------------------------------------------------


@dataclass(frozen=True)
class ComplexityRow:
    iteration: int
    theoretical_pairs: float
    observed_pairs: int
    effective_pairs: int
    ratio: float | None
    wall_time_s: float | None
    scale_factor: float | None


def calibrate_scale_constant(first: IterationStats) -> float:
    """Fit the quadratic pair-count constant from the first iteration's
    observations: K = sqrt(observed / (9 * (1 - accuracy)))."""
    acc = first.accuracy if first.accuracy is not None else 0.0
    if first.pairs_observed <= 0 or acc >= 1.0:
        return 0.0
    return math.sqrt(first.pairs_observed / (9.0 * (1.0 - acc)))


def complexity_report(
    history: Sequence[IterationStats],
    scale_constant: float | None = None,
) -> list[ComplexityRow]:
    """Per-iteration pair-count report: quadratic theoretical estimate
    9*K^2*t^2*(1-accuracy), observed and effective counts, their ratio, and
    the wall-clock scale factor versus the previous iteration."""
    if not history:
        raise EvolveError("complexity report needs at least one iteration")
    k = scale_constant if scale_constant is not None else calibrate_scale_constant(history[0])
    rows: list[ComplexityRow] = []
    previous: IterationStats | None = None
    for stats in history:
        if stats.theoretical_pairs is not None:
            theoretical = float(stats.theoretical_pairs)
        else:
            acc = stats.accuracy if stats.accuracy is not None else 0.0
            theoretical = 9.0 * k * k * stats.iteration**2 * (1.0 - acc)
        ratio = stats.pairs_effective / theoretical if theoretical > 0 else None
        scale: float | None
        if previous is None:
            scale = 1.0
        elif stats.wall_time_s is not None and previous.wall_time_s:
            scale = stats.wall_time_s / previous.wall_time_s
        elif previous.pairs_effective > 0:
            scale = stats.pairs_effective / previous.pairs_effective
        else:
            scale = None
        rows.append(
            ComplexityRow(
                iteration=stats.iteration,
                theoretical_pairs=theoretical,
                observed_pairs=stats.pairs_observed,
                effective_pairs=stats.pairs_effective,
                ratio=ratio,
                wall_time_s=stats.wall_time_s,
                scale_factor=scale,
            )
        )
        previous = stats
    return rows
