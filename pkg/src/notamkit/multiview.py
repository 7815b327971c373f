"""Terminology-preserving NOTAM rewriting and majority-vote consensus.

Rewrites never touch protected tokens, numerals or timestamps; variants are
selected deterministically from (seed, variant index). Voting is a pure
reduction over canonical record serializations.
"""

from __future__ import annotations

import hashlib
import math
import random
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .core import Notam, NotamError, serialize_records

_TOKEN_RE = re.compile(r"\S+")
_HAS_DIGIT_RE = re.compile(r"\d")

KNOWN_TRANSFORMS = ("lexical", "advisory_preamble", "passive_frame", "clause_reorder")


class MultiviewError(NotamError):
    pass


class MultiviewDegraded(MultiviewError):
    """Fewer than ceil(N/2) generator slots survived."""


class RewriteRuleError(MultiviewError):
    pass


@dataclass(frozen=True)
class RewriteRuleTable:
    """Bidirectional phrase pairs, protected tokens, ordered transform ids."""

    lexical_pairs: tuple[tuple[str, str], ...]
    protected_tokens: tuple[str, ...]
    syntactic_transforms: tuple[str, ...]

    def __post_init__(self):
        protected = {t.upper() for t in self.protected_tokens}
        for a, b in self.lexical_pairs:
            for side in (a, b):
                for token in side.upper().split():
                    if token in protected:
                        raise RewriteRuleError(
                            f"substitution {a!r} <-> {b!r} overlaps protected token {token!r}"
                        )
        for t in self.syntactic_transforms:
            if t not in KNOWN_TRANSFORMS:
                raise RewriteRuleError(f"unknown transform id {t!r}")


def load_rewrite_rules(path: str | Path | None = None) -> RewriteRuleTable:
    """Load the sectioned rewrite-rule file (bundled default when path is None)."""
    if path is None:
        text = resources.files("notamkit.data").joinpath("rewrite_rules.txt").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    sections: dict[str, list[str]] = {"lexical": [], "protected": [], "transforms": []}
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].lower()
            if current not in sections:
                raise RewriteRuleError(f"line {lineno}: unknown section {current!r}")
            continue
        if current is None:
            raise RewriteRuleError(f"line {lineno}: entry outside a section")
        sections[current].append(line)
    pairs = []
    for entry in sections["lexical"]:
        if "|" not in entry:
            raise RewriteRuleError(f"lexical pair needs A|B, got {entry!r}")
        a, b = (p.strip() for p in entry.split("|", 1))
        pairs.append((a, b))
    return RewriteRuleTable(
        lexical_pairs=tuple(pairs),
        protected_tokens=tuple(sections["protected"]),
        syntactic_transforms=tuple(sections["transforms"]),
    )


_DEFAULT_RULES: RewriteRuleTable | None = None


def default_rewrite_rules() -> RewriteRuleTable:
    global _DEFAULT_RULES
    if _DEFAULT_RULES is None:
        _DEFAULT_RULES = load_rewrite_rules()
    return _DEFAULT_RULES


@dataclass(frozen=True)
class RewriteResult:
    text: str
    applied: tuple[str, ...]
    noop: bool


def protected_multiset(text: str, rules: RewriteRuleTable, extra: tuple[str, ...] = ()) -> dict[str, int]:
    """Multiset of tokens that must survive a rewrite byte-for-byte."""
    protected = {t.upper() for t in rules.protected_tokens} | {t.upper() for t in extra}
    counts: dict[str, int] = {}
    for token in _TOKEN_RE.findall(text):
        if _HAS_DIGIT_RE.search(token) or token.upper() in protected:
            counts[token] = counts.get(token, 0) + 1
    return counts


def _variant_rng(seed: int, variant_index: int) -> random.Random:
    digest = hashlib.sha256(f"rewrite:{seed}:{variant_index}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def _apply_lexical(text: str, rules: RewriteRuleTable) -> str:
    out = text
    for a, b in rules.lexical_pairs:
        pattern_a = re.compile(rf"(?<![A-Z0-9]){re.escape(a)}(?![A-Z0-9])")
        pattern_b = re.compile(rf"(?<![A-Z0-9]){re.escape(b)}(?![A-Z0-9])")
        if pattern_a.search(out):
            out = pattern_a.sub(b, out)
        elif pattern_b.search(out):
            out = pattern_b.sub(a, out)
    return out


def _apply_advisory(text: str, rng: random.Random) -> str:
    preambles = ("BE ADVISED:", "ATTENTION ALL STATIONS:", "NOTICE FOLLOWS:")
    return f"{preambles[rng.randrange(len(preambles))]} {text}"


def _apply_passive(text: str, rng: random.Random) -> str:
    frames = ("IT IS NOTIFIED THAT {}", "OPERATORS ARE INFORMED THAT {}", "{} AS PUBLISHED BY NOF")
    return frames[rng.randrange(len(frames))].format(text)


def _apply_clause_reorder(text: str, rng: random.Random) -> str | None:
    m = re.search(r"^(.*\S)\s+DUE TO\s+(\S.*)$", text)
    if m:
        return f"DUE TO {m.group(2)}, {m.group(1)}"
    parts = [p.strip() for p in text.split(". ") if p.strip()]
    if len(parts) >= 2:
        rotated = parts[1:] + parts[:1]
        return ". ".join(rotated)
    return None


def rewrite(
    notam_body: str,
    variant_index: int,
    seed: int,
    rules: RewriteRuleTable | None = None,
    extra_protected: tuple[str, ...] = (),
) -> RewriteResult:
    """Produce variant `variant_index` of a body; index 0 is always the original.

    Protected tokens and every token containing a digit survive verbatim; the
    transform combination is a deterministic function of (seed, index).
    """
    if variant_index < 0:
        raise MultiviewError(f"variant_index must be >= 0, got {variant_index}")
    if not notam_body.strip():
        raise MultiviewError("empty body")
    rules = rules or default_rewrite_rules()
    if variant_index == 0:
        return RewriteResult(text=notam_body, applied=(), noop=True)

    rng = _variant_rng(seed, variant_index)
    available = list(rules.syntactic_transforms)
    if not available:
        return RewriteResult(text=notam_body, applied=(), noop=True)
    # Cycle through non-empty transform subsets so consecutive variants differ.
    n_subsets = (1 << len(available)) - 1
    mask = 1 + (variant_index - 1 + rng.randrange(n_subsets)) % n_subsets
    chosen = [t for bit, t in enumerate(available) if mask & (1 << bit)]

    before = protected_multiset(notam_body, rules, extra_protected)
    text = notam_body
    applied: list[str] = []
    for transform in chosen:
        candidate: str | None = None
        if transform == "lexical":
            candidate = _apply_lexical(text, rules)
        elif transform == "advisory_preamble":
            candidate = _apply_advisory(text, rng)
        elif transform == "passive_frame":
            candidate = _apply_passive(text, rng)
        elif transform == "clause_reorder":
            candidate = _apply_clause_reorder(text, rng)
        if candidate is None or candidate == text:
            continue
        if protected_multiset(candidate, rules, extra_protected) != before:
            continue  # transform would damage a protected token: skip it
        text = candidate
        applied.append(transform)
    return RewriteResult(text=text, applied=tuple(applied), noop=not applied)


def vote(candidates: list) -> list:
    """Majority vote over record lists; ties break to the smallest serialization.

    Always returns an element of the input, never a synthesized output.
    """
    if not candidates:
        raise MultiviewError("vote needs at least one candidate")
    counts: dict[str, int] = {}
    first_instance: dict[str, int] = {}
    for i, cand in enumerate(candidates):
        key = serialize_records(cand)
        counts[key] = counts.get(key, 0) + 1
        first_instance.setdefault(key, i)
    best_key = min(counts, key=lambda k: (-counts[k], k))
    return candidates[first_instance[best_key]]


def multiview_infer(
    notam: Notam,
    n: int,
    generator,
    rules: RewriteRuleTable | None = None,
    seed: int = 0,
) -> list:
    """Rewrite-and-vote inference: N variants (variant 0 = original), one
    generator call per variant, majority vote over surviving slots.

    generator(variant_text, variant_index) returns a record list or raises;
    failed slots are dropped, and fewer than ceil(N/2) survivors raises
    MultiviewDegraded.
    """
    if n < 1:
        raise MultiviewError(f"N must be >= 1, got {n}")
    rules = rules or default_rewrite_rules()
    extra = (notam.location,) if notam.location else ()
    outputs = []
    failures: list[str] = []
    for index in range(n):
        variant = rewrite(notam.body, index, seed, rules, extra_protected=extra)
        try:
            outputs.append(list(generator(variant.text, index)))
        except Exception as exc:  # dropped slot; quorum checked below
            failures.append(f"variant {index}: {exc}")
    quorum = math.ceil(n / 2)
    if len(outputs) < quorum:
        raise MultiviewDegraded(
            f"only {len(outputs)}/{n} variants survived (quorum {quorum}): " + "; ".join(failures)
        )
    return vote(outputs)
