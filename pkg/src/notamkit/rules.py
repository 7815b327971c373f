"""Deterministic rule baseline for runway-status extraction.

Keyword-driven classifier plus record assembly with the standard defaults:
unspecified impact affects both takeoffs and landings, unspecified flight
types cover International, Domestic and Regional, and a partial closure or
restriction is treated as a full one.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from importlib import resources
from pathlib import Path

from .core import (
    FLIGHT_DOMESTIC,
    FLIGHT_INTERNATIONAL,
    FLIGHT_REGIONAL,
    FLIGHT_TYPES,
    REGION_BOTH,
    REGION_LANDINGS,
    REGION_TAKEOFFS,
    STATUS_CLOSED,
    STATUS_LIMITED,
    STATUS_OPEN,
    Notam,
    NotamError,
    StructuredRecord,
    decode_qcode,
    expand_runway_designators,
)

FT_TO_M = 0.3048

RUNWAY_TOKEN_RE = re.compile(
    r"\b(?:RWY|RUNWAY)\s*([0-3]?\d[LRC]?(?:/[0-3]?\d[LRC]?)*)", re.IGNORECASE
)

_WINGSPAN_RE = re.compile(
    r"WINGSPAN\s+(?:ABOVE|OVER|MORE THAN|EXCEEDING|UP TO|MAX|LESS THAN)?\s*"
    r"(\d+(?:\.\d+)?)\s*(FT|M)\b",
    re.IGNORECASE,
)
_CODE_RE = re.compile(r"\bCODE\s+([A-F](?:/[A-F])*)\b", re.IGNORECASE)

# Subject families the runway rule set must skip (taxiway/apron/lighting).
_EXCLUDED_SUBJECTS = {"MX", "MN", "MK", "ML", "MS", "LA", "LR", "LC", "LT"}
_EXCLUDED_BODY_RE = re.compile(r"\b(TWY|TAXIWAY|APRON|STAND|ALS|APCH LGT|LGT)\b", re.IGNORECASE)
_AIRPORT_WIDE_RE = re.compile(r"\b(AIRPORT|AERODROME|AD)\b", re.IGNORECASE)


class NonPositiveValue(NotamError):
    """Wingspan conversion requires a strictly positive value."""


class RuleSetError(NotamError):
    """Rule set file is malformed or violates keyword disjointness."""


@dataclass(frozen=True)
class RuleSet:
    """Keyword tables driving the baseline; lists must be pairwise disjoint."""

    closed_keywords: tuple[str, ...]
    limited_keywords: tuple[str, ...]
    open_keywords: tuple[str, ...]
    region_keywords: tuple[tuple[str, str], ...]
    ft_to_m_factor: float = FT_TO_M

    def __post_init__(self):
        lists = {
            "closed": {k.upper() for k in self.closed_keywords},
            "limited": {k.upper() for k in self.limited_keywords},
            "open": {k.upper() for k in self.open_keywords},
        }
        names = list(lists)
        for i, a in enumerate(names):
            for b in names[i + 1 :]:
                overlap = lists[a] & lists[b]
                if overlap:
                    raise RuleSetError(f"keywords shared between {a} and {b}: {sorted(overlap)}")
        if self.ft_to_m_factor != FT_TO_M:
            raise RuleSetError(f"ft_to_m_factor must be {FT_TO_M}, got {self.ft_to_m_factor}")


def load_ruleset(path: str | Path | None = None) -> RuleSet:
    """Load keyword lists from a sectioned text file (bundled default when None)."""
    if path is None:
        text = resources.files("notamkit.data").joinpath("ruleset.txt").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    sections: dict[str, list[str]] = {"closed": [], "limited": [], "open": [], "region": []}
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].lower()
            if current not in sections:
                raise RuleSetError(f"line {lineno}: unknown section {current!r}")
            continue
        if current is None:
            raise RuleSetError(f"line {lineno}: keyword outside a section")
        sections[current].append(line.upper())
    region_pairs = []
    for entry in sections["region"]:
        if "=" not in entry:
            raise RuleSetError(f"region mapping needs PHRASE=REGION, got {entry!r}")
        phrase, region = (p.strip() for p in entry.split("=", 1))
        if region not in (REGION_TAKEOFFS, REGION_LANDINGS, REGION_BOTH):
            raise RuleSetError(f"unknown region {region!r}")
        region_pairs.append((phrase, region))
    return RuleSet(
        closed_keywords=tuple(sections["closed"]),
        limited_keywords=tuple(sections["limited"]),
        open_keywords=tuple(sections["open"]),
        region_keywords=tuple(region_pairs),
    )


_DEFAULT_RULESET: RuleSet | None = None


def default_ruleset() -> RuleSet:
    global _DEFAULT_RULESET
    if _DEFAULT_RULESET is None:
        _DEFAULT_RULESET = load_ruleset()
    return _DEFAULT_RULESET


def _phrase_match(body: str, phrase: str) -> bool:
    return re.search(rf"(?<![A-Z0-9]){re.escape(phrase)}(?![A-Z0-9])", body, re.IGNORECASE) is not None


def classify_status(body: str, ruleset: RuleSet | None = None) -> str | None:
    """Classify an E-field body as Closed, Limited or Open; None when no keyword fires.

    Priority is Closed > Limited > Open, so a body carrying both a closure and
    a reopening keyword stays Closed.
    """
    rs = ruleset or default_ruleset()
    for status, keywords in (
        (STATUS_CLOSED, rs.closed_keywords),
        (STATUS_LIMITED, rs.limited_keywords),
        (STATUS_OPEN, rs.open_keywords),
    ):
        if any(_phrase_match(body, kw) for kw in keywords):
            return status
    return None


def convert_wingspan(value: float, unit: str) -> float:
    """Convert a wingspan to meters (FT * 0.3048), rounded half-up to 2 decimals."""
    if value <= 0:
        raise NonPositiveValue(f"wingspan must be positive, got {value}")
    unit = unit.strip().upper()
    if unit not in ("FT", "M"):
        raise NotamError(f"unknown wingspan unit {unit!r}")
    meters = Decimal(repr(value)) * (Decimal("0.3048") if unit == "FT" else Decimal(1))
    return float(meters.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def apply_defaults(draft: dict) -> StructuredRecord:
    """Fill a partial record draft with the standard defaults."""
    filled = dict(draft)
    filled.setdefault("affect_region", REGION_BOTH)
    if filled.get("affect_region") is None:
        filled["affect_region"] = REGION_BOTH
    if not filled.get("flight_type"):
        filled["flight_type"] = FLIGHT_TYPES
    filled.setdefault("affect_actype", None)
    return StructuredRecord(
        airport=filled["airport"],
        runway=filled.get("runway", ""),
        affect_actype=filled.get("affect_actype"),
        affect_region=filled["affect_region"],
        flight_type=filled["flight_type"],
        status=filled.get("status"),
    )


def detect_region(body: str, ruleset: RuleSet | None = None) -> str | None:
    rs = ruleset or default_ruleset()
    hits = {region for phrase, region in rs.region_keywords if _phrase_match(body, phrase)}
    if REGION_BOTH in hits or {REGION_TAKEOFFS, REGION_LANDINGS} <= hits:
        return REGION_BOTH
    if hits == {REGION_TAKEOFFS}:
        return REGION_TAKEOFFS
    if hits == {REGION_LANDINGS}:
        return REGION_LANDINGS
    return None


def detect_flight_types(body: str) -> tuple[str, ...] | None:
    for flight, phrase in (
        (FLIGHT_INTERNATIONAL, r"INTERNATIONAL\s+(?:FLT|FLIGHTS?)\s+ONLY"),
        (FLIGHT_DOMESTIC, r"DOMESTIC\s+(?:FLT|FLIGHTS?)\s+ONLY"),
        (FLIGHT_REGIONAL, r"REGIONAL\s+(?:FLT|FLIGHTS?)\s+ONLY"),
    ):
        if re.search(phrase, body, re.IGNORECASE):
            return (flight,)
    return None


def detect_actype(body: str) -> str | None:
    m = _WINGSPAN_RE.search(body)
    if m:
        meters = convert_wingspan(float(m.group(1)), m.group(2))
        return f"WINGSPAN {meters:.2f}M"
    m = _CODE_RE.search(body)
    if m:
        return f"CODE {m.group(1).upper()}"
    return None


def _out_of_scope(notam: Notam, has_runway_token: bool) -> bool:
    if has_runway_token:
        return False
    if notam.q_line is not None:
        try:
            info = decode_qcode(notam.q_line.qcode)
        except NotamError:
            info = None
        if info is not None and info.subject_letter_pair in _EXCLUDED_SUBJECTS:
            return True
        if info is not None and info.subject_letter_pair == "MR":
            return False
    return _EXCLUDED_BODY_RE.search(notam.body) is not None


def extract_records(
    notam: Notam,
    ruleset: RuleSet | None = None,
    include_status: bool = False,
) -> list[StructuredRecord]:
    """Run the full baseline: classify, find runways, expand, apply defaults.

    Returns an empty list when no status keyword fires or when the notice is
    out of scope (taxiway/apron/lighting with no runway token). An in-scope
    airport-wide notice with no runway token yields one record with an empty
    runway field.
    """
    rs = ruleset or default_ruleset()
    status = classify_status(notam.body, rs)
    if status is None or notam.location is None:
        return []

    designators: list[str] = []
    tokens = RUNWAY_TOKEN_RE.findall(notam.body)
    for token in tokens:
        designators.extend(expand_runway_designators(token))

    if _out_of_scope(notam, bool(designators)):
        return []

    region = detect_region(notam.body, rs)
    flights = detect_flight_types(notam.body)
    actype = detect_actype(notam.body)

    def build(runway: str) -> StructuredRecord:
        draft = {"airport": notam.location, "runway": runway}
        if region is not None:
            draft["affect_region"] = region
        if flights is not None:
            draft["flight_type"] = flights
        if actype is not None:
            draft["affect_actype"] = actype
        if include_status:
            draft["status"] = status
        return apply_defaults(draft)

    if designators:
        # Dedup repeated mentions, order preserved.
        seen: dict[str, None] = {}
        for d in designators:
            seen.setdefault(d, None)
        return [build(d) for d in seen]

    if _AIRPORT_WIDE_RE.search(notam.body) or (
        notam.q_line is not None and notam.q_line.qcode[1:3] in ("FA", "MR")
    ):
        return [build("")]
    return []
