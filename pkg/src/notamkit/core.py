"""NOTAM domain model: field parsing, Q-code decoding, canonical record equality."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

PERM = "PERM"

REGION_TAKEOFFS = "TAKEOFFS"
REGION_LANDINGS = "LANDINGS"
REGION_BOTH = "TAKEOFFS,LANDINGS"
AFFECT_REGIONS = (REGION_TAKEOFFS, REGION_LANDINGS, REGION_BOTH)

FLIGHT_INTERNATIONAL = "International"
FLIGHT_DOMESTIC = "Domestic"
FLIGHT_REGIONAL = "Regional"
FLIGHT_TYPES = (FLIGHT_INTERNATIONAL, FLIGHT_DOMESTIC, FLIGHT_REGIONAL)

STATUS_CLOSED = "Closed"
STATUS_LIMITED = "Limited"
STATUS_OPEN = "Open"
STATUSES = (STATUS_CLOSED, STATUS_LIMITED, STATUS_OPEN)

_ICAO_RE = re.compile(r"^[A-Z]{4}$")
_QCODE_RE = re.compile(r"^Q[A-Z]{4}$")
_TIMESTAMP_RE = re.compile(r"^(\d{2})(\d{2})(\d{2})(\d{2})(\d{2})$")
_RUNWAY_RE = re.compile(r"^(RWY )?([0-3]?\d)([LRC]?)$")
_DESIGNATOR_RE = re.compile(r"^([0-3]?\d)([LRC]?)$")

# Field labels scanned in canonical ICAO order; out-of-order hits are free text.
_FIELD_ORDER = "QABCDEFG"
_FIELD_LABEL_RE = re.compile(r"(?<![A-Z0-9])([QABCDEFG])\s*\)")


class NotamError(Exception):
    """Base error for NOTAM parsing and record handling."""


class MissingEField(NotamError):
    """Raised when a notice carries no E) body segment."""


class MalformedField(NotamError):
    """A present field failed its format check."""

    def __init__(self, label: str, message: str = ""):
        self.label = label
        super().__init__(f"field {label}: {message}" if message else f"field {label}")


class MalformedQCode(NotamError):
    """Q-code does not match Q[A-Z]{4}."""


class NotARunwayToken(NotamError):
    """Segment contains no runway designator."""


class RecordInvariantError(NotamError):
    """A structured record violates a field invariant."""


@dataclass(frozen=True)
class QLine:
    """Decoded Q) line of a notice."""

    fir: str
    qcode: str
    traffic: tuple[str, ...]
    purpose: tuple[str, ...]
    scope: tuple[str, ...]
    lower_limit: int
    upper_limit: int
    coordinates_radius: str = ""


@dataclass(frozen=True)
class Notam:
    """One parsed notice; immutable after construction."""

    id: str
    raw_text: str
    body: str
    location: str | None = None
    valid_from: str | None = None
    valid_to: str | None = None
    q_line: QLine | None = None


@dataclass(frozen=True)
class QCodeInfo:
    subject_letter_pair: str
    subject_label: str
    condition_letter_pair: str
    condition_label: str
    area_letter: str
    area_label: str


@dataclass(frozen=True)
class QCodeLexicon:
    """Letter-pair lookup tables loaded from a versioned data file."""

    subjects: dict[str, str]
    conditions: dict[str, str]
    areas: dict[str, str]
    version: str = "unversioned"


def _normalize_runway(value: str) -> str:
    text = re.sub(r"\s+", " ", value.strip().upper())
    if not text:
        return ""
    m = _RUNWAY_RE.match(text)
    if m is None:
        raise RecordInvariantError(f"bad runway designator: {value!r}")
    prefix = "RWY " if m.group(1) else ""
    return f"{prefix}{int(m.group(2)):02d}{m.group(3)}"


def _normalize_flight_types(value) -> tuple[str, ...]:
    if isinstance(value, str):
        parts = [p.strip() for p in value.split(",") if p.strip()]
    else:
        parts = [str(p).strip() for p in value if str(p).strip()]
    known: list[str] = []
    extras: list[str] = []
    by_lower = {ft.lower(): ft for ft in FLIGHT_TYPES}
    for part in parts:
        canon = by_lower.get(part.lower())
        if canon is not None:
            if canon not in known:
                known.append(canon)
        elif part not in extras:
            extras.append(part)  # e.g. Chinese wording, passed through verbatim
    ordered = [ft for ft in FLIGHT_TYPES if ft in known] + extras
    if not ordered:
        raise RecordInvariantError("flight_type must be non-empty")
    return tuple(ordered)


def _normalize_region(value: str) -> str:
    text = re.sub(r"\s*,\s*", ",", value.strip().upper()).replace("TAKEOFFS_LANDINGS", REGION_BOTH)
    if text == "LANDINGS,TAKEOFFS":
        text = REGION_BOTH
    if text not in AFFECT_REGIONS:
        raise RecordInvariantError(f"bad affect_region: {value!r}")
    return text


@dataclass(frozen=True)
class StructuredRecord:
    """One row of extracted intelligence. Fields normalize on construction."""

    airport: str
    runway: str = ""
    affect_actype: str | None = None
    affect_region: str = REGION_BOTH
    flight_type: tuple[str, ...] = FLIGHT_TYPES
    status: str | None = None

    def __post_init__(self):
        airport = self.airport.strip().upper()
        if not _ICAO_RE.match(airport):
            raise RecordInvariantError(f"bad airport code: {self.airport!r}")
        object.__setattr__(self, "airport", airport)
        object.__setattr__(self, "runway", _normalize_runway(self.runway))
        actype = self.affect_actype
        if actype is not None:
            actype = re.sub(r"\s+", " ", str(actype).strip())
            if actype.lower() in ("", "null", "none"):
                actype = None
        object.__setattr__(self, "affect_actype", actype)
        object.__setattr__(self, "affect_region", _normalize_region(self.affect_region))
        object.__setattr__(self, "flight_type", _normalize_flight_types(self.flight_type))
        status = self.status
        if status is not None:
            status = status.strip().title()
            if status not in STATUSES:
                raise RecordInvariantError(f"bad status: {self.status!r}")
        object.__setattr__(self, "status", status)

    def to_dict(self) -> dict:
        out = {
            "airport": self.airport,
            "runway": self.runway,
            "affect_actype": self.affect_actype,
            "affect_region": self.affect_region,
            "flight_type": ",".join(self.flight_type),
        }
        if self.status is not None:
            out["status"] = self.status
        return out


def record_from_dict(data: dict) -> StructuredRecord:
    return StructuredRecord(
        airport=data["airport"],
        runway=data.get("runway", ""),
        affect_actype=data.get("affect_actype"),
        affect_region=data.get("affect_region", REGION_BOTH),
        flight_type=data.get("flight_type", FLIGHT_TYPES),
        status=data.get("status"),
    )


def _canonical_key(record: StructuredRecord) -> tuple:
    return (
        record.airport,
        record.runway,
        record.affect_region,
        record.flight_type,
        record.affect_actype or "",
        record.status or "",
    )


def canonical_records(records) -> tuple[StructuredRecord, ...]:
    """Sort records into canonical order (airport, runway first)."""
    return tuple(sorted(records, key=_canonical_key))


def records_equal(a, b) -> bool:
    """True iff the canonicalized record multisets are identical."""
    ka = [_canonical_key(r) for r in canonical_records(a)]
    kb = [_canonical_key(r) for r in canonical_records(b)]
    return ka == kb


def serialize_records(records) -> str:
    """Canonical byte-stable serialization used for equality keys and voting."""
    return json.dumps([r.to_dict() for r in canonical_records(records)], separators=(",", ":"))


def records_from_json(text: str) -> tuple[StructuredRecord, ...]:
    data = json.loads(text)
    if isinstance(data, dict):
        data = [data]
    return tuple(record_from_dict(item) for item in data)


def _validate_timestamp(label: str, value: str) -> str:
    m = _TIMESTAMP_RE.match(value)
    if m is None:
        raise MalformedField(label, f"expected YYMMDDHHMM, got {value!r}")
    _, mm, dd, hh, mi = (int(g) for g in m.groups())
    if not (1 <= mm <= 12 and 1 <= dd <= 31 and hh <= 23 and mi <= 59):
        raise MalformedField(label, f"implausible timestamp {value!r}")
    return value


def _parse_qline(content: str) -> QLine:
    text = re.sub(r"\s+", " ", content.strip())
    parts = [p.strip() for p in text.split("/")]
    if len(parts) < 7:
        raise MalformedField("Q", f"expected 7+ segments, got {len(parts)}")
    fir, qcode, traffic, purpose, scope = parts[0], parts[1], parts[2], parts[3], parts[4]
    if not _ICAO_RE.match(fir):
        raise MalformedField("Q", f"bad FIR {fir!r}")
    if not _QCODE_RE.match(qcode):
        raise MalformedField("Q", f"bad Q-code {qcode!r}")
    for name, value, allowed in (
        ("traffic", traffic, "IV"),
        ("purpose", purpose, "NBOM"),
        ("scope", scope, "AEW"),
    ):
        if any(ch not in allowed for ch in value):
            raise MalformedField("Q", f"bad {name} {value!r}")
    if not (parts[5].isdigit() and parts[6].isdigit()):
        raise MalformedField("Q", f"bad limits {parts[5]!r}/{parts[6]!r}")
    lower, upper = int(parts[5]), int(parts[6])
    if lower > upper:
        raise MalformedField("Q", f"lower limit {lower} above upper {upper}")
    coords = "/".join(parts[7:]).strip()
    return QLine(
        fir=fir,
        qcode=qcode,
        traffic=tuple(traffic),
        purpose=tuple(purpose),
        scope=tuple(scope),
        lower_limit=lower,
        upper_limit=upper,
        coordinates_radius=coords,
    )


def _scan_fields(raw: str) -> dict[str, str]:
    accepted: list[tuple[int, int, str]] = []
    last_index = -1
    for m in _FIELD_LABEL_RE.finditer(raw):
        index = _FIELD_ORDER.index(m.group(1))
        if index <= last_index:
            continue
        accepted.append((m.start(), m.end(), m.group(1)))
        last_index = index
    fields: dict[str, str] = {}
    for i, (_, end, label) in enumerate(accepted):
        stop = accepted[i + 1][0] if i + 1 < len(accepted) else len(raw)
        fields[label] = raw[end:stop].strip()
    return fields


def parse_notam(raw: str, id: str) -> Notam:
    """Parse a raw notice into a Notam.

    Accepts "A)" and "A )" delimiters; the E field runs to the next F)/G)
    label or end of text. Raises MissingEField when no E) segment exists and
    MalformedField when a present field fails its format.
    """
    if not raw or not raw.strip():
        raise MissingEField("empty notice")
    fields = _scan_fields(raw)
    if "E" not in fields:
        raise MissingEField(f"no E) segment in notice {id}")
    body = re.sub(r"\s+", " ", fields["E"]).strip()
    if not body:
        raise MissingEField(f"empty E) segment in notice {id}")

    location = None
    if "A" in fields:
        token = fields["A"].split()[0] if fields["A"].split() else ""
        if not _ICAO_RE.match(token):
            raise MalformedField("A", f"bad location {fields['A']!r}")
        location = token

    valid_from = None
    if "B" in fields:
        valid_from = _validate_timestamp("B", fields["B"].split()[0] if fields["B"] else "")

    valid_to = None
    if "C" in fields:
        token = fields["C"].split()[0] if fields["C"] else ""
        valid_to = token if token == PERM else _validate_timestamp("C", token)

    if valid_from and valid_to and valid_to != PERM and valid_from > valid_to:
        raise MalformedField("C", f"validity window inverted: {valid_from} > {valid_to}")

    q_line = _parse_qline(fields["Q"]) if "Q" in fields else None

    return Notam(
        id=id,
        raw_text=raw,
        body=body,
        location=location,
        valid_from=valid_from,
        valid_to=valid_to,
        q_line=q_line,
    )


def render_notam(notam: Notam) -> str:
    """Render a Notam back to canonical field text; parse_notam inverts this."""
    parts = []
    if notam.q_line is not None:
        q = notam.q_line
        parts.append(
            "Q){}/{}/{}/{}/{}/{:03d}/{:03d}/{}".format(
                q.fir, q.qcode, "".join(q.traffic), "".join(q.purpose),
                "".join(q.scope), q.lower_limit, q.upper_limit, q.coordinates_radius,
            )
        )
    if notam.location is not None:
        parts.append(f"A){notam.location}")
    if notam.valid_from is not None:
        parts.append(f"B){notam.valid_from}")
    if notam.valid_to is not None:
        parts.append(f"C){notam.valid_to}")
    parts.append(f"E){notam.body}")
    return " ".join(parts)


def notam_to_dict(notam: Notam) -> dict:
    out = {
        "id": notam.id,
        "location": notam.location,
        "valid_from": notam.valid_from,
        "valid_to": notam.valid_to,
        "body": notam.body,
    }
    if notam.q_line is not None:
        q = notam.q_line
        out["q_line"] = {
            "fir": q.fir,
            "qcode": q.qcode,
            "traffic": "".join(q.traffic),
            "purpose": "".join(q.purpose),
            "scope": "".join(q.scope),
            "lower_limit": q.lower_limit,
            "upper_limit": q.upper_limit,
            "coordinates_radius": q.coordinates_radius,
        }
    else:
        out["q_line"] = None
    return out


def _data_text(name: str) -> str:
    return resources.files("notamkit.data").joinpath(name).read_text(encoding="utf-8")


def load_qcode_lexicon(path: str | Path | None = None) -> QCodeLexicon:
    """Load the Q-code letter-pair lexicon (bundled file when path is None)."""
    text = Path(path).read_text(encoding="utf-8") if path else _data_text("qcode_lexicon.tsv")
    subjects: dict[str, str] = {}
    conditions: dict[str, str] = {}
    areas: dict[str, str] = {}
    version = "unversioned"
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            if line.startswith("#version="):
                version = line.split("=", 1)[1].strip()
            continue
        cols = line.split("\t")
        if len(cols) != 3:
            raise MalformedField("lexicon", f"line {lineno}: expected 3 columns")
        pair, kind, label = (c.strip() for c in cols)
        if kind == "subject":
            subjects[pair] = label
        elif kind == "condition":
            conditions[pair] = label
        elif kind == "area":
            areas[pair] = label
        else:
            raise MalformedField("lexicon", f"line {lineno}: unknown kind {kind!r}")
    return QCodeLexicon(subjects=subjects, conditions=conditions, areas=areas, version=version)


_DEFAULT_LEXICON: QCodeLexicon | None = None


def default_lexicon() -> QCodeLexicon:
    global _DEFAULT_LEXICON
    if _DEFAULT_LEXICON is None:
        _DEFAULT_LEXICON = load_qcode_lexicon()
    return _DEFAULT_LEXICON


def decode_qcode(code: str, lexicon: QCodeLexicon | None = None) -> QCodeInfo:
    """Decode a 5-letter Q-code; unknown pairs map to "UNKNOWN" labels."""
    if not _QCODE_RE.match(code or ""):
        raise MalformedQCode(f"expected Q[A-Z]{{4}}, got {code!r}")
    lex = lexicon or default_lexicon()
    subject = code[1:3]
    condition = code[3:5]
    return QCodeInfo(
        subject_letter_pair=subject,
        subject_label=lex.subjects.get(subject, "UNKNOWN"),
        condition_letter_pair=condition,
        condition_label=lex.conditions.get(condition, "UNKNOWN"),
        area_letter=subject[0],
        area_label=lex.areas.get(subject[0], "UNKNOWN"),
    )


def expand_runway_designators(segment: str) -> list[str]:
    """Split a runway token like "17L/35R" into normalized designators."""
    text = re.sub(r"\s+", " ", segment.strip().upper())
    text = re.sub(r"^(RWY|RUNWAY)\s*", "", text)
    if not text:
        raise NotARunwayToken(f"no designator in {segment!r}")
    designators = []
    for part in text.split("/"):
        m = _DESIGNATOR_RE.match(part.strip())
        if m is None:
            raise NotARunwayToken(f"bad designator {part!r} in {segment!r}")
        designators.append(f"{int(m.group(1)):02d}{m.group(2)}")
    return designators


@dataclass(frozen=True)
class NotamFixture:
    """One labelled corpus entry: raw notice plus the gold record list."""

    id: str
    raw_text: str
    gold: tuple[StructuredRecord, ...]
    notam: Notam


def load_notam_fixtures(path: str | Path) -> list[NotamFixture]:
    """Load a line-delimited fixture file of {id, raw_text, gold} records."""
    fixtures = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedField("fixture", f"line {lineno}: {exc}") from exc
        gold = tuple(record_from_dict(r) for r in data.get("gold", []))
        notam = parse_notam(data["raw_text"], data["id"])
        fixtures.append(NotamFixture(id=data["id"], raw_text=data["raw_text"], gold=gold, notam=notam))
    return fixtures
