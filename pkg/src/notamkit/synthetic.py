"""Seeded synthetic corpus generator for convergence runs.

Builds runway-closure notices whose gold records are recoverable from shared
relational features (runway appears in the body and in the retrieved
knowledge, default impact and flight types), so the log-linear policy can
reach perfect accuracy and the refinement loop has a clean convergence
target.
"""

from __future__ import annotations

import json
import random
from pathlib import Path

from .core import FLIGHT_TYPES, REGION_BOTH, NotamFixture, StructuredRecord, parse_notam

_RUNWAYS = ["09", "27", "18", "36", "04L", "22R", "13", "31", "07", "25", "16C", "34L"]
_BODY_TEMPLATES = [
    "RWY {rwy} CLSD DUE TO WIP",
    "RWY {rwy} CLOSED FOR MAINT",
    "RWY {rwy} NOT AVBL",
    "RWY {rwy} SUSPENDED UNTIL FURTHER NOTICE",
]
_QCODES = ["QMRLC", "QMRLC", "QMRXX", "QMRLC"]


def _airport_code(rng: random.Random, used: set[str]) -> str:
    letters = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    while True:
        code = "K" + "".join(rng.choice(letters) for _ in range(3))
        if code not in used:
            used.add(code)
            return code


def synthetic_corpus(n: int = 40, seed: int = 0):
    """Return (fixtures, graph_lines, table_lines) for n synthetic notices."""
    rng = random.Random(seed)
    used: set[str] = set()
    fixtures: list[NotamFixture] = []
    graph_lines: list[str] = []
    table_lines: list[str] = ["#keyed_by=icao", "icao,runway,length_m"]
    for index in range(n):
        airport = _airport_code(rng, used)
        rwy = _RUNWAYS[index % len(_RUNWAYS)]
        other = _RUNWAYS[(index + 5) % len(_RUNWAYS)]
        template = rng.randrange(len(_BODY_TEMPLATES))
        body = _BODY_TEMPLATES[template].format(rwy=rwy)
        raw = (
            f"Q)ZZZZ/{_QCODES[template]}/IV/NBO/A/000/999/ "
            f"A){airport} B)2401010000 C)2401020000 E) {body}"
        )
        gold = (
            StructuredRecord(
                airport=airport,
                runway=rwy,
                affect_actype=None,
                affect_region=REGION_BOTH,
                flight_type=FLIGHT_TYPES,
            ),
        )
        notam = parse_notam(raw, f"syn-{index:03d}")
        fixtures.append(NotamFixture(id=notam.id, raw_text=raw, gold=gold, notam=notam))

        graph_lines.append(json.dumps({"kind": "NODE", "id": airport, "label": "Airport", "props": {"icao": airport}}))
        for designator in dict.fromkeys((rwy, other)):
            node_id = f"RWY {designator}"
            graph_lines.append(json.dumps({"kind": "NODE", "id": node_id, "label": "Runway", "props": {"designator": designator}}))
            graph_lines.append(json.dumps({"kind": "EDGE", "from": airport, "relation": "HAS_RUNWAY", "to": node_id}))
            table_lines.append(f"{airport},{node_id},3000")
    return fixtures, graph_lines, table_lines


def write_synthetic_corpus(out_dir: str | Path, n: int = 40, seed: int = 0) -> dict[str, Path]:
    """Write notams.jsonl, graph.jsonl and tables/runways.csv under out_dir."""
    out = Path(out_dir)
    (out / "tables").mkdir(parents=True, exist_ok=True)
    fixtures, graph_lines, table_lines = synthetic_corpus(n=n, seed=seed)
    notams_path = out / "notams.jsonl"
    with notams_path.open("w", encoding="utf-8") as fh:
        for fixture in fixtures:
            fh.write(
                json.dumps(
                    {
                        "id": fixture.id,
                        "raw_text": fixture.raw_text,
                        "gold": [r.to_dict() for r in fixture.gold],
                    }
                )
                + "\n"
            )
    graph_path = out / "graph.jsonl"
    graph_path.write_text("\n".join(graph_lines) + "\n", encoding="utf-8")
    table_path = out / "tables" / "runways.csv"
    table_path.write_text("\n".join(table_lines) + "\n", encoding="utf-8")
    return {"notams": notams_path, "graph": graph_path, "tables": table_path}
