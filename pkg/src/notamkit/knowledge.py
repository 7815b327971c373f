"""Aeronautical knowledge store: typed graph, reference tables, retrieval.

The retrieval pipeline mirrors graph-then-table grounding: derive a pattern
from the notice's entities, query the graph, render the bindings as fact
sentences, then use entities plus rendered facts as keys into the tables'
keyed columns. Every returned fact carries provenance back to a file line or
rule id.
"""

from __future__ import annotations

import itertools
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .core import Notam, NotamError, decode_qcode

_NUMERIC_RE = re.compile(r"^-?\d+(\.\d+)?$")


class KnowledgeError(NotamError):
    """Base error for knowledge files and queries."""


class FormatError(KnowledgeError):
    def __init__(self, file: str, line: int, message: str):
        self.file = file
        self.line = line
        super().__init__(f"{file}:{line}: {message}")


class DanglingEdge(KnowledgeError):
    def __init__(self, edge: "Edge"):
        self.edge = edge
        super().__init__(f"edge references missing node: {edge.from_id} -{edge.relation}-> {edge.to_id}")


class PatternError(KnowledgeError):
    """Graph pattern violates its variable-declaration invariants."""


@dataclass(frozen=True)
class Node:
    id: str
    label: str
    props: tuple[tuple[str, str], ...] = ()

    def prop(self, key: str) -> str | None:
        for k, v in self.props:
            if k == key:
                return v
        return None


@dataclass(frozen=True)
class Edge:
    from_id: str
    relation: str
    to_id: str
    source: str = field(default="", compare=False)


class KnowledgeGraph:
    """Immutable-after-load entity/relation store with label and edge indices."""

    def __init__(self, nodes: list[Node], edges: list[Edge]):
        self.nodes: dict[str, Node] = {}
        for node in nodes:
            self.nodes[node.id] = node
        seen: set[tuple[str, str, str]] = set()
        kept: list[Edge] = []
        for edge in edges:
            if edge.from_id not in self.nodes or edge.to_id not in self.nodes:
                raise DanglingEdge(edge)
            triple = (edge.from_id, edge.relation, edge.to_id)
            if triple in seen:
                continue
            seen.add(triple)
            kept.append(edge)
        self.edges: tuple[Edge, ...] = tuple(kept)
        self._by_label: dict[str, list[str]] = {}
        for node_id in sorted(self.nodes):
            self._by_label.setdefault(self.nodes[node_id].label, []).append(node_id)
        self._out: dict[str, list[Edge]] = {}
        for edge in self.edges:
            self._out.setdefault(edge.from_id, []).append(edge)

    def nodes_by_label(self, label: str | None) -> list[str]:
        if label is None:
            return sorted(self.nodes)
        return list(self._by_label.get(label, []))

    def out_edges(self, node_id: str, relation: str | None = None) -> list[Edge]:
        edges = self._out.get(node_id, [])
        if relation is None:
            return sorted(edges, key=lambda e: (e.relation, e.to_id))
        return sorted((e for e in edges if e.relation == relation), key=lambda e: e.to_id)

    def find_airport(self, icao: str) -> Node | None:
        node = self.nodes.get(icao)
        if node is not None and node.label == "Airport":
            return node
        for node_id in self.nodes_by_label("Airport"):
            if self.nodes[node_id].prop("icao") == icao:
                return self.nodes[node_id]
        return None


@dataclass(frozen=True)
class ReferenceTable:
    name: str
    columns: tuple[str, ...]
    rows: tuple[tuple[str, ...], ...]
    keyed_by: tuple[str, ...]

    def __post_init__(self):
        for row in self.rows:
            if len(row) != len(self.columns):
                raise KnowledgeError(f"table {self.name}: row arity {len(row)} != {len(self.columns)}")
        for key in self.keyed_by:
            if key not in self.columns:
                raise KnowledgeError(f"table {self.name}: keyed_by column {key!r} missing")

    def column_index(self, name: str) -> int:
        return self.columns.index(name)


@dataclass(frozen=True)
class NodeConstraint:
    var: str
    label: str | None = None
    props: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class EdgeConstraint:
    src: str
    relation: str | None
    dst: str


@dataclass(frozen=True)
class GraphPattern:
    """Conjunctive single-hop pattern: label + property filters + edges."""

    nodes: tuple[NodeConstraint, ...]
    edges: tuple[EdgeConstraint, ...] = ()
    returns: tuple[str, ...] = ()

    def __post_init__(self):
        declared = {c.var for c in self.nodes}
        if len(declared) != len(self.nodes):
            raise PatternError("duplicate pattern variable")
        for edge in self.edges:
            if edge.src not in declared or edge.dst not in declared:
                raise PatternError(f"edge uses undeclared variable: {edge}")
        for var in self.returns:
            if var not in declared:
                raise PatternError(f"return of undeclared variable {var!r}")


@dataclass(frozen=True)
class Fact:
    """One extracted or derived fact with provenance."""

    subject: str
    name: str
    value: str | float
    provenance: str = ""


@dataclass(frozen=True)
class SchemaRule:
    """Range guard over a named numeric fact; fires a derived fact."""

    id: str
    family: str
    fact_name: str
    min_value: float
    max_value: float  # exclusive upper bound
    derive_name: str
    derive_value: str

    def fires(self, value: float) -> bool:
        return self.min_value <= value < self.max_value


@dataclass(frozen=True)
class KnowledgeBundle:
    """Retrieved knowledge for one notice: rendered facts, table rows, provenance."""

    graph_facts: tuple[str, ...] = ()
    edges: tuple[tuple[str, str, str], ...] = ()
    table_rows: tuple[tuple[str, tuple[tuple[str, str], ...]], ...] = ()
    provenance: tuple[tuple[str, str], ...] = ()
    flags: tuple[str, ...] = ()

    def runways(self) -> tuple[str, ...]:
        return tuple(obj for _, rel, obj in self.edges if rel == "HAS_RUNWAY")

    def fact_lines(self) -> tuple[str, ...]:
        rows = tuple(
            f"{table} " + " ".join(f"{k}={v}" for k, v in row) for table, row in self.table_rows
        )
        return self.graph_facts + rows


EMPTY_BUNDLE = KnowledgeBundle()


def load_graph(path: str | Path) -> KnowledgeGraph:
    """Load a line-delimited graph file of NODE and EDGE records."""
    nodes: list[Node] = []
    edges: list[Edge] = []
    fname = str(path)
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(fname, lineno, f"bad JSON: {exc.msg}") from exc
        kind = data.get("kind")
        if kind == "NODE":
            if "id" not in data or "label" not in data:
                raise FormatError(fname, lineno, "NODE needs id and label")
            props = tuple(sorted((str(k), str(v)) for k, v in data.get("props", {}).items()))
            nodes.append(Node(id=str(data["id"]), label=str(data["label"]), props=props))
        elif kind == "EDGE":
            missing = [k for k in ("from", "relation", "to") if k not in data]
            if missing:
                raise FormatError(fname, lineno, f"EDGE missing {missing}")
            edges.append(
                Edge(
                    from_id=str(data["from"]),
                    relation=str(data["relation"]),
                    to_id=str(data["to"]),
                    source=f"{fname}:{lineno}",
                )
            )
        else:
            raise FormatError(fname, lineno, f"unknown record kind {kind!r}")
    return KnowledgeGraph(nodes, edges)


def load_table(path: str | Path) -> ReferenceTable:
    """Load a delimited table: '#keyed_by=' metadata line, header row, data rows."""
    fname = str(path)
    keyed_by: tuple[str, ...] = ()
    columns: tuple[str, ...] | None = None
    rows: list[tuple[str, ...]] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        if line.startswith("#"):
            if line.startswith("#keyed_by="):
                keyed_by = tuple(c.strip() for c in line.split("=", 1)[1].split(",") if c.strip())
            continue
        cells = tuple(c.strip() for c in line.split(","))
        if columns is None:
            columns = cells
            continue
        if len(cells) != len(columns):
            raise FormatError(fname, lineno, f"row arity {len(cells)} != header {len(columns)}")
        rows.append(cells)
    if columns is None:
        raise FormatError(fname, 1, "missing header row")
    if not keyed_by:
        raise FormatError(fname, 1, "missing #keyed_by= metadata line")
    name = Path(path).stem
    try:
        return ReferenceTable(name=name, columns=columns, rows=tuple(rows), keyed_by=keyed_by)
    except KnowledgeError as exc:
        raise FormatError(fname, 1, str(exc)) from exc


def load_knowledge(graph_file: str | Path, table_files: list[str | Path]):
    graph = load_graph(graph_file)
    tables = [load_table(p) for p in table_files]
    return graph, tables


def load_schema_rules(path: str | Path | None = None) -> list[SchemaRule]:
    """Load schema rules; validates that ranges within a family do not overlap."""
    if path is None:
        text = resources.files("notamkit.data").joinpath("schema_rules.jsonl").read_text(encoding="utf-8")
        fname = "notamkit.data/schema_rules.jsonl"
    else:
        text = Path(path).read_text(encoding="utf-8")
        fname = str(path)
    rules: list[SchemaRule] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(fname, lineno, f"bad JSON: {exc.msg}") from exc
        try:
            rules.append(
                SchemaRule(
                    id=str(data["id"]),
                    family=str(data.get("family", data["id"])),
                    fact_name=str(data["fact"]),
                    min_value=float(data.get("min", float("-inf"))),
                    max_value=float(data.get("max", float("inf"))),
                    derive_name=str(data["derive_name"]),
                    derive_value=str(data["derive_value"]),
                )
            )
        except (KeyError, ValueError) as exc:
            raise FormatError(fname, lineno, f"bad rule: {exc}") from exc
    by_family: dict[str, list[SchemaRule]] = {}
    for rule in rules:
        by_family.setdefault(rule.family, []).append(rule)
    for family, members in by_family.items():
        for a, b in itertools.combinations(members, 2):
            if a.min_value < b.max_value and b.min_value < a.max_value:
                raise FormatError(fname, 1, f"overlapping guards in family {family!r}: {a.id}, {b.id}")
    return rules


def default_schema_rules() -> list[SchemaRule]:
    return load_schema_rules()


def query_graph(graph: KnowledgeGraph, pattern: GraphPattern) -> list[dict[str, str]]:
    """All variable bindings satisfying the pattern, sorted by bound node ids."""
    candidate_lists: list[list[str]] = []
    for constraint in pattern.nodes:
        candidates = []
        for node_id in graph.nodes_by_label(constraint.label):
            node = graph.nodes[node_id]
            if all(node.prop(k) == v for k, v in constraint.props):
                candidates.append(node_id)
        candidate_lists.append(sorted(candidates))

    edge_index = {(e.from_id, e.relation, e.to_id) for e in graph.edges}
    any_index = {(e.from_id, e.to_id) for e in graph.edges}
    variables = [c.var for c in pattern.nodes]
    results: list[dict[str, str]] = []
    for assignment in itertools.product(*candidate_lists):
        binding = dict(zip(variables, assignment))
        ok = True
        for edge in pattern.edges:
            src, dst = binding[edge.src], binding[edge.dst]
            if edge.relation is None:
                if (src, dst) not in any_index:
                    ok = False
                    break
            elif (src, edge.relation, dst) not in edge_index:
                ok = False
                break
        if ok:
            returns = pattern.returns or tuple(variables)
            results.append({var: binding[var] for var in returns})
    return results


def derive_pattern(notam: Notam) -> GraphPattern:
    """One-hop pattern anchored at the notice's airport: (a:Airport)-[*]->(x)."""
    props = (("icao", notam.location),) if notam.location else ()
    return GraphPattern(
        nodes=(NodeConstraint("a", "Airport", props), NodeConstraint("x")),
        edges=(EdgeConstraint("a", None, "x"),),
        returns=("a", "x"),
    )


def _subject_label(notam: Notam) -> str | None:
    if notam.q_line is None:
        return None
    try:
        info = decode_qcode(notam.q_line.qcode)
    except NotamError:
        return None
    return None if info.subject_label == "UNKNOWN" else info.subject_label


def kg_tablerag_retrieve(
    notam: Notam,
    graph: KnowledgeGraph,
    tables: list[ReferenceTable],
) -> KnowledgeBundle:
    """Graph-then-table retrieval producing the knowledge bundle for one notice.

    An airport missing from the graph yields an empty bundle flagged
    UNKNOWN_AIRPORT rather than an error.
    """
    airport = graph.find_airport(notam.location) if notam.location else None
    if airport is None:
        return KnowledgeBundle(flags=("UNKNOWN_AIRPORT",))

    bindings = query_graph(graph, derive_pattern(notam))
    facts: list[str] = []
    edges: list[tuple[str, str, str]] = []
    provenance: list[tuple[str, str]] = []
    for binding in bindings:
        for edge in graph.out_edges(binding["a"]):
            if edge.to_id != binding["x"]:
                continue
            sentence = f"{edge.from_id} {edge.relation} {edge.to_id}".upper()
            if sentence in facts:
                continue
            facts.append(sentence)
            edges.append((edge.from_id, edge.relation, edge.to_id))
            provenance.append((sentence, edge.source or "graph"))

    keys = {notam.location.upper()}
    subject = _subject_label(notam)
    if subject is not None:
        keys.add(subject.upper())
    for _, _, obj in edges:
        keys.add(obj.upper())
    keyed_values = {
        str(row[table.column_index(col)]).upper()
        for table in tables
        for col in table.keyed_by
        for row in table.rows
    }
    for token in notam.body.upper().split():
        if token in keyed_values:
            keys.add(token)

    table_rows: list[tuple[str, tuple[tuple[str, str], ...]]] = []
    for table in tables:
        for row_index, row in enumerate(table.rows):
            hit = any(str(row[table.column_index(col)]).upper() in keys for col in table.keyed_by)
            if hit:
                rendered = tuple(zip(table.columns, row))
                table_rows.append((table.name, rendered))
                provenance.append((f"{table.name}[{row_index}]", f"{table.name}:{row_index}"))

    return KnowledgeBundle(
        graph_facts=tuple(facts),
        edges=tuple(edges),
        table_rows=tuple(table_rows),
        provenance=tuple(provenance),
    )


def infer_schema_facts(
    facts: list[Fact],
    rules: list[SchemaRule],
    graph: KnowledgeGraph | None = None,
) -> list[Fact]:
    """Fire every rule whose guard holds; runs to fixpoint so it is idempotent.

    Includes the built-in propagation rule: a Closed airport closes every
    HAS_RUNWAY target.
    """
    known = {(f.subject, f.name, str(f.value)) for f in facts}
    derived: list[Fact] = []
    frontier = list(facts)
    for _ in range(32):  # fixpoint; depth bounded by rule chain length
        new: list[Fact] = []
        for fact in frontier:
            value = fact.value
            numeric = isinstance(value, (int, float)) or (
                isinstance(value, str) and _NUMERIC_RE.match(value)
            )
            if numeric:
                number = float(value)
                for rule in rules:
                    if rule.fact_name == fact.name and rule.fires(number):
                        new.append(
                            Fact(fact.subject, rule.derive_name, rule.derive_value, f"rule:{rule.id}")
                        )
            if graph is not None and fact.name == "status" and str(fact.value) == "Closed":
                anchor = graph.find_airport(str(fact.subject))
                node_id = anchor.id if anchor is not None else str(fact.subject)
                for edge in graph.out_edges(node_id, "HAS_RUNWAY"):
                    new.append(Fact(edge.to_id, "status", "Closed", "rule:closed-airport-propagates"))
        frontier = []
        for fact in new:
            key = (fact.subject, fact.name, str(fact.value))
            if key in known:
                continue
            known.add(key)
            derived.append(fact)
            frontier.append(fact)
        if not frontier:
            break
    return derived


_LIGHTING_LENGTH_RE = re.compile(r"REDUCED LENGTH OF (\d+(?:\.\d+)?)\s*M\b", re.IGNORECASE)
_LIGHTING_CONTEXT_RE = re.compile(r"\b(ALS|APCH LGT|APPROACH LIGHT(?:ING)?|LGT SYS)\b", re.IGNORECASE)


def extract_numeric_facts(notam: Notam) -> list[Fact]:
    """Pull schema-relevant numeric facts out of a notice body."""
    facts: list[Fact] = []
    if _LIGHTING_CONTEXT_RE.search(notam.body):
        m = _LIGHTING_LENGTH_RE.search(notam.body)
        if m:
            facts.append(
                Fact(
                    subject=notam.location or "UNKNOWN",
                    name="approach_lighting_length_m",
                    value=float(m.group(1)),
                    provenance=f"notam:{notam.id}",
                )
            )
    return facts
