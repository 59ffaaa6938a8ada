"""Typed, directed knowledge graphs: data model, edge-list I/O and sampling."""

from __future__ import annotations

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple

import numpy as np

from .errors import InputError, ParseError

log = logging.getLogger(__name__)

NO_CLASS = "-"


class Edge(NamedTuple):
    """A directed edge ``src --rel--> dst``."""

    src: str
    dst: str
    rel: str


@dataclass(frozen=True, slots=True)
class Vertex:
    id: str
    entity_class: str | None = None


class KnowledgeGraph:
    """Immutable typed multigraph with adjacency indices by source, target and relation.

    Edges are stored sorted, which makes every derived structure (indices,
    sampling order, serialization) independent of insertion order.
    """

    def __init__(
        self,
        vertices: Mapping[str, str | None] | Iterable[str],
        edges: Iterable[Edge | tuple[str, str, str]],
    ):
        if isinstance(vertices, Mapping):
            classes = dict(vertices)
        else:
            classes = {v: None for v in vertices}
        edge_set: set[Edge] = set()
        for e in edges:
            e = Edge(*e)
            for end in (e.src, e.dst):
                if end not in classes:
                    raise InputError(f"edge {e} references unknown vertex {end!r}")
            if e.src == e.dst:
                raise InputError(f"self-loop {e} is not allowed")
            edge_set.add(e)
        self._classes = classes
        self._edges = tuple(sorted(edge_set))
        self._edge_set = frozenset(self._edges)

        by_src: dict[str, list[Edge]] = defaultdict(list)
        by_dst: dict[str, list[Edge]] = defaultdict(list)
        by_rel: dict[str, list[Edge]] = defaultdict(list)
        for e in self._edges:
            by_src[e.src].append(e)
            by_dst[e.dst].append(e)
            by_rel[e.rel].append(e)
        self._by_src = {k: tuple(v) for k, v in by_src.items()}
        self._by_dst = {k: tuple(v) for k, v in by_dst.items()}
        self._by_rel = {k: tuple(v) for k, v in sorted(by_rel.items())}
        self._out_deg = Counter((e.src, e.rel) for e in self._edges)

    # -- basic accessors -------------------------------------------------
    @property
    def vertex_ids(self) -> list[str]:
        return sorted(self._classes)

    @property
    def vertices(self) -> list[Vertex]:
        return [Vertex(v, self._classes[v]) for v in self.vertex_ids]

    @property
    def edges(self) -> tuple[Edge, ...]:
        return self._edges

    @property
    def relations(self) -> list[str]:
        return list(self._by_rel)

    @property
    def entity_classes(self) -> dict[str, str | None]:
        return dict(self._classes)

    def entity_class(self, v: str) -> str | None:
        self._check_vertex(v)
        return self._classes[v]

    def __contains__(self, item) -> bool:
        if isinstance(item, Edge) or (isinstance(item, tuple) and len(item) == 3):
            return Edge(*item) in self._edge_set
        return item in self._classes

    def __len__(self) -> int:
        return len(self._classes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return self._classes == other._classes and self._edges == other._edges

    def __repr__(self) -> str:
        return (
            f"KnowledgeGraph({len(self._classes)} vertices, {len(self._edges)} edges, "
            f"{len(self._by_rel)} relations)"
        )

    def edges_of(self, rel: str) -> tuple[Edge, ...]:
        return self._by_rel.get(rel, ())

    def out_edges(self, v: str) -> tuple[Edge, ...]:
        return self._by_src.get(v, ())

    def in_edges(self, v: str) -> tuple[Edge, ...]:
        return self._by_dst.get(v, ())

    def relation_signature(self, rel: str) -> set[tuple[str | None, str | None]]:
        """Distinct ``(source class, target class)`` pairs used by ``rel``."""
        return {(self._classes[e.src], self._classes[e.dst]) for e in self.edges_of(rel)}

    def _check_vertex(self, v: str) -> None:
        if v not in self._classes:
            raise InputError(f"unknown vertex {v!r}")


def out_degree(g: KnowledgeGraph, i: str, r: str) -> int:
    """Number of ``r``-edges leaving vertex ``i``."""
    g._check_vertex(i)
    return g._out_deg.get((i, r), 0)


def remove_relation(g: KnowledgeGraph, r: str) -> KnowledgeGraph:
    """Copy of ``g`` without any ``r`` edges; the vertex set is kept intact."""
    if r not in g._by_rel:
        raise InputError(f"unknown relation {r!r}; available: {', '.join(g.relations) or '(none)'}")
    return KnowledgeGraph(g.entity_classes, (e for e in g.edges if e.rel != r))


# -- edge-list I/O ---------------------------------------------------------


@dataclass
class LoadReport:
    duplicates: int = 0
    self_loops: int = 0


def _data_lines(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            yield lineno, line


def load_vertex_classes(path: str | Path) -> dict[str, str]:
    path = Path(path)
    classes: dict[str, str] = {}
    for lineno, line in _data_lines(path):
        fields = line.split("\t")
        if len(fields) != 2:
            raise ParseError(path, lineno, f"expected 2 tab-separated fields, got {len(fields)}")
        classes[fields[0]] = fields[1]
    return classes


def load_edgelist(
    path: str | Path,
    vertex_class_path: str | Path | None = None,
    report: LoadReport | None = None,
) -> KnowledgeGraph:
    """Read a ``src<TAB>rel<TAB>dst`` file.

    Duplicate triples keep their first occurrence; self-loops are dropped.
    Both are logged and counted in ``report`` when one is passed.
    """
    path = Path(path)
    report = report if report is not None else LoadReport()
    seen: set[Edge] = set()
    edges: list[Edge] = []
    vertices: dict[str, str | None] = {}
    for lineno, line in _data_lines(path):
        fields = line.split("\t")
        if len(fields) != 3:
            raise ParseError(path, lineno, f"expected 3 tab-separated fields, got {len(fields)}")
        src, rel, dst = fields
        if src == dst:
            report.self_loops += 1
            log.warning("%s:%d: dropping self-loop %s %s %s", path, lineno, src, rel, dst)
            continue
        e = Edge(src, dst, rel)
        vertices.setdefault(src, None)
        vertices.setdefault(dst, None)
        if e in seen:
            report.duplicates += 1
            continue
        seen.add(e)
        edges.append(e)
    if vertex_class_path is not None:
        for v, c in load_vertex_classes(vertex_class_path).items():
            vertices[v] = c
    if not vertices:
        raise InputError(f"{path}: edge list is empty")
    if report.duplicates:
        log.warning("%s: dropped %d duplicate edges", path, report.duplicates)
    return KnowledgeGraph(vertices, edges)


def save_edgelist(g: KnowledgeGraph, path: str | Path) -> None:
    write_edges(g.edges, path)


def write_edges(edges: Iterable[Edge], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in sorted(edges):
            fh.write(f"{e.src}\t{e.rel}\t{e.dst}\n")


def save_vertex_classes(g: KnowledgeGraph, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for v in g.vertices:
            if v.entity_class is not None:
                fh.write(f"{v.id}\t{v.entity_class}\n")


# -- negative sampling -----------------------------------------------------


class NegativeStrategy(str, Enum):
    SAME_SOURCE = "same-source"
    CLASS_RESTRICTED = "class-restricted"


@dataclass(frozen=True)
class NegativeEdgeSet:
    edges: tuple[Edge, ...]
    seed: int
    strategy: NegativeStrategy
    skipped: int = 0
    n_positive: int = 0

    def __len__(self) -> int:
        return len(self.edges)

    def __iter__(self):
        return iter(self.edges)

    def save(self, path: str | Path) -> None:
        write_edges(self.edges, path)


def _candidates_by_class(g: KnowledgeGraph) -> dict[str | None, list[str]]:
    out: dict[str | None, list[str]] = defaultdict(list)
    for v in g.vertex_ids:
        out[g._classes[v]].append(v)
    return out


def sample_negative_edges(
    g: KnowledgeGraph,
    rels: Iterable[str] | None = None,
    seed: int = 0,
    strategy: NegativeStrategy | str = NegativeStrategy.SAME_SOURCE,
) -> NegativeEdgeSet:
    """Draw one corrupted target ``(i, j', r)`` per positive edge ``(i, j, r)``.

    Targets are drawn uniformly without replacement per ``(i, r)`` group from
    vertices ``j' != i`` with ``(i, j', r)`` not in the graph, so the result never
    contains duplicates. Positives whose group ran out of candidates are
    skipped and counted; if every positive is skipped a :class:`InputError`
    is raised.
    """
    strategy = NegativeStrategy(strategy)
    rels = g.relations if rels is None else sorted(set(rels))
    for r in rels:
        if r not in g._by_rel:
            raise InputError(f"unknown relation {r!r}; available: {', '.join(g.relations)}")
    rng = np.random.default_rng(seed)
    all_ids = g.vertex_ids
    by_class = _candidates_by_class(g)
    neg: list[Edge] = []
    skipped = n_pos = 0
    for r in rels:
        groups: dict[str, list[Edge]] = defaultdict(list)
        for e in g.edges_of(r):
            groups[e.src].append(e)
        for src in sorted(groups):
            positives = groups[src]
            n_pos += len(positives)
            taken = {e.dst for e in positives}
            taken.add(src)
            for e in positives:
                pool = all_ids
                if strategy is NegativeStrategy.CLASS_RESTRICTED:
                    pool = by_class[g._classes[e.dst]]
                legal = [v for v in pool if v not in taken]
                if not legal:
                    skipped += 1
                    continue
                pick = legal[int(rng.integers(len(legal)))]
                taken.add(pick)
                neg.append(Edge(src, pick, r))
    if skipped:
        log.warning("negative sampling skipped %d of %d positives (saturated sources)", skipped, n_pos)
        if skipped == n_pos:
            raise InputError("every source is saturated: no negative space for the requested relations")
    return NegativeEdgeSet(tuple(sorted(neg)), seed, strategy, skipped, n_pos)


# -- statistics ------------------------------------------------------------


@dataclass
class StatsReport:
    relation_counts: dict[str, int] = field(default_factory=dict)
    class_counts: dict[str, int] = field(default_factory=dict)
    signatures: dict[str, list[tuple[str, str]]] = field(default_factory=dict)
    n_vertices: int = 0
    n_edges: int = 0

    def to_text(self) -> str:
        rows = sorted(self.relation_counts.items(), key=lambda kv: (-kv[1], kv[0]))
        lines = ["relation\tcount\tsrc_class→dst_class"]
        for rel, n in rows:
            sig = ",".join(f"{a}→{b}" for a, b in self.signatures.get(rel, []))
            lines.append(f"{rel}\t{n}\t{sig}")
        lines.append("")
        lines.append("class\tcount")
        for cls, n in sorted(self.class_counts.items(), key=lambda kv: (-kv[1], kv[0])):
            lines.append(f"{cls}\t{n}")
        lines.append("")
        lines.append(f"total\tvertices={self.n_vertices}\tedges={self.n_edges}")
        return "\n".join(lines) + "\n"


def graph_stats(g: KnowledgeGraph) -> StatsReport:
    classes = g._classes
    return StatsReport(
        relation_counts={r: len(g.edges_of(r)) for r in g.relations},
        class_counts=dict(Counter(NO_CLASS if c is None else c for c in classes.values())),
        signatures={
            r: sorted(
                (NO_CLASS if a is None else a, NO_CLASS if b is None else b)
                for a, b in g.relation_signature(r)
            )
            for r in g.relations
        },
        n_vertices=len(classes),
        n_edges=len(g.edges),
    )
