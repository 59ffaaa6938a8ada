"""Dense entity embeddings: text I/O, graph alignment and PPMI construction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import InputError, ParseError
from .graph import KnowledgeGraph

log = logging.getLogger(__name__)


class EmbeddingFormat(str, Enum):
    WORD2VEC = "word2vec-text"
    TSV = "tsv"


def _readonly(v) -> np.ndarray:
    a = np.array(v, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class EmbeddingSet:
    """Mapping from entity id to vector, with an entity class per id.

    A stored all-zero vector means "no distributional data" for that entity;
    :meth:`anchored` is the predicate downstream code should use for it.
    """

    vectors: Mapping[str, np.ndarray]
    classes: Mapping[str, str | None] = field(default_factory=dict)
    coverage: Mapping[str | None, tuple[int, int]] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        vecs = {k: _readonly(self.vectors[k]) for k in sorted(self.vectors)}
        classes = {k: self.classes.get(k) for k in vecs}
        dims: dict[str | None, int] = {}
        for k, v in vecs.items():
            if v.ndim != 1:
                raise InputError(f"embedding for {k!r} is not a vector")
            c = classes[k]
            if dims.setdefault(c, v.shape[0]) != v.shape[0]:
                raise InputError(
                    f"class {c!r} mixes dimensionalities {dims[c]} and {v.shape[0]} (entity {k!r})"
                )
        object.__setattr__(self, "vectors", vecs)
        object.__setattr__(self, "classes", classes)

    @property
    def ids(self) -> list[str]:
        return list(self.vectors)

    @property
    def dim_by_class(self) -> dict[str | None, int]:
        return {self.classes[k]: v.shape[0] for k, v in self.vectors.items()}

    def __getitem__(self, key: str) -> np.ndarray:
        return self.vectors[key]

    def __contains__(self, key) -> bool:
        return key in self.vectors

    def __len__(self) -> int:
        return len(self.vectors)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingSet):
            return NotImplemented
        return (
            self.ids == other.ids
            and dict(self.classes) == dict(other.classes)
            and all(np.array_equal(self[k], other[k]) for k in self.ids)
        )

    __hash__ = None

    def anchored(self, key: str) -> bool:
        return bool(np.any(self.vectors[key] != 0.0))

    def with_classes(self, classes: Mapping[str, str | None]) -> EmbeddingSet:
        return EmbeddingSet(self.vectors, {k: classes.get(k) for k in self.vectors})

    def allclose(self, other: EmbeddingSet, atol: float = 0.0) -> bool:
        if self.ids != other.ids:
            return False
        return all(np.allclose(self[k], other[k], rtol=0.0, atol=atol) for k in self.ids)


# -- text I/O --------------------------------------------------------------


def load_embeddings(path: str | Path, format: EmbeddingFormat | str = EmbeddingFormat.WORD2VEC) -> EmbeddingSet:
    fmt = EmbeddingFormat(format)
    path = Path(path)
    vectors: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            if fmt is EmbeddingFormat.WORD2VEC:
                fields = line.split(" ")
                if lineno == 1:
                    if len(fields) != 2:
                        raise ParseError(path, lineno, "word2vec header must be 'N D'")
                    try:
                        dim = int(fields[1])
                    except ValueError:
                        raise ParseError(path, lineno, "word2vec header must be 'N D'") from None
                    continue
            else:
                fields = line.split("\t")
            key, values = fields[0], fields[1:]
            if dim is None:
                dim = len(values)
            if len(values) != dim:
                raise ParseError(path, lineno, f"expected {dim} values for {key!r}, got {len(values)}")
            if key in vectors:
                raise ParseError(path, lineno, f"duplicate entity {key!r}")
            try:
                vectors[key] = np.array([float(x) for x in values])
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
    return EmbeddingSet(vectors)


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def save_embeddings(e: EmbeddingSet, path: str | Path, format: EmbeddingFormat | str = EmbeddingFormat.WORD2VEC) -> None:
    fmt = EmbeddingFormat(format)
    sep = " " if fmt is EmbeddingFormat.WORD2VEC else "\t"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if fmt is EmbeddingFormat.WORD2VEC:
            dims = set(e.dim_by_class.values())
            if len(dims) > 1:
                raise InputError("word2vec-text needs a single dimensionality; use the tsv format")
            fh.write(f"{len(e)} {dims.pop() if dims else 0}\n")
        for key, v in e.vectors.items():
            fh.write(key + sep + sep.join(_fmt(x) for x in v) + "\n")


# -- alignment -------------------------------------------------------------


def align(g: KnowledgeGraph, sets: Mapping[str | None, EmbeddingSet] | EmbeddingSet) -> EmbeddingSet:
    """One vector per graph vertex, taken from the embedding set of its class.

    Vertices absent from their class's set get a zero vector (unanchored).
    A set keyed by ``None`` serves every class without a dedicated set.
    Per-class ``(found, total)`` counts are attached as ``coverage``.
    """
    if isinstance(sets, EmbeddingSet):
        sets = {None: sets}
    classes = g.entity_classes
    vectors: dict[str, np.ndarray] = {}
    found: dict[str | None, int] = {}
    total: dict[str | None, int] = {}
    for v in g.vertex_ids:
        c = classes[v]
        src = sets.get(c, sets.get(None))
        if src is None:
            raise InputError(f"no embedding set for entity class {c!r}")
        total[c] = total.get(c, 0) + 1
        if v in src:
            vectors[v] = src[v]
            found[c] = found.get(c, 0) + 1
        else:
            vectors[v] = None  # filled once the class dimensionality is known
    for c in total:
        src = sets.get(c, sets.get(None))
        dims = set(src.dim_by_class.values())
        if len(dims) != 1:
            raise InputError(f"embedding set for class {c!r} must have one dimensionality, found {sorted(dims)}")
        d = dims.pop()
        for v in g.vertex_ids:
            if classes[v] == c and vectors[v] is None:
                vectors[v] = np.zeros(d)
    coverage = {c: (found.get(c, 0), total[c]) for c in total}
    for c, (n, t) in coverage.items():
        log.info("class %s: %d/%d vertices have distributional vectors", c, n, t)
    return EmbeddingSet(vectors, classes, coverage)


# -- PPMI ------------------------------------------------------------------


@dataclass(frozen=True)
class CooccurrenceMatrix:
    row_ids: Sequence[str]
    col_ids: Sequence[str]
    counts: sp.csr_matrix

    def __post_init__(self):
        counts = sp.csr_matrix(self.counts, dtype=np.float64)
        if counts.shape != (len(self.row_ids), len(self.col_ids)):
            raise InputError(f"count matrix shape {counts.shape} does not match ids")
        if counts.nnz and counts.data.min() < 0:
            raise InputError("co-occurrence counts must be nonnegative")
        object.__setattr__(self, "counts", counts)


def pmi_l2_normalize(m: CooccurrenceMatrix, entity_class: str | None = None) -> EmbeddingSet:
    """Positive PMI of the counts followed by unit-norm rows (zero rows stay zero)."""
    c = m.counts.tocoo()
    total = c.sum()
    if total <= 0:
        raise InputError("co-occurrence matrix is empty")
    row_tot = np.asarray(m.counts.sum(axis=1)).ravel()
    col_tot = np.asarray(m.counts.sum(axis=0)).ravel()
    keep = c.data > 0
    r, k, n = c.row[keep], c.col[keep], c.data[keep]
    # one ratio, then one log: independent cells with p(i,c) = p(i)p(c) give exactly 0
    # instead of round-off noise that row normalization would blow up
    pmi = np.log((n * total) / (row_tot[r] * col_tot[k]))
    dense = np.zeros(m.counts.shape)
    dense[r, k] = np.maximum(pmi, 0.0)
    norms = np.linalg.norm(dense, axis=1)
    nz = norms > 0
    dense[nz] /= norms[nz, None]
    return EmbeddingSet(
        {rid: dense[idx] for idx, rid in enumerate(m.row_ids)},
        {rid: entity_class for rid in m.row_ids},
    )
