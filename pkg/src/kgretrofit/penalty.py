"""Relation penalty functions with their analytic gradients.

Quadratic kinds (identity, translation, linear) share one formula,
``||A q_j + b - q_i||^2``; they differ only in which parameters the optimizer
is allowed to move. The neural kind scores ``tanh(q_i^T A q_j)``.

New kinds (hyperplane or projection-based translations, tensor scorers) plug
in by adding a value and a gradient branch here; the engine only relies on
:func:`penalty_value`, :func:`penalty_gradients` and :func:`init_params`.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import InputError, ParseError

NEURAL_INIT_NOISE = 0.01


class PenaltyKind(str, Enum):
    IDENTITY = "identity"
    TRANSLATION = "translation"
    LINEAR = "linear"
    NEURAL = "neural"

    @property
    def quadratic(self) -> bool:
        return self is not PenaltyKind.NEURAL

    @property
    def learns_b(self) -> bool:
        return self in (PenaltyKind.TRANSLATION, PenaltyKind.LINEAR)

    @property
    def learns_A(self) -> bool:
        return self in (PenaltyKind.LINEAR, PenaltyKind.NEURAL)


@dataclass(frozen=True)
class RelationParams:
    rel: str
    kind: PenaltyKind
    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        kind = PenaltyKind(self.kind)
        A = np.array(self.A, dtype=np.float64, ndmin=2)
        b = np.array(self.b, dtype=np.float64).ravel()
        if b.shape[0] != A.shape[0]:
            raise InputError(f"relation {self.rel!r}: b has length {b.shape[0]}, A has {A.shape[0]} rows")
        if kind in (PenaltyKind.IDENTITY, PenaltyKind.TRANSLATION) and A.shape[0] != A.shape[1]:
            raise InputError(f"relation {self.rel!r}: {kind.value} kind needs equal source/target dims")
        A.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def d_src(self) -> int:
        return self.A.shape[0]

    @property
    def d_dst(self) -> int:
        return self.A.shape[1]

    def replace(self, A=None, b=None) -> RelationParams:
        return RelationParams(self.rel, self.kind, self.A if A is None else A, self.b if b is None else b)


@dataclass(frozen=True)
class PenaltyGradients:
    d_qi: np.ndarray
    d_qj: np.ndarray
    d_A: np.ndarray
    d_b: np.ndarray


def _check(p: RelationParams, qi, qj):
    qi = np.asarray(qi, dtype=np.float64)
    qj = np.asarray(qj, dtype=np.float64)
    if qi.shape != (p.d_src,) or qj.shape != (p.d_dst,):
        raise InputError(
            f"relation {p.rel!r} expects source dim {p.d_src} and target dim {p.d_dst}, "
            f"got {qi.shape[0] if qi.ndim else 0} and {qj.shape[0] if qj.ndim else 0}"
        )
    return qi, qj


def penalty_value(p: RelationParams, qi, qj) -> float:
    qi, qj = _check(p, qi, qj)
    if p.kind is PenaltyKind.NEURAL:
        return float(np.tanh(qi @ p.A @ qj))
    resid = p.A @ qj + p.b - qi
    return float(resid @ resid)


def penalty_gradients(p: RelationParams, qi, qj) -> PenaltyGradients:
    """Gradients of :func:`penalty_value` in ``q_i``, ``q_j``, ``A`` and ``b``.

    Frozen parameters still get their true partial derivative; deciding what
    to update is the optimizer's job.
    """
    qi, qj = _check(p, qi, qj)
    if p.kind is PenaltyKind.NEURAL:
        s = qi @ p.A @ qj
        # 1 - tanh^2 underflows cleanly to 0 for large |s|
        u = 1.0 - np.tanh(s) ** 2
        return PenaltyGradients(
            d_qi=u * (p.A @ qj),
            d_qj=u * (p.A.T @ qi),
            d_A=u * np.outer(qi, qj),
            d_b=np.zeros_like(p.b),
        )
    resid = p.A @ qj + p.b - qi
    return PenaltyGradients(
        d_qi=-2.0 * resid,
        d_qj=2.0 * (p.A.T @ resid),
        d_A=2.0 * np.outer(resid, qj),
        d_b=2.0 * resid,
    )


def padded_identity(d_src: int, d_dst: int) -> np.ndarray:
    """Identity block in the top-left corner, zeros elsewhere."""
    return np.eye(d_src, d_dst)


def init_params(rel: str, kind: PenaltyKind | str, d_src: int, d_dst: int, seed: int = 0) -> RelationParams:
    kind = PenaltyKind(kind)
    if kind in (PenaltyKind.IDENTITY, PenaltyKind.TRANSLATION) and d_src != d_dst:
        raise InputError(f"relation {rel!r}: {kind.value} kind needs d_src == d_dst, got {d_src} and {d_dst}")
    A = padded_identity(d_src, d_dst)
    if kind is PenaltyKind.NEURAL:
        rng = np.random.default_rng(seed)
        A = A + rng.uniform(-NEURAL_INIT_NOISE, NEURAL_INIT_NOISE, size=A.shape)
    return RelationParams(rel, kind, A, np.zeros(d_src))


# -- serialization ---------------------------------------------------------


def _row(v) -> str:
    return " ".join(f"{x:.17g}" for x in v)


def save_params(params: Mapping[str, RelationParams], path: str | Path) -> None:
    """One section per relation: ``[rel kind d_src d_dst]``, b, then A row by row."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rel in sorted(params):
            p = params[rel]
            if any(c.isspace() for c in rel):
                raise InputError(f"relation name {rel!r} contains whitespace and cannot be serialized")
            fh.write(f"[{rel} {p.kind.value} {p.d_src} {p.d_dst}]\n")
            fh.write(_row(p.b) + "\n")
            for row in p.A:
                fh.write(_row(row) + "\n")


def load_params(path: str | Path) -> dict[str, RelationParams]:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = [(n, ln.rstrip("\n")) for n, ln in enumerate(fh, start=1)]
    out: dict[str, RelationParams] = {}
    k = 0
    while k < len(lines):
        lineno, head = lines[k]
        if not head.strip():
            k += 1
            continue
        if not (head.startswith("[") and head.endswith("]")):
            raise ParseError(path, lineno, "expected a '[rel kind d_src d_dst]' header")
        fields = head[1:-1].split()
        if len(fields) != 4:
            raise ParseError(path, lineno, "expected a '[rel kind d_src d_dst]' header")
        rel, kind, d_src, d_dst = fields[0], fields[1], int(fields[2]), int(fields[3])
        try:
            block = lines[k + 1 : k + 2 + d_src]
            b = [float(x) for x in block[0][1].split()] if d_src else []
            A = [[float(x) for x in ln.split()] for _, ln in block[1:]]
            out[rel] = RelationParams(rel, kind, np.array(A).reshape(d_src, d_dst), b)
        except (IndexError, ValueError) as exc:
            raise ParseError(path, lineno, f"bad parameter block for {rel!r}: {exc}") from None
        k += 2 + d_src
    return out
