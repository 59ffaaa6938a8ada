"""Minimization of the retrofitting objective.

The objective is

    sum_i alpha_i ||q_i - qhat_i||^2
      + sum_{E+} beta f_r(q_i, q_j) - sum_{E-} beta f_r(q_i, q_j)
      + lambda sum_r ||A_r||_F^2            (learnable A only)

Quadratic penalty kinds are minimized by exact block-coordinate descent over
``b_r``, ``A_r`` and each ``q_i``; the neural kind by mini-batch SGD.

Sign convention for the translation block: setting the derivative in ``b_r``
to zero gives ``b_r = sum(s*beta*(q_i - A_r q_j)) / sum(s*beta)`` with
``s = +1`` on positives and ``-1`` on negatives. Some printed forms of this
update carry the opposite sign in the numerator (``A_r q_j - q_i``); that
version is not a stationary point, so the derived form is used here.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.linalg

from .embeddings import EmbeddingFormat, EmbeddingSet, save_embeddings
from .errors import InputError, NumericalError
from .graph import Edge, KnowledgeGraph, NegativeEdgeSet, NegativeStrategy, out_degree, sample_negative_edges
from .penalty import PenaltyKind, RelationParams, init_params, penalty_value, save_params

log = logging.getLogger(__name__)

LAMBDA_FLOOR = 1e-9
DENOM_EPS = 1e-12
SOLVE_RESIDUAL = 1e-8
DIVERGENCE_FLOOR = -1e12
ORTHO_ATOL = 1e-12


class QUpdate(str, Enum):
    GAUSS_SEIDEL = "gauss-seidel"
    JACOBI = "jacobi"


@dataclass
class SGDConfig:
    learning_rate: float = 0.01
    epochs: int = 50
    batch_size: int = 128


@dataclass
class RetrofitConfig:
    """Hyperparameters of a retrofitting run.

    ``beta_neg=None`` resolves to 0 for closed-form runs and 1 for SGD runs.
    ``learn_A=False`` freezes every A at its initial value.
    """

    alpha: float = 1.0
    beta_pos: float = 1.0
    beta_neg: float | None = None
    lam: float = 0.0
    kind: PenaltyKind = PenaltyKind.LINEAR
    kind_by_relation: dict[str, PenaltyKind] = field(default_factory=dict)
    max_sweeps: int = 100
    tol: float = 1e-6
    seed: int = 0
    sgd: SGDConfig = field(default_factory=SGDConfig)
    orthogonalize: bool = True
    learn_A: bool = True
    negative_strategy: NegativeStrategy = NegativeStrategy.SAME_SOURCE
    q_update: QUpdate = QUpdate.GAUSS_SEIDEL
    threads: int = 1

    def __post_init__(self):
        self.kind = PenaltyKind(self.kind)
        self.kind_by_relation = {r: PenaltyKind(k) for r, k in self.kind_by_relation.items()}
        self.negative_strategy = NegativeStrategy(self.negative_strategy)
        self.q_update = QUpdate(self.q_update)
        if isinstance(self.sgd, Mapping):
            self.sgd = SGDConfig(**self.sgd)
        for name in ("alpha", "beta_pos", "lam", "tol"):
            if not getattr(self, name) >= 0:
                raise InputError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if self.beta_neg is not None and not self.beta_neg >= 0:
            raise InputError(f"beta_neg must be nonnegative, got {self.beta_neg}")
        if self.max_sweeps < 1:
            raise InputError("max_sweeps must be at least 1")
        if self.threads < 1:
            raise InputError("threads must be at least 1")

    def kind_for(self, rel: str) -> PenaltyKind:
        return self.kind_by_relation.get(rel, self.kind)

    def uses_sgd(self, relations: Sequence[str]) -> bool:
        kinds = {self.kind_for(r) for r in relations} or {self.kind}
        if PenaltyKind.NEURAL in kinds and len(kinds) > 1:
            raise InputError("mixing neural and closed-form relation kinds in one run is not supported")
        return PenaltyKind.NEURAL in kinds

    def resolved_beta_neg(self, sgd: bool) -> float:
        if self.beta_neg is not None:
            return self.beta_neg
        return 1.0 if sgd else 0.0

    def as_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["kind_by_relation"] = {r: k.value for r, k in sorted(self.kind_by_relation.items())}
        d["negative_strategy"] = self.negative_strategy.value
        d["q_update"] = self.q_update.value
        return d


@dataclass(frozen=True)
class EdgeWeights:
    alpha: dict[str, float]
    positive: dict[Edge, float]
    negative: dict[Edge, float]


def edge_weights(
    g: KnowledgeGraph, neg: Sequence[Edge], q_hat: EmbeddingSet, cfg: RetrofitConfig, beta_neg: float | None = None
) -> EdgeWeights:
    """Anchor weights and out-degree normalized edge weights.

    Negatives are normalized by the positive out-degree of their source.
    """
    if beta_neg is None:
        beta_neg = cfg.resolved_beta_neg(False)
    alpha = {v: (cfg.alpha if q_hat.anchored(v) else 0.0) for v in g.vertex_ids}
    pos = {e: cfg.beta_pos / out_degree(g, e.src, e.rel) for e in g.edges}
    negw = {}
    for e in neg:
        d = out_degree(g, e.src, e.rel)
        if d == 0:
            raise InputError(f"negative edge {e} has no positive edge from the same source and relation")
        negw[e] = beta_neg / d
    return EdgeWeights(alpha, pos, negw)


@dataclass(frozen=True)
class ObjectiveBreakdown:
    anchor_term: float
    positive_term: float
    negative_term: float
    regularizer_term: float

    @property
    def total(self) -> float:
        return self.anchor_term + self.positive_term - self.negative_term + self.regularizer_term


def _neg_edges(neg) -> tuple[Edge, ...]:
    if neg is None:
        return ()
    return tuple(neg.edges) if isinstance(neg, NegativeEdgeSet) else tuple(Edge(*e) for e in neg)


def objective(
    g: KnowledgeGraph,
    neg: NegativeEdgeSet | Sequence[Edge] | None,
    q: EmbeddingSet,
    q_hat: EmbeddingSet,
    params: Mapping[str, RelationParams],
    cfg: RetrofitConfig,
    beta_neg: float | None = None,
) -> ObjectiveBreakdown:
    """Direct edge-by-edge evaluation of the objective.

    Deliberately written without the vectorized machinery of
    :class:`RetrofitProblem` so it can serve as a cross-check.
    """
    neg = _neg_edges(neg)
    for r in {e.rel for e in g.edges} | {e.rel for e in neg}:
        if r not in params:
            raise InputError(f"no parameters for relation {r!r}")
    w = edge_weights(g, neg, q_hat, cfg, beta_neg)
    anchor = 0.0
    for v in g.vertex_ids:
        diff = q[v] - q_hat[v]
        anchor += w.alpha[v] * float(diff @ diff)
    positive = sum(w.positive[e] * penalty_value(params[e.rel], q[e.src], q[e.dst]) for e in g.edges)
    negative = sum(w.negative[e] * penalty_value(params[e.rel], q[e.src], q[e.dst]) for e in neg)
    reg = sum(cfg.lam * float(np.sum(p.A**2)) for p in params.values() if p.kind.learns_A)
    return ObjectiveBreakdown(anchor, float(positive), float(negative), float(reg))


def converged(trace: Sequence, tol: float) -> bool:
    """Relative change of the last two totals is at most ``tol`` (absolute below 1)."""
    if not trace:
        raise ValueError("trace is empty")
    if len(trace) < 2:
        return False
    cur, prev = (getattr(t, "total", t) for t in trace[-2:][::-1])
    return abs(cur - prev) <= tol * max(1.0, abs(prev))


def nearest_orthogonal(M: np.ndarray) -> np.ndarray:
    """Polar factor ``W Z^T`` of ``M = W S Z^T``; semi-orthogonal when ``M`` is rectangular."""
    W, s, Zt = np.linalg.svd(M, full_matrices=False)
    if s.size == 0 or s[-1] <= DENOM_EPS * max(s[0], 1e-300):
        raise NumericalError(
            f"cannot orthogonalize a rank-deficient matrix (singular values {s.min() if s.size else 0:.3g}"
            f" .. {s.max() if s.size else 0:.3g}); the polar factor is not unique"
        )
    return W @ Zt


@dataclass
class _Relation:
    name: str
    src_cls: str | None
    dst_cls: str | None
    src_rows: np.ndarray
    dst_rows: np.ndarray
    sw: np.ndarray  # signed weights: +beta on positives, -beta on negatives
    n_pos: int


class RetrofitProblem:
    """Compiled, index-based form of a retrofitting problem.

    Embeddings live in one ``(n_c, d_c)`` array per entity class; vertices are
    addressed by ``(class, row)``. The block updates mutate ``self.Q`` and
    ``self.params`` in place.
    """

    def __init__(
        self,
        g: KnowledgeGraph,
        neg: NegativeEdgeSet | Sequence[Edge] | None,
        q_hat: EmbeddingSet,
        params: Mapping[str, RelationParams],
        cfg: RetrofitConfig,
        q: EmbeddingSet | None = None,
        beta_neg: float | None = None,
        state: dict | None = None,
    ):
        self.g = g
        self.cfg = cfg
        self.ids = g.vertex_ids
        missing = [v for v in self.ids if v not in q_hat]
        if missing:
            raise InputError(f"{len(missing)} graph vertices have no embedding (e.g. {missing[0]!r}); align first")
        neg = _neg_edges(neg)
        w = edge_weights(g, neg, q_hat, cfg, beta_neg)
        classes = g.entity_classes
        dims = q_hat.dim_by_class

        self.loc: list[tuple[str | None, int]] = []
        members: dict[str | None, list[str]] = {}
        for v in self.ids:
            c = classes[v]
            members.setdefault(c, []).append(v)
            self.loc.append((c, len(members[c]) - 1))
        self.index = {v: k for k, v in enumerate(self.ids)}
        self.row = {v: self.loc[k][1] for k, v in enumerate(self.ids)}
        self.members = members
        for c in members:
            if c not in dims:
                raise InputError(f"embeddings carry no vectors of class {c!r}")
        self.Qhat = {c: np.array([q_hat[v] for v in vs]).reshape(len(vs), dims[c]) for c, vs in members.items()}
        if state is not None:
            self.Q = state
        else:
            src = q if q is not None else q_hat
            self.Q = {c: np.array([src[v] for v in vs], dtype=np.float64).reshape(len(vs), dims[c]) for c, vs in members.items()}
        self.alpha = {c: np.array([w.alpha[v] for v in vs]) for c, vs in members.items()}

        self.params = dict(params)
        self.rels: dict[str, _Relation] = {}
        edges_by_rel: dict[str, tuple[list[Edge], list[Edge]]] = {}
        for e in g.edges:
            edges_by_rel.setdefault(e.rel, ([], []))[0].append(e)
        for e in neg:
            edges_by_rel.setdefault(e.rel, ([], []))[1].append(e)
        for r in sorted(edges_by_rel):
            pos, ng = edges_by_rel[r]
            allp = pos + ng
            sig = {(classes[e.src], classes[e.dst]) for e in allp}
            if len(sig) != 1:
                raise InputError(f"relation {r!r} connects several class pairs {sorted(sig, key=str)}; split it per pair")
            (sc, dc), = sig
            if r not in self.params:
                raise InputError(f"no parameters for relation {r!r}")
            p = self.params[r]
            if (p.d_src, p.d_dst) != (dims[sc], dims[dc]):
                raise InputError(
                    f"relation {r!r} params are {p.d_src}x{p.d_dst} but embeddings are {dims[sc]} -> {dims[dc]}"
                )
            self.rels[r] = _Relation(
                r,
                sc,
                dc,
                np.array([self.row[e.src] for e in allp], dtype=np.intp),
                np.array([self.row[e.dst] for e in allp], dtype=np.intp),
                np.array([w.positive[e] for e in pos] + [-w.negative[e] for e in ng]),
                len(pos),
            )

        # per-vertex incidence: (relation, is_out, other rows, signed weights, weight sum)
        inc: list[list] = [[] for _ in self.ids]
        for r, rd in self.rels.items():
            by_src: dict[int, list[int]] = {}
            by_dst: dict[int, list[int]] = {}
            src_ids = members[rd.src_cls]
            dst_ids = members[rd.dst_cls]
            for k in range(len(rd.sw)):
                by_src.setdefault(self.index[src_ids[rd.src_rows[k]]], []).append(k)
                by_dst.setdefault(self.index[dst_ids[rd.dst_rows[k]]], []).append(k)
            for v, ks in by_src.items():
                sw = rd.sw[ks]
                inc[v].append((r, True, rd.dst_rows[ks], sw, float(sw.sum())))
            for v, ks in by_dst.items():
                sw = rd.sw[ks]
                inc[v].append((r, False, rd.src_rows[ks], sw, float(sw.sum())))
        self.incidence = inc
        self.warnings: list[str] = []
        self._orth_cache: dict[str, tuple[np.ndarray, bool]] = {}

    # -- views --------------------------------------------------------------
    def vector(self, v: str) -> np.ndarray:
        c, row = self.loc[self.index[v]]
        return self.Q[c][row]

    def embeddings(self) -> EmbeddingSet:
        return EmbeddingSet(
            {v: self.Q[c][row].copy() for v, (c, row) in zip(self.ids, self.loc)},
            self.g.entity_classes,
        )

    def _orthogonal(self, p: RelationParams) -> bool:
        """Whether ``AᵀA = I``, so the vertex step reduces to a scalar division."""
        if p.kind in (PenaltyKind.IDENTITY, PenaltyKind.TRANSLATION):
            return True
        if p.d_src < p.d_dst:
            return False
        hit = self._orth_cache.get(p.rel)
        if hit is not None and hit[0] is p.A:
            return hit[1]
        flag = bool(np.max(np.abs(p.A.T @ p.A - np.eye(p.d_dst))) <= ORTHO_ATOL)
        self._orth_cache[p.rel] = (p.A, flag)
        return flag

    # -- objective ----------------------------------------------------------
    def relation_scores(self, r: str) -> np.ndarray:
        rd, p = self.rels[r], self.params[r]
        Qi = self.Q[rd.src_cls][rd.src_rows]
        Qj = self.Q[rd.dst_cls][rd.dst_rows]
        if p.kind is PenaltyKind.NEURAL:
            return np.tanh(np.einsum("ki,ij,kj->k", Qi, p.A, Qj))
        resid = Qj @ p.A.T + p.b - Qi
        return np.einsum("ki,ki->k", resid, resid)

    def objective(self) -> ObjectiveBreakdown:
        anchor = 0.0
        for c, Q in self.Q.items():
            diff = Q - self.Qhat[c]
            anchor += float(self.alpha[c] @ np.einsum("ki,ki->k", diff, diff))
        pos = negt = 0.0
        for r, rd in self.rels.items():
            f = self.relation_scores(r)
            pos += float(rd.sw[: rd.n_pos] @ f[: rd.n_pos])
            negt += float(-rd.sw[rd.n_pos :] @ f[rd.n_pos :])
        reg = sum(self.cfg.lam * float(np.sum(p.A**2)) for p in self.params.values() if p.kind.learns_A)
        return ObjectiveBreakdown(anchor, pos, negt, float(reg))

    # -- relation blocks ----------------------------------------------------
    def solve_b(self, r: str) -> np.ndarray:
        rd, p = self.rels[r], self.params[r]
        den = float(rd.sw.sum())
        if abs(den) <= DENOM_EPS * max(1.0, float(np.abs(rd.sw).sum())):
            raise NumericalError(
                f"relation {r!r}: positive and negative edge mass cancel (sum of weights {den:.3g}); "
                "lower beta_neg"
            )
        Qi = self.Q[rd.src_cls][rd.src_rows]
        Qj = self.Q[rd.dst_cls][rd.dst_rows]
        return rd.sw @ (Qi - Qj @ p.A.T) / den

    def solve_A(self, r: str, orthogonalize: bool | None = None) -> np.ndarray:
        if orthogonalize is None:
            orthogonalize = self.cfg.orthogonalize
        rd, p = self.rels[r], self.params[r]
        Qi = self.Q[rd.src_cls][rd.src_rows]
        Qj = self.Q[rd.dst_cls][rd.dst_rows]
        lam = max(self.cfg.lam, LAMBDA_FLOOR)
        V = (Qj * rd.sw[:, None]).T @ Qj + lam * np.eye(p.d_dst)
        U = ((Qi - p.b) * rd.sw[:, None]).T @ Qj
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
                At = scipy.linalg.solve(V, U.T, assume_a="sym")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning, ValueError):
            At = None
        if At is None or not np.all(np.isfinite(At)) or (
            np.abs(V @ At - U.T).max() > SOLVE_RESIDUAL * max(1.0, float(np.abs(U).max()))
        ):
            ev = np.linalg.eigvalsh(V)
            raise NumericalError(
                f"relation {r!r}: normal matrix is singular or ill-conditioned "
                f"(smallest eigenvalue {ev[0]:.3g}); increase lambda"
            )
        A = At.T
        if orthogonalize:
            A = nearest_orthogonal(A)
        return A

    def update_relation(self, r: str) -> RelationParams:
        p = self.params[r]
        if p.kind.learns_b:
            p = p.replace(b=self.solve_b(r))
            self.params[r] = p
        if p.kind is PenaltyKind.LINEAR and self.cfg.learn_A:
            p = p.replace(A=self.solve_A(r))
            self.params[r] = p
        return p

    def update_relations(self) -> None:
        names = [r for r in self.rels if self.params[r].kind.quadratic]
        if self.cfg.threads > 1 and len(names) > 1:
            with ThreadPoolExecutor(max_workers=self.cfg.threads) as pool:
                done = list(pool.map(self._relation_step, names))
            for r, p in zip(names, done):
                self.params[r] = p
        else:
            for r in names:
                self.update_relation(r)

    def _relation_step(self, r: str) -> RelationParams:
        # pure function of current state; result applied by the caller
        p = self.params[r]
        if p.kind.learns_b:
            p = p.replace(b=self.solve_b(r))
        if p.kind is PenaltyKind.LINEAR and self.cfg.learn_A:
            saved = self.params[r]
            self.params[r] = p  # solve_A reads b from params
            try:
                p = p.replace(A=self.solve_A(r))
            finally:
                self.params[r] = saved
        return p

    # -- vertex blocks -------------------------------------------------------
    def solve_q(self, k: int) -> np.ndarray | None:
        """Stationary point in ``q`` of vertex number ``k``; None when undetermined."""
        c, row = self.loc[k]
        a = self.alpha[c][row]
        inc = self.incidence[k]
        if not inc:
            if a > 0:
                return self.Qhat[c][row].copy()
            return None
        denom = a
        rhs = a * self.Qhat[c][row]
        M = None
        for r, is_out, rows, sw, s in inc:
            p, rd = self.params[r], self.rels[r]
            ident = p.kind is PenaltyKind.IDENTITY
            if is_out:
                nb = sw @ self.Q[rd.dst_cls][rows]
                rhs = rhs + (nb if ident else p.A @ nb) + s * p.b
                denom += s
            else:
                nb = sw @ self.Q[rd.src_cls][rows] - s * p.b
                rhs = rhs + (nb if ident else p.A.T @ nb)
                if self._orthogonal(p):
                    denom += s
                else:
                    G = s * (p.A.T @ p.A)
                    M = G if M is None else M + G
        if M is None:
            if abs(denom) <= DENOM_EPS:
                return None
            if denom < 0:
                self._unbounded(k, denom)
            return rhs / denom
        M = M + denom * np.eye(M.shape[0])
        low = np.linalg.eigvalsh(M)[0]
        if abs(low) <= DENOM_EPS:
            return None
        if low < 0:
            self._unbounded(k, low)
        q = np.linalg.solve(M, rhs)
        return q if np.all(np.isfinite(q)) else None

    def _unbounded(self, k: int, curvature: float):
        # negative curvature: the stationary point is a maximum, the block has no minimizer
        raise NumericalError(
            f"vertex {self.ids[k]!r}: negative edge mass outweighs anchor and positive edges "
            f"(curvature {curvature:.3g}); the objective is unbounded below, lower beta_neg or raise alpha"
        )

    def update_vertex(self, k: int) -> None:
        q = self.solve_q(k)
        c, row = self.loc[k]
        if q is None:
            msg = f"vertex {self.ids[k]!r}: zero denominator, left unchanged"
            log.warning(msg)
            self.warnings.append(msg)
            return
        self.Q[c][row] = q

    def sweep_q(self) -> None:
        n = len(self.ids)
        if self.cfg.q_update is QUpdate.GAUSS_SEIDEL:
            for k in range(n):
                self.update_vertex(k)
            return
        if self.cfg.threads > 1:
            with ThreadPoolExecutor(max_workers=self.cfg.threads) as pool:
                new = list(pool.map(self.solve_q, range(n)))
        else:
            new = [self.solve_q(k) for k in range(n)]
        for k, q in enumerate(new):
            c, row = self.loc[k]
            if q is None:
                msg = f"vertex {self.ids[k]!r}: zero denominator, left unchanged"
                log.warning(msg)
                self.warnings.append(msg)
            else:
                self.Q[c][row] = q


# -- public block updates (build a problem, apply one block) -----------------


def update_b(r: str, g, neg, q: EmbeddingSet, params, cfg: RetrofitConfig, q_hat: EmbeddingSet | None = None, beta_neg=None) -> np.ndarray:
    prob = RetrofitProblem(g, neg, q_hat if q_hat is not None else q, params, cfg, q=q, beta_neg=beta_neg)
    return prob.solve_b(r)


def update_A(
    r: str, g, neg, q: EmbeddingSet, params, cfg: RetrofitConfig, orthogonalize: bool | None = None,
    q_hat: EmbeddingSet | None = None, beta_neg=None,
) -> np.ndarray:
    prob = RetrofitProblem(g, neg, q_hat if q_hat is not None else q, params, cfg, q=q, beta_neg=beta_neg)
    return prob.solve_A(r, orthogonalize)


def update_q(i: str, g, neg, q: EmbeddingSet, q_hat: EmbeddingSet, params, cfg: RetrofitConfig, beta_neg=None) -> np.ndarray:
    prob = RetrofitProblem(g, neg, q_hat, params, cfg, q=q, beta_neg=beta_neg)
    out = prob.solve_q(prob.index[i])
    if out is None:
        log.warning("vertex %r: zero denominator, left unchanged", i)
        return np.array(q[i], dtype=np.float64)
    return out


# -- drivers ---------------------------------------------------------------


@dataclass
class RetrofitResult:
    embeddings: EmbeddingSet
    params: dict[str, RelationParams]
    trace: list[ObjectiveBreakdown]
    converged: bool
    sweeps_run: int
    negatives: NegativeEdgeSet | None = None
    warnings: list[str] = field(default_factory=list)

    @property
    def final(self) -> ObjectiveBreakdown:
        return self.trace[-1]

    def save(self, out_dir: str | Path, suffix: str = "") -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "embeddings": out / f"embeddings{suffix}.txt",
            "params": out / f"params{suffix}.txt",
            "trace": out / f"trace{suffix}.tsv",
        }
        fmt = EmbeddingFormat.WORD2VEC if len(set(self.embeddings.dim_by_class.values())) <= 1 else EmbeddingFormat.TSV
        save_embeddings(self.embeddings, paths["embeddings"], fmt)
        save_params(self.params, paths["params"])
        write_trace(self.trace, paths["trace"])
        return paths


def write_trace(trace: Sequence[ObjectiveBreakdown], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step\tanchor\tpositive\tnegative\tregularizer\ttotal\n")
        for k, t in enumerate(trace):
            vals = (t.anchor_term, t.positive_term, t.negative_term, t.regularizer_term, t.total)
            fh.write(f"{k}\t" + "\t".join(f"{x:.17g}" for x in vals) + "\n")


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


def initial_params(g: KnowledgeGraph, q_hat: EmbeddingSet, cfg: RetrofitConfig) -> dict[str, RelationParams]:
    dims = q_hat.dim_by_class
    out = {}
    for k, r in enumerate(g.relations):
        sig = g.relation_signature(r)
        if len(sig) != 1:
            raise InputError(f"relation {r!r} connects several class pairs {sorted(sig, key=str)}; split it per pair")
        (sc, dc), = sig
        out[r] = init_params(r, cfg.kind_for(r), dims[sc], dims[dc], seed=_derived_seed(cfg.seed, k))
    return out


def _check_aligned(g: KnowledgeGraph, q_hat: EmbeddingSet) -> None:
    if set(q_hat.ids) != set(g.vertex_ids):
        extra = set(q_hat.ids) - set(g.vertex_ids)
        missing = set(g.vertex_ids) - set(q_hat.ids)
        raise InputError(
            f"embeddings are not aligned to the graph ({len(missing)} missing, {len(extra)} extra); "
            "use embeddings.align"
        )


def _guard(bd: ObjectiveBreakdown, where: str) -> None:
    if not math.isfinite(bd.total):
        raise NumericalError(f"non-finite objective at {where}")
    if bd.total < DIVERGENCE_FLOOR:
        raise NumericalError(
            f"objective fell below {DIVERGENCE_FLOOR:g} at {where} ({bd.total:.3g}); "
            "negative edge mass dominates, lower beta_neg or raise alpha"
        )


def retrofit_closed_form(
    g: KnowledgeGraph,
    q_hat: EmbeddingSet,
    cfg: RetrofitConfig,
    on_sweep: Callable[[int, RetrofitProblem], None] | None = None,
) -> RetrofitResult:
    """Block-coordinate descent for identity, translation and linear kinds.

    Each sweep updates every relation (``b`` then ``A``, orthogonalized if
    configured) and then every vertex in sorted-id order. ``trace[0]`` is the
    objective at the starting point, ``trace[k]`` the objective after sweep k.
    """
    _check_aligned(g, q_hat)
    if cfg.uses_sgd(g.relations):
        raise InputError("neural relations are optimized by retrofit_sgd")
    beta_neg = cfg.resolved_beta_neg(False)
    neg = None
    if beta_neg > 0 and g.edges:
        neg = sample_negative_edges(g, g.relations, cfg.seed, cfg.negative_strategy)
    params = initial_params(g, q_hat, cfg)
    prob = RetrofitProblem(g, neg, q_hat, params, cfg, beta_neg=beta_neg)
    trace = [prob.objective()]
    _guard(trace[0], "initialization")
    done = False
    sweep = 0
    for sweep in range(1, cfg.max_sweeps + 1):
        prob.update_relations()
        prob.sweep_q()
        bd = prob.objective()
        _guard(bd, f"sweep {sweep}")
        trace.append(bd)
        if on_sweep is not None:
            on_sweep(sweep, prob)
        if converged(trace, cfg.tol):
            done = True
            break
    log.info("closed-form retrofit: %d sweeps, objective %.6g, converged=%s", sweep, trace[-1].total, done)
    return RetrofitResult(prob.embeddings(), dict(prob.params), trace, done, sweep, neg, prob.warnings)


def retrofit_sgd(g: KnowledgeGraph, q_hat: EmbeddingSet, cfg: RetrofitConfig) -> RetrofitResult:
    """Mini-batch SGD for neural relations.

    Negatives are resampled every epoch; the traced objective is always
    evaluated against the negatives drawn from ``cfg.seed`` so that epochs
    are comparable. The anchor and regularizer gradients are applied in
    every batch, scaled by the batch's share of the epoch's edges.
    """
    _check_aligned(g, q_hat)
    if g.relations and not cfg.uses_sgd(g.relations):
        raise InputError("retrofit_sgd needs every relation to be of the neural kind")
    beta_neg = cfg.resolved_beta_neg(True)
    sgd = cfg.sgd
    if sgd.batch_size < 1 or sgd.epochs < 0 or not sgd.learning_rate >= 0:
        raise InputError(f"invalid SGD settings {sgd}")

    def negatives(seed):
        if beta_neg > 0 and g.edges:
            return sample_negative_edges(g, g.relations, seed, cfg.negative_strategy)
        return None

    ref_neg = negatives(cfg.seed)
    params = initial_params(g, q_hat, cfg)
    ref = RetrofitProblem(g, ref_neg, q_hat, params, cfg, beta_neg=beta_neg)
    Q = ref.Q
    trace = [ref.objective()]
    _guard(trace[0], "initialization")
    lr = sgd.learning_rate
    rel_names = list(ref.rels)
    warns: list[str] = []

    for epoch in range(1, sgd.epochs + 1):
        prob = RetrofitProblem(
            g, negatives(_derived_seed(cfg.seed, epoch, 1)), q_hat, ref.params, cfg, beta_neg=beta_neg, state=Q
        )
        rel_id = np.concatenate([np.full(len(prob.rels[r].sw), k) for k, r in enumerate(rel_names)]) if rel_names else np.zeros(0, int)
        local = np.concatenate([np.arange(len(prob.rels[r].sw)) for r in rel_names]) if rel_names else np.zeros(0, int)
        n_edges = len(rel_id)
        order = np.random.default_rng([cfg.seed, epoch, 2]).permutation(n_edges)
        starts = range(0, max(n_edges, 1), sgd.batch_size)
        for bno, start in enumerate(starts):
            batch = order[start : start + sgd.batch_size]
            frac = len(batch) / n_edges if n_edges else 1.0
            gQ = {c: 2.0 * frac * prob.alpha[c][:, None] * (Q[c] - prob.Qhat[c]) for c in Q}
            gA = {}
            for k, r in enumerate(rel_names):
                sel = local[batch[rel_id[batch] == k]]
                p, rd = prob.params[r], prob.rels[r]
                grad_A = 2.0 * frac * cfg.lam * p.A
                if sel.size:
                    si, di, sw = rd.src_rows[sel], rd.dst_rows[sel], rd.sw[sel]
                    Qi, Qj = Q[rd.src_cls][si], Q[rd.dst_cls][di]
                    AQj = Qj @ p.A.T
                    s = np.einsum("ki,ki->k", Qi, AQj)
                    u = sw * (1.0 - np.tanh(s) ** 2)
                    np.add.at(gQ[rd.src_cls], si, u[:, None] * AQj)
                    np.add.at(gQ[rd.dst_cls], di, u[:, None] * (Qi @ p.A))
                    grad_A = grad_A + (Qi * u[:, None]).T @ Qj
                gA[r] = grad_A
            for c in Q:
                if not np.all(np.isfinite(gQ[c])):
                    raise NumericalError(f"non-finite gradient at epoch {epoch}, batch {bno}")
                Q[c] -= lr * gQ[c]
            for r, grad in gA.items():
                if not np.all(np.isfinite(grad)):
                    raise NumericalError(f"non-finite gradient at epoch {epoch}, batch {bno}")
                p = prob.params[r]
                prob.params[r] = p.replace(A=p.A - lr * grad)
        ref.params = prob.params
        bd = ref.objective()
        _guard(bd, f"epoch {epoch}")
        trace.append(bd)
        warns.extend(prob.warnings)
    return RetrofitResult(
        ref.embeddings(), dict(ref.params), trace, True, sgd.epochs, ref_neg, warns
    )


def retrofit(g: KnowledgeGraph, q_hat: EmbeddingSet, cfg: RetrofitConfig) -> RetrofitResult:
    if cfg.uses_sgd(g.relations):
        return retrofit_sgd(g, q_hat, cfg)
    return retrofit_closed_form(g, q_hat, cfg)
