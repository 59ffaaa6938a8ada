"""Evaluation protocols: leave-one-relation-out link prediction, lexical metrics,
and a planted-relation synthetic graph for ground-truth experiments."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np
from scipy import stats

from .embeddings import EmbeddingSet
from .engine import RetrofitConfig, retrofit
from .errors import InputError, NumericalError, ParseError
from .graph import Edge, KnowledgeGraph, NegativeStrategy, remove_relation, sample_negative_edges
from .penalty import PenaltyKind, RelationParams

log = logging.getLogger(__name__)

MIN_RELATION_EDGES = 10
TRAIN_FRACTION = 0.7


@dataclass
class EvalReport:
    metric: str
    value: float
    dispersion: float = 0.0
    n_train: int = 0
    n_test: int = 0
    seeds: list[int] = field(default_factory=list)
    extra: dict[str, object] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [
            f"metric={self.metric}",
            f"value={self.value:.17g}",
            f"dispersion={self.dispersion:.17g}",
            f"n_train={self.n_train}",
            f"n_test={self.n_test}",
            "seeds=" + ",".join(str(s) for s in self.seeds),
        ]
        lines += [f"{k}={v}" for k, v in sorted(self.extra.items())]
        return "\n".join(lines) + "\n"


# -- link prediction -------------------------------------------------------


@dataclass(frozen=True)
class LinkPredSplit:
    relation: str
    train_pos: tuple[Edge, ...]
    train_neg: tuple[Edge, ...]
    test_pos: tuple[Edge, ...]
    test_neg: tuple[Edge, ...]
    train_vertices: frozenset[str]
    test_vertices: frozenset[str]
    seed: int

    def labelled(self, part: str) -> tuple[list[Edge], np.ndarray]:
        pos, neg = (self.train_pos, self.train_neg) if part == "train" else (self.test_pos, self.test_neg)
        return list(pos) + list(neg), np.r_[np.ones(len(pos)), np.zeros(len(neg))]


def make_linkpred_split(
    g: KnowledgeGraph,
    r: str,
    neg_strategy: NegativeStrategy | str = NegativeStrategy.SAME_SOURCE,
    seed: int = 0,
    train_fraction: float = TRAIN_FRACTION,
) -> LinkPredSplit:
    """Split the source vertices of ``r`` into train/test and balance each side
    with as many non-edges per source as that source has edges."""
    if r not in g.relations:
        raise InputError(f"unknown relation {r!r}; available: {', '.join(g.relations)}")
    pos = g.edges_of(r)
    if len(pos) < MIN_RELATION_EDGES:
        raise InputError(f"relation {r!r} has {len(pos)} edges; at least {MIN_RELATION_EDGES} are needed")
    sources = sorted({e.src for e in pos})
    rng = np.random.default_rng(seed)
    order = [sources[k] for k in rng.permutation(len(sources))]
    n_train = int(round(train_fraction * len(sources)))
    n_train = min(max(n_train, 1), len(sources) - 1) if len(sources) > 1 else len(sources)
    train_v = frozenset(order[:n_train])
    test_v = frozenset(order[n_train:])

    negs = sample_negative_edges(g, [r], seed=seed, strategy=neg_strategy)
    if negs.skipped:
        have: dict[str, int] = {}
        for e in negs.edges:
            have[e.src] = have.get(e.src, 0) + 1
        want: dict[str, int] = {}
        for e in pos:
            want[e.src] = want.get(e.src, 0) + 1
        bad = sorted(s for s in want if have.get(s, 0) < want[s])
        raise InputError(f"relation {r!r}: saturated sources without enough non-edges: {', '.join(bad)}")

    def part(edges, vs):
        return tuple(e for e in edges if e.src in vs)

    return LinkPredSplit(
        r, part(pos, train_v), part(negs.edges, train_v), part(pos, test_v), part(negs.edges, test_v), train_v, test_v, seed
    )


def pair_features(q: EmbeddingSet, e: Edge) -> np.ndarray:
    """``[q_src ; q_dst]``, which keeps the edge direction."""
    for v in (e.src, e.dst):
        if v not in q:
            raise InputError(f"no embedding for {v!r}")
    return np.concatenate([q[e.src], q[e.dst]])


@dataclass
class ClassifierConfig:
    """Logistic regression settings.

    ``degree=2`` appends all pairwise products of the (standardized) pair
    features, which lets the model score interactions between the two
    endpoints; ``degree=1`` is a plain linear model on the concatenation.
    """

    l2: float = 1.0
    degree: int = 2
    tol: float = 1e-8
    max_iter: int = 100


def _expand(X: np.ndarray, degree: int) -> np.ndarray:
    if degree == 1:
        return X
    if degree != 2:
        raise InputError(f"unsupported feature degree {degree}")
    iu = np.triu_indices(X.shape[1])
    return np.hstack([X, (X[:, :, None] * X[:, None, :])[:, iu[0], iu[1]]])


class LogisticRegression:
    """l2-regularized logistic regression fitted by Newton's method.

    The loss is the mean log-loss plus ``l2 / (2 n) * ||w||^2`` (intercept
    unpenalized); iterations stop once the gradient max-norm drops below
    ``tol``. Features are standardized on the training data first.
    """

    def __init__(self, config: ClassifierConfig | None = None):
        self.config = config or ClassifierConfig()

    def _design(self, X):
        Z = (np.asarray(X, dtype=np.float64) - self.mu_) / self.sd_
        Z = _expand(Z, self.config.degree)
        return np.hstack([Z, np.ones((Z.shape[0], 1))])

    def fit(self, X, y) -> LogisticRegression:
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if len(np.unique(y)) < 2:
            raise InputError("training data contains a single class")
        self.mu_ = X.mean(axis=0)
        sd = X.std(axis=0)
        self.sd_ = np.where(sd > 0, sd, 1.0)
        Z = self._design(X)
        n, p = Z.shape
        reg = np.full(p, self.config.l2 / n)
        reg[-1] = 0.0

        def loss(w):
            z = Z @ w
            return float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * reg @ (w * w))

        w = np.zeros(p)
        cur = loss(w)
        for it in range(self.config.max_iter):
            z = Z @ w
            mu = 0.5 * (1.0 + np.tanh(0.5 * z))
            grad = Z.T @ (mu - y) / n + reg * w
            if np.abs(grad).max() < self.config.tol:
                break
            H = (Z * (mu * (1 - mu))[:, None]).T @ Z / n + np.diag(reg)
            H[np.diag_indices(p)] += 1e-12
            step = np.linalg.solve(H, grad)
            # backtracking keeps Newton stable on (nearly) separable data
            t, slope = 1.0, float(grad @ step)
            while t > 1e-10:
                new = loss(w - t * step)
                if new <= cur - 1e-4 * t * slope:
                    break
                t *= 0.5
            w = w - t * step
            cur = new
        else:
            log.warning("logistic regression stopped after %d Newton steps (gradient %.3g)", it + 1, np.abs(grad).max())
        if not np.all(np.isfinite(w)):
            raise NumericalError("logistic regression diverged")
        self.coef_ = w
        self.n_iter_ = it + 1
        return self

    def decision_function(self, X) -> np.ndarray:
        return self._design(X) @ self.coef_

    def predict(self, X) -> np.ndarray:
        return (self.decision_function(X) > 0).astype(np.float64)

    def score(self, X, y) -> float:
        return float(np.mean(self.predict(X) == np.asarray(y)))


class LinkClassifier:
    """A fitted classifier bound to an embedding set."""

    def __init__(self, q: EmbeddingSet, model: LogisticRegression):
        self.q = q
        self.model = model

    @property
    def label(self) -> str:
        c = self.model.config
        return f"l2-logistic-regression(degree={c.degree}, l2={c.l2:g})"

    def features(self, edges: Sequence[Edge]) -> np.ndarray:
        return np.array([pair_features(self.q, e) for e in edges])

    def predict(self, edges: Sequence[Edge]) -> np.ndarray:
        return self.model.predict(self.features(edges))

    def accuracy(self, edges: Sequence[Edge], labels) -> float:
        return float(np.mean(self.predict(edges) == np.asarray(labels)))


def train_link_classifier(
    split: LinkPredSplit, q: EmbeddingSet, hyper: ClassifierConfig | None = None, seed: int = 0
) -> LinkClassifier:
    """Fit on the split's training edges. Fitting is deterministic; ``seed`` is
    accepted for interface symmetry with stochastic classifiers."""
    edges, y = split.labelled("train")
    clf = LinkClassifier(q, LogisticRegression(hyper))
    clf.model.fit(clf.features(edges), y)
    return clf


def split_accuracy(split: LinkPredSplit, q: EmbeddingSet, hyper: ClassifierConfig | None = None) -> EvalReport:
    clf = train_link_classifier(split, q, hyper, split.seed)
    edges, y = split.labelled("test")
    return EvalReport(
        "accuracy",
        clf.accuracy(edges, y),
        n_train=len(split.train_pos) + len(split.train_neg),
        n_test=len(edges),
        seeds=[split.seed],
        extra={"classifier": clf.label, "relation": split.relation},
    )


NONE_KIND = "none"


def leave_one_relation_out(
    g: KnowledgeGraph,
    q_hat: EmbeddingSet,
    r: str,
    kind: str,
    cfg: RetrofitConfig,
    seed: int,
    hyper: ClassifierConfig | None = None,
) -> EvalReport:
    """Retrofit to the graph without ``r`` (or skip retrofitting for ``kind='none'``),
    then predict ``r`` edges from the resulting embeddings."""
    if r not in g.relations:
        raise InputError(f"unknown relation {r!r}; available: {', '.join(g.relations)}")
    if kind == NONE_KIND:
        q = q_hat
    else:
        run_cfg = dataclasses.replace(cfg, kind=PenaltyKind(kind), kind_by_relation={}, seed=seed)
        q = retrofit(remove_relation(g, r), q_hat, run_cfg).embeddings
    split = make_linkpred_split(g, r, cfg.negative_strategy, seed)
    rep = split_accuracy(split, q, hyper)
    rep.extra["kind"] = kind
    return rep


def repeat_eval(task: Callable[[int], float | EvalReport], n_repeats: int, base_seed: int = 0, metric: str = "accuracy") -> EvalReport:
    """Mean and sample standard deviation of ``task(seed)`` over consecutive seeds."""
    if n_repeats < 1:
        raise InputError("n_repeats must be at least 1")
    seeds = list(range(base_seed, base_seed + n_repeats))
    results = [task(s) for s in seeds]
    values = np.array([getattr(x, "value", x) for x in results], dtype=np.float64)
    first = results[0] if isinstance(results[0], EvalReport) else None
    return EvalReport(
        first.metric if first else metric,
        float(values.mean()),
        float(values.std(ddof=1)) if n_repeats > 1 else 0.0,
        n_train=first.n_train if first else 0,
        n_test=first.n_test if first else 0,
        seeds=seeds,
        extra={"values": ",".join(f"{v:.17g}" for v in values), **({k: v for k, v in first.extra.items()} if first else {})},
    )


# -- lexical metrics -------------------------------------------------------


def _cosine(a: np.ndarray, b: np.ndarray) -> float | None:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return None
    return float(a @ b / (na * nb))


def word_similarity(q: EmbeddingSet, dataset: Iterable[tuple[str, str, float]]) -> EvalReport:
    """Spearman correlation between cosine similarity and human scores."""
    pred, gold = [], []
    dropped = 0
    for w1, w2, score in dataset:
        if w1 not in q or w2 not in q:
            dropped += 1
            continue
        c = _cosine(q[w1], q[w2])
        if c is None:
            dropped += 1
            continue
        pred.append(c)
        gold.append(float(score))
    if len(pred) < 2:
        raise InputError(f"only {len(pred)} usable word pairs; need at least 2")
    rho = stats.spearmanr(pred, gold).statistic
    if not np.isfinite(rho):
        raise InputError("Spearman correlation undefined (constant predictions or scores)")
    return EvalReport("spearman", float(rho), n_test=len(pred), extra={"dropped": dropped})


def analogy_eval(q: EmbeddingSet, dataset: Iterable[tuple[str, str, str, str]]) -> EvalReport:
    """Mean cosine between ``q_d`` and the offset prediction ``q_b - q_a + q_c``."""
    sims = []
    dropped = 0
    for a, b, c, d in dataset:
        if not all(w in q for w in (a, b, c, d)):
            dropped += 1
            continue
        s = _cosine(q[d], q[b] - q[a] + q[c])
        if s is None:
            log.warning("dropping analogy %s %s %s %s: zero-norm operand", a, b, c, d)
            dropped += 1
            continue
        sims.append(s)
    if not sims:
        raise InputError("no usable analogy quadruples")
    return EvalReport("analogy_cosine", float(np.mean(sims)), n_test=len(sims), extra={"dropped": dropped})


def load_similarity_dataset(path: str | Path) -> list[tuple[str, str, float]]:
    path = Path(path)
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ParseError(path, lineno, f"expected w1<TAB>w2<TAB>score, got {len(fields)} fields")
            try:
                out.append((fields[0], fields[1], float(fields[2])))
            except ValueError:
                raise ParseError(path, lineno, f"bad score {fields[2]!r}") from None
    return out


def load_analogy_dataset(path: str | Path) -> list[tuple[str, str, str, str]]:
    path = Path(path)
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith(":"):
                continue
            fields = line.split()
            if len(fields) != 4:
                raise ParseError(path, lineno, f"expected 4 words, got {len(fields)}")
            out.append(tuple(fields))
    return out


# -- synthetic planted-relation graphs ---------------------------------------


class SyntheticGraph(NamedTuple):
    graph: KnowledgeGraph
    truth: EmbeddingSet
    q_hat: EmbeddingSet
    planted: dict[str, RelationParams]


def random_rotation(d: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed rotation (determinant +1)."""
    Z = rng.standard_normal((d, d))
    Qm, R = np.linalg.qr(Z)
    Qm = Qm * np.sign(np.diag(R))
    if np.linalg.det(Qm) < 0:
        Qm[:, 0] = -Qm[:, 0]
    return Qm


def synth_graph(
    n_vertices: int,
    n_relations: int,
    d: int,
    noise_sigma: float,
    seed: int,
    mean_out_degree: float = 3.0,
    translation_scale: float = 1.0,
) -> SyntheticGraph:
    """Gaussian ground-truth embeddings with planted rotation+translation relations.

    For each relation, the ``round(mean_out_degree * n)`` pairs with the
    smallest ``||R_r q_j + t_r - q_i||`` become edges. ``q_hat`` is the ground
    truth plus isotropic Gaussian noise.
    """
    if n_vertices < 20 or d < 2 or n_relations < 1 or noise_sigma < 0 or mean_out_degree <= 0:
        raise InputError(
            f"degenerate synthetic graph parameters (n={n_vertices}, relations={n_relations}, d={d}, sigma={noise_sigma})"
        )
    rng = np.random.default_rng(seed)
    width = len(str(n_vertices - 1))
    ids = [f"e{k:0{width}d}" for k in range(n_vertices)]
    truth = rng.standard_normal((n_vertices, d))
    n_edges = min(int(round(mean_out_degree * n_vertices)), n_vertices * (n_vertices - 1))
    edges: list[Edge] = []
    planted = {}
    for k in range(n_relations):
        rel = f"R{k}"
        R = random_rotation(d, rng)
        t = translation_scale * rng.standard_normal(d) / np.sqrt(d)
        pred = truth @ R.T + t  # row j holds R q_j + t
        dist = np.linalg.norm(truth[:, None, :] - pred[None, :, :], axis=2)  # [i, j]
        np.fill_diagonal(dist, np.inf)
        flat = np.argsort(dist, axis=None, kind="stable")[:n_edges]
        for i, j in zip(*np.unravel_index(flat, dist.shape)):
            edges.append(Edge(ids[i], ids[j], rel))
        planted[rel] = RelationParams(rel, PenaltyKind.LINEAR, R, t)
    noisy = truth + noise_sigma * rng.standard_normal(truth.shape)
    g = KnowledgeGraph(ids, edges)
    return SyntheticGraph(
        g,
        EmbeddingSet(dict(zip(ids, truth))),
        EmbeddingSet(dict(zip(ids, noisy))),
        planted,
    )
