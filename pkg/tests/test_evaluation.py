import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kgretrofit.embeddings import EmbeddingSet
from kgretrofit.engine import RetrofitConfig, objective
from kgretrofit.errors import InputError, ParseError
from kgretrofit.evaluation import (
    ClassifierConfig,
    EvalReport,
    LogisticRegression,
    analogy_eval,
    leave_one_relation_out,
    load_analogy_dataset,
    load_similarity_dataset,
    make_linkpred_split,
    pair_features,
    repeat_eval,
    split_accuracy,
    synth_graph,
    word_similarity,
)
from kgretrofit.evaluation import _cosine
from kgretrofit.graph import Edge, KnowledgeGraph

from _util import random_graph


def average_ranks(x):
    """1-based ranks, ties get the mean of the positions they span."""
    x = list(x)
    ranks = [0.0] * len(x)
    for i, xi in enumerate(x):
        below = sum(1 for xj in x if xj < xi)
        equal = sum(1 for xj in x if xj == xi)
        ranks[i] = below + (equal + 1) / 2
    return ranks


def spearman_oracle(a, b):
    ra, rb = average_ranks(a), average_ranks(b)
    n = len(ra)
    ma, mb = sum(ra) / n, sum(rb) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(ra, rb))
    va = sum((x - ma) ** 2 for x in ra)
    vb = sum((y - mb) ** 2 for y in rb)
    return cov / (va * vb) ** 0.5


def similarity_instance(rng, n_words=15, n_pairs=25, d=3):
    # repeated vectors and integer scores force exact ties on both sides
    dirs = rng.normal(size=(4, d))
    q = EmbeddingSet({f"w{k}": dirs[rng.integers(4)] for k in range(n_words)})
    data = []
    for _ in range(n_pairs):
        a, b = rng.choice(n_words, size=2, replace=False)
        data.append((f"w{a}", f"w{b}", float(rng.integers(0, 4))))
    return q, data


class TestSplit:
    def graph(self, n_edges=10, n=20, seed=0):
        rng = np.random.default_rng(seed)
        ids = [f"v{k:02d}" for k in range(n)]
        edges = set()
        while len(edges) < n_edges:
            i, j = rng.choice(n, size=2, replace=False)
            edges.add(Edge(ids[i], ids[j], "R"))
        return KnowledgeGraph(ids, edges)

    def test_balance(self):
        s = make_linkpred_split(self.graph(), "R", seed=0)
        assert len(s.train_pos) + len(s.test_pos) == 10
        assert len(s.train_neg) == len(s.train_pos)
        assert len(s.test_neg) == len(s.test_pos)

    def test_deterministic(self):
        g = self.graph(40, 30)
        assert make_linkpred_split(g, "R", seed=4) == make_linkpred_split(g, "R", seed=4)

    @pytest.mark.parametrize("seed", range(5))
    def test_invariants(self, seed):
        g = self.graph(60, 40, seed)
        s = make_linkpred_split(g, "R", seed=seed)
        assert not (s.train_vertices & s.test_vertices)
        sources = {e.src for e in g.edges_of("R")}
        assert len(s.train_vertices) == round(0.7 * len(sources))
        for pos, neg, vs in [(s.train_pos, s.train_neg, s.train_vertices), (s.test_pos, s.test_neg, s.test_vertices)]:
            assert all(e.src in vs for e in pos + neg)
            assert not any(e in g for e in neg)
            for v in vs:
                assert sum(e.src == v for e in pos) == sum(e.src == v for e in neg)

    def test_too_small(self):
        with pytest.raises(InputError, match="at least 10"):
            make_linkpred_split(self.graph(9), "R")

    def test_saturated_listed(self):
        ids = [f"v{k}" for k in range(6)]
        edges = [("v0", d, "R") for d in ids[1:]] + [(f"v{k}", "v0", "R") for k in range(1, 6)]
        with pytest.raises(InputError, match="saturated sources.*v0"):
            make_linkpred_split(KnowledgeGraph(ids, edges), "R")

    def test_constant_classifier_half(self):
        s = make_linkpred_split(self.graph(40, 30), "R", seed=1)
        _, y = s.labelled("test")
        assert np.mean(np.zeros_like(y) == y) == 0.5


class TestFeatures:
    def test_concat(self):
        q = EmbeddingSet({"a": [1.0, 0.0], "b": [0.0, 2.0, 5.0]}, {"a": "x", "b": "y"})
        np.testing.assert_array_equal(pair_features(q, Edge("a", "b", "R")), [1, 0, 0, 2, 5])
        assert pair_features(q, Edge("a", "b", "R")).shape == (5,)

    def test_direction_sensitive(self):
        q = EmbeddingSet({"a": [1.0, 0.0], "b": [0.0, 2.0]})
        assert not np.array_equal(pair_features(q, Edge("a", "b", "R")), pair_features(q, Edge("b", "a", "R")))

    def test_missing(self):
        with pytest.raises(InputError):
            pair_features(EmbeddingSet({"a": [1.0]}), Edge("a", "z", "R"))


class TestClassifier:
    @pytest.mark.parametrize("degree", [1, 2])
    def test_separable(self, degree):
        rng = np.random.default_rng(0)
        y = np.tile([0.0, 1.0], 100)
        X = rng.uniform(-1, 1, size=(200, 3))
        X[:, 0] += np.where(y == 1, 2.0, -2.0)
        m = LogisticRegression(ClassifierConfig(l2=1e-3, degree=degree)).fit(X[:100], y[:100])
        assert m.score(X[100:], y[100:]) == 1.0

    def test_shuffled_labels_near_chance(self):
        inside = 0
        for seed in range(40):
            rng = np.random.default_rng(seed)
            X = rng.normal(size=(400, 4))
            y = rng.permutation(np.repeat([0.0, 1.0], 200))
            m = LogisticRegression(ClassifierConfig(degree=1)).fit(X[:200], y[:200])
            inside += 0.4 <= m.score(X[200:], y[200:]) <= 0.6
        assert inside >= 0.95 * 40

    def test_converges_to_tolerance(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(150, 3))
        y = (rng.random(150) < 1 / (1 + np.exp(-X[:, 0]))).astype(float)
        m = LogisticRegression(ClassifierConfig(l2=1.0, degree=2)).fit(X, y)
        Z = m._design(X)
        mu = 1 / (1 + np.exp(-(Z @ m.coef_)))
        reg = np.full(Z.shape[1], 1.0 / 150)
        reg[-1] = 0
        assert np.abs(Z.T @ (mu - y) / 150 + reg * m.coef_).max() < 1e-8

    def test_single_class(self):
        with pytest.raises(InputError, match="single class"):
            LogisticRegression().fit(np.ones((4, 2)), np.ones(4))

    def test_report_labels_classifier(self):
        sg = synth_graph(60, 1, 3, 0.1, seed=0)
        rep = split_accuracy(make_linkpred_split(sg.graph, "R0", seed=0), sg.q_hat)
        assert rep.extra["classifier"] == "l2-logistic-regression(degree=2, l2=1)"
        assert 0.0 <= rep.value <= 1.0


class TestWordSimilarity:
    def test_perfect_and_reversed(self):
        q = EmbeddingSet({"a": [1.0, 0.0], "b": [1.0, 0.2], "c": [1.0, 1.0], "d": [0.0, 1.0]})
        pairs = [("a", "b"), ("a", "c"), ("a", "d")]
        up = [(x, y, s) for (x, y), s in zip(pairs, [3.0, 2.0, 1.0])]
        down = [(x, y, s) for (x, y), s in zip(pairs, [1.0, 2.0, 3.0])]
        assert word_similarity(q, up).value == pytest.approx(1.0, abs=1e-15)
        assert word_similarity(q, down).value == pytest.approx(-1.0, abs=1e-15)

    @pytest.mark.parametrize("seed", range(20))
    def test_oracle_with_ties(self, seed):
        rng = np.random.default_rng(seed)
        q, data = similarity_instance(rng)
        # rank the exact values the metric sees; the oracle owns ranking and correlation
        sims = [_cosine(q[a], q[b]) for a, b, _ in data]
        expected = spearman_oracle(sims, [s for *_, s in data])
        assert abs(word_similarity(q, data).value - expected) < 1e-12

    def test_drops_missing(self):
        rng = np.random.default_rng(3)
        q, data = similarity_instance(rng)
        extra = [("w0", "ghost", 5.0), ("nobody", "w1", 1.0)]
        full = word_similarity(q, data + extra)
        assert full.extra["dropped"] == 2
        assert full.value == word_similarity(q, data).value

    def test_too_few(self):
        with pytest.raises(InputError):
            word_similarity(EmbeddingSet({"a": [1.0]}), [("a", "b", 1.0)])

    def test_loader(self, tmp_path):
        (tmp_path / "s.tsv").write_text("# ws\ncat\tdog\t7.5\n")
        assert load_similarity_dataset(tmp_path / "s.tsv") == [("cat", "dog", 7.5)]
        (tmp_path / "bad.tsv").write_text("cat dog 7.5\n")
        with pytest.raises(ParseError):
            load_similarity_dataset(tmp_path / "bad.tsv")


class TestAnalogy:
    def test_exact_and_orthogonal(self):
        q = EmbeddingSet({"a": [0.0, 0.0, 1.0], "b": [1.0, 0.0, 1.0], "c": [0.0, 1.0, 0.0], "d": [1.0, 1.0, 0.0], "e": [0.0, 0.0, 1.0]})
        assert analogy_eval(q, [("a", "b", "c", "d")]).value == pytest.approx(1.0)
        # b - a + c = (1, 1, 0), orthogonal to e
        assert analogy_eval(q, [("a", "b", "c", "e")]).value == 0.0
        assert analogy_eval(q, [("a", "b", "c", "d"), ("a", "b", "c", "e")]).value == pytest.approx(0.5)

    def test_zero_norm_dropped(self, caplog):
        q = EmbeddingSet({"a": [1.0, 0.0], "b": [1.0, 0.0], "c": [0.0, 0.0], "d": [0.0, 1.0]})
        rep = analogy_eval(q, [("a", "b", "c", "d"), ("a", "b", "d", "d"), ("a", "b", "x", "d")])
        assert rep.n_test == 1 and rep.extra["dropped"] == 2
        assert "zero-norm" in caplog.text

    def test_loader(self, tmp_path):
        (tmp_path / "a.txt").write_text(": capitals\nathens greece paris france\n")
        assert load_analogy_dataset(tmp_path / "a.txt") == [("athens", "greece", "paris", "france")]


class TestRepeat:
    def test_single(self):
        rep = repeat_eval(lambda s: 0.7, 1)
        assert rep.value == 0.7 and rep.dispersion == 0.0

    def test_constant(self):
        assert repeat_eval(lambda s: 0.5, 4).dispersion == 0.0

    def test_sample_std(self):
        vals = {0: 0.8, 1: 0.9, 2: 1.0}
        rep = repeat_eval(lambda s: vals[s], 3)
        assert rep.value == pytest.approx(0.9)
        assert rep.dispersion == pytest.approx(0.1)
        assert rep.seeds == [0, 1, 2]

    def test_to_text(self):
        text = EvalReport("accuracy", 0.5, 0.1, 3, 4, [1, 2]).to_text()
        assert "metric=accuracy\n" in text and "seeds=1,2\n" in text


class TestSynth:
    def test_deterministic(self):
        a, b = synth_graph(50, 2, 4, 0.3, seed=9), synth_graph(50, 2, 4, 0.3, seed=9)
        assert a.graph == b.graph and a.q_hat == b.q_hat

    def test_shape(self):
        sg = synth_graph(100, 3, 5, 0.2, seed=1)
        assert len(sg.graph) == 100
        assert sg.graph.relations == ["R0", "R1", "R2"]
        assert all(len(sg.graph.edges_of(r)) == 300 for r in sg.graph.relations)
        for p in sg.planted.values():
            np.testing.assert_allclose(p.A.T @ p.A, np.eye(5), atol=1e-12)
            assert np.linalg.det(p.A) > 0

    def test_plant_consistency(self):
        sg = synth_graph(80, 2, 4, 0.0, seed=2)
        assert sg.q_hat == sg.truth
        bd = objective(sg.graph, None, sg.truth, sg.q_hat, sg.planted, RetrofitConfig())
        assert bd.anchor_term == 0.0
        # every edge is below the selection threshold, so no edge can beat the best non-edge by much
        g = sg.graph
        for r, p in sg.planted.items():
            ids = g.vertex_ids
            T = np.array([sg.truth[v] for v in ids])
            dist = np.linalg.norm(T[:, None, :] - (T @ p.A.T + p.b)[None, :, :], axis=2)
            np.fill_diagonal(dist, np.inf)
            idx = {v: k for k, v in enumerate(ids)}
            on = [dist[idx[e.src], idx[e.dst]] for e in g.edges_of(r)]
            mask = np.ones_like(dist, dtype=bool)
            for e in g.edges_of(r):
                mask[idx[e.src], idx[e.dst]] = False
            np.fill_diagonal(mask, False)
            assert max(on) <= dist[mask].min()

    def test_degenerate(self):
        with pytest.raises(InputError):
            synth_graph(10, 1, 3, 0.1, seed=0)

    def test_linear_beats_identity(self):
        sg = synth_graph(500, 3, 10, 0.3, seed=0)
        cfg = RetrofitConfig()
        lin = leave_one_relation_out(sg.graph, sg.q_hat, "R0", "linear", cfg, seed=0).value
        ident = leave_one_relation_out(sg.graph, sg.q_hat, "R0", "identity", cfg, seed=0).value
        assert lin > ident

    def test_unknown_relation(self):
        sg = synth_graph(30, 1, 3, 0.1, seed=0)
        with pytest.raises(InputError, match="available: R0"):
            leave_one_relation_out(sg.graph, sg.q_hat, "R7", "linear", RetrofitConfig(), seed=0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16), n_rel=st.integers(1, 3))
def test_split_property(seed, n_rel):
    g = random_graph(np.random.default_rng(seed), 30, n_rel, 90)
    for r in g.relations:
        try:
            s = make_linkpred_split(g, r, seed=seed)
        except InputError:
            continue
        assert not (s.train_vertices & s.test_vertices)
        assert set(s.train_pos) | set(s.test_pos) == set(g.edges_of(r))
        assert len(s.train_neg) == len(s.train_pos) and len(s.test_neg) == len(s.test_pos)
