"""Command-line front end.

Exit codes: 0 success, 1 input error, 2 numerical error, 3 retrofitting
stopped at ``--max-sweeps`` without converging (outputs are still written).

Option precedence is flag > ``--config`` file > built-in default. Every run
writes a manifest holding the fully resolved options; passing that manifest
back through ``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

from . import __version__
from .embeddings import EmbeddingFormat, EmbeddingSet, align, load_embeddings, save_embeddings
from .engine import QUpdate, RetrofitConfig, SGDConfig, retrofit
from .errors import InputError, NumericalError
from .evaluation import (
    NONE_KIND,
    ClassifierConfig,
    analogy_eval,
    leave_one_relation_out,
    load_analogy_dataset,
    load_similarity_dataset,
    repeat_eval,
    synth_graph,
    word_similarity,
)
from .graph import (
    KnowledgeGraph,
    NegativeStrategy,
    graph_stats,
    load_edgelist,
    sample_negative_edges,
    save_edgelist,
)
from .manifest import file_digest, format_value, read_config, write_manifest
from .penalty import PenaltyKind, save_params

log = logging.getLogger("kgretrofit")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_NOT_CONVERGED = 0, 1, 2, 3


def _bool(s: str | bool) -> bool:
    if isinstance(s, bool):
        return s
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise InputError(f"not a boolean: {s!r}")


def _opt_float(s):
    return None if s in (None, "", "none", "None") else float(s)


def _opt_str(s):
    return None if s in (None, "") else s


@dataclass
class Opt:
    flags: tuple[str, ...]
    dest: str
    type: Callable[[str], Any] = str
    default: Any = None
    help: str = ""
    multi: bool = False  # repeatable flag, comma-joined in config files
    store: Any = None  # value stored by a bare switch (store_const)
    required: bool = False


COMMON = [
    Opt(("--out-dir",), "out_dir", str, ".", "directory for output files"),
    Opt(("--seed",), "seed", int, 0, "random seed"),
    Opt(("--threads",), "threads", int, 1, "worker threads (results do not depend on it)"),
]
GRAPH = [
    Opt(("--graph",), "graph", str, None, "edge list: src<TAB>rel<TAB>dst", required=True),
    Opt(("--vertex-classes",), "vertex_classes", _opt_str, None, "vertex classes: id<TAB>class"),
]
EMBEDDINGS = [
    Opt(("--embeddings",), "embeddings", str, [], "embedding file, or class=path (repeatable)", multi=True, required=True),
    Opt(("--embeddings-format",), "embeddings_format", str, EmbeddingFormat.WORD2VEC.value, "word2vec-text or tsv"),
]
ENGINE = [
    Opt(("--kind",), "kind", str, PenaltyKind.LINEAR.value, "identity, translation, linear or neural"),
    Opt(("--relation-kind",), "relation_kind", str, [], "per-relation kind as rel=kind (repeatable)", multi=True),
    Opt(("--alpha",), "alpha", float, 1.0, "anchor strength"),
    Opt(("--alpha-grid",), "alpha_grid", float, [], "comma-separated alphas; one run per value", multi=True),
    Opt(("--beta-pos",), "beta_pos", float, 1.0, "weight of positive edges"),
    Opt(("--beta-neg",), "beta_neg", _opt_float, None, "weight of sampled negative edges (default 0, or 1 for neural)"),
    Opt(("--lambda",), "lam", float, 0.0, "l2 strength on learnable A"),
    Opt(("--max-sweeps",), "max_sweeps", int, 100, "sweep limit for closed-form runs"),
    Opt(("--tol",), "tol", float, 1e-6, "relative objective change that counts as converged"),
    Opt(("--no-orthogonalize",), "orthogonalize", _bool, True, "do not project A onto orthogonal matrices", store=False),
    Opt(("--freeze-a",), "learn_A", _bool, True, "keep every A at its initial value", store=False),
    Opt(("--q-update",), "q_update", str, QUpdate.GAUSS_SEIDEL.value, "gauss-seidel or jacobi"),
    Opt(("--negative-strategy",), "negative_strategy", str, NegativeStrategy.SAME_SOURCE.value, "same-source or class-restricted"),
    Opt(("--sgd-lr",), "sgd_lr", float, 0.01, "SGD learning rate (neural kind)"),
    Opt(("--sgd-epochs",), "sgd_epochs", int, 50, "SGD epochs (neural kind)"),
    Opt(("--sgd-batch",), "sgd_batch", int, 128, "SGD batch size (neural kind)"),
]
LINKPRED = [
    Opt(("--relation",), "relation", str, None, "relation to hold out and predict", required=True),
    Opt(("--kinds",), "kinds", str, [NONE_KIND, "identity", "linear"], "models to compare (none = no retrofitting)", multi=True),
    Opt(("--repeats",), "repeats", int, 3, "repeats with seeds seed..seed+n-1"),
    Opt(("--clf-l2",), "clf_l2", float, 1.0, "classifier l2 strength"),
    Opt(("--clf-degree",), "clf_degree", int, 2, "1 = linear features, 2 = add pairwise products"),
]
LEXICAL = [
    Opt(("--similarity",), "similarity", str, [], "word-similarity file w1<TAB>w2<TAB>score (repeatable)", multi=True),
    Opt(("--analogy",), "analogy", str, [], "analogy file 'a b c d' per line (repeatable)", multi=True),
]
SYNTH = [
    Opt(("--n-vertices",), "n_vertices", int, 500, "number of vertices"),
    Opt(("--n-relations",), "n_relations", int, 3, "number of planted relations"),
    Opt(("--dim",), "dim", int, 10, "embedding dimensionality"),
    Opt(("--noise",), "noise", float, 0.3, "std of the noise added to the ground truth"),
    Opt(("--mean-out-degree",), "mean_out_degree", float, 3.0, "edges per vertex and relation"),
    Opt(("--translation-scale",), "translation_scale", float, 1.0, "scale of the planted translations"),
]
SAMPLE = [
    Opt(("--relations",), "relations", str, [], "relations to sample for (default: all)", multi=True),
    Opt(("--strategy",), "strategy", str, NegativeStrategy.SAME_SOURCE.value, "same-source or class-restricted"),
    Opt(("--check",), "check", _opt_str, None, "verify an existing negatives file instead of sampling"),
]

COMMANDS: dict[str, tuple[str, list[Opt]]] = {
    "retrofit": ("retrofit embeddings to a knowledge graph", COMMON + GRAPH + EMBEDDINGS + ENGINE),
    "eval-linkpred": ("leave-one-relation-out link prediction", COMMON + GRAPH + EMBEDDINGS + ENGINE + LINKPRED),
    "eval-lexical": ("word similarity and analogy metrics", COMMON + EMBEDDINGS[:2] + LEXICAL),
    "synth": ("generate a planted-relation synthetic graph", COMMON + SYNTH),
    "stats": ("per-relation and per-class graph statistics", COMMON + GRAPH),
    "sample-neg": ("sample negative edges", COMMON + GRAPH + SAMPLE),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgretrofit", description="Retrofit embeddings to a typed knowledge graph and evaluate the result.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (help_text, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="key=value config file (a previous run's manifest works)")
        p.add_argument("--log-level", default="WARNING", help="logging level")
        for o in opts:
            if o.store is not None:
                p.add_argument(*o.flags, dest=o.dest, action="store_const", const=o.store, help=o.help)
            elif o.multi:
                p.add_argument(*o.flags, dest=o.dest, action="append", type=str, help=o.help)
            else:
                p.add_argument(*o.flags, dest=o.dest, type=o.type, help=o.help)
    return parser


def _split_multi(values: Sequence[str]) -> list[str]:
    out = []
    for v in values:
        out.extend(x for x in v.split(",") if x)
    return out


def resolve(command: str, ns: argparse.Namespace) -> dict[str, Any]:
    """Merge defaults, the config file and explicit flags (in rising precedence)."""
    explicit = vars(ns)
    file_cfg = read_config(explicit["config"]) if explicit.get("config") else {}
    opts = COMMANDS[command][1]
    known = {o.dest for o in opts} | {"command"}
    unknown = sorted(set(file_cfg) - known)
    if unknown:
        raise InputError(f"unknown config keys for {command}: {', '.join(unknown)}")
    if "command" in file_cfg and file_cfg["command"] != command:
        raise InputError(f"config was written by '{file_cfg['command']}', not '{command}'")
    out: dict[str, Any] = {}
    for o in opts:
        if o.dest in explicit:
            raw = explicit[o.dest]
        elif o.dest in file_cfg:
            raw = [file_cfg[o.dest]] if o.multi else file_cfg[o.dest]
        else:
            out[o.dest] = list(o.default) if o.multi else o.default
            continue
        if o.multi:
            out[o.dest] = [o.type(x) for x in _split_multi(raw)]
        elif isinstance(raw, str):
            out[o.dest] = o.type(raw)
        else:
            out[o.dest] = raw
    for o in opts:
        if o.required and out.get(o.dest) in (None, []):
            raise InputError(f"{o.flags[0]} is required")
    return out


# -- shared loading ------------------------------------------------------------


def _load_graph(a: dict) -> KnowledgeGraph:
    return load_edgelist(a["graph"], a["vertex_classes"])


def _load_embedding_sets(a: dict) -> dict[str | None, EmbeddingSet]:
    sets: dict[str | None, EmbeddingSet] = {}
    for item in a["embeddings"]:
        cls, path = item.split("=", 1) if "=" in item else (None, item)
        if cls in sets:
            raise InputError(f"two embedding files given for class {cls!r}")
        sets[cls] = load_embeddings(path, a["embeddings_format"])
    return sets


def _embedding_paths(a: dict) -> list[str]:
    return [s.split("=", 1)[1] if "=" in s else s for s in a["embeddings"]]


def _digests(paths: dict[str, str | None]) -> dict[str, str]:
    return {f"digest.{k}": file_digest(p) for k, p in paths.items() if p}


def _engine_config(a: dict, alpha: float | None = None) -> RetrofitConfig:
    by_rel = {}
    for item in a.get("relation_kind", []):
        if "=" not in item:
            raise InputError(f"--relation-kind expects rel=kind, got {item!r}")
        r, k = item.rsplit("=", 1)
        by_rel[r] = k
    try:
        return RetrofitConfig(
            alpha=a["alpha"] if alpha is None else alpha,
            beta_pos=a["beta_pos"],
            beta_neg=a["beta_neg"],
            lam=a["lam"],
            kind=a["kind"],
            kind_by_relation=by_rel,
            max_sweeps=a["max_sweeps"],
            tol=a["tol"],
            seed=a["seed"],
            sgd=SGDConfig(a["sgd_lr"], a["sgd_epochs"], a["sgd_batch"]),
            orthogonalize=a["orthogonalize"],
            learn_A=a["learn_A"],
            negative_strategy=a["negative_strategy"],
            q_update=a["q_update"],
            threads=a["threads"],
        )
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _out_dir(a: dict) -> Path:
    out = Path(a["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(command: str, a: dict, **extra) -> dict:
    return {"command": command, **{k: v for k, v in a.items()}, **extra}


def _embedding_format_for(e: EmbeddingSet) -> EmbeddingFormat:
    return EmbeddingFormat.WORD2VEC if len(set(e.dim_by_class.values())) <= 1 else EmbeddingFormat.TSV


# -- subcommands -----------------------------------------------------------


def cmd_retrofit(a: dict) -> int:
    g = _load_graph(a)
    q_hat = align(g, _load_embedding_sets(a))
    out = _out_dir(a)
    grid = a["alpha_grid"] or [None]
    digests = _digests({"graph": a["graph"], "vertex_classes": a["vertex_classes"]})
    digests.update({f"digest.embeddings{k}": file_digest(p) for k, p in enumerate(_embedding_paths(a))})
    status = EXIT_OK
    print("alpha\tsweeps\tconverged\tobjective")
    for alpha in grid:
        cfg = _engine_config(a, alpha)
        suffix = "" if alpha is None else f"_alpha-{format_value(alpha)}"
        res = retrofit(g, q_hat, cfg)
        res.save(out, suffix)
        fin = res.final
        extra = {
            **digests,
            "alpha": cfg.alpha,
            # each manifest replays its own single run
            "alpha_grid": [],
            "result.sweeps": res.sweeps_run,
            "result.converged": res.converged,
            "result.anchor": fin.anchor_term,
            "result.positive": fin.positive_term,
            "result.negative": fin.negative_term,
            "result.regularizer": fin.regularizer_term,
            "result.total": fin.total,
            "result.warnings": len(res.warnings),
        }
        for c, (n, t) in q_hat.coverage.items():
            extra[f"coverage.{c or 'unclassed'}"] = f"{n}/{t}"
        write_manifest(out / f"manifest{suffix}.txt", _manifest("retrofit", a, **extra))
        print(f"{format_value(cfg.alpha)}\t{res.sweeps_run}\t{format_value(res.converged)}\t{fin.total:.6g}")
        if not res.converged:
            status = EXIT_NOT_CONVERGED
    return status


def cmd_eval_linkpred(a: dict) -> int:
    g = _load_graph(a)
    r = a["relation"]
    if r not in g.relations:
        raise InputError(f"unknown relation {r!r}; available: {', '.join(g.relations)}")
    q_hat = align(g, _load_embedding_sets(a))
    cfg = _engine_config(a)
    hyper = ClassifierConfig(l2=a["clf_l2"], degree=a["clf_degree"])
    out = _out_dir(a)
    rows = []
    for kind in a["kinds"]:
        if kind != NONE_KIND:
            PenaltyKind(kind)
        rep = repeat_eval(
            lambda seed, kind=kind: leave_one_relation_out(g, q_hat, r, kind, cfg, seed, hyper),
            a["repeats"],
            a["seed"],
        )
        rows.append((kind, rep))
    with open(out / "linkpred.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("kind\tmean\tstd\tvalues\tn_train\tn_test\tseeds\tclassifier\n")
        for kind, rep in rows:
            fh.write(
                f"{kind}\t{rep.value:.17g}\t{rep.dispersion:.17g}\t{rep.extra['values']}\t"
                f"{rep.n_train}\t{rep.n_test}\t{format_value(rep.seeds)}\t{rep.extra['classifier']}\n"
            )
    digests = _digests({"graph": a["graph"], "vertex_classes": a["vertex_classes"]})
    digests.update({f"digest.embeddings{k}": file_digest(p) for k, p in enumerate(_embedding_paths(a))})
    write_manifest(out / "manifest.txt", _manifest("eval-linkpred", a, **digests))
    print(f"model\t{r} ({rows[0][1].n_train}/{rows[0][1].n_test})" if rows else "model")
    for kind, rep in rows:
        label = "None" if kind == NONE_KIND else f"FR-{kind.capitalize()}"
        print(f"{label}\t{100 * rep.value:.2f} ± {100 * rep.dispersion:.2f}")
    print(f"# classifier: {rows[0][1].extra['classifier'] if rows else '-'}, mean ± sample std over seeds")
    return EXIT_OK


def cmd_eval_lexical(a: dict) -> int:
    sets = _load_embedding_sets(a)
    if len(sets) != 1:
        raise InputError("eval-lexical takes a single embedding file")
    q = next(iter(sets.values()))
    out = _out_dir(a)
    rows = []
    for path in a["similarity"]:
        rows.append((Path(path).name, word_similarity(q, load_similarity_dataset(path))))
    for path in a["analogy"]:
        rows.append((Path(path).name, analogy_eval(q, load_analogy_dataset(path))))
    if not rows:
        raise InputError("give at least one --similarity or --analogy dataset")
    with open(out / "lexical.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("dataset\tmetric\tvalue\tn_used\tn_dropped\n")
        for name, rep in rows:
            fh.write(f"{name}\t{rep.metric}\t{rep.value:.17g}\t{rep.n_test}\t{rep.extra['dropped']}\n")
    paths = {f"dataset{k}": p for k, p in enumerate(a["similarity"] + a["analogy"])}
    paths.update({f"embeddings{k}": p for k, p in enumerate(_embedding_paths(a))})
    write_manifest(out / "manifest.txt", _manifest("eval-lexical", a, **_digests(paths)))
    for name, rep in rows:
        print(f"{name}\t{rep.metric}\t{rep.value:.4f}\t(n={rep.n_test}, dropped {rep.extra['dropped']})")
    return EXIT_OK


def cmd_synth(a: dict) -> int:
    sg = synth_graph(
        a["n_vertices"], a["n_relations"], a["dim"], a["noise"], a["seed"],
        mean_out_degree=a["mean_out_degree"], translation_scale=a["translation_scale"],
    )
    out = _out_dir(a)
    save_edgelist(sg.graph, out / "graph.tsv")
    save_embeddings(sg.truth, out / "truth.txt")
    save_embeddings(sg.q_hat, out / "q_hat.txt")
    save_params(sg.planted, out / "planted_params.txt")
    write_manifest(out / "manifest.txt", _manifest("synth", a))
    print(graph_stats(sg.graph).to_text(), end="")
    return EXIT_OK


def cmd_stats(a: dict) -> int:
    g = _load_graph(a)
    text = graph_stats(g).to_text()
    print(text, end="")
    out = _out_dir(a)
    (out / "stats.tsv").write_text(text, encoding="utf-8")
    write_manifest(
        out / "manifest.txt",
        _manifest("stats", a, **_digests({"graph": a["graph"], "vertex_classes": a["vertex_classes"]})),
    )
    return EXIT_OK


def cmd_sample_neg(a: dict) -> int:
    g = _load_graph(a)
    if a["check"]:
        negs = load_edgelist(a["check"])
        bad = [e for e in negs.edges if e in g]
        unknown = [v for v in negs.vertex_ids if v not in g]
        for e in bad[:20]:
            print(f"positive edge in negatives: {e.src}\t{e.rel}\t{e.dst}", file=sys.stderr)
        if unknown:
            print(f"{len(unknown)} vertices not in the graph (e.g. {unknown[0]})", file=sys.stderr)
        print(f"checked {len(negs.edges)} negatives: {len(bad)} overlap with positives")
        return EXIT_OK if not bad and not unknown else EXIT_INPUT
    rels = a["relations"] or None
    negs = sample_negative_edges(g, rels, a["seed"], a["strategy"])
    out = _out_dir(a)
    negs.save(out / "negatives.tsv")
    write_manifest(
        out / "manifest.txt",
        _manifest(
            "sample-neg", a,
            **_digests({"graph": a["graph"], "vertex_classes": a["vertex_classes"]}),
            **{"result.negatives": len(negs), "result.skipped": negs.skipped},
        ),
    )
    print(f"sampled {len(negs)} negatives for {negs.n_positive} positives ({negs.skipped} skipped)")
    return EXIT_OK


HANDLERS = {
    "retrofit": cmd_retrofit,
    "eval-linkpred": cmd_eval_linkpred,
    "eval-lexical": cmd_eval_lexical,
    "synth": cmd_synth,
    "stats": cmd_stats,
    "sample-neg": cmd_sample_neg,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=getattr(ns, "log_level", "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        args = resolve(ns.command, ns)
        return HANDLERS[ns.command](args)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
