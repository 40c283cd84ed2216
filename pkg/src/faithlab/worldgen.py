"""Synthetic world knowledge graph and interconnected QA clusters.

A graph holds functional triples ``(subject, relation, object)`` over a set
of famous subjects and a disjoint set of background entities (relation values
and background people).  Each qualifying famous triple becomes a cluster:

* a base question and three paraphrases (different token patterns, same fact),
* 2-hop questions chaining through the base answer, whose knowledge set
  contains the base triple,
* same-answer questions about background subjects that share the base answer
  but none of its knowledge.

Questions are short token sequences.  Entities are atomic tokens, so every
answer is a single token.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

log = logging.getLogger(__name__)

GENERATOR_VERSION = "faithlab-worldgen/1"
KINDS = ("base", "paraphrased", "multihop", "same_answer")

PAD, REJECT, QMARK = "<pad>", "<reject>", "?"
FUNCTION_WORDS = ("WHAT", "OF", "'S", "IS", "TELL", "ABOUT", "WHICH", "FOR", "NAME", "HOP")
SPECIAL_TOKENS = (PAD, REJECT, QMARK) + FUNCTION_WORDS

# "R" is the relation token, "S" the subject token.
TEMPLATE_BANK = (
    ("WHAT", "R", "OF", "S", "?"),
    ("S", "'S", "R", "IS", "?"),
    ("TELL", "R", "ABOUT", "S", "?"),
    ("WHICH", "S", "R", "FOR", "?"),
    ("NAME", "R", "FOR", "S", "?"),
    ("S", "R", "IS", "WHAT", "?"),
)
MULTIHOP_TEMPLATE = ("HOP", "R2", "R1", "S", "?")


class WorldGenError(ValueError):
    pass


class DatasetFormatError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class Triple(NamedTuple):
    s: str
    r: str
    o: str


@dataclass(frozen=True)
class KnowledgeGraph:
    famous: tuple
    background: tuple
    relations: tuple
    triples: tuple
    relation_objects: dict = field(compare=False, repr=False, default_factory=dict)

    def __post_init__(self):
        if set(self.famous) & set(self.background):
            raise WorldGenError("famous and background entity sets overlap")
        seen = {}
        for t in self.triples:
            if seen.setdefault((t.s, t.r), t.o) != t.o:
                raise WorldGenError(f"relation {t.r} is not functional for {t.s}")

    @property
    def entities(self):
        return self.famous + self.background

    def outgoing(self):
        out = {}
        for t in self.triples:
            out.setdefault(t.s, []).append(t)
        return out

    def by_object(self):
        out = {}
        for t in self.triples:
            out.setdefault(t.o, []).append(t)
        return out

    def objects_of(self, relation):
        """Valid values of ``relation``: its declared range plus observed objects."""
        vals = set(self.relation_objects.get(relation, ()))
        vals.update(t.o for t in self.triples if t.r == relation)
        return sorted(vals)


@dataclass(frozen=True)
class QAItem:
    id: str
    kind: str
    question: tuple
    answer: str
    candidates: tuple
    knowledge: frozenset
    cluster_id: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise WorldGenError(f"unknown item kind {self.kind!r}")

    def to_record(self):
        return {
            "record": "item",
            "id": self.id,
            "kind": self.kind,
            "question": list(self.question),
            "answer": self.answer,
            "candidates": list(self.candidates),
            "knowledge": sorted(list(t) for t in self.knowledge),
            "cluster_id": self.cluster_id,
        }

    @classmethod
    def from_record(cls, rec):
        return cls(
            id=rec["id"],
            kind=rec["kind"],
            question=tuple(rec["question"]),
            answer=rec["answer"],
            candidates=tuple(rec["candidates"]),
            knowledge=frozenset(Triple(*t) for t in rec["knowledge"]),
            cluster_id=rec["cluster_id"],
        )


@dataclass(frozen=True)
class Cluster:
    base: QAItem
    paraphrases: tuple
    multihops: tuple = ()
    same_answers: tuple = ()

    @property
    def id(self):
        return self.base.cluster_id

    def items(self):
        return (self.base,) + self.paraphrases + self.multihops + self.same_answers


@dataclass(frozen=True)
class Splits:
    forget: tuple
    retain: tuple
    test: tuple
    fractions: tuple = (0.05, 0.10, 0.70)

    def __post_init__(self):
        f, r, t = set(self.forget), set(self.retain), set(self.test)
        if f & r or f & t or r & t:
            raise WorldGenError("splits overlap")

    def to_record(self):
        return {"forget": list(self.forget), "retain": list(self.retain), "test": list(self.test),
                "fractions": list(self.fractions)}

    @classmethod
    def from_record(cls, rec):
        return cls(tuple(rec["forget"]), tuple(rec["retain"]), tuple(rec["test"]), tuple(rec["fractions"]))


class Vocab:
    """Stable token <-> id table."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise WorldGenError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, token):
        try:
            return self.index[token]
        except KeyError:
            raise KeyError(f"token {token!r} not in vocabulary") from None

    def encode(self, tokens):
        return [self.id(t) for t in tokens]

    def decode(self, ids):
        return [self.tokens[i] for i in ids]

    def to_record(self):
        return {"record": "vocab", "tokens": self.tokens}


def build_vocab(graph: KnowledgeGraph) -> Vocab:
    return Vocab(list(SPECIAL_TOKENS) + list(graph.relations) + list(graph.famous) + list(graph.background))


def _rng(seed, stream):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream,)))


def generate_graph(
    seed: int = 0,
    n_famous: int = 200,
    n_background: int = 600,
    n_relations: int = 19,
    chain_density: float = 0.6,
    max_facts: int = 5,
    objects_per_relation: tuple = (6, 14),
    max_out_degree: int = 3,
) -> KnowledgeGraph:
    """Seeded synthetic knowledge graph.

    Every relation gets a private range of value entities.  Famous people get
    1..``max_facts`` facts over distinct relations; background people get one
    or two facts, which makes objects shared with famous triples.  A
    ``chain_density`` fraction of value entities get their own outgoing facts,
    enabling 2-hop chains.
    """
    if min(n_famous, n_background, n_relations, max_facts) < 1:
        raise WorldGenError("entity, relation and fact counts must be >= 1")
    if not 0.0 <= chain_density <= 1.0:
        raise WorldGenError("chain_density must lie in [0, 1]")
    lo, hi = objects_per_relation
    if lo < 1 or hi < lo:
        raise WorldGenError("invalid objects_per_relation range")
    rng = _rng(seed, 1)

    relations = tuple(f"R{r:02d}" for r in range(n_relations))
    famous = tuple(f"F{i:03d}" for i in range(n_famous))
    pools, values = {}, []
    for r in relations:
        size = int(rng.integers(lo, hi + 1))
        pools[r] = tuple(f"V{len(values) + j:04d}" for j in range(size))
        values.extend(pools[r])
    people = tuple(f"B{i:04d}" for i in range(n_background))

    triples = []

    def facts_for(subject, n, exclude=()):
        choices = [r for r in relations if r not in exclude]
        n = min(n, len(choices))
        for r in sorted(rng.choice(choices, size=n, replace=False)):
            triples.append(Triple(subject, str(r), str(rng.choice(pools[r]))))

    for s in famous:
        facts_for(s, int(rng.integers(1, max_facts + 1)))
    owner = {v: r for r, vs in pools.items() for v in vs}
    for v in values:
        if rng.random() < chain_density:
            facts_for(v, int(rng.integers(1, max_out_degree + 1)), exclude=(owner[v],))
    for b in people:
        facts_for(b, int(rng.integers(1, 3)))

    return KnowledgeGraph(
        famous=famous,
        background=tuple(values) + people,
        relations=relations,
        triples=tuple(sorted(set(triples))),
        relation_objects={r: tuple(v) for r, v in pools.items()},
    )


def relation_templates(graph: KnowledgeGraph, seed: int, templates_per_relation: int = 4):
    """Per-relation ordering of surface templates; the first is the base form."""
    if templates_per_relation < 4:
        raise WorldGenError("need at least 4 templates per relation (base + 3 paraphrases)")
    if templates_per_relation > len(TEMPLATE_BANK):
        raise WorldGenError(f"at most {len(TEMPLATE_BANK)} templates available")
    rng = _rng(seed, 2)
    out = {}
    for r in graph.relations:
        order = rng.permutation(len(TEMPLATE_BANK))[:templates_per_relation]
        out[r] = [TEMPLATE_BANK[i] for i in order]
    return out


def render(template, relation, subject):
    return tuple(relation if tok == "R" else subject if tok == "S" else tok for tok in template)


def render_multihop(r1, r2, subject):
    mapping = {"R1": r1, "R2": r2, "S": subject}
    return tuple(mapping.get(tok, tok) for tok in MULTIHOP_TEMPLATE)


def build_clusters(
    graph: KnowledgeGraph,
    templates_per_relation: int = 4,
    seed: int = 0,
    max_same_answer: int = 8,
) -> list:
    """One cluster per famous triple that has at least one 2-hop or same-answer item."""
    templates = relation_templates(graph, seed, templates_per_relation)
    rng = _rng(seed, 3)
    out_edges, by_obj = graph.outgoing(), graph.by_object()
    famous = set(graph.famous)
    objects = {r: graph.objects_of(r) for r in graph.relations}
    skipped_relations = set()

    def options(relation, answer):
        pool = [o for o in objects[relation] if o != answer]
        if len(pool) < 2:
            return None
        picks = [str(x) for x in rng.choice(pool, size=2, replace=False)]
        opts = [answer] + picks
        return tuple(opts[i] for i in rng.permutation(3))

    clusters = []
    for t in graph.triples:
        if t.s not in famous:
            continue
        cid = f"c{len(clusters):04d}"
        base_opts = options(t.r, t.o)
        if base_opts is None:
            skipped_relations.add(t.r)
            continue
        kappa = frozenset([t])
        forms = templates[t.r]
        base = QAItem(f"{cid}:base:0", "base", render(forms[0], t.r, t.s), t.o, base_opts, kappa, cid)
        paras = tuple(
            QAItem(f"{cid}:paraphrased:{j}", "paraphrased", render(forms[j], t.r, t.s), t.o, base_opts, kappa, cid)
            for j in range(1, 4)
        )

        hops = []
        for hop in out_edges.get(t.o, ()):
            opts = options(hop.r, hop.o)
            if opts is None:
                skipped_relations.add(hop.r)
                continue
            hops.append(QAItem(
                f"{cid}:multihop:{len(hops)}", "multihop", render_multihop(t.r, hop.r, t.s),
                hop.o, opts, frozenset([t, hop]), cid,
            ))

        pool = [u for u in by_obj.get(t.o, ()) if u.s not in famous]
        if len(pool) > max_same_answer:
            pool = [pool[i] for i in sorted(rng.choice(len(pool), size=max_same_answer, replace=False))]
        same = []
        for u in pool:
            opts = options(u.r, u.o)
            if opts is None:
                skipped_relations.add(u.r)
                continue
            same.append(QAItem(
                f"{cid}:same_answer:{len(same)}", "same_answer", render(templates[u.r][0], u.r, u.s),
                u.o, opts, frozenset([u]), cid,
            ))

        if not hops and not same:
            continue
        clusters.append(Cluster(base, paras, tuple(hops), tuple(same)))
    for r in sorted(skipped_relations):
        log.warning("relation %s has fewer than 3 distinct objects; affected items skipped", r)
    return clusters


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def make_splits(clusters, fractions=(0.05, 0.10, 0.70), seed: int = 0) -> Splits:
    """Seeded disjoint forget/retain/test partition of cluster ids."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 or f > 1 for f in fractions) or sum(fractions) > 1 + 1e-12:
        raise WorldGenError(f"invalid split fractions {fractions}")
    ids = [c.id if isinstance(c, Cluster) else str(c) for c in clusters]
    n = len(ids)
    order = [ids[i] for i in _rng(seed, 4).permutation(n)]
    sizes = [_round_half_up(f * n) for f in fractions]
    while sum(sizes) > n:
        sizes[int(np.argmax(sizes))] -= 1
    a, b = sizes[0], sizes[0] + sizes[1]
    return Splits(tuple(order[:a]), tuple(order[a:b]), tuple(order[b:b + sizes[2]]), fractions)


# -- dataset container and serialization -------------------------------------------
@dataclass
class Dataset:
    clusters: list
    splits: Splits
    vocab: Vocab
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.by_id = {c.id: c for c in self.clusters}

    def split_clusters(self, name):
        return [self.by_id[cid] for cid in getattr(self.splits, name)]

    def items(self, kind=None):
        out = [it for c in self.clusters for it in c.items()]
        return out if kind is None else [it for it in out if it.kind == kind]

    def training_items(self):
        """All distinct (question, answer) facts the model should know."""
        seen, out = set(), []
        for it in self.items():
            key = it.question
            if key in seen:
                continue
            seen.add(key)
            out.append(it)
        return out

    def counts(self):
        c = {k: 0 for k in KINDS}
        for it in self.items():
            c[it.kind] += 1
        c["clusters"] = len(self.clusters)
        return c


def generate_dataset(
    seed: int = 0,
    n_famous: int = 200,
    n_background: int = 600,
    n_relations: int = 19,
    chain_density: float = 0.6,
    templates_per_relation: int = 4,
    max_same_answer: int = 8,
    fractions=(0.05, 0.10, 0.70),
) -> Dataset:
    params = dict(n_famous=n_famous, n_background=n_background, n_relations=n_relations,
                  chain_density=chain_density, templates_per_relation=templates_per_relation,
                  max_same_answer=max_same_answer)
    graph = generate_graph(seed, n_famous, n_background, n_relations, chain_density)
    clusters = build_clusters(graph, templates_per_relation, seed, max_same_answer)
    splits = make_splits(clusters, fractions, seed)
    return Dataset(clusters, splits, build_vocab(graph), seed, params)


def write_dataset(clusters, splits: Splits, path, *, vocab: Vocab | None = None, seed: int = 0, params=None):
    """One JSON manifest line, then one line per item (cluster order preserved)."""
    items = [it for c in clusters for it in c.items()]
    manifest = {
        "record": "manifest",
        "version": GENERATOR_VERSION,
        "seed": seed,
        "n_items": len(items),
        "splits": splits.to_record(),
        "params": dict(params or {}),
        "vocab": vocab.tokens if vocab is not None else None,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(manifest, sort_keys=True) + "\n")
        for it in items:
            fh.write(json.dumps(it.to_record(), sort_keys=True) + "\n")


def read_dataset(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError("empty file, manifest missing", 1)
    records = []
    for n, line in enumerate(lines, start=1):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"malformed record ({exc.msg})", n) from None
        if not isinstance(rec, dict) or "record" not in rec:
            raise DatasetFormatError("record type missing", n)
        records.append(rec)
    manifest = records[0]
    if manifest["record"] != "manifest":
        raise DatasetFormatError("first record must be the manifest", 1)
    if manifest.get("version") != GENERATOR_VERSION:
        raise DatasetFormatError(f"generator version {manifest.get('version')!r} != {GENERATOR_VERSION!r}", 1)
    if len(records) - 1 != manifest["n_items"]:
        raise DatasetFormatError(
            f"truncated or padded file: manifest declares {manifest['n_items']} items, found {len(records) - 1}",
            len(records),
        )

    grouped: dict = {}
    for n, rec in enumerate(records[1:], start=2):
        try:
            it = QAItem.from_record(rec)
        except (KeyError, TypeError, WorldGenError) as exc:
            raise DatasetFormatError(f"invalid item record ({exc})", n) from None
        grouped.setdefault(it.cluster_id, []).append(it)
    clusters = []
    for cid, its in grouped.items():
        by_kind = {k: tuple(i for i in its if i.kind == k) for k in KINDS}
        if len(by_kind["base"]) != 1:
            raise DatasetFormatError(f"cluster {cid} must have exactly one base item")
        clusters.append(Cluster(by_kind["base"][0], by_kind["paraphrased"], by_kind["multihop"], by_kind["same_answer"]))
    vocab = Vocab(manifest["vocab"]) if manifest.get("vocab") is not None else None
    return Dataset(clusters, Splits.from_record(manifest["splits"]), vocab, manifest["seed"], manifest["params"])


def write_vocab(vocab: Vocab, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({t: i for i, t in enumerate(vocab.tokens)}, fh, indent=0, sort_keys=False)
        fh.write("\n")


# -- auditing --------------------------------------------------------------------
def audit_cluster(cluster: Cluster, vocab: Vocab | None = None, graph: KnowledgeGraph | None = None,
                  famous: set | None = None) -> list:
    """Return a list of invariant violations (empty when the cluster is valid)."""
    problems = []
    base = cluster.base
    if len(cluster.paraphrases) != 3:
        problems.append("cluster must have exactly 3 paraphrases")
    if not cluster.multihops and not cluster.same_answers:
        problems.append("cluster has neither multihop nor same-answer items")
    forms = [base.question] + [p.question for p in cluster.paraphrases]
    if len(set(forms)) != len(forms):
        problems.append("paraphrase questions are not lexically distinct")
    if famous is None and graph is not None:
        famous = set(graph.famous)
    objects = {} if graph is None else {r: set(graph.objects_of(r)) for r in graph.relations}

    for it in cluster.items():
        tag = it.id
        if it.cluster_id != cluster.id:
            problems.append(f"{tag}: wrong cluster id")
        if not it.knowledge:
            problems.append(f"{tag}: empty knowledge set")
        if len(it.candidates) != 3 or len(set(it.candidates)) != 3:
            problems.append(f"{tag}: candidates must be 3 distinct tokens")
        if it.answer not in it.candidates:
            problems.append(f"{tag}: answer not among candidates")
        if vocab is not None:
            missing = [t for t in it.question + it.candidates if t not in vocab]
            if missing:
                problems.append(f"{tag}: tokens outside vocabulary {missing}")
        final = [t for t in it.knowledge if t.o == it.answer]
        if not final:
            problems.append(f"{tag}: no knowledge triple yields the answer")
        elif objects:
            rel = final[0].r
            if any(c not in objects[rel] for c in it.candidates):
                problems.append(f"{tag}: candidate is not a valid object of {rel}")
        if it.kind == "paraphrased" and it.knowledge != base.knowledge:
            problems.append(f"{tag}: paraphrase knowledge differs from base")
        if it.kind == "multihop":
            if not it.knowledge > base.knowledge:
                problems.append(f"{tag}: multihop knowledge does not strictly contain base knowledge")
            bridge = {t.o for t in it.knowledge}
            if bridge & set(it.question):
                problems.append(f"{tag}: intermediate or final entity appears in question")
        if it.kind == "same_answer":
            if it.knowledge & base.knowledge:
                problems.append(f"{tag}: same-answer knowledge overlaps base")
            if it.answer != base.answer:
                problems.append(f"{tag}: same-answer item has a different answer")
            if famous is not None and any(t.s in famous for t in it.knowledge):
                problems.append(f"{tag}: same-answer subject is famous")
    return problems


def audit_dataset(dataset: Dataset, graph: KnowledgeGraph | None = None) -> dict:
    """Map cluster id -> violations for every failing cluster."""
    famous = None if graph is None else set(graph.famous)
    if famous is None and dataset.vocab is not None:
        famous = {t for t in dataset.vocab.tokens if t.startswith("F")}
    failures = {}
    for c in dataset.clusters:
        probs = audit_cluster(c, dataset.vocab, graph, famous)
        if probs:
            failures[c.id] = probs
    return failures


@dataclass(frozen=True)
class EncodedItems:
    ids: np.ndarray  # (N, T)
    answers: np.ndarray  # (N,)
    candidates: np.ndarray  # (N, 3)

    def __len__(self):
        return len(self.answers)

    def subset(self, index):
        return EncodedItems(self.ids[index], self.answers[index], self.candidates[index])


def encode_items(vocab: Vocab, items) -> EncodedItems:
    """Token ids for a list of equal-length items."""
    items = list(items)
    if not items:
        return EncodedItems(np.zeros((0, 0), np.int64), np.zeros(0, np.int64), np.zeros((0, 3), np.int64))
    lengths = {len(it.question) for it in items}
    if len(lengths) != 1:
        raise WorldGenError(f"items have mixed question lengths {sorted(lengths)}")
    ids = np.array([vocab.encode(it.question) for it in items], dtype=np.int64)
    ans = np.array([vocab.id(it.answer) for it in items], dtype=np.int64)
    cands = np.array([vocab.encode(it.candidates) for it in items], dtype=np.int64)
    return EncodedItems(ids, ans, cands)
