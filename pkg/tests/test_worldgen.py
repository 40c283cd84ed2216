import json
import logging

import pytest

from faithlab.worldgen import (
    GENERATOR_VERSION,
    Cluster,
    DatasetFormatError,
    KnowledgeGraph,
    QAItem,
    Splits,
    Triple,
    WorldGenError,
    audit_cluster,
    audit_dataset,
    build_clusters,
    build_vocab,
    encode_items,
    generate_dataset,
    generate_graph,
    make_splits,
    read_dataset,
    relation_templates,
    write_dataset,
    write_vocab,
)


@pytest.fixture(scope="module")
def default_graph():
    return generate_graph(0)


@pytest.fixture(scope="module")
def default_dataset():
    return generate_dataset(0)


class TestGraph:
    def test_deterministic(self):
        assert generate_graph(5, 30, 60, 6) == generate_graph(5, 30, 60, 6)

    def test_seed_matters(self):
        assert generate_graph(5, 30, 60, 6).triples != generate_graph(6, 30, 60, 6).triples

    def test_every_famous_entity_has_a_fact(self, default_graph):
        subjects = {t.s for t in default_graph.triples}
        assert all(f in subjects for f in default_graph.famous)
        assert len(default_graph.famous) == 200 and len(default_graph.relations) == 19

    def test_functional_relations(self, default_graph):
        seen = {}
        for t in default_graph.triples:
            assert seen.setdefault((t.s, t.r), t.o) == t.o

    def test_shared_objects_with_background_subjects(self, default_graph):
        famous = set(default_graph.famous)
        by_obj = default_graph.by_object()
        shared = [o for o, ts in by_obj.items() if any(t.s in famous for t in ts) and any(t.s not in famous for t in ts)]
        assert shared

    def test_functionality_enforced(self):
        with pytest.raises(WorldGenError):
            KnowledgeGraph(("F0",), ("V0", "V1"), ("R0",), (Triple("F0", "R0", "V0"), Triple("F0", "R0", "V1")))

    def test_disjoint_entity_sets(self):
        with pytest.raises(WorldGenError):
            KnowledgeGraph(("F0",), ("F0",), ("R0",), ())

    @pytest.mark.parametrize("kw", [dict(n_relations=0), dict(n_famous=0), dict(chain_density=1.5)])
    def test_unsatisfiable_counts(self, kw):
        with pytest.raises(WorldGenError):
            generate_graph(0, **kw)


class TestClusters:
    def test_zero_chain_density_gives_no_multihop(self):
        ds = generate_dataset(1, n_famous=60, n_background=150, chain_density=0.0)
        assert ds.counts()["multihop"] == 0
        assert ds.counts()["same_answer"] > 0

    def test_default_counts_nonzero(self, default_dataset):
        c = default_dataset.counts()
        assert all(c[k] > 0 for k in ("base", "paraphrased", "multihop", "same_answer"))
        assert c["clusters"] >= 400

    def test_default_clusters_pass_audit(self, default_dataset):
        assert audit_dataset(default_dataset) == {}

    def test_chain_becomes_multihop(self):
        t1, t2 = Triple("F000", "R00", "V0000"), Triple("V0000", "R01", "V0003")
        g = KnowledgeGraph(("F000",), ("V0000", "V0001", "V0002", "V0003", "V0004", "V0005"), ("R00", "R01"),
                           (t1, t2), {"R00": ("V0000", "V0001", "V0002"), "R01": ("V0003", "V0004", "V0005")})
        (c,) = build_clusters(g)
        (hop,) = c.multihops
        assert hop.knowledge == frozenset([t1, t2]) and hop.answer == "V0003"
        assert "V0000" not in hop.question and "V0003" not in hop.question

    def test_isolated_triple_emits_no_cluster(self):
        g = KnowledgeGraph(("F000",), ("V0", "V1", "V2"), ("R00",), (Triple("F000", "R00", "V0"),),
                           {"R00": ("V0", "V1", "V2")})
        assert build_clusters(g) == []

    def test_small_relation_range_skipped_with_warning(self, caplog):
        t1, t2 = Triple("F000", "R00", "V0"), Triple("V0", "R01", "V9")
        g = KnowledgeGraph(("F000",), ("V0", "V1", "V2", "V9"), ("R00", "R01"), (t1, t2),
                           {"R00": ("V0", "V1", "V2"), "R01": ("V9",)})
        with caplog.at_level(logging.WARNING):
            assert build_clusters(g) == []
        assert "R01" in caplog.text

    def test_too_few_templates(self, default_graph):
        with pytest.raises(WorldGenError):
            relation_templates(default_graph, 0, 3)
        with pytest.raises(WorldGenError):
            build_clusters(default_graph, templates_per_relation=2)

    def test_candidate_order_is_seeded(self, default_graph):
        a = build_clusters(default_graph, seed=4)
        b = build_clusters(default_graph, seed=4)
        assert [c.base.candidates for c in a] == [c.base.candidates for c in b]

    def test_knowledge_routing_is_set_theoretic(self, default_dataset):
        for c in default_dataset.clusters:
            for m in c.multihops:
                assert m.knowledge & c.base.knowledge and m.knowledge > c.base.knowledge
            for s in c.same_answers:
                assert not s.knowledge & c.base.knowledge and s.answer == c.base.answer

    def test_vocabulary_closure(self, default_dataset):
        vocab = default_dataset.vocab
        for it in default_dataset.items():
            assert all(t in vocab for t in it.question + it.candidates)

    def test_audit_flags_broken_cluster(self, default_dataset):
        c = default_dataset.clusters[0]
        bad = QAItem(c.base.id, "base", c.base.question, "NOPE", c.base.candidates, c.base.knowledge, c.id)
        broken = Cluster(bad, c.paraphrases, c.multihops, c.same_answers)
        assert audit_cluster(broken)

    def test_encode_requires_equal_lengths(self, default_dataset):
        items = default_dataset.items()
        with pytest.raises(WorldGenError):
            encode_items(default_dataset.vocab, [items[0], QAItem("x", "base", ("WHAT", "?"), items[0].answer,
                                                                   items[0].candidates, items[0].knowledge, "c")])


class TestSplits:
    def test_default_fractions_on_100(self):
        s = make_splits([f"c{i}" for i in range(100)])
        assert (len(s.forget), len(s.retain), len(s.test)) == (5, 10, 70)

    def test_large_world_forget_count(self):
        assert len(make_splits([f"c{i}" for i in range(664)]).forget) == 33

    def test_deterministic_and_disjoint(self, default_dataset):
        a = make_splits(default_dataset.clusters, seed=3)
        assert a == make_splits(default_dataset.clusters, seed=3)
        assert not (set(a.forget) & set(a.retain) or set(a.forget) & set(a.test) or set(a.retain) & set(a.test))

    @pytest.mark.parametrize("fr", [(0.5, 0.5, 0.5), (-0.1, 0.1, 0.1), (0.1, 0.1)])
    def test_bad_fractions(self, fr):
        with pytest.raises(WorldGenError):
            make_splits(["a", "b"], fr)

    def test_overlap_rejected(self):
        with pytest.raises(WorldGenError):
            Splits(("a",), ("a",), ())


class TestSerialization:
    def test_round_trip(self, default_dataset, tmp_path):
        ds = default_dataset
        p = tmp_path / "d.jsonl"
        write_dataset(ds.clusters, ds.splits, p, vocab=ds.vocab, seed=ds.seed, params=ds.params)
        back = read_dataset(p)
        assert back.clusters == ds.clusters
        assert back.splits == ds.splits and back.vocab == ds.vocab and back.seed == ds.seed

    def test_byte_identical_rerun(self, tmp_path):
        for name in ("a", "b"):
            ds = generate_dataset(2, n_famous=30, n_background=60)
            write_dataset(ds.clusters, ds.splits, tmp_path / f"{name}.jsonl", vocab=ds.vocab, seed=2)
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_truncated_file_names_line(self, default_dataset, tmp_path):
        p = tmp_path / "d.jsonl"
        write_dataset(default_dataset.clusters, default_dataset.splits, p, vocab=default_dataset.vocab)
        lines = p.read_text().splitlines()
        p.write_text("\n".join(lines[:40]) + "\n" + lines[40][: len(lines[40]) // 2] + "\n")
        with pytest.raises(DatasetFormatError, match="line 41"):
            read_dataset(p)

    def test_missing_tail_detected(self, default_dataset, tmp_path):
        p = tmp_path / "d.jsonl"
        write_dataset(default_dataset.clusters, default_dataset.splits, p, vocab=default_dataset.vocab)
        lines = p.read_text().splitlines()
        p.write_text("\n".join(lines[:-3]) + "\n")
        with pytest.raises(DatasetFormatError, match="truncated"):
            read_dataset(p)

    def test_version_mismatch(self, tmp_path):
        p = tmp_path / "d.jsonl"
        write_dataset([], Splits((), (), ()), p)
        rec = json.loads(p.read_text())
        rec["version"] = "other/0"
        p.write_text(json.dumps(rec) + "\n")
        with pytest.raises(DatasetFormatError, match="version"):
            read_dataset(p)

    def test_empty_cluster_list(self, tmp_path):
        p = tmp_path / "d.jsonl"
        write_dataset([], Splits((), (), ()), p)
        assert len(p.read_text().splitlines()) == 1
        back = read_dataset(p)
        assert back.clusters == [] and json.loads(p.read_text())["version"] == GENERATOR_VERSION

    def test_vocab_manifest(self, default_dataset, tmp_path):
        write_vocab(default_dataset.vocab, tmp_path / "v.json")
        table = json.loads((tmp_path / "v.json").read_text())
        assert all(default_dataset.vocab.id(t) == i for t, i in table.items())
        assert len(table) == len(default_dataset.vocab)

    def test_vocab_ids_stable(self, default_graph):
        assert build_vocab(default_graph).tokens == build_vocab(generate_graph(0)).tokens
