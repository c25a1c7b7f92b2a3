import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lansagnn.dual_llm import extract_messages
from lansagnn.embed import (
    AggregatedDocument,
    EmbeddingClient,
    aggregate_text,
    embed_hashing,
    embed_hashing_many,
    fnv1a64,
    load_matrix,
    save_matrix,
)
from lansagnn.errors import DimensionMismatch, EmptyDocument
from lansagnn.gateway import BackendConfig, Gateway
from lansagnn.graph import generate_synthetic, sample_edges
from lansagnn.templates import load_templates


def doc(text, node=0, parts=0):
    return AggregatedDocument(node=node, text=text, parts=parts, origin_included=True)


class TestAggregateText:
    def test_direct_construction(self):
        d = aggregate_text(0, "a", [(2, "m2"), (5, "m5")])
        assert d.text == "a\n[MSG]\nm2\n[MSG]\nm5"
        assert d.parts == 2 and d.origin_included

    def test_ablation_without_origin(self):
        d = aggregate_text(0, "a", [(1, "m")], include_origin=False)
        assert d.text == "m"
        assert not d.origin_included

    def test_unsorted_input_canonicalized(self):
        a = aggregate_text(0, "a", [(5, "m5"), (2, "m2")])
        b = aggregate_text(0, "a", [(2, "m2"), (5, "m5")])
        assert a == b

    def test_origin_alone(self):
        assert aggregate_text(3, "just me", []).text == "just me"

    def test_empty_document_raises(self):
        with pytest.raises(EmptyDocument):
            aggregate_text(0, "ignored", [], include_origin=False)

    @settings(max_examples=50, deadline=None)
    @given(
        msgs=st.lists(
            st.tuples(st.integers(0, 50), st.text(min_size=1, max_size=8)),
            max_size=6,
            unique_by=lambda t: t[0],
        )
    )
    def test_permutation_invariance(self, msgs):
        base = aggregate_text(0, "origin", msgs)
        for perm in itertools.islice(itertools.permutations(msgs), 6):
            assert aggregate_text(0, "origin", list(perm)) == base


class TestHashingEmbedder:
    def test_known_fnv_values(self):
        # independently computed with the FNV-1a-64 recurrence
        # (offset 0xcbf29ce484222325, prime 0x100000001b3)
        def reference(s):
            h = 0xCBF29CE484222325
            for b in s.encode():
                h ^= b
                h = (h * 0x100000001B3) % 2**64
            return h

        for tok in ("alpha", "beta", "x", "42"):
            assert fnv1a64(tok) == reference(tok)
        assert fnv1a64("alpha") == 0x8AC625BB85ED202B
        assert fnv1a64("beta") == 0x7627619B954620A7

    def test_empty_text_zero_vector(self):
        v = embed_hashing(doc(""), d=16)
        assert np.all(v == 0.0)

    def test_repeated_token_one_hot(self):
        for k in (1, 3, 7):
            v = embed_hashing(doc(" ".join(["solo"] * k)), d=32)
            assert np.isclose(np.linalg.norm(v), 1.0)
            assert np.count_nonzero(v) == 1

    def test_weights_before_normalization(self):
        # "alpha beta alpha" at d=16: alpha lands at 11, beta at 7 (from the
        # frozen digests above), with pre-norm weights 2 and 1
        v = embed_hashing(doc("alpha beta alpha"), d=16)
        expected = np.zeros(16)
        expected[11] = 2.0
        expected[7] = 1.0
        expected /= np.linalg.norm(expected)
        assert np.allclose(v, expected, atol=1e-15)

    def test_bag_of_words_property(self):
        a = embed_hashing(doc("one two three two"), d=64)
        b = embed_hashing(doc("two one two three"), d=64)
        assert np.array_equal(a, b)

    def test_norm_law(self):
        g = generate_synthetic(
            2, 10, 0.2, 0.05, [["aa"], ["bb"]], ["w1", "w2", "w3"], 5, seed=1
        )
        m = embed_hashing_many([doc(t, node=i) for i, t in enumerate(g.texts)], d=64)
        norms = np.linalg.norm(m.rows, axis=1)
        assert np.all((np.isclose(norms, 1.0)) | (norms == 0.0))

    def test_rejects_tiny_dimension(self):
        with pytest.raises(DimensionMismatch):
            embed_hashing(doc("x"), d=1)

    def test_class_separability_on_synthetic_corpus(self):
        g = generate_synthetic(
            2,
            30,
            0.2,
            0.03,
            [["quantum", "photon"], ["enzyme", "genome"]],
            [f"filler{i}" for i in range(40)],
            8,
            seed=5,
        )
        gw = Gateway(BackendConfig(kind="oracle_extract"), oracle_graph=g)
        nb = sample_edges(g, 3, seed=1)
        ms, _ = extract_messages(g, nb.directed_pairs(), gw, load_templates())
        docs = [
            aggregate_text(i, g.texts[i], ms.incoming(i)) for i in range(g.num_nodes)
        ]
        m = embed_hashing_many(docs, d=256)
        sims = m.rows @ m.rows.T
        same, cross = [], []
        for i in range(g.num_nodes):
            for j in range(i + 1, g.num_nodes):
                (same if g.labels[i] == g.labels[j] else cross).append(sims[i, j])
        assert np.mean(same) > np.mean(cross)


class TestPersistence:
    def test_round_trip_header_and_values(self, tmp_path):
        rows = np.array([[1.0, 2.0, 3.0], [0.5, 0.25, 0.125]])
        from lansagnn.embed import EmbeddingMatrix

        m = EmbeddingMatrix(rows=rows, d=3, embedder_id="test-embedder")
        path = tmp_path / "emb.bin"
        save_matrix(m, path, dataset_hash="abc123")
        raw = path.read_bytes()
        import struct

        assert struct.unpack_from("<QQ", raw, 0) == (2, 3)
        loaded, sidecar = load_matrix(path)
        assert sidecar == {"embedder_id": "test-embedder", "dataset_hash": "abc123"}
        assert loaded.embedder_id == "test-embedder"
        # values survive the float32 quantization exactly here (dyadic)
        assert np.array_equal(loaded.rows, rows)


def fake_embedding_transport(dim=8, counter=None):
    def transport(url, headers, body):
        if counter is not None:
            counter.append(body)
        data = []
        for idx, text in enumerate(body["input"]):
            vec = [float(len(text) % 7 + k) for k in range(dim)]
            data.append({"index": idx, "embedding": vec})
        return 200, json.dumps({"data": data})

    return transport


class TestServiceEmbedding:
    def cfg(self, tmp_path):
        return BackendConfig(
            kind="http_openai_compatible",
            base_url="http://example.invalid/v1",
            cache_dir=str(tmp_path),
            model="embedder-1",
        )

    def test_duplicates_share_vectors(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LANSAGNN_API_KEY", "k")
        calls = []
        client = EmbeddingClient(self.cfg(tmp_path), transport=fake_embedding_transport(counter=calls))
        docs = [doc("same text", node=0), doc("same text", node=1), doc("other", node=2)]
        m = client.embed(docs)
        assert np.array_equal(m.rows[0], m.rows[1])
        assert len(calls) == 1
        assert sorted(calls[0]["input"]) == ["other", "same text"]

    def test_second_run_zero_network(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LANSAGNN_API_KEY", "k")
        docs = [doc(f"text {i}", node=i) for i in range(5)]
        c1 = EmbeddingClient(self.cfg(tmp_path), transport=fake_embedding_transport())
        m1 = c1.embed(docs)
        c2 = EmbeddingClient(self.cfg(tmp_path), transport=fake_embedding_transport())
        m2 = c2.embed(docs)
        assert c2.network_requests == 0
        assert np.array_equal(m1.rows, m2.rows)

    def test_mixed_dimensions_rejected(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LANSAGNN_API_KEY", "k")

        def bad_transport(url, headers, body):
            data = [
                {"index": idx, "embedding": [0.0] * (3 + idx)}
                for idx, _ in enumerate(body["input"])
            ]
            return 200, json.dumps({"data": data})

        client = EmbeddingClient(self.cfg(tmp_path), transport=bad_transport)
        with pytest.raises(DimensionMismatch):
            client.embed([doc("a", node=0), doc("b", node=1)])
