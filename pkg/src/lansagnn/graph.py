"""Text-attributed graph data model, ingestion, splits, and edge sampling.

Nodes carry raw text attributes and optional class labels. Edges are stored
undirected and deduplicated; self-loops are never stored (they are a
downstream transform). All operations are pure functions of their inputs
plus an explicit seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    ConfigError,
    DanglingEdge,
    DuplicateNodeId,
    InvalidProbability,
    MalformedRecord,
    MissingLabels,
)

# Stream tags keep seeded generators for unrelated purposes statistically
# independent even when they share a global seed.
STREAM_SPLIT = 0
STREAM_SAMPLE = 1
STREAM_SYNTH = 2
STREAM_KB = 3
STREAM_EP = 4
STREAM_INIT = 5
STREAM_DROPOUT = 6

INF = float("inf")


def rng_for(seed: int, stream: int, *extra: int) -> np.random.Generator:
    """Deterministic generator keyed by (seed, stream, *extra)."""
    return np.random.default_rng([seed & 0xFFFFFFFF, stream, *extra])


@dataclass(frozen=True)
class TextAttributedGraph:
    """Immutable graph with per-node texts, undirected edges, optional labels."""

    num_nodes: int
    texts: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]  # canonical: u < v, sorted, deduped
    labels: tuple[int, ...] | None = None
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if len(self.texts) != self.num_nodes:
            raise ConfigError(
                f"texts has {len(self.texts)} entries for {self.num_nodes} nodes"
            )
        for u, v in self.edges:
            if u == v:
                raise ConfigError(f"self-loop ({u},{v}) in stored edges")
            if not (0 <= u < self.num_nodes and 0 <= v < self.num_nodes):
                raise DanglingEdge(f"edge ({u},{v}) out of range for n={self.num_nodes}")
        if len(set(self.edges)) != len(self.edges):
            raise ConfigError("duplicate edges in canonical edge list")
        if self.labels is not None:
            if len(self.labels) != self.num_nodes:
                raise ConfigError("labels length does not match num_nodes")
            c = self.num_classes
            for i, y in enumerate(self.labels):
                if not (0 <= y < c):
                    raise ConfigError(f"label {y} of node {i} outside [0,{c})")

    @property
    def num_classes(self) -> int:
        if self.class_names is not None:
            return len(self.class_names)
        if self.labels is None:
            raise MissingLabels("graph has no labels")
        return max(self.labels) + 1

    @cached_property
    def adjacency(self) -> tuple[tuple[int, ...], ...]:
        """Sorted neighbor tuple per node (canonical adjacency)."""
        neigh: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for u, v in self.edges:
            neigh[u].append(v)
            neigh[v].append(u)
        return tuple(tuple(sorted(ns)) for ns in neigh)

    def neighbors(self, i: int) -> tuple[int, ...]:
        return self.adjacency[i]

    def label_name(self, i: int) -> str:
        if self.labels is None:
            raise MissingLabels("graph has no labels")
        names = self.class_names or default_class_names(max(self.labels) + 1)
        return names[self.labels[i]]

    def with_class_names(self, names: Iterable[str]) -> "TextAttributedGraph":
        return replace(self, class_names=tuple(names))

    def content_digest(self) -> str:
        """Stable hash of the graph content, used in provenance records."""
        import hashlib

        h = hashlib.sha256()
        h.update(str(self.num_nodes).encode())
        for t in self.texts:
            h.update(b"\x00t")
            h.update(t.encode("utf-8"))
        for u, v in self.edges:
            h.update(f"\x00e{u},{v}".encode())
        if self.labels is not None:
            h.update(("\x00y" + ",".join(map(str, self.labels))).encode())
        if self.class_names is not None:
            h.update(("\x00c" + "\x1f".join(self.class_names)).encode())
        return h.hexdigest()


def default_class_names(num_classes: int) -> tuple[str, ...]:
    return tuple(f"class{c}" for c in range(num_classes))


def canonical_edges(pairs: Iterable[tuple[int, int]]) -> tuple[tuple[int, int], ...]:
    """Dedup undirected pairs, drop self-loops, normalize to u < v, sort."""
    seen = set()
    for u, v in pairs:
        if u == v:
            continue
        seen.add((min(u, v), max(u, v)))
    return tuple(sorted(seen))


@dataclass(frozen=True)
class SplitAssignment:
    """Disjoint train/val/test node-id partition, stored sorted."""

    train_ids: tuple[int, ...]
    val_ids: tuple[int, ...]
    test_ids: tuple[int, ...]
    seed: int

    def __post_init__(self):
        a, b, c = set(self.train_ids), set(self.val_ids), set(self.test_ids)
        if a & b or a & c or b & c:
            raise ConfigError("split sets are not disjoint")

    @property
    def num_nodes(self) -> int:
        return len(self.train_ids) + len(self.val_ids) + len(self.test_ids)


@dataclass(frozen=True)
class SampledNeighborhoods:
    """Per-node directional sampled neighbor lists, each of length <= cap_k."""

    lists: tuple[tuple[int, ...], ...]
    cap_k: float  # positive integer or math.inf
    seed: int

    def directed_pairs(self) -> list[tuple[int, int]]:
        return [(i, j) for i, js in enumerate(self.lists) for j in js]

    def pair_count(self) -> int:
        return sum(len(js) for js in self.lists)


# ---------------------------------------------------------------------------
# ingestion


def _parse_node_record(obj, line_no: int):
    if not isinstance(obj, dict) or "id" not in obj or "text" not in obj:
        raise MalformedRecord(line_no, "node record must have 'id' and 'text'")
    node_id = obj["id"]
    if not isinstance(node_id, (int, str)):
        raise MalformedRecord(line_no, "'id' must be int or string")
    text = obj["text"]
    if not isinstance(text, str):
        raise MalformedRecord(line_no, "'text' must be a string")
    label = obj.get("label")
    if label is not None and not isinstance(label, int):
        raise MalformedRecord(line_no, "'label' must be int or null")
    return node_id, text, label


def _build_graph(nodes, raw_edges, id_map):
    mapped = []
    for u, v in raw_edges:
        if u not in id_map:
            raise DanglingEdge(f"edge references unknown node id {u!r}")
        if v not in id_map:
            raise DanglingEdge(f"edge references unknown node id {v!r}")
        mapped.append((id_map[u], id_map[v]))
    texts = tuple(t for t, _ in nodes)
    raw_labels = [lab for _, lab in nodes]
    labels = None
    if any(lab is not None for lab in raw_labels):
        if any(lab is None for lab in raw_labels):
            # mixed labeled / unlabeled graphs are not supported
            raise MalformedRecord(0, "some nodes have labels and some do not")
        labels = tuple(raw_labels)
    graph = TextAttributedGraph(
        num_nodes=len(nodes),
        texts=texts,
        edges=canonical_edges(mapped),
        labels=labels,
    )
    return graph, dict(id_map)


def load_dataset(path: str | Path, fmt: str = "jsonl"):
    """Load a dataset in canonical 'jsonl' or 'pair' format.

    Returns (graph, id_map) where id_map maps original ids (as found in the
    file) to dense node ids assigned by first appearance.
    """
    path = Path(path)
    if fmt == "jsonl":
        return _load_jsonl(path)
    if fmt == "pair":
        return _load_pair(path)
    raise ConfigError(f"unknown dataset format {fmt!r}")


def _load_jsonl(path: Path):
    nodes: list[tuple[str, int | None]] = []
    id_map: dict = {}
    raw_edges: list[tuple] = []
    saw_edges = False
    with path.open("r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedRecord(line_no, f"invalid JSON: {e.msg}") from e
            if isinstance(obj, dict) and "edges" in obj and "id" not in obj:
                if not isinstance(obj["edges"], list):
                    raise MalformedRecord(line_no, "'edges' must be a list of pairs")
                for pair in obj["edges"]:
                    if not isinstance(pair, list) or len(pair) != 2:
                        raise MalformedRecord(line_no, f"bad edge entry {pair!r}")
                    raw_edges.append((pair[0], pair[1]))
                saw_edges = True
                continue
            node_id, text, label = _parse_node_record(obj, line_no)
            if node_id in id_map:
                raise DuplicateNodeId(f"node id {node_id!r} appears twice")
            id_map[node_id] = len(nodes)
            nodes.append((text, label))
    if not nodes:
        raise MalformedRecord(0, "no node records found")
    if not saw_edges:
        raise MalformedRecord(0, "no edges line found")
    return _build_graph(nodes, raw_edges, id_map)


def _load_pair(path: Path):
    """nodes.jsonl + edges.tsv under a directory."""
    nodes_path = path / "nodes.jsonl"
    edges_path = path / "edges.tsv"
    nodes: list[tuple[str, int | None]] = []
    id_map: dict = {}
    with nodes_path.open("r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedRecord(line_no, f"invalid JSON: {e.msg}") from e
            node_id, text, label = _parse_node_record(obj, line_no)
            if node_id in id_map:
                raise DuplicateNodeId(f"node id {node_id!r} appears twice")
            id_map[node_id] = len(nodes)
            nodes.append((text, label))
    raw_edges: list[tuple] = []
    with edges_path.open("r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise MalformedRecord(line_no, "edges.tsv rows must be 'u\\tv'")
            u, v = parts
            # integer ids are common in both file kinds; normalize so the two
            # files agree on the id space
            u = int(u) if u.lstrip("-").isdigit() else u
            v = int(v) if v.lstrip("-").isdigit() else v
            raw_edges.append((u, v))
    if not nodes:
        raise MalformedRecord(0, "no node records found")
    return _build_graph(nodes, raw_edges, id_map)


def save_dataset(graph: TextAttributedGraph, path: str | Path) -> None:
    """Write the canonical JSONL form (round-trips through load_dataset)."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as f:
        for i in range(graph.num_nodes):
            rec = {
                "id": i,
                "text": graph.texts[i],
                "label": graph.labels[i] if graph.labels is not None else None,
            }
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")
        f.write(json.dumps({"edges": [[u, v] for u, v in graph.edges]}) + "\n")


def save_id_map(id_map: Mapping, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as f:
        f.write("original_id\tdense_id\n")
        for orig, dense in sorted(id_map.items(), key=lambda kv: kv[1]):
            f.write(f"{orig}\t{dense}\n")


# ---------------------------------------------------------------------------
# splitting and sampling


def make_random_split(
    graph: TextAttributedGraph,
    seed: int,
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
) -> SplitAssignment:
    """60/20/20 random node split; a deterministic function of (n, seed).

    Train gets round(r0*n), val round(r1*n), test the remainder.
    """
    if graph.labels is None:
        raise MissingLabels("make_random_split requires a labeled graph")
    n = graph.num_nodes
    if n < 5:
        raise ConfigError(f"need at least 5 nodes to split, got {n}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {ratios}")
    n_train = round(ratios[0] * n)
    n_val = round(ratios[1] * n)
    perm = rng_for(seed, STREAM_SPLIT).permutation(n)
    train = tuple(sorted(int(i) for i in perm[:n_train]))
    val = tuple(sorted(int(i) for i in perm[n_train : n_train + n_val]))
    test = tuple(sorted(int(i) for i in perm[n_train + n_val :]))
    return SplitAssignment(train, val, test, seed)


def sample_edges(
    graph: TextAttributedGraph,
    k: float,
    seed: int,
    symmetric: bool = False,
) -> SampledNeighborhoods:
    """Cap each node's neighbor list at k by uniform sampling without replacement.

    Directional mode (default): node i's sample is drawn by a generator keyed
    by (seed, i), so lists are independent across nodes and adding nodes does
    not perturb existing samples. Lists are sorted ascending after sampling.

    Symmetric mode: a seeded greedy pass over shuffled undirected edges keeps
    an edge only while both endpoints are under budget, and both endpoints
    list each other.
    """
    if k != INF and (k < 1 or int(k) != k):
        raise ConfigError(f"k must be a positive integer or infinity, got {k}")
    if symmetric:
        return _sample_edges_symmetric(graph, k, seed)
    lists: list[tuple[int, ...]] = []
    for i in range(graph.num_nodes):
        neigh = graph.adjacency[i]
        if k == INF or len(neigh) <= k:
            lists.append(neigh)
            continue
        rng = rng_for(seed, STREAM_SAMPLE, i)
        picked = rng.choice(len(neigh), size=int(k), replace=False)
        lists.append(tuple(sorted(neigh[p] for p in picked)))
    return SampledNeighborhoods(tuple(lists), cap_k=k, seed=seed)


def _sample_edges_symmetric(graph, k, seed):
    budget = [k] * graph.num_nodes
    lists: list[list[int]] = [[] for _ in range(graph.num_nodes)]
    order = rng_for(seed, STREAM_SAMPLE).permutation(len(graph.edges))
    for idx in order:
        u, v = graph.edges[int(idx)]
        if budget[u] >= 1 and budget[v] >= 1:
            budget[u] -= 1
            budget[v] -= 1
            lists[u].append(v)
            lists[v].append(u)
    return SampledNeighborhoods(
        tuple(tuple(sorted(ns)) for ns in lists), cap_k=k, seed=seed
    )


# ---------------------------------------------------------------------------
# synthetic data


def generate_synthetic(
    num_classes: int,
    nodes_per_class: int,
    p_in: float,
    p_out: float,
    keywords: list[list[str]],
    filler_vocab: list[str],
    words_per_node: int,
    seed: int,
) -> TextAttributedGraph:
    """Planted-partition graph with keyword-bearing node texts.

    Intra-class edges appear with probability p_in, inter-class with p_out.
    Each node's text is words_per_node filler words plus two occurrences of a
    keyword drawn from its class list, shuffled together.
    """
    for name, p in (("p_in", p_in), ("p_out", p_out)):
        if not (0.0 <= p <= 1.0):
            raise InvalidProbability(f"{name}={p} outside [0,1]")
    if len(keywords) != num_classes or any(not ks for ks in keywords):
        raise ConfigError("need one non-empty keyword list per class")
    if not filler_vocab:
        raise ConfigError("filler_vocab must be non-empty")

    n = num_classes * nodes_per_class
    labels = tuple(i // nodes_per_class for i in range(n))
    rng = rng_for(seed, STREAM_SYNTH)

    edges = []
    for u in range(n):
        for v in range(u + 1, n):
            p = p_in if labels[u] == labels[v] else p_out
            if p > 0 and rng.random() < p:
                edges.append((u, v))

    texts = []
    for i in range(n):
        words = [filler_vocab[int(w)] for w in rng.integers(0, len(filler_vocab), words_per_node)]
        kw = keywords[labels[i]][int(rng.integers(0, len(keywords[labels[i]])))]
        words += [kw, kw]
        rng.shuffle(words)
        texts.append(" ".join(words))

    return TextAttributedGraph(
        num_nodes=n,
        texts=tuple(texts),
        edges=tuple(edges),
        labels=labels,
        class_names=default_class_names(num_classes),
    )
