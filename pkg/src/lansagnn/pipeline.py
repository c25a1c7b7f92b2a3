"""Stage-oriented pipeline over an append-only run directory.

Each stage reads only upstream artifact files and writes its own, so a run
directory is self-describing and any stage can be re-executed from the
artifacts alone. manifest.json records the config fingerprint plus input and
output digests per stage (rerun skips stages whose digests are unchanged);
stats.json holds volatile telemetry (timings, backend dispatch counts) and is
the only file expected to differ between byte-identical runs.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .config import RunConfig, with_updates
from .dual_llm import (
    CorpusProvenance,
    MessageSet,
    emit_finetune_corpus,
    extract_messages,
    generate_kb_records,
    sample_kb_nodes,
    self_loop_enhance,
)
from .edge_filter import apply_edge_filter, build_ep_corpus, save_ep_corpus, true_fraction
from .embed import (
    aggregate_text,
    embed_hashing_many,
    load_matrix,
    save_matrix,
)
from .errors import ConfigInvalid, MissingUpstream
from .gateway import Gateway, GatewayStats
from .gnn import (
    evaluate,
    normalize_adjacency,
    protocol_report,
    render_report_table,
    train,
)
from .graph import (
    INF,
    SampledNeighborhoods,
    SplitAssignment,
    TextAttributedGraph,
    default_class_names,
    generate_synthetic,
    load_dataset,
    make_random_split,
    sample_edges,
    save_dataset,
    save_id_map,
)

STAGES = (
    "ingest",
    "split",
    "sample",
    "filter",
    "kb",
    "corpus",
    "extract",
    "embed",
    "train",
    "eval",
)

# upstream artifacts each stage reads; all paths are run-dir relative
STAGE_INPUTS: dict[str, tuple[str, ...]] = {
    "ingest": (),
    "split": ("graph.jsonl",),
    "sample": ("graph.jsonl",),
    "filter": ("graph.jsonl", "split.json", "neighborhoods.json"),
    "kb": ("graph.jsonl", "split.json", "kept_pairs.json"),
    "corpus": ("graph.jsonl", "kb_records.jsonl"),
    "extract": ("graph.jsonl", "kept_pairs.json"),
    "embed": ("graph.jsonl", "messages.jsonl"),
    "train": ("graph.jsonl", "kept_pairs.json", "neighborhoods.json", "embeddings.bin"),
    "eval": ("runs.json",),
}


def _digest_file(path: Path) -> str:
    return "sha256:" + hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(
        json.dumps(obj, sort_keys=True, ensure_ascii=False, indent=2) + "\n",
        encoding="utf-8",
    )


def _read_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


@dataclass
class StageOutcome:
    name: str
    status: str  # "done" | "skipped (up-to-date)"
    outputs: dict[str, str] = field(default_factory=dict)
    info: dict = field(default_factory=dict)
    failures: int = 0
    elapsed_s: float = 0.0
    gateway_stats: dict = field(default_factory=dict)


class RunDirectory:
    """Manifest and lock handling for one run directory."""

    def __init__(self, root: str | Path, cfg: RunConfig):
        self.root = Path(root)
        self.cfg = cfg
        self.fingerprint = cfg.fingerprint()
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.root / "manifest.json"
        self.stats_path = self.root / "stats.json"
        if self.manifest_path.exists():
            manifest = _read_json(self.manifest_path)
            if manifest.get("fingerprint") != self.fingerprint:
                raise ConfigInvalid(
                    "run-dir",
                    f"{self.root} was created with a different config fingerprint; "
                    "use a fresh run directory",
                )
            self.manifest = manifest
        else:
            self.manifest = {
                "fingerprint": self.fingerprint,
                "config": cfg.semantic_dict(),
                "stages": {},
            }

    def path(self, name: str) -> Path:
        return self.root / name

    def save_manifest(self) -> None:
        _write_json(self.manifest_path, self.manifest)

    def lock(self):
        return _RunLock(self.root / ".lock")

    def upstream_digests(self, stage: str) -> dict[str, str]:
        digests = {}
        for rel in STAGE_INPUTS[stage]:
            p = self.path(rel)
            if not p.exists():
                raise MissingUpstream(stage_for_artifact(rel))
            digests[rel] = _digest_file(p)
        return digests

    def stage_is_current(self, stage: str, inputs: dict[str, str]) -> bool:
        entry = self.manifest["stages"].get(stage)
        if not entry or entry.get("inputs") != inputs:
            return False
        for rel, digest in entry.get("outputs", {}).items():
            p = self.path(rel)
            if not p.exists() or _digest_file(p) != digest:
                return False
        return True

    def record_stage(self, stage: str, inputs: dict[str, str], outcome: StageOutcome) -> None:
        self.manifest["stages"][stage] = {
            "inputs": inputs,
            "outputs": outcome.outputs,
            "info": outcome.info,
            "status": "done",
        }
        self.save_manifest()


ARTIFACT_PRODUCER = {
    "graph.jsonl": "ingest",
    "ids.tsv": "ingest",
    "split.json": "split",
    "neighborhoods.json": "sample",
    "kept_pairs.json": "filter",
    "decisions.jsonl": "filter",
    "ep_corpus.jsonl": "filter",
    "kb_records.jsonl": "kb",
    "kb_failures.json": "kb",
    "corpus.jsonl": "corpus",
    "messages.jsonl": "extract",
    "extract_failures.json": "extract",
    "docs.jsonl": "embed",
    "embeddings.bin": "embed",
    "embeddings.json": "embed",
    "runs.json": "train",
    "report.json": "eval",
    "report.txt": "eval",
}


def stage_for_artifact(rel: str) -> str:
    return ARTIFACT_PRODUCER.get(rel, rel)


class _RunLock:
    """Advisory exclusive lock: one stage executes at a time per run dir."""

    def __init__(self, path: Path):
        self.path = path

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigInvalid(
                "run-dir",
                f"{self.path} exists; another run is active (or remove the stale lock)",
            ) from None
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


# ---------------------------------------------------------------------------
# artifact codecs


def _load_graph(rd: RunDirectory) -> TextAttributedGraph:
    graph, _ = load_dataset(rd.path("graph.jsonl"), "jsonl")
    if graph.labels is not None and graph.class_names is None:
        names = rd.cfg.dataset.class_names or default_class_names(max(graph.labels) + 1)
        graph = graph.with_class_names(names)
    return graph


def _load_split(rd: RunDirectory) -> SplitAssignment:
    obj = _read_json(rd.path("split.json"))
    return SplitAssignment(
        train_ids=tuple(obj["train_ids"]),
        val_ids=tuple(obj["val_ids"]),
        test_ids=tuple(obj["test_ids"]),
        seed=obj["seed"],
    )


def _load_neighborhoods(rd: RunDirectory) -> SampledNeighborhoods:
    obj = _read_json(rd.path("neighborhoods.json"))
    cap = INF if obj["cap_k"] == "inf" else float(obj["cap_k"])
    return SampledNeighborhoods(
        lists=tuple(tuple(js) for js in obj["lists"]), cap_k=cap, seed=obj["seed"]
    )


def _load_kept_pairs(rd: RunDirectory) -> list[tuple[int, int]]:
    obj = _read_json(rd.path("kept_pairs.json"))
    return [tuple(p) for p in obj["pairs"]]


def _gateway(rd: RunDirectory, backend_cfg, graph) -> Gateway:
    return Gateway(backend_cfg, oracle_graph=graph)


# ---------------------------------------------------------------------------
# stage implementations; each returns a StageOutcome with its outputs listed


def _stage_ingest(rd: RunDirectory) -> StageOutcome:
    cfg = rd.cfg
    if cfg.dataset.kind == "synthetic":
        ds = cfg.dataset
        graph = generate_synthetic(
            num_classes=ds.num_classes,
            nodes_per_class=ds.nodes_per_class,
            p_in=ds.p_in,
            p_out=ds.p_out,
            keywords=[list(k) for k in ds.keywords],
            filler_vocab=list(ds.filler_vocab),
            words_per_node=ds.words_per_node,
            seed=ds.seed,
        )
        id_map = {i: i for i in range(graph.num_nodes)}
    else:
        graph, id_map = load_dataset(cfg.dataset.path, cfg.dataset.format)
    save_dataset(graph, rd.path("graph.jsonl"))
    save_id_map(id_map, rd.path("ids.tsv"))
    return StageOutcome(
        name="ingest",
        status="done",
        info={"num_nodes": graph.num_nodes, "num_edges": len(graph.edges)},
    )


def _stage_split(rd: RunDirectory) -> StageOutcome:
    graph = _load_graph(rd)
    split = make_random_split(graph, seed=rd.cfg.base_seed)
    _write_json(
        rd.path("split.json"),
        {
            "train_ids": list(split.train_ids),
            "val_ids": list(split.val_ids),
            "test_ids": list(split.test_ids),
            "seed": split.seed,
        },
    )
    return StageOutcome(name="split", status="done", info={"train": len(split.train_ids)})


def _stage_sample(rd: RunDirectory) -> StageOutcome:
    graph = _load_graph(rd)
    nb = sample_edges(graph, rd.cfg.k, seed=rd.cfg.base_seed)
    _write_json(
        rd.path("neighborhoods.json"),
        {
            "cap_k": "inf" if nb.cap_k == INF else int(nb.cap_k),
            "seed": nb.seed,
            "lists": [list(js) for js in nb.lists],
        },
    )
    return StageOutcome(name="sample", status="done", info={"pairs": nb.pair_count()})


def _stage_filter(rd: RunDirectory) -> StageOutcome:
    cfg = rd.cfg
    graph = _load_graph(rd)
    nb = _load_neighborhoods(rd)
    templates = cfg.load_template_set()
    info: dict = {"oef": cfg.oef}
    stats = GatewayStats()

    if not cfg.oef:
        kept = sorted(nb.directed_pairs())
        rd.path("decisions.jsonl").write_text("", encoding="utf-8")
    else:
        split = _load_split(rd)
        records = build_ep_corpus(
            graph, split, cfg.n_ep_pairs, seed=cfg.base_seed, templates=templates,
            text_budget=cfg.text_budget,
        )
        save_ep_corpus(records, rd.path("ep_corpus.jsonl"))
        info["ep_true_fraction"] = true_fraction(records)
        gw = _gateway(rd, cfg.ep_backend, graph)
        fa = apply_edge_filter(
            nb, graph, gw, templates,
            text_budget=cfg.text_budget, symmetric=cfg.oef_symmetric,
        )
        fa.save_decisions(rd.path("decisions.jsonl"))
        kept = sorted(fa.kept_pairs)
        info["anomalies"] = fa.anomalies
        info["dropped"] = nb.pair_count() - len(kept)
        stats.merge(gw.stats)

    _write_json(
        rd.path("kept_pairs.json"),
        {"pairs": [list(p) for p in kept], "oef": cfg.oef, "scope": cfg.oef_scope},
    )
    return StageOutcome(
        name="filter", status="done", info=info, gateway_stats=vars(stats)
    )


def _stage_kb(rd: RunDirectory) -> StageOutcome:
    cfg = rd.cfg
    if cfg.ablations.no_finetune:
        rd.path("kb_records.jsonl").write_text("", encoding="utf-8")
        _write_json(rd.path("kb_failures.json"), [])
        return StageOutcome(name="kb", status="done", info={"skipped": "no_finetune"})

    graph = _load_graph(rd)
    split = _load_split(rd)
    kept = _load_kept_pairs(rd)
    count = cfg.v_s_count if cfg.v_s_count is not None else min(len(split.train_ids), 500)
    kb_nodes = sample_kb_nodes(split, count, seed=cfg.base_seed)
    pairs_by_source: dict[int, list[int]] = {}
    for i, j in kept:
        pairs_by_source.setdefault(i, []).append(j)
    gw = _gateway(rd, cfg.kb_backend, graph)
    records, failures = generate_kb_records(
        graph,
        kb_nodes,
        pairs_by_source,
        gw,
        cfg.load_template_set(),
        text_budget=cfg.text_budget,
        self_fallback=cfg.self_loop_mode != "off",
    )
    with rd.path("kb_records.jsonl").open("w", encoding="utf-8") as f:
        for r in records:
            f.write(
                json.dumps(
                    {
                        "i": r.source,
                        "j": r.neighbor,
                        "label_name": r.label_name,
                        "output": r.output_text,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
    _write_json(
        rd.path("kb_failures.json"),
        [{"i": f_.i, "j": f_.j, "error": f_.error} for f_ in failures],
    )
    return StageOutcome(
        name="kb",
        status="done",
        info={"records": len(records), "v_s": len(kb_nodes)},
        failures=len(failures),
        gateway_stats=vars(gw.stats),
    )


def _stage_corpus(rd: RunDirectory) -> StageOutcome:
    cfg = rd.cfg
    if cfg.ablations.no_finetune:
        rd.path("corpus.jsonl").write_text("", encoding="utf-8")
        return StageOutcome(name="corpus", status="done", info={"skipped": "no_finetune"})
    from .dual_llm import KbRecord

    graph = _load_graph(rd)
    records = []
    with rd.path("kb_records.jsonl").open("r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            records.append(
                KbRecord(
                    source=obj["i"],
                    neighbor=obj["j"],
                    label_name=obj["label_name"],
                    output_text=obj["output"],
                )
            )
    templates = cfg.load_template_set()
    provenance = CorpusProvenance(
        dataset_hash=graph.content_digest(),
        seeds={"base_seed": cfg.base_seed, "dataset_seed": cfg.dataset.seed},
        template_hashes=templates.hashes(),
    )
    emit_finetune_corpus(
        records, graph, templates, rd.path("corpus.jsonl"), provenance,
        text_budget=cfg.text_budget,
    )
    return StageOutcome(name="corpus", status="done", info={"records": len(records)})


def _stage_extract(rd: RunDirectory) -> StageOutcome:
    cfg = rd.cfg
    graph = _load_graph(rd)
    kept = _load_kept_pairs(rd)
    templates = cfg.load_template_set()
    gw = _gateway(rd, cfg.extract_backend, graph)
    messages, failures = extract_messages(
        graph, kept, gw, templates, text_budget=cfg.text_budget
    )

    if cfg.self_loop_mode == "full":
        self_targets = list(range(graph.num_nodes))
    elif cfg.self_loop_mode == "fallback_only":
        covered = {i for (i, j) in messages.messages if i != j}
        self_targets = [i for i in range(graph.num_nodes) if i not in covered]
    else:
        self_targets = []
    if self_targets:
        additions, self_failures = self_loop_enhance(
            graph, self_targets, gw, templates, text_budget=cfg.text_budget
        )
        for (i, j), text in additions.items():
            messages.add(i, j, text)
        failures = failures + self_failures

    messages.save(rd.path("messages.jsonl"))
    _write_json(
        rd.path("extract_failures.json"),
        [{"i": f_.i, "j": f_.j, "error": f_.error} for f_ in failures],
    )
    return StageOutcome(
        name="extract",
        status="done",
        info={"messages": messages.total(), "self_messages": len(self_targets)},
        failures=len(failures),
        gateway_stats=vars(gw.stats),
    )


def _stage_embed(rd: RunDirectory) -> StageOutcome:
    cfg = rd.cfg
    graph = _load_graph(rd)
    messages = MessageSet.load(rd.path("messages.jsonl"))
    include_origin = not cfg.ablations.no_origin_text

    docs = []
    for i in range(graph.num_nodes):
        incoming = messages.incoming(i)
        self_msg = messages.self_message(i)
        if self_msg is not None:
            incoming = sorted(incoming + [(i, self_msg)])
        docs.append(aggregate_text(i, graph.texts[i], incoming, include_origin))

    with rd.path("docs.jsonl").open("w", encoding="utf-8") as f:
        for d in docs:
            f.write(
                json.dumps(
                    {
                        "node": d.node,
                        "parts": d.parts,
                        "origin_included": d.origin_included,
                        "text": d.text,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )

    network = 0
    if cfg.embed.backend == "hashing":
        matrix = embed_hashing_many(docs, d=cfg.embed.d)
    else:
        from .embed import EmbeddingClient

        client = EmbeddingClient(cfg.embed.service)
        matrix = client.embed(docs)
        network = client.network_requests
    save_matrix(matrix, rd.path("embeddings.bin"), dataset_hash=graph.content_digest())
    return StageOutcome(
        name="embed",
        status="done",
        info={"d": matrix.d, "embedder_id": matrix.embedder_id},
        gateway_stats={"dispatches": network, "cache_hits": 0, "network_requests": network},
    )


def _gnn_edges(rd: RunDirectory) -> list[tuple[int, int]]:
    """Undirected edge set for the classifier, honoring the filter scope."""
    cfg = rd.cfg
    if cfg.oef and cfg.oef_scope == "both":
        directed = _load_kept_pairs(rd)
    else:
        directed = _load_neighborhoods(rd).directed_pairs()
    und = {(min(i, j), max(i, j)) for i, j in directed if i != j}
    return sorted(und)


def _stage_train(rd: RunDirectory) -> StageOutcome:
    cfg = rd.cfg
    graph = _load_graph(rd)
    matrix, _sidecar = load_matrix(rd.path("embeddings.bin"))
    labels = np.asarray(graph.labels, dtype=np.int64)

    if cfg.ablations.no_es:
        adjacency = None
    else:
        adjacency = normalize_adjacency(_gnn_edges(rd), graph.num_nodes)

    rows = []
    for r in range(cfg.runs):
        split_seed = cfg.base_seed + r
        init_seed = cfg.base_seed + r
        split = make_random_split(graph, seed=split_seed)
        result = train(
            matrix.rows, adjacency, labels, split, replace(cfg.train, seed=init_seed)
        )
        acc = evaluate(result.params, matrix.rows, adjacency, labels, split)
        rows.append(
            {
                "run": r,
                "split_seed": split_seed,
                "init_seed": init_seed,
                "accuracy": acc,
                "epochs": result.epochs_run,
            }
        )
    _write_json(rd.path("runs.json"), rows)
    return StageOutcome(name="train", status="done", info={"runs": cfg.runs})


def _stage_eval(rd: RunDirectory) -> StageOutcome:
    rows = _read_json(rd.path("runs.json"))
    report = protocol_report([r["accuracy"] for r in rows], rd.fingerprint)
    _write_json(rd.path("report.json"), report.as_dict())
    rd.path("report.txt").write_text(
        render_report_table([(rd.cfg.label, report)]), encoding="utf-8"
    )
    return StageOutcome(
        name="eval",
        status="done",
        info={"mean": report.mean, "std": report.std},
    )


_STAGE_FNS = {
    "ingest": _stage_ingest,
    "split": _stage_split,
    "sample": _stage_sample,
    "filter": _stage_filter,
    "kb": _stage_kb,
    "corpus": _stage_corpus,
    "extract": _stage_extract,
    "embed": _stage_embed,
    "train": _stage_train,
    "eval": _stage_eval,
}


@dataclass
class PipelineResult:
    outcomes: list[StageOutcome]
    report: ExperimentReport | None = None

    @property
    def total_failures(self) -> int:
        return sum(o.failures for o in self.outcomes)


def _finalize_outcome(rd: RunDirectory, stage: str, inputs, outcome, elapsed) -> None:
    outcome.elapsed_s = elapsed
    produced = {}
    for rel, producer in ARTIFACT_PRODUCER.items():
        if producer == stage and rd.path(rel).exists():
            produced[rel] = _digest_file(rd.path(rel))
    outcome.outputs = produced
    rd.record_stage(stage, inputs, outcome)
    _append_stats(rd, outcome)


def _append_stats(rd: RunDirectory, outcome: StageOutcome) -> None:
    stats = _read_json(rd.stats_path) if rd.stats_path.exists() else {"stages": {}}
    stats["stages"][outcome.name] = {
        "status": outcome.status,
        "elapsed_s": outcome.elapsed_s,
        "failures": outcome.failures,
        "gateway": outcome.gateway_stats,
        "at": datetime.now(timezone.utc).isoformat(),
    }
    _write_json(rd.stats_path, stats)


def run_stage(stage: str, cfg: RunConfig, run_dir: str | Path) -> StageOutcome:
    """Execute one stage (or skip it when inputs and outputs are unchanged)."""
    if stage not in _STAGE_FNS:
        raise ConfigInvalid("stage", f"unknown stage {stage!r}")
    rd = RunDirectory(run_dir, cfg)
    with rd.lock():
        return _run_stage_locked(rd, stage)


def _run_stage_locked(rd: RunDirectory, stage: str) -> StageOutcome:
    inputs = rd.upstream_digests(stage)
    if rd.stage_is_current(stage, inputs):
        outcome = StageOutcome(name=stage, status="skipped (up-to-date)")
        _append_stats(rd, outcome)
        return outcome
    start = time.monotonic()
    outcome = _STAGE_FNS[stage](rd)
    _finalize_outcome(rd, stage, inputs, outcome, time.monotonic() - start)
    return outcome


def run_all(cfg: RunConfig, run_dir: str | Path) -> PipelineResult:
    rd = RunDirectory(run_dir, cfg)
    outcomes = []
    with rd.lock():
        for stage in STAGES:
            outcomes.append(_run_stage_locked(rd, stage))
    report = None
    report_path = rd.path("report.json")
    if report_path.exists():
        obj = _read_json(report_path)
        report = protocol_report(obj["per_seed_accuracy"], obj["config_fingerprint"])
    return PipelineResult(outcomes=outcomes, report=report)


# ---------------------------------------------------------------------------
# sweeps


def sweep(
    cfg: RunConfig,
    axis: str,
    values: list,
    sweep_root: str | Path,
) -> list[dict]:
    """One full pipeline per axis value; caches are shared through the
    backend cache_dir, run directories are per-cell."""
    if axis not in ("k", "oef"):
        raise ConfigInvalid("axis", f"must be 'k' or 'oef', got {axis!r}")
    if not values:
        raise ConfigInvalid("values", "sweep needs at least one value")
    sweep_root = Path(sweep_root)
    results = []
    for value in values:
        if axis == "k":
            parsed = INF if str(value).lower() in ("inf", "infinity") else float(value)
            cell_cfg = with_updates(cfg, k=parsed, label=f"k={value}")
            cell_name = f"k={value}"
        else:
            flag = value if isinstance(value, bool) else str(value).lower() in ("on", "true", "1")
            cell_cfg = with_updates(cfg, oef=flag, label=f"oef={'on' if flag else 'off'}")
            cell_name = f"oef={'on' if flag else 'off'}"
        cell_dir = sweep_root / cell_name
        result = run_all(cell_cfg, cell_dir)
        message_count = sum(
            1 for line in (cell_dir / "messages.jsonl").read_text(encoding="utf-8").splitlines() if line
        )
        results.append(
            {
                "value": value,
                "label": cell_name,
                "report": result.report,
                "messages": message_count,
                "run_dir": str(cell_dir),
                "failures": result.total_failures,
            }
        )
    table = render_sweep_table(axis, results)
    (sweep_root / "sweep_table.txt").write_text(table, encoding="utf-8")
    return results


def render_sweep_table(axis: str, results: list[dict]) -> str:
    header = f"{axis:<8}  {'accuracy':<16}  messages"
    lines = [header]
    for r in results:
        report = r["report"]
        acc = f"{100 * report.mean:.2f} ± {100 * report.std:.2f}" if report else "-"
        lines.append(f"{str(r['value']):<8}  {acc:<16}  {r['messages']}")
    return "\n".join(lines) + "\n"
