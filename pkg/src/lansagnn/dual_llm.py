"""Two-stage message machinery: knowledge-base record generation over sampled
training nodes, instruction-tuning corpus emission, per-pair message
extraction, and the self-loop enhancement variant.

All generation goes through a Gateway, so a warm cache makes every function
here a pure function of (graph, seeds, templates, backend kind).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import (
    BackendError,
    CountExceedsTrain,
    EmptyNeighborhood,
    MalformedRecord,
    MissingLabels,
)
from .gateway import ChatRequest, Gateway
from .graph import STREAM_KB, SplitAssignment, TextAttributedGraph, rng_for
from .templates import (
    TemplateSet,
    clip_text,
    compose_prompt,
    pair_input,
    render_prompt,
    self_input,
)


@dataclass(frozen=True)
class KbRecord:
    source: int
    neighbor: int
    label_name: str
    output_text: str


@dataclass(frozen=True)
class CorpusProvenance:
    dataset_hash: str
    seeds: Mapping[str, int]
    template_hashes: Mapping[str, str]

    def as_dict(self) -> dict:
        return {
            "dataset_hash": self.dataset_hash,
            "seeds": dict(self.seeds),
            "template_hashes": dict(self.template_hashes),
        }


@dataclass(frozen=True)
class FinetuneCorpus:
    records: tuple[dict, ...]  # {"instruction","input","output","meta"}
    provenance: CorpusProvenance


@dataclass
class MessageSet:
    """Map from directed pair (i, j) to the extracted message text.

    Self entries use key (i, i). Values are always non-empty.
    """

    messages: dict[tuple[int, int], str] = field(default_factory=dict)

    def add(self, i: int, j: int, text: str) -> None:
        if not text:
            raise BackendError(f"empty message for pair ({i},{j})")
        self.messages[(i, j)] = text

    def incoming(self, i: int) -> list[tuple[int, str]]:
        """Messages keyed (i, j) for any j != i, sorted ascending by j."""
        out = [(j, t) for (a, j), t in self.messages.items() if a == i and j != i]
        return sorted(out)

    def self_message(self, i: int) -> str | None:
        return self.messages.get((i, i))

    def total(self) -> int:
        return len(self.messages)

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as f:
            for (i, j), text in sorted(self.messages.items()):
                f.write(json.dumps({"i": i, "j": j, "text": text}, ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "MessageSet":
        ms = cls()
        with Path(path).open("r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                ms.add(obj["i"], obj["j"], obj["text"])
        return ms


@dataclass(frozen=True)
class GenerationFailure:
    i: int
    j: int
    error: str


def sample_kb_nodes(split: SplitAssignment, count: int, seed: int) -> tuple[int, ...]:
    """Uniform sample without replacement from the training ids, sorted."""
    train = split.train_ids
    if count > len(train):
        raise CountExceedsTrain(f"count {count} exceeds |train| = {len(train)}")
    rng = rng_for(seed, STREAM_KB)
    picked = rng.choice(len(train), size=count, replace=False)
    return tuple(sorted(train[int(p)] for p in picked))


def _pair_request(
    graph: TextAttributedGraph,
    i: int,
    j: int,
    prompt: str,
    gateway: Gateway,
    template_hash: str,
    text_a: str,
    text_b: str,
) -> ChatRequest:
    return ChatRequest(
        rendered_prompt=prompt,
        model=gateway.config.model,
        max_tokens=gateway.config.max_tokens,
        temperature=gateway.config.temperature,
        template_hash=template_hash,
        bindings={"text_a": text_a, "text_b": text_b},
        node_pair=(i, j),
    )


def generate_kb_records(
    graph: TextAttributedGraph,
    kb_nodes: Sequence[int],
    pairs_by_source: Mapping[int, Sequence[int]],
    gateway: Gateway,
    templates: TemplateSet,
    text_budget: int = 2000,
    self_fallback: bool = False,
) -> tuple[list[KbRecord], list[GenerationFailure]]:
    """One record per (source in kb_nodes, neighbor in its filtered list).

    With self_fallback, a source with an empty list contributes one (i, i)
    record instead of failing.
    """
    if graph.labels is None or graph.class_names is None:
        raise MissingLabels("knowledge-base generation needs labels and class names")

    plan: list[tuple[int, int]] = []
    for i in sorted(kb_nodes):
        neighbors = list(pairs_by_source.get(i, ()))
        if not neighbors:
            if not self_fallback:
                raise EmptyNeighborhood(f"node {i} has no sampled neighbors")
            neighbors = [i]
        for j in neighbors:
            plan.append((i, j))

    requests_ = []
    for i, j in plan:
        text_a = clip_text(graph.texts[i], text_budget)
        text_b = clip_text(graph.texts[j], text_budget)
        prompt = render_prompt(
            templates.kb,
            {"text_a": text_a, "text_b": text_b, "label_name": graph.label_name(i)},
        )
        requests_.append(
            _pair_request(graph, i, j, prompt, gateway, templates.kb.body_hash, text_a, text_b)
        )

    records: list[KbRecord] = []
    failures: list[GenerationFailure] = []
    for (i, j), resp_or_err in zip(plan, _complete_tolerant(gateway, requests_)):
        if isinstance(resp_or_err, str):
            failures.append(GenerationFailure(i, j, resp_or_err))
            continue
        records.append(
            KbRecord(
                source=i,
                neighbor=j,
                label_name=graph.label_name(i),
                output_text=resp_or_err.text,
            )
        )
    records.sort(key=lambda r: (r.source, r.neighbor))
    return records, failures


def _complete_tolerant(gateway: Gateway, requests_: Sequence[ChatRequest]):
    """complete_many, but per-request backend errors become error strings."""

    def one(r):
        try:
            return gateway.complete(r)
        except BackendError as e:
            return f"{type(e).__name__}: {e}"

    if not requests_:
        return []
    if len(requests_) == 1 or gateway.config.max_inflight == 1:
        return [one(r) for r in requests_]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=gateway.config.max_inflight) as pool:
        return list(pool.map(one, requests_))


def class_list_string(graph: TextAttributedGraph) -> str:
    if graph.class_names is None:
        raise MissingLabels("graph has no class names")
    return ", ".join(graph.class_names)


def emit_finetune_corpus(
    records: Sequence[KbRecord],
    graph: TextAttributedGraph,
    templates: TemplateSet,
    path: str | Path,
    provenance: CorpusProvenance,
    text_budget: int = 2000,
) -> FinetuneCorpus:
    """Serialize KB records as instruction-tuning JSONL.

    Line 1 is a '#'-prefixed provenance header; each following line is one
    {"instruction", "input", "output", "meta"} record. The instruction is the
    extraction instruction rendered once, identical across records.
    """
    if not records:
        raise MalformedRecord(0, "no knowledge-base records to emit")
    instruction = render_prompt(templates.extract, {"class_list": class_list_string(graph)})
    corpus_records = []
    for r in records:
        text_a = clip_text(graph.texts[r.source], text_budget)
        text_b = clip_text(graph.texts[r.neighbor], text_budget)
        corpus_records.append(
            {
                "instruction": instruction,
                "input": pair_input(text_a, text_b),
                "output": r.output_text,
                "meta": {"i": r.source, "j": r.neighbor},
            }
        )
    path = Path(path)
    with path.open("w", encoding="utf-8") as f:
        f.write("# " + json.dumps(provenance.as_dict(), sort_keys=True) + "\n")
        for rec in corpus_records:
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")
    return FinetuneCorpus(records=tuple(corpus_records), provenance=provenance)


def load_finetune_corpus(path: str | Path) -> list[dict]:
    """Read corpus JSONL back, skipping '#' header lines."""
    out = []
    with Path(path).open("r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedRecord(line_no, f"invalid JSON: {e.msg}") from e
            out.append(obj)
    return out


def extract_messages(
    graph: TextAttributedGraph,
    pairs: Iterable[tuple[int, int]],
    gateway: Gateway,
    templates: TemplateSet,
    text_budget: int = 2000,
) -> tuple[MessageSet, list[GenerationFailure]]:
    """Generate one message per directed pair via the extraction backend.

    Failed pairs land in the failure manifest and are simply absent from the
    MessageSet; downstream aggregation tolerates the gaps.
    """
    pair_list = sorted(set(pairs))
    instruction = render_prompt(templates.extract, {"class_list": class_list_string(graph)})
    requests_ = []
    for i, j in pair_list:
        text_a = clip_text(graph.texts[i], text_budget)
        text_b = clip_text(graph.texts[j], text_budget)
        prompt = compose_prompt(instruction, pair_input(text_a, text_b))
        requests_.append(
            _pair_request(graph, i, j, prompt, gateway, templates.extract.body_hash, text_a, text_b)
        )

    messages = MessageSet()
    failures: list[GenerationFailure] = []
    for (i, j), resp_or_err in zip(pair_list, _complete_tolerant(gateway, requests_)):
        if isinstance(resp_or_err, str):
            failures.append(GenerationFailure(i, j, resp_or_err))
        elif not resp_or_err.text:
            failures.append(GenerationFailure(i, j, "empty response"))
        else:
            messages.add(i, j, resp_or_err.text)
    return messages, failures


def self_loop_enhance(
    graph: TextAttributedGraph,
    node_ids: Iterable[int],
    gateway: Gateway,
    templates: TemplateSet,
    text_budget: int = 2000,
) -> tuple[dict[tuple[int, int], str], list[GenerationFailure]]:
    """Generate a per-node enhancement text from the node's own attribute.

    Returns additions keyed (i, i); the caller merges them into a MessageSet.
    """
    ids = sorted(set(node_ids))
    instruction = render_prompt(templates.self_enhance, {})
    requests_ = []
    for i in ids:
        text_a = clip_text(graph.texts[i], text_budget)
        prompt = compose_prompt(instruction, self_input(text_a))
        requests_.append(
            ChatRequest(
                rendered_prompt=prompt,
                model=gateway.config.model,
                max_tokens=gateway.config.max_tokens,
                temperature=gateway.config.temperature,
                template_hash=templates.self_enhance.body_hash,
                bindings={"text_a": text_a, "text_b": text_a},
                node_pair=(i, i),
            )
        )
    additions: dict[tuple[int, int], str] = {}
    failures: list[GenerationFailure] = []
    for i, resp_or_err in zip(ids, _complete_tolerant(gateway, requests_)):
        if isinstance(resp_or_err, str):
            failures.append(GenerationFailure(i, i, resp_or_err))
        elif not resp_or_err.text:
            failures.append(GenerationFailure(i, i, "empty response"))
        else:
            additions[(i, i)] = resp_or_err.text
    return additions, failures
