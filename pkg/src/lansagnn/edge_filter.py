"""Optional edge filter: corpus construction for the pair classifier and
adjacency rewriting from its True/False answers.

A kept pair means the backend judged the two nodes homophilous. Responses
that parse to neither True nor False keep the edge (fail-open) so that noisy
answers can only cost efficiency, never connectivity.
"""

from __future__ import annotations

import json
import logging
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .errors import MissingLabels, TrainSetTooSmall
from .gateway import ChatRequest, Gateway
from .graph import (
    STREAM_EP,
    SampledNeighborhoods,
    SplitAssignment,
    TextAttributedGraph,
    rng_for,
)
from .templates import TemplateSet, clip_text, compose_prompt, pair_input, render_prompt

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EpCorpusRecord:
    instruction: str
    input: str
    output: str  # exactly "True" or "False"
    source: int
    neighbor: int


@dataclass(frozen=True)
class PairDecision:
    i: int
    j: int
    raw: str
    kept: bool


@dataclass(frozen=True)
class FilteredAdjacency:
    kept_pairs: frozenset[tuple[int, int]]
    decisions: tuple[PairDecision, ...]
    anomalies: int  # responses that parsed to neither True nor False

    def decisions_jsonl(self) -> str:
        lines = [
            json.dumps({"i": d.i, "j": d.j, "raw": d.raw, "kept": d.kept}, ensure_ascii=False)
            for d in self.decisions
        ]
        return "\n".join(lines) + ("\n" if lines else "")

    def save_decisions(self, path: str | Path) -> None:
        Path(path).write_text(self.decisions_jsonl(), encoding="utf-8")


def true_fraction(records: Sequence[EpCorpusRecord]) -> float:
    if not records:
        return 0.0
    return sum(r.output == "True" for r in records) / len(records)


def build_ep_corpus(
    graph: TextAttributedGraph,
    split: SplitAssignment,
    n_pairs: int,
    seed: int,
    templates: TemplateSet,
    text_budget: int = 2000,
) -> list[EpCorpusRecord]:
    """Sample n_pairs ordered training pairs (i != j) and label each record
    True iff the two class labels match."""
    if graph.labels is None:
        raise MissingLabels("EP corpus needs labels")
    if n_pairs < 1:
        raise TrainSetTooSmall("n_pairs must be >= 1")
    train = split.train_ids
    if len(train) < 2:
        raise TrainSetTooSmall(f"training set has {len(train)} nodes, need >= 2")

    instruction = render_prompt(templates.ep, {})
    rng = rng_for(seed, STREAM_EP)
    records = []
    while len(records) < n_pairs:
        i = train[int(rng.integers(0, len(train)))]
        j = train[int(rng.integers(0, len(train)))]
        if i == j:
            continue
        records.append(
            EpCorpusRecord(
                instruction=instruction,
                input=pair_input(
                    clip_text(graph.texts[i], text_budget),
                    clip_text(graph.texts[j], text_budget),
                ),
                output="True" if graph.labels[i] == graph.labels[j] else "False",
                source=i,
                neighbor=j,
            )
        )
    frac = true_fraction(records)
    log.info("EP corpus balance: %.3f True over %d records", frac, len(records))
    return records


def save_ep_corpus(records: Sequence[EpCorpusRecord], path: str | Path) -> None:
    """Corpus JSONL shape shared with the finetune corpus emitter."""
    with Path(path).open("w", encoding="utf-8") as f:
        for r in records:
            f.write(
                json.dumps(
                    {
                        "instruction": r.instruction,
                        "input": r.input,
                        "output": r.output,
                        "meta": {"i": r.source, "j": r.neighbor},
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def parse_verdict(raw: str) -> bool | None:
    """First-token rule: strip, case-fold, read the leading token.

    Returns True/False for a parseable verdict, None for anything else.
    """
    parts = raw.strip().split()
    if not parts:
        return None
    token = parts[0].strip(string.punctuation).casefold()
    if token == "true":
        return True
    if token == "false":
        return False
    return None


def apply_edge_filter(
    neighborhoods: SampledNeighborhoods,
    graph: TextAttributedGraph,
    gateway: Gateway,
    templates: TemplateSet,
    text_budget: int = 2000,
    symmetric: bool = False,
) -> FilteredAdjacency:
    """Query the backend once per directed sampled pair and keep the pairs it
    calls True. In symmetric mode an unordered pair is dropped entirely as
    soon as either direction answers False."""
    pairs = neighborhoods.directed_pairs()
    instruction = render_prompt(templates.ep, {})
    requests_ = []
    for i, j in pairs:
        text_a = clip_text(graph.texts[i], text_budget)
        text_b = clip_text(graph.texts[j], text_budget)
        requests_.append(
            ChatRequest(
                rendered_prompt=compose_prompt(instruction, pair_input(text_a, text_b)),
                model=gateway.config.model,
                max_tokens=8,
                temperature=gateway.config.temperature,
                template_hash=templates.ep.body_hash,
                bindings={"text_a": text_a, "text_b": text_b},
                node_pair=(i, j),
            )
        )
    responses = gateway.complete_many(requests_)

    verdicts: dict[tuple[int, int], bool | None] = {}
    raws: dict[tuple[int, int], str] = {}
    anomalies = 0
    for (i, j), resp in zip(pairs, responses):
        v = parse_verdict(resp.text)
        if v is None:
            anomalies += 1
            log.warning("unparseable filter response for pair (%d,%d): %r", i, j, resp.text[:80])
        verdicts[(i, j)] = v
        raws[(i, j)] = resp.text

    kept = set()
    for i, j in pairs:
        v = verdicts[(i, j)]
        keep = v is not False  # fail-open on unparseable answers
        if symmetric and keep and verdicts.get((j, i)) is False:
            keep = False
        if keep:
            kept.add((i, j))

    decisions = tuple(
        PairDecision(i=i, j=j, raw=raws[(i, j)], kept=(i, j) in kept) for i, j in sorted(pairs)
    )
    return FilteredAdjacency(
        kept_pairs=frozenset(kept), decisions=decisions, anomalies=anomalies
    )
