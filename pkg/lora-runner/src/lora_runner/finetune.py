"""LoRA finetuning over an instruction corpus.

The objective is the log-likelihood of each record's output tokens
conditioned on (instruction, input): the loss mask covers only the output
span plus the end-of-sequence token, and only the low-rank increments
receive gradients.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from .corpus import CorpusRecord, corpus_digest, load_corpus
from .lora import apply_lora, lora_parameters, save_adapter
from .model import (
    BOS,
    EOS,
    PAD,
    SEP,
    build_base_model,
    encode,
    perplexity_from_nll,
    state_digest,
)


class OutOfMemory(Exception):
    pass


@dataclass(frozen=True)
class FinetuneConfig:
    base_model: str = "tiny-lm-64"
    rank: int = 16
    alpha: float = 32.0
    epochs: int = 3
    learning_rate: float = 2e-4
    batch_size: int = 8
    seed: int = 0


@dataclass
class RunnerManifest:
    corpus_path: str
    corpus_digest: str
    base_model: str
    base_digest: str
    adapter_dir: str
    adapter_digest: str
    epochs: int
    rank: int
    learning_rate: float
    perplexity_before: float
    perplexity_after: float
    endpoint_url: str | None = None

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunnerManifest":
        return cls(**json.loads(Path(path).read_text()))


def build_sample(record: CorpusRecord, context: int) -> tuple[list[int], list[bool]]:
    """Token ids plus a mask marking the positions whose NEXT token is scored.

    Layout: BOS prompt-bytes SEP output-bytes EOS. When the sample is too
    long, prompt bytes are dropped from the left so the scored span survives.
    """
    prompt = encode(f"{record.instruction}\n\n{record.input}")
    output = encode(record.output)
    overhead = 3  # BOS, SEP, EOS
    budget = context - overhead - len(output)
    if budget < 0:
        output = output[: max(context - overhead - 8, 8)]
        budget = context - overhead - len(output)
    prompt = prompt[-budget:] if budget > 0 else []
    tokens = [BOS] + prompt + [SEP] + output + [EOS]
    # positions predicting output tokens and EOS: from the SEP position on
    sep_index = 1 + len(prompt)
    mask = [False] * len(tokens)
    for pos in range(sep_index, len(tokens) - 1):
        mask[pos] = True
    return tokens, mask


def _batches(samples, batch_size):
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        width = max(len(t) for t, _ in chunk)
        tokens = torch.full((len(chunk), width), PAD, dtype=torch.long)
        mask = torch.zeros((len(chunk), width), dtype=torch.bool)
        for row, (toks, m) in enumerate(chunk):
            tokens[row, : len(toks)] = torch.tensor(toks, dtype=torch.long)
            mask[row, : len(m)] = torch.tensor(m, dtype=torch.bool)
        yield tokens, mask


def _masked_nll(model, tokens, mask) -> tuple[torch.Tensor, int]:
    """Sum of negative log-likelihoods over masked positions."""
    logits = model(tokens)
    # position p scores token p+1
    pred = logits[:, :-1, :]
    target = tokens[:, 1:]
    score_mask = mask[:, :-1]
    nll = F.cross_entropy(
        pred.reshape(-1, pred.shape[-1]), target.reshape(-1), reduction="none"
    ).reshape(target.shape)
    return nll[score_mask].sum(), int(score_mask.sum())


def corpus_perplexity(model, samples, batch_size: int = 8) -> float:
    model.eval()
    total_nll, total_tokens = 0.0, 0
    with torch.no_grad():
        for tokens, mask in _batches(samples, batch_size):
            nll, count = _masked_nll(model, tokens, mask)
            total_nll += float(nll)
            total_tokens += count
    return perplexity_from_nll(total_nll, total_tokens)


def finetune(
    corpus_path: str | Path,
    out_dir: str | Path,
    config: FinetuneConfig = FinetuneConfig(),
) -> RunnerManifest:
    """Train LoRA adapters on the corpus and write adapter dir + manifest."""
    corpus_path = Path(corpus_path)
    out_dir = Path(out_dir)
    records = load_corpus(corpus_path)
    digest_before = corpus_digest(corpus_path)

    model = build_base_model(config.base_model)
    base_digest = state_digest(model)
    samples = [build_sample(r, model.spec.context) for r in records]

    ppl_before = corpus_perplexity(model, samples, config.batch_size)

    apply_lora(model, rank=config.rank, alpha=config.alpha, seed=config.seed)
    params = lora_parameters(model)
    optimizer = torch.optim.AdamW(params, lr=config.learning_rate)
    torch.manual_seed(config.seed)

    model.train()
    try:
        for _epoch in range(config.epochs):
            for tokens, mask in _batches(samples, config.batch_size):
                optimizer.zero_grad()
                nll, count = _masked_nll(model, tokens, mask)
                loss = nll / max(count, 1)
                loss.backward()
                optimizer.step()
    except RuntimeError as e:
        if "out of memory" in str(e).lower():
            raise OutOfMemory(
                f"training ran out of memory at batch_size={config.batch_size}; "
                "retry with a smaller --batch-size"
            ) from e
        raise
    model.eval()

    ppl_after = corpus_perplexity(model, samples, config.batch_size)
    save_adapter(model, out_dir, config.base_model, config.rank, config.alpha)

    if corpus_digest(corpus_path) != digest_before:
        raise RuntimeError("corpus file changed during the run")

    adapter_meta = json.loads((out_dir / "adapter.json").read_text())
    manifest = RunnerManifest(
        corpus_path=str(corpus_path),
        corpus_digest=digest_before,
        base_model=config.base_model,
        base_digest=base_digest,
        adapter_dir=str(out_dir),
        adapter_digest=adapter_meta["adapter_digest"],
        epochs=config.epochs,
        rank=config.rank,
        learning_rate=config.learning_rate,
        perplexity_before=ppl_before,
        perplexity_after=ppl_after,
    )
    manifest.save(out_dir / "manifest.json")
    return manifest
