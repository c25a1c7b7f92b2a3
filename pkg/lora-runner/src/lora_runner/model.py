"""Byte-level causal transformer language models with a local registry.

There is no model hub in this environment, so "base model" means a named
configuration whose weights are initialized deterministically from the model
id and can be exported to disk. The LoRA machinery treats these exactly like
any other frozen pretrained checkpoint.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn

BOS, SEP, EOS, PAD = 256, 257, 258, 259
VOCAB_SIZE = 260


@dataclass(frozen=True)
class ModelSpec:
    model_id: str
    d_model: int
    n_layer: int
    n_head: int
    context: int


REGISTRY = {
    "tiny-lm-64": ModelSpec("tiny-lm-64", d_model=64, n_layer=2, n_head=2, context=256),
    "tiny-lm-128": ModelSpec("tiny-lm-128", d_model=128, n_layer=2, n_head=4, context=512),
}


class UnknownModel(Exception):
    pass


def encode(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode(tokens: list[int]) -> str:
    data = bytes(t for t in tokens if t < 256)
    return data.decode("utf-8", errors="replace")


class SelfAttention(nn.Module):
    """Causal multi-head attention with explicit q/k/v/o projections, so the
    LoRA wrapper can target each projection as a plain nn.Linear."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.n_head = spec.n_head
        self.head_dim = spec.d_model // spec.n_head
        self.q_proj = nn.Linear(spec.d_model, spec.d_model)
        self.k_proj = nn.Linear(spec.d_model, spec.d_model)
        self.v_proj = nn.Linear(spec.d_model, spec.d_model)
        self.o_proj = nn.Linear(spec.d_model, spec.d_model)

    def forward(self, x, attn_mask):
        b, s, d = x.shape

        def heads(t):
            return t.view(b, s, self.n_head, self.head_dim).transpose(1, 2)

        q, k, v = heads(self.q_proj(x)), heads(self.k_proj(x)), heads(self.v_proj(x))
        scores = (q @ k.transpose(-2, -1)) / (self.head_dim**0.5)
        scores = scores + attn_mask  # (s, s) broadcast over batch and heads
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, s, d)
        return self.o_proj(out)


class Block(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.ln1 = nn.LayerNorm(spec.d_model)
        self.attn = SelfAttention(spec)
        self.ln2 = nn.LayerNorm(spec.d_model)
        self.mlp_up = nn.Linear(spec.d_model, 4 * spec.d_model)
        self.mlp_down = nn.Linear(4 * spec.d_model, spec.d_model)

    def forward(self, x, attn_mask):
        x = x + self.attn(self.ln1(x), attn_mask)
        x = x + self.mlp_down(torch.nn.functional.gelu(self.mlp_up(self.ln2(x))))
        return x


class ByteLM(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.tok_emb = nn.Embedding(VOCAB_SIZE, spec.d_model)
        self.pos_emb = nn.Embedding(spec.context, spec.d_model)
        self.blocks = nn.ModuleList(Block(spec) for _ in range(spec.n_layer))
        self.ln_f = nn.LayerNorm(spec.d_model)
        self.head = nn.Linear(spec.d_model, VOCAB_SIZE, bias=False)
        self.head.weight = self.tok_emb.weight  # tied
        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(module):
        # 0.02-std init keeps the tied-head logits near zero, so the fresh
        # model is close to a uniform byte distribution
        if isinstance(module, (nn.Linear, nn.Embedding)):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)
            if isinstance(module, nn.Linear) and module.bias is not None:
                nn.init.zeros_(module.bias)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """tokens: (batch, seq) int64, right-padded with PAD; returns logits.

        Padding lives only at the tail of each row and attention is causal,
        so pad positions never influence any scored position.
        """
        b, s = tokens.shape
        if s > self.spec.context:
            raise ValueError(f"sequence length {s} exceeds context {self.spec.context}")
        pos = torch.arange(s, device=tokens.device)
        x = self.tok_emb(tokens) + self.pos_emb(pos)[None]
        causal = torch.triu(
            torch.full((s, s), float("-inf"), device=tokens.device), diagonal=1
        )
        for block in self.blocks:
            x = block(x, causal)
        return self.head(self.ln_f(x))


def _seed_from_id(model_id: str) -> int:
    return int.from_bytes(hashlib.sha256(model_id.encode()).digest()[:4], "big")


def build_base_model(model_id: str) -> ByteLM:
    """Instantiate the named base model with its deterministic weights."""
    if model_id not in REGISTRY:
        raise UnknownModel(f"unknown base model {model_id!r}; known: {sorted(REGISTRY)}")
    spec = REGISTRY[model_id]
    torch.manual_seed(_seed_from_id(model_id))
    model = ByteLM(spec)
    model.eval()
    return model


def state_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return "sha256:" + h.hexdigest()


def export_base_weights(model_id: str, out_dir: str | Path) -> Path:
    """Write the base checkpoint to disk so the weights are inspectable."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_base_model(model_id)
    torch.save(model.state_dict(), out_dir / "base.pt")
    (out_dir / "base.json").write_text(
        json.dumps(
            {"model_id": model_id, "spec": asdict(REGISTRY[model_id]),
             "digest": state_digest(model)},
            indent=2,
        )
        + "\n"
    )
    return out_dir / "base.pt"


def perplexity_from_nll(total_nll: float, total_tokens: int) -> float:
    if total_tokens == 0:
        return math.inf
    return math.exp(total_nll / total_tokens)
