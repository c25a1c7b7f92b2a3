"""Low-rank adapters over frozen linear layers.

Every nn.Linear inside the attention and MLP blocks is wrapped as
W x + (alpha/r) * B A x with A gaussian, B zero, so the adapted model is
exactly the base model at initialization and only A/B receive gradients.
"""

from __future__ import annotations

import json
from pathlib import Path

import torch
import torch.nn as nn

from .model import ByteLM, build_base_model, state_digest


class AdapterMismatch(Exception):
    pass


class LoRALinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, alpha: float):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.scale = alpha / rank
        self.lora_a = nn.Parameter(torch.randn(rank, base.in_features) * 0.02)
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank))

    def forward(self, x):
        return self.base(x) + (x @ self.lora_a.T @ self.lora_b.T) * self.scale


def _wrap_linears(module: nn.Module, rank: int, alpha: float) -> int:
    wrapped = 0
    for name, child in list(module.named_children()):
        if isinstance(child, nn.Linear):
            setattr(module, name, LoRALinear(child, rank, alpha))
            wrapped += 1
        else:
            wrapped += _wrap_linears(child, rank, alpha)
    return wrapped


def apply_lora(model: ByteLM, rank: int = 16, alpha: float = 32.0, seed: int = 0) -> int:
    """Wrap the block linears (not embeddings/head) and freeze everything else.

    Returns the number of wrapped layers.
    """
    torch.manual_seed(seed)
    for p in model.parameters():
        p.requires_grad_(False)
    wrapped = 0
    for block in model.blocks:
        wrapped += _wrap_linears(block, rank, alpha)
    return wrapped


def lora_parameters(model: nn.Module):
    return [p for p in model.parameters() if p.requires_grad]


def lora_state_dict(model: nn.Module) -> dict:
    return {
        name: tensor
        for name, tensor in model.state_dict().items()
        if "lora_a" in name or "lora_b" in name
    }


def save_adapter(
    model: ByteLM,
    out_dir: str | Path,
    base_model_id: str,
    rank: int,
    alpha: float,
) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.save(lora_state_dict(model), out_dir / "adapter.pt")
    meta = {
        "base_model": base_model_id,
        "rank": rank,
        "alpha": alpha,
        "adapter_digest": _adapter_digest(model),
    }
    (out_dir / "adapter.json").write_text(json.dumps(meta, indent=2) + "\n")


def _adapter_digest(model: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, tensor in sorted(lora_state_dict(model).items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return "sha256:" + h.hexdigest()


def load_adapted_model(adapter_dir: str | Path, base_model_id: str | None = None):
    """Rebuild base model + adapters from an adapter directory.

    Returns (model, meta). base_model_id, when given, must match the id the
    adapter was trained against.
    """
    adapter_dir = Path(adapter_dir)
    meta = json.loads((adapter_dir / "adapter.json").read_text())
    if base_model_id is not None and base_model_id != meta["base_model"]:
        raise AdapterMismatch(
            f"adapter was trained on {meta['base_model']!r}, not {base_model_id!r}"
        )
    model = build_base_model(meta["base_model"])
    meta["base_digest"] = state_digest(model)
    apply_lora(model, rank=meta["rank"], alpha=meta["alpha"])
    state = torch.load(adapter_dir / "adapter.pt", weights_only=True)
    missing = [k for k in lora_state_dict(model) if k not in state]
    if missing:
        raise AdapterMismatch(f"adapter state missing keys, e.g. {missing[0]!r}")
    model.load_state_dict(state, strict=False)
    model.eval()
    if _adapter_digest(model) != meta["adapter_digest"]:
        raise AdapterMismatch("adapter digest does not match adapter.json")
    return model, meta
