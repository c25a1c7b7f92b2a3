"""Declarative run configuration: TOML file, --key=value overrides (flags
win), and a semantic fingerprint that ignores formatting and deployment
details (URLs, concurrency limits, cache locations).
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigInvalid
from .gateway import BackendConfig
from .gnn import TrainConfig
from .graph import INF
from .templates import TemplateSet, load_templates

SELF_LOOP_MODES = ("off", "fallback_only", "full")
OEF_SCOPES = ("both", "extract_only")


def _default_filler_vocab(count: int = 150, d: int = 256) -> list[str]:
    """Filler words whose hash buckets avoid the default class-name tokens.

    The synthetic corpus is a test substrate; letting its noise words share
    a hashing bucket with 'class0'... would silently corrupt the oracle
    signal the offline tests rely on.
    """
    from .embed import fnv1a64

    reserved = {fnv1a64(f"class{c}") % d for c in range(10)}
    vocab = []
    i = 0
    while len(vocab) < count:
        word = f"filler{i:03d}"
        if fnv1a64(word) % d not in reserved:
            vocab.append(word)
        i += 1
    return vocab


DEFAULT_FILLER_VOCAB = _default_filler_vocab()
# three of four keywords are shared across the two classes, so origin text
# alone identifies the class for only a quarter of the nodes; extracted
# messages (not raw text) have to carry the label signal
DEFAULT_KEYWORDS = [
    ["quantum", "laser", "plasma", "vortex"],
    ["genome", "laser", "plasma", "vortex"],
]


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"  # "file" | "synthetic"
    path: str = ""
    format: str = "jsonl"
    class_names: tuple[str, ...] | None = None
    # synthetic generator knobs
    num_classes: int = 2
    nodes_per_class: int = 100
    p_in: float = 0.05
    p_out: float = 0.01
    words_per_node: int = 30
    seed: int = 13
    keywords: tuple[tuple[str, ...], ...] = tuple(tuple(k) for k in DEFAULT_KEYWORDS)
    filler_vocab: tuple[str, ...] = tuple(DEFAULT_FILLER_VOCAB)

    def fingerprint_fields(self) -> dict:
        if self.kind == "file":
            return {"kind": "file", "path": self.path, "format": self.format}
        return {
            "kind": "synthetic",
            "num_classes": self.num_classes,
            "nodes_per_class": self.nodes_per_class,
            "p_in": self.p_in,
            "p_out": self.p_out,
            "words_per_node": self.words_per_node,
            "seed": self.seed,
            "keywords": [list(k) for k in self.keywords],
            "filler_vocab": list(self.filler_vocab),
        }


@dataclass(frozen=True)
class EmbedConfig:
    backend: str = "hashing"  # "hashing" | "service"
    d: int = 256
    service: BackendConfig | None = None

    def fingerprint_fields(self) -> dict:
        if self.backend == "hashing":
            return {"backend": "hashing", "d": self.d}
        return {"backend": "service", "model": self.service.model if self.service else ""}


@dataclass(frozen=True)
class AblationFlags:
    no_finetune: bool = False
    no_es: bool = False
    no_origin_text: bool = False


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig = DatasetConfig()
    k: float = INF
    oef: bool = False
    oef_scope: str = "both"
    oef_symmetric: bool = False
    self_loop_mode: str = "fallback_only"
    kb_backend: BackendConfig = BackendConfig(kind="oracle_extract")
    extract_backend: BackendConfig = BackendConfig(kind="oracle_extract")
    ep_backend: BackendConfig = BackendConfig(kind="oracle_ep")
    embed: EmbedConfig = EmbedConfig()
    v_s_count: int | None = None  # default min(|train|, 500)
    n_ep_pairs: int | None = None  # required when oef is on
    text_budget: int = 2000
    train: TrainConfig = TrainConfig()
    runs: int = 10
    base_seed: int = 0
    ablations: AblationFlags = AblationFlags()
    templates_dir: str | None = None
    label: str = "run"

    def validate(self) -> None:
        if self.dataset.kind not in ("file", "synthetic"):
            raise ConfigInvalid("dataset.kind", f"got {self.dataset.kind!r}")
        if self.dataset.kind == "file":
            if not self.dataset.path:
                raise ConfigInvalid("dataset.path", "required for file datasets")
            if not Path(self.dataset.path).exists():
                raise ConfigInvalid("dataset.path", f"{self.dataset.path} does not exist")
        if self.k != INF and (self.k < 1 or int(self.k) != self.k):
            raise ConfigInvalid("k", "must be a positive integer or 'inf'")
        if self.oef_scope not in OEF_SCOPES:
            raise ConfigInvalid("oef_scope", f"must be one of {OEF_SCOPES}")
        if self.self_loop_mode not in SELF_LOOP_MODES:
            raise ConfigInvalid("self_loop_mode", f"must be one of {SELF_LOOP_MODES}")
        if self.oef and self.n_ep_pairs is None:
            raise ConfigInvalid("n_ep_pairs", "required when oef is enabled")
        if self.embed.backend not in ("hashing", "service"):
            raise ConfigInvalid("embed.backend", "must be 'hashing' or 'service'")
        if self.embed.backend == "service" and self.embed.service is None:
            raise ConfigInvalid("backends.embed", "service embedding needs backend fields")
        if self.runs < 1:
            raise ConfigInvalid("runs", "must be >= 1")
        if self.templates_dir and not Path(self.templates_dir).is_dir():
            raise ConfigInvalid("templates.dir", f"{self.templates_dir} is not a directory")

    def load_template_set(self) -> TemplateSet:
        return load_templates(self.templates_dir)

    def semantic_dict(self) -> dict:
        """Everything that can change pipeline outputs, nothing else."""

        def backend_fields(b: BackendConfig) -> dict:
            return {
                "kind": b.kind,
                "model": b.model,
                "temperature": b.temperature,
                "max_tokens": b.max_tokens,
                "fixed_text": b.fixed_text,
                "replay_source_kind": b.replay_source_kind,
            }

        return {
            "dataset": self.dataset.fingerprint_fields(),
            "k": "inf" if self.k == INF else int(self.k),
            "oef": self.oef,
            "oef_scope": self.oef_scope,
            "oef_symmetric": self.oef_symmetric,
            "self_loop_mode": self.self_loop_mode,
            "backends": {
                "kb": backend_fields(self.kb_backend),
                "extract": backend_fields(self.extract_backend),
                "ep": backend_fields(self.ep_backend),
                "embed": self.embed.fingerprint_fields(),
            },
            "v_s_count": self.v_s_count,
            "n_ep_pairs": self.n_ep_pairs,
            "text_budget": self.text_budget,
            "train": {
                "learning_rate": self.train.learning_rate,
                "weight_decay": self.train.weight_decay,
                "dropout": self.train.dropout,
                "max_epochs": self.train.max_epochs,
                "patience": self.train.patience,
                "hidden": self.train.hidden,
            },
            "runs": self.runs,
            "base_seed": self.base_seed,
            "ablations": {
                "no_finetune": self.ablations.no_finetune,
                "no_es": self.ablations.no_es,
                "no_origin_text": self.ablations.no_origin_text,
            },
            "template_hashes": self.load_template_set().hashes(),
            "class_names": list(self.dataset.class_names) if self.dataset.class_names else None,
        }

    def fingerprint(self) -> str:
        canonical = json.dumps(
            self.semantic_dict(), sort_keys=True, ensure_ascii=True, separators=(",", ":")
        )
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# TOML loading and overrides


def _backend_from_table(table: Mapping[str, Any], field_name: str) -> BackendConfig:
    allowed = set(BackendConfig.__dataclass_fields__)
    unknown = set(table) - allowed
    if unknown:
        raise ConfigInvalid(field_name, f"unknown backend fields {sorted(unknown)}")
    try:
        return BackendConfig(**table)
    except TypeError as e:
        raise ConfigInvalid(field_name, str(e)) from e


def _parse_k(value: Any) -> float:
    if isinstance(value, str):
        if value.lower() in ("inf", "infinity"):
            return INF
        raise ConfigInvalid("k", f"unrecognized value {value!r}")
    return float(value)


def config_from_dict(raw: Mapping[str, Any]) -> RunConfig:
    raw = dict(raw)
    known_sections = {"dataset", "pipeline", "ablations", "backends", "train", "templates"}
    unknown = set(raw) - known_sections
    if unknown:
        raise ConfigInvalid(sorted(unknown)[0], "unknown config section")

    ds_raw = dict(raw.get("dataset", {}))
    if "keywords" in ds_raw:
        ds_raw["keywords"] = tuple(tuple(k) for k in ds_raw["keywords"])
    if "filler_vocab" in ds_raw:
        ds_raw["filler_vocab"] = tuple(ds_raw["filler_vocab"])
    if "class_names" in ds_raw and ds_raw["class_names"] is not None:
        ds_raw["class_names"] = tuple(ds_raw["class_names"])
    try:
        dataset = DatasetConfig(**ds_raw)
    except TypeError as e:
        raise ConfigInvalid("dataset", str(e)) from e

    pipe = dict(raw.get("pipeline", {}))
    backends = dict(raw.get("backends", {}))
    kb = _backend_from_table(backends.get("kb", {"kind": "oracle_extract"}), "backends.kb")
    extract = _backend_from_table(
        backends.get("extract", {"kind": "oracle_extract"}), "backends.extract"
    )
    ep = _backend_from_table(backends.get("ep", {"kind": "oracle_ep"}), "backends.ep")

    embed_raw = dict(backends.get("embed", {}))
    embed_backend_name = embed_raw.pop("backend", "hashing")
    embed_d = int(embed_raw.pop("d", 256))
    embed_service = None
    if embed_backend_name == "service":
        embed_service = _backend_from_table(embed_raw, "backends.embed")
    elif embed_raw:
        raise ConfigInvalid("backends.embed", f"unknown hashing fields {sorted(embed_raw)}")
    embed = EmbedConfig(backend=embed_backend_name, d=embed_d, service=embed_service)

    try:
        train_cfg = TrainConfig(**raw.get("train", {}))
    except TypeError as e:
        raise ConfigInvalid("train", str(e)) from e

    abl = raw.get("ablations", {})
    ablations = AblationFlags(
        no_finetune=bool(abl.get("no_finetune", False)),
        no_es=bool(abl.get("no_es", False)),
        no_origin_text=bool(abl.get("no_origin_text", False)),
    )

    templates_dir = raw.get("templates", {}).get("dir")

    allowed_pipe = {
        "k", "oef", "oef_scope", "oef_symmetric", "self_loop_mode",
        "v_s_count", "n_ep_pairs", "text_budget", "runs", "base_seed", "label",
    }
    unknown_pipe = set(pipe) - allowed_pipe
    if unknown_pipe:
        raise ConfigInvalid(f"pipeline.{sorted(unknown_pipe)[0]}", "unknown field")

    cfg = RunConfig(
        dataset=dataset,
        k=_parse_k(pipe.get("k", "inf")),
        oef=bool(pipe.get("oef", False)),
        oef_scope=pipe.get("oef_scope", "both"),
        oef_symmetric=bool(pipe.get("oef_symmetric", False)),
        self_loop_mode=pipe.get("self_loop_mode", "fallback_only"),
        kb_backend=kb,
        extract_backend=extract,
        ep_backend=ep,
        embed=embed,
        v_s_count=pipe.get("v_s_count"),
        n_ep_pairs=pipe.get("n_ep_pairs"),
        text_budget=int(pipe.get("text_budget", 2000)),
        train=train_cfg,
        runs=int(pipe.get("runs", 10)),
        base_seed=int(pipe.get("base_seed", 0)),
        ablations=ablations,
        templates_dir=templates_dir,
        label=str(pipe.get("label", "run")),
    )
    cfg.validate()
    return cfg


def _parse_override_value(raw: str) -> Any:
    """Parse the right side of --key=value as a TOML literal, else a string."""
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def apply_overrides(raw: dict, overrides: Mapping[str, str]) -> dict:
    """Set dotted-path keys into the raw config dict; flags win over file."""
    out = json.loads(json.dumps(raw))  # deep copy of plain data
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigInvalid(dotted, "path crosses a non-table value")
        node[parts[-1]] = _parse_override_value(value)
    return out


def load_config(
    path: str | Path | None, overrides: Mapping[str, str] | None = None
) -> RunConfig:
    raw: dict = {}
    if path is not None:
        with Path(path).open("rb") as f:
            raw = tomllib.load(f)
    if overrides:
        raw = apply_overrides(raw, overrides)
    return config_from_dict(raw)


def with_updates(cfg: RunConfig, **kw) -> RunConfig:
    out = replace(cfg, **kw)
    out.validate()
    return out
