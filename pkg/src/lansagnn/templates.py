"""Prompt templates and rendering.

Template bodies ship as editable text files (see the templates/ data dir)
and may use the named placeholders {text_a}, {text_b}, {label_name},
{class_list}. Rendering is literal single-pass substitution: placeholder
values are never re-scanned, so node texts containing braces are safe.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping

from .errors import MissingBinding

TEMPLATE_IDS = ("I_EP", "I_KB", "I_E", "I_SELF")
# alphanumeric runs, underscore excluded; shared by the deterministic
# extraction oracle and the hashing embedder so their token views agree
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)
_FILE_FOR_ID = {
    "I_EP": "i_ep.txt",
    "I_KB": "i_kb.txt",
    "I_E": "i_e.txt",
    "I_SELF": "i_self.txt",
}
_PLACEHOLDER_RE = re.compile(r"\{([a-z_]+)\}")


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str

    @property
    def body_hash(self) -> str:
        return hashlib.sha256(self.body.encode("utf-8")).hexdigest()

    def placeholders(self) -> set[str]:
        return set(_PLACEHOLDER_RE.findall(self.body))


def render_prompt(template: PromptTemplate, bindings: Mapping[str, str]) -> str:
    """Substitute every placeholder; raise MissingBinding on any gap."""

    def _sub(m: re.Match) -> str:
        name = m.group(1)
        if name not in bindings:
            raise MissingBinding(name)
        return bindings[name]

    return _PLACEHOLDER_RE.sub(_sub, template.body)


def pair_input(text_a: str, text_b: str) -> str:
    """Fixed two-node layout; the node under classification is always NODE A."""
    return f"NODE A: {text_a}\nNODE B: {text_b}"


def self_input(text_a: str) -> str:
    return f"NODE A: {text_a}"


def compose_prompt(instruction: str, input_text: str) -> str:
    """Join an instruction with its input the same way finetuning tools do."""
    return f"{instruction}\n\n{input_text}"


def tokenize(text: str) -> list[str]:
    """Case-folded alphanumeric tokens (split on everything else)."""
    return [t.casefold() for t in _TOKEN_RE.findall(text)]


def clip_text(text: str, budget: int) -> str:
    """Clip to a character budget at a whitespace boundary when possible."""
    if budget <= 0 or len(text) <= budget:
        return text
    cut = text.rfind(" ", 0, budget + 1)
    if cut <= 0:
        return text[:budget]
    return text[:cut]


def load_template(template_id: str, path: str | Path | None = None) -> PromptTemplate:
    """Load one template, from an override file or the packaged default."""
    if template_id not in TEMPLATE_IDS:
        raise KeyError(f"unknown template id {template_id!r}")
    if path is not None:
        body = Path(path).read_text(encoding="utf-8")
    else:
        ref = resources.files("lansagnn") / "templates" / _FILE_FOR_ID[template_id]
        body = ref.read_text(encoding="utf-8")
    return PromptTemplate(template_id, body.rstrip("\n"))


@dataclass(frozen=True)
class TemplateSet:
    ep: PromptTemplate
    kb: PromptTemplate
    extract: PromptTemplate
    self_enhance: PromptTemplate

    def hashes(self) -> dict[str, str]:
        return {
            t.template_id: t.body_hash
            for t in (self.ep, self.kb, self.extract, self.self_enhance)
        }


def load_templates(override_dir: str | Path | None = None) -> TemplateSet:
    """Load all four templates; files in override_dir shadow the defaults."""

    def pick(template_id: str) -> PromptTemplate:
        if override_dir is not None:
            candidate = Path(override_dir) / _FILE_FOR_ID[template_id]
            if candidate.exists():
                return load_template(template_id, candidate)
        return load_template(template_id)

    return TemplateSet(
        ep=pick("I_EP"),
        kb=pick("I_KB"),
        extract=pick("I_E"),
        self_enhance=pick("I_SELF"),
    )
