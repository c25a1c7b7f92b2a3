"""Instruction-corpus JSONL loading and validation.

The consumed schema is one {"instruction", "input", "output", "meta"} object
per line; lines starting with '#' are provenance headers and are skipped.
Consumption is strictly read-only.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path


class CorpusSchemaError(Exception):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


@dataclass(frozen=True)
class CorpusRecord:
    instruction: str
    input: str
    output: str
    meta: dict


def corpus_digest(path: str | Path) -> str:
    return "sha256:" + hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_corpus(path: str | Path) -> list[CorpusRecord]:
    records = []
    with Path(path).open("r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusSchemaError(line_no, f"invalid JSON: {e.msg}") from e
            if not isinstance(obj, dict):
                raise CorpusSchemaError(line_no, "record is not an object")
            for key in ("instruction", "input", "output"):
                if key not in obj:
                    raise CorpusSchemaError(line_no, f"record missing {key!r}")
                if not isinstance(obj[key], str):
                    raise CorpusSchemaError(line_no, f"{key!r} must be a string")
            records.append(
                CorpusRecord(
                    instruction=obj["instruction"],
                    input=obj["input"],
                    output=obj["output"],
                    meta=obj.get("meta", {}),
                )
            )
    if not records:
        raise CorpusSchemaError(0, "corpus has no records")
    return records
