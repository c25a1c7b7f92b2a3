import json

import pytest

from lora_runner.finetune import FinetuneConfig, finetune


def write_toy_corpus(path, records=50):
    with path.open("w", encoding="utf-8") as f:
        f.write('# {"provenance": "toy"}\n')
        for i in range(records):
            name = "alpha" if i % 2 else "beta"
            rec = {
                "instruction": (
                    "Decide which category NODE A belongs to, "
                    "choosing from: alpha, beta."
                ),
                "input": (
                    f"NODE A: sample text number {i} with topic {name}\n"
                    f"NODE B: neighbor text {i}"
                ),
                "output": f"This node belongs to category {name}.",
                "meta": {"i": i, "j": i + 1},
            }
            f.write(json.dumps(rec) + "\n")
    return path


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    return write_toy_corpus(tmp_path_factory.mktemp("corpus") / "toy.jsonl")


@pytest.fixture(scope="session")
def trained_adapter(tmp_path_factory, toy_corpus):
    out = tmp_path_factory.mktemp("adapter") / "run1"
    manifest = finetune(toy_corpus, out, FinetuneConfig(epochs=3, seed=1))
    return out, manifest
