"""LoRA finetuning over instruction corpora with OpenAI-compatible serving."""

__version__ = "0.1.0"

from .corpus import CorpusSchemaError, load_corpus  # noqa: F401
from .finetune import FinetuneConfig, RunnerManifest, finetune  # noqa: F401
from .server import build_app, launch_server  # noqa: F401
