"""Command-line entry point.

    lora-runner finetune --corpus corpus.jsonl --out adapters/run1 \
        --base-model tiny-lm-64 --epochs 3 --rank 16 --lr 2e-4
    lora-runner serve --adapter adapters/run1 --port 8750
    lora-runner eval-ppl --corpus corpus.jsonl --adapter adapters/run1
"""

from __future__ import annotations

import argparse
import sys

from .corpus import CorpusSchemaError, load_corpus
from .finetune import FinetuneConfig, corpus_perplexity, finetune
from .model import UnknownModel, build_base_model
from .server import PortInUse, launch_server


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lora-runner")
    sub = parser.add_subparsers(dest="command", required=True)

    p_ft = sub.add_parser("finetune", help="train LoRA adapters on a corpus")
    p_ft.add_argument("--corpus", required=True)
    p_ft.add_argument("--out", required=True)
    p_ft.add_argument("--base-model", default="tiny-lm-64")
    p_ft.add_argument("--epochs", type=int, default=3)
    p_ft.add_argument("--rank", type=int, default=16)
    p_ft.add_argument("--lr", type=float, default=2e-4)
    p_ft.add_argument("--batch-size", type=int, default=8)
    p_ft.add_argument("--seed", type=int, default=0)

    p_srv = sub.add_parser("serve", help="serve an adapter (or plain base model)")
    p_srv.add_argument("--adapter", default=None)
    p_srv.add_argument("--base-model", default=None)
    p_srv.add_argument("--host", default="127.0.0.1")
    p_srv.add_argument("--port", type=int, default=8750)

    p_ppl = sub.add_parser("eval-ppl", help="corpus perplexity of a model")
    p_ppl.add_argument("--corpus", required=True)
    p_ppl.add_argument("--adapter", default=None)
    p_ppl.add_argument("--base-model", default="tiny-lm-64")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "finetune":
            manifest = finetune(
                args.corpus,
                args.out,
                FinetuneConfig(
                    base_model=args.base_model,
                    rank=args.rank,
                    epochs=args.epochs,
                    learning_rate=args.lr,
                    batch_size=args.batch_size,
                    seed=args.seed,
                ),
            )
            print(
                f"perplexity {manifest.perplexity_before:.2f} -> "
                f"{manifest.perplexity_after:.2f}; adapter at {manifest.adapter_dir}"
            )
            return 0
        if args.command == "serve":
            if args.adapter is None and args.base_model is None:
                print("serve needs --adapter or --base-model", file=sys.stderr)
                return 2
            handle = launch_server(args.adapter, args.port, args.base_model, host=args.host)
            print(f"serving on {handle.url} (chat at {handle.url}/v1/chat/completions)")
            try:
                while True:
                    import time

                    time.sleep(3600)
            except KeyboardInterrupt:
                handle.stop()
            return 0
        if args.command == "eval-ppl":
            records = load_corpus(args.corpus)
            if args.adapter:
                from .lora import load_adapted_model

                model, _ = load_adapted_model(args.adapter)
            else:
                model = build_base_model(args.base_model)
            from .finetune import build_sample

            samples = [build_sample(r, model.spec.context) for r in records]
            print(f"perplexity: {corpus_perplexity(model, samples):.3f}")
            return 0
    except CorpusSchemaError as e:
        print(f"corpus error: {e}", file=sys.stderr)
        return 2
    except UnknownModel as e:
        print(f"model error: {e}", file=sys.stderr)
        return 2
    except PortInUse as e:
        print(f"{e}", file=sys.stderr)
        return 2
    return 1


if __name__ == "__main__":
    sys.exit(main())
