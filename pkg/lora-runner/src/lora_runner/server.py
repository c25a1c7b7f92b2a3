"""OpenAI-compatible serving of an adapted (or plain base) model.

POST /v1/chat/completions takes the standard {model, messages, temperature,
max_tokens} body; temperature 0 decodes greedily, so identical requests give
identical text. GET /health reports the base-model and adapter digests.
"""

from __future__ import annotations

import socket
import threading
import time
import uuid
from pathlib import Path

import torch
from fastapi import FastAPI, HTTPException

from .lora import load_adapted_model
from .model import BOS, EOS, SEP, build_base_model, encode, decode, state_digest


class PortInUse(Exception):
    pass


@torch.no_grad()
def generate(model, prompt: str, max_tokens: int, temperature: float, seed: int = 0) -> str:
    context = model.spec.context
    prompt_tokens = encode(prompt)
    # leave room for the reply; drop prompt bytes from the left if needed
    keep = context - max_tokens - 2
    if keep < 1:
        keep = context // 2
    tokens = [BOS] + prompt_tokens[-keep:] + [SEP]
    generator = torch.Generator().manual_seed(seed)
    out: list[int] = []
    for _ in range(max_tokens):
        window = tokens[-context:]
        logits = model(torch.tensor([window], dtype=torch.long))[0, -1]
        if temperature <= 0.0:
            nxt = int(torch.argmax(logits))
        else:
            probs = torch.softmax(logits / temperature, dim=-1)
            nxt = int(torch.multinomial(probs, 1, generator=generator))
        if nxt == EOS:
            break
        tokens.append(nxt)
        out.append(nxt)
    return decode(out)


def build_app(adapter_dir: str | Path | None, base_model: str | None = None) -> FastAPI:
    """App over an adapter directory, or over a plain base model when
    adapter_dir is None (then base_model is required)."""
    if adapter_dir is not None:
        model, meta = load_adapted_model(adapter_dir, base_model)
        served_id = meta["base_model"] + "+lora"
        digests = {
            "base_model": meta["base_model"],
            "model_digest": meta["base_digest"],
            "adapter_digest": meta["adapter_digest"],
        }
    else:
        if base_model is None:
            raise ValueError("need adapter_dir or base_model")
        model = build_base_model(base_model)
        served_id = base_model
        digests = {
            "base_model": base_model,
            "model_digest": state_digest(model),
            "adapter_digest": None,
        }

    app = FastAPI()
    lock = threading.Lock()  # model forward is not reentrant-safe

    @app.get("/health")
    def health():
        return {"status": "ok", "served_model": served_id, **digests}

    @app.post("/v1/chat/completions")
    def chat_completions(body: dict):
        messages = body.get("messages")
        if not isinstance(messages, list) or not messages:
            raise HTTPException(status_code=400, detail="messages must be a non-empty list")
        parts = []
        for m in messages:
            content = m.get("content")
            if not isinstance(content, str):
                raise HTTPException(status_code=400, detail="message content must be a string")
            parts.append(content)
        prompt = "\n\n".join(parts)
        max_tokens = int(body.get("max_tokens", 64))
        temperature = float(body.get("temperature", 0.0))
        with lock:
            text = generate(model, prompt, max_tokens=max_tokens, temperature=temperature)
        return {
            "id": f"chatcmpl-{uuid.uuid4().hex[:12]}",
            "object": "chat.completion",
            "model": body.get("model", served_id),
            "choices": [
                {
                    "index": 0,
                    "message": {"role": "assistant", "content": text},
                    "finish_reason": "stop",
                }
            ],
            "usage": {
                "prompt_tokens": len(encode(prompt)),
                "completion_tokens": len(encode(text)),
            },
        }

    return app


class ServerHandle:
    def __init__(self, server, thread, url):
        self._server = server
        self._thread = thread
        self.url = url  # base url ending in /v1 for the chat route's parent

    def stop(self):
        self._server.should_exit = True
        self._thread.join(timeout=10)


def launch_server(
    adapter_dir: str | Path | None,
    port: int,
    base_model: str | None = None,
    host: str = "127.0.0.1",
    wait_s: float = 15.0,
) -> ServerHandle:
    """Start uvicorn in a thread and block until /health answers."""
    import requests
    import uvicorn

    probe = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        probe.bind((host, port))
    except OSError as e:
        raise PortInUse(f"port {port} on {host} is unavailable: {e}") from e
    finally:
        probe.close()

    app = build_app(adapter_dir, base_model)
    config = uvicorn.Config(app, host=host, port=port, log_level="warning")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()

    url = f"http://{host}:{port}"
    deadline = time.monotonic() + wait_s
    while time.monotonic() < deadline:
        try:
            if requests.get(f"{url}/health", timeout=1).status_code == 200:
                break
        except requests.RequestException:
            pass
        time.sleep(0.05)
    else:
        server.should_exit = True
        raise RuntimeError("server did not become healthy in time")

    # the endpoint is healthy; only now may a manifest reference it
    if adapter_dir is not None:
        manifest_path = Path(adapter_dir) / "manifest.json"
        if manifest_path.exists():
            from .finetune import RunnerManifest

            manifest = RunnerManifest.load(manifest_path)
            manifest.endpoint_url = f"{url}/v1"
            manifest.save(manifest_path)

    return ServerHandle(server, thread, url)
