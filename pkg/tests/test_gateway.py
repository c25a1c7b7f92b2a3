import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lansagnn.errors import (
    AuthMissing,
    BackendError,
    CacheMiss,
    MissingBinding,
    NetworkExhausted,
    OracleNeedsLabels,
)
from lansagnn.gateway import (
    BackendConfig,
    ChatRequest,
    Gateway,
    cache_key,
    oracle_answer,
)
from lansagnn.graph import TextAttributedGraph
from lansagnn.templates import (
    PromptTemplate,
    clip_text,
    compose_prompt,
    load_templates,
    pair_input,
    render_prompt,
    tokenize,
)


def labeled_graph():
    return TextAttributedGraph(
        num_nodes=4,
        texts=("alpha beta gamma", "beta gamma delta", "zeta eta", "theta iota"),
        edges=((0, 1), (2, 3)),
        labels=(2, 2, 0, 1),
        class_names=("cs", "bio", "math"),
    )


class TestTemplates:
    def test_literal_substitution(self):
        t = PromptTemplate("I_KB", "A: {text_a}")
        assert render_prompt(t, {"text_a": "x"}) == "A: x"

    def test_missing_binding(self):
        t = PromptTemplate("I_KB", "A: {text_a} B: {text_b}")
        with pytest.raises(MissingBinding) as exc:
            render_prompt(t, {"text_a": "x"})
        assert exc.value.name == "text_b"

    def test_repeated_placeholder(self):
        t = PromptTemplate("I_KB", "{text_a} and {text_a}")
        assert render_prompt(t, {"text_a": "q"}) == "q and q"

    def test_value_with_braces_not_rescanned(self):
        t = PromptTemplate("I_KB", "A: {text_a}")
        assert render_prompt(t, {"text_a": "{text_b}"}) == "A: {text_b}"

    def test_default_templates_load(self):
        ts = load_templates()
        assert ts.ep.template_id == "I_EP"
        assert ts.kb.placeholders() == {"text_a", "text_b", "label_name"}
        assert ts.extract.placeholders() == {"class_list"}
        assert ts.self_enhance.placeholders() == set()
        assert len(set(ts.hashes().values())) == 4

    def test_override_dir(self, tmp_path):
        (tmp_path / "i_ep.txt").write_text("custom body")
        ts = load_templates(tmp_path)
        assert ts.ep.body == "custom body"
        assert ts.kb.body == load_templates().kb.body

    def test_pair_input_layout(self):
        assert pair_input("x", "y") == "NODE A: x\nNODE B: y"
        assert compose_prompt("do it", "NODE A: x") == "do it\n\nNODE A: x"

    def test_clip_text(self):
        assert clip_text("short", 100) == "short"
        assert clip_text("aaa bbb ccc", 7) == "aaa bbb"
        assert clip_text("abcdefgh", 4) == "abcd"


class TestOracles:
    def test_ep_equal_labels(self):
        assert oracle_answer("oracle_ep", {}, labels=(2, 2)) == "True"

    def test_ep_different_labels(self):
        assert oracle_answer("oracle_ep", {}, labels=(0, 1)) == "False"

    def test_extract_shared_evidence(self):
        out = oracle_answer(
            "oracle_extract",
            {"text_a": "alpha beta gamma", "text_b": "beta gamma delta"},
            label_name="cs",
        )
        assert out == "This node belongs to category cs. Shared evidence: beta, gamma."

    def test_extract_no_overlap(self):
        out = oracle_answer(
            "oracle_extract",
            {"text_a": "alpha", "text_b": "delta"},
            label_name="bio",
        )
        assert out.endswith("Shared evidence: NONE.")

    def test_extract_caps_at_three_tokens(self):
        out = oracle_answer(
            "oracle_extract",
            {"text_a": "e d c b a", "text_b": "a b c d e"},
            label_name="x",
        )
        assert "Shared evidence: a, b, c." in out

    def test_needs_labels(self):
        with pytest.raises(OracleNeedsLabels):
            oracle_answer("oracle_ep", {})

    def test_tokenize_splits_non_alnum(self):
        assert tokenize("Alpha-beta_GAMMA 42x") == ["alpha", "beta", "gamma", "42x"]


def req(prompt="hello", **kw):
    return ChatRequest(rendered_prompt=prompt, **kw)


class TestCacheAndBackends:
    def test_fixed_text_then_cached(self, tmp_path):
        gw = Gateway(BackendConfig(kind="fixed_text", fixed_text="OK", cache_dir=str(tmp_path)))
        r1 = gw.complete(req())
        r2 = gw.complete(req())
        assert (r1.text, r1.from_cache) == ("OK", False)
        assert (r2.text, r2.from_cache) == ("OK", True)
        assert gw.stats.dispatches == 1

    def test_memory_cache_when_no_dir(self):
        gw = Gateway(BackendConfig(kind="fixed_text"))
        assert gw.complete(req()).from_cache is False
        assert gw.complete(req()).from_cache is True

    def test_replay_empty_cache(self, tmp_path):
        gw = Gateway(BackendConfig(kind="replay", cache_dir=str(tmp_path)))
        with pytest.raises(CacheMiss):
            gw.complete(req())

    def test_replay_never_touches_network(self, tmp_path, monkeypatch):
        import requests as requests_mod

        def boom(*a, **kw):
            raise AssertionError("network touched")

        monkeypatch.setattr(requests_mod, "post", boom)
        cfg = BackendConfig(
            kind="replay", cache_dir=str(tmp_path), replay_source_kind="fixed_text"
        )
        warm = Gateway(BackendConfig(kind="fixed_text", cache_dir=str(tmp_path)))
        warm.complete(req())
        gw = Gateway(cfg)
        # replay must serve only from cache, hence zero network operations
        assert gw.complete(req()).text == "OK"
        with pytest.raises(CacheMiss):
            gw.complete(req("other prompt"))

    def test_cache_layout(self, tmp_path):
        gw = Gateway(BackendConfig(kind="fixed_text", cache_dir=str(tmp_path)))
        gw.complete(req())
        digest = cache_key("fixed_text", req())
        assert (tmp_path / digest[:2] / f"{digest}.txt").read_text() == "OK"
        assert (tmp_path / "index.jsonl").exists()

    def test_cache_shared_between_backend_instances(self, tmp_path):
        cfg = BackendConfig(kind="fixed_text", cache_dir=str(tmp_path))
        Gateway(cfg).complete(req())
        gw2 = Gateway(cfg)
        assert gw2.complete(req()).from_cache is True
        assert gw2.stats.dispatches == 0

    def test_oracle_backend_uses_graph(self):
        g = labeled_graph()
        gw = Gateway(BackendConfig(kind="oracle_ep"), oracle_graph=g)
        assert gw.complete(req(node_pair=(0, 1))).text == "True"
        assert gw.complete(req("p2", node_pair=(2, 3))).text == "False"

    def test_oracle_extract_backend(self):
        g = labeled_graph()
        gw = Gateway(BackendConfig(kind="oracle_extract"), oracle_graph=g)
        out = gw.complete(req(node_pair=(0, 1))).text
        assert "category math" in out
        assert "beta, gamma" in out

    def test_oracle_without_pair(self):
        gw = Gateway(BackendConfig(kind="oracle_ep"), oracle_graph=labeled_graph())
        with pytest.raises(OracleNeedsLabels):
            gw.complete(req())

    def test_cache_key_components(self):
        base = cache_key("fixed_text", req())
        assert cache_key("replay", req()) != base
        assert cache_key("fixed_text", req(model="m2")) != base
        assert cache_key("fixed_text", req(max_tokens=9)) != base
        assert cache_key("fixed_text", req(temperature=0.5)) != base
        assert cache_key("fixed_text", req(template_hash="aa")) != base
        assert cache_key("fixed_text", req("hello!")) != base
        # oracle context fields are not part of the key
        assert cache_key("fixed_text", req(node_pair=(1, 2))) == base

    @settings(max_examples=60, deadline=None)
    @given(
        field=st.sampled_from(["model", "prompt", "temperature", "max_tokens", "template"]),
        salt=st.integers(1, 10**6),
    )
    def test_cache_key_sensitivity(self, field, salt):
        a = req("prompt body", model="m", max_tokens=64, template_hash="h")
        kwargs = dict(rendered_prompt="prompt body", model="m", max_tokens=64, template_hash="h")
        if field == "model":
            kwargs["model"] = f"m{salt}"
        elif field == "prompt":
            kwargs["rendered_prompt"] = f"prompt body {salt}"
        elif field == "temperature":
            kwargs["temperature"] = salt / 10**6
        elif field == "max_tokens":
            kwargs["max_tokens"] = 64 + salt
        else:
            kwargs["template_hash"] = f"h{salt}"
        b = ChatRequest(**kwargs)
        assert cache_key("fixed_text", a) != cache_key("fixed_text", b)


def http_cfg(tmp_path, **kw):
    defaults = dict(
        kind="http_openai_compatible",
        base_url="http://example.invalid/v1",
        cache_dir=str(tmp_path),
        retry_base_s=0.001,
        max_retries=3,
    )
    defaults.update(kw)
    return BackendConfig(**defaults)


def ok_body(content="pong"):
    import json

    return 200, json.dumps(
        {"choices": [{"message": {"role": "assistant", "content": content}}]}
    )


class TestHttpBackend:
    def test_auth_missing(self, tmp_path, monkeypatch):
        monkeypatch.delenv("LANSAGNN_API_KEY", raising=False)
        with pytest.raises(AuthMissing):
            Gateway(http_cfg(tmp_path))

    def test_success_and_cached_second_call(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LANSAGNN_API_KEY", "k")
        calls = []

        def transport(url, headers, body):
            calls.append(body)
            return ok_body()

        gw = Gateway(http_cfg(tmp_path), transport=transport)
        r1 = gw.complete(req())
        r2 = gw.complete(req())
        assert r1.text == "pong" and not r1.from_cache
        assert r2.text == "pong" and r2.from_cache
        assert len(calls) == 1
        assert gw.stats.network_requests == 1
        assert calls[0]["messages"] == [{"role": "user", "content": "hello"}]

    def test_retry_on_500_then_success(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LANSAGNN_API_KEY", "k")
        state = {"n": 0}

        def transport(url, headers, body):
            state["n"] += 1
            if state["n"] < 3:
                return 500, "boom"
            return ok_body()

        gw = Gateway(http_cfg(tmp_path), transport=transport)
        assert gw.complete(req()).text == "pong"
        assert state["n"] == 3

    def test_429_retried(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LANSAGNN_API_KEY", "k")
        state = {"n": 0}

        def transport(url, headers, body):
            state["n"] += 1
            return (429, "slow down") if state["n"] == 1 else ok_body()

        gw = Gateway(http_cfg(tmp_path), transport=transport)
        assert gw.complete(req()).text == "pong"

    def test_4xx_not_retried(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LANSAGNN_API_KEY", "k")
        state = {"n": 0}

        def transport(url, headers, body):
            state["n"] += 1
            return 400, "bad request"

        gw = Gateway(http_cfg(tmp_path), transport=transport)
        with pytest.raises(BackendError):
            gw.complete(req())
        assert state["n"] == 1

    def test_network_exhausted(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LANSAGNN_API_KEY", "k")

        def transport(url, headers, body):
            return 503, "down"

        gw = Gateway(http_cfg(tmp_path), transport=transport)
        with pytest.raises(NetworkExhausted):
            gw.complete(req())
        assert gw.stats.network_requests == 3

    def test_bounded_concurrency(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LANSAGNN_API_KEY", "k")
        lock = threading.Lock()
        state = {"inflight": 0, "peak": 0}

        def transport(url, headers, body):
            with lock:
                state["inflight"] += 1
                state["peak"] = max(state["peak"], state["inflight"])
            time.sleep(0.01)
            with lock:
                state["inflight"] -= 1
            return ok_body(body["messages"][0]["content"])

        gw = Gateway(http_cfg(tmp_path, max_inflight=3), transport=transport)
        reqs = [req(f"prompt {i}") for i in range(12)]
        out = gw.complete_many(reqs)
        assert [r.text for r in out] == [f"prompt {i}" for i in range(12)]
        assert state["peak"] <= 3
        assert state["peak"] >= 2  # parallelism actually happened
