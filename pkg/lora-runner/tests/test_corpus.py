import pytest

from lora_runner.corpus import CorpusSchemaError, corpus_digest, load_corpus


def test_loads_records_and_skips_header(toy_corpus):
    records = load_corpus(toy_corpus)
    assert len(records) == 50
    assert records[0].instruction.startswith("Decide which category")
    assert records[0].meta == {"i": 0, "j": 1}


def test_consumption_is_read_only(toy_corpus):
    before = corpus_digest(toy_corpus)
    load_corpus(toy_corpus)
    assert corpus_digest(toy_corpus) == before


def test_missing_output_names_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text(
        '{"instruction": "a", "input": "b", "output": "c"}\n'
        '{"instruction": "a", "input": "b"}\n'
    )
    with pytest.raises(CorpusSchemaError) as exc:
        load_corpus(p)
    assert exc.value.line_no == 2
    assert "output" in str(exc.value)


def test_invalid_json_names_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"instruction": "a", "input": "b", "output": "c"}\nnot json\n')
    with pytest.raises(CorpusSchemaError) as exc:
        load_corpus(p)
    assert exc.value.line_no == 2


def test_empty_corpus_rejected(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("# header only\n")
    with pytest.raises(CorpusSchemaError):
        load_corpus(p)


def test_non_string_field_rejected(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"instruction": "a", "input": "b", "output": 3}\n')
    with pytest.raises(CorpusSchemaError):
        load_corpus(p)
