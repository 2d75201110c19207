import json

import pytest

from projres.config import (DEFAULTS, ConfigError, apply_overrides, default_config_text, key_lines,
                            load, loads, parse_override)


def test_empty_config_is_defaults():
    cfg = loads("{}")
    assert cfg.federation.num_clients == 30 and cfg.federation.rounds == 50
    assert cfg.eval_rounds == (49,)
    assert [a["kind"] for a in cfg.attacks][0] == "projres"
    assert cfg.tau == 1e-2


def test_bundled_default_matches_builtin():
    assert loads(default_config_text()).config_hash == loads("{}").config_hash


def test_round_trip():
    cfg = loads('{"federation": {"rounds": 7}, "tau": 0.05}')
    again = loads(cfg.to_json())
    assert again.to_dict() == cfg.to_dict()
    assert again.config_hash == cfg.config_hash


def test_hash_ignores_output_location():
    a = loads('{"output_dir": "x"}')
    b = loads('{"output_dir": "y", "dump_traces": true}')
    c = loads('{"tau": 0.02}')
    assert a.config_hash == b.config_hash != c.config_hash


def test_override_precedence(tmp_path):
    f = tmp_path / "c.json"
    f.write_text('{"federation": {"rounds": 10, "seed": 3}}', encoding="utf-8")
    cfg = load(f, ["federation.rounds=4", "defenses=[{\"kind\": \"gp\", \"beta\": 0.5}]"])
    assert cfg.federation.rounds == 4 and cfg.federation.seed == 3
    assert cfg.defenses[0].kind == "gp" and cfg.defenses[0].beta == 0.5


def test_parse_override():
    assert parse_override("a.b=3") == (["a", "b"], 3)
    assert parse_override("a=hello") == (["a"], "hello")
    with pytest.raises(ConfigError):
        parse_override("novalue")


def test_override_into_list():
    data = apply_overrides({"modules": [{"kind": "adapter"}]}, ["modules.0.kind=lora"])
    assert data["modules"][0]["kind"] == "lora"
    with pytest.raises(ConfigError):
        apply_overrides({"modules": []}, ["modules.3.kind=lora"])


def test_key_lines():
    text = '{\n  "a": 1,\n  "b": {\n    "c": [1,\n      2]\n  }\n}'
    lines = key_lines(text)
    assert lines[("a",)] == 2 and lines[("b", "c")] == 4 and lines[("b", "c", 1)] == 5


@pytest.mark.parametrize("text,line,key", [
    ('{\n  "federation": {\n    "rounds": 0\n  }\n}', 3, "federation"),
    ('{\n  "tau": -1\n}', 2, "tau"),
    ('{\n  "federation": {\n    "batch_size": "four"\n  }\n}', 3, "federation.batch_size"),
    ('{\n  "bogus": 1\n}', 2, "bogus"),
    ('{\n  "attacks": [\n    "projres",\n    "nope"\n  ]\n}', 4, "attacks.1.kind"),
    ('{\n  "defenses": [\n    {"kind": "gp", "beta": 1.5}\n  ]\n}', 3, "defenses.0.beta"),
    ('{\n  "evaluation": {\n    "rounds": [99]\n  }\n}', 3, "evaluation.rounds.0"),
])
def test_errors_name_line_and_key(text, line, key):
    with pytest.raises(ConfigError) as info:
        loads(text, "exp.json")
    err = info.value
    assert err.line == line
    assert err.key.startswith(key)
    assert str(err).startswith(f"exp.json:{line}: {err.key}: ")


def test_invalid_json_reports_line():
    with pytest.raises(ConfigError) as info:
        loads('{\n  "tau": 0.1,\n}', "bad.json")
    assert info.value.line == 3


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load(tmp_path / "missing.json")


def test_text_file_dataset_needs_path():
    with pytest.raises(ConfigError):
        loads('{"dataset": {"kind": "text_file"}}')


def test_defaults_not_mutated():
    before = json.dumps(DEFAULTS, sort_keys=True)
    loads('{"federation": {"rounds": 3}, "attacks": ["fta"]}')
    assert json.dumps(DEFAULTS, sort_keys=True) == before
