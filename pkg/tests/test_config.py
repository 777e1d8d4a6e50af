import json
from dataclasses import fields

import pytest

from interagent.config import (Config, body_to_dict, config_from_text, load_body, load_config, make_config)
from interagent.errors import ConfigError
from interagent.simworld import desk_body


def test_every_field_documented():
    for f in fields(Config):
        assert f.metadata.get("doc"), f.name


def test_paper_defaults():
    c = Config()
    assert (c.lr, c.beta1, c.beta2, c.weight_decay) == (1e-4, 0.9, 0.999, 2e-5)
    assert (c.warmup, c.steps, c.batch_size) == (5000, 80000, 256)
    assert (c.guidance, c.cfg_mask_rate, c.m, c.h) == (3.5, 0.1, 4, 364)
    assert (c.d_model, c.blocks, c.sigma, c.keep) == (768, 4, 0.01, 8)
    mc = c.model_config()
    assert mc.J == 15 and mc.dof == 28 and len(mc.cond_layers) == 5


def test_desk_profile():
    c = make_config("desk")
    mc = c.model_config()
    assert (mc.J, mc.d_model, mc.blocks, mc.heads, mc.m, mc.h) == (5, 64, 2, 4, 4, 364)
    assert c.steps == 2000


def test_unknown_key_rejected(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        make_config("desk", {"learning_rate": 1})
    p = tmp_path / "c.cfg"
    p.write_text("d_model = 32\nbogus = 1\n")
    with pytest.raises(ConfigError, match="bogus"):
        load_config(p)


def test_file_parsing_and_precedence(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nprofile = desk\nd_model = 32   # inline\nsparse_ratio = 0.25\n")
    c = load_config(p, overrides={"d_model": 16})
    assert c.d_model == 16 and c.sparse_ratio == 0.25 and c.body == "desk"
    with pytest.raises(ConfigError):
        load_config(p, overrides={"d_model": "wide"})


def test_text_roundtrip_and_digest():
    c = make_config("desk", {"seed": 3})
    back = config_from_text(c.to_text())
    assert back == c and back.digest() == c.digest()
    assert make_config("desk", {"seed": 4}).digest() == c.digest()
    assert make_config("desk", {"d_model": 32}).digest() != c.digest()
    assert make_config("desk", {"extero": "FIG"}).digest() != c.digest()


def test_body_json_roundtrip(tmp_path):
    p = tmp_path / "body.json"
    p.write_text(json.dumps(body_to_dict(desk_body())))
    spec = load_body(str(p))
    assert body_to_dict(spec) == body_to_dict(desk_body())
    c = make_config("desk", {"body": str(p)})
    assert c.digest() == make_config("desk").digest()


def test_body_mismatch_and_missing():
    with pytest.raises(ConfigError):
        make_config("desk", {"J": 6}).body_spec()
    with pytest.raises(ConfigError):
        load_body("/nonexistent/body.json")
