import pytest

from uniadapt.adaptation import ConfigError
from uniadapt.config import RunConfig, load_config, parse_config, parse_insert_layers, render_config


def test_defaults_are_desk_scale():
    cfg = RunConfig()
    assert (cfg.backbone.d, cfg.backbone.heads) == (64, 4)
    assert (cfg.backbone.visual_depth, cfg.backbone.text_depth, cfg.backbone.fusion_depth) == (4, 4, 4)
    assert cfg.task.batch_size == 32 and cfg.task.epochs <= 5
    assert cfg.adaptation.scale == 0.1


def test_parse_sections():
    cfg = parse_config("""
[adaptation]
variant = uniadapter
r = 4
sharing = share_both
modalities = V,T,C
insert_layers = V:1-2;T:1-4;C:3,4
[optimizer]
lr = 0.01
[task]
task = vqa
epochs = 2
""")
    a = cfg.adaptation
    assert (a.r, a.sharing, a.modalities) == (4, "share_both", frozenset("VTC"))
    assert a.insert_layers == {"V": frozenset({1, 2}), "T": frozenset({1, 2, 3, 4}), "C": frozenset({3, 4})}
    assert cfg.optimizer.lr == 0.01 and cfg.task.task == "vqa"


def test_variant_switch_applies_variant_defaults():
    cfg = parse_config("[adaptation]\nvariant = lora\n")
    assert cfg.adaptation.sharing == "no_share" and not cfg.adaptation.query_residual


def test_insert_layers_shorthand():
    assert parse_insert_layers("5-12") == {m: frozenset(range(5, 13)) for m in "VTC"}
    assert parse_insert_layers("all") is None


@pytest.mark.parametrize("text", [
    "[nonsense]\nx = 1\n",
    "[task]\nbogus = 1\n",
    "[task]\nepochs = 0\n",
    "[task]\ntask = captioning\n",
    "[optimizer]\nlr = -1\n",
    "[task]\nepochs = many\n",
    "[adaptation]\nquery_residual = maybe\n",
    "[backbone]\npatches = 3\n",
    "no section header",
])
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_render_round_trip():
    cfg = parse_config("[adaptation]\nr = 4\ninsert_layers = V:1,2\nmodalities = V\nquery_residual = false\n")
    again = parse_config(render_config(cfg))
    assert again.to_dict() == cfg.to_dict()
    assert again.config_hash() == cfg.config_hash()


def test_lr_none_round_trip():
    cfg = RunConfig()
    assert cfg.optimizer.lr is None
    assert parse_config(render_config(cfg)).optimizer.lr is None


def test_env_overrides(tmp_path, monkeypatch):
    p = tmp_path / "run.cfg"
    p.write_text("[task]\ndata = here\n")
    monkeypatch.setenv("UNIADAPT_DATA", "/elsewhere")
    assert load_config(p).task.data == "/elsewhere"
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.cfg")


def test_backbone_hash_ignores_adaptation():
    a = RunConfig()
    b = parse_config("[adaptation]\nr = 4\n")
    assert a.backbone_hash() == b.backbone_hash() and a.config_hash() != b.config_hash()
