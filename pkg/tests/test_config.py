import pytest

from eqexplore.experiments.config import DEFAULTS, ConfigError, load_config, resolved_text

SHAPE = "[scenario]\nname = s\nkind = shape\nmethod = active\n"
QUAD = "[scenario]\nname = q\nkind = quadrotor\nmethod = babble\n"


@pytest.mark.parametrize("text, kind", [(SHAPE, "shape"), (QUAD, "quadrotor")])
def test_defaults_fill_missing_keys(text, kind):
    cfg = load_config(text)
    assert cfg.scenario.kind == kind and cfg.scenario.seed == 0
    assert cfg.controller.dt == float(DEFAULTS[kind]["controller"]["dt"])
    assert cfg.n_steps == round(cfg.run.duration / cfg.controller.dt)


@pytest.mark.parametrize("text", [SHAPE, QUAD + "[controller]\nlambda_max = 0.05\n"])
def test_resolved_text_round_trips(text):
    cfg = load_config(text)
    again = load_config(resolved_text(cfg))
    assert again == cfg
    assert resolved_text(again) == resolved_text(cfg)


def test_loads_from_path(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text(SHAPE + "seed = 4\n")
    assert load_config(path).scenario.seed == 4
    with pytest.raises(ConfigError, match="no such"):
        load_config(tmp_path / "missing.ini")


def test_with_seed_only_touches_the_seed():
    cfg = load_config(SHAPE)
    other = cfg.with_seed(7)
    assert other.scenario.seed == 7 and other.controller == cfg.controller


@pytest.mark.parametrize("extra, match", [
    ("[controller]\nbogus = 1\n", "unknown key"),
    ("[extras]\na = 1\n", "unknown section"),
    ("[controller]\nlambda_max = 5\n", "lambda_max"),
    ("[controller]\ndt = -0.1\n", "dt"),
    ("[controller]\nr_reg = 1, 2\n", "r_reg"),
    ("[coverage]\nindices = 1\n", "cart position"),
    ("[coverage]\ndomain_lo = 1\ndomain_hi = 0\n", "domain_lo"),
    ("[importance]\ncapacity = 0\n", "importance"),
    ("[controller]\ndt = fast\n", "cannot parse"),
])
def test_invalid_values_are_rejected(extra, match):
    with pytest.raises(ConfigError, match=match):
        load_config(SHAPE + extra)


def test_unknown_kind_and_method():
    with pytest.raises(ConfigError, match="kind"):
        load_config("[scenario]\nkind = boat\n")
    with pytest.raises(ConfigError, match="method"):
        load_config("[scenario]\nkind = shape\nmethod = random\n")
