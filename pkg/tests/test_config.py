import pytest
from hypothesis import given
from hypothesis import strategies as st

from avae.config import (FULL_DESIGN, LATENT_LEVELS, ConfigError, ExperimentConfig, build, expand_grid,
                         load_config, parse_lines)


def test_profile_defaults_fill_unset_fields():
    fast = ExperimentConfig()
    assert (fast.epochs, fast.c_sweep, fast.batch, fast.pairs, fast.max_iter) == (30, 11, 16, 5, 1000)
    full = ExperimentConfig(profile="full")
    assert (full.epochs, full.c_sweep, full.batch, full.pairs, full.max_iter) == (500, 51, 128, 20, 15000)
    assert ExperimentConfig(epochs=7).epochs == 7


def test_full_profile_enforces_factor_levels():
    with pytest.raises(ConfigError, match="32, 128"):
        ExperimentConfig(profile="full", latent_size=8)
    with pytest.raises(ConfigError, match="timesteps"):
        ExperimentConfig(profile="full", model="draw", timesteps=4)
    ExperimentConfig(profile="full", dataset="celeba", latent_size=2048)
    # desk-scale runs may use reduced levels
    ExperimentConfig(profile="fast", model="draw", latent_size=8, timesteps=16, attention=True, lstm=64)


def test_invalid_values_list_valid_levels():
    with pytest.raises(ConfigError, match="vae, cvae, draw"):
        ExperimentConfig(model="gan")
    with pytest.raises(ConfigError, match="latent, output"):
        ExperimentConfig(layers=("hidden",))
    with pytest.raises(ConfigError, match="only draw"):
        ExperimentConfig(model="vae", timesteps=16)
    with pytest.raises(ConfigError, match="profile"):
        ExperimentConfig(profile="medium")


def test_text_round_trip(tmp_path):
    cfg = ExperimentConfig(model="draw", timesteps=16, attention=True, latent_size=8, lstm=64,
                           layers=("latent", "output"), lr=3e-4, seed_noise=11, out="runs/x")
    path = tmp_path / "c.cfg"
    path.write_text(cfg.to_text())
    assert load_config(path) == cfg


def test_parse_comments_and_errors():
    plain, grid = parse_lines("# header\nmodel = cvae   # trailing\n\ngrid.latent_size = small, large\n")
    assert plain == {"model": "cvae"} and grid == {"latent_size": ["small", "large"]}
    with pytest.raises(ConfigError, match="line 2"):
        parse_lines("model = vae\nnonsense\n")
    with pytest.raises(ConfigError, match="unknown key 'colour'"):
        parse_lines("colour = red\n")
    with pytest.raises(ConfigError, match="cannot read"):
        build({"epochs": "many"})


def test_load_config_rejects_grid(tmp_path):
    path = tmp_path / "g.cfg"
    path.write_text("grid.model = vae, draw\n")
    with pytest.raises(ConfigError, match="sweep"):
        load_config(path)


def test_overrides_win(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("seed_pairs = 3\nprofile = fast\n")
    cfg = load_config(path, seed_pairs=9, profile=None)
    assert cfg.seed_pairs == 9 and cfg.profile == "fast"


def test_digest_ignores_output_directory():
    a = ExperimentConfig(out="runs/a")
    assert a.digest() == ExperimentConfig(out="runs/b").digest()
    assert a.digest() != ExperimentConfig(seed_noise=1).digest()


@given(st.integers(0, 2 ** 31), st.integers(0, 2 ** 31))
def test_digest_is_a_function_of_the_settings(s1, s2):
    a = ExperimentConfig(seed_split=s1, seed_pairs=s2)
    assert a.digest() == ExperimentConfig(seed_split=s1, seed_pairs=s2).digest()


def test_full_design_has_72_treatments():
    configs = expand_grid({"profile": "full", "layers": "latent,output"}, FULL_DESIGN)
    assert len(configs) == 36
    assert sum(len(c.layers) for c in configs) == 72
    per_dataset = {d: sum(c.dataset == d for c in configs) for d in LATENT_LEVELS}
    assert per_dataset == {"mnist": 12, "svhn": 12, "celeba": 12}
    draws = [c for c in configs if c.model == "draw"]
    assert len(draws) == 24 and {c.timesteps for c in draws} == {1, 16}


def test_treatment_names_attention_variant():
    assert ExperimentConfig(model="draw", attention=True, timesteps=16).treatment()["model"] == "draw-attention"
