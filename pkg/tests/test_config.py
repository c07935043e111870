import dataclasses

import pytest

from probe_eit.config import ExperimentConfig, format_config, load_config, parse_config
from probe_eit.errors import ConfigError


def test_defaults_roundtrip():
    cfg = ExperimentConfig()
    assert parse_config(format_config(cfg)) == cfg


def test_partial_config_keeps_defaults():
    cfg = parse_config("[probe]\ndiameter = 9\n[gn]\nlam = none\n[sweep]\nsemi_axes = 1, 2\n"
                       "[pdipm]\nrelinearize = yes\n[run]\nseed = 4\n")
    assert cfg.probe.diameter == 9.0 and cfg.probe.electrode_count == 8
    assert cfg.gn.lam is None
    assert cfg.sweep.semi_axes == (1.0, 2.0)
    assert cfg.pdipm.relinearize is True
    assert cfg.seed == 4
    assert cfg.mesh == ExperimentConfig().mesh


def test_partial_section_keeps_experiment_defaults():
    cfg = parse_config("[pso]\nmax_iters = 5\n[placement]\nplacement_factor = 8\n")
    base = ExperimentConfig()
    assert cfg.pso == dataclasses.replace(base.pso, max_iters=5)
    assert cfg.placement == dataclasses.replace(base.placement, placement_factor=8.0)


def test_nondefault_roundtrip():
    cfg = parse_config("[gn]\nkind = identity\nlam = 0.25\n[noise]\ntrain_snr_db = none\n"
                       "[run]\nout_dir = results/x\n")
    assert cfg.noise.train_snr_db is None and cfg.out_dir == "results/x"
    assert parse_config(format_config(cfg)) == cfg


@pytest.mark.parametrize("text", [
    "[bogus]\na = 1\n",
    "[probe]\ncolour = red\n",
    "[probe]\ndiameter = abc\n",
    "[probe]\ndiameter = nan\n",
    "[probe]\ndiameter = -1\n",
    "[pso]\ninertia = 1.5\n",
    "[pdipm]\nrelinearize = maybe\n",
    "[run]\nseed = -2\n",
    "[run]\nfoo = 1\n",
    "no section header\n",
])
def test_rejects_bad_config(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_load_missing(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")
    (tmp_path / "c.ini").write_text("[dataset]\ncount = 5\n")
    assert load_config(tmp_path / "c.ini").dataset.count == 5


def test_overrides():
    cfg = ExperimentConfig().with_overrides(seed=9, out_dir="o")
    assert cfg.seed == cfg.dataset.seed == cfg.noise.seed == cfg.pso.seed == 9
    assert cfg.out_dir == "o"
    assert ExperimentConfig().with_overrides() == ExperimentConfig()
    assert dataclasses.replace(cfg, out_dir="p").out_dir == "p"
