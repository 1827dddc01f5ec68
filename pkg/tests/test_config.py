import pytest

from tsain.config import RunConfig, RunConfigError, TrainConfig, load_run_config
from tsain.losses import LossWeights
from tsain.model import ModelConfig


def _write(tmp_path, text):
    p = tmp_path / "run.ini"
    p.write_text(text, encoding="utf-8")
    return p


def test_shipped_desk_config(desk_ini):
    cfg = load_run_config(desk_ini)
    assert cfg.model == ModelConfig.desk()
    assert (cfg.train.batch, cfg.train.patch) == (2, 32)
    assert cfg.loss == LossWeights(1.0, 1.0, 1e6)
    assert cfg.data.synthetic == 16
    assert cfg.io.checkpoint.endswith("desk.ckpt")


def test_defaults():
    cfg = RunConfig()
    assert cfg.model == ModelConfig.full()
    assert cfg.train.lr == 4e-4 and cfg.train.lr_decay_factor == 0.1
    assert cfg.train.lr_milestones == (60, 90) and cfg.train.epochs == 100


def test_lr_schedule():
    t = TrainConfig(lr=1.0, lr_milestones=(2, 4), epochs=5)
    assert [t.lr_at(e) for e in range(1, 6)] == [1.0, 0.1, 0.1, pytest.approx(0.01), pytest.approx(0.01)]


def test_unknown_key_and_section(tmp_path):
    p = _write(tmp_path, "[train]\nlearning_rate = 1\n[extra]\na = 1\n[data]\nsynthetic = 2\n")
    with pytest.raises(RunConfigError) as exc:
        load_run_config(p)
    text = " ".join(exc.value.problems)
    assert "train.learning_rate" in text and "[extra]" in text


def test_field_by_field(tmp_path):
    p = _write(tmp_path, "[train]\nlr = -1\nbatch = 0\nepochs = 10\nlr_milestones = 5 3\n"
                         "[data]\nsynthetic = 2\n")
    with pytest.raises(RunConfigError) as exc:
        load_run_config(p)
    probs = exc.value.problems
    assert any("train.lr " in q for q in probs)
    assert any("train.batch" in q for q in probs)
    assert any("strictly increasing" in q for q in probs)


def test_patch_divisibility(tmp_path):
    p = _write(tmp_path, "[model]\npyramid_levels = 3\n[train]\npatch = 18\nepochs = 2\nlr_milestones = 1\n"
                         "[data]\nsynthetic = 2\nsynthetic_size = 32\n")
    with pytest.raises(RunConfigError, match="divisible"):
        load_run_config(p)


def test_missing_data(tmp_path):
    with pytest.raises(RunConfigError, match="data.root"):
        load_run_config(_write(tmp_path, "[train]\nepochs = 3\nlr_milestones = 1\n"))


def test_unreadable(tmp_path):
    with pytest.raises(RunConfigError):
        load_run_config(tmp_path / "missing.ini")


def test_relative_paths(tmp_path):
    p = _write(tmp_path, "[train]\nepochs = 2\nlr_milestones = 1\npatch = 16\n[data]\nroot = ds\n"
                         "[io]\ncheckpoint = out/m.ckpt\n")
    cfg = load_run_config(p)
    assert cfg.data.root == str((tmp_path / "ds").resolve())
    assert cfg.io.checkpoint == str(tmp_path / "out" / "m.ckpt")
