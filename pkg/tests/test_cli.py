import csv
import math

import numpy as np
import pytest

from tsain.checkpoint import save_checkpoint
from tsain.cli import dump_offsets, main
from tsain.data import read_gray_png, save_triplet, synth_triplet, write_gray_png
from tsain.deformconv import deform_conv2d, kernel_grid
from tsain.model import ModelConfig, count_parameters, init_params
from tsain.training import parse_log_line

TINY = """
[model]
channels = 4
k1 = 1
k2 = 1
rsab_count = 1
drb_count = 1
pyramid_levels = 2

[train]
lr = 1e-3
lr_milestones = 2
epochs = 3
batch = 2
patch = 16
seed = 5

[loss]
style = 1e3

[data]
synthetic = 4
synthetic_size = 16
val_fraction = 0.25

[io]
checkpoint = tiny.ckpt
log = tiny.log
"""


@pytest.fixture
def tiny(tmp_path):
    cfg = tmp_path / "tiny.ini"
    cfg.write_text(TINY, encoding="utf-8")
    return cfg


@pytest.fixture
def pair(tmp_path):
    t, _ = synth_triplet(2, 32, motion=(1.0, 2.0))
    write_gray_png(tmp_path / "a.png", t.frames[0])
    write_gray_png(tmp_path / "b.png", t.frames[2])
    return tmp_path / "a.png", tmp_path / "b.png"


@pytest.fixture
def desk_ckpt(tmp_path):
    path = tmp_path / "zero.ckpt"
    save_checkpoint(init_params(ModelConfig.desk()), path)
    return path


class TestTrain:
    def test_log_schedule_and_resume(self, tiny, tmp_path, capsys):
        assert main(["train", "--config", str(tiny)]) == 0
        lines = (tmp_path / "tiny.log").read_text(encoding="utf-8").splitlines()
        rows = [parse_log_line(line) for line in lines]
        assert [r["epoch"] for r in rows] == [1, 2, 3]
        assert [r["lr"] for r in rows] == [1e-3, pytest.approx(1e-4), pytest.approx(1e-4)]
        assert set(rows[0]) == {"epoch", "lr", "total", "pixel", "perc", "style", "val_psnr", "val_ssim", "val_ie"}
        before = (tmp_path / "tiny.ckpt").read_bytes()
        resumed_cfg = tmp_path / "resume.ini"
        resumed_cfg.write_text(TINY.replace("tiny.ckpt", "again.ckpt").replace("tiny.log", "again.log"))
        assert main(["train", "--config", str(resumed_cfg), "--resume", str(tmp_path / "tiny.ckpt")]) == 0
        assert (tmp_path / "again.ckpt").read_bytes() == before

    def test_resume_structure_mismatch(self, tiny, tmp_path, desk_ckpt, capsys):
        assert main(["train", "--config", str(tiny), "--resume", str(desk_ckpt)]) == 2
        assert "extract.head" in capsys.readouterr().err

    def test_bad_config_named_fields(self, tmp_path, capsys):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[train]\nbatchsize = 3\n", encoding="utf-8")
        assert main(["train", "--config", str(cfg)]) == 2
        assert "train.batchsize" in capsys.readouterr().err


class TestEval:
    def test_copy_first_on_static(self, tmp_path, capsys):
        ds = tmp_path / "ds"
        for i in range(3):
            save_triplet(synth_triplet(i, 16, motion=(0, 0))[0], ds)
        out = tmp_path / "res.csv"
        assert main(["eval", "--data", str(ds), "--out", str(out), "--predict-copy-first-frame"]) == 0
        rows = list(csv.reader(out.open()))
        assert rows[0] == ["id", "psnr", "ssim", "ie"] and len(rows) == 4
        assert all(math.isinf(float(r[1])) and float(r[2]) == 1.0 and float(r[3]) == 0.0 for r in rows[1:])
        assert "mean" in out.with_suffix(".txt").read_text()

    def test_params_reported(self, tmp_path, desk_ckpt):
        ds = tmp_path / "ds"
        save_triplet(synth_triplet(0, 16, motion=(0, 1))[0], ds)
        out = tmp_path / "r.csv"
        assert main(["eval", "--checkpoint", str(desk_ckpt), "--data", str(ds), "--out", str(out)]) == 0
        n = count_parameters(init_params(ModelConfig.desk()))
        assert f"params: {n}" in out.with_suffix(".txt").read_text()

    def test_missing_files(self, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "x.ckpt"), "--data", str(tmp_path),
                     "--out", str(tmp_path / "o.csv")]) == 2
        assert main(["eval", "--data", str(tmp_path), "--out", str(tmp_path / "o.csv")]) == 2


class TestInfer:
    def test_png_and_determinism(self, tmp_path, desk_ckpt, pair):
        a, b = pair
        for name in ("o1.png", "o2.png"):
            assert main(["infer", "--checkpoint", str(desk_ckpt), "--im0", str(a), "--im2", str(b),
                         "--out", str(tmp_path / name)]) == 0
        assert read_gray_png(tmp_path / "o1.png").shape == (32, 32)
        assert (tmp_path / "o1.png").read_bytes() == (tmp_path / "o2.png").read_bytes()

    def test_mismatched_sizes(self, tmp_path, desk_ckpt, pair, capsys):
        write_gray_png(tmp_path / "small.png", np.zeros((16, 16), np.uint8))
        assert main(["infer", "--checkpoint", str(desk_ckpt), "--im0", str(pair[0]),
                     "--im2", str(tmp_path / "small.png"), "--out", str(tmp_path / "o.png")]) == 2
        assert "differ" in capsys.readouterr().err

    def test_indivisible(self, tmp_path, desk_ckpt):
        for n in ("p", "q"):
            write_gray_png(tmp_path / f"{n}.png", np.zeros((15, 16), np.uint8))
        assert main(["infer", "--checkpoint", str(desk_ckpt), "--im0", str(tmp_path / "p.png"),
                     "--im2", str(tmp_path / "q.png"), "--out", str(tmp_path / "o.png")]) == 2


class TestDumpOffsets:
    def test_zero_init_grid(self, tmp_path, desk_ckpt, pair):
        out = tmp_path / "d.txt"
        assert main(["dump-offsets", "--checkpoint", str(desk_ckpt), "--im0", str(pair[0]), "--im2", str(pair[1]),
                     "--block", "rsab2", "--pos", "5,7", "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "# block=rsab2 pos=5,7 K=9"
        assert len(lines) == 10
        for k, line in enumerate(lines[1:]):
            kk, y, x, m = line.split()
            dy, dx = kernel_grid(3, 3)[k]
            assert (int(kk), float(y), float(x), float(m)) == (k, 5 + dy, 7 + dx, 0.5)

    def test_consistent_with_sampling(self, pair):
        from gradutil import make_checkable
        from tsain.deformconv import bilinear_sample
        from tsain.model import tsain_forward
        from tsain.data import to_tensor
        from tsain.numerics import no_grad

        params = init_params(ModelConfig.desk())
        make_checkable(params.store, 4)
        i0, i2 = read_gray_png(pair[0]), read_gray_png(pair[1])
        lines = dump_offsets(params, i0, i2, "drb2", (9, 4), side=2)
        trace = {}
        with no_grad():
            tsain_forward(to_tensor([i0]), to_tensor([i2]), params, trace=trace)
        feat, kernel, off, mask = trace["drb2.2"]
        # rebuild the deformable output at the position from the dumped points alone
        pts = [tuple(map(float, line.split()[1:])) for line in lines[1:]]
        w = kernel.weight.data.reshape(kernel.c_out, kernel.c_in, 9)
        manual = kernel.bias.data.ravel().copy()
        for k, (y, x, m) in enumerate(pts):
            samples = np.array([bilinear_sample(feat.data[0, c], y, x) for c in range(feat.shape[1])])
            manual += m * w[:, :, k] @ samples
        ref = deform_conv2d(feat, kernel, off, mask).data[0, :, 9, 4]
        np.testing.assert_allclose(manual, ref, rtol=1e-10, atol=1e-12)

    @pytest.mark.parametrize("block,pos", [("rsab7", "1,1"), ("tsa", "1,1"), ("drb1", "32,0"), ("rsab1", "-1,0")])
    def test_errors(self, tmp_path, desk_ckpt, pair, block, pos):
        assert main(["dump-offsets", "--checkpoint", str(desk_ckpt), "--im0", str(pair[0]), "--im2", str(pair[1]),
                     "--block", block, f"--pos={pos}", "--out", str(tmp_path / "d.txt")]) == 2


class TestPrepare:
    def test_unreadable_root(self, tmp_path, capsys):
        assert main(["prepare", "--root", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2
        assert "nope" in capsys.readouterr().err

    def test_tile_grid(self, tmp_path, capsys):
        from tsain.data import value_noise

        raw = tmp_path / "raw"
        raw.mkdir()
        tex = (value_noise(np.random.default_rng(0), 1024, 1024, 24.0) * 255).astype(np.uint8)
        for i in range(3):
            write_gray_png(raw / f"s{i}.png", tex)
        code = main(["prepare", "--root", str(raw), "--out", str(tmp_path / "o"), "--tile", "512",
                     "--stride", "256", "--hist-spec", "off"])
        assert code == 0
        assert "tiles=9" in capsys.readouterr().out

    def test_empty_result(self, tmp_path, capsys):
        raw = tmp_path / "raw"
        raw.mkdir()
        for i in range(3):
            write_gray_png(raw / f"s{i}.png", np.full((64, 64), 10 * i, np.uint8))
        assert main(["prepare", "--root", str(raw), "--out", str(tmp_path / "o"), "--tile", "32",
                     "--stride", "32"]) == 2


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["infer"])
    assert exc.value.code == 2
