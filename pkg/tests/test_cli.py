import json

import jsonschema
import numpy as np
import pytest
from PIL import Image

from haan import cli, data
from haan import imageproc as ip
from haan.checkpoint import load_checkpoint, save_checkpoint
from haan.metrics import REPORT_SCHEMA
from haan.training import SsmConfig, TrainConfig, Trainer, train_ssm


def png(path, arr):
    Image.fromarray(ip.to_bytes(arr)).save(path)
    return path


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def gen_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "g.ckpt"
    s = data.fog_set(0, 4, size=32)
    cfg = TrainConfig(image_size=32, width_scale=16, iterations=3, seed=1)
    tr = Trainer(cfg, data.to_nchw([x.foggy for x in s]), data.to_nchw([x.clear for x in s]))
    tr.run()
    save_checkpoint(tr.checkpoint(), path)
    return path


@pytest.fixture(scope="module")
def ssm_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ssm") / "s.ckpt"
    s = data.sky_set(0, 16, 32)
    arrays = (
        data.to_nchw([x.foggy for x in s]),
        np.stack([x.mask for x in s])[:, None].astype(np.float32),
        data.to_nchw([x.clear for x in s]),
    )
    cfg = SsmConfig(image_size=32, width_scale=16, iterations=60, batch_size=4, checkpoint_out=str(path))
    train_ssm(cfg, arrays)
    return path


# -- usage --------------------------------------------------------------------------


def test_unknown_flag_is_usage_error(capsys):
    code, _, err = run(capsys, "derive", "--in", "x.png", "--outdir", "o", "--bogus")
    assert code == 1 and "usage" in err


def test_missing_subcommand(capsys):
    assert run(capsys)[0] == 1


def test_bad_thread_env(capsys, monkeypatch, tmp_path):
    monkeypatch.setenv("HAAN_THREADS", "many")
    code, _, err = run(capsys, "derive", "--in", tmp_path / "x.png", "--outdir", tmp_path)
    assert code == 1 and "HAAN_THREADS" in err


# -- synth ----------------------------------------------------------------------------


@pytest.fixture
def scene(tmp_path, rng):
    clear = png(tmp_path / "clear.png", rng.random((20, 24, 3)))
    depth = tmp_path / "depth.png"
    Image.fromarray(rng.integers(0, 256, (20, 24), dtype=np.uint8)).save(depth)
    return clear, depth


def test_synth_zero_beta_is_identity(capsys, tmp_path, scene):
    clear, depth = scene
    out = tmp_path / "f.png"
    code, _, _ = run(capsys, "synth", "--clear", clear, "--depth", depth, "--beta", 0, "--airlight", "0.9,0.9,0.9", "--out", out)
    assert code == 0
    assert out.read_bytes() and np.array_equal(np.asarray(Image.open(out)), np.asarray(Image.open(clear)))


def test_synth_dense_fog_is_airlight(capsys, tmp_path, scene):
    clear, _ = scene
    depth = tmp_path / "far.png"
    Image.fromarray(np.full((20, 24), 255, np.uint8)).save(depth)
    out = tmp_path / "f.png"
    args = ("synth", "--clear", clear, "--depth", depth, "--beta", 50, "--dmax", 2, "--airlight", "0.8,0.7,0.6", "--out", out)
    assert run(capsys, *args)[0] == 0
    np.testing.assert_allclose(ip.load_image(out), np.broadcast_to([0.8, 0.7, 0.6], (20, 24, 3)), atol=1 / 255)


def test_synth_round_trip_with_inversion(capsys, tmp_path, scene):
    clear, depth = scene
    fog, back = tmp_path / "f.png", tmp_path / "b.png"
    common = ("--depth", depth, "--beta", 0.8, "--airlight", "0.85,0.9,0.95")
    assert run(capsys, "synth", "--clear", clear, *common, "--out", fog)[0] == 0
    assert run(capsys, "synth", "--in", fog, *common, "--invert", "--out", back)[0] == 0
    diff = np.abs(np.asarray(Image.open(back), int) - np.asarray(Image.open(clear), int))
    assert diff.max() <= 1


def test_synth_auto_airlight_is_seeded(capsys, tmp_path, scene):
    clear, depth = scene
    args = ("synth", "--clear", clear, "--depth", depth, "--beta", 1, "--airlight", "auto", "--out", tmp_path / "f.png")
    _, out1, err = run(capsys, "--seed", 7, *args)
    _, out2, _ = run(capsys, "--seed", 7, *args)
    _, out3, _ = run(capsys, "--seed", 8, *args)
    assert "seed 7" in err
    assert out1 == out2 != out3
    rgb = [float(v) for v in out1.split()[1].split(",")]
    assert rgb[0] == rgb[1] == rgb[2] and 0.7 <= rgb[0] <= 1.0


@pytest.mark.parametrize("extra", [("--beta", -1), ("--airlight", "1,2"), ("--dmax", 0)])
def test_synth_bad_values(capsys, tmp_path, scene, extra):
    clear, depth = scene
    base = {"--beta": 1, "--airlight": "0.9,0.9,0.9", "--dmax": 1}
    base[extra[0]] = extra[1]
    flat = [x for kv in base.items() for x in kv]
    assert run(capsys, "synth", "--clear", clear, "--depth", depth, *flat, "--out", tmp_path / "f.png")[0] == 1


def test_synth_missing_input(capsys, tmp_path, scene):
    _, depth = scene
    code, _, err = run(capsys, "synth", "--clear", tmp_path / "nope.png", "--depth", depth, "--beta", 1, "--airlight", "auto", "--out", tmp_path / "f.png")
    assert code == 2 and "nope.png" in err


# -- derive ---------------------------------------------------------------------------


def test_derive_matches_single_ops(capsys, tmp_path, rng):
    src = png(tmp_path / "img.png", rng.random((9, 11, 3)) * 0.8 + 0.1)
    assert run(capsys, "derive", "--in", src, "--outdir", tmp_path / "o")[0] == 0
    image = ip.load_image(src)
    for tag, fn in (("wb", ip.white_balance), ("ce", ip.contrast_enhance), ("gc", ip.gamma_correct)):
        got = np.asarray(Image.open(tmp_path / "o" / f"img_{tag}.png"))
        assert np.array_equal(got, ip.to_bytes(fn(image)))


def test_derive_gray_input_white_balance_unchanged(capsys, tmp_path):
    src = png(tmp_path / "g.png", np.full((5, 5, 3), 0.4))
    run(capsys, "derive", "--in", src, "--outdir", tmp_path)
    assert np.array_equal(np.asarray(Image.open(tmp_path / "g_wb.png")), np.asarray(Image.open(src)))


def test_derive_missing_file(capsys, tmp_path):
    code, _, err = run(capsys, "derive", "--in", tmp_path / "absent.png", "--outdir", tmp_path)
    assert code == 2 and "absent.png" in err


# -- train ----------------------------------------------------------------------------


def _train_config(tmp_path, name, **extra):
    data.write_fog_dataset(data.fog_set(2, 3, size=32), tmp_path / "ds")
    cfg = dict(
        image_size=32,
        width_scale=16,
        iterations=2,
        fog_dir=str(tmp_path / "ds" / "foggy"),
        clear_dir=str(tmp_path / "ds" / "clear"),
        checkpoint_out=str(tmp_path / f"{name}.ckpt"),
        log_path=str(tmp_path / f"{name}.jsonl"),
    )
    cfg.update(extra)
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(cfg))
    return path


def test_train_writes_loadable_checkpoint_deterministically(capsys, tmp_path):
    a, b = _train_config(tmp_path, "a"), _train_config(tmp_path, "b")
    code, _, err = run(capsys, "train", "--config", a)
    assert code == 0 and "step 2/2" in err
    assert run(capsys, "train", "--config", b)[0] == 0
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert load_checkpoint(tmp_path / "a.ckpt").step == 2
    assert len((tmp_path / "a.jsonl").read_text().splitlines()) == 2


def test_train_malformed_config(capsys, tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"lr": 1e-4,')
    code, _, err = run(capsys, "train", "--config", p)
    assert code == 1 and "malformed" in err
    p.write_text('{"learning_rate": 1}')
    code, _, err = run(capsys, "train", "--config", p)
    assert code == 1 and "learning_rate" in err


def test_train_ssm_cli(capsys, tmp_path):
    data.write_sky_dataset(data.sky_set(0, 2, 32), tmp_path / "sky")
    cfg = dict(image_size=32, width_scale=16, iterations=1, data_dir=str(tmp_path / "sky"), checkpoint_out=str(tmp_path / "s.ckpt"))
    (tmp_path / "s.json").write_text(json.dumps(cfg))
    assert run(capsys, "train-ssm", "--config", tmp_path / "s.json")[0] == 0
    assert load_checkpoint(tmp_path / "s.ckpt").step == 1


# -- defog / eval --------------------------------------------------------------------


def test_defog_directory(capsys, tmp_path, rng, gen_ckpt):
    src = tmp_path / "in"
    src.mkdir()
    png(src / "a.png", rng.random((30, 41, 3)))
    png(src / "b.png", rng.random((16, 16, 3)))
    (src / "broken.png").write_bytes(b"junk")
    code, _, err = run(capsys, "defog", "--in", src, "--ckpt", gen_ckpt, "--out", tmp_path / "out")
    assert code == 0 and "broken.png" in err
    assert ip.load_image(tmp_path / "out" / "a.png").shape == (28, 40, 3)
    assert ip.load_image(tmp_path / "out" / "b.png").shape == (16, 16, 3)
    assert not (tmp_path / "out" / "broken.png").exists()


def test_defog_use_ctr_changes_output(capsys, tmp_path, rng, gen_ckpt):
    src = png(tmp_path / "x.png", rng.random((16, 16, 3)))
    run(capsys, "defog", "--in", src, "--ckpt", gen_ckpt, "--out", tmp_path / "p")
    run(capsys, "defog", "--in", src, "--ckpt", gen_ckpt, "--out", tmp_path / "c", "--use-ctr")
    assert (tmp_path / "p" / "x.png").read_bytes() != (tmp_path / "c" / "x.png").read_bytes()


def test_defog_bad_checkpoint(capsys, tmp_path, rng):
    src = png(tmp_path / "x.png", rng.random((8, 8, 3)))
    (tmp_path / "bad.ckpt").write_bytes(b"HAAN\x01")
    code, _, err = run(capsys, "defog", "--in", src, "--ckpt", tmp_path / "bad.ckpt", "--out", tmp_path)
    assert code == 2 and "bad.ckpt" in err


def test_eval_identity_stub(capsys, tmp_path, rng, monkeypatch):
    fog = tmp_path / "fog"
    fog.mkdir()
    for i in range(3):
        png(fog / f"{i}.png", rng.random((16, 16, 3)))
    (tmp_path / "stub.ckpt").write_bytes(b"stub")
    monkeypatch.setattr(cli, "load_defogger", lambda path, use_ctr=False: lambda im: im)
    report = tmp_path / "r.json"
    code, _, _ = run(capsys, "eval", "--foggy", fog, "--ref", fog, "--ckpt", tmp_path / "stub.ckpt", "--report", report)
    assert code == 0
    loaded = json.loads(report.read_text())
    jsonschema.validate(loaded, REPORT_SCHEMA)
    assert [r["ssim"] for r in loaded["records"]] == [1.0, 1.0, 1.0]
    assert [r["name"] for r in loaded["records"]] == ["0", "1", "2"]
    assert loaded["aggregate"]["ssim"] == 1.0


def test_eval_unmatched_references_reported(capsys, tmp_path, rng, gen_ckpt):
    fog, ref = tmp_path / "fog", tmp_path / "ref"
    fog.mkdir()
    ref.mkdir()
    png(fog / "a.png", rng.random((16, 16, 3)))
    png(fog / "b.png", rng.random((16, 16, 3)))
    png(ref / "a.png", rng.random((16, 16, 3)))
    png(ref / "z.png", rng.random((16, 16, 3)))
    code, _, err = run(capsys, "eval", "--foggy", fog, "--ref", ref, "--ckpt", gen_ckpt, "--report", tmp_path / "r.json")
    assert code == 0 and "b.png" in err and "z" in err
    recs = json.loads((tmp_path / "r.json").read_text())["records"]
    assert recs[0]["psnr_db"] is not None and recs[1]["psnr_db"] is None
    assert recs[1]["edge_gradient_ratio"] is not None


# -- segment-sky ------------------------------------------------------------------------


def test_segment_sky_top_half(capsys, tmp_path, ssm_ckpt):
    sample = data.sky_set(11, 1, 32)[0]
    src = png(tmp_path / "s.png", sample.foggy)
    code, out, _ = run(capsys, "segment-sky", "--in", src, "--ckpt", ssm_ckpt, "--out", tmp_path / "m.png")
    assert code == 0 and out.startswith("airlight ")
    mask = np.asarray(Image.open(tmp_path / "m.png"), float)
    assert mask.shape == (32, 32)
    assert mask[:16].mean() > mask[16:].mean()


def test_segment_sky_ground_falls_back(capsys, tmp_path, ssm_ckpt, monkeypatch):
    src = png(tmp_path / "g.png", np.full((24, 40, 3), 0.3))
    monkeypatch.setattr(cli.inference, "sky_probability", lambda ssm, im: np.zeros(im.shape[:2]))
    code, out, _ = run(capsys, "segment-sky", "--in", src, "--ckpt", ssm_ckpt, "--out", tmp_path / "m.png")
    assert code == 0 and "dark-channel fallback" in out
    assert np.asarray(Image.open(tmp_path / "m.png")).shape == (24, 40)
