import json

import numpy as np
import pytest
import torch
from PIL import Image

from swinmark import noise
from swinmark.cli import bits_to_hex, main, parse_message
from swinmark.data import write_image
from swinmark.training import SweepCell, SweepReport


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def photo(tmp_path_factory, natural_images):
    return write_image(natural_images[0], tmp_path_factory.mktemp("img") / "photo.png")


def test_parse_message_hex_and_bits():
    m = parse_message("a5", None, 8, 0)
    assert m.tolist() == [[1, 0, 1, 0, 0, 1, 0, 1]]
    assert bits_to_hex(m) == "a5"
    assert parse_message(None, "00000001", 8, 0).tolist() == [[0] * 7 + [1]]
    assert torch.equal(parse_message(None, None, 8, 4), parse_message(None, None, 8, 4))


def test_embed_extract_roundtrip(capsys, tmp_path, overfit):
    ckpt = overfit["checkpoint"]
    for i in range(len(overfit["images"])):
        cover = write_image(overfit["images"][i], tmp_path / f"cover{i}.png")
        out = tmp_path / f"wm{i}.png"
        code, text, _ = _run(capsys, "embed", "--checkpoint", ckpt, "--image", cover,
                             "--out", out, "--seed", i)
        assert code == 0
        record = json.loads(text)
        arr = np.asarray(Image.open(out))
        assert arr.shape == (16, 16, 3) and arr.dtype == np.uint8
        code, text, _ = _run(capsys, "extract", "--checkpoint", ckpt, "--image", out,
                             "--truth", f"{out}.json")
        assert code == 0
        extracted = json.loads(text)
        assert extracted["bits"] == record["bits"] and extracted["acc"] == 1.0
        assert all(0 < p < 1 for p in extracted["confidence"])
        _, again, _ = _run(capsys, "extract", "--checkpoint", ckpt, "--image", out)
        assert json.loads(again)["bits"] == extracted["bits"]


def test_embed_explicit_hex_message(capsys, tmp_path, overfit):
    cover = write_image(overfit["images"][0], tmp_path / "cover.png")
    code, text, _ = _run(capsys, "embed", "--checkpoint", overfit["checkpoint"], "--image", cover,
                         "--out", tmp_path / "wm.png", "--message", "c3")
    assert code == 0 and json.loads(text)["bits"] == "11000011"


def test_wrong_message_length_is_usage_error(capsys, tmp_path, overfit):
    cover = write_image(overfit["images"][0], tmp_path / "cover.png")
    code, _, err = _run(capsys, "embed", "--checkpoint", overfit["checkpoint"], "--image", cover,
                        "--out", tmp_path / "wm.png", "--bits", "1" * 7)
    assert code == 2 and "7 bits" in err
    with pytest.raises(Exception, match="63 bits"):
        parse_message(None, "0" * 63, 64, 0)


def test_bad_image_is_data_error(capsys, tmp_path, overfit):
    bad = tmp_path / "bad.png"
    bad.write_text("not an image")
    code, _, _ = _run(capsys, "extract", "--checkpoint", overfit["checkpoint"], "--image", bad)
    assert code == 3


def test_attack_rotation_zero_is_byte_identical(capsys, tmp_path, photo):
    out = tmp_path / "rot.png"
    assert _run(capsys, "attack", "--spec", "rotation:0", "--image", photo, "--out", out)[0] == 0
    assert np.array_equal(np.asarray(Image.open(out)), np.asarray(Image.open(photo)))


def test_attack_jpeg_changes_image(capsys, tmp_path, photo):
    out = tmp_path / "jpeg.png"
    code, text, _ = _run(capsys, "attack", "--spec", "jpeg:50", "--image", photo, "--out", out)
    assert code == 0 and json.loads(text)["spec"] == "jpeg:50"
    assert not np.array_equal(np.asarray(Image.open(out)), np.asarray(Image.open(photo)))


def test_attack_usage_errors(capsys, tmp_path, photo):
    out = tmp_path / "x.png"
    assert _run(capsys, "attack", "--spec", "dropout:0.4", "--image", photo, "--out", out)[0] == 2
    assert _run(capsys, "attack", "--spec", "warp:3", "--image", photo, "--out", out)[0] == 2
    code, _, _ = _run(capsys, "attack", "--spec", "dropout:0.4", "--image", photo, "--cover", photo,
                      "--out", out)
    assert code == 0


def test_report_empty_csv(capsys, tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    code, text, _ = _run(capsys, "report", path)
    assert code == 0 and text == ""


def test_report_gaussian_columns_ascending(capsys, tmp_path):
    cells = [SweepCell("gaussian_noise", s, 38.0, 99.0 - 10 * s)
             for s in reversed(noise.TEST_GRIDS["gaussian_noise"])]
    path = tmp_path / "g.csv"
    SweepReport(cells).to_csv(path)
    code, text, _ = _run(capsys, "report", path, "--model", "ours")
    assert code == 0
    header = [ln for ln in text.splitlines() if ln.strip().startswith("Model")][0]
    cols = [c.strip() for c in header.split("|")][2:]
    assert cols == ["σ=0.01", "0.02", "0.03", "0.04", "0.05"]
    assert _run(capsys, "report", tmp_path / "missing.csv")[0] == 3


def test_evaluate_writes_csv(capsys, tmp_path, overfit):
    out = tmp_path / "sweep.csv"
    code, text, _ = _run(capsys, "evaluate", "--checkpoint", overfit["checkpoint"],
                         "--sample-images", 4, "--kind", "rotation", "--kind", "identity", "--out", out)
    assert code == 0 and "Rotation" in text
    report = SweepReport.from_csv(out)
    assert len(report.cells) == len(noise.TEST_GRIDS["rotation"]) + 1


def test_train_command_with_config(capsys, tmp_path, caplog):
    cfg = tmp_path / "tiny.yaml"
    cfg.write_text("height: 16\nwidth: 16\npatch: 2\nchannels: 8\nstages: 1\nwindow: 2\nheads: 2\n"
                   "msg_len: 8\ndiffusion_len: 16\ndiffusion_side: 4\nmsg_channels: 4\nbatch_size: 4\n")
    with caplog.at_level("INFO", logger="swinmark"):
        code, text, _ = _run(capsys, "train", "--config", cfg, "--sample-images", 4, "--steps", 2,
                             "--kind", "jpeg", "--out", tmp_path / "run", "--override", "seed=5")
    assert code == 0 and json.loads(text)["steps"] == 2
    assert (tmp_path / "run" / "final.pt").exists()
    assert "resolved config" in caplog.text and "seed: 5" in caplog.text
    cfg.write_text(cfg.read_text() + "unknown_key: 1\n")
    assert _run(capsys, "train", "--config", cfg, "--sample-images", 4, "--out", tmp_path / "r2")[0] == 2
