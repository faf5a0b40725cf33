import json

import numpy as np

from gspretrain.cli import main
from gspretrain.io import read_pfm, read_ply, read_ppm


def run(capsys, *argv):
    rc = main(list(argv))
    out, err = capsys.readouterr()
    return rc, out, err


def test_usage_errors_exit_2(capsys):
    assert main(["pretrain", "--bogus"]) == 2
    assert main(["no-such-command"]) == 2
    assert main(["pretrain", "--mode", "mesh"]) == 2


def test_missing_checkpoint_is_one_json_line(capsys, tmp_path):
    rc, _, err = run(capsys, "eval", "--preset", "fixture", "--checkpoint", str(tmp_path / "nope.gpck"))
    assert rc == 1
    lines = err.strip().splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["error"] == "IO"


def test_corrupt_checkpoint_error_kind(capsys, tmp_path):
    (tmp_path / "bad.gpck").write_bytes(b"GPCK\x01\x00\x00\x00junk")
    rc, _, err = run(capsys, "eval", "--preset", "fixture", "--checkpoint", str(tmp_path / "bad.gpck"))
    assert rc == 1 and json.loads(err)["error"] == "CorruptCheckpoint"


def test_dump_config_carries_reference_hyperparameters(capsys):
    rc, out, _ = run(capsys, "pretrain", "--dump-config")
    cfg = json.loads(out)
    assert rc == 0
    assert cfg["mask"]["patch_size"] == 32 and cfg["mask"]["mask_ratio"] == 0.3
    assert cfg["ray_budget"] == 1024 and cfg["anchors_per_ray"] == 100


def test_overrides_apply(capsys):
    _, out, _ = run(capsys, "pretrain", "--dump-config", "--preset", "fixture", "--seed", "3",
                    "--steps", "9", "--mode", "splat", "--encoder", "lss")
    cfg = json.loads(out)
    assert (cfg["seed"], cfg["steps"], cfg["render_mode"], cfg["encoder"]) == (3, 9, "splat", "lss")


def test_gradcheck_exits_zero(capsys):
    rc, out, _ = run(capsys, "gradcheck", "--cases", "3")
    assert rc == 0
    lines = out.strip().splitlines()
    assert len(lines) == 8 and all(line.startswith("PASS") for line in lines)


def test_synth_writes_readable_files(capsys, tmp_path):
    rc, _, _ = run(capsys, "synth", "--out", str(tmp_path))
    assert rc == 0
    scene = json.loads((tmp_path / "scene.json").read_text())
    assert len(scene["rig"]["cameras"]) == 6
    assert read_ppm(tmp_path / "cam0.ppm").shape == (64, 64, 3)
    assert read_pfm(tmp_path / "cam5.pfm").shape == (64, 64)
    assert read_ply(tmp_path / "lidar.ply").shape[0] > 1000


def test_pretrain_then_eval_render_and_mask_debug(capsys, tmp_path):
    out = tmp_path / "run"
    rc, stdout, _ = run(capsys, "pretrain", "--preset", "fixture", "--steps", "1", "--out", str(out))
    assert rc == 0
    summary = json.loads(stdout)
    assert summary["steps"] == 1 and summary["skipped"] == 0
    rows = [json.loads(s) for s in (out / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == [0] and set(rows[0]) == {"step", "L", "L_rgb", "L_depth", "L_occ"}

    ck = str(out / "checkpoint.gpck")
    rc, stdout, _ = run(capsys, "eval", "--preset", "fixture", "--checkpoint", ck, "--batches", "1")
    m = json.loads(stdout)
    assert rc == 0 and {"rgb_l1", "depth_l1", "occ_iou"} <= set(m)
    assert all(np.isfinite(m[k]) for k in ("rgb_l1", "depth_l1", "occ_iou"))

    rc, _, _ = run(capsys, "render", "--preset", "fixture", "--checkpoint", ck, "--out", str(tmp_path / "r"))
    assert rc == 0
    img = read_ppm(tmp_path / "r" / "render_cam0.ppm")
    assert img.shape == (64, 128, 3)

    rc, stdout, _ = run(capsys, "mask-debug", "--preset", "fixture", "--out", str(tmp_path / "m"))
    assert rc == 0 and (tmp_path / "m" / "mask_cam0.ppm").exists()
