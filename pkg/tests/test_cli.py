import csv
import io

import numpy as np
import pytest

from sparsefusion import cli, fileio


def _csv(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0
    assert "recon" in capsys.readouterr().out


def test_synth_writes_dataset(synth_dataset):
    assert len(fileio.frame_indices(synth_dataset)) == 9
    assert (synth_dataset / "scene.txt").exists() and (synth_dataset / "config.txt").exists()
    assert fileio.has_priors(synth_dataset)


def test_recon_outputs(recon_dir):
    for name in ("mesh.ply", "stats.txt", "metrics.csv", "metrics.txt", "config.txt", "metrics2d.csv"):
        assert (recon_dir / name).exists(), name
    for li in range(3):
        assert (recon_dir / f"level{li}.svol").exists()
    assert len(list((recon_dir / "depth").glob("*.bin"))) == 9
    stats = dict(line.split(" = ", 1) for line in (recon_dir / "stats.txt").read_text().splitlines())
    assert stats["levels"] == "3" and int(stats["mesh_faces"]) > 0
    assert len(stats["reduction_percent"].split(",")) == 3
    rows = _csv((recon_dir / "metrics2d.csv").read_text())
    assert rows[-1]["name"] == "mean" and float(rows[-1]["Comp"]) > 0.5


def test_eval3d_same_mesh_is_perfect(recon_dir, capsys):
    mesh = str(recon_dir / "mesh.ply")
    assert cli.main(["eval3d", mesh, mesh]) == 0
    row = _csv(capsys.readouterr().out)[0]
    assert float(row["F-score"]) == 1.0 and float(row["Acc"]) == 0.0


def test_eval2d_directory_and_file(recon_dir, synth_dataset, tmp_path, capsys):
    gt_dir = tmp_path / "gt"
    gt_dir.mkdir()
    for i in range(9):
        src = fileio.frame_paths(synth_dataset, i)["depth"]
        (gt_dir / f"{i:06d}.depth.bin").write_bytes(src.read_bytes())
    out = tmp_path / "m.csv"
    assert cli.main(["eval2d", str(recon_dir / "depth"), str(gt_dir), "--out", str(out)]) == 0
    rows = _csv(out.read_text())
    assert len(rows) == 10 and rows[-1]["name"] == "mean"
    one = str(gt_dir / "000000.depth.bin")
    assert cli.main(["eval2d", one, one]) == 0
    row = _csv(capsys.readouterr().out)[0]
    assert float(row["Abs-rel"]) == 0.0 and float(row["Comp"]) == 1.0


def test_stats_command(recon_dir, capsys):
    assert cli.main(["stats", str(recon_dir / "level0.svol"), str(recon_dir / "level2.svol")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "file,level,voxel_size,allocated_count,bytes_estimate"
    assert lines[1].startswith("level0.svol,0,0.16,") and lines[2].startswith("level2.svol,2,0.04,")


def test_usage_errors_exit_2(tmp_path, capsys):
    assert cli.main(["synth", str(tmp_path / "x"), "--s", "-1"]) == 2
    assert "usage error" in capsys.readouterr().err
    assert cli.main(["recon", str(tmp_path), str(tmp_path / "o"), "--weights", str(tmp_path / "none.npz")]) == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["recon"])
    assert exc.value.code == 2


def test_runtime_errors_exit_1(tmp_path, capsys):
    assert cli.main(["recon", str(tmp_path / "missing"), str(tmp_path / "o")]) == 1
    bad = tmp_path / "bad.ply"
    bad.write_text("not a mesh\n")
    assert cli.main(["eval3d", str(bad), str(bad)]) == 1
    assert cli.main(["stats", str(bad)]) == 1
    assert "error" in capsys.readouterr().err


def test_oracle_features_need_scene(synth_dataset, tmp_path):
    ds = tmp_path / "ds"
    ds.mkdir()
    for p in synth_dataset.iterdir():
        if p.name != "scene.txt":
            (ds / p.name).write_bytes(p.read_bytes())
    assert cli.main(["recon", str(ds), str(tmp_path / "o"), "--features", "oracle"]) == 2


def test_selftest_passes(capsys):
    assert cli.main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") == 6


def test_recon_depth_files_match_mesh_render(recon_dir, synth_dataset):
    from sparsefusion.meshing import import_mesh
    from sparsefusion.metrics import render_depth

    kf, _ = fileio.load_frame(synth_dataset, 4)
    got = fileio.read_depth_map(recon_dir / "depth" / "000004.depth.bin")
    want = render_depth(import_mesh(recon_dir / "mesh.ply"), kf, 3.0)
    assert np.array_equal(got, want.astype(np.float32))
