import json

import numpy as np
import pytest

from csicodec.channel import read_dataset
from csicodec.cli import config_hash, load_users, main

CONFIG = """
[scene]
n_subcarriers = 8
n_users = 2
n_shared_paths = 2
n_local_paths_per_user = 2

[array]
n_antennas = 4

[data]
n_scenes = 12
seed = 3

[codec]
base_channels = 3
kernel_sizes = [3, 3, 3]
down_factors = [2, 2, 1]
n_residual_blocks = 1
fusion_positions = [0]

[train]
steps = 3
batch_size = 4
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.toml"
    cfg.write_text(CONFIG)
    assert main(["--config", str(cfg), "gen-data", "--out", str(root / "data")]) == 0
    main(["--config", str(cfg), "train", "--data", str(root / "data"), "--out", str(root / "single")])
    return root, cfg


class TestPipeline:
    def test_gen_data(self, workspace):
        root, _ = workspace
        h = load_users(root / "data")
        assert h.shape == (2, 12, 8, 4)
        assert read_dataset(root / "data" / "user0.csi").positions.shape == (12, 2)

    def test_gen_data_deterministic(self, workspace, tmp_path):
        root, cfg = workspace
        main(["--config", str(cfg), "gen-data", "--out", str(tmp_path)])
        assert (tmp_path / "user1.csi").read_bytes() == (root / "data" / "user1.csi").read_bytes()

    def test_manifest(self, workspace):
        root, _ = workspace
        m = json.loads((root / "single" / "manifest.json").read_text())
        assert m["command"] == "train" and m["seed"] == 0 and len(m["config_hash"]) == 16
        assert m["config_hash"] == config_hash(m["config"])

    def test_encode_decode_matches_reconstruction(self, workspace, capsys):
        root, cfg = workspace
        ckpt = str(root / "single" / "model.ckpt")
        data = str(root / "data" / "user0.csi")
        main(["encode", "--checkpoint", ckpt, "--data", data, "--out", str(root / "s.bin")])
        main(["decode", "--checkpoint", ckpt, "--streams", str(root / "s.bin"), "--out", str(root / "rec.csi")])
        from csicodec.checkpoint import load_checkpoint

        model = load_checkpoint(ckpt)
        h = read_dataset(data).matrices.astype(np.complex128)
        rec = read_dataset(root / "rec.csi").matrices
        np.testing.assert_array_equal(rec, model.reconstruct(h).astype(np.complex64))

    def test_fine_tune_and_evaluate(self, workspace, capsys):
        root, cfg = workspace
        main(["--config", str(cfg), "fine-tune", "--data", str(root / "data"),
              "--checkpoint", str(root / "single" / "model.ckpt"), "--out", str(root / "joint")])
        capsys.readouterr()
        main(["evaluate", "--checkpoint", str(root / "joint" / "model.ckpt"), "--data", str(root / "data"),
              "--limit", "3"])
        result = json.loads(capsys.readouterr().out)
        assert result["n_samples"] == 3 and len(result["per_user"]) == 2

    def test_sweep_and_plot(self, workspace):
        root, cfg = workspace
        out = root / "sweep"
        main(["--config", str(cfg), "rd-sweep", "--data", str(root / "data"), "--lambdas", "2", "1",
              "--out", str(out)])
        lines = (out / "results.csv").read_text().splitlines()
        assert len(lines) == 3 and lines[1].split(",")[2] == "1"
        main(["plot", str(out / "results.csv"), "--out", str(root / "merged")])
        assert (root / "merged.svg").read_text().count("<circle") == 2

    def test_cluster(self, tmp_path, capsys):
        p = tmp_path / "pos.csv"
        p.write_text("0,0\n0.3,0\n5,5\n")
        main(["cluster", "--positions", str(p)])
        assert json.loads(capsys.readouterr().out)[0]["members"] == [0, 1]


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[train]\nstepz = 3\n")
    with pytest.raises(SystemExit, match="stepz"):
        main(["--config", str(cfg), "train", "--data", str(tmp_path), "--out", str(tmp_path / "o")])


def test_unknown_table(tmp_path):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[trian]\nsteps = 3\n")
    with pytest.raises(SystemExit, match="trian"):
        main(["--config", str(cfg), "plot", "x.csv", "--out", str(tmp_path / "o")])


def test_overrides_and_aliases(workspace, tmp_path):
    root, cfg = workspace
    out = tmp_path / "run"
    main(["--config", str(cfg), "train", "--data", str(root / "data" / "user1.csi"), "--lambda", "3",
          "--steps", "2", "--out", str(out), "--report", str(tmp_path / "rep.json")])
    report = json.loads((tmp_path / "rep.json").read_text())
    assert report["config"]["lam"] == 3.0 and len(report["steps"]) == 2
    main(["encode", "--model", str(out / "model.ckpt"), "--in", str(root / "data" / "user1.csi"),
          "--out", str(tmp_path / "s.bin")])
    assert (tmp_path / "s.bin").read_bytes()[:4] == b"DCMS"


def test_scene_flag_and_comma_lambdas(workspace, tmp_path):
    root, cfg = workspace
    main(["gen-data", "--scene", str(cfg), "--out", str(tmp_path / "d"), "--n-scenes", "10"])
    assert load_users(tmp_path / "d").shape == (2, 10, 8, 4)
    main(["--config", str(cfg), "rd-sweep", "--data", str(tmp_path / "d"), "--lambdas", "1,3", "--steps", "1",
          "--out", str(tmp_path / "sw")])
    assert len((tmp_path / "sw" / "results.csv").read_text().splitlines()) == 3
