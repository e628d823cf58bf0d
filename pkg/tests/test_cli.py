import json
import subprocess
import sys

import numpy as np
import pytest

from rockgpt.cli import main
from rockgpt.io import VoxelVolume, read_rvox, write_rvox
from rockgpt.pipeline import stacked_length

CLASSES = [{"name": "fine", "sigma": 1.0, "count": 2, "shape": [16, 8, 8]},
           {"name": "coarse", "sigma": 2.0, "count": 2, "shape": [16, 8, 8]}]
VQ = {"channels": 8, "res_channels": 4, "n_res_blocks": 1, "attn_heads": 2, "K": 8, "D": 4}
GPT = {"n_blocks": 1, "d_model": 16, "n_heads": 2, "K": 8, "D": 4, "max_len": 32, "n_classes": 2,
       "slice_shape": [8, 8], "resnet_widths": [4, 4, 8, 8]}


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth", "--config", write(root / "synth.json", {"classes": CLASSES}), "--seed", "3",
                 "--out", str(data)]) == 0
    assert main(["train-vqvae", "--manifest", str(data / "manifest.json"), "--iters", "3", "--batch-size", "2",
                 "--config", write(root / "vq.json", {"model": VQ}), "--deterministic", "--out",
                 str(root / "s1")]) == 0
    assert main(["train-gpt", "--stage1", str(root / "s1" / "ckpt"), "--iters", "2", "--batch-size", "2",
                 "--config", write(root / "gpt.json", {"model": GPT}), "--deterministic", "--out",
                 str(root / "s2")]) == 0
    return root


def sample(root, out, *extra):
    return main(["sample", "--stage2", str(root / "s2" / "ckpt"), "--slice", str(root / "data" / "fine_0000.rvox"),
                 "--class", "1", "--porosity", "0.3", "--iters", "3", "--seed", "7", "--deterministic",
                 "--out", str(out), *extra])


def test_synth_outputs(runs):
    data = runs / "data"
    man = json.loads((data / "manifest.json").read_text())
    assert len(man["volumes"]) == 4 and man["seed"] == 3
    assert all((data / e["path"]).exists() for e in man["volumes"])
    echoed = json.loads((data / "run_config.json").read_text())
    assert echoed["seed"] == 3 and echoed["classes"] == CLASSES


def test_training_writes_both_checkpoints(runs):
    assert (runs / "s1" / "ckpt").exists() and (runs / "s2" / "ckpt").exists()
    echoed = json.loads((runs / "s2" / "run_config.json").read_text())
    assert echoed["manifest"].endswith("manifest.json") and echoed["iters"] == 2


def test_sample_length_and_echo(runs, tmp_path):
    assert sample(runs, tmp_path / "vol.rvox") == 0
    vol = read_rvox(tmp_path / "vol.rvox")
    assert vol.shape == (stacked_length(8, 3), 8, 8)
    seed_slice = read_rvox(runs / "data" / "fine_0000.rvox").data[0]
    assert np.array_equal(vol.data[0], seed_slice)
    cfg = json.loads((tmp_path / "vol.rvox.config.json").read_text())
    assert cfg["class"] == 1 and cfg["porosity"] == 0.3 and cfg["iters"] == 3


def test_sample_rerun_byte_identical(runs, tmp_path):
    assert sample(runs, tmp_path / "a.rvox") == 0
    assert sample(runs, tmp_path / "b.rvox") == 0
    assert (tmp_path / "a.rvox").read_bytes() == (tmp_path / "b.rvox").read_bytes()


def test_training_rerun_byte_identical(runs, tmp_path):
    argv = ["train-vqvae", "--manifest", str(runs / "data" / "manifest.json"), "--iters", "3", "--batch-size", "2",
            "--config", str(runs / "vq.json"), "--deterministic", "--out"]
    assert main(argv + [str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "ckpt").read_bytes() == (runs / "s1" / "ckpt").read_bytes()


def test_synth_rerun_byte_identical(runs, tmp_path):
    assert main(["synth", "--config", str(runs / "synth.json"), "--seed", "3", "--out", str(tmp_path)]) == 0
    for p in (runs / "data").iterdir():
        if p.name != "run_config.json":
            assert (tmp_path / p.name).read_bytes() == p.read_bytes()


def test_extract(runs, tmp_path):
    assert main(["extract", "--manifest", str(runs / "data" / "manifest.json"), "--out", str(tmp_path)]) == 0
    x = np.load(tmp_path / "sequences.npy")
    meta = json.loads((tmp_path / "sequences.json").read_text())
    assert x.shape == (4 * 3, 8, 8, 8) and meta["shape"] == list(x.shape)


def test_metrics_independent_of_threads(runs, tmp_path):
    vols = [str(runs / "data" / n) for n in ("fine_0000.rvox", "coarse_0001.rvox")]
    for t in ("1", "3"):
        assert main(["metrics", *vols, "--deterministic", "--threads", t, "--out", str(tmp_path / t)]) == 0
    for name in ("metrics.csv", "reports.json"):
        assert (tmp_path / "1" / name).read_bytes() == (tmp_path / "3" / name).read_bytes()
    rows = (tmp_path / "1" / "metrics.csv").read_text().splitlines()
    assert rows[0].startswith("id,phi,lambda_x") and len(rows) == 3


def test_perm_channel(tmp_path):
    v = np.ones((2, 12, 2), np.uint8)
    v[:, 0] = v[:, -1] = 0
    write_rvox(tmp_path / "ch.rvox", VoxelVolume(v))
    assert main(["perm", str(tmp_path / "ch.rvox"), "--g", "1e-6", "--tol", "1e-8", "--dump-velocity",
                 "--out", str(tmp_path / "p")]) == 0
    res = json.loads((tmp_path / "p" / "perm.json").read_text())
    assert res["status"] == "converged" and res["k_lattice"] > 0
    u = np.frombuffer((tmp_path / "p" / "velocity.bin").read_bytes(), "<f4").reshape(2, 12, 2, 3)
    assert u[..., 0].max() > 0 and np.all(u[:, 0] == 0)


def test_perm_unconverged_is_runtime_failure(tmp_path):
    write_rvox(tmp_path / "open.rvox", VoxelVolume(np.ones((3, 3, 3))))
    assert main(["perm", str(tmp_path / "open.rvox"), "--out", str(tmp_path)]) == 2
    assert main(["perm", str(tmp_path / "open.rvox"), "--allow-unconverged", "--out", str(tmp_path)]) == 0


def test_gradcheck_command(tmp_path):
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    records = json.loads((tmp_path / "gradcheck.json").read_text())
    assert all(r["passed"] for r in records)


def test_usage_errors_exit_1(tmp_path):
    assert main(["bogus"]) == 1
    assert main(["synth", "--nope"]) == 1
    assert main(["extract", "--out", str(tmp_path)]) == 1
    assert main(["synth", "--threads", "0", "--out", str(tmp_path)]) == 1
    bad = write(tmp_path / "bad.json", {"not_a_flag": 1})
    assert main(["synth", "--config", bad, "--out", str(tmp_path)]) == 1


def test_runtime_failure_exits_2(tmp_path):
    assert main(["extract", "--manifest", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 2


def test_help_exits_0():
    assert main(["--help"]) == 0
    assert main(["sample", "--help"]) == 0


def test_flags_override_config(tmp_path):
    cfg = write(tmp_path / "c.json", {"classes": [dict(CLASSES[0], count=1)], "seed": 1, "stride": 2})
    assert main(["synth", "--config", cfg, "--seed", "5", "--out", str(tmp_path / "o")]) == 0
    echoed = json.loads((tmp_path / "o" / "run_config.json").read_text())
    assert echoed["seed"] == 5 and echoed["stride"] == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "rockgpt", "perm", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "--dump-velocity" in proc.stdout
