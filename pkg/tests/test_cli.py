import csv

import pytest

from evitrack.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "slow.toml"
    cfg.write_text(
        "[world_model]\nv0 = 0.002\n\n"
        "[evaluation]\nM = 5\nseeds = [0]\n\n"
        f"[output]\ndir = \"{root / 'out'}\"\n"
    )
    assert main(["-c", str(cfg), "gen-data", "--per-bin", "1"]) == 0
    return root, cfg


def test_gen_data_writes_and_refuses_overwrite(workspace, capsys):
    root, cfg = workspace
    ds = root / "out" / "dataset"
    with open(ds / "manifest.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert sorted(r["bin"] for r in rows) == ["early", "late", "mid"]
    assert main(["-c", str(cfg), "gen-data", "--per-bin", "1"]) == 1
    assert "--force" in capsys.readouterr().err
    before = (ds / "manifest.csv").read_text()
    assert main(["-c", str(cfg), "gen-data", "--per-bin", "1", "--force"]) == 0
    assert (ds / "manifest.csv").read_text() == before


def test_run_main_single_seed(workspace):
    root, cfg = workspace
    assert main(["-c", str(cfg), "run", "--experiment", "main", "--seeds", "0", "--jobs", "1"]) == 0
    with open(root / "out" / "main" / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["method"] for r in rows} == {"evitrack-J_K32_C2_Ginf", "sis_N64", "bpf_N64"}
    assert all(float(r["pre_std"]) == 0.0 and float(r["post_std"]) == 0.0 for r in rows)
    first = (root / "out" / "main" / "summary.csv").read_text()
    assert main(["-c", str(cfg), "run", "--experiment", "main", "--seeds", "0", "--jobs", "1"]) == 0
    assert (root / "out" / "main" / "summary.csv").read_text() == first
    assert main(["-c", str(cfg), "summarize", str(root / "out" / "main")]) == 0
    assert (root / "out" / "main" / "summary.csv").read_text() == first


def test_run_without_dataset(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text(f"[output]\ndir = \"{tmp_path / 'none'}\"\n")
    assert main(["-c", str(cfg), "run", "--experiment", "main"]) == 2


def test_bad_experiment_is_validation_error(workspace):
    _, cfg = workspace
    with pytest.raises(SystemExit) as info:
        main(["-c", str(cfg), "run", "--experiment", "bogus"])
    assert info.value.code == 1


def test_verify_single_family(capsys):
    assert main(["verify", "--check", "sis-equivalence"]) == 0
    out = capsys.readouterr().out
    assert "sis-equivalence" in out and "PASS" in out and "kalman" not in out


def test_verify_rejects_bad_sigma_bg(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[scoring]\nsigma_bg = 0.0\n")
    assert main(["-c", str(cfg), "verify"]) == 1
    assert "sigma_bg" in capsys.readouterr().err


def test_unreadable_config(tmp_path):
    assert main(["-c", str(tmp_path / "missing.toml"), "verify"]) == 1
    broken = tmp_path / "broken.toml"
    broken.write_text("[world_model\n")
    assert main(["-c", str(broken), "verify"]) == 1
