"""End-to-end runs of the scenario command: exit codes, file emission,
config precedence, byte-level reproducibility."""
import json
import subprocess

import pytest

from hardyflux import cli

SMALL_INI = """\
[layout]
arm_length = 400
arm_separation = 800
speed = 1
packet_length = 100
wavenumber = 1

[run]
n = 40
seed = 4
"""


@pytest.fixture()
def small_ini(tmp_path):
    path = tmp_path / "small.ini"
    path.write_text(SMALL_INI)
    return str(path)


def run_cli(*args):
    return cli.main(list(args))


def test_modes_only_exit_zero(tmp_path):
    out = tmp_path / "m"
    assert run_cli("--scenario", "modes-only", "--out", str(out)) == 0
    data = json.loads((out / "modes.json").read_text())
    assert data["fixtures_ok"] is True
    assert data["survival"] == pytest.approx(0.75, abs=1e-15)
    assert [s["event"]["kind"] for s in data["stages"][1:]] == [
        "input_splitter", "input_splitter", "annihilate",
        "output_splitter", "output_splitter"]


def test_modes_only_none_and_dephase(tmp_path):
    assert run_cli("--scenario", "modes-only", "--mode", "none",
                   "--out", str(tmp_path / "a")) == 0
    assert run_cli("--scenario", "modes-only", "--mode", "dephase",
                   "--phi", "0.7", "--out", str(tmp_path / "b")) == 0
    data = json.loads((tmp_path / "b" / "modes.json").read_text())
    assert data["config"]["phi"] == 0.7
    assert sum(data["born"].values()) == pytest.approx(1.0, abs=1e-12)


def test_broken_fixture_exits_two(tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "REF_FINAL", {"A1,B1": 1.0})
    rc = run_cli("--scenario", "modes-only", "--out", str(tmp_path / "m"))
    assert rc == cli.EXIT_FIXTURE


def test_config_errors_exit_four(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[layout]\narm_length = 400\n")      # missing keys
    assert run_cli("--scenario", "fig1", "--config", str(bad),
                   "--out", str(tmp_path / "o")) == 4
    assert run_cli("--scenario", "fig1", "--config", str(tmp_path / "no.ini"),
                   "--out", str(tmp_path / "o")) == 4
    assert run_cli("--scenario", "fig1", "--v", "0.1",
                   "--out", str(tmp_path / "o")) == 4
    assert run_cli("--scenario", "scan", "--delta-l", "5.0",
                   "--out", str(tmp_path / "o")) == 4
    assert run_cli("--scenario", "fig1", "--n", "-2",
                   "--out", str(tmp_path / "o")) == 4
    assert run_cli("--scenario", "nope", "--out", str(tmp_path / "o")) == 4
    narrow = tmp_path / "narrow.ini"
    narrow.write_text(SMALL_INI.replace("wavenumber = 1",
                                        "wavenumber = 0.1"))
    assert run_cli("--scenario", "fig1", "--config", str(narrow),
                   "--out", str(tmp_path / "o")) == 4


def test_simulate_writes_files_and_passes(small_ini, tmp_path):
    out = tmp_path / "r"
    rc = run_cli("--scenario", "fig1", "--config", small_ini,
                 "--out", str(out))
    assert rc == 0
    stats = json.loads((out / "fig1_stats.json").read_text())
    assert stats["n_sampled"] == 40
    assert stats["seed"] == 4
    assert stats["config"]["layout"]["arm_length"] == 400.0
    csv = (out / "fig1_trajectories.csv").read_text().splitlines()
    assert csv[1] == "traj_id,t,x1,y1,x2,y2,status"
    svg = (out / "fig1_simulate.svg").read_text()
    assert svg.startswith("<?xml") and "config_hash=" in svg


def test_flag_overrides_config_file(small_ini, tmp_path):
    out = tmp_path / "r"
    rc = run_cli("--scenario", "fig1", "--config", small_ini, "--n", "10",
                 "--seed", "12", "--no-svg", "--out", str(out))
    assert rc == 0
    stats = json.loads((out / "fig1_stats.json").read_text())
    assert stats["config"]["n"] == 10
    assert stats["config"]["seed"] == 12
    assert not (out / "fig1_simulate.svg").exists()


def test_rerun_is_byte_identical(small_ini, tmp_path):
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    for out in (out1, out2):
        assert run_cli("--scenario", "fig1", "--config", small_ini,
                       "--out", str(out)) == 0
    for name in ("fig1_stats.json", "fig1_trajectories.csv",
                 "fig1_simulate.svg"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_zero_trajectories_exit_zero(small_ini, tmp_path):
    out = tmp_path / "r"
    rc = run_cli("--scenario", "fig1", "--config", small_ini, "--n", "0",
                 "--out", str(out))
    assert rc == 0
    stats = json.loads((out / "fig1_stats.json").read_text())
    assert stats["n_sampled"] == 0
    assert stats["output_fractions"] == {}
    csv = (out / "fig1_trajectories.csv").read_text().splitlines()
    assert len(csv) == 2


def test_run_options_without_layout_section(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[run]\nseed = 77\n")
    out = tmp_path / "m"
    assert run_cli("--scenario", "modes-only", "--config", str(ini),
                   "--out", str(out)) == 0
    data = json.loads((out / "modes.json").read_text())
    assert data["seed"] == 77
    # layout fell back to the scenario default
    assert data["config"]["layout"]["arm_length"] == 3200.0


def test_scan_and_frames_emit_files(tmp_path):
    out = tmp_path / "s"
    rc = run_cli("--scenario", "scan", "--n", "12", "--seed", "2",
                 "--jobs", "1", "--out", str(out))
    assert rc in (0, 3)        # endpoint check is statistical at tiny n
    data = json.loads((out / "scan.json").read_text())
    assert data["parameter"] == "delta_l"
    assert len(data["points"]) == 11
    assert data["points"][0]["value"] == -10 * 210.0
    assert (out / "scan.svg").exists()

    out = tmp_path / "f"
    rc = run_cli("--scenario", "frames", "--n", "12", "--seed", "2",
                 "--v", "-0.1", "0.1", "--out", str(out))
    assert rc in (0, 3)
    data = json.loads((out / "frames.json").read_text())
    assert data["parameter"] == "velocity"
    assert [p["value"] for p in data["points"]] == [-0.1, 0.1]


def test_console_entry_point(tmp_path):
    proc = subprocess.run(
        ["hardyflux", "--scenario", "modes-only", "--out", str(tmp_path)],
        capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "born table" in proc.stdout
