import json
import subprocess
import sys

import pytest

from rsagg.cli import EXIT_INVALID, EXIT_OK, EXIT_TOLERANCE, EXIT_USAGE, main
from rsagg.config import SEED_ENV, Settings, default_seed, parse_values, read_config_file, resolve
from rsagg.errors import ParameterError

FAST = ["--ring-n", "64", "--dim", "16"]


# ------------------------------------------------------------ configuration


def test_config_file_with_and_without_sections(tmp_path):
    plain = tmp_path / "a.cfg"
    plain.write_text("clients = 5\nthreshold=3  # inline comment\np = 2^20\n")
    assert read_config_file(plain) == {"clients": "5", "threshold": "3", "p": "2^20"}
    sectioned = tmp_path / "b.cfg"
    sectioned.write_text("[ring]\nn = 2**6\n[run]\nrounds = 4\n")
    vals = parse_values(read_config_file(sectioned))
    assert vals == {"ring": {"n": 64}, "rounds": 4}


def test_unknown_and_bad_keys(tmp_path):
    with pytest.raises(ParameterError):
        parse_values({"colour": "blue"})
    with pytest.raises(ParameterError):
        parse_values({"clients": "many"})
    bad = tmp_path / "c.cfg"
    bad.write_text("[run\nx=1\n")
    with pytest.raises(ParameterError):
        read_config_file(bad)


def test_flags_override_file_and_env_seed(tmp_path, monkeypatch):
    f = tmp_path / "run.cfg"
    f.write_text("clients = 5\nthreshold = 3\nn = 64\n")
    monkeypatch.setenv(SEED_ENV, "17")
    s = resolve(str(f), {"threshold": 4, "n": None})
    assert (s.clients, s.threshold, s.seed, s.ring) == (5, 4, 17, {"n": 64})
    assert resolve(None, {"seed": 3}).seed == 3
    monkeypatch.setenv(SEED_ENV, "oops")
    with pytest.raises(ParameterError):
        default_seed()


def test_settings_presets():
    assert Settings(preset="toy").ring_params().n == 4
    with pytest.raises(ParameterError):
        Settings(preset="huge").ring_params()
    with pytest.raises(ParameterError):
        Settings(mode="xyz").run_config()


# ------------------------------------------------------------ commands


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_simulate_success_and_csv(capsys):
    code, out, err = run(["simulate", "--clients", "5", "--threshold", "3", "--rounds", "3", "--dropout", "0.3", *FAST], capsys)
    assert code == EXIT_OK
    lines = out.strip().splitlines()
    assert lines[0].startswith("round,status") and len(lines) == 4
    assert "wrong 0" in err


def test_simulate_same_seed_same_csv(capsys, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    argv = ["simulate", "--clients", "4", "--threshold", "2", "--rounds", "3", "--dropout", "0.4", "--seed", "8", *FAST]
    assert main(argv + ["--csv", str(a)]) == EXIT_OK
    assert main(argv + ["--csv", str(b)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()


def test_seed_env_changes_run(capsys, tmp_path, monkeypatch):
    argv = ["simulate", "--clients", "4", "--threshold", "2", "--rounds", "4", "--dropout", "0.5", *FAST]
    monkeypatch.setenv(SEED_ENV, "1")
    _, one, _ = run(argv, capsys)
    _, again, _ = run(argv, capsys)
    monkeypatch.setenv(SEED_ENV, "2")
    _, two, _ = run(argv, capsys)
    assert one == again and one != two


def test_too_many_aborts_is_tolerance_failure(capsys):
    argv = ["simulate", "--clients", "4", "--threshold", "4", "--rounds", "4", "--dropout", "0.5", *FAST]
    assert run(argv, capsys)[0] == EXIT_OK
    assert run(argv + ["--max-aborts", "0"], capsys)[0] == EXIT_TOLERANCE


def test_usage_errors(capsys):
    assert run(["simulate", "--bogus"], capsys)[0] == EXIT_USAGE
    assert run([], capsys)[0] == EXIT_USAGE
    assert run(["bench-compress", "--dim", "8", "--sketch", "9", "--p-entry", "0.2"], capsys)[0] == EXIT_USAGE
    assert run(["simulate", "--config", "/nonexistent/file.cfg"], capsys)[0] == EXIT_USAGE


def test_invalid_parameters(capsys):
    assert run(["simulate", "--clients", "3", "--threshold", "5", *FAST], capsys)[0] == EXIT_INVALID
    assert run(["validate", "--smudging-bound", str(2**60)], capsys)[0] == EXIT_INVALID
    assert run(["simulate", "--dropout", "1.5", *FAST], capsys)[0] == EXIT_INVALID


def test_validate_reports(capsys):
    code, out, _ = run(["validate"], capsys)
    assert code == EXIT_OK
    assert "n=8192" in out


def test_bench_compress(capsys):
    code, out, _ = run(["bench-compress", "--dim", "8", "--sketch", "4", "--p-entry", "0.25", "--samples", "500"], capsys)
    assert code == EXIT_OK
    assert out.count("PASS") == 5


def test_adduser(capsys):
    code, _, err = run(["adduser", "--clients", "4", "--threshold", "3", "--rounds", "2", "--point", "20", *FAST], capsys)
    assert code == EXIT_OK
    assert "x=20" in err and "joined" in err


def test_adduser_rejects_taken_point(capsys):
    # x = 2 belongs to client 1
    code, _, _ = run(["adduser", "--clients", "4", "--threshold", "3", "--point", "2", *FAST], capsys)
    assert code == EXIT_TOLERANCE


def test_train_writes_csv_and_json(capsys, tmp_path):
    js = tmp_path / "s.json"
    code, out, _ = run(
        ["train", "--clients", "4", "--threshold", "2", "--rounds", "5", "--dim", "30", "--samples-per-client", "40",
         "--ring-n", "64", "--json", str(js)],
        capsys,
    )
    assert code == EXIT_OK
    assert out.splitlines()[0] == "round,loss,acc,bytes_up,bytes_down,t_encrypt_ms,t_decrypt_ms,t_compress_ms"
    summary = json.loads(js.read_text())
    assert summary["rounds"] == 5 and summary["all_exact"] is True


def test_train_max_aborts(capsys):
    code, _, err = run(
        ["train", "--clients", "4", "--threshold", "4", "--rounds", "10", "--dim", "20", "--samples-per-client", "20",
         "--ring-n", "64", "--max-aborts", "0"],
        capsys,
    )
    assert code == EXIT_TOLERANCE and "halted" in err


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "rsagg.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "simulate" in proc.stdout
