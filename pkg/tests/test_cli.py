import json
import subprocess
import sys

import numpy as np
import pytest

from lapkit.cli import ConfigError, config_hash, ladder, load_config, main, run
from lapkit.grid import GridSpec, radius
from lapkit.perturb import catalog_potential


def records(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def write(tmp_path, text, name="c.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_verify_exit_zero_and_manifest(tmp_path):
    assert main(["verify", "--out", str(tmp_path)]) == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    recs = records(tmp_path / "verify.jsonl")
    assert man["exit_status"] == 0 and man["failure"] is None
    assert [i["name"] for i in man["invariants"]] == [r["name"] for r in recs]
    assert all(i["passed"] for i in man["invariants"])
    assert man["defaults"].startswith("# lapkit defaults")
    assert {"lapkit", "numpy", "scipy", "python"} <= set(man["versions"])


def test_verify_reruns_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["verify", "--out", str(a)]) == 0
    assert main(["verify", "--out", str(b)]) == 0
    assert (a / "verify.jsonl").read_bytes() == (b / "verify.jsonl").read_bytes()


def test_every_record_carries_config_hash(tmp_path):
    cfg = write(tmp_path, '[grid]\nd = 2\nn = 32\nbox = 16.0\n[trace]\nlam_values = [1.0]\n')
    assert main(["trace", "--config", cfg, "--out", str(tmp_path)]) == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    recs = records(tmp_path / "trace.jsonl")
    assert len(recs) == 2
    assert all(r["config_hash"] == man["config_hash"] and r["kind"] == "trace" for r in recs)
    assert len(man["config_hash"]) == 16


def test_lap_sweep_record_count(tmp_path):
    cfg = write(tmp_path, "[lap-sweep]\ncomponents = false\n")
    assert main(["lap-sweep", "--config", cfg, "--out", str(tmp_path)]) == 0
    recs = records(tmp_path / "lap-sweep.jsonl")
    c = load_config("lap-sweep", "[lap-sweep]\ncomponents = false\n")
    assert len(recs) == c["lap-sweep"]["lam_count"] * len(ladder(c, "lap-sweep", "eps_ladder")) == 12
    assert sorted({r["lambda"] for r in recs}) == list(np.linspace(0.5, 2.0, 4))


def test_eps_ladder_with_zero_and_no_side_exits_2(tmp_path, capsys):
    cfg = write(tmp_path, "[lap-sweep]\neps_ladder = [0.1, 0.0]\n")
    assert main(["lap-sweep", "--config", cfg, "--out", str(tmp_path)]) == 2
    assert "lap-sweep.eps_ladder" in capsys.readouterr().err


@pytest.mark.parametrize("text,key", [
    ("[grid]\nspacing = 1\n", "grid.spacing"),
    ("[nonsense]\nx = 1\n", "nonsense"),
    ("[grid]\nn = \"many\"\n", "grid.n"),
    ("[grid]\nn = [1\n", "grid.n"),
    ("[trace]\nwidth = 1\n", "trace"),
    ("[potential]\nname = \"unknown\"\n", "potential"),
])
def test_config_errors_point_at_key(tmp_path, capsys, text, key):
    cfg = write(tmp_path, text)
    assert main(["kernel", "--config", cfg, "--out", str(tmp_path)]) == 2
    assert key in capsys.readouterr().err


def test_missing_config_file_exits_2(tmp_path):
    assert main(["kernel", "--config", str(tmp_path / "absent.ini")]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == 2


def test_numeric_contract_exits_3(tmp_path, capsys):
    cfg = write(tmp_path, '[potential]\nname = "square_well"\nparams = {"V0": 3.0}\n'
                          '[evolve]\nmethod = "lanczos"\ndt = 5.0\nt_values = [5.0]\n')
    assert main(["evolve", "--config", cfg, "--out", str(tmp_path)]) == 3
    assert "Krylov" in capsys.readouterr().err
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["failure"]["error"] == "EvolutionError" and man["failure"]["record"]["step"] == 0


def test_ladders():
    c = {"s": {"a": {"start": 1.0, "stop": 1e-3, "count": 4}, "b": [3, 1], "c": {"start": 1, "stop": -1, "count": 3},
               "d": {"start": 1, "count": 3}, "e": []}}
    assert np.allclose(ladder(c, "s", "a"), [1, 0.1, 0.01, 0.001])
    assert ladder(c, "s", "b") == [3.0, 1.0]
    for key in "cde":
        with pytest.raises(ConfigError) as exc:
            ladder(c, "s", key)
        assert exc.value.key == f"s.{key}"


def test_config_hash_ignores_run_section(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("kernel", "[grid]\nd = 3\n", a) == 0
    assert run("kernel", "[grid]\nd = 3\n[run]\nworkers = 2\n", b, workers=2) == 0
    ha = json.loads((a / "manifest.json").read_text())["config_hash"]
    hb = json.loads((b / "manifest.json").read_text())["config_hash"]
    assert ha == hb
    assert run("kernel", "[grid]\nd = 3\n", tmp_path / "c", seed=5) == 0
    assert json.loads((tmp_path / "c" / "manifest.json").read_text())["config_hash"] != ha
    assert config_hash({"x": 1, "y": 2}) == config_hash({"y": 2, "x": 1})


def test_kernel_records_match_closed_form(tmp_path):
    assert run("kernel", "", tmp_path) == 0
    recs = records(tmp_path / "kernel.jsonl")
    assert [r["z"] for r in recs[:3]] == [0.5, 1.0, 2.0]
    assert all(r["closed_form_error"] < 1e-9 for r in recs[:3])
    assert "bound_constants" in recs[-1]


def test_workers_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("LAPKIT_WORKERS", "3")
    assert run("kernel", "", tmp_path / "env") == 0
    assert json.loads((tmp_path / "env" / "manifest.json").read_text())["workers"] == 3
    assert main(["kernel", "--workers", "2", "--out", str(tmp_path / "flag")]) == 0
    assert json.loads((tmp_path / "flag" / "manifest.json").read_text())["workers"] == 2


def test_console_script(tmp_path):
    out = subprocess.run([sys.executable, "-m", "lapkit.cli", "verify", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert out.returncode == 0
    assert (tmp_path / "manifest.json").exists()


def test_catalog_examples():
    s = GridSpec(3, 32, 8.0)
    well = catalog_potential("square_well", s, {"V0": 3.0, "R": 1.0})
    v = well.multiplication
    assert v.min() == -3.0
    assert radius(s)[v != 0].max() <= 1.0 and well.support_radius() <= 1.0
    pl = catalog_potential("power_law", s, {"s": 2.0})
    assert pl.multiplication[s.origin_index] == 1.0
    vb = catalog_potential("vector_bump", s)
    assert vb.multiplication is None
    with pytest.raises(KeyError):
        catalog_potential("no_such_potential", s)
    with pytest.raises(ValueError):
        catalog_potential("square_well", s, {"depth": 1.0})


def test_potential_from_lapf1(tmp_path):
    from lapkit.grid import Field, save_field
    s = GridSpec(2, 16, 8.0)
    V = catalog_potential("square_well", s, {"V0": 2.0}).multiplication
    save_field(tmp_path / "v.lapf", Field(s, V))
    cfg = f'[grid]\nd = 2\nn = 16\nbox = 8.0\n[potential]\npath = "{tmp_path / "v.lapf"}"\n'
    assert run("admissible", cfg, tmp_path / "o") == 0
    bad = cfg.replace("n = 16", "n = 32")
    assert run("admissible", bad, tmp_path / "p") == 2
