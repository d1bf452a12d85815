import json
from pathlib import Path

import numpy as np
import pytest

from multiwell_plates.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

IDENTITY = "[1, 0, 0, 0, 1, 0, 0, 0, 1]"


def run(tmp_path, command, text=None, config=None):
    if text is not None:
        config = tmp_path / "cfg.yaml"
        config.write_text(text)
    out = tmp_path / "out"
    code = main([command, str(config), "--out", str(out)])
    return code, out


def load(out, name):
    return json.loads((out / name).read_text())


class TestExitCodes:
    def test_non_symmetric_well(self, tmp_path, capsys):
        code, _ = run(tmp_path, "qbar", f"model:\n  wells:\n    - {IDENTITY}\n    - [1, 1, 0, 0, 1, 0, 0, 0, 1]\n")
        assert code == EXIT_CONFIG
        assert "model.wells[1]" in capsys.readouterr().err

    def test_unknown_key_reports_line(self, tmp_path, capsys):
        code, _ = run(tmp_path, "qbar", f"model:\n  wells:\n    - {IDENTITY}\n  stiffness: 3\n")
        assert code == EXIT_CONFIG
        err = capsys.readouterr().err
        assert "line 4" in err and "model.stiffness" in err

    def test_duplicate_key(self, tmp_path, capsys):
        code, _ = run(tmp_path, "qbar", f"model:\n  wells:\n    - {IDENTITY}\nmodel:\n  p: 4\n")
        assert code == EXIT_CONFIG
        assert "duplicate" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert run(tmp_path, "qbar", config=tmp_path / "absent.yaml")[0] == EXIT_CONFIG

    def test_steep_profile_is_a_numerical_failure(self, tmp_path, capsys):
        text = (f"model:\n  wells:\n    - {IDENTITY}\ngrid:\n  nodes: [21, 21]\nregime:\n  alpha: 2\n"
                "state:\n  lift: {g: \"2*t\", direction: [1, 0]}\n  limit: 0\n")
        assert run(tmp_path, "converge", text)[0] == EXIT_NUMERIC
        assert "numerical failure" in capsys.readouterr().err


class TestCommands:
    def test_qbar_identity_well(self, tmp_path):
        code, out = run(tmp_path, "qbar", f"model:\n  wells:\n    - {IDENTITY}\n")
        assert code == EXIT_OK
        rec = load(out, "qbar.json")["wells"]
        sym = np.array([[1, 0, 0, 0], [0, 0.5, 0.5, 0], [0, 0.5, 0.5, 0], [0, 0, 0, 1]])
        assert len(rec) == 1
        assert np.allclose(rec[0]["coefficients"], 2 * sym, atol=1e-10)

    def test_qbar_two_wells(self, tmp_path):
        code, out = run(tmp_path, "qbar", config=CONFIGS / "twin_pair_shear.yaml")
        assert code == EXIT_OK
        data = load(out, "qbar.json")
        assert [r["well"] for r in data["wells"]] == [0, 1]
        assert all(r["coercivity"] > 0 for r in data["wells"])

    def test_converge_ground_state(self, tmp_path):
        text = (f"model:\n  wells:\n    - {IDENTITY}\ngrid:\n  nodes: [21, 21]\nregime:\n  alpha: 5\n"
                "state:\n  v: \"0\"\n  limit: 0\n")
        code, out = run(tmp_path, "converge", text)
        assert code == EXIT_OK
        data = load(out, "convergence.json")
        assert data["passed"] and data["elastic"] == [0.0] * 4 and data["gap"] == [0.0] * 4

    def test_rotations_thin_plate(self, tmp_path):
        code, out = run(tmp_path, "rotations", config=CONFIGS / "thin_load_h001.yaml")
        assert code == EXIT_OK
        data = load(out, "rotations.json")
        assert data["winners"] == [1]
        assert [w["dimension"] for w in data["wells"]] == [0, 0]

    def test_rotations_limit_load(self, tmp_path):
        code, out = run(tmp_path, "rotations", config=CONFIGS / "thin_load_limit.yaml")
        data = load(out, "rotations.json")
        assert code == EXIT_OK and data["winners"] == [0, 1]
        assert [w["dimension"] for w in data["wells"]] == [1, 1]

    def test_minimize_zero_load(self, tmp_path):
        text = f"model:\n  wells:\n    - {IDENTITY}\ngrid:\n  nodes: [11, 11]\nminimize:\n  r_grid: 2\n"
        code, out = run(tmp_path, "minimize", text)
        assert code == EXIT_OK
        assert load(out, "minimize.json")["best"]["value"] == 0.0
        rows = (out / "best_state.csv").read_text().splitlines()[1:]
        assert all(float(x) == 0.0 for r in rows for x in r.split(",")[2:])

    def test_minimize_bad_method(self, tmp_path):
        text = f"model:\n  wells:\n    - {IDENTITY}\nminimize:\n  method: newton\n"
        assert run(tmp_path, "minimize", text)[0] == EXIT_CONFIG

    def test_json_is_bit_stable(self, tmp_path):
        _, out = run(tmp_path, "rotations", config=CONFIGS / "twin_pair_shear.yaml")
        raw = (out / "rotations.json").read_text()
        data = json.loads(raw)
        assert json.loads(json.dumps(data)) == data
        assert data["best"] == pytest.approx(5 / 12, abs=1e-12)
        again = tmp_path / "again"
        main(["rotations", str(CONFIGS / "twin_pair_shear.yaml"), "--out", str(again)])
        assert (again / "rotations.json").read_text() == raw
