import csv
import json

import numpy as np
import pytest

from bhrelax import cli


def write_cfg(path, text):
    path.write_text(text)
    return str(path)


def run(tmp_path, command, text="", *extra):
    cfg = write_cfg(tmp_path / f"{command}.ini", text)
    out = tmp_path / "out"
    rc = cli.main([command, "--config", cfg, "--out", str(out), *extra])
    return rc, out


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_verify_fast_suites_deterministic(tmp_path):
    blobs = []
    for k in range(2):
        out = tmp_path / f"o{k}"
        rc = cli.main(["verify", "--suite", "tensor,moments,integrands", "--out", str(out), "--seed", "3"])
        assert rc == cli.EXIT_OK
        blobs.append(((out / "verify.json").read_bytes(), (out / "verify.csv").read_bytes()))
    assert blobs[0] == blobs[1]
    data = json.loads(blobs[0][0])
    assert data["passed"] and data["seed"] == 3
    assert set(data["suites"]) == {"tensor", "moments", "integrands"}


def test_verify_broken_kernel_fails(tmp_path):
    rc, out = run(tmp_path, "verify", "[verify]\nsuites = moments\nkernel = broken\n")
    assert rc == cli.EXIT_FAIL
    assert json.loads((out / "verify.json").read_text())["suites"]["moments"] is False


@pytest.mark.parametrize("text", [
    "[verify]\nsuites = nope\n",
    "[bogus]\nx = 1\n",
    "[run]\nmystery = 1\n",
    "[run]\nseed = abc\n",
])
def test_verify_usage_errors(tmp_path, text):
    rc, _ = run(tmp_path, "verify", text)
    assert rc == cli.EXIT_USAGE


def test_unknown_key_diagnostic_has_line(tmp_path, capsys):
    rc, _ = run(tmp_path, "verify", "[run]\nseed = 1\nmystery = 1\n")
    assert rc == cli.EXIT_USAGE
    assert "verify.ini:3" in capsys.readouterr().err


def test_bad_command_and_missing_config(tmp_path):
    assert cli.main(["frobnicate"]) == cli.EXIT_USAGE
    assert cli.main(["verify", "--config", str(tmp_path / "absent.ini")]) == cli.EXIT_USAGE


def test_relax_requires_field(tmp_path):
    rc, _ = run(tmp_path, "relax", "[integrand]\nname = area\n")
    assert rc == cli.EXIT_USAGE
    rc, _ = run(tmp_path, "relax", "[field]\nkind = spiral\n")
    assert rc == cli.EXIT_USAGE


def test_envelope_rejects_empty_grid(tmp_path):
    rc, _ = run(tmp_path, "envelope", "[envelope]\nh_points = 0\n")
    assert rc == cli.EXIT_USAGE


def test_envelope_area_is_its_own_envelope(tmp_path):
    rc, out = run(tmp_path, "envelope", "[integrand]\nname = area\n[envelope]\nh_points = 7\n")
    assert rc == cli.EXIT_OK
    rows = read_csv(out / "envelope.csv")
    assert len(rows) == 7
    for r in rows:
        assert float(r["envelope"]) == pytest.approx(float(r["f"]), abs=1e-12)
        assert float(r["envelope"]) == pytest.approx(np.sqrt(1 + float(r["h"]) ** 2), abs=1e-12)


def test_envelope_double_well_against_oracle(tmp_path):
    rc, out = run(tmp_path, "envelope", "[integrand]\nname = double-well\n[envelope]\nh_points = 5\n")
    assert rc == cli.EXIT_OK
    for r in read_csv(out / "envelope.csv"):
        # the sampled hull is exact up to one oracle grid step near the kinks
        assert float(r["oracle"]) == pytest.approx(max(abs(float(r["h"])) - 1.0, 0.0), abs=2e-3)
        assert float(r["rel_error"]) <= 0.02


def test_relax_kink_area(tmp_path):
    text = "[integrand]\nname = area\n[field]\nkind = kink\n[relax]\nexpected = 3\nupper = yes\n"
    rc, out = run(tmp_path, "relax", text)
    assert rc == cli.EXIT_OK
    data = json.loads((out / "relax.json").read_text())
    assert data["G"] == pytest.approx(3.0, abs=1e-6)


def test_relax_wrong_expectation_fails(tmp_path):
    text = "[integrand]\nname = area\n[field]\nkind = kink\n[relax]\nexpected = 4\n"
    rc, _ = run(tmp_path, "relax", text)
    assert rc == cli.EXIT_FAIL


def test_approx_single_row(tmp_path):
    text = "[integrand]\nname = area\n[field]\nkind = kink\n[schedules]\nn = 64\n"
    rc, out = run(tmp_path, "approx", text)
    assert rc == cli.EXIT_OK
    rows = read_csv(out / "approx.csv")
    assert len(rows) == 1


@pytest.mark.slow
def test_relax_double_well_sandwich(tmp_path):
    text = ("[integrand]\nname = double-well\n[field]\nkind = kink\n"
            "[relax]\nexpected = 2\nupper = yes\nlower = yes\n")
    rc, out = run(tmp_path, "relax", text)
    assert rc == cli.EXIT_OK
    data = json.loads((out / "relax.json").read_text())
    assert all(data["verdicts"].values())
    assert data["upper"]["F_sequence"][-1] <= data["G"] + 1e-9
