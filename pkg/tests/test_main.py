import json
import os

import pytest
import yaml

from src.main import EXIT_DATA, EXIT_OK, EXIT_USAGE, build_overrides, load_camera, main, parse_arguments
from src.utils.exceptions import ConfigurationException


def run(argv) -> int:
    with pytest.raises(SystemExit) as exc:
        main(argv)
    return exc.value.code


def error_line(capsys) -> dict:
    lines = [line for line in capsys.readouterr().err.splitlines() if line.startswith("{")]
    return json.loads(lines[-1])


def test_parse_arguments():
    args = parse_arguments(["pair", "a", "b", "--lo", "0.2", "--hi", "0.9", "--count", "4"])
    assert (args.command, args.bundles, args.lo, args.hi, args.count) == ("pair", ["a", "b"], 0.2, 0.9, 4)
    args = parse_arguments(["lift", "scene", "--tau-c", "0.6", "--no-aggregate"])
    assert args.tau_c == 0.6 and args.no_aggregate and args.tau is None


@pytest.mark.parametrize("argv", [
    [],
    ["lift"],
    ["lift", "scene", "--tau-c", "1.5"],
    ["pair", "scene", "--lo", "0.8", "--hi", "0.3"],
    ["pair", "scene", "--lo", "0.9"],
    ["pair", "scene", "--hi", "0.2"],
    ["render", "scene", "--view", "0", "--target", "0"],
    ["metrics", "p", "g", "--mode", "sideways"],
])
def test_usage_errors(argv, capsys):
    assert run(argv) == EXIT_USAGE
    assert error_line(capsys)["error"] == "usage"


def test_pair_band_checked_against_configured_edge(monkeypatch, tmp_path, capsys):
    assert run(["pair", "scene", "--lo", "0.9"]) == EXIT_USAGE
    assert "below --hi 0.8" in error_line(capsys)["message"]
    monkeypatch.setenv("SIU3R_PAIRING__BAND_HI", "0.95")
    # the band is valid now, so the missing bundle is what fails
    assert run(["pair", str(tmp_path / "absent"), "--lo", "0.9"]) == EXIT_DATA
    assert error_line(capsys)["error"] == "manifest_parse"


def test_missing_bundle_is_a_data_error(tmp_path, capsys):
    assert run(["lift", str(tmp_path / "absent"), "--out", str(tmp_path / "out")]) == EXIT_DATA
    line = error_line(capsys)
    assert line["error"] == "manifest_parse"
    assert line["type"] == "BundleFormatException"


def test_missing_config_file_is_a_data_error(oracle_dir, tmp_path, capsys):
    assert run(["lift", oracle_dir, "--config", str(tmp_path / "absent.yaml")]) == EXIT_DATA
    assert error_line(capsys)["error"] == "configuration"


def test_lift_and_metrics(oracle_dir, tmp_path, capsys):
    out = str(tmp_path / "lift")
    assert run(["lift", oracle_dir, "--out", out, "--workers", "2"]) == EXIT_OK
    assert "LIFT SUMMARY" in capsys.readouterr().out
    lifted = os.path.join(out, "lifted")
    assert os.path.isdir(lifted)
    assert run(["metrics", lifted, oracle_dir, "--out", str(tmp_path / "eval"),
                "--require", "segmentation"]) == EXIT_OK


def test_render_with_camera_file(oracle, oracle_dir, tmp_path):
    path = tmp_path / "camera.yaml"
    path.write_text(yaml.safe_dump(oracle.cams[0].to_record()))
    out = str(tmp_path / "render")
    assert run(["render", oracle_dir, "--camera", str(path), "--size", "16", "16", "--out", out]) == EXIT_OK
    assert "camera_rgb.png" in os.listdir(out)


def test_load_camera_rejects_bad_records(tmp_path):
    path = tmp_path / "camera.yaml"
    path.write_text("fx: 1\nfy: 1\ncx: 1.5\ncy: 0.5\npose_c2w: [[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]]\n")
    with pytest.raises(ConfigurationException) as exc:
        load_camera(str(path))
    assert "principal point" in str(exc.value)
    path.write_text("fx: 1\n")
    with pytest.raises(ConfigurationException):
        load_camera(str(path))
    with pytest.raises(ConfigurationException):
        load_camera(str(tmp_path / "absent.yaml"))


def test_flags_override_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SIU3R_LIFTING__TAU", "0.4")
    monkeypatch.setenv("SIU3R_RASTER__WORKERS", "2")
    args = parse_arguments(["lift", "scene", "--tau", "0.25", "--env-dir", str(tmp_path)])
    values = build_overrides(args)
    assert values["lifting"]["tau"] == 0.25
    assert values["raster"]["workers"] == 2
