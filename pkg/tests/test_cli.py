import json

import numpy as np
import pytest

from berrymass.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main
from berrymass.core import RasterMask, load_manifest, load_mask, save_mask, save_pointcloud
from berrymass.massreg import CalibrationSample, save_calibration_csv
from berrymass.synth import FruitShapeParams, ScenePose, generate_cloud

from oracles import reference_cubic

SCENE = {"shape": {"L": 0.04, "R": 0.015, "p": 1.0}, "pose": {"tilt_deg": 0.0, "center": [0.0, 0.0, 0.5]}}


def run(capsys, *argv):
    rc = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return rc, out


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return path


# ---------------------------------------------------------------- synth

def test_synth_tilt_zero_sidecar(tmp_path, capsys):
    rc, out = run(capsys, "synth", write_json(tmp_path / "s.json", SCENE), "--output", tmp_path / "o")
    assert rc == EXIT_OK
    assert json.loads(out)["instances"] == ["fruit000"]
    truth = json.loads((tmp_path / "o" / "fruit000_truth.json").read_text())
    assert truth["angle_deg"] == 0.0
    assert truth["volume_cm3"] == pytest.approx(14.1372, abs=1e-4)
    for suffix in ("_mask.pgm", "_depth.pgm", "_cloud.txt", "_truth.pgm"):
        assert (tmp_path / "o" / f"fruit000{suffix}").exists()
    assert load_manifest(tmp_path / "o" / "manifest.json").instances[0].occlusion_label.value == "isolated"


def test_synth_is_deterministic(tmp_path, capsys):
    for d in ("a", "b"):
        assert run(capsys, "synth", "--random", 3, "--occluded-fraction", 0.5, "--seed", 7,
                   "--output", tmp_path / d)[0] == EXIT_OK
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_occluded_scene_is_marked(tmp_path, capsys):
    scene = SCENE | {"occlusion": {"kind": "ellipse", "coverage": 0.25, "seed": 4}}
    assert run(capsys, "synth", write_json(tmp_path / "s.json", scene), "--output", tmp_path / "o")[0] == EXIT_OK
    e = load_manifest(tmp_path / "o" / "manifest.json").instances[0]
    assert e.occlusion_label.value == "occluded"
    visible, truth = load_mask(e.mask_path), load_mask(e.truth_mask_path)
    hidden = 1 - visible.fruit.sum() / truth.fruit.sum()
    assert hidden == pytest.approx(0.25, abs=0.02)


def test_synth_scene_list(tmp_path, capsys):
    doc = {"scenes": [SCENE | {"id": "a"}, SCENE | {"id": "b", "pose": {"tilt_deg": 20.0}}]}
    rc, out = run(capsys, "synth", write_json(tmp_path / "s.json", doc), "--output", tmp_path / "o")
    assert rc == EXIT_OK and json.loads(out)["instances"] == ["a", "b"]
    assert (tmp_path / "o" / "calibration.csv").read_text().startswith("area_cm2,volume_cm3")


@pytest.mark.parametrize("scene", [{"pose": {}}, {"shape": {"L": -1, "R": 0.01}}, {"shape": {"L": 0.04}},
                                   SCENE | {"occlusion": {"kind": "cloud", "coverage": 0.2}}])
def test_synth_invalid_scene(tmp_path, capsys, scene):
    rc, _ = run(capsys, "synth", write_json(tmp_path / "s.json", scene), "--output", tmp_path / "o")
    assert rc == EXIT_USAGE


def test_synth_empty_scene_list(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["synth", str(write_json(tmp_path / "s.json", [])), "--output", str(tmp_path / "o")])
    assert e.value.code == EXIT_USAGE


def test_synth_needs_output(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["synth", "--random", "1"])
    assert e.value.code == EXIT_USAGE


# ---------------------------------------------------------------- calibrate

def test_calibrate_reference_csv(tmp_path, capsys):
    a = np.linspace(5, 40, 50)
    save_calibration_csv([CalibrationSample(float(x), reference_cubic(float(x))) for x in a], tmp_path / "c.csv")
    rc, out = run(capsys, "calibrate", tmp_path / "c.csv", "--output", tmp_path / "m.json")
    assert rc == EXIT_OK
    doc = json.loads(out)
    assert doc["r_squared"] >= 0.999999 and doc["n"] == 50 and doc["degree"] == 3
    model = json.loads((tmp_path / "m.json").read_text())
    assert set(model) >= {"degree", "coefficients", "r_squared", "residual_variance", "domain"}


def test_calibrate_underdetermined(tmp_path, capsys):
    save_calibration_csv([CalibrationSample(1.0, 2.0), CalibrationSample(2.0, 3.0)], tmp_path / "c.csv")
    assert run(capsys, "calibrate", tmp_path / "c.csv", "--degree", 3)[0] == EXIT_FAIL


def test_calibrate_linear(tmp_path, capsys):
    save_calibration_csv([CalibrationSample(a, 3 * a + 2) for a in (1.0, 2.0, 4.0, 8.0)], tmp_path / "c.csv")
    rc, out = run(capsys, "calibrate", tmp_path / "c.csv", "--degree", 1)
    assert rc == EXIT_OK and json.loads(out)["r_squared"] == pytest.approx(1.0, abs=1e-12)


def test_calibrate_missing_file(tmp_path, capsys):
    assert run(capsys, "calibrate", tmp_path / "nope.csv")[0] == EXIT_USAGE


# ---------------------------------------------------------------- estimate / evaluate

@pytest.fixture(scope="module")
def fixtures(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--random", "4", "--occluded-fraction", "0.5", "--seed", "3", "--output", str(out)]) == 0
    assert main(["calibrate", str(out / "calibration.csv"), "--output", str(out / "model.json")]) == 0
    return out


def test_estimate_and_evaluate(fixtures, tmp_path, capsys):
    capsys.readouterr()
    res = tmp_path / "r.json"
    assert run(capsys, "estimate", fixtures / "manifest.json", "--model", fixtures / "model.json",
               "--output", res)[0] == EXIT_OK
    doc = json.loads(res.read_text())
    assert len(doc["records"]) == 4 and all(r["status"] == "ok" for r in doc["records"])
    rc, out = run(capsys, "evaluate", fixtures / "manifest.json", res)
    assert rc == EXIT_OK
    rep = json.loads(out)
    assert rep["stats"]["all"]["mass"]["n"] == 4


def test_estimate_worker_count_is_invisible(fixtures, tmp_path, capsys):
    outs = []
    for w in (1, 4):
        p = tmp_path / f"r{w}.json"
        assert run(capsys, "estimate", fixtures / "manifest.json", "--workers", w, "--seed", 5, "--output", p)[0] == 0
        outs.append(p.read_bytes())
    assert outs[0] == outs[1]


def test_estimate_config_seed_flag_wins(fixtures, tmp_path, capsys):
    write_json(tmp_path / "c.json", {"seed": 1})
    run(capsys, "estimate", fixtures / "manifest.json", "--config", tmp_path / "c.json", "--seed", 9,
        "--output", tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text())["config"]["seed"] == 9


def test_estimate_all_failed(fixtures, tmp_path, capsys):
    doc = json.loads((fixtures / "manifest.json").read_text())
    for e in doc["instances"]:
        e["depth"] = str(tmp_path / "missing.pgm")
        e["mask"] = str(fixtures / e["mask"])
    write_json(tmp_path / "m.json", doc)
    assert run(capsys, "estimate", tmp_path / "m.json")[0] == EXIT_FAIL


def test_estimate_bad_workers(fixtures):
    with pytest.raises(SystemExit) as e:
        main(["estimate", str(fixtures / "manifest.json"), "--workers", "0"])
    assert e.value.code == EXIT_USAGE


def test_estimate_bad_manifest(tmp_path, capsys):
    (tmp_path / "m.json").write_text("[")
    assert run(capsys, "estimate", tmp_path / "m.json")[0] == EXIT_USAGE


def _table_fixture(tmp_path, area_err, vol_err, mass_err):
    # two occluded fruits deviating by +-e on each quantity average exactly e
    truth = {"area_cm2": 10.0, "angle_deg": 20.0, "volume_cm3": 20.0, "mass_g": 19.0}
    inst, recs = [], []
    for i, sign in enumerate((1, -1)):
        fid = f"f{i}"
        inst.append({"id": fid, "mask": f"{fid}.pgm", "depth": f"{fid}_d.pgm", "occlusion_label": "occluded",
                     "ground_truth": truth})
        recs.append({"id": fid, "occlusion_label": "occluded", "status": "ok",
                     "area_cm2": 10.0 * (1 + sign * area_err / 100), "theta_deg": 20.0,
                     "volume_cm3": 20.0 * (1 + sign * vol_err / 100), "mass_g": 19.0 * (1 + sign * mass_err / 100)})
    k = {"fx": 600, "fy": 600, "cx": 320, "cy": 240, "width": 640, "height": 480}
    write_json(tmp_path / "m.json", {"intrinsics": k, "instances": inst})
    write_json(tmp_path / "r.json", {"records": recs})


def test_evaluate_reproduces_occluded_table_row(tmp_path, capsys):
    _table_fixture(tmp_path, 6.38, 10.07, 10.47)
    rc, _ = run(capsys, "evaluate", tmp_path / "m.json", tmp_path / "r.json", "--output", tmp_path / "rep.json")
    assert rc == EXIT_OK
    occ = json.loads((tmp_path / "rep.json").read_text())["stats"]["occluded"]
    assert occ["area"]["mean_percent_error"] == pytest.approx(6.38, abs=0.01)
    assert occ["volume"]["mean_percent_error"] == pytest.approx(10.07, abs=0.01)
    assert occ["mass"]["mean_percent_error"] == pytest.approx(10.47, abs=0.01)
    assert occ["theta"]["mean_percent_error"] == 0.0


def test_evaluate_id_mismatch(tmp_path, capsys):
    _table_fixture(tmp_path, 1, 1, 1)
    write_json(tmp_path / "r.json", {"records": [{"id": "zz", "status": "ok"}]})
    assert run(capsys, "evaluate", tmp_path / "m.json", tmp_path / "r.json")[0] == EXIT_FAIL


def test_evaluate_empty_results(tmp_path, capsys):
    _table_fixture(tmp_path, 1, 1, 1)
    write_json(tmp_path / "r.json", {"records": []})
    assert run(capsys, "evaluate", tmp_path / "m.json", tmp_path / "r.json")[0] == EXIT_FAIL


# ---------------------------------------------------------------- pose / ganloss / metrics

def test_pose_command(tmp_path, capsys):
    cloud = generate_cloud(FruitShapeParams(0.04, 0.015, 1.0), ScenePose(30.0, (0, 0, 0.5)), seed=1)
    save_pointcloud(cloud, tmp_path / "c.txt")
    rc, out = run(capsys, "pose", tmp_path / "c.txt")
    assert rc == EXIT_OK
    doc = json.loads(out)
    assert {"theta_deg", "apex", "plane_normal", "rmse"} <= set(doc)
    assert doc["theta_deg"] == pytest.approx(30.0, abs=2.0)


def test_pose_too_few_points(tmp_path, capsys):
    (tmp_path / "c.txt").write_text("0.0 0.0 0.5 0\n" * 20)
    assert run(capsys, "pose", tmp_path / "c.txt")[0] == EXIT_FAIL


def test_ganloss_eval(tmp_path, capsys):
    doc = {"mapping": {"x": [[0.2, 0.4]], "y": [[0.5]], "fgx": [[0.3, 0.1]], "gfy": [[0.5]]},
           "adv_ab": {"d_real": [0.5], "d_fake": [0.5]}, "adv_ba": {"d_real": [0.5], "d_fake": [0.5]}}
    rc, out = run(capsys, "ganloss", "eval", write_json(tmp_path / "b.json", doc))
    assert rc == EXIT_OK
    res = json.loads(out)
    assert res["cycle_loss"] == pytest.approx(0.4)
    assert res["adversarial_ab"] == pytest.approx(-1.386294, abs=1e-6)


def test_metrics_command(tmp_path, capsys):
    a = np.zeros((10, 10), bool)
    b = np.zeros((10, 10), bool)
    a[0:5, 0:4] = True
    b[0:5, 2:6] = True
    save_mask(RasterMask.from_bool(a), tmp_path / "a.pgm")
    save_mask(RasterMask.from_bool(b), tmp_path / "b.pgm")
    rc, out = run(capsys, "metrics", tmp_path / "a.pgm", tmp_path / "b.pgm")
    assert rc == EXIT_OK
    assert json.loads(out) == {"par": 1.0, "iou": pytest.approx(1 / 3), "in_band": True}


def test_metrics_region_needs_visible(tmp_path, capsys):
    save_mask(RasterMask.from_bool(np.ones((4, 4), bool)), tmp_path / "a.pgm")
    assert run(capsys, "metrics", tmp_path / "a.pgm", tmp_path / "a.pgm", "--mode", "region")[0] == EXIT_USAGE


def test_unknown_command():
    with pytest.raises(SystemExit) as e:
        main(["bake"])
    assert e.value.code == EXIT_USAGE
