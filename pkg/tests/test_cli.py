import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from stableflow.cli import main
from stableflow.datasets import read_dataset
from stableflow.policy import StablePolicyModel


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One tiny end-to-end CLI pipeline shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "cycle.json"
    assert main(["gen-data", "--task", "cycle", "--out", str(data), "--seed", "3",
                 "--n-traj", "2", "--revolutions", "1.0"]) == 0
    config = root / "config.json"
    config.write_text(json.dumps({
        "epochs": 3, "batch_size": 128, "learning_rate": 1e-3, "seed": 0,
        "test_fraction": 0.25, "include_initial_term": False, "patience": 50,
        "n_layers": 3, "hidden": [8, 8], "clamp": 3.0, "activation": "tanh",
        "latent": {"kind": "limit_cycle", "beta": 2.0, "omega": 1.0,
                   "r_star": 1.0, "sigma": 0.3}}))
    model = root / "model.json"
    assert main(["train", "--data", str(data), "--config", str(config),
                 "--out", str(model), "--seed", "0"]) == 0
    return {"root": root, "data": data, "config": config, "model": model}


class TestGenData:
    def test_deterministic_output(self, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        args = ["gen-data", "--task", "cycle", "--seed", "9", "--n-traj", "2",
                "--revolutions", "1.0"]
        assert main(args + ["--out", str(a)]) == 0
        assert main(args + ["--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()
        assert json.loads((tmp_path / "a.json.summary.json").read_text())["command"] == "gen-data"

    def test_obstacle_and_goto_tasks(self, tmp_path):
        out = tmp_path / "obs.json"
        assert main(["gen-data", "--task", "obstacle", "--out", str(out),
                     "--seed", "1", "--n-traj", "2", "--noise", "0.004"]) == 0
        ds = read_dataset(out)
        assert ds.dim_c == 8
        out2 = tmp_path / "goto.json"
        assert main(["gen-data", "--task", "goto", "--out", str(out2), "--seed", "1",
                     "--n-traj", "2", "--goto-steps", "20", "--noise", "0.005"]) == 0
        assert read_dataset(out2).dim_y == 7


class TestUsageErrors:
    def test_unknown_subcommand_exits_1(self):
        assert main(["frobnicate"]) == 1

    def test_missing_required_flag_exits_1(self):
        assert main(["gen-data", "--task", "cycle"]) == 1

    def test_missing_file_exits_2(self, tmp_path):
        assert main(["eval", "--model", str(tmp_path / "nope.json"),
                     "--data", str(tmp_path / "nope2.json"),
                     "--out", str(tmp_path / "out.json")]) == 2


class TestTrainEval:
    def test_train_smoke_single_trajectory(self, tmp_path, workdir):
        data = tmp_path / "one.json"
        assert main(["gen-data", "--task", "cycle", "--out", str(data), "--seed", "5",
                     "--n-traj", "1", "--contexts", "0.5", "--revolutions", "1.0"]) == 0
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({
            "epochs": 1, "n_layers": 2, "hidden": [4], "test_fraction": 0.25,
            "latent": {"kind": "limit_cycle", "beta": 2.0, "omega": 1.0,
                       "r_star": 1.0, "sigma": 0.3}}))
        out = tmp_path / "m.json"
        assert main(["train", "--data", str(data), "--config", str(config),
                     "--out", str(out)]) == 0
        assert out.exists()
        assert (tmp_path / "m.json.report.json").exists()
        assert (tmp_path / "m.json.report.csv").read_text().startswith("epoch,train_ll,test_ll")

    def test_eval_writes_per_trajectory(self, tmp_path, workdir):
        out = tmp_path / "eval.json"
        assert main(["eval", "--model", str(workdir["model"]),
                     "--data", str(workdir["data"]), "--out", str(out)]) == 0
        result = json.loads(out.read_text())
        assert len(result["per_trajectory"]) == 4

    def test_malformed_config_exits_2(self, tmp_path, workdir):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["train", "--data", str(workdir["data"]), "--config", str(bad),
                     "--out", str(tmp_path / "m.json")]) == 2


class TestRollout:
    def test_perturbation_lands_in_trace(self, tmp_path, workdir):
        out = tmp_path / "roll.json"
        assert main(["rollout", "--model", str(workdir["model"]),
                     "--start", "2.0,1.0", "--context", "0.5",
                     "--steps", "40", "--seed", "7",
                     "--perturb", "10:0.5,-0.25", "--out", str(out)]) == 0
        obj = json.loads(out.read_text())
        assert len(obj["states"]) == 41
        assert obj["perturbations"] == [[10, [0.5, -0.25]]]
        # re-run without the perturbation: states match until the bump index
        out2 = tmp_path / "roll2.json"
        assert main(["rollout", "--model", str(workdir["model"]),
                     "--start", "2.0,1.0", "--context", "0.5",
                     "--steps", "40", "--seed", "7", "--out", str(out2)]) == 0
        a = np.asarray(obj["states"])
        b = np.asarray(json.loads(out2.read_text())["states"])
        assert np.array_equal(a[:10], b[:10])
        assert np.allclose(a[10] - b[10], [0.5, -0.25])

    def test_context_dyn_parses(self, tmp_path, workdir):
        out = tmp_path / "roll3.json"
        assert main(["rollout", "--model", str(workdir["model"]),
                     "--start", "1.0,0.0", "--context-dyn", "0.5:2.0",
                     "--steps", "10", "--seed", "0", "--out", str(out)]) == 0
        obj = json.loads(out.read_text())
        assert abs(obj["contexts"][-1][0] - 0.5) < 0.5

    def test_bad_perturb_grammar_exits_2(self, tmp_path, workdir):
        assert main(["rollout", "--model", str(workdir["model"]),
                     "--start", "1.0,0.0", "--context", "0.5", "--steps", "5",
                     "--perturb", "oops", "--out", str(tmp_path / "r.json")]) == 2


class TestVerify:
    def test_identity_checkpoint_passes(self, tmp_path, workdir):
        # an untrained (identity-initialized) checkpoint is structurally stable
        data = read_dataset(workdir["data"])
        from stableflow.training import TrainConfig, build_model
        from stableflow.policy import Standardization
        cfg = TrainConfig(epochs=0, n_layers=3, hidden=(8, 8),
                          latent={"kind": "limit_cycle", "beta": 2.0, "omega": 1.0,
                                  "r_star": 1.0, "sigma": 0.3})
        model = build_model(cfg, data)
        path = tmp_path / "identity.json"
        model.save(path)
        out = tmp_path / "verify.json"
        code = main(["verify", "--model", str(path), "--n-starts", "50",
                     "--radius", "10.0", "--tol", "1e-2", "--out", str(out),
                     "--steps", "1500", "--gen-points", "20"])
        assert code == 0
        rep = json.loads(out.read_text())
        assert rep["pass"] is True
        assert rep["convergence_noise_free"]["fraction_converged"] == 1.0

    def test_corrupted_checkpoint_exits_3(self, tmp_path, workdir):
        obj = json.loads(workdir["model"].read_text())
        for layer in obj["flow"]["layers"]:
            for net in ("scale_net", "translate_net"):
                layer[net]["weights"] = [
                    [[1e6 for _ in row] for row in w] for w in layer[net]["weights"]]
        bad = tmp_path / "corrupt.json"
        bad.write_text(json.dumps(obj))
        out = tmp_path / "verify.json"
        assert main(["verify", "--model", str(bad), "--n-starts", "10",
                     "--radius", "5.0", "--tol", "1e-2", "--out", str(out),
                     "--steps", "100", "--gen-points", "5"]) == 3

    def test_trained_checkpoint_passes(self, tmp_path, workdir):
        out = tmp_path / "verify2.json"
        code = main(["verify", "--model", str(workdir["model"]), "--n-starts", "50",
                     "--radius", "10.0", "--tol", "1e-2", "--out", str(out),
                     "--steps", "1500", "--gen-points", "20"])
        assert code == 0


class TestPlot:
    def test_field_plot_deterministic_and_valid(self, tmp_path, workdir):
        a, b = tmp_path / "a.svg", tmp_path / "b.svg"
        args = ["plot", "--kind", "field", "--model", str(workdir["model"]),
                "--data", str(workdir["data"])]
        assert main(args + ["--out", str(a)]) == 0
        assert main(args + ["--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()
        root = ET.fromstring(a.read_text())
        assert root.tag.endswith("svg")
        polylines = [e for e in root.iter() if e.tag.endswith("polyline")]
        assert len([e for e in polylines if e.get("class") == "demo"]) == 4

    def test_grid_plot_identity_flow_straight_lines(self, tmp_path, workdir):
        from stableflow.training import TrainConfig, build_model
        data = read_dataset(workdir["data"])
        cfg = TrainConfig(epochs=0, n_layers=3, hidden=(8, 8),
                          latent={"kind": "limit_cycle", "beta": 2.0, "omega": 1.0,
                                  "r_star": 1.0, "sigma": 0.3})
        model = build_model(cfg, data)
        path = tmp_path / "identity.json"
        model.save(path)
        out = tmp_path / "grid.svg"
        assert main(["plot", "--kind", "grid", "--model", str(path),
                     "--out", str(out)]) == 0
        root = ET.fromstring(out.read_text())
        lines = [e for e in root.iter() if e.get("class") == "gridline"]
        assert len(lines) == 26  # 13 vertical + 13 horizontal
        # identity map: each polyline stays axis-aligned (constant x or y)
        for e in lines[:4]:
            pts = np.array([[float(v) for v in p.split(",")]
                            for p in e.get("points").split()])
            assert np.allclose(pts[:, 0], pts[0, 0]) or np.allclose(pts[:, 1], pts[0, 1])

    def test_grid_plot_obstacle_disks(self, tmp_path):
        data = tmp_path / "obs.json"
        assert main(["gen-data", "--task", "obstacle", "--out", str(data),
                     "--seed", "2", "--n-traj", "2"]) == 0
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({
            "epochs": 1, "n_layers": 2, "hidden": [4], "test_fraction": 0.25,
            "include_initial_term": False,
            "latent": {"kind": "attractor", "alpha": 2.0, "sigma": 0.2}}))
        model = tmp_path / "m.json"
        assert main(["train", "--data", str(data), "--config", str(config),
                     "--out", str(model)]) == 0
        out = tmp_path / "grid.svg"
        assert main(["plot", "--kind", "grid", "--model", str(model),
                     "--data", str(data), "--out", str(out)]) == 0
        root = ET.fromstring(out.read_text())
        circles = [e for e in root.iter() if e.get("class") == "obstacle"]
        assert len(circles) == 3

    def test_timeseries_plot_shades_perturbations(self, tmp_path, workdir):
        roll = tmp_path / "roll.json"
        assert main(["rollout", "--model", str(workdir["model"]),
                     "--start", "1.5,0.5", "--context", "0.5", "--steps", "30",
                     "--seed", "1", "--perturb", "12:1.0,0.0",
                     "--out", str(roll)]) == 0
        out = tmp_path / "ts.svg"
        assert main(["plot", "--kind", "timeseries", "--rollout", str(roll),
                     "--out", str(out)]) == 0
        root = ET.fromstring(out.read_text())
        shades = [e for e in root.iter() if e.get("class") == "perturbation"]
        assert len(shades) == 1
        series = [e for e in root.iter() if (e.get("class") or "").startswith("state-dim-")]
        assert len(series) == 2

    def test_spatial_plot_rejects_non_2d(self, tmp_path):
        data = tmp_path / "goto.json"
        assert main(["gen-data", "--task", "goto", "--out", str(data), "--seed", "1",
                     "--n-traj", "2", "--goto-steps", "15"]) == 0
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({
            "epochs": 0, "n_layers": 2, "hidden": [4], "test_fraction": 0.25,
            "latent": {"kind": "attractor", "alpha": 2.0, "sigma": 0.2}}))
        model = tmp_path / "m7.json"
        assert main(["train", "--data", str(data), "--config", str(config),
                     "--out", str(model)]) == 0
        assert main(["plot", "--kind", "field", "--model", str(model),
                     "--out", str(tmp_path / "x.svg")]) == 2

    def test_summary_json_schema(self, tmp_path, workdir):
        out = tmp_path / "grid2.svg"
        assert main(["plot", "--kind", "grid", "--model", str(workdir["model"]),
                     "--out", str(out)]) == 0
        summary = json.loads((tmp_path / "grid2.svg.summary.json").read_text())
        assert set(summary) >= {"command", "args", "inputs", "outputs"}
        assert summary["command"] == "plot"
        for digest in summary["inputs"].values():
            assert len(digest) == 64


class TestIdempotence:
    def test_inputs_not_mutated(self, tmp_path, workdir):
        before = workdir["data"].read_bytes()
        out = tmp_path / "eval.json"
        assert main(["eval", "--model", str(workdir["model"]),
                     "--data", str(workdir["data"]), "--out", str(out)]) == 0
        assert workdir["data"].read_bytes() == before

    def test_rollout_idempotent(self, tmp_path, workdir):
        args = ["rollout", "--model", str(workdir["model"]), "--start", "1.0,1.0",
                "--context", "0.5", "--steps", "15", "--seed", "3"]
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        assert main(args + ["--out", str(a)]) == 0
        assert main(args + ["--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()
