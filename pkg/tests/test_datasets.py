import json

import numpy as np
import pytest

from stableflow.datasets import (
    GoToTaskSpec,
    MorphingCycleSpec,
    ObstacleSceneSpec,
    Trajectory,
    TrajectoryDataset,
    gen_cycle_dataset,
    gen_goto_dataset,
    gen_obstacle_dataset,
    goto_target_map,
    read_dataset,
    write_dataset,
)
from stableflow.errors import DatasetFormatError, ValidationError


class TestCycleCurve:
    def test_zero_amplitude_is_circle(self):
        for c in (0.0, 0.5, 1.0):
            spec = MorphingCycleSpec(amplitude=0.0, context=c)
            theta = np.linspace(0, 2 * np.pi, 50)
            assert np.allclose(spec.radius(theta), spec.base_radius)

    def test_zero_context_is_circle(self):
        spec = MorphingCycleSpec(amplitude=0.3, lobes=5, context=0.0)
        theta = np.linspace(0, 2 * np.pi, 50)
        assert np.allclose(spec.radius(theta), 1.0)

    def test_star_peak_value(self):
        # oracle: sin(5 * pi/10) = 1 so r = base * 1.3
        spec = MorphingCycleSpec(amplitude=0.3, lobes=5, context=1.0)
        assert abs(spec.radius(np.pi / 10) - 1.3) < 1e-12

    def test_noiseless_samples_on_curve(self):
        spec = MorphingCycleSpec(context=0.7, noise=0.0)
        ds = gen_cycle_dataset([spec], n_traj=3, seed=5)
        for traj in ds.trajectories:
            r = np.linalg.norm(traj.states, axis=1)
            theta = np.arctan2(traj.states[:, 1], traj.states[:, 0])
            assert np.max(np.abs(r - spec.radius(theta))) < 1e-12

    def test_noise_residuals_match_scale(self):
        spec = MorphingCycleSpec(context=0.0, noise=0.05, revolutions=8.0)
        ds = gen_cycle_dataset([spec], n_traj=10, seed=2)
        res = []
        for traj in ds.trajectories:
            r = np.linalg.norm(traj.states, axis=1)
            res.extend(r - 1.0)
        res = np.asarray(res)
        n = res.size
        se = 0.05 / np.sqrt(2 * (n - 1))
        assert abs(res.std() - 0.05) < 3 * se * 2  # radial residual ~ noise scale

    def test_mixed_geometry_rejected(self):
        a = MorphingCycleSpec(context=0.0)
        b = MorphingCycleSpec(context=1.0, lobes=3)
        with pytest.raises(ValidationError):
            gen_cycle_dataset([a, b], n_traj=1, seed=0)

    def test_invariants(self):
        with pytest.raises(ValidationError):
            MorphingCycleSpec(amplitude=1.2, context=1.0)
        with pytest.raises(ValidationError):
            MorphingCycleSpec(samples_per_revolution=8)
        with pytest.raises(ValidationError):
            MorphingCycleSpec(lobes=1)


class TestObstacleScenes:
    def test_pure_attraction_monotone(self):
        spec = ObstacleSceneSpec(goal=np.array([1.0, 0.0]),
                                 obstacles=np.array([[5.0, 5.0], [6.0, 5.0], [5.0, 6.0]]))
        from stableflow.datasets import _run_expert
        path, reached, _ = _run_expert(spec, np.array([-1.0, 0.0]),
                                       np.random.default_rng(0), 0.02, 0.0)
        d = np.linalg.norm(path - spec.goal, axis=1)
        assert reached and np.all(np.diff(d) < 0)

    def test_start_at_goal_terminates_immediately(self):
        spec = ObstacleSceneSpec(goal=np.zeros(2),
                                 obstacles=np.array([[5.0, 5.0], [6.0, 5.0], [5.0, 6.0]]))
        from stableflow.datasets import _run_expert
        path, reached, _ = _run_expert(spec, np.array([0.001, 0.0]),
                                       np.random.default_rng(0), 0.02, 0.0)
        assert reached and len(path) == 2

    def test_generated_set_clears_obstacles(self):
        ds = gen_obstacle_dataset(n_scenes=20, seed=7)
        assert len(ds) == 20
        for traj in ds.trajectories:
            ctx = traj.contexts[0]
            obstacles = ctx[:6].reshape(3, 2)
            goal = ctx[6:]
            clear = min(np.min(np.linalg.norm(traj.states - ob, axis=1)) for ob in obstacles)
            assert clear >= 0.12 + 0.02
            assert np.linalg.norm(traj.states[-1] - goal) < 0.02 + 3 * 0.004 * 3

    def test_goal_inside_obstacle_rejected(self):
        with pytest.raises(ValidationError):
            ObstacleSceneSpec(goal=np.zeros(2),
                              obstacles=np.array([[0.05, 0.0], [5.0, 5.0], [6.0, 6.0]]))


class TestGoTo:
    def test_noise_free_reaches_target(self):
        spec = GoToTaskSpec(n_traj=3, n_steps=160, noise=0.0)
        ds = gen_goto_dataset(spec, seed=3)
        for traj in ds.trajectories:
            target = goto_target_map(traj.contexts[0])
            assert np.linalg.norm(traj.states[-1] - target) < 1e-3

    def test_same_context_differs_only_by_noise(self):
        spec = GoToTaskSpec(n_traj=1, n_steps=40, noise=0.01)
        a = gen_goto_dataset(spec, seed=9)
        b = gen_goto_dataset(spec, seed=9)
        assert np.array_equal(a.trajectories[0].states, b.trajectories[0].states)

    def test_desk_scale_timing(self):
        import time
        t0 = time.perf_counter()
        gen_goto_dataset(GoToTaskSpec(n_traj=220, n_steps=80), seed=0)
        assert time.perf_counter() - t0 < 10.0

    def test_target_map_fixed(self):
        c = np.array([0.1, -0.2, 0.3, 0.0, 0.5, -0.5])
        assert np.array_equal(goto_target_map(c), goto_target_map(c.copy()))


class TestDeterminism:
    @pytest.mark.parametrize("gen", [
        lambda s: gen_cycle_dataset([MorphingCycleSpec(context=0.5)], 3, s),
        lambda s: gen_obstacle_dataset(5, s),
        lambda s: gen_goto_dataset(GoToTaskSpec(n_traj=3, n_steps=20), s),
    ])
    def test_bitwise_identical(self, gen):
        a, b = gen(11), gen(11)
        for ta, tb in zip(a.trajectories, b.trajectories):
            assert np.array_equal(ta.states, tb.states)
            assert np.array_equal(ta.contexts, tb.contexts)


class TestFileFormat:
    def make(self):
        return gen_cycle_dataset([MorphingCycleSpec(context=0.3)], 2, seed=1)

    def test_roundtrip_bitwise(self, tmp_path):
        ds = self.make()
        path = tmp_path / "data.json"
        write_dataset(ds, path)
        back = read_dataset(path)
        assert back.dim_y == ds.dim_y and back.dim_c == ds.dim_c and back.dt == ds.dt
        for ta, tb in zip(ds.trajectories, back.trajectories):
            assert np.array_equal(ta.states, tb.states)
            assert np.array_equal(ta.contexts, tb.contexts)

    def test_mismatched_lengths_name_trajectory(self, tmp_path):
        ds = self.make()
        write_dataset(ds, tmp_path / "data.json")
        obj = json.loads((tmp_path / "data.json").read_text())
        obj["trajectories"][1]["contexts"] = obj["trajectories"][1]["contexts"][:-2]
        (tmp_path / "bad.json").write_text(json.dumps(obj))
        with pytest.raises(ValidationError) as exc:
            read_dataset(tmp_path / "bad.json")
        assert "1" in str(exc.value)

    def test_truncated_file_is_parse_error(self, tmp_path):
        ds = self.make()
        write_dataset(ds, tmp_path / "data.json")
        text = (tmp_path / "data.json").read_text()
        (tmp_path / "trunc.json").write_text(text[: len(text) // 2])
        with pytest.raises(DatasetFormatError):
            read_dataset(tmp_path / "trunc.json")

    def test_unknown_keys_rejected(self, tmp_path):
        ds = self.make()
        write_dataset(ds, tmp_path / "data.json")
        obj = json.loads((tmp_path / "data.json").read_text())
        obj["asdf"] = 1
        (tmp_path / "extra.json").write_text(json.dumps(obj))
        with pytest.raises(DatasetFormatError):
            read_dataset(tmp_path / "extra.json")

    def test_short_trajectory_rejected(self):
        with pytest.raises(ValidationError):
            TrajectoryDataset(dim_y=2, dim_c=0, dt=0.1, trajectories=[
                Trajectory(states=np.zeros((1, 2)), contexts=np.zeros((1, 0)))])
