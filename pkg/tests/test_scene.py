import json

import numpy as np
import pytest

from tokentraj.errors import ParseError, UsageError, ValidationError
from tokentraj.scene import (
    SCENE_KINDS,
    AgentTrack,
    SceneSample,
    generate_scene,
    load_scenes,
    save_scenes,
    select_training_agents,
)


class TestGenerator:
    @pytest.mark.parametrize("kind", SCENE_KINDS)
    def test_valid_and_kinematically_consistent(self, kind):
        scene = generate_scene(kind, seed=11)
        scene.validate()
        for track in scene.agents:
            s = track.states
            dp = s[1:, :2] - s[:-1, :2]
            assert np.allclose(dp, s[:-1, 2:4] * scene.dt, atol=1e-6 * scene.dt)

    @pytest.mark.parametrize("kind", SCENE_KINDS)
    def test_headings_follow_velocity(self, kind):
        scene = generate_scene(kind, seed=3)
        for track in scene.agents:
            s = track.states
            speed = np.hypot(s[:, 2], s[:, 3])
            moving = speed > 0.1
            expected = np.arctan2(s[moving, 3], s[moving, 2])
            assert np.allclose(s[moving, 4], expected, atol=1e-3)

    def test_straight_constant_speed_displacement(self):
        scene = generate_scene("straight", seed=0)
        focal = scene.focal_agents()[0]
        dp = np.linalg.norm(np.diff(focal.states[:, :2], axis=0), axis=1)
        v = np.hypot(focal.states[0, 2], focal.states[0, 3])
        assert np.allclose(dp, v * scene.dt, atol=1e-9)

    def test_determinism(self):
        a = generate_scene("turn", seed=5)
        b = generate_scene("turn", seed=5)
        assert a == b
        c = generate_scene("turn", seed=6)
        assert a != c

    def test_cut_in_lateral_gap_closes(self):
        for seed in range(5):
            scene = generate_scene("cut_in", seed=seed)
            focal = scene.focal_agents()
            assert len(focal) == 2
            gap = np.abs(focal[0].states[:, 1] - focal[1].states[:, 1])
            assert gap[scene.t_obs :].min() < 2.0

    def test_unknown_kind_rejected(self):
        with pytest.raises(UsageError):
            generate_scene("zigzag", seed=0)

    def test_static_flag(self):
        scene = generate_scene("straight", seed=0)
        flags = {a.id: a.is_static for a in scene.agents}
        assert flags["veh-3"] is True
        assert flags["veh-0"] is False


class TestDatasetIO:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert load_scenes(path) == []

    def test_round_trip_identity(self, tmp_path):
        scenes = [generate_scene(SCENE_KINDS[i % 4], i) for i in range(100)]
        path = tmp_path / "scenes.jsonl"
        save_scenes(scenes, path)
        loaded = load_scenes(path)
        assert loaded == scenes
        assert [s.scene_id for s in loaded] == [s.scene_id for s in scenes]

    def test_malformed_line_reports_number(self, tmp_path):
        scenes = [generate_scene("straight", 0)]
        path = tmp_path / "bad.jsonl"
        save_scenes(scenes, path)
        with open(path, "a") as fh:
            fh.write("{not json\n")
        with pytest.raises(ParseError, match="line 2"):
            load_scenes(path)

    def test_invariant_violation_names_field(self, tmp_path):
        scene = generate_scene("straight", 0)
        obj = scene.to_json_obj()
        obj["t_obs"] = 0
        path = tmp_path / "invalid.jsonl"
        path.write_text(json.dumps(obj) + "\n")
        with pytest.raises(ValidationError, match="t_obs"):
            load_scenes(path)

    def test_byte_determinism(self, tmp_path):
        scenes = [generate_scene("cut_in", 4)]
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_scenes(scenes, p1)
        save_scenes(scenes, p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestValidation:
    def test_missing_focal_rejected(self):
        scene = generate_scene("straight", 0)
        for a in scene.agents:
            a.is_focal = False
        with pytest.raises(ValidationError, match="focal"):
            scene.validate()

    def test_short_polyline_rejected(self):
        scene = generate_scene("straight", 0)
        scene.map[0].points = scene.map[0].points[:1]
        with pytest.raises(ValidationError, match="polyline"):
            scene.validate()


class TestSelectTrainingAgents:
    def _scene_with_nonfocal(self, moving: int, static: int) -> SceneSample:
        steps = 50
        agents = []
        states = np.zeros((steps, 6))
        states[:, 0] = np.arange(steps) * 2.0
        states[:, 2] = 10.0
        states[:, 5] = 1.0
        agents.append(AgentTrack("focal", "vehicle", states.copy(), True))
        for i in range(moving):
            s = states.copy()
            s[:, 1] = 4.0 + i
            agents.append(AgentTrack(f"mv-{i}", "vehicle", s, False))
        for i in range(static):
            s = np.zeros((steps, 6))
            s[:, 0] = 30.0 + i
            s[:, 5] = 1.0
            agents.append(AgentTrack(f"st-{i}", "vehicle", s, False))
        return SceneSample("s", agents, [], dt=0.2, t_obs=10, t_future=40)

    def test_focal_only_scene(self):
        scene = self._scene_with_nonfocal(0, 0)
        assert select_training_agents(scene, 16) == ["focal"]

    def test_max_extra_zero(self):
        scene = self._scene_with_nonfocal(5, 0)
        assert select_training_agents(scene, 0) == ["focal"]

    def test_sampling_excludes_static(self):
        scene = self._scene_with_nonfocal(20, 5)
        picked = select_training_agents(scene, 16, seed=3)
        assert len(picked) == 17
        assert picked[0] == "focal"
        assert all(not name.startswith("st-") for name in picked)
        assert len(set(picked)) == len(picked)

    def test_deterministic_per_seed(self):
        scene = self._scene_with_nonfocal(20, 0)
        assert select_training_agents(scene, 8, seed=1) == select_training_agents(scene, 8, seed=1)
