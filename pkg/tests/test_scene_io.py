import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tbakit import TRACKING_CLASSES
from tbakit.errors import FormatError
from tbakit.geometry import Box3D, PointCloud, Pose
from tbakit.scene_io import (
    Annotation,
    Frame,
    Scene,
    TrackedBox,
    TrackingResult,
    read_points,
    read_result,
    read_scene,
    scene_to_lines,
    write_points,
    write_result,
    write_scene,
)


def make_frame(i, anns=(), ts=None):
    return Frame(
        frame_id=f"f{i}",
        timestamp_us=500_000 * i if ts is None else ts,
        ego_pose=Pose.from_yaw(0.1 * i, (float(i), 0.5 * i, 0.0)),
        lidar_path=f"lidar/f{i}.bin",
        annotations=tuple(anns),
    )


def car(x, y=0.0):
    return Box3D((x, y, 0.8), (1.9, 4.5, 1.6), 0.3, (1.0, 0.0), "car")


class TestSceneDocument:
    def test_empty_annotations_round_trip(self, tmp_path):
        scene = Scene("s0", (make_frame(0),))
        write_scene(scene, tmp_path / "s0.scene.jsonl")
        assert read_scene(tmp_path / "s0.scene.jsonl") == scene

    def test_two_frame_track(self, tmp_path):
        scene = Scene(
            "s1",
            (make_frame(0, [Annotation("a", car(0.0), 10)]), make_frame(1, [Annotation("a", car(0.5), 12)])),
        )
        path = tmp_path / "s1.scene.jsonl"
        write_scene(scene, path)
        back = read_scene(path)
        assert back == scene
        assert [f.timestamp_us for f in back.frames] == [0, 500_000]
        assert back.frame_period_s() == 0.5

    def test_byte_stable(self, tmp_path):
        scene = Scene("s2", tuple(make_frame(i, [Annotation("a", car(0.1 * i), i)]) for i in range(4)))
        p1, p2 = tmp_path / "a.scene.jsonl", tmp_path / "b.scene.jsonl"
        write_scene(scene, p1)
        write_scene(read_scene(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_duplicate_frame_id_rejected(self):
        f = make_frame(0)
        g = Frame("f0", 1, f.ego_pose, "x.bin")
        with pytest.raises(FormatError, match="frame 1"):
            Scene("s", (f, g))

    def test_non_increasing_timestamps_rejected(self, tmp_path):
        scene_lines = scene_to_lines(Scene("s", (make_frame(0), make_frame(1))))
        bad = json.loads(scene_lines[2])
        bad["timestamp_us"] = 0
        path = tmp_path / "bad.scene.jsonl"
        path.write_text("\n".join([scene_lines[0], scene_lines[1], json.dumps(bad)]) + "\n")
        with pytest.raises(FormatError, match="frame 1"):
            read_scene(path)

    def test_malformed_field_names_location(self, tmp_path):
        lines = scene_to_lines(Scene("s", (make_frame(0, [Annotation("a", car(0.0))]), make_frame(1))))
        bad = json.loads(lines[1])
        bad["anns"][0]["size_wlh"] = [1, 2]
        path = tmp_path / "bad.scene.jsonl"
        path.write_text("\n".join([lines[0], json.dumps(bad), lines[2]]) + "\n")
        with pytest.raises(FormatError) as info:
            read_scene(path)
        assert "frame 0" in str(info.value) and "size_wlh" in str(info.value)

    def test_unknown_major_version_rejected(self, tmp_path):
        path = tmp_path / "v.scene.jsonl"
        path.write_text('{"scene_id":"s","version":2}\n')
        with pytest.raises(FormatError, match="version"):
            read_scene(path)

    def test_zero_frames_rejected(self, tmp_path):
        path = tmp_path / "v.scene.jsonl"
        path.write_text('{"scene_id":"s","version":1}\n')
        with pytest.raises(FormatError):
            read_scene(path)


finite = st.floats(-1e4, 1e4, allow_nan=False)


@st.composite
def scenes(draw):
    n = draw(st.integers(1, 4))
    gaps = draw(st.lists(st.integers(1, 10**6), min_size=n, max_size=n))
    frames = []
    ts = draw(st.integers(0, 10**9))
    for i in range(n):
        ts += gaps[i]
        anns = []
        for k in range(draw(st.integers(0, 3))):
            b = Box3D(
                (draw(finite), draw(finite), draw(finite)),
                tuple(draw(st.floats(0.01, 30)) for _ in range(3)),
                draw(st.floats(-10, 10)),
                (draw(finite), draw(finite)),
                draw(st.sampled_from(TRACKING_CLASSES)),
            )
            anns.append(Annotation(f"t{k}", b, draw(st.integers(0, 1000))))
        pose = Pose.from_quaternion((draw(finite), draw(finite), draw(finite)), (1.0, 0.0, 0.0, draw(st.floats(-1, 1))))
        frames.append(Frame(f"id{i}", ts, pose, f"p/{i}.bin", tuple(anns)))
    return Scene(draw(st.text(min_size=1, max_size=8)), tuple(frames))


@settings(max_examples=100, deadline=None)
@given(scenes())
def test_scene_round_trip_property(tmp_path_factory, scene):
    path = tmp_path_factory.mktemp("rt") / "x.scene.jsonl"
    write_scene(scene, path)
    assert read_scene(path) == scene


class TestPoints:
    def test_empty(self, tmp_path):
        write_points(PointCloud(), tmp_path / "e.bin")
        assert (tmp_path / "e.bin").stat().st_size == 0
        assert len(read_points(tmp_path / "e.bin")) == 0

    def test_single_point(self, tmp_path):
        write_points(PointCloud(np.array([[1.0, 2.0, 3.0, 0.5]])), tmp_path / "p.bin")
        raw = (tmp_path / "p.bin").read_bytes()
        assert len(raw) == 16
        assert raw == np.array([1.0, 2.0, 3.0, 0.5], dtype="<f4").tobytes()
        np.testing.assert_array_equal(read_points(tmp_path / "p.bin").points, [[1.0, 2.0, 3.0, 0.5]])

    def test_large_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(100_000, 4)).astype(np.float32)
        pts[:, 3] = np.abs(pts[:, 3])
        cloud = PointCloud(pts)
        write_points(cloud, tmp_path / "big.bin")
        assert (tmp_path / "big.bin").stat().st_size == 16 * 100_000
        assert read_points(tmp_path / "big.bin") == cloud

    def test_truncated_reports_offset(self, tmp_path):
        (tmp_path / "t.bin").write_bytes(b"\x00" * 37)
        with pytest.raises(FormatError, match="byte offset 32"):
            read_points(tmp_path / "t.bin")


def tracked(tid, x, score=0.9, name="car"):
    return TrackedBox((x, 0.0, 0.8), (1.9, 4.5, 1.6), Pose.from_yaw(0.2).rotation, (1.0, 0.0), tid, name, score)


class TestResults:
    def test_empty(self, tmp_path):
        write_result(TrackingResult(), tmp_path / "r.json")
        assert read_result(tmp_path / "r.json") == TrackingResult()
        doc = json.loads((tmp_path / "r.json").read_text())
        assert doc == {"meta": {"use_lidar": True}, "results": {}}

    def test_one_car_three_frames(self, tmp_path):
        res = TrackingResult({f"f{i}": [tracked("7", float(i))] for i in range(3)})
        write_result(res, tmp_path / "r.json")
        assert read_result(tmp_path / "r.json") == res

    def test_score_out_of_range_rejected(self, tmp_path):
        res = TrackingResult({"f0": [tracked("1", 0.0)]})
        write_result(res, tmp_path / "r.json")
        doc = json.loads((tmp_path / "r.json").read_text())
        doc["results"]["f0"][0]["tracking_score"] = 1.5
        (tmp_path / "r.json").write_text(json.dumps(doc))
        with pytest.raises(FormatError, match="tracking_score"):
            read_result(tmp_path / "r.json")
        with pytest.raises(ValueError):
            tracked("1", 0.0, score=1.5)

    def test_unknown_class_rejected(self, tmp_path):
        res = TrackingResult({"f0": [tracked("1", 0.0)]})
        write_result(res, tmp_path / "r.json")
        doc = json.loads((tmp_path / "r.json").read_text())
        doc["results"]["f0"][0]["tracking_name"] = "barrier"
        (tmp_path / "r.json").write_text(json.dumps(doc))
        with pytest.raises(FormatError, match="barrier"):
            read_result(tmp_path / "r.json")

    def test_duplicate_id_rejected(self):
        with pytest.raises(ValueError):
            TrackingResult({"f0": [tracked("1", 0.0), tracked("1", 5.0)]})

    def test_box_conversion(self):
        b = Box3D((1, 2, 3), (1, 2, 3), 2.5, (0.5, -0.5), "bus")
        back = TrackedBox.from_box(b, "x", 0.5).to_box()
        assert math.isclose(back.yaw, 2.5, abs_tol=1e-12)
        assert back.center == b.center
