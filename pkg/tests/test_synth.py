import json
import os
from pathlib import Path

import numpy as np
import pytest

from poseqa.bop_ingest import Pose, load_model_table, load_scene_dir
from poseqa.errors import SynthError
from poseqa.geometry import project_points
from poseqa.synth import (
    SynthObject,
    SynthSpec,
    export_bop,
    fixture,
    look_at,
    model_table_for,
    orbit_camera,
    random_spec,
    render_depth,
    standard_fixtures,
)

from conftest import rendered

GOLDEN = Path(__file__).parent / "golden"
REGEN = os.environ.get("POSEQA_REGEN_GOLDEN") == "1"


def _cuboid(c):
    return {"rotation": c.pose.rotation.tolist(), "translation": c.pose.translation.tolist(),
            "half_extents": c.half_extents.tolist()}


def golden_record(name: str) -> dict:
    spec, frame, gt, table = rendered(name)
    return json.loads(json.dumps({
        "name": name,
        "cam_to_world_mm": gt.cam_to_world.matrix().tolist(),
        "objects": [{"obj_id": o.obj_id, "kind": o.kind, "size": list(o.size), "description": o.description}
                    for o in spec.objects],
        "cuboids_world": {str(i): _cuboid(c) for i, c in gt.cuboids_world.items()},
        "cuboids_cam": {str(i): _cuboid(c) for i, c in gt.cuboids_cam.items()},
        "spatial": [[a, b, r] for (a, b), r in sorted(gt.spatial.items())],
        "depth": [[a, b, r] for (a, b), r in sorted(gt.depth.items())],
        "adjacency": sorted(list(p) for p in gt.adjacency),
        "notes": {k: list(v) if isinstance(v, tuple) else v for k, v in spec.notes.items()},
        "depth_checksum": int(frame.depth.astype(np.int64).sum()),
    }))


def test_fixture_suite_names():
    assert sorted(standard_fixtures()) == sorted(
        ["tilted30", "topdown", "sealed_box", "ring_clutter", "two_plane", "line3"])
    with pytest.raises(SynthError):
        fixture("nope")


def test_fixture_matches_golden_file(fixture_name):
    path = GOLDEN / f"{fixture_name}.json"
    rec = golden_record(fixture_name)
    if REGEN:
        path.write_text(json.dumps(rec, indent=1) + "\n")
    assert rec == json.loads(path.read_text())


def test_flat_render_of_empty_table():
    cam = look_at([0, 0, 800.0], [0, 0, 0], up=(0, 1, 0))
    spec = SynthSpec("empty", 0, cam, (), table_size=(4000.0, 4000.0))
    frame, gt = render_depth(spec)
    z = frame.depth_mm()
    assert np.all(z == 800.0)


def test_single_box_silhouette_matches_projected_hull():
    # a vanishingly small table keeps the background empty
    spec = SynthSpec("one", 0, orbit_camera(700.0, 25.0),
                     (SynthObject.resting(1, "box", (100.0, 100.0, 100.0), 0.0, 0.0),),
                     table_size=(1e-3, 1e-3))
    frame, gt = render_depth(spec)
    mask = frame.depth > 0
    vs, us = np.nonzero(mask)
    uv = project_points(gt.cuboids_cam[0].corners(), frame.intrinsics)
    assert abs(us.min() - uv[:, 0].min()) <= 1.0 and abs(us.max() - uv[:, 0].max()) <= 1.0
    assert abs(vs.min() - uv[:, 1].min()) <= 1.0 and abs(vs.max() - uv[:, 1].max()) <= 1.0


def test_adjacency_follows_gap_arithmetic():
    cam = orbit_camera(900.0, 30.0)
    near = (SynthObject.resting(1, "box", (50.0, 50.0, 50.0), 0.0, 0.0),
            SynthObject.resting(1, "box", (50.0, 50.0, 50.0), 55.0, 0.0))
    far = (near[0], SynthObject.resting(1, "box", (50.0, 50.0, 50.0), 55.1, 0.0))
    assert render_depth(SynthSpec("near", 0, cam, near))[1].adjacency == {(0, 1)}
    assert render_depth(SynthSpec("far", 0, cam, far))[1].adjacency == frozenset()


def test_camera_below_table_rejected():
    cam = look_at([0, 0, -500.0], [0, 0, 0], up=(0, 1, 0))
    with pytest.raises(SynthError) as e:
        render_depth(SynthSpec("under", 0, cam, ()))
    assert e.value.kind == "camera_pose"


def test_interpenetration_rejected():
    objs = (SynthObject.resting(1, "box", (50.0, 50.0, 50.0), 0.0, 0.0),
            SynthObject.resting(1, "box", (50.0, 50.0, 50.0), 20.0, 0.0))
    with pytest.raises(SynthError):
        render_depth(SynthSpec("clash", 0, orbit_camera(900.0, 30.0), objs))


def test_noise_is_seeded():
    a, _ = render_depth(fixture("tilted30").with_noise(2.0, 5))
    b, _ = render_depth(fixture("tilted30").with_noise(2.0, 5))
    c, _ = render_depth(fixture("tilted30").with_noise(2.0, 6))
    assert np.array_equal(a.depth, b.depth)
    assert not np.array_equal(a.depth, c.depth)
    resid = a.depth_mm() - render_depth(fixture("tilted30"))[0].depth_mm()
    assert 1.8 < resid.std() < 2.2


def test_gt_cuboids_are_consistent_between_frames():
    spec, frame, gt, table = rendered("tilted30")
    for i, cw in gt.cuboids_world.items():
        np.testing.assert_allclose(spec.world_to_cam.apply(cw.corners()), gt.cuboids_cam[i].corners(), atol=1e-9)
        assert cw.corners()[:, 2].min() == pytest.approx(0.0, abs=1e-9)


def test_ring_clutter_export_reingests_losslessly(tmp_path):
    spec = fixture("ring_clutter")
    frame, gt = render_depth(spec)
    export_bop([spec], tmp_path, frames_per_scene=1)
    table = load_model_table(tmp_path / "models" / "models_info.json", tmp_path / "models" / "descriptions.txt")
    [back] = load_scene_dir(tmp_path / "test" / "000001", table)
    np.testing.assert_array_equal(back.depth, frame.depth)
    assert back.intrinsics == frame.intrinsics
    for a, b in zip(back.instances, frame.instances):
        assert a.obj_id == b.obj_id
        np.testing.assert_allclose(a.pose_cam.matrix(), b.pose_cam.matrix(), atol=1e-12)
    assert {k: v.description for k, v in table.items()} == \
        {k: v.description for k, v in model_table_for([spec]).items()}


def test_random_specs_are_valid_and_deterministic():
    for seed in range(10):
        a, b = random_spec(seed), random_spec(seed)
        assert a.objects == b.objects
        render_depth(a)


def test_look_at_points_optical_axis_at_target():
    cam = look_at([300.0, -200.0, 600.0], [10.0, 20.0, 0.0])
    p = cam.apply([[10.0, 20.0, 0.0]])[0]
    assert abs(p[0]) < 1e-9 and abs(p[1]) < 1e-9 and p[2] > 0
    assert isinstance(cam, Pose)
