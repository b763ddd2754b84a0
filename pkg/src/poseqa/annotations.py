"""Per-frame geometric annotation and the on-disk annotation store.

Store layout::

    index.json                     scenes, frames, config snapshot
    failures.jsonl                 one line per skipped frame or failed item
    <scene>/world.jsonl            camera-to-world transform and intrinsics
    <scene>/cuboids.jsonl          camera-frame cuboids with descriptions
    <scene>/trajectories.jsonl     planned pick-and-place paths
    <scene>/grasps.jsonl           top-k grasps per instance
    <scene>/clutter.jsonl          clutter labels and blockers

Every line carries its ``frame_id``; lines are ordered by frame.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bop_ingest import CameraIntrinsics, ModelInfo, Pose, SceneFrame, scene_dir_name
from .errors import CliError, PoseQAError
from .geometry import Cuboid3D, cuboid_from_instance
from .grasp import ClutterLabel, Grasp, base_distance_px, synthesize_frame_grasps
from .planner import Trajectory, plan_pair_trajectories
from .world_frame import WorldTransform, build_world_transform

KINDS = ("world", "cuboids", "trajectories", "grasps", "clutter")


@dataclass(frozen=True)
class InstanceAnnotation:
    instance_id: int
    obj_id: int
    description: str
    cuboid_cam: Cuboid3D  # camera frame, mm
    visib_fract: float | None = None


@dataclass
class FrameAnnotation:
    scene_id: int
    frame_id: int
    image: str
    intrinsics: CameraIntrinsics
    world: WorldTransform
    instances: list[InstanceAnnotation]
    trajectories: list[Trajectory] = field(default_factory=list)
    grasps: dict[int, list[Grasp]] = field(default_factory=dict)
    clutter: dict[int, ClutterLabel] = field(default_factory=dict)
    failures: list[dict] = field(default_factory=list)

    def instance(self, instance_id: int) -> InstanceAnnotation:
        for inst in self.instances:
            if inst.instance_id == instance_id:
                return inst
        raise KeyError(instance_id)

    def cuboids_world(self) -> dict[int, Cuboid3D]:
        T = self.world.cam_to_world_mm
        return {i.instance_id: i.cuboid_cam.transformed(T) for i in self.instances}


def frame_seed(seed: int, scene_id: int, frame_id: int) -> int:
    return int(np.random.SeedSequence([seed, scene_id, frame_id]).generate_state(1)[0])


def annotate_frame(
    frame: SceneFrame,
    model_table: dict[int, ModelInfo],
    config,
    *,
    plan: bool = True,
    grasp: bool = True,
) -> FrameAnnotation:
    """World frame, cuboids, trajectories, grasps and clutter labels for one frame.

    World-frame failures propagate (the frame is skipped by the caller);
    per-pair and per-object failures are recorded on the annotation.
    """
    fseed = frame_seed(config.seed, frame.scene_id, frame.frame_id)
    if config.trust_dataset_extrinsics and frame.world_to_cam is not None:
        world = WorldTransform.from_world_to_cam(frame.world_to_cam)
    else:
        world = build_world_transform(frame, model_table, dataclasses.replace(config.world_frame, seed=fseed))

    instances = [
        InstanceAnnotation(
            i.instance_id, i.obj_id, model_table[i.obj_id].description,
            cuboid_from_instance(i, model_table[i.obj_id]), i.visib_fract,
        )
        for i in frame.instances
    ]
    ann = FrameAnnotation(frame.scene_id, frame.frame_id, frame.image_path, frame.intrinsics, world, instances)
    cubs_world = ann.cuboids_world()
    if plan and len(instances) >= 2:
        trajs, report = plan_pair_trajectories(frame, world, model_table, config.planner, config.seed,
                                               cuboids=cubs_world)
        ann.trajectories = trajs
        ann.failures += [dict(kind="trajectory", **f) for f in report.failures]
    if grasp:
        results = synthesize_frame_grasps(frame, world, model_table, cubs_world, config.grasp, config.seed)
        for iid, res in sorted(results.items()):
            if res.error is not None:
                ann.failures.append({"kind": "grasp", "instance_id": iid, "reason": res.error})
                continue
            ann.grasps[iid] = res.grasps
            ann.clutter[iid] = res.label
    return ann


# ------------------------------------------------------------------- records


def _cuboid_dict(c: Cuboid3D) -> dict:
    return {"rotation": c.pose.rotation.tolist(), "translation": c.pose.translation.tolist(),
            "half_extents": c.half_extents.tolist()}


def _cuboid_from(d) -> Cuboid3D:
    return Cuboid3D(Pose(d["rotation"], d["translation"], check=False), np.asarray(d["half_extents"], dtype=np.float64))


def frame_records(ann: FrameAnnotation) -> dict[str, dict]:
    K = ann.intrinsics
    return {
        "world": {
            "frame_id": ann.frame_id,
            "image": ann.image,
            "intrinsics": dataclasses.asdict(K),
            "cam_to_world": ann.world.row_major(),
            "inlier_ratio": ann.world.inlier_ratio,
            "rms_residual": ann.world.rms_residual,
        },
        "cuboids": {
            "frame_id": ann.frame_id,
            "instances": [
                {"instance_id": i.instance_id, "obj_id": i.obj_id, "description": i.description,
                 "visib_fract": i.visib_fract, **_cuboid_dict(i.cuboid_cam)}
                for i in ann.instances
            ],
        },
        "trajectories": {"frame_id": ann.frame_id, "trajectories": [t.to_dict() for t in ann.trajectories]},
        "grasps": {
            "frame_id": ann.frame_id,
            "instances": [{"instance_id": iid, "grasps": [g.to_dict() for g in gs]}
                          for iid, gs in sorted(ann.grasps.items())],
        },
        "clutter": {
            "frame_id": ann.frame_id,
            "labels": [{"target_id": c.target_id, "fully_cluttered": c.fully_cluttered, "blockers": list(c.blockers)}
                       for _, c in sorted(ann.clutter.items())],
        },
    }


def annotation_from_records(scene_id: int, recs: dict[str, dict]) -> FrameAnnotation:
    w = recs["world"]
    M = np.asarray(w["cam_to_world"], dtype=np.float64).reshape(3, 4)
    world = WorldTransform(Pose(M[:, :3], M[:, 3], check=False), w["inlier_ratio"], w["rms_residual"])
    instances = [
        InstanceAnnotation(d["instance_id"], d["obj_id"], d["description"], _cuboid_from(d), d.get("visib_fract"))
        for d in recs["cuboids"]["instances"]
    ]
    ann = FrameAnnotation(scene_id, w["frame_id"], w["image"], CameraIntrinsics(**w["intrinsics"]), world, instances)
    ann.trajectories = [Trajectory.from_dict(t) for t in recs.get("trajectories", {}).get("trajectories", [])]
    ann.grasps = {d["instance_id"]: [Grasp.from_dict(g) for g in d["grasps"]]
                  for d in recs.get("grasps", {}).get("instances", [])}
    ann.clutter = {d["target_id"]: ClutterLabel(d["target_id"], d["fully_cluttered"], tuple(d["blockers"]))
                   for d in recs.get("clutter", {}).get("labels", [])}
    return ann


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=False, separators=(",", ":"))


# --------------------------------------------------------------------- store


class AnnotationStore:
    """Writer/reader for the per-scene JSON-lines layout."""

    def __init__(self, root):
        self.root = Path(root)

    def exists(self) -> bool:
        return (self.root / "index.json").is_file()

    def write(self, annotations: list[FrameAnnotation], failures: list[dict], config_snapshot: dict) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        by_scene: dict[int, list[FrameAnnotation]] = {}
        for ann in sorted(annotations, key=lambda a: (a.scene_id, a.frame_id)):
            by_scene.setdefault(ann.scene_id, []).append(ann)
        for scene_id, anns in by_scene.items():
            d = self.root / scene_dir_name(scene_id)
            d.mkdir(exist_ok=True)
            lines = {k: [] for k in KINDS}
            for ann in anns:
                for kind, rec in frame_records(ann).items():
                    lines[kind].append(dumps(rec))
            for kind in KINDS:
                (d / f"{kind}.jsonl").write_text("".join(line + "\n" for line in lines[kind]))
        (self.root / "failures.jsonl").write_text("".join(dumps(f) + "\n" for f in failures))
        index = {
            "format": 1,
            "scenes": {scene_dir_name(s): [a.frame_id for a in anns] for s, anns in by_scene.items()},
            "config": config_snapshot,
            "n_frames": sum(len(a) for a in by_scene.values()),
            "n_failures": len(failures),
        }
        (self.root / "index.json").write_text(json.dumps(index, indent=1) + "\n")

    def index(self) -> dict:
        if not self.exists():
            raise CliError("missing_store", f"no annotation store at {self.root}")
        return json.loads((self.root / "index.json").read_text())

    def load(self) -> list[FrameAnnotation]:
        out = []
        for scene, _frames in sorted(self.index()["scenes"].items()):
            d = self.root / scene
            per_frame: dict[int, dict] = {}
            for kind in KINDS:
                path = d / f"{kind}.jsonl"
                if not path.exists():
                    raise CliError("missing_store", f"{path} missing")
                for line in path.read_text().splitlines():
                    if line.strip():
                        rec = json.loads(line)
                        per_frame.setdefault(rec["frame_id"], {})[kind] = rec
            for fid in sorted(per_frame):
                out.append(annotation_from_records(int(scene), per_frame[fid]))
        return out


def failure_record(scene_id: int, frame_id: int, err: Exception) -> dict:
    kind = err.kind if isinstance(err, PoseQAError) else type(err).__name__
    return {"scene_id": scene_id, "frame_id": frame_id, "kind": "frame", "reason": kind, "message": str(err)}


def usable_grasps(grasps: list[Grasp], min_base_px: float) -> list[Grasp]:
    """Grasps whose projected finger bases are far enough apart to score."""
    return [g for g in grasps if g.points_2d is not None and base_distance_px(g.points_2d) >= min_base_px]
