"""Reading and writing BOP-format scene directories.

A BOP scene directory holds ``scene_camera.json`` (per-frame intrinsics),
``scene_gt.json`` (per-frame model-to-camera poses, millimetres) and a
``depth/`` folder of 16-bit PNGs. Model metadata lives in
``models/models_info.json`` with optional ``obj_XXXXXX.ply`` meshes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from .errors import IngestError

log = logging.getLogger(__name__)

ORTHO_TOL = 1e-6
# BOP ground truth is printed with ~8 significant digits; anything this close
# to a rotation is snapped onto SO(3), anything further is rejected.
ORTHO_REPAIR_TOL = 1e-3


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 1.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise IngestError("intrinsics", f"non-positive focal length {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise IngestError("intrinsics", "principal point outside the image")
        if not self.depth_scale > 0:
            raise IngestError("intrinsics", "depth_scale must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def cam_K(self) -> list[float]:
        return [self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0]


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


class Pose:
    """Rigid transform ``x -> R @ x + t``.

    Translation units follow the caller: object poses are in millimetres,
    the camera-to-world transform of :mod:`poseqa.world_frame` in metres.
    """

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation, translation, *, check: bool = True):
        R = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(translation, dtype=np.float64).reshape(3)
        if check:
            err = rotation_error(R)
            if err > ORTHO_TOL:
                raise IngestError("not_orthonormal", f"rotation deviates by {err:.3g}")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    def __setattr__(self, name, value):
        raise AttributeError("Pose is immutable")

    def __reduce__(self):
        return (_unpickle_pose, (self.rotation.tolist(), self.translation.tolist()))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T, *, check: bool = True) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3], check=check)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation, check=False)

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
            check=False,
        )

    def scaled(self, factor: float) -> "Pose":
        """Same rotation, translation multiplied by ``factor`` (unit change)."""
        return Pose(self.rotation, self.translation * factor, check=False)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def __repr__(self):
        return f"Pose(R={self.rotation.tolist()}, t={self.translation.tolist()})"


def _unpickle_pose(R, t) -> Pose:
    return Pose(R, t, check=False)


def rotation_error(R: np.ndarray) -> float:
    """Largest deviation of ``R`` from being a proper rotation."""
    ortho = np.abs(R.T @ R - np.eye(3)).max()
    return float(max(ortho, abs(np.linalg.det(R) - 1.0)))


def nearest_rotation(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray  # (N, 3) mm
    faces: np.ndarray  # (M, 3) int

    def __post_init__(self):
        if len(self.vertices) < 4 or len(self.faces) < 1:
            raise IngestError("mesh", "mesh needs at least 4 vertices and 1 triangle")


@dataclass(frozen=True)
class ModelInfo:
    obj_id: int
    size: tuple[float, float, float]
    diameter: float
    description: str = ""
    category_name: str = ""
    min_corner: tuple[float, float, float] | None = None
    mesh: Mesh | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if any(s <= 0 for s in self.size):
            raise IngestError("model", f"obj {self.obj_id}: extents must be positive")

    @property
    def offset(self) -> np.ndarray:
        """Model-frame centre of the bounding box (zero for centred models)."""
        if self.min_corner is None:
            return np.zeros(3)
        return np.asarray(self.min_corner) + np.asarray(self.size) / 2.0


@dataclass(frozen=True)
class ObjectInstance:
    instance_id: int
    obj_id: int
    pose_cam: Pose
    visib_fract: float | None = None


@dataclass(frozen=True, eq=False)
class SceneFrame:
    scene_id: int
    frame_id: int
    intrinsics: CameraIntrinsics
    depth: np.ndarray
    instances: tuple[ObjectInstance, ...]
    image_path: str = ""
    world_to_cam: Pose | None = None  # dataset-provided extrinsics (mm), if any

    def __post_init__(self):
        shape = (self.intrinsics.height, self.intrinsics.width)
        if self.depth.shape != shape:
            raise IngestError("shape", f"depth {self.depth.shape} != {shape}")

    def depth_mm(self) -> np.ndarray:
        return self.depth.astype(np.float64) * self.intrinsics.depth_scale

    def instance(self, instance_id: int) -> ObjectInstance:
        for inst in self.instances:
            if inst.instance_id == instance_id:
                return inst
        raise KeyError(instance_id)


# --------------------------------------------------------------------- PLY

_PLY_DTYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def load_ply(path) -> Mesh:
    """Read vertex positions and triangles from an ASCII or binary LE PLY."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise IngestError("mesh", f"{path}: not a PLY file")
        fmt = None
        elements: list[list] = []
        while True:
            line = fh.readline()
            if not line:
                raise IngestError("mesh", f"{path}: truncated header")
            tok = line.decode("ascii", "replace").split()
            if not tok or tok[0] in ("comment", "obj_info"):
                continue
            if tok[0] == "end_header":
                break
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                elements.append([tok[1], int(tok[2]), []])
            elif tok[0] == "property":
                elements[-1][2].append(tok[1:])
        body = fh.read()

    if fmt not in ("ascii", "binary_little_endian"):
        raise IngestError("mesh", f"{path}: unsupported PLY format {fmt}")

    verts = faces = None
    if fmt == "ascii":
        rows = iter(body.decode("ascii").splitlines())
        for name, count, props in elements:
            data = [next(rows).split() for _ in range(count)]
            if name == "vertex":
                names = [p[-1] for p in props]
                idx = [names.index(c) for c in ("x", "y", "z")]
                verts = np.array([[float(r[i]) for i in idx] for r in data]).reshape(-1, 3)
            elif name == "face":
                tris = []
                for r in data:
                    n = int(r[0])
                    poly = [int(v) for v in r[1 : 1 + n]]
                    tris.extend([poly[0], poly[k], poly[k + 1]] for k in range(1, n - 1))
                faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
    else:
        offset = 0
        for name, count, props in elements:
            if any(p[0] == "list" for p in props):
                # variable-length rows: walk them one by one
                tris = []
                for _ in range(count):
                    for p in props:
                        if p[0] == "list":
                            ct = np.dtype("<" + _PLY_DTYPES[p[1]])
                            it = np.dtype("<" + _PLY_DTYPES[p[2]])
                            n = int(np.frombuffer(body, ct, 1, offset)[0])
                            offset += ct.itemsize
                            vals = np.frombuffer(body, it, n, offset)
                            offset += it.itemsize * n
                            if name == "face" and p[-1] in ("vertex_indices", "vertex_index"):
                                tris.extend([vals[0], vals[k], vals[k + 1]] for k in range(1, n - 1))
                        else:
                            offset += np.dtype(_PLY_DTYPES[p[0]]).itemsize
                if name == "face":
                    faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
            else:
                dt = np.dtype([(p[-1], "<" + _PLY_DTYPES[p[0]]) for p in props])
                arr = np.frombuffer(body, dt, count, offset)
                offset += dt.itemsize * count
                if name == "vertex":
                    verts = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
    if verts is None or faces is None:
        raise IngestError("mesh", f"{path}: missing vertex or face element")
    return Mesh(verts, faces)


def write_ply(path, mesh: Mesh) -> None:
    lines = [
        "ply", "format ascii 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property float x", "property float y", "property float z",
        f"element face {len(mesh.faces)}",
        "property list uchar int vertex_indices", "end_header",
    ]
    lines += [f"{x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


# ----------------------------------------------------------------- models


def load_descriptions(path) -> dict[int, str]:
    out: dict[int, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        key, _, text = line.partition("\t")
        out[int(key)] = text.strip()
    return out


def load_model_table(
    path,
    descriptions=None,
    *,
    load_meshes: bool = True,
    required_ids: Iterable[int] = (),
) -> dict[int, ModelInfo]:
    """Load ``models_info.json`` plus the description sidecar.

    Meshes ``obj_XXXXXX.ply`` next to the info file are attached when present.
    """
    path = Path(path)
    if not path.exists():
        raise IngestError("missing", str(path))
    raw = json.loads(path.read_text())
    texts = load_descriptions(descriptions) if descriptions and Path(descriptions).exists() else {}

    table: dict[int, ModelInfo] = {}
    for key, info in raw.items():
        obj_id = int(key)
        size = (float(info["size_x"]), float(info["size_y"]), float(info["size_z"]))
        min_corner = None
        if all(k in info for k in ("min_x", "min_y", "min_z")):
            min_corner = (float(info["min_x"]), float(info["min_y"]), float(info["min_z"]))
        category = info.get("category_name") or info.get("name") or f"object {obj_id}"
        mesh = None
        ply = path.parent / f"obj_{obj_id:06d}.ply"
        if load_meshes and ply.exists():
            mesh = load_ply(ply)
        diameter = float(info.get("diameter", np.linalg.norm(size)))
        table[obj_id] = ModelInfo(
            obj_id=obj_id,
            size=size,
            diameter=diameter,
            description=texts.get(obj_id) or category,
            category_name=category,
            min_corner=min_corner,
            mesh=mesh,
        )
    unknown = (set(texts) | set(required_ids)) - set(table)
    if unknown:
        raise IngestError("unknown_model", f"obj_ids {sorted(unknown)} not in {path.name}")
    return table


def write_model_table(models_dir, table: dict[int, ModelInfo]) -> None:
    models_dir = Path(models_dir)
    models_dir.mkdir(parents=True, exist_ok=True)
    info = {}
    for obj_id, m in sorted(table.items()):
        entry = {
            "diameter": m.diameter,
            "size_x": m.size[0], "size_y": m.size[1], "size_z": m.size[2],
            "category_name": m.category_name,
        }
        if m.min_corner is not None:
            entry.update(min_x=m.min_corner[0], min_y=m.min_corner[1], min_z=m.min_corner[2])
        info[str(obj_id)] = entry
        if m.mesh is not None:
            write_ply(models_dir / f"obj_{obj_id:06d}.ply", m.mesh)
    (models_dir / "models_info.json").write_text(json.dumps(info, indent=2))
    lines = [f"{obj_id}\t{m.description}" for obj_id, m in sorted(table.items())]
    (models_dir / "descriptions.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


# ----------------------------------------------------------------- scenes


def _matrix(values, n: int, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size != n:
        raise IngestError("shape", f"{what} has {arr.size} values, expected {n}")
    return arr


def decode_pose(R_values, t_values) -> Pose:
    R = _matrix(R_values, 9, "cam_R_m2c").reshape(3, 3)
    t = _matrix(t_values, 3, "cam_t_m2c")
    err = rotation_error(R)
    if err > ORTHO_REPAIR_TOL:
        raise IngestError("not_orthonormal", f"rotation deviates by {err:.3g}")
    if err > ORTHO_TOL:
        R = nearest_rotation(R)
    return Pose(R, t)


def _read_json(path: Path):
    if not path.exists():
        raise IngestError("missing", str(path))
    return json.loads(path.read_text())


def _find_image(scene_dir: Path, frame_id: int) -> str:
    for sub in ("rgb", "gray"):
        for ext in (".png", ".jpg", ".tif"):
            p = scene_dir / sub / f"{frame_id:06d}{ext}"
            if p.exists():
                return str(p)
    return str(scene_dir / "rgb" / f"{frame_id:06d}.png")


def load_frame(scene_dir, frame_id: int, model_table: dict[int, ModelInfo], *, _cache=None) -> SceneFrame | None:
    """Load a single frame; returns None for frames without annotations."""
    scene_dir = Path(scene_dir)
    if _cache is None:
        cams = _read_json(scene_dir / "scene_camera.json")
        gts = _read_json(scene_dir / "scene_gt.json")
        info_path = scene_dir / "scene_gt_info.json"
        infos = json.loads(info_path.read_text()) if info_path.exists() else {}
    else:
        cams, gts, infos = _cache
    key = str(frame_id)
    if key not in cams:
        raise IngestError("missing", f"frame {frame_id} not in scene_camera.json")
    cam = cams[key]

    depth_path = scene_dir / "depth" / f"{frame_id:06d}.png"
    if not depth_path.exists():
        raise IngestError("missing", str(depth_path))
    depth = np.asarray(Image.open(depth_path))
    if depth.ndim != 2:
        raise IngestError("shape", f"{depth_path}: depth must be single-channel")

    K = _matrix(cam["cam_K"], 9, "cam_K")
    intr = CameraIntrinsics(
        fx=K[0], fy=K[4], cx=K[2], cy=K[5],
        width=int(cam.get("width", depth.shape[1])),
        height=int(cam.get("height", depth.shape[0])),
        depth_scale=float(cam.get("depth_scale", 1.0)),
    )
    w2c = None
    if "cam_R_w2c" in cam and "cam_t_w2c" in cam:
        w2c = decode_pose(cam["cam_R_w2c"], cam["cam_t_w2c"])

    entries = gts.get(key, [])
    vis = infos.get(key, [])
    instances = []
    for idx, e in enumerate(entries):
        obj_id = int(e["obj_id"])
        if obj_id not in model_table:
            raise IngestError("unknown_model", f"obj_id {obj_id} in scene {scene_dir.name} frame {frame_id}")
        vf = vis[idx].get("visib_fract") if idx < len(vis) else None
        instances.append(ObjectInstance(idx, obj_id, decode_pose(e["cam_R_m2c"], e["cam_t_m2c"]), vf))
    if not instances:
        log.warning("scene %s frame %d has no annotated instances; skipped", scene_dir.name, frame_id)
        return None
    return SceneFrame(
        scene_id=int(scene_dir.name) if scene_dir.name.isdigit() else 0,
        frame_id=frame_id,
        intrinsics=intr,
        depth=depth,
        instances=tuple(instances),
        image_path=_find_image(scene_dir, frame_id),
        world_to_cam=w2c,
    )


def frame_ids(scene_dir) -> list[int]:
    cams = _read_json(Path(scene_dir) / "scene_camera.json")
    return sorted(int(k) for k in cams)


def load_scene_dir(path, model_table: dict[int, ModelInfo]) -> list[SceneFrame]:
    scene_dir = Path(path)
    cache = (
        _read_json(scene_dir / "scene_camera.json"),
        _read_json(scene_dir / "scene_gt.json"),
        json.loads((scene_dir / "scene_gt_info.json").read_text())
        if (scene_dir / "scene_gt_info.json").exists()
        else {},
    )
    frames = []
    for fid in sorted(int(k) for k in cache[0]):
        frame = load_frame(scene_dir, fid, model_table, _cache=cache)
        if frame is not None:
            frames.append(frame)
    return frames


def find_scene_dirs(root) -> list[Path]:
    """Scene directories (those holding scene_gt.json) up to two levels below root."""
    root = Path(root)
    found = [p.parent for p in root.glob("scene_gt.json")]
    found += [p.parent for p in root.glob("*/scene_gt.json")]
    found += [p.parent for p in root.glob("*/*/scene_gt.json")]
    return sorted(set(found))


def write_scene_dir(path, frames: Iterable[SceneFrame]) -> None:
    """Write frames back out in the BOP layout (depth PNG + JSON)."""
    scene_dir = Path(path)
    (scene_dir / "depth").mkdir(parents=True, exist_ok=True)
    cams, gts, infos = {}, {}, {}
    for f in frames:
        k = str(f.frame_id)
        cam = {
            "cam_K": f.intrinsics.cam_K(),
            "depth_scale": f.intrinsics.depth_scale,
            "width": f.intrinsics.width,
            "height": f.intrinsics.height,
        }
        if f.world_to_cam is not None:
            cam["cam_R_w2c"] = f.world_to_cam.rotation.ravel().tolist()
            cam["cam_t_w2c"] = f.world_to_cam.translation.tolist()
        cams[k] = cam
        gts[k] = [
            {
                "obj_id": inst.obj_id,
                "cam_R_m2c": inst.pose_cam.rotation.ravel().tolist(),
                "cam_t_m2c": inst.pose_cam.translation.tolist(),
            }
            for inst in f.instances
        ]
        if any(inst.visib_fract is not None for inst in f.instances):
            infos[k] = [{"visib_fract": inst.visib_fract} for inst in f.instances]
        Image.fromarray(np.asarray(f.depth, dtype=np.uint16)).save(
            scene_dir / "depth" / f"{f.frame_id:06d}.png"
        )
    (scene_dir / "scene_camera.json").write_text(json.dumps(cams, indent=1))
    (scene_dir / "scene_gt.json").write_text(json.dumps(gts, indent=1))
    if infos:
        (scene_dir / "scene_gt_info.json").write_text(json.dumps(infos, indent=1))


def scene_dir_name(scene_id: int) -> str:
    return f"{scene_id:06d}"


__all__ = [
    "CameraIntrinsics", "Pose", "Mesh", "ModelInfo", "ObjectInstance", "SceneFrame",
    "load_ply", "write_ply", "load_model_table", "write_model_table", "load_descriptions",
    "load_frame", "load_scene_dir", "write_scene_dir", "find_scene_dirs", "frame_ids",
    "decode_pose", "rotation_error", "nearest_rotation", "scene_dir_name",
]
