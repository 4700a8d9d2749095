"""File codecs: OBJ meshes, binary PLY scenes, JSON-headed tensor
containers, camera JSON, trajectory CSV, PNG and PPM images.

All binary containers are little-endian float64 so that write -> read is
bit-exact. Text formats round-trip through repr() floats (well within
1e-9).
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from PIL import Image as PILImage

from .audio2param import A2PConfig, A2PWeights, AudioFeatureSequence
from .binding import BoundGaussian, BoundScene
from .errors import InputError
from .gaussian_scene import GaussianPrimitive, Scene, sh_degree_from_count
from .head_model import BlendshapeBasis, HeadParams, TemplateMesh
from .rasterizer import Camera, Image
from .stability import KeypointTrajectory

PathLike = Union[str, Path]

JBIN_MAGIC = "jbin.v1"


# ---------------------------------------------------------------------------
# OBJ meshes


def write_obj(path: PathLike, vertices: np.ndarray, faces: np.ndarray) -> None:
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    with open(path, "w") as fh:
        fh.write("# triangle mesh\n")
        for v in vertices:
            fh.write("v %r %r %r\n" % (float(v[0]), float(v[1]), float(v[2])))
        for f in faces:
            fh.write("f %d %d %d\n" % (f[0] + 1, f[1] + 1, f[2] + 1))


def read_obj(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    """Parse v/f records; comments, blank lines and other records are skipped.

    Face indices may carry texture/normal slashes (f 1/1/1); only the
    vertex index is used. Returns (vertices, faces) with 0-based faces.
    """
    verts: List[List[float]] = []
    faces: List[List[int]] = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            parts = stripped.split()
            if parts[0] == "v":
                if len(parts) < 4:
                    raise InputError("%s:%d: vertex needs 3 coordinates" % (path, lineno))
                try:
                    verts.append([float(p) for p in parts[1:4]])
                except ValueError:
                    raise InputError("%s:%d: bad vertex coordinate" % (path, lineno))
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise InputError("%s:%d: only triangular faces supported" % (path, lineno))
                try:
                    idx = [int(p.split("/")[0]) - 1 for p in parts[1:4]]
                except ValueError:
                    raise InputError("%s:%d: bad face index" % (path, lineno))
                faces.append(idx)
    if not verts:
        raise InputError("%s: no vertices found" % path)
    vertices = np.asarray(verts, dtype=np.float64)
    face_arr = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if face_arr.size and (face_arr.min() < 0 or face_arr.max() >= len(vertices)):
        raise InputError("%s: face index out of range" % path)
    return vertices, face_arr


# ---------------------------------------------------------------------------
# PLY Gaussian scenes
#
# One vertex element per Gaussian; all properties are doubles,(in order):
#   x, y, z                     mean
#   scale_0..scale_2            ln(scale)
#   rot_0..rot_3                quaternion (w, x, y, z)
#   opacity                     logit(opacity), opacity clamped to
#                               [1e-6, 1 - 1e-6] before the transform
#   f_dc_0..f_dc_2              SH degree-0 coefficients (r, g, b)
#   f_rest_{3*(i-1)+c}          higher SH coefficient i for channel c

_OPACITY_EPS = 1e-6


def _ply_property_names(sh_count: int) -> List[str]:
    names = ["x", "y", "z", "scale_0", "scale_1", "scale_2",
             "rot_0", "rot_1", "rot_2", "rot_3", "opacity",
             "f_dc_0", "f_dc_1", "f_dc_2"]
    names += ["f_rest_%d" % i for i in range(3 * (sh_count - 1))]
    return names


def write_ply(path: PathLike, scene: Scene) -> None:
    if not scene.gaussians:
        raise InputError("refusing to write an empty scene")
    sh_count = scene.gaussians[0].sh.shape[0]
    names = _ply_property_names(sh_count)
    rows = np.empty((len(scene.gaussians), len(names)), dtype="<f8")
    for i, g in enumerate(scene.gaussians):
        op = min(max(g.opacity, _OPACITY_EPS), 1.0 - _OPACITY_EPS)
        rest = g.sh[1:].reshape(-1)  # coefficient-major: (coeff, channel)
        rows[i] = np.concatenate([
            g.mu, np.log(g.scale), g.rotation,
            [np.log(op / (1.0 - op))], g.sh[0], rest,
        ])
    header = ["ply", "format binary_little_endian 1.0",
              "element vertex %d" % rows.shape[0]]
    header += ["property double %s" % n for n in names]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rows.tobytes())


def read_ply(path: PathLike) -> Scene:
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise InputError("%s: not a PLY file (no end_header)" % path)
    body_offset = end + len(b"end_header\n")
    count = None
    names: List[str] = []
    for line in data[:end].decode("ascii", errors="replace").splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "binary_little_endian":
            raise InputError("%s: only binary_little_endian supported" % path)
        elif parts[0] == "element":
            if parts[1] != "vertex":
                raise InputError("%s: unexpected element '%s'" % (path, parts[1]))
            count = int(parts[2])
        elif parts[0] == "property":
            if parts[1] != "double":
                raise InputError("%s: property '%s' is not a double" % (path, parts[2]))
            names.append(parts[2])
    if count is None:
        raise InputError("%s: missing vertex element" % path)
    n_rest = sum(1 for n in names if n.startswith("f_rest_"))
    sh_count = 1 + n_rest // 3
    if names != _ply_property_names(sh_count):
        raise InputError("%s: unexpected property layout" % path)
    need = count * len(names) * 8
    if len(data) - body_offset < need:
        raise InputError("%s: truncated body at byte %d (need %d data bytes)"
                         % (path, len(data), need))
    rows = np.frombuffer(data, dtype="<f8", count=count * len(names),
                         offset=body_offset).reshape(count, len(names))
    gaussians = []
    for r in rows:
        sh = np.empty((sh_count, 3))
        sh[0] = r[11:14]
        if sh_count > 1:
            sh[1:] = r[14:].reshape(sh_count - 1, 3)
        gaussians.append(GaussianPrimitive(
            mu=r[0:3].copy(), scale=np.exp(r[3:6]), rotation=r[6:10].copy(),
            opacity=float(1.0 / (1.0 + np.exp(-r[10]))), sh=sh))
    return Scene(gaussians=gaussians, sh_degree=sh_degree_from_count(sh_count))


# ---------------------------------------------------------------------------
# JSON-headed flat float64 binary tensor container ("jbin")
#
# Layout: one line of JSON (terminated by \n) declaring the format tag,
# free-form metadata and an ordered tensor directory [{name, shape}],
# followed by the tensors' float64 little-endian row-major bytes,
# concatenated in directory order.


def write_tensors(path: PathLike, tensors: Dict[str, np.ndarray],
                  meta: Optional[dict] = None) -> None:
    directory = [{"name": k, "shape": list(np.asarray(v).shape)}
                 for k, v in tensors.items()]
    header = {"format": JBIN_MAGIC, "meta": meta or {}, "tensors": directory}
    with open(path, "wb") as fh:
        fh.write((json.dumps(header) + "\n").encode("utf-8"))
        for v in tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def read_tensors(path: PathLike) -> Tuple[Dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    nl = data.find(b"\n")
    if nl < 0:
        raise InputError("%s: missing header line" % path)
    try:
        header = json.loads(data[:nl].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise InputError("%s: bad JSON header: %s" % (path, exc))
    if header.get("format") != JBIN_MAGIC:
        raise InputError("%s: not a %s file" % (path, JBIN_MAGIC))
    offset = nl + 1
    tensors: Dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(int(s) for s in entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        if offset + 8 * n > len(data):
            raise InputError("%s: truncated at byte %d reading '%s'"
                             % (path, offset, entry["name"]))
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=offset)
        tensors[entry["name"]] = arr.reshape(shape).copy()
        offset += 8 * n
    return tensors, header.get("meta", {})


# --- typed wrappers over the container ---


def write_features(path: PathLike, features: AudioFeatureSequence) -> None:
    write_tensors(path, {"features": features.features},
                  meta={"kind": "audio-features", "frame_rate": features.frame_rate})


def read_features(path: PathLike) -> AudioFeatureSequence:
    tensors, meta = read_tensors(path)
    if "features" not in tensors:
        raise InputError("%s: no 'features' tensor" % path)
    return AudioFeatureSequence(features=tensors["features"],
                                frame_rate=float(meta.get("frame_rate", 25.0)))


def write_params_sequence(path: PathLike, params: List[HeadParams],
                          frame_rate: float = 25.0) -> None:
    tensors = {
        "translation": np.stack([p.translation for p in params]),
        "rotation": np.stack([p.global_rotation for p in params]),
        "jaw": np.stack([p.jaw for p in params]),
        "expression": np.stack([p.expression for p in params]),
        "shape": np.stack([p.shape for p in params]),
    }
    write_tensors(path, tensors, meta={"kind": "head-params", "frame_rate": frame_rate})


def read_params_sequence(path: PathLike) -> Tuple[List[HeadParams], float]:
    tensors, meta = read_tensors(path)
    for key in ("translation", "rotation", "jaw", "expression", "shape"):
        if key not in tensors:
            raise InputError("%s: no '%s' tensor" % (path, key))
    n = tensors["jaw"].shape[0]
    params = [HeadParams(translation=tensors["translation"][t],
                         global_rotation=tensors["rotation"][t],
                         jaw=tensors["jaw"][t],
                         expression=tensors["expression"][t],
                         shape=tensors["shape"][t])
              for t in range(n)]
    return params, float(meta.get("frame_rate", 25.0))


def _basis_tensors(basis: BlendshapeBasis) -> Dict[str, np.ndarray]:
    return {
        "shape_basis": basis.shape_basis,
        "expression_basis": basis.expression_basis,
        "jaw_joint": basis.jaw_joint,
        "jaw_weight": basis.jaw_weight,
    }


def _basis_from_tensors(tensors: Dict[str, np.ndarray], where: str) -> BlendshapeBasis:
    for key in ("shape_basis", "expression_basis", "jaw_joint", "jaw_weight"):
        if key not in tensors:
            raise InputError("%s: no '%s' tensor" % (where, key))
    return BlendshapeBasis(shape_basis=tensors["shape_basis"],
                           expression_basis=tensors["expression_basis"],
                           jaw_joint=tensors["jaw_joint"],
                           jaw_weight=tensors["jaw_weight"])


def write_basis(path: PathLike, basis: BlendshapeBasis) -> None:
    write_tensors(path, _basis_tensors(basis), meta={"kind": "blendshape-basis"})


def read_basis(path: PathLike) -> BlendshapeBasis:
    tensors, _ = read_tensors(path)
    return _basis_from_tensors(tensors, str(path))


def write_weights(path: PathLike, weights: A2PWeights) -> None:
    tensors = dict(weights.tensors)
    tensors["mean_head"] = weights.mean_head
    meta = {"kind": "a2p-weights", "config": weights.config.to_dict(),
            "trained": bool(weights.trained)}
    write_tensors(path, tensors, meta=meta)


def read_weights(path: PathLike) -> A2PWeights:
    tensors, meta = read_tensors(path)
    if "config" not in meta:
        raise InputError("%s: weights file lacks model config" % path)
    mean_head = tensors.pop("mean_head", None)
    config = A2PConfig.from_dict(meta["config"])
    return A2PWeights(config=config, tensors=tensors, mean_head=mean_head,
                      trained=bool(meta.get("trained", False)))


# ---------------------------------------------------------------------------
# Camera JSON


def write_camera(path: PathLike, camera: Camera) -> None:
    doc = {
        "fx": camera.fx, "fy": camera.fy, "cx": camera.cx, "cy": camera.cy,
        "width": camera.width, "height": camera.height,
        "world_to_cam": camera.extrinsic4x4().tolist(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def read_camera(path: PathLike) -> Camera:
    try:
        with open(path, "r") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise InputError("%s: bad JSON at line %d" % (path, exc.lineno))
    try:
        ext = np.asarray(doc["world_to_cam"], dtype=np.float64)
        return Camera.from_extrinsic4x4(
            fx=float(doc["fx"]), fy=float(doc["fy"]),
            cx=float(doc["cx"]), cy=float(doc["cy"]),
            extrinsic=ext,
            width=int(doc["width"]), height=int(doc["height"]))
    except KeyError as exc:
        raise InputError("%s: missing camera field %s" % (path, exc))


# ---------------------------------------------------------------------------
# Avatar bundle: globalized scene PLY + binding sidecar JSON
#
# The PLY holds the scene globalized at the stored head pose so generic
# viewers (and `render`) can consume it directly. The sidecar maps each
# Gaussian back to its triangle and local parameters, and embeds the
# template mesh, blendshape basis and fitted head parameters so the
# avatar can be re-posed.


def write_avatar(path: PathLike, bound: BoundScene, template: TemplateMesh,
                 basis: BlendshapeBasis, head_params: HeadParams) -> Path:
    from .binding import globalize_scene, triangle_frames
    from .head_model import pose_mesh
    path = Path(path)
    mesh = pose_mesh(template, basis, head_params)
    gaussians = globalize_scene(bound, triangle_frames(mesh))
    write_ply(path, Scene(gaussians=gaussians, sh_degree=bound.sh_degree))
    sidecar = path.with_suffix(path.suffix + ".bind.json")
    doc = {
        "bindings": [
            {"triangle_id": int(g.triangle_id),
             "local_mu": g.local_mu.tolist(),
             "local_scale": g.local_scale.tolist(),
             "local_rotation": g.local_rotation.tolist(),
             "opacity": g.opacity,
             "sh": g.sh.tolist()}
            for g in bound.bound
        ],
        "num_triangles": int(len(bound.per_triangle_count)),
        "sh_degree": int(bound.sh_degree),
        "template": {"vertices": template.vertices.tolist(),
                     "triangles": template.triangles.tolist()},
        "basis": {k: v.tolist() for k, v in _basis_tensors(basis).items()},
        "head_params": {
            "translation": head_params.translation.tolist(),
            "rotation": head_params.global_rotation.tolist(),
            "jaw": head_params.jaw.tolist(),
            "expression": head_params.expression.tolist(),
            "shape": head_params.shape.tolist(),
        },
    }
    with open(sidecar, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")
    return sidecar


def read_avatar(path: PathLike) -> Tuple[BoundScene, TemplateMesh, BlendshapeBasis, HeadParams]:
    path = Path(path)
    sidecar = path.with_suffix(path.suffix + ".bind.json")
    if not sidecar.exists():
        raise InputError("%s: binding sidecar %s not found" % (path, sidecar))
    try:
        with open(sidecar, "r") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise InputError("%s: bad JSON at line %d" % (sidecar, exc.lineno))
    try:
        from .binding import recount
        splats = [
            BoundGaussian(triangle_id=int(b["triangle_id"]),
                          local_mu=np.asarray(b["local_mu"], dtype=np.float64),
                          local_scale=np.asarray(b["local_scale"], dtype=np.float64),
                          local_rotation=np.asarray(b["local_rotation"], dtype=np.float64),
                          opacity=float(b["opacity"]),
                          sh=np.asarray(b["sh"], dtype=np.float64))
            for b in doc["bindings"]
        ]
        num_triangles = int(doc["num_triangles"])
        bound = BoundScene(bound=splats,
                           per_triangle_count=recount(splats, num_triangles),
                           sh_degree=int(doc["sh_degree"]))
        template = TemplateMesh(
            vertices=np.asarray(doc["template"]["vertices"], dtype=np.float64),
            triangles=np.asarray(doc["template"]["triangles"], dtype=np.int64))
        basis = _basis_from_tensors(
            {k: np.asarray(v, dtype=np.float64) for k, v in doc["basis"].items()},
            str(sidecar))
        hp = doc["head_params"]
        head_params = HeadParams(
            translation=np.asarray(hp["translation"], dtype=np.float64),
            global_rotation=np.asarray(hp["rotation"], dtype=np.float64),
            jaw=np.asarray(hp["jaw"], dtype=np.float64),
            expression=np.asarray(hp["expression"], dtype=np.float64),
            shape=np.asarray(hp["shape"], dtype=np.float64))
    except KeyError as exc:
        raise InputError("%s: missing sidecar field %s" % (sidecar, exc))
    return bound, template, basis, head_params


# ---------------------------------------------------------------------------
# Trajectory CSV + JSON sidecar


def write_trajectory(path: PathLike, traj: KeypointTrajectory) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "kp", "x", "y"])
        for t in range(traj.num_frames):
            for k in range(traj.num_keypoints):
                writer.writerow([t, k, repr(float(traj.points[t, k, 0])),
                                 repr(float(traj.points[t, k, 1]))])
    sidecar = path.with_suffix(path.suffix + ".json")
    with open(sidecar, "w") as fh:
        json.dump({"fps": traj.fps}, fh)
        fh.write("\n")
    return sidecar


def read_trajectory(path: PathLike) -> KeypointTrajectory:
    path = Path(path)
    rows: Dict[Tuple[int, int], Tuple[float, float]] = {}
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["frame", "kp", "x", "y"]:
            raise InputError("%s:1: expected header frame,kp,x,y" % path)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows[(int(row[0]), int(row[1]))] = (float(row[2]), float(row[3]))
            except (ValueError, IndexError):
                raise InputError("%s:%d: malformed row" % (path, lineno))
    if not rows:
        raise InputError("%s: empty trajectory" % path)
    num_frames = max(t for t, _ in rows) + 1
    num_kp = max(k for _, k in rows) + 1
    if len(rows) != num_frames * num_kp:
        raise InputError("%s: missing (frame, kp) entries" % path)
    points = np.empty((num_frames, num_kp, 2))
    for (t, k), (x, y) in rows.items():
        points[t, k] = (x, y)
    fps = 25.0
    sidecar = path.with_suffix(path.suffix + ".json")
    if sidecar.exists():
        with open(sidecar, "r") as fh:
            fps = float(json.load(fh).get("fps", 25.0))
    return KeypointTrajectory(points=points, fps=fps)


# ---------------------------------------------------------------------------
# Images


def write_image(path: PathLike, image: Image) -> None:
    """PNG (RGBA, 8 bit) or PPM (P6, RGB over background) by extension."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        rgb = np.clip(np.rint(image.rgb() * 255.0), 0, 255).astype(np.uint8)
        with open(path, "wb") as fh:
            fh.write(b"P6\n%d %d\n255\n" % (rgb.shape[1], rgb.shape[0]))
            fh.write(rgb.tobytes())
        return
    rgba = np.clip(np.rint(image.rgba * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(rgba, mode="RGBA").save(path)


def read_image(path: PathLike) -> Image:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        with open(path, "rb") as fh:
            data = fh.read()
        fields, offset = [], 0
        while len(fields) < 4:
            while offset < len(data) and data[offset:offset + 1].isspace():
                offset += 1
            if data[offset:offset + 1] == b"#":
                offset = data.find(b"\n", offset) + 1
                continue
            start = offset
            while offset < len(data) and not data[offset:offset + 1].isspace():
                offset += 1
            if start == offset:
                raise InputError("%s: truncated PPM header at byte %d" % (path, offset))
            fields.append(data[start:offset])
        offset += 1  # single whitespace after maxval
        if fields[0] != b"P6":
            raise InputError("%s: not a P6 PPM (byte 0)" % path)
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
        need = w * h * 3
        if maxval != 255 or len(data) - offset < need:
            raise InputError("%s: bad or truncated PPM body at byte %d" % (path, offset))
        rgb = np.frombuffer(data, dtype=np.uint8, count=need,
                            offset=offset).reshape(h, w, 3) / 255.0
        rgba = np.concatenate([rgb, np.ones((h, w, 1))], axis=2)
        return Image(rgba=rgba, background=np.zeros(3))
    pil = PILImage.open(path).convert("RGBA")
    rgba = np.asarray(pil, dtype=np.float64) / 255.0
    return Image(rgba=rgba, background=np.zeros(3))
