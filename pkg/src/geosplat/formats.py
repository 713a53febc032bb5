"""Readers and writers for points, meshes, Gaussians, cameras, images and configs.

Gaussian checkpoints are binary little-endian PLY files with one ``double``
property per scalar, so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import configparser
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .scene import Camera, GaussianScene, ParameterError, SparsePointCloud, TriangleMesh, quat_to_rotmat


class FormatError(ValueError):
    pass


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1", "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2", "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class PlyElement:
    name: str
    count: int
    properties: list = field(default_factory=list)  # (name, dtype) or (name, count_dtype, item_dtype)


def _parse_header(fh, path):
    if fh.readline().strip() != b"ply":
        raise FormatError(f"{path}: missing 'ply' magic")
    fmt, elements = None, []
    while True:
        line = fh.readline()
        if not line:
            raise FormatError(f"{path}: header not terminated by end_header")
        parts = line.decode("ascii", "replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append(PlyElement(parts[1], int(parts[2])))
        elif parts[0] == "property":
            if not elements:
                raise FormatError(f"{path}: property before any element")
            if parts[1] == "list":
                elements[-1].properties.append((parts[4], _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]]))
            else:
                if parts[1] not in _PLY_TYPES:
                    raise FormatError(f"{path}: unknown property type {parts[1]!r}")
                elements[-1].properties.append((parts[2], _PLY_TYPES[parts[1]]))
        elif parts[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise FormatError(f"{path}: unsupported PLY format {fmt!r}")
    return fmt, elements


def read_ply(path) -> dict:
    """Parse a PLY file into ``{element: {property: array}}``; list properties give lists."""
    path = Path(path)
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh, path)
        body = fh.read()
    out = {}
    if fmt == "ascii":
        tokens = body.split()
        pos = 0
        for el in elements:
            cols = {p[0]: [] for p in el.properties}
            for _ in range(el.count):
                for prop in el.properties:
                    if len(prop) == 3:
                        k = int(tokens[pos])
                        cols[prop[0]].append(np.array(tokens[pos + 1:pos + 1 + k], dtype=prop[2]))
                        pos += 1 + k
                    else:
                        cols[prop[0]].append(tokens[pos])
                        pos += 1
            out[el.name] = {p[0]: (cols[p[0]] if len(p) == 3 else np.array(cols[p[0]], dtype=p[1]))
                            for p in el.properties}
        return out
    end = "<" if fmt == "binary_little_endian" else ">"
    pos = 0
    for el in elements:
        if all(len(p) == 2 for p in el.properties):
            dt = np.dtype([(p[0], end + p[1]) for p in el.properties])
            arr = np.frombuffer(body, dtype=dt, count=el.count, offset=pos)
            pos += dt.itemsize * el.count
            out[el.name] = {p[0]: arr[p[0]].astype(p[1]) for p in el.properties}
            continue
        cols = {p[0]: [] for p in el.properties}
        for _ in range(el.count):
            for prop in el.properties:
                if len(prop) == 3:
                    cdt, idt = np.dtype(end + prop[1]), np.dtype(end + prop[2])
                    k = int(np.frombuffer(body, cdt, 1, pos)[0])
                    pos += cdt.itemsize
                    cols[prop[0]].append(np.frombuffer(body, idt, k, pos).astype(prop[2]))
                    pos += idt.itemsize * k
                else:
                    dt = np.dtype(end + prop[1])
                    cols[prop[0]].append(np.frombuffer(body, dt, 1, pos)[0])
                    pos += dt.itemsize
        out[el.name] = {p[0]: (cols[p[0]] if len(p) == 3 else np.array(cols[p[0]], dtype=p[1]))
                        for p in el.properties}
    if pos > len(body):
        raise FormatError(f"{path}: file truncated")
    return out


def write_ply(path, vertex: dict, faces: Optional[np.ndarray] = None, binary: bool = True,
              types: Optional[dict] = None) -> None:
    """Write a vertex element (``{name: 1-D array}``) and optional triangle faces."""
    names = list(vertex)
    n = len(vertex[names[0]]) if names else 0
    rev = {"f8": "double", "f4": "float", "u1": "uchar", "i4": "int"}
    types = types or {}
    dts = {k: np.dtype(types.get(k, np.asarray(vertex[k]).dtype)).str[1:] for k in names}
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {n}"]
    header += [f"property {rev[dts[k]]} {k}" for k in names]
    if faces is not None:
        header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            dt = np.dtype([(k, "<" + dts[k]) for k in names])
            rec = np.empty(n, dtype=dt)
            for k in names:
                rec[k] = vertex[k]
            fh.write(rec.tobytes())
            if faces is not None:
                fdt = np.dtype([("k", "u1"), ("v", "<i4", (3,))])
                frec = np.empty(len(faces), dtype=fdt)
                frec["k"], frec["v"] = 3, faces
                fh.write(frec.tobytes())
        else:
            for i in range(n):
                fh.write((" ".join(repr(vertex[k][i].item()) if dts[k][0] == "f" else str(int(vertex[k][i]))
                                   for k in names) + "\n").encode("ascii"))
            if faces is not None:
                for f in faces:
                    fh.write(f"3 {f[0]} {f[1]} {f[2]}\n".encode("ascii"))


def _finite_or_raise(arr, path, what):
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{path}: non-finite values in {what}")


def load_points(path) -> SparsePointCloud:
    data = read_ply(path)
    if "vertex" not in data or not {"x", "y", "z"} <= set(data["vertex"]):
        raise FormatError(f"{path}: needs a vertex element with x, y, z")
    v = data["vertex"]
    pts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    _finite_or_raise(pts, path, "point coordinates")
    colors = None
    if {"red", "green", "blue"} <= set(v):
        colors = np.stack([v["red"], v["green"], v["blue"]], axis=1).astype(np.float64)
        if v["red"].dtype == np.uint8:
            colors /= 255.0
    return SparsePointCloud(pts, colors)


def save_points(path, cloud: SparsePointCloud, binary: bool = True) -> None:
    vert = {"x": cloud.points[:, 0], "y": cloud.points[:, 1], "z": cloud.points[:, 2]}
    if cloud.colors is not None:
        c = np.clip(np.round(cloud.colors * 255), 0, 255).astype(np.uint8)
        vert.update(red=c[:, 0], green=c[:, 1], blue=c[:, 2])
    write_ply(path, vert, binary=binary)


def _load_obj(path):
    verts, normals, faces, fnorm = [], [], [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vn":
                normals.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                refs = [p.split("/") for p in parts[1:]]
                vi = [int(r[0]) for r in refs]
                ni = [int(r[2]) if len(r) > 2 and r[2] else 0 for r in refs]
                vi = [i - 1 if i > 0 else len(verts) + i for i in vi]
                for k in range(1, len(vi) - 1):
                    faces.append([vi[0], vi[k], vi[k + 1]])
                    fnorm.append([ni[0], ni[k], ni[k + 1]])
        except (ValueError, IndexError) as exc:
            raise FormatError(f"{path}:{lineno}: malformed OBJ line {line!r}") from exc
    V, F = np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)
    N = None
    fn = np.array(fnorm, dtype=np.int64).reshape(-1, 3)
    if normals and len(fn) and np.all(fn > 0):
        vn = np.array(normals)
        N = np.zeros_like(V)
        N[F.ravel()] = vn[fn.ravel() - 1]
    return V, F, N


def load_mesh(path) -> TriangleMesh:
    """PLY or OBJ triangle mesh; normals are computed when the file has none."""
    path = Path(path)
    if path.suffix.lower() == ".obj":
        V, F, N = _load_obj(path)
    else:
        data = read_ply(path)
        v = data.get("vertex")
        if v is None or "face" not in data:
            raise FormatError(f"{path}: mesh PLY needs vertex and face elements")
        V = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
        key = "vertex_indices" if "vertex_indices" in data["face"] else "vertex_index"
        tris = []
        for poly in data["face"][key]:
            tris += [[poly[0], poly[k], poly[k + 1]] for k in range(1, len(poly) - 1)]
        F = np.array(tris, dtype=np.int64).reshape(-1, 3)
        N = np.stack([v["nx"], v["ny"], v["nz"]], axis=1).astype(np.float64) if {"nx", "ny", "nz"} <= set(v) else None
    _finite_or_raise(V, path, "mesh vertices")
    try:
        return TriangleMesh(V, F, N)
    except ParameterError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def save_mesh(path, mesh: TriangleMesh) -> None:
    V, N = mesh.vertices, mesh.normals
    write_ply(path, {"x": V[:, 0], "y": V[:, 1], "z": V[:, 2], "nx": N[:, 0], "ny": N[:, 1], "nz": N[:, 2]},
              faces=mesh.triangles)


GAUSSIAN_PROPS = (["x", "y", "z"] + [f"log_scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)]
                  + ["opacity_logit", "color_r", "color_g", "color_b"])


def save_gaussians(path, scene: GaussianScene) -> None:
    cols = np.concatenate([scene.mu, scene.log_scale, scene.rot, scene.opacity_logit[:, None], scene.color], axis=1)
    write_ply(path, {k: cols[:, i] for i, k in enumerate(GAUSSIAN_PROPS)}, types={k: "f8" for k in GAUSSIAN_PROPS})


def load_gaussians(path) -> GaussianScene:
    data = read_ply(path)
    v = data.get("vertex", {})
    missing = [k for k in GAUSSIAN_PROPS if k not in v]
    if missing:
        raise FormatError(f"{path}: missing Gaussian properties {missing}")
    cols = np.stack([np.asarray(v[k], dtype=np.float64) for k in GAUSSIAN_PROPS], axis=1)
    _finite_or_raise(cols, path, "Gaussian parameters")
    scene = GaussianScene(cols[:, 0:3], cols[:, 3:6], np.ones((len(cols), 4)), cols[:, 10], cols[:, 11:14])
    # keep stored quaternions verbatim so the round trip is bit-exact
    scene.rot = cols[:, 6:10].copy()
    if len(scene) and np.max(np.abs(np.linalg.norm(scene.rot, axis=1) - 1.0)) > 1e-6:
        scene.normalize_rotations()
    return scene


def camera_to_dict(cam: Camera) -> dict:
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy, "width": cam.width, "height": cam.height,
            "world_to_cam": [float(x) for x in cam.world_to_cam.ravel()], "near": cam.near_clip}


def load_cameras(path) -> list[Camera]:
    """JSON array of ``{fx, fy, cx, cy, width, height, world_to_cam[16], near}``."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, list):
        raise FormatError(f"{path}: expected a JSON array of cameras")
    cams = []
    for i, c in enumerate(raw):
        try:
            M = np.array(c["world_to_cam"], dtype=np.float64)
            if M.size != 16 or not np.all(np.isfinite(M)):
                raise FormatError(f"{path}: camera {i}: world_to_cam must be 16 finite numbers")
            cams.append(Camera(float(c["fx"]), float(c["fy"]), float(c["cx"]), float(c["cy"]),
                               int(c["width"]), int(c["height"]), M.reshape(4, 4), float(c.get("near", 0.01))))
        except KeyError as exc:
            raise FormatError(f"{path}: camera {i}: missing field {exc}") from exc
        except ParameterError as exc:
            raise FormatError(f"{path}: camera {i}: {exc}") from exc
    return cams


def save_cameras(path, cams) -> None:
    Path(path).write_text(json.dumps([camera_to_dict(c) for c in cams], indent=1))


def colmap_to_cameras(cameras_txt, images_txt) -> list[tuple[str, Camera]]:
    """Convert COLMAP text output to ``(image name, Camera)`` pairs sorted by name.

    Pinhole-family models only; distortion terms are dropped.
    """
    intr = {}
    for line in Path(cameras_txt).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        p = line.split()
        cid, model, w, h, params = int(p[0]), p[1], int(p[2]), int(p[3]), [float(x) for x in p[4:]]
        if model in ("SIMPLE_PINHOLE", "SIMPLE_RADIAL", "RADIAL"):
            intr[cid] = (params[0], params[0], params[1], params[2], w, h)
        elif model in ("PINHOLE", "OPENCV", "FULL_OPENCV"):
            intr[cid] = (params[0], params[1], params[2], params[3], w, h)
        else:
            raise FormatError(f"{cameras_txt}: unsupported camera model {model}")
    out = []
    lines = [ln for ln in Path(images_txt).read_text().splitlines() if not ln.startswith("#")]
    # image records alternate with their 2D point lists
    for i in range(0, len(lines), 2):
        p = lines[i].split()
        if len(p) < 10:
            continue
        q = np.array([float(x) for x in p[1:5]])
        t = np.array([float(x) for x in p[5:8]])
        cid, name = int(p[8]), p[9]
        if cid not in intr:
            raise FormatError(f"{images_txt}: image {name} references unknown camera {cid}")
        M = np.eye(4)
        M[:3, :3] = quat_to_rotmat(q)
        M[:3, 3] = t
        fx, fy, cx, cy, w, h = intr[cid]
        out.append((name, Camera(fx, fy, cx, cy, w, h, M)))
    return sorted(out, key=lambda x: x[0])


def colmap_points(points3d_txt) -> SparsePointCloud:
    pts, cols = [], []
    for line in Path(points3d_txt).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        p = line.split()
        pts.append([float(x) for x in p[1:4]])
        cols.append([int(x) / 255.0 for x in p[4:7]])
    return SparsePointCloud(np.array(pts).reshape(-1, 3), np.array(cols).reshape(-1, 3))


def save_image(path, img) -> None:
    """PNG (8-bit) or ASCII PPM depending on the suffix."""
    path = Path(path)
    arr = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if path.suffix.lower() == ".ppm":
        h, w = arr.shape[:2]
        rgb = arr.reshape(h, w, -1)[..., :3] if arr.ndim == 3 else np.repeat(arr[..., None], 3, axis=2)
        rows = "\n".join(" ".join(str(v) for v in row.ravel()) for row in rgb)
        path.write_text(f"P3\n{w} {h}\n255\n{rows}\n")
        return
    from PIL import Image

    Image.fromarray(arr).save(path)


def _read_ppm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos)
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic == "P3":
        vals = np.array(data[pos:].split(), dtype=np.float64)
    elif magic == "P6":
        dt = ">u2" if maxval > 255 else "u1"
        vals = np.frombuffer(data, dtype=dt, offset=pos + 1, count=w * h * 3).astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported PPM variant {magic}")
    if vals.size != w * h * 3:
        raise FormatError(f"{path}: expected {w * h * 3} samples, found {vals.size}")
    return vals.reshape(h, w, 3) / maxval


def load_image(path) -> np.ndarray:
    """Float RGB image in [0, 1], shape ``(H, W, 3)``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    if path.suffix.lower() in (".ppm", ".pnm"):
        return _read_ppm(path)
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


# config sections map onto these dataclasses
def _config_classes():
    from .density import AdcConfig
    from .geoinit import InitConfig
    from .surface import SurfaceOptConfig
    from .train import TrainSchedule

    return {"init": InitConfig, "surface": SurfaceOptConfig, "adc": AdcConfig, "schedule": TrainSchedule}


@dataclass
class ProjectConfig:
    points: Optional[str] = None
    cameras: Optional[str] = None
    images: Optional[str] = None
    mesh: Optional[str] = None
    output: str = "out"
    seed: int = 0
    sections: dict = field(default_factory=dict)

    def module_config(self, name: str):
        return _config_classes()[name](**self.sections.get(name, {}))

    def check_paths(self) -> None:
        for key in ("points", "cameras", "images", "mesh"):
            value = getattr(self, key)
            if value is not None and not Path(value).exists():
                raise FileNotFoundError(f"{key} path does not exist: {value}")


def _coerce(cls, key: str, text: str):
    known = {f.name: f for f in fields(cls)}
    if key not in known:
        raise FormatError(f"unknown option {key!r} for {cls.__name__}")
    if text.strip().lower() in ("none", ""):
        return None
    default = getattr(cls(), key)
    if isinstance(default, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, tuple):
        return tuple(int(x) for x in text.replace(",", " ").split())
    return float(text)


def load_config(path=None, overrides: Optional[dict] = None) -> ProjectConfig:
    """Parse the INI-style project config; ``overrides`` maps ``section.key`` to text."""
    parser = configparser.ConfigParser()
    if path is not None:
        if not Path(path).exists():
            raise FileNotFoundError(f"config not found: {path}")
        parser.read(path)
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, str(value))
    cfg = ProjectConfig()
    if parser.has_section("paths"):
        for key, value in parser.items("paths"):
            if key not in ("points", "cameras", "images", "mesh", "output"):
                raise FormatError(f"unknown path key {key!r}")
            # paths from the file are relative to the file; overrides to the cwd
            if path is not None and f"paths.{key}" not in (overrides or {}) and not Path(value).is_absolute():
                value = str(Path(path).parent / value)
            setattr(cfg, key, value)
    if parser.has_section("run"):
        cfg.seed = parser.getint("run", "seed", fallback=0)
    classes = _config_classes()
    for section in parser.sections():
        if section in ("paths", "run"):
            continue
        if section not in classes:
            raise FormatError(f"unknown config section [{section}]")
        cfg.sections[section] = {k: _coerce(classes[section], k, v) for k, v in parser.items(section)}
    return cfg


def write_config(path, cfg: ProjectConfig) -> None:
    parser = configparser.ConfigParser()
    parser["paths"] = {k: str(getattr(cfg, k)) for k in ("points", "cameras", "images", "mesh", "output")
                       if getattr(cfg, k) is not None}
    parser["run"] = {"seed": str(cfg.seed)}
    for name, values in cfg.sections.items():
        parser[name] = {k: (" ".join(map(str, v)) if isinstance(v, tuple) else str(v)) for k, v in values.items()}
    with open(path, "w") as fh:
        parser.write(fh)


def warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)
