"""File formats: PLY point clouds / meshes, voxel grids, camera lists.

Voxel grids are a JSON header next to a raw little-endian float32 payload.
The payload holds the D^3 occupancy values (C order, x slowest) followed by
the D^3 x F feature block when ``feature_count > 0``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np

from .geometry import Camera, MeshSurface, PointCloud, VoxelGrid

PathLike = Union[str, Path]

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def dumps_json(obj) -> str:
    """Stable JSON text used for every output file."""
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path: PathLike, obj) -> None:
    Path(path).write_text(dumps_json(obj))


def read_json(path: PathLike):
    return json.loads(Path(path).read_text())


# --------------------------------------------------------------------------
# PLY


def write_ply(path: PathLike, geometry: Union[PointCloud, MeshSurface], binary: bool = True,
              colors: Optional[np.ndarray] = None) -> None:
    if isinstance(geometry, PointCloud):
        verts, faces = geometry.points, None
        colors = geometry.colors if colors is None else colors
    else:
        verts, faces = geometry.vertices, geometry.faces
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {len(verts)}",
              "property float x", "property float y", "property float z"]
    if colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    if faces is not None:
        header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    rgb = None if colors is None else np.round(np.clip(colors, 0, 1) * 255).astype(np.uint8)

    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
            if rgb is not None:
                fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
            rec = np.zeros(len(verts), dtype=fields)
            rec["x"], rec["y"], rec["z"] = verts.T
            if rgb is not None:
                rec["red"], rec["green"], rec["blue"] = rgb.T
            fh.write(rec.tobytes())
            if faces is not None:
                frec = np.zeros(len(faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
                frec["n"] = 3
                frec["idx"] = faces
                fh.write(frec.tobytes())
        else:
            lines = []
            for i, v in enumerate(verts.astype(np.float32)):
                row = " ".join(repr(float(c)) for c in v)
                if rgb is not None:
                    row += " " + " ".join(str(int(c)) for c in rgb[i])
                lines.append(row)
            if faces is not None:
                lines += ["3 " + " ".join(str(int(i)) for i in f) for f in faces]
            fh.write(("\n".join(lines) + "\n").encode("ascii"))


def _parse_header(fh):
    if fh.readline().strip() != b"ply":
        raise ValueError("not a PLY file")
    fmt = None
    elements = []
    while True:
        line = fh.readline()
        if not line:
            raise ValueError("truncated PLY header")
        tok = line.decode("ascii").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append({"name": tok[1], "count": int(tok[2]), "props": []})
        elif tok[0] == "property":
            if tok[1] == "list":
                elements[-1]["props"].append((tok[4], "list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
            else:
                elements[-1]["props"].append((tok[2], _PLY_TYPES[tok[1]]))
        elif tok[0] == "end_header":
            return fmt, elements


def read_ply(path: PathLike) -> Union[PointCloud, MeshSurface]:
    """Read ascii or binary little-endian PLY; returns a mesh when faces exist."""
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh)
        if fmt not in ("ascii", "binary_little_endian"):
            raise ValueError(f"unsupported PLY format {fmt}")
        data = {}
        if fmt == "ascii":
            tokens = iter(fh.read().decode("ascii").split())
            for el in elements:
                rows = []
                for _ in range(el["count"]):
                    row = {}
                    for p in el["props"]:
                        if p[1] == "list":
                            n = int(next(tokens))
                            row[p[0]] = [float(next(tokens)) for _ in range(n)]
                        else:
                            row[p[0]] = float(next(tokens))
                    rows.append(row)
                data[el["name"]] = rows
        else:
            for el in elements:
                if any(p[1] == "list" for p in el["props"]):
                    rows = []
                    for _ in range(el["count"]):
                        row = {}
                        for p in el["props"]:
                            if p[1] == "list":
                                cnt_t = np.dtype("<" + p[2])
                                n = int(np.frombuffer(fh.read(cnt_t.itemsize), cnt_t)[0])
                                it = np.dtype("<" + p[3])
                                row[p[0]] = np.frombuffer(fh.read(n * it.itemsize), it).tolist()
                            else:
                                t = np.dtype("<" + p[1])
                                row[p[0]] = float(np.frombuffer(fh.read(t.itemsize), t)[0])
                        rows.append(row)
                    data[el["name"]] = rows
                else:
                    dt = np.dtype([(p[0], "<" + p[1]) for p in el["props"]])
                    arr = np.frombuffer(fh.read(dt.itemsize * el["count"]), dt)
                    data[el["name"]] = arr
    verts = data.get("vertex", [])
    if isinstance(verts, np.ndarray):
        xyz = np.stack([verts["x"], verts["y"], verts["z"]], 1).astype(np.float64)
        names = verts.dtype.names
        rgb = np.stack([verts[c] for c in ("red", "green", "blue")], 1) / 255.0 if "red" in names else None
    else:
        xyz = np.array([[r["x"], r["y"], r["z"]] for r in verts], dtype=np.float64).reshape(-1, 3)
        rgb = (np.array([[r["red"], r["green"], r["blue"]] for r in verts]) / 255.0
               if verts and "red" in verts[0] else None)
    faces = data.get("face")
    if faces is not None and len(faces):
        key = next(k for k in faces[0] if k in ("vertex_indices", "vertex_index"))
        tris = []
        for f in faces:
            idx = [int(i) for i in f[key]]
            tris += [(idx[0], idx[i], idx[i + 1]) for i in range(1, len(idx) - 1)]
        return MeshSurface(xyz, np.array(tris, dtype=np.int64))
    return PointCloud(xyz, rgb)


# --------------------------------------------------------------------------
# voxel grids


def write_voxel_grid(path: PathLike, grid: VoxelGrid) -> Path:
    """Write ``<name>.json`` + ``<name>.raw``; returns the header path."""
    path = Path(path)
    header = path.with_suffix(".json")
    payload = path.with_suffix(".raw")
    blocks = [grid.occupancy.astype("<f4").ravel()]
    if grid.n_features:
        blocks.append(grid.features.astype("<f4").ravel())
    payload.write_bytes(np.concatenate(blocks).tobytes())
    write_json(header, {
        "resolution": grid.resolution,
        "origin": [float(v) for v in grid.origin],
        "voxel_size": grid.voxel_size,
        "feature_count": grid.n_features,
        "dense_features": bool(grid.dense_features),
        "payload": payload.name,
        "dtype": "<f4",
        "order": "C (x, y, z[, feature])",
    })
    return header


def read_voxel_grid(path: PathLike) -> VoxelGrid:
    header_path = Path(path).with_suffix(".json")
    h = read_json(header_path)
    raw = np.frombuffer((header_path.parent / h["payload"]).read_bytes(), dtype="<f4").astype(np.float64)
    D, F = int(h["resolution"]), int(h["feature_count"])
    occ = raw[: D ** 3].reshape(D, D, D)
    feats = raw[D ** 3:].reshape(D, D, D, F) if F else None
    return VoxelGrid(D, h["origin"], h["voxel_size"], np.clip(occ, 0.0, 1.0), feats,
                     bool(h.get("dense_features", False)))


# --------------------------------------------------------------------------
# cameras


def write_cameras(path: PathLike, cams: Iterable[Camera]) -> None:
    write_json(path, [dict(id=i, **c.to_dict()) for i, c in enumerate(cams)])


def read_cameras(path: PathLike) -> list[Camera]:
    return [Camera.from_dict(d) for d in read_json(path)]
