"""Iso-surface extraction from sparse TSDF volumes and binary PLY I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._mc_tables import TRI_TABLE
from .geometry import pack_keys

_CORNERS = np.array(
    [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]], dtype=np.int64
)
_EDGES = np.array(
    [[0, 1], [1, 2], [2, 3], [3, 0], [4, 5], [5, 6], [6, 7], [7, 4], [0, 4], [1, 5], [2, 6], [3, 7]], dtype=np.int64
)
_TRI = np.full((256, 16), -1, dtype=np.int64)
for _i, _row in enumerate(TRI_TABLE):
    _TRI[_i, : len(_row)] = _row


class MeshFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if np.isnan(self.vertices).any():
            raise ValueError("mesh has NaN vertex coordinates")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def __len__(self):
        return len(self.faces)

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def vertex_normals(self) -> np.ndarray:
        v = self.vertices[self.faces]
        fn = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        n = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(n, self.faces[:, k], fn)
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return np.where(norm > 0, n / np.where(norm > 0, norm, 1.0), 0.0)


def marching_cubes(volume, iso: float = 0.0, min_occupancy: float | None = None, values=None) -> TriangleMesh:
    """Extract the ``iso`` surface of ``volume.pred_tsdf`` (or ``values``).

    A cube is processed only when all eight corner voxels are allocated (and,
    with ``min_occupancy``, predicted occupied); other cubes are skipped, so
    surfaces at the allocation frontier stay open. Vertices are shared
    between neighbouring cubes and ordered by edge key; faces are wound so
    their normals point toward increasing TSDF.
    """
    vals = np.asarray(volume.pred_tsdf if values is None else values, dtype=np.float64)
    usable = np.ones(len(volume), dtype=bool)
    if min_occupancy is not None:
        usable &= volume.pred_occ >= min_occupancy
    if len(volume) == 0 or not usable.any():
        return TriangleMesh.empty()

    base = volume.coords[usable]
    corner_idx = np.stack([volume.lookup(base + off) for off in _CORNERS], axis=1)
    ok = (corner_idx >= 0).all(axis=1)
    ok[ok] = usable[corner_idx[ok]].all(axis=1)
    base, corner_idx = base[ok], corner_idx[ok]
    if len(base) == 0:
        return TriangleMesh.empty()
    cv = vals[corner_idx]
    case = ((cv < iso).astype(np.int64) << np.arange(8)).sum(axis=1)
    active = (case != 0) & (case != 255)
    base, cv, case = base[active], cv[active], case[active]
    if len(base) == 0:
        return TriangleMesh.empty()

    rows = _TRI[case]  # (M, 16)
    tri_edges = rows[:, :15].reshape(len(rows), 5, 3)
    has_tri = tri_edges[:, :, 0] >= 0
    cube_of_tri = np.repeat(np.arange(len(rows)), has_tri.sum(axis=1))
    edge_of_tri = tri_edges[has_tri]  # (T, 3)

    # canonical edge: (lower corner coordinate, axis)
    a = _EDGES[edge_of_tri, 0]
    b = _EDGES[edge_of_tri, 1]
    ca = base[cube_of_tri][:, None, :] + _CORNERS[a]
    cb = base[cube_of_tri][:, None, :] + _CORNERS[b]
    lo = np.minimum(ca, cb)
    axis = np.argmax(np.abs(cb - ca), axis=2)
    edge_key = np.stack([pack_keys(lo).reshape(-1), axis.reshape(-1)], axis=1)
    uniq, inverse = np.unique(edge_key, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1, 3)

    # per unique edge: value at the low and high corner
    va_all = cv[cube_of_tri[:, None], a]
    vb_all = cv[cube_of_tri[:, None], b]
    a_is_low = (ca == lo).all(axis=2)
    v_lo = np.where(a_is_low, va_all, vb_all).reshape(-1)
    v_hi = np.where(a_is_low, vb_all, va_all).reshape(-1)
    # every occurrence of an edge sees the same two corner values
    first = np.zeros(len(uniq), dtype=np.int64)
    first[inverse.reshape(-1)] = np.arange(inverse.size)
    lo_flat = lo.reshape(-1, 3)[first]
    vl, vh = v_lo[first], v_hi[first]
    t = (iso - vl) / (vh - vl)
    step = np.zeros((len(uniq), 3))
    step[np.arange(len(uniq)), uniq[:, 1]] = 1.0
    s = volume.voxel_size
    verts = volume.origin + (lo_flat + 0.5 + t[:, None] * step) * s
    faces = inverse[:, ::-1].copy()
    return TriangleMesh(verts, faces)


# ---------------------------------------------------------------------------
# PLY

_PLY_TYPES = {
    "char": "i1",
    "uchar": "u1",
    "short": "<i2",
    "ushort": "<u2",
    "int": "<i4",
    "uint": "<u4",
    "float": "<f4",
    "double": "<f8",
    "int8": "i1",
    "uint8": "u1",
    "int16": "<i2",
    "uint16": "<u2",
    "int32": "<i4",
    "uint32": "<u4",
    "float32": "<f4",
    "float64": "<f8",
}


def mesh_to_ply_bytes(mesh: TriangleMesh) -> bytes:
    header = [
        "ply",
        "format binary_little_endian 1.0",
        "comment sparsefusion",
        f"element vertex {len(mesh.vertices)}",
        "property double x",
        "property double y",
        "property double z",
    ]
    with_normals = mesh.normals is not None and len(mesh.normals) == len(mesh.vertices)
    if with_normals:
        header += ["property double nx", "property double ny", "property double nz"]
    header += [f"element face {len(mesh.faces)}", "property list uchar int vertex_indices", "end_header"]
    head = ("\n".join(header) + "\n").encode("ascii")
    vdata = np.hstack([mesh.vertices, mesh.normals]) if with_normals else mesh.vertices
    fdt = np.dtype([("n", "u1"), ("i", "<i4", (3,))])
    faces = np.empty(len(mesh.faces), dtype=fdt)
    faces["n"] = 3
    faces["i"] = mesh.faces
    return head + np.ascontiguousarray(vdata, dtype="<f8").tobytes() + faces.tobytes()


def export_mesh(mesh: TriangleMesh, path) -> None:
    Path(path).write_bytes(mesh_to_ply_bytes(mesh))


def mesh_from_ply_bytes(blob: bytes) -> TriangleMesh:
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply\n") or end < 0:
        raise MeshFormatError("missing PLY header", 0)
    body = end + len(b"end_header\n")
    elements = []
    pos = 0
    for raw in blob[:end].split(b"\n"):
        line = raw.decode("ascii", errors="replace").strip()
        where = pos
        pos += len(raw) + 1
        if not line or line.startswith(("ply", "comment", "obj_info")):
            continue
        parts = line.split()
        if parts[0] == "format":
            if parts[1:2] != ["binary_little_endian"]:
                raise MeshFormatError(f"unsupported PLY format {' '.join(parts[1:])!r}", where)
        elif parts[0] == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise MeshFormatError(f"bad element line {line!r}", where)
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise MeshFormatError("property before element", where)
            if parts[1] == "list":
                if parts[2] not in _PLY_TYPES or parts[3] not in _PLY_TYPES:
                    raise MeshFormatError(f"unknown list type in {line!r}", where)
                elements[-1][2].append((parts[4], ("list", parts[2], parts[3])))
            else:
                if parts[1] not in _PLY_TYPES:
                    raise MeshFormatError(f"unknown property type {parts[1]!r}", where)
                elements[-1][2].append((parts[2], parts[1]))
        else:
            raise MeshFormatError(f"unexpected header line {line!r}", where)

    off = body
    vertices = np.zeros((0, 3))
    normals = None
    faces = np.zeros((0, 3), dtype=np.int64)
    for name, count, props in elements:
        if any(isinstance(t, tuple) for _, t in props):
            if len(props) != 1:
                raise MeshFormatError(f"element {name!r}: only a single list property is supported", off)
            _, (_, ctype, itype) = props[0]
            dt = np.dtype([("n", _PLY_TYPES[ctype]), ("i", _PLY_TYPES[itype], (3,))])
            need = dt.itemsize * count
            if off + need > len(blob):
                raise MeshFormatError(f"element {name!r} truncated", len(blob))
            arr = np.frombuffer(blob, dtype=dt, count=count, offset=off)
            if count and np.any(arr["n"] != 3):
                bad = int(np.argmax(arr["n"] != 3))
                raise MeshFormatError("only triangle faces are supported", off + bad * dt.itemsize)
            if name == "face":
                faces = arr["i"].astype(np.int64)
            off += need
        else:
            dt = np.dtype([(p, _PLY_TYPES[t]) for p, t in props])
            need = dt.itemsize * count
            if off + need > len(blob):
                raise MeshFormatError(f"element {name!r} truncated", len(blob))
            arr = np.frombuffer(blob, dtype=dt, count=count, offset=off)
            if name == "vertex":
                vertices = np.stack([arr[c].astype(np.float64) for c in ("x", "y", "z")], axis=1)
                if all(c in arr.dtype.names for c in ("nx", "ny", "nz")):
                    normals = np.stack([arr[c].astype(np.float64) for c in ("nx", "ny", "nz")], axis=1)
            off += need
    if off != len(blob):
        raise MeshFormatError("trailing bytes after last element", off)
    try:
        return TriangleMesh(vertices, faces, normals)
    except ValueError as exc:
        raise MeshFormatError(str(exc), body) from None


def import_mesh(path) -> TriangleMesh:
    return mesh_from_ply_bytes(Path(path).read_bytes())
