"""Triangle meshes, exact nearest-vertex queries and voxelized intersection volumes."""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from ..errors import EmptyIndex, InvariantViolation, OpenMesh, ParseError
from .transform import RigidTransform

NORMAL_TOL = 1e-6


def vertex_normals(vertices, faces):
    """Area-weighted vertex normals; vertices without faces get a radial normal."""
    V = np.asarray(vertices, dtype=float)
    F = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    n = np.zeros_like(V)
    if len(F):
        fn = np.cross(V[F[:, 1]] - V[F[:, 0]], V[F[:, 2]] - V[F[:, 0]])
        for c in range(3):
            np.add.at(n, F[:, c], fn)
    norm = np.linalg.norm(n, axis=1)
    lonely = norm < 1e-300
    if np.any(lonely):
        radial = V[lonely] - V.mean(axis=0)
        radial[np.linalg.norm(radial, axis=1) < 1e-300] = (0.0, 0.0, 1.0)
        n[lonely] = radial
        norm = np.linalg.norm(n, axis=1)
    return n / norm[:, None]


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    vertex_normals: np.ndarray | None = None

    def __post_init__(self):
        V = np.array(self.vertices, dtype=float).reshape(-1, 3)
        F = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(F) and (F.min() < 0 or F.max() >= len(V)):
            raise InvariantViolation("face index out of range")
        N = vertex_normals(V, F) if self.vertex_normals is None else np.array(self.vertex_normals, dtype=float).reshape(-1, 3)
        if N.shape != V.shape:
            raise InvariantViolation("normals must match vertices")
        if len(N) and np.max(np.abs(np.linalg.norm(N, axis=1) - 1.0)) > NORMAL_TOL:
            raise InvariantViolation("vertex normals must have unit length")
        for a in (V, F, N):
            a.setflags(write=False)
        object.__setattr__(self, "vertices", V)
        object.__setattr__(self, "faces", F)
        object.__setattr__(self, "vertex_normals", N)

    def transformed(self, transform: RigidTransform):
        return TriMesh(transform.apply(self.vertices), self.faces,
                       self.vertex_normals @ transform.rotation.T)

    def translated(self, offset):
        return TriMesh(self.vertices + np.asarray(offset, dtype=float), self.faces, self.vertex_normals)

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def volume(self):
        """Signed volume by the divergence theorem (m^3); positive for outward winding."""
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return float(np.sum(np.einsum("ij,ij->i", a, np.cross(b, c))) / 6.0)


class SpatialIndex:
    """Exact nearest-vertex queries; equidistant vertices resolve to the lowest index."""

    _TIE_RTOL = 1e-9

    def __init__(self, points):
        self.points = np.array(points, dtype=float).reshape(-1, 3)
        self.points.setflags(write=False)
        # large leaves: queries often come from well outside the surface, where small leaves cost more
        self._tree = cKDTree(self.points, leafsize=64) if len(self.points) else None

    def __len__(self):
        return len(self.points)

    def query(self, queries):
        """Nearest vertex index and distance for each query row."""
        if self._tree is None:
            raise EmptyIndex("spatial index is empty")
        q = np.asarray(queries, dtype=float)
        flat = q.reshape(-1, 3)
        if len(self.points) == 1:
            idx = np.zeros(len(flat), dtype=np.int64)
            dist = np.linalg.norm(flat - self.points[0], axis=1)
            return idx.reshape(q.shape[:-1]), dist.reshape(q.shape[:-1])
        d, i = self._tree.query(flat, k=2)
        idx = i[:, 0].astype(np.int64)
        dist = d[:, 0]
        tied = d[:, 1] <= d[:, 0] * (1.0 + self._TIE_RTOL) + 1e-15
        for r in np.flatnonzero(tied):
            cands = np.array(self._tree.query_ball_point(flat[r], d[r, 0] * (1.0 + self._TIE_RTOL) + 1e-15), dtype=np.int64)
            if len(cands) == 0:
                continue
            diff = self.points[cands] - flat[r]
            sq = np.einsum("ij,ij->i", diff, diff)
            best = np.lexsort((cands, sq))[0]
            idx[r] = cands[best]
            dist[r] = np.sqrt(sq[best])
        return idx.reshape(q.shape[:-1]), dist.reshape(q.shape[:-1])


def build_index(mesh_or_points):
    pts = mesh_or_points.vertices if isinstance(mesh_or_points, TriMesh) else mesh_or_points
    return SpatialIndex(pts)


def nearest_vertex(index, query):
    i, d = index.query(np.asarray(query, dtype=float).reshape(1, 3))
    return int(i[0]), float(d[0])


# ---------------------------------------------------------------- primitives

def box(size=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0), divisions=1):
    """Axis-aligned closed box with outward winding; each face is a divisions x divisions grid."""
    size = np.asarray(size, dtype=float)
    center = np.asarray(center, dtype=float)
    n = int(divisions)
    verts, faces, lookup = [], [], {}

    def vid(p):
        key = tuple(p)
        if key not in lookup:
            lookup[key] = len(verts)
            verts.append(p)
        return lookup[key]

    g = np.arange(n + 1)
    for axis in range(3):
        u, v = (axis + 1) % 3, (axis + 2) % 3
        for side in (0, n):
            ids = np.empty((n + 1, n + 1), dtype=np.int64)
            for a in g:
                for b in g:
                    p = [0, 0, 0]
                    p[axis], p[u], p[v] = side, a, b
                    ids[a, b] = vid(p)
            for a in range(n):
                for b in range(n):
                    q = (ids[a, b], ids[a + 1, b], ids[a + 1, b + 1], ids[a, b + 1])
                    if side == n:
                        faces += [(q[0], q[1], q[2]), (q[0], q[2], q[3])]
                    else:
                        faces += [(q[0], q[2], q[1]), (q[0], q[3], q[2])]
    V = (np.array(verts, dtype=float) / n - 0.5) * size + center
    return TriMesh(V, np.array(faces))


def icosphere(radius=1.0, subdivisions=2, center=(0.0, 0.0, 0.0)):
    t = (1.0 + 5 ** 0.5) / 2.0
    V = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    F = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    V = [np.array(v, dtype=float) / np.linalg.norm(v) for v in V]
    for _ in range(subdivisions):
        cache, newF = {}, []

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = V[i] + V[j]
                V.append(m / np.linalg.norm(m))
                cache[key] = len(V) - 1
            return cache[key]

        for a, b, c in F:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            newF += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        F = newF
    unit = np.array(V)
    return TriMesh(unit * radius + np.asarray(center, dtype=float), np.array(F), unit)


def blob(radius=0.05, subdivisions=4, seed=0, amplitude=0.25, axes=(1.0, 0.8, 0.6), frequency=1.5):
    """Irregular closed surface: a star-shaped, low-frequency radial perturbation of an ellipsoid.

    Rotationally asymmetric, so surface-contact registration is well posed.
    """
    rng = np.random.default_rng(seed)
    sphere = icosphere(1.0, subdivisions)
    u = sphere.vertices
    freqs = rng.normal(size=(4, 3)) * frequency
    phases = rng.uniform(0, 2 * np.pi, size=4)
    weights = rng.uniform(0.3, 1.0, size=4)
    bump = sum(w * np.sin(u @ f + p) for w, f, p in zip(weights, freqs, phases)) / weights.sum()
    r = radius * (1.0 + amplitude * bump)
    V = u * r[:, None] * np.asarray(axes, dtype=float)
    return TriMesh(V, sphere.faces)


# ---------------------------------------------------------------- file I/O

def save_obj(mesh, path):
    lines = ["# hoannot mesh"]
    lines += [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"vn {x!r} {y!r} {z!r}" for x, y, z in mesh.vertex_normals.tolist()]
    lines += [f"f {a + 1}//{a + 1} {b + 1}//{b + 1} {c + 1}//{c + 1}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path):
    V, N, F = [], [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                V.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vn":
                N.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(V) + i for i in idx]
                for k in range(1, len(idx) - 1):
                    F.append((idx[0], idx[k], idx[k + 1]))
        except (ValueError, IndexError) as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
    normals = None
    if N and len(N) == len(V):
        N = np.asarray(N, dtype=float)
        normals = N / np.linalg.norm(N, axis=1, keepdims=True)
    return TriMesh(np.asarray(V, dtype=float).reshape(-1, 3), np.asarray(F, dtype=np.int64).reshape(-1, 3), normals)


def save_ply(mesh, path):
    nv, nf = len(mesh.vertices), len(mesh.faces)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {nv}\n"
        "property double x\nproperty double y\nproperty double z\n"
        "property double nx\nproperty double ny\nproperty double nz\n"
        f"element face {nf}\n"
        "property list uchar int vertex_indices\nend_header\n"
    ).encode("ascii")
    vdata = np.concatenate([mesh.vertices, mesh.vertex_normals], axis=1).astype("<f8")
    fdata = np.zeros(nf, dtype=[("n", "u1"), ("i", "<i4", (3,))])
    fdata["n"] = 3
    fdata["i"] = mesh.faces
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(vdata.tobytes())
        fh.write(fdata.tobytes())


_PLY_TYPES = {"char": "i1", "uchar": "u1", "short": "<i2", "ushort": "<u2", "int": "<i4",
              "uint": "<u4", "float": "<f4", "double": "<f8", "int8": "i1", "uint8": "u1",
              "int32": "<i4", "uint32": "<u4", "float32": "<f4", "float64": "<f8"}


def load_ply(path):
    """Binary little-endian PLY with vertex x/y/z (optional nx/ny/nz) and triangle/polygon faces."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise ParseError(f"{path}: not a PLY file")
    body = raw[raw.index(b"\n", end) + 1:]
    elements, current = [], None
    for line in raw[:end].decode("ascii").splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "binary_little_endian":
            raise ParseError(f"{path}: only binary_little_endian PLY is supported")
        if parts[0] == "element":
            current = {"name": parts[1], "count": int(parts[2]), "props": []}
            elements.append(current)
        elif parts[0] == "property" and current is not None:
            if parts[1] == "list":
                current["props"].append((parts[4], "list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]]))
            else:
                current["props"].append((parts[2], _PLY_TYPES[parts[1]]))
    offset = 0
    V = N = None
    F = []
    for el in elements:
        if all(len(p) == 2 for p in el["props"]):
            dt = np.dtype([(p[0], p[1]) for p in el["props"]])
            arr = np.frombuffer(body, dtype=dt, count=el["count"], offset=offset)
            offset += dt.itemsize * el["count"]
            if el["name"] == "vertex":
                V = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(float)
                if "nx" in dt.names:
                    N = np.stack([arr["nx"], arr["ny"], arr["nz"]], axis=1).astype(float)
        else:
            for _ in range(el["count"]):
                for p in el["props"]:
                    if len(p) == 4:
                        ct, it = np.dtype(p[2]), np.dtype(p[3])
                        n = int(np.frombuffer(body, ct, 1, offset)[0])
                        offset += ct.itemsize
                        idx = np.frombuffer(body, it, n, offset).astype(np.int64)
                        offset += it.itemsize * n
                        if el["name"] == "face":
                            F.extend((idx[0], idx[k], idx[k + 1]) for k in range(1, n - 1))
                    else:
                        offset += np.dtype(p[1]).itemsize
    if V is None:
        raise ParseError(f"{path}: no vertex element")
    if N is not None:
        N = N / np.linalg.norm(N, axis=1, keepdims=True)
    return TriMesh(V, np.asarray(F, dtype=np.int64).reshape(-1, 3), N)


def load_mesh(path):
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return load_obj(path)
    if suffix == ".ply":
        return load_ply(path)
    raise ParseError(f"unsupported mesh format: {path}")


def save_mesh(mesh, path):
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return save_obj(mesh, path)
    if suffix == ".ply":
        return save_ply(mesh, path)
    raise ParseError(f"unsupported mesh format: {path}")


# ---------------------------------------------------------------- voxelization

# Voxel centers are tested at a tiny offset (in voxel units) so rays miss mesh edges
# and vertices and no center lies exactly on a face.
_RAY_JITTER = np.array([1.2345678e-6, 2.7182818e-6, 3.1415926e-6])


def _crossing_winding(mesh, origin, shape, voxel, axis):
    """Inside test of voxel centers from signed ray crossings along `axis`.

    Crossings are signed by face orientation, so overlapping closed components
    (a union of shells) count as inside. Returns a bool grid in (x, y, z) order.
    """
    b, c = (axis + 1) % 3, (axis + 2) % 3
    nb, nc, na = shape[b], shape[c], shape[axis]
    eb = _RAY_JITTER[b] * voxel
    ec = _RAY_JITTER[c] * voxel
    tri = mesh.vertices[mesh.faces]
    pb, pc, pa = tri[:, :, b], tri[:, :, c], tri[:, :, axis]

    def index_range(lo, hi, org, eps, n):
        i0 = np.ceil((lo - org - eps) / voxel - 0.5).astype(np.int64)
        i1 = np.floor((hi - org - eps) / voxel - 0.5).astype(np.int64)
        return np.clip(i0, 0, n), np.clip(i1, -1, n - 1)

    j0, j1 = index_range(pb.min(1), pb.max(1), origin[b], eb, nb)
    k0, k1 = index_range(pc.min(1), pc.max(1), origin[c], ec, nc)
    cj = np.maximum(j1 - j0 + 1, 0)
    ck = np.maximum(k1 - k0 + 1, 0)
    cnt = cj * ck
    delta = np.zeros((nb, nc, na + 1), dtype=np.int32)
    total = int(cnt.sum())
    if total:
        t = np.repeat(np.arange(len(tri)), cnt)
        local = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        j = j0[t] + local // ck[t]
        k = k0[t] + local % ck[t]
        yb = origin[b] + (j + 0.5) * voxel + eb
        yc = origin[c] + (k + 0.5) * voxel + ec
        x0, x1, x2 = pb[t, 0], pb[t, 1], pb[t, 2]
        y0, y1, y2 = pc[t, 0], pc[t, 1], pc[t, 2]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        w0 = (x1 - yb) * (y2 - yc) - (x2 - yb) * (y1 - yc)
        w1 = (x2 - yb) * (y0 - yc) - (x0 - yb) * (y2 - yc)
        w2 = (x0 - yb) * (y1 - yc) - (x1 - yb) * (y0 - yc)
        hit = (area != 0) & (((w0 >= 0) & (w1 >= 0) & (w2 >= 0)) | ((w0 <= 0) & (w1 <= 0) & (w2 <= 0)))
        safe = np.where(area != 0, area, 1.0)
        wa = (w0 * pa[t, 0] + w1 * pa[t, 1] + w2 * pa[t, 2]) / safe
        first = np.floor((wa - origin[axis] - _RAY_JITTER[axis] * voxel) / voxel - 0.5).astype(np.int64) + 1
        first = np.clip(first, 0, na)
        sign = -np.sign(area).astype(np.int32)  # entering where the normal opposes the ray
        np.add.at(delta, (j[hit], k[hit], first[hit]), sign[hit])
    winding = np.cumsum(delta[:, :, :na], axis=2)
    inside = winding != 0  # indexed (b, c, axis)
    order = np.argsort([b, c, axis])
    return np.transpose(inside, order)


def voxel_occupancy(mesh, origin, shape, voxel, max_inconsistent=0.01):
    """Inside test for voxel centers by ray winding numbers with a 3-axis majority vote."""
    votes = np.stack([_crossing_winding(mesh, origin, shape, voxel, a) for a in range(3)])
    count = votes.sum(axis=0)
    n = count.size
    if n:
        inconsistent = np.count_nonzero((count > 0) & (count < 3)) / n
        if inconsistent > max_inconsistent:
            raise OpenMesh(f"inside tests disagree across axes for {inconsistent:.1%} of voxels")
    return count >= 2


def _grid_bounds(lo, hi, voxel):
    origin = np.floor(lo / voxel) * voxel
    shape = np.maximum(np.ceil((hi - origin) / voxel).astype(np.int64), 0)
    return origin, shape


def voxel_intersection_volume(mesh_a, mesh_b, voxel=0.001):
    """Volume (cm^3) of voxel centers lying inside both closed meshes."""
    if voxel <= 0:
        raise ValueError("voxel must be positive")
    if len(mesh_a.faces) == 0 or len(mesh_b.faces) == 0:
        return 0.0
    lo_a, hi_a = mesh_a.bounds()
    lo_b, hi_b = mesh_b.bounds()
    lo, hi = np.maximum(lo_a, lo_b), np.minimum(hi_a, hi_b)
    if np.any(hi <= lo):
        return 0.0
    origin, shape = _grid_bounds(lo, hi, voxel)
    if np.any(shape == 0):
        return 0.0
    inside = voxel_occupancy(mesh_a, origin, tuple(shape), voxel) & voxel_occupancy(mesh_b, origin, tuple(shape), voxel)
    return float(np.count_nonzero(inside)) * voxel ** 3 * 1e6


def voxel_volume(mesh, voxel=0.001):
    """Voxelized volume (cm^3) of a single closed mesh."""
    lo, hi = mesh.bounds()
    origin, shape = _grid_bounds(lo, hi, voxel)
    return float(np.count_nonzero(voxel_occupancy(mesh, origin, tuple(shape), voxel))) * voxel ** 3 * 1e6
