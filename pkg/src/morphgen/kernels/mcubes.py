"""Marching cubes with a generated, face-consistent case table.

Rather than hard-coding the classic 256-case table, the triangulation for each
corner configuration is derived at import time.  On every cube face the
crossing points are joined so that inside corners are always cut off
(separated); neighbouring cubes therefore agree on every shared face and the
extracted surface is watertight.  Segments are oriented so that the resulting
polygons face from inside (value > iso) to outside.

Vertex coordinates are in array index order (axis 0, axis 1, axis 2).
"""
import numpy as np

from .._accel import njit, pick

# corner i sits at (bit 2, bit 1, bit 0) = (z, y, x) offset
CORNER_OFFSETS = np.array([[(i >> 2) & 1, (i >> 1) & 1, i & 1] for i in range(8)], dtype=np.int64)

# axis index in (z, y, x) coordinates for each corner bit
_BIT_AXIS = {0: 2, 1: 1, 2: 0}

# interpolation parameter is kept off the cube corners so distinct edges never
# produce coincident vertices (and hence zero-area faces)
EDGE_T_EPS = 1e-3


def _build_edges():
    edges = []
    for i in range(8):
        for b in range(3):
            if not (i >> b) & 1:
                edges.append((i, i | (1 << b), _BIT_AXIS[b]))
    return edges


EDGES = _build_edges()
EDGE_C0 = np.array([e[0] for e in EDGES], dtype=np.int64)
EDGE_C1 = np.array([e[1] for e in EDGES], dtype=np.int64)
EDGE_AXIS = np.array([e[2] for e in EDGES], dtype=np.int64)
_EDGE_INDEX = {frozenset(e[:2]): n for n, e in enumerate(EDGES)}


def _build_faces():
    faces = []
    for b in range(3):
        axis = _BIT_AXIS[b]
        for v in (0, 1):
            corners = [i for i in range(8) if ((i >> b) & 1) == v]
            normal = np.zeros(3)
            normal[axis] = 1.0 if v else -1.0
            pts = CORNER_OFFSETS[corners].astype(float)
            centre = pts.mean(axis=0)
            # counter-clockwise around the outward normal
            u = pts[0] - centre
            w = np.cross(normal, u)
            ang = [np.arctan2(np.dot(p - centre, w), np.dot(p - centre, u)) for p in pts]
            faces.append([corners[j] for j in np.argsort(ang)])
    return faces


FACES = _build_faces()


def _polygons_for_config(config):
    inside = [(config >> i) & 1 for i in range(8)]
    nxt = {}
    for quad in FACES:
        crossings = []
        for m in range(4):
            a, b = quad[m], quad[(m + 1) % 4]
            if inside[a] != inside[b]:
                crossings.append((_EDGE_INDEX[frozenset((a, b))], "entry" if inside[b] else "exit"))
        if not crossings:
            continue
        start = next(j for j, c in enumerate(crossings) if c[1] == "entry")
        ordered = crossings[start:] + crossings[:start]
        for j in range(0, len(ordered), 2):
            entry, exit_ = ordered[j][0], ordered[j + 1][0]
            nxt[entry] = exit_
    loops = []
    seen = set()
    for e0 in sorted(nxt):
        if e0 in seen:
            continue
        loop = [e0]
        seen.add(e0)
        e = nxt[e0]
        while e != e0:
            loop.append(e)
            seen.add(e)
            e = nxt[e]
        loops.append(loop)
    return loops


def _faces_of_edges():
    out = {}
    for fi, quad in enumerate(FACES):
        for m in range(4):
            out.setdefault(_EDGE_INDEX[frozenset((quad[m], quad[(m + 1) % 4]))], set()).add(fi)
    return out


_EDGE_FACES = _faces_of_edges()


def _fan_root(loop):
    # a diagonal between two crossings on one cube face would coincide with the
    # neighbouring cube's diagonal and make a non-manifold edge
    n = len(loop)
    for r in range(n):
        rot = loop[r:] + loop[:r]
        if all(not (_EDGE_FACES[rot[0]] & _EDGE_FACES[rot[j]]) for j in range(2, n - 1)):
            return rot
    raise AssertionError(f"no manifold fan for loop {loop}")


def _edge_midpoint(e):
    return (CORNER_OFFSETS[EDGE_C0[e]] + CORNER_OFFSETS[EDGE_C1[e]]) / 2.0


def _build_table():
    polys = [_polygons_for_config(c) for c in range(256)]
    # decide the global winding from the single-inside-corner case
    loop = polys[1][0]
    p = [_edge_midpoint(e) for e in loop[:3]]
    normal = np.cross(p[1] - p[0], p[2] - p[0])
    flip = np.dot(normal, np.mean(p, axis=0) - CORNER_OFFSETS[0]) < 0
    tris = []
    for loops in polys:
        t = []
        for loop in loops:
            if flip:
                loop = loop[::-1]
            loop = _fan_root(loop)
            for j in range(1, len(loop) - 1):
                t.append((loop[0], loop[j], loop[j + 1]))
        tris.append(t)
    max_tris = max(len(t) for t in tris)
    table = np.full((256, max_tris, 3), -1, dtype=np.int64)
    ntri = np.zeros(256, dtype=np.int64)
    for c, t in enumerate(tris):
        ntri[c] = len(t)
        if t:
            table[c, : len(t)] = t
    return table, ntri


TRI_TABLE, TRI_COUNT = _build_table()


@njit
def _interp(vol, iso, z, y, x, axis, eps):
    v0 = vol[z, y, x]
    if axis == 0:
        v1 = vol[z + 1, y, x]
    elif axis == 1:
        v1 = vol[z, y + 1, x]
    else:
        v1 = vol[z, y, x + 1]
    t = (iso - v0) / (v1 - v0)
    if t < eps:
        t = eps
    elif t > 1.0 - eps:
        t = 1.0 - eps
    return t


@njit
def _mc_numba(vol, iso, table, ntri, c0, axis_of, offsets, eps):
    D, H, W = vol.shape
    S = D * H * W
    n_faces = 0
    for z in range(D - 1):
        for y in range(H - 1):
            for x in range(W - 1):
                cfg = 0
                for i in range(8):
                    if vol[z + offsets[i, 0], y + offsets[i, 1], x + offsets[i, 2]] > iso:
                        cfg |= 1 << i
                n_faces += ntri[cfg]
    face_edges = np.empty((n_faces, 3), dtype=np.int64)
    used = np.zeros(3 * S, dtype=np.bool_)
    f = 0
    for z in range(D - 1):
        for y in range(H - 1):
            for x in range(W - 1):
                cfg = 0
                for i in range(8):
                    if vol[z + offsets[i, 0], y + offsets[i, 1], x + offsets[i, 2]] > iso:
                        cfg |= 1 << i
                for m in range(ntri[cfg]):
                    for j in range(3):
                        e = table[cfg, m, j]
                        c = c0[e]
                        gid = axis_of[e] * S + ((z + offsets[c, 0]) * H + (y + offsets[c, 1])) * W + (x + offsets[c, 2])
                        face_edges[f, j] = gid
                        used[gid] = True
                    f += 1
    vid = np.full(3 * S, -1, dtype=np.int64)
    nv = 0
    for g in range(3 * S):
        if used[g]:
            vid[g] = nv
            nv += 1
    verts = np.empty((nv, 3), dtype=np.float64)
    for g in range(3 * S):
        if used[g]:
            ax = g // S
            r = g - ax * S
            z = r // (H * W)
            y = (r // W) % H
            x = r % W
            t = _interp(vol, iso, z, y, x, ax, eps)
            k = vid[g]
            verts[k, 0] = z
            verts[k, 1] = y
            verts[k, 2] = x
            verts[k, ax] += t
    faces = np.empty((n_faces, 3), dtype=np.int64)
    for i in range(n_faces):
        for j in range(3):
            faces[i, j] = vid[face_edges[i, j]]
    return verts, faces


def _mc_numpy(vol, iso, table, ntri, c0, axis_of, offsets, eps):
    D, H, W = vol.shape
    S = D * H * W
    inside = vol > iso
    cfg = np.zeros((D - 1, H - 1, W - 1), dtype=np.int64)
    for i in range(8):
        dz, dy, dx = offsets[i]
        cfg |= inside[dz : D - 1 + dz, dy : H - 1 + dy, dx : W - 1 + dx].astype(np.int64) << i
    cfg = cfg.ravel()
    counts = ntri[cfg]
    cube_idx = np.repeat(np.arange(cfg.size), counts)
    slot = np.arange(cube_idx.size) - np.repeat(np.cumsum(counts) - counts, counts)
    local = table[cfg[cube_idx], slot]  # (F, 3) local edge ids
    cz = cube_idx // ((H - 1) * (W - 1))
    cy = (cube_idx // (W - 1)) % (H - 1)
    cx = cube_idx % (W - 1)
    corner = c0[local]
    gz = cz[:, None] + offsets[corner, 0]
    gy = cy[:, None] + offsets[corner, 1]
    gx = cx[:, None] + offsets[corner, 2]
    gid = axis_of[local] * S + (gz * H + gy) * W + gx
    uniq, inverse = np.unique(gid.ravel(), return_inverse=True)
    faces = inverse.reshape(-1, 3).astype(np.int64)
    ax = uniq // S
    r = uniq - ax * S
    verts = np.stack([r // (H * W), (r // W) % H, r % W], axis=1).astype(np.float64)
    z, y, x = verts[:, 0].astype(np.int64), verts[:, 1].astype(np.int64), verts[:, 2].astype(np.int64)
    v0 = vol[z, y, x].astype(np.float64)
    step = np.eye(3, dtype=np.int64)[ax]
    v1 = vol[z + step[:, 0], y + step[:, 1], x + step[:, 2]].astype(np.float64)
    t = np.clip((iso - v0) / (v1 - v0), eps, 1.0 - eps)
    verts[np.arange(len(uniq)), ax] += t
    return verts, faces


_mc = pick(_mc_numba, _mc_numpy)


def marching_cubes(volume, iso):
    """Extract the ``iso`` level set of a 3D grid.

    Returns ``(vertices, faces)``: float64 vertices of shape (V, 3) and int64
    triangle indices of shape (F, 3).  Voxels strictly greater than ``iso``
    count as inside.
    """
    vol = np.ascontiguousarray(volume, dtype=np.float64)
    if vol.ndim != 3 or min(vol.shape) < 2:
        raise ValueError(f"marching cubes needs a 3D grid with every extent >= 2, got shape {vol.shape}")
    return _mc(vol, float(iso), TRI_TABLE, TRI_COUNT, EDGE_C0, EDGE_AXIS, CORNER_OFFSETS, EDGE_T_EPS)
