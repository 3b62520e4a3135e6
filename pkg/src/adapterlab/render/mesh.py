"""Triangle meshes: extraction, rasterization, TSDF fusion and texture blending."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from skimage import measure

from .camera import Camera
from .output import RayContribs, RenderOutput
from .volume import VolumeGrid, trilinear_matrix

NEAR = 1e-6


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray  # (P, 3)
    faces: np.ndarray  # (Q, 3) int
    uv: np.ndarray | None = None  # (P, 2), texture rows run top to bottom as v decreases
    texture: np.ndarray | None = None  # (Ht, Wt, 3)
    vertex_colors: np.ndarray | None = None  # (P, 3)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.uv is not None:
            object.__setattr__(self, "uv", np.asarray(self.uv, dtype=np.float64).reshape(len(v), 2))
        if self.vertex_colors is not None:
            object.__setattr__(self, "vertex_colors", np.asarray(self.vertex_colors, dtype=np.float64).reshape(len(v), 3))
        if self.texture is not None:
            object.__setattr__(self, "texture", np.asarray(self.texture, dtype=np.float64))

    @classmethod
    def empty(cls) -> "TriMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def face_normals(self, normalize: bool = True) -> np.ndarray:
        p = self.vertices[self.faces]
        n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        if not normalize:
            return n
        length = np.linalg.norm(n, axis=1, keepdims=True)
        return np.divide(n, length, out=np.zeros_like(n), where=length > 0)

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(normalize=False), axis=1)

    def vertex_normals(self) -> np.ndarray:
        acc = np.zeros_like(self.vertices)
        n = self.face_normals(normalize=False)
        for k in range(3):
            np.add.at(acc, self.faces[:, k], n)
        length = np.linalg.norm(acc, axis=1, keepdims=True)
        return np.divide(acc, length, out=np.zeros_like(acc), where=length > 0)

    def diagonal(self) -> float:
        if len(self.vertices) == 0:
            return 0.0
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    def cleanup(self, area_eps: float = 1e-14) -> "TriMesh":
        """Drop zero-area or repeated-index faces and unreferenced vertices."""
        f = self.faces
        ok = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
        ok &= self.face_areas() > area_eps
        f = f[ok]
        used = np.unique(f)
        remap = -np.ones(len(self.vertices), dtype=np.int64)
        remap[used] = np.arange(len(used))
        pick = lambda a: None if a is None else a[used]  # noqa: E731
        return TriMesh(self.vertices[used], remap[f], pick(self.uv), self.texture, pick(self.vertex_colors))

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        return replace(self, vertices=vertices)


def icosphere(subdivisions: int = 0, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriMesh:
    t = (1.0 + 5**0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    v = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = v[a] + v[b]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriMesh(np.asarray(v) * radius + np.asarray(center), np.asarray(faces))


def grid_mesh(n: int, size: float = 2.0) -> TriMesh:
    """Regular (n x n vertex) triangulated square in the z = 0 plane."""
    g = np.linspace(-size / 2, size / 2, n)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    verts = np.stack([xx.ravel(), yy.ravel(), np.zeros(n * n)], axis=1)
    idx = np.arange(n * n).reshape(n, n)
    a, b, c, d = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel(), idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    faces = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    uv = np.stack([(xx.ravel() + size / 2) / size, (yy.ravel() + size / 2) / size], axis=1)
    return TriMesh(verts, faces, uv=uv)


def isosurface(values: np.ndarray, level: float, bounds) -> TriMesh:
    """Surface where ``values`` crosses ``level``; faces wind so normals point to lower values."""
    values = np.asarray(values, dtype=np.float64)
    if values.min() >= level or values.max() <= level:
        return TriMesh.empty()
    bounds = np.asarray(bounds, dtype=np.float64)
    spacing = (bounds[1] - bounds[0]) / (np.array(values.shape) - 1)
    verts, faces, _, _ = measure.marching_cubes(values, level=level, spacing=tuple(spacing), allow_degenerate=False)
    mesh = TriMesh(verts + bounds[0], faces.astype(np.int64)).cleanup()
    if mesh.is_empty:
        return mesh
    # orient: face normals should follow the descending direction of the field
    centroid = mesh.vertices[mesh.faces].mean(axis=1)
    n = mesh.face_normals()
    h = 0.25 * spacing.min()
    mat = trilinear_matrix(np.concatenate([centroid + h * n, centroid - h * n]), values.shape[0], bounds)
    s = mat @ values.ravel()
    ahead, behind = s[: len(n)], s[len(n):]
    if np.sum(ahead - behind) > 0:
        mesh = TriMesh(mesh.vertices, mesh.faces[:, ::-1])
    return mesh


def marching_cubes(grid: VolumeGrid, iso: float) -> TriMesh:
    """Triangulate the level set density == iso, with vertices on cell edges."""
    return isosurface(grid.density, iso, grid.bounds)


def _raster_pairs(xy: np.ndarray, width: int, height: int):
    """Enumerate (triangle, pixel) pairs whose pixel centre is covered.

    ``xy`` is (F, 3, 2) in pixel units.  Returns triangle ids, flat pixel ids
    and barycentric coordinates (N, 3).
    """
    if len(xy) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3))
    lo = xy.min(axis=1)
    hi = xy.max(axis=1)
    x0 = np.clip(np.ceil(lo[:, 0] - 0.5), 0, width).astype(np.int64)
    x1 = np.clip(np.floor(hi[:, 0] - 0.5) + 1, 0, width).astype(np.int64)
    y0 = np.clip(np.ceil(lo[:, 1] - 0.5), 0, height).astype(np.int64)
    y1 = np.clip(np.floor(hi[:, 1] - 0.5) + 1, 0, height).astype(np.int64)
    nx = np.maximum(x1 - x0, 0)
    ny = np.maximum(y1 - y0, 0)
    counts = nx * ny
    owner = np.repeat(np.arange(len(xy)), counts)
    local = np.arange(int(counts.sum())) - np.repeat(np.cumsum(counts) - counts, counts)
    nxo = np.maximum(nx[owner], 1)
    px = x0[owner] + local % nxo
    py = y0[owner] + local // nxo
    p = np.stack([px + 0.5, py + 0.5], axis=1)
    a, b, c = xy[owner, 0], xy[owner, 1], xy[owner, 2]

    def edge(p0, p1, q):
        return (p1[:, 0] - p0[:, 0]) * (q[:, 1] - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (q[:, 0] - p0[:, 0])

    area = edge(a, b, c)
    with np.errstate(divide="ignore", invalid="ignore"):
        b0 = edge(b, c, p) / area
        b1 = edge(c, a, p) / area
    b2 = 1.0 - b0 - b1
    tol = -1e-10
    inside = (area != 0) & (b0 >= tol) & (b1 >= tol) & (b2 >= tol)
    bary = np.stack([b0, b1, b2], axis=1)[inside]
    return owner[inside], (py * width + px)[inside], bary


@dataclass(frozen=True, eq=False)
class MeshBuffers:
    face: np.ndarray  # (H, W) int, -1 where empty
    bary: np.ndarray  # (H, W, 3) perspective-corrected
    depth: np.ndarray  # (H, W), 0 where empty


def rasterize(mesh: TriMesh, cam: Camera) -> MeshBuffers:
    h, w = cam.height, cam.width
    face = -np.ones(h * w, dtype=np.int64)
    bary = np.zeros((h * w, 3))
    depth = np.zeros(h * w)
    if mesh.is_empty:
        return MeshBuffers(face.reshape(h, w), bary.reshape(h, w, 3), depth.reshape(h, w))
    pc = cam.world_to_camera(mesh.vertices)
    tri = pc[mesh.faces]
    front = (tri[:, :, 2] > NEAR).all(axis=1)
    fid = np.flatnonzero(front)
    tri = tri[fid]
    xy = cam.focal * tri[:, :, :2] / tri[:, :, 2:3] + np.asarray(cam.principal_point)
    owner, pix, b = _raster_pairs(xy, w, h)
    inv_z = 1.0 / tri[owner, :, 2]
    bz = b * inv_z
    z = 1.0 / bz.sum(axis=1)
    bp = bz * z[:, None]
    order = np.lexsort((fid[owner], z, pix))
    pix, z, bp, f = pix[order], z[order], bp[order], fid[owner][order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    face[pix[first]] = f[first]
    bary[pix[first]] = bp[first]
    depth[pix[first]] = z[first]
    return MeshBuffers(face.reshape(h, w), bary.reshape(h, w, 3), depth.reshape(h, w))


def sample_bilinear(image: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample ``image`` at continuous pixel coordinates (pixel centres at +0.5), clamped at borders."""
    h, w = image.shape[:2]
    fx = np.clip(x - 0.5, 0, w - 1)
    fy = np.clip(y - 0.5, 0, h - 1)
    x0 = np.minimum(np.floor(fx).astype(np.int64), w - 2) if w > 1 else np.zeros_like(fx, dtype=np.int64)
    y0 = np.minimum(np.floor(fy).astype(np.int64), h - 2) if h > 1 else np.zeros_like(fy, dtype=np.int64)
    tx = fx - x0 if w > 1 else np.zeros_like(fx)
    ty = fy - y0 if h > 1 else np.zeros_like(fy)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    if image.ndim == 3:
        tx, ty = tx[..., None], ty[..., None]
    top = image[y0, x0] * (1 - tx) + image[y0, x1] * tx
    bot = image[y1, x0] * (1 - tx) + image[y1, x1] * tx
    return top * (1 - ty) + bot * ty


def sample_texture(texture: np.ndarray, uv: np.ndarray) -> np.ndarray:
    ht, wt = texture.shape[:2]
    return sample_bilinear(texture, uv[..., 0] * wt, (1.0 - uv[..., 1]) * ht)


def render_mesh(mesh: TriMesh, cam: Camera, background=(1.0, 1.0, 1.0), default_color=0.8) -> RenderOutput:
    """Hard-coverage z-buffer render; colour from texture, vertex colours, or a constant."""
    buf = rasterize(mesh, cam)
    h, w = cam.height, cam.width
    hit = buf.face >= 0
    rgb = np.broadcast_to(np.asarray(background, dtype=np.float64), (h, w, 3)).copy()
    normal = np.zeros((h, w, 3))
    if hit.any():
        f = mesh.faces[buf.face[hit]]
        b = buf.bary[hit]
        if mesh.texture is not None and mesh.uv is not None:
            uv = np.einsum("nk,nkc->nc", b, mesh.uv[f])
            rgb[hit] = sample_texture(mesh.texture, uv)
        elif mesh.vertex_colors is not None:
            rgb[hit] = np.einsum("nk,nkc->nc", b, mesh.vertex_colors[f])
        else:
            rgb[hit] = default_color
        n = mesh.face_normals()[buf.face[hit]] @ cam.rotation.T
        points = buf.depth[hit][:, None] * cam.pixel_rays()[hit]
        flip = (n * points).sum(axis=1) > 0
        n[flip] *= -1
        normal[hit] = n
    pix = np.flatnonzero(hit.ravel())
    contribs = RayContribs.from_sorted(pix, np.ones(len(pix)), buf.depth.ravel()[pix], h * w)
    return RenderOutput(rgb, hit.astype(np.float64), buf.depth, normal, contribs)


def _surface_depth_at(mesh: TriMesh, cam: Camera, buf: MeshBuffers, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Depth of the front-most face (per the z-buffer at the nearest pixel) along the ray through (u, v)."""
    h, w = cam.height, cam.width
    col = np.clip(np.floor(u).astype(np.int64), 0, w - 1)
    row = np.clip(np.floor(v).astype(np.int64), 0, h - 1)
    f = buf.face[row, col]
    out = np.full(len(u), np.inf)
    hit = f >= 0
    if not hit.any():
        return out
    tri = cam.world_to_camera(mesh.vertices[mesh.faces[f[hit]]])
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    cx, cy = cam.principal_point
    ray = np.stack([(u[hit] - cx) / cam.focal, (v[hit] - cy) / cam.focal, np.ones(hit.sum())], axis=1)
    num = (n * tri[:, 0]).sum(axis=1)
    den = (n * ray).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(np.abs(den) > 1e-15, num / den, buf.depth[row[hit], col[hit]])
    out[hit] = z
    return out


def blend_view_colors(points, normals, views, cams, mesh: TriMesh, power: float = 1.0, bias: float | None = None):
    """Visibility- and angle-weighted average of view colours at surface points.

    A point is visible in a view when it projects inside the image onto
    foreground (alpha > 0.5) and its depth agrees with the mesh's own front
    surface within ``bias``.  Weights are max(0, |cos theta|)^power, where theta
    is between the surface normal and the direction to the camera.  Returns
    (colors, weight sums).
    """
    points = np.asarray(points, dtype=np.float64)
    bias = 1e-3 * max(mesh.diagonal(), 1e-12) if bias is None else bias
    acc = np.zeros((len(points), 3))
    wsum = np.zeros(len(points))
    for view, cam in zip(views, cams):
        buf = rasterize(mesh, cam)
        u, v, z = cam.project(points)
        inside = (z > NEAR) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        surf = np.full(len(points), np.inf)
        if inside.any():
            surf[inside] = _surface_depth_at(mesh, cam, buf, u[inside], v[inside])
        visible = inside & (np.abs(surf - z) <= bias)
        if not visible.any():
            continue
        uu, vv = u[visible], v[visible]
        alpha = sample_bilinear(view[..., 3], uu, vv)
        to_cam = cam.center - points[visible]
        to_cam /= np.linalg.norm(to_cam, axis=1, keepdims=True)
        cos = np.abs((normals[visible] * to_cam).sum(axis=1))
        wv = np.where(alpha > 0.5, cos**power, 0.0)
        acc[visible] += wv[:, None] * sample_bilinear(view[..., :3], uu, vv)
        wsum[visible] += wv
    colors = np.divide(acc, wsum[:, None], out=np.zeros_like(acc), where=wsum[:, None] > 0)
    return colors, wsum


def texel_surface_points(mesh: TriMesh, size: tuple[int, int]):
    """Rasterize the mesh in UV space; returns (texel mask, 3D points, face normals) per texel."""
    ht, wt = size
    uvp = np.stack([mesh.uv[:, 0] * wt, (1.0 - mesh.uv[:, 1]) * ht], axis=1)
    owner, pix, b = _raster_pairs(uvp[mesh.faces], wt, ht)
    order = np.lexsort((owner, pix))
    owner, pix, b = owner[order], pix[order], b[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    owner, pix, b = owner[first], pix[first], b[first]
    pts = np.einsum("nk,nkc->nc", b, mesh.vertices[mesh.faces[owner]])
    normals = mesh.face_normals()[owner]
    mask = np.zeros(ht * wt, dtype=bool)
    mask[pix] = True
    return mask.reshape(ht, wt), pix, pts, normals


def backproject_texture(views: np.ndarray, cams, mesh: TriMesh, size: tuple[int, int] = (64, 64), power: float = 1.0, bias=None):
    """Blend (V, H, W, >=4) views into the mesh's UV texture.

    Returns (texture, filled) where ``filled`` marks texels that received
    non-zero total weight.
    """
    if mesh.uv is None:
        raise ValueError("mesh has no uv coordinates")
    ht, wt = size
    _, pix, pts, normals = texel_surface_points(mesh, size)
    colors, wsum = blend_view_colors(pts, normals, views, cams, mesh, power, bias)
    texture = np.zeros((ht * wt, 3))
    filled = np.zeros(ht * wt, dtype=bool)
    texture[pix] = colors
    filled[pix] = wsum > 0
    return texture.reshape(ht, wt, 3), filled.reshape(ht, wt)


def tsdf_fuse(depths, cams, voxel: float, trunc: float, bounds=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))) -> TriMesh:
    """Fuse z-depth maps (0 or non-finite = no surface) into a mesh.

    Each view votes min(1, sdf / trunc) for voxels in front of or inside the
    truncation band of its surface and +1 for voxels on rays that hit nothing;
    votes are averaged.  Voxels hidden deeper than the band in every view that
    sees them become -1 (interior); voxels no view sees count as empty.  The
    surface is the zero level set.
    """
    depths = list(depths)
    if not depths:
        raise ValueError("no views to fuse")
    if trunc < 2 * voxel:
        raise ValueError("trunc must be at least twice the voxel size")
    bounds = np.asarray(bounds, dtype=np.float64)
    n = np.maximum(np.round((bounds[1] - bounds[0]) / voxel).astype(int) + 1, 2)
    axes = [np.linspace(bounds[0, i], bounds[1, i], n[i]) for i in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    total = np.zeros(len(pts))
    weight = np.zeros(len(pts))
    hidden = np.zeros(len(pts), dtype=bool)
    for depth, cam in zip(depths, cams):
        depth = np.where(np.isfinite(depth), depth, 0.0)
        u, v, z = cam.project(pts)
        inside = (z > NEAR) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        idx = np.flatnonzero(inside)
        d = depth[np.floor(v[idx]).astype(int), np.floor(u[idx]).astype(int)]
        sdf = np.where(d > 0, d - z[idx], np.inf)
        deep = sdf < -trunc
        hidden[idx[deep]] = True
        near = idx[~deep]
        total[near] += np.minimum(1.0, sdf[~deep] / trunc)
        weight[near] += 1.0
    tsdf = np.where(weight > 0, total / np.maximum(weight, 1), np.where(hidden, -1.0, 1.0)).reshape(tuple(n))
    if len(set(tsdf.shape)) != 1:
        raise ValueError("tsdf_fuse needs cubic bounds")
    return isosurface(-tsdf, 0.0, bounds)


def volume_to_mesh(grid: VolumeGrid, iso: float) -> TriMesh:
    """Iso-surface with vertex colours taken from the grid's colour field."""
    mesh = marching_cubes(grid, iso)
    if mesh.is_empty:
        return mesh
    mat = trilinear_matrix(mesh.vertices, grid.resolution, grid.bounds)
    colors = np.clip(mat @ grid.color.reshape(-1, 3), 0.0, 1.0)
    return replace(mesh, vertex_colors=colors)
