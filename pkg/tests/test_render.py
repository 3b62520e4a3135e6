import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from PIL import Image
from scipy.integrate import cumulative_trapezoid

from adapterlab.render import (
    Camera,
    SplatSet,
    TriMesh,
    VolumeGrid,
    backproject_texture,
    composite_splats,
    grid_mesh,
    icosphere,
    lambertian_shade,
    marching_cubes,
    normals_from_depth,
    raymarch_volume,
    render_mesh,
    tsdf_fuse,
)
from adapterlab.render.io import read_obj, read_pfm, write_obj, write_pfm, write_png

BOX = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])


def front_cam(res=1, distance=3.0, focal=None):
    focal = 1.2 * res if focal is None else focal
    return Camera.look_at((0.0, 0.0, distance), (0.0, 0.0, 0.0), focal=focal, width=res, height=res)


def const_grid(value, n=9, color=(0.2, 0.5, 0.8)):
    d = np.full((n, n, n), float(value))
    return VolumeGrid(d, np.broadcast_to(np.asarray(color), (n, n, n, 3)).copy(), BOX)


def blob_grid(n=17, seed=0):
    rng = np.random.default_rng(seed)
    g = np.linspace(-1, 1, n)
    x, y, z = np.meshgrid(g, g, g, indexing="ij")
    d = 4.0 * np.exp(-(x**2 + y**2 + z**2) / 0.3) * (1 + 0.3 * rng.uniform(size=x.shape))
    c = np.stack([0.5 + 0.4 * x, 0.5 + 0.4 * y, 0.5 + 0.4 * z], axis=-1)
    return VolumeGrid(d, np.clip(c, 0, 1), BOX)


def sphere_depth(cam, radius, center=(0.0, 0.0, 0.0)):
    """z-depth of the first hit on an analytic sphere, inf on a miss."""
    d = cam.ray_directions().reshape(-1, 3)
    o = cam.center - np.asarray(center)
    a = (d * d).sum(1)
    b = 2 * d @ o
    c = o @ o - radius**2
    disc = b * b - 4 * a * c
    t = np.full(len(d), np.inf)
    hit = disc >= 0
    t[hit] = (-b[hit] - np.sqrt(disc[hit])) / (2 * a[hit])
    return t.reshape(cam.height, cam.width)


# ---------------------------------------------------------------- volume


@pytest.mark.parametrize("sigma0", [0.1, 0.8, 2.5])
def test_homogeneous_alpha_matches_transmittance(sigma0):
    length = 2.0
    out = raymarch_volume(const_grid(sigma0), front_cam(), step=length / 1024)
    expect = 1 - np.exp(-sigma0 * length)
    assert abs(out.alpha[0, 0] - expect) / expect < 1e-3


def test_zero_density_is_transparent():
    bg = (0.1, 0.3, 0.9)
    out = raymarch_volume(const_grid(0.0), front_cam(4), background=bg)
    assert_array_equal(out.alpha, 0.0)
    assert_array_equal(out.depth, 0.0)
    assert_allclose(out.rgb, np.broadcast_to(bg, (4, 4, 3)))
    assert_array_equal(out.per_ray_contribs.weights[out.per_ray_contribs.weights > 0], [])


def test_two_slab_weights_match_quadrature():
    n = 17
    nodes = np.linspace(-1, 1, n)
    prof = np.zeros(n)
    prof[(nodes >= 0.25) & (nodes <= 0.5)] = 1.5
    prof[(nodes >= -0.5) & (nodes <= -0.125)] = 0.7
    d = np.broadcast_to(prof, (n, n, n)).copy()
    grid = VolumeGrid(d, np.full((n, n, n, 3), 0.5), BOX)
    cam = front_cam(distance=3.0)
    out = raymarch_volume(grid, cam, step=2.0 / 1024)
    c = out.per_ray_contribs
    w, tau = c.weights, c.taus

    # oracle: p(tau) = T(tau) sigma(tau) along z = 3 - tau with the trilinear (here piecewise linear) profile
    taus = np.linspace(2.0, 4.0, 200_001)
    sig = np.interp(3.0 - taus, nodes, prof)
    p = np.exp(-cumulative_trapezoid(sig, taus, initial=0.0)) * sig
    split = 3.0 - 0.0625
    for lo, hi in ((2.0, split), (split, 4.0)):
        m = (taus >= lo) & (taus <= hi)
        ref = np.trapezoid(p[m], taus[m]) if hasattr(np, "trapezoid") else np.trapz(p[m], taus[m])
        got = w[(tau >= lo) & (tau < hi)].sum()
        assert abs(got - ref) / ref < 1e-3


def test_volume_contribs_sum_to_alpha():
    grid = blob_grid()
    out = raymarch_volume(grid, front_cam(16))
    assert_allclose(out.per_ray_contribs.totals(), out.alpha.ravel(), atol=1e-6)
    assert ((out.alpha >= 0) & (out.alpha <= 1)).all()
    fg = np.linalg.norm(out.normal, axis=-1) > 0
    assert fg.any()
    assert_allclose(np.linalg.norm(out.normal[fg], axis=-1), 1.0, atol=1e-9)
    assert (out.depth >= 0).all()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_alpha_is_monotone_in_density(seed):
    rng = np.random.default_rng(seed)
    n = 6
    d = rng.uniform(0, 2, (n, n, n))
    col = rng.uniform(size=(n, n, n, 3))
    bump = rng.uniform(0, 1, (n, n, n)) * (rng.uniform(size=(n, n, n)) < 0.3)
    cam = Camera.orbit(rng.uniform(0, 360), rng.uniform(-40, 40), 3.0, focal=10, width=8, height=8)
    a1 = raymarch_volume(VolumeGrid(d, col, BOX), cam).alpha
    a2 = raymarch_volume(VolumeGrid(d + bump, col, BOX), cam).alpha
    assert (a2 >= a1 - 1e-12).all()


def test_downsampled_render_matches_low_resolution():
    grid = blob_grid(seed=1)
    cam = Camera.orbit(30, 20, 3.0, focal=28.8, width=24, height=24)
    lo = raymarch_volume(grid, cam).rgbad()
    hi = raymarch_volume(grid, cam.scaled(48)).rgbad()
    box = hi.reshape(24, 2, 24, 2, 5).mean(axis=(1, 3))
    assert np.abs(box[..., :3] - lo[..., :3]).mean() < 2 / 255


# ---------------------------------------------------------------- splats


def test_single_splat_weight_and_depth():
    s = SplatSet([[0.0, 0.0, 0.0]], [0.2], [0.7], [[1.0, 0.0, 0.0]])
    out = composite_splats(s, front_cam())
    assert out.per_ray_contribs.for_pixel(0) == [(0.7, 3.0)]
    assert out.alpha[0, 0] == 0.7
    assert_allclose(out.depth[0, 0], 3.0, rtol=1e-15)


def test_two_splat_compositing():
    cam = Camera.look_at((0, 0, 0), (0, 0, 1), focal=1.0, width=1, height=1)
    s = SplatSet([[0, 0, 2.0], [0, 0, 1.0]], [0.1, 0.1], [0.5, 0.5], [[0, 0, 1], [1, 0, 0]])
    out = composite_splats(s, cam, background=(0, 0, 0))
    assert out.per_ray_contribs.for_pixel(0) == [(0.5, 1.0), (0.25, 2.0)]
    assert out.alpha[0, 0] == 0.75
    assert_allclose(out.rgb[0, 0], [0.5, 0, 0.25])


def random_splats(rng, m=20):
    return SplatSet(
        rng.uniform(-0.6, 0.6, (m, 3)), rng.uniform(0.05, 0.3, m), rng.uniform(0.05, 1.0, m), rng.uniform(size=(m, 3))
    )


def direct_alpha(splats, cam):
    """1 - prod(1 - a_m) with a_m the footprint-truncated Gaussian at each pixel centre."""
    h, w = cam.height, cam.width
    vv, uu = np.mgrid[0:h, 0:w] + 0.5
    keep = np.ones((h, w))
    for c, s, o in zip(splats.centers, splats.scales, splats.opacities):
        u, v, z = cam.project(c[None])
        s_px = cam.focal * s / z[0]
        d2 = (uu - u[0]) ** 2 + (vv - v[0]) ** 2
        a = np.where(d2 <= (3 * s_px) ** 2, o * np.exp(-0.5 * d2 / s_px**2), 0.0)
        keep *= 1 - a
    return 1 - keep


def test_random_splat_alpha_identity():
    rng = np.random.default_rng(0)
    cam = Camera.orbit(40, 15, 3.0, focal=30, width=24, height=24)
    for _ in range(3):
        s = random_splats(rng)
        out = composite_splats(s, cam)
        assert_allclose(out.alpha, direct_alpha(s, cam), atol=1e-9)
        assert_allclose(out.per_ray_contribs.totals(), out.alpha.ravel(), atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_splat_order_does_not_matter(seed):
    rng = np.random.default_rng(seed)
    s = random_splats(rng, 12)
    p = rng.permutation(12)
    t = SplatSet(s.centers[p], s.scales[p], s.opacities[p], s.colors[p])
    cam = Camera.orbit(rng.uniform(0, 360), 10, 3.0, focal=14, width=12, height=12)
    a, b = composite_splats(s, cam), composite_splats(t, cam)
    assert_array_equal(a.rgbad(), b.rgbad())
    assert_array_equal(a.per_ray_contribs.weights, b.per_ray_contribs.weights)


def test_splat_validation():
    with pytest.raises(ValueError):
        SplatSet([[0, 0, 0]], [0.0], [0.5], [[0, 0, 0]])
    with pytest.raises(ValueError):
        SplatSet([[0, 0, 0]], [0.1], [1.5], [[0, 0, 0]])
    out = composite_splats(SplatSet.empty(), front_cam(3))
    assert_array_equal(out.alpha, 0.0)


# ---------------------------------------------------------------- normals


def test_fronto_parallel_plane_normals():
    cam = front_cam(9)
    n = normals_from_depth(np.full((9, 9), 2.0), cam)
    assert_allclose(n[1:-1, 1:-1], np.broadcast_to([0, 0, -1.0], (7, 7, 3)), atol=1e-12)
    assert_array_equal(n[0], 0.0)


def test_tilted_plane_normals():
    # camera-space plane z - y = z0; along the pixel ray (x, y, 1) z the depth is z0 / (1 - y)
    cam = front_cam(15)
    z0 = 2.0
    y = cam.pixel_rays()[..., 1]
    n = normals_from_depth(z0 / (1 - y), cam)[1:-1, 1:-1].reshape(-1, 3)
    ref = np.array([0.0, 1.0, -1.0]) / np.sqrt(2)
    ang = np.degrees(np.arccos(np.clip(n @ ref, -1, 1)))
    assert ang.max() < 1.0


def test_normals_need_neighbours():
    assert_array_equal(normals_from_depth(np.array([[2.0]]), front_cam(1)), 0.0)
    with pytest.raises(ValueError):
        normals_from_depth(-np.ones((3, 3)), front_cam(3))


# ---------------------------------------------------------------- meshes


def sphere_grid(n=21, r=0.6, iso=5.0):
    g = np.linspace(-1, 1, n)
    x, y, z = np.meshgrid(g, g, g, indexing="ij")
    d = 2 * iso / (1 + np.exp(-(r - np.sqrt(x**2 + y**2 + z**2)) / 0.1))
    return VolumeGrid(d, np.full((n, n, n, 3), 0.5), BOX)


def test_marching_cubes_sphere():
    grid = sphere_grid()
    mesh = marching_cubes(grid, 5.0)
    radii = np.linalg.norm(mesh.vertices, axis=1)
    assert np.abs(radii - 0.6).max() < np.linalg.norm(grid.cell_size)
    assert (mesh.face_areas() > 0).all()
    assert mesh.faces.max() < len(mesh.vertices)


def test_marching_cubes_empty_and_plane():
    assert marching_cubes(const_grid(0.3), 1.0).is_empty
    n = 11
    g = np.linspace(-1, 1, n)
    x = np.meshgrid(g, g, g, indexing="ij")[0]
    grid = VolumeGrid(np.where(x < 0.1, 2.0, 0.0), np.zeros((n, n, n, 3)), BOX)
    mesh = marching_cubes(grid, 1.0)
    assert not mesh.is_empty
    assert np.abs(mesh.vertices[:, 0] - 0.1).max() <= grid.cell_size[0]


def test_marching_cubes_monotone_rescale():
    grid = sphere_grid(n=13)
    base = marching_cubes(grid, 5.0)
    affine = VolumeGrid(5.0 + 0.5 * (grid.density - 5.0), grid.color, BOX)
    m1 = marching_cubes(affine, 5.0)
    assert_array_equal(m1.faces, base.faces)
    # the extraction runs in single precision
    assert_allclose(m1.vertices, base.vertices, atol=1e-6)
    squared = VolumeGrid(grid.density**2 / 5.0, grid.color, BOX)
    m2 = marching_cubes(squared, 5.0)
    assert_array_equal(m2.faces, base.faces)
    assert np.abs(m2.vertices - base.vertices).max() <= grid.cell_size.max()


def axis_cams(res=48, distance=3.0, focal=None):
    focal = 1.2 * res if focal is None else focal
    cams = []
    for axis in np.eye(3):
        for sign in (1, -1):
            eye = sign * distance * axis
            up = (0, 0, 1) if axis[1] else (0, 1, 0)
            cams.append(Camera.look_at(eye, (0, 0, 0), up, focal=focal, width=res, height=res))
    return cams


def test_tsdf_sphere():
    cams = axis_cams()
    depths = [sphere_depth(c, 0.6) for c in cams]
    voxel = 0.05
    mesh = tsdf_fuse(depths, cams, voxel, 3 * voxel)
    radii = np.linalg.norm(mesh.vertices, axis=1)
    assert np.abs(radii - 0.6).mean() < voxel


def test_tsdf_plane_and_empty():
    cam = front_cam(64, distance=3.0, focal=80.0)
    voxel = 0.05
    mesh = tsdf_fuse([np.full((64, 64), 3.0)], [cam], voxel, 3 * voxel)
    assert not mesh.is_empty
    assert np.abs(mesh.vertices[:, 2]).max() < voxel
    assert tsdf_fuse([np.full((8, 8), np.inf)], [front_cam(8)], voxel, 3 * voxel).is_empty
    with pytest.raises(ValueError):
        tsdf_fuse([], [], voxel, 3 * voxel)
    with pytest.raises(ValueError):
        tsdf_fuse([np.ones((4, 4))], [front_cam(4)], voxel, voxel)


def test_mesh_render_of_sphere():
    mesh = icosphere(3, 0.6)
    cam = front_cam(32)
    out = render_mesh(mesh, cam)
    ref = np.isfinite(sphere_depth(cam, 0.6))
    # polygonal silhouette vs analytic disc
    assert (out.alpha.astype(bool) != ref).sum() < 0.05 * ref.sum()
    assert_allclose(out.per_ray_contribs.totals(), out.alpha.ravel())


# ---------------------------------------------------------------- texture


def linear_view(res, coef):
    vv, uu = np.mgrid[0:res, 0:res] + 0.5
    rgb = np.stack([coef[0] + coef[1] * uu + coef[2] * vv] * 3, axis=-1) * np.array([1.0, 0.5, 0.25])
    return np.concatenate([rgb, np.ones((res, res, 1))], axis=-1)


def texel_points(size):
    ht, wt = size
    rows, cols = np.mgrid[0:ht, 0:wt]
    u = (cols + 0.5) / wt
    v = 1 - (rows + 0.5) / ht
    return np.stack([2 * u - 1, 2 * v - 1, np.zeros_like(u)], axis=-1)


def test_backproject_single_view_samples_projection():
    res, size = 32, (16, 16)
    cam = front_cam(res)
    coef = (0.1, 0.02, 0.01)
    view = linear_view(res, coef)
    tex, filled = backproject_texture(view[None], [cam], grid_mesh(9), size)
    assert filled.all()
    u, v, _ = cam.project(texel_points(size))
    expect = (coef[0] + coef[1] * u + coef[2] * v)[..., None] * np.array([1.0, 0.5, 0.25])
    assert_allclose(tex, expect, atol=1e-9)


def quad(x0, x1, y0, y1, z, u0, u1):
    verts = np.array([[x0, y0, z], [x1, y0, z], [x1, y1, z], [x0, y1, z]])
    uv = np.array([[u0, 0.0], [u1, 0.0], [u1, 1.0], [u0, 1.0]])
    return verts, np.array([[0, 1, 2], [0, 2, 3]]), uv


def test_backproject_respects_occlusion():
    pv, pf, pu = quad(-1, 1, -1, 1, 0.0, 0.0, 0.5)
    qv, qf, qu = quad(-0.3, 0.3, -0.3, 0.3, 1.0, 0.5, 1.0)
    mesh = TriMesh(np.vstack([pv, qv]), np.vstack([pf, qf + 4]), uv=np.vstack([pu, qu]))
    res = 32
    cam_a = front_cam(res)
    cam_b = Camera.look_at((2.5, 0, 2.5), (0, 0, 0), focal=1.2 * res, width=res, height=res)
    red = np.zeros((res, res, 4))
    red[..., 0] = red[..., 3] = 1
    blue = np.zeros((res, res, 4))
    blue[..., 2] = blue[..., 3] = 1
    size = (32, 32)
    tex, filled = backproject_texture(np.stack([red, blue]), [cam_a, cam_b], mesh, size)
    # texel over the centre of the back quad: hidden from A by the front quad
    r, c = int((1 - 0.5) * size[0]), int(0.25 * size[1])
    assert filled[r, c]
    assert_allclose(tex[r, c], [0, 0, 1])
    # the front quad is seen by both
    r, c = int(0.5 * size[0]), int(0.75 * size[1])
    assert tex[r, c, 0] > 0 and tex[r, c, 2] > 0


def test_backproject_equal_weights_average():
    res = 32
    cams = [Camera.look_at((s, 0, 3), (0, 0, 0), focal=1.2 * res, width=res, height=res) for s in (-1.0, 1.0)]
    c1, c2 = np.array([0.9, 0.1, 0.3]), np.array([0.1, 0.5, 0.7])
    views = np.zeros((2, res, res, 4))
    views[0, ..., :3], views[1, ..., :3] = c1, c2
    views[..., 3] = 1
    tex, filled = backproject_texture(views, cams, grid_mesh(5, 1.0), (8, 8), power=0.0)
    assert filled.all()
    assert_allclose(tex, np.broadcast_to((c1 + c2) / 2, tex.shape), atol=1e-12)


def test_backproject_needs_uv():
    with pytest.raises(ValueError):
        backproject_texture(np.ones((1, 4, 4, 4)), [front_cam(4)], icosphere(0))


# ---------------------------------------------------------------- shading


def test_lambertian_light_along_and_across_normal():
    cam = front_cam(1)
    albedo = np.array([[[0.3, 0.6, 0.9]]])
    normal = np.array([[[0.0, 0.0, -1.0]]])
    depth = np.array([[2.0]])
    out = lambertian_shade(albedo, normal, cam.center, cam, depth, ambient=0.0, apply_tonemap=False)
    assert_allclose(out, albedo, rtol=1e-12)
    side = cam.camera_to_world(np.array([5.0, 0.0, 2.0]))
    out = lambertian_shade(albedo, normal, side, cam, depth, ambient=0.25, apply_tonemap=False)
    assert_allclose(out, 0.25 * albedo, atol=1e-15)
    shown = lambertian_shade(albedo, normal, cam.center, cam, depth)
    assert_allclose(shown, albedo ** (1 / 2.2))


def test_sphere_brightest_pixel():
    res, r = 64, 0.8
    cam = front_cam(res)
    light = np.array([1.5, 1.0, 3.0])
    depth = sphere_depth(cam, r)
    hit = np.isfinite(depth)
    depth = np.where(hit, depth, 0.0)
    normal = normals_from_depth(depth, cam)
    shaded = lambertian_shade(np.full((res, res, 3), 0.8), normal, light, cam, depth, apply_tonemap=False)
    row, col = np.unravel_index(np.argmax(shaded[..., 0]), (res, res))
    # the point facing the light head on
    peak = r * light / np.linalg.norm(light)
    u, v, _ = cam.project(peak)
    assert np.hypot(col + 0.5 - u, row + 0.5 - v) <= 2.0


# ---------------------------------------------------------------- io


def test_png_roundtrip(tmp_path):
    img = np.random.default_rng(0).uniform(size=(5, 7, 3))
    write_png(tmp_path / "a.png", img)
    back = np.asarray(Image.open(tmp_path / "a.png"))
    assert back.dtype == np.uint8 and back.shape == (5, 7, 3)
    assert np.abs(back / 255.0 - img).max() <= 0.5 / 255 + 1e-12


def test_pfm_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    for shape in ((4, 6), (3, 5, 3)):
        img = rng.normal(size=shape).astype(np.float32)
        write_pfm(tmp_path / "d.pfm", img)
        assert_array_equal(read_pfm(tmp_path / "d.pfm"), img)
    with pytest.raises(ValueError):
        write_pfm(tmp_path / "x.pfm", np.zeros((2, 2, 2)))


def test_obj_roundtrip(tmp_path):
    mesh = grid_mesh(4)
    write_obj(tmp_path / "m.obj", mesh)
    back = read_obj(tmp_path / "m.obj")
    assert_allclose(back.vertices, mesh.vertices)
    assert_array_equal(back.faces, mesh.faces)
    assert_allclose(back.uv, mesh.uv)
    plain = icosphere(1)
    write_obj(tmp_path / "s.obj", plain)
    assert read_obj(tmp_path / "s.obj").uv is None


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(np.diag([1.0, 1.0, 2.0]), np.zeros(3), 1.0, (0, 0), 4, 4)
    with pytest.raises(ValueError):
        Camera(np.eye(3), np.zeros(3), 0.0, (0, 0), 4, 4)
    cam = Camera.orbit(30, 10, 2.0, focal=5, width=8, height=8)
    p = np.array([[0.1, -0.2, 0.3]])
    assert_allclose(cam.camera_to_world(cam.world_to_camera(p)), p)
