import numpy as np
import pytest

from seqsplat.meshing import (Mesh, TSDFVolume, clean_mesh, extract_mesh, fit_bounds, read_obj, tsdf_integrate,
                              visible_faces, write_obj)
from seqsplat.scene_io import CameraIntrinsics, CameraPose

K = CameraIntrinsics(40.0, 40.0, 15.5, 15.5, 32, 32)
IDENTITY = CameraPose([1, 0, 0, 0], [0, 0, 0])


def sphere_volume(r=0.5, voxel=0.05):
    n = int(np.ceil(2.6 * r / voxel)) + 1
    vol = TSDFVolume.create([-1.3 * r] * 3, voxel, (n, n, n))
    c = vol.voxel_centers()
    sdf = np.linalg.norm(c, axis=1) - r
    vol.tsdf = np.clip(sdf / vol.truncation, -1, 1).reshape(vol.dims)
    vol.weight[:] = 1.0
    return vol


def quad(z, half=1.0, facing=-1):
    v = np.array([[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]])
    f = np.array([[0, 1, 2], [0, 2, 3]]) if facing > 0 else np.array([[0, 2, 1], [0, 3, 2]])
    return v, f


def test_sphere_accuracy_and_topology():
    r, voxel = 0.5, 0.05
    m = extract_mesh(sphere_volume(r, voxel))
    err = np.abs(np.linalg.norm(m.vertices, axis=1) - r)
    assert err.mean() < voxel / 2
    assert m.euler_characteristic() == 2
    _, counts = np.unique(m.edges(), axis=0, return_counts=True)
    assert np.all(counts == 2)
    # normals point outward (toward positive tsdf)
    assert np.all(np.sum(m.face_normals * m.centroids, axis=1) > 0)


def test_all_positive_is_empty():
    vol = TSDFVolume.create([0, 0, 0], 0.1, (5, 5, 5))
    vol.weight[:] = 1
    assert len(extract_mesh(vol).faces) == 0
    vol = sphere_volume()
    vol.weight[:] = 0
    assert len(extract_mesh(vol).faces) == 0


def test_unobserved_voxels_produce_no_faces():
    vol = sphere_volume()
    vol.weight[: vol.dims[0] // 2] = 0
    m = extract_mesh(vol)
    assert len(m.faces) > 0
    cut = vol.origin[0] + (vol.dims[0] // 2) * vol.voxel_size
    assert m.vertices[:, 0].min() >= cut - 1e-6  # skimage works in float32


def test_plane_zero_crossing():
    vol = TSDFVolume.create([-0.2, -0.2, 1.5], 0.02, (21, 21, 51))
    depth = np.full((32, 32), 2.0)
    tsdf_integrate(vol, depth, IDENTITY, K)
    col = vol.tsdf[10, 10]
    k = np.nonzero((col[:-1] > 0) & (col[1:] <= 0))[0][0]
    z0 = 1.5 + k * 0.02
    zc = z0 + 0.02 * col[k] / (col[k] - col[k + 1])
    assert abs(zc - 2.0) < 0.01
    assert np.abs(vol.tsdf).max() <= 1
    before = vol.tsdf.copy()
    tsdf_integrate(vol, depth, IDENTITY, K)
    assert np.allclose(vol.tsdf, before, atol=1e-15)
    assert vol.weight.max() == 2
    # deep behind the surface stays untouched
    assert vol.weight[10, 10, -1] == 0


def test_outside_frustum_untouched():
    vol = TSDFVolume.create([5.0, 5.0, 1.0], 0.05, (4, 4, 4))
    tsdf_integrate(vol, np.full((32, 32), 2.0), IDENTITY, K)
    assert not vol.weight.any() and np.all(vol.tsdf == 1)


def test_frame_order_independence(rng):
    poses = [CameraPose([1, 0, 0, 0], [rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), 0]) for _ in range(4)]
    depths = [np.full((32, 32), 2.0) + rng.normal(0, 0.01, (32, 32)) for _ in range(4)]
    vols = []
    for order in ([0, 1, 2, 3], [3, 1, 0, 2]):
        vol = TSDFVolume.create([-0.2, -0.2, 1.7], 0.02, (21, 21, 31))
        for k in order:
            tsdf_integrate(vol, depths[k], poses[k], K)
        vols.append(vol)
    assert np.abs(vols[0].tsdf - vols[1].tsdf).max() < 1e-6
    assert np.array_equal(vols[0].weight, vols[1].weight)


def test_fit_bounds_contains_plane():
    depth = np.full((32, 32), 2.0)
    lo, hi = fit_bounds([depth], [IDENTITY], K)
    assert lo[2] < 2.0 < hi[2]
    alpha = np.zeros((32, 32))
    alpha[:16] = 1
    assert hi[2] - lo[2] > 0.09 * (hi[0] - lo[0])
    lo2, hi2 = fit_bounds([depth], [IDENTITY], K, alphas=[alpha])
    assert hi2[1] < hi[1]


def test_obj_roundtrip(tmp_path):
    m = extract_mesh(sphere_volume())
    write_obj(tmp_path / "m.obj", m)
    back = read_obj(tmp_path / "m.obj")
    assert np.array_equal(back.faces, m.faces)
    assert np.allclose(back.vertices, m.vertices, atol=1e-8)
    text = (tmp_path / "m.obj").read_text().split()
    assert set(text[::4]) <= {"v", "f"}


def test_clean_mesh_drops_degenerate():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 0], [2, 0, 0]], float)
    f = np.array([[0, 1, 2], [3, 1, 2], [0, 1, 4], [0, 3, 1]])
    m = clean_mesh(v, f)
    # vertex 3 merges into 0, so face 1 becomes a copy of face 0; faces 2 and 3 have no area
    assert len(m.faces) == 2 and np.all(m.face_areas > 0)
    assert m.faces.max() < len(m.vertices)


def test_visibility_quads():
    v, f = quad(3.0, facing=-1)
    m = Mesh(v, f)
    assert np.all(m.face_normals[:, 2] < 0)
    assert visible_faces(m, [IDENTITY], K).tolist() == [0, 1]
    back = Mesh(*quad(3.0, facing=1))
    assert len(visible_faces(back, [IDENTITY], K)) == 0
    with pytest.raises(ValueError):
        visible_faces(Mesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64)), [IDENTITY], K)


def test_visibility_stacked_quads():
    vt, ft = quad(2.0, half=0.3)
    vb, fb = quad(3.0, half=1.0)
    # small split quad behind: many triangles, only those off to the side are visible
    xs = np.linspace(-1, 1, 9)
    verts, faces = [], []
    for i in range(8):
        for j in range(8):
            base = len(verts)
            verts += [[xs[i], xs[j], 3.0], [xs[i + 1], xs[j], 3.0], [xs[i + 1], xs[j + 1], 3.0], [xs[i], xs[j + 1], 3.0]]
            faces += [[base, base + 2, base + 1], [base, base + 3, base + 2]]
    v = np.concatenate([vt, np.array(verts)])
    f = np.concatenate([ft, np.array(faces) + 4])
    m = Mesh(v, f)
    vis = set(visible_faces(m, [IDENTITY], K).tolist())
    assert {0, 1} <= vis
    cent = m.centroids
    for k in range(2, len(f)):
        x, y = cent[k, :2]
        # oracle: occluded iff the ray to the centroid crosses the top quad
        # pixel offsets of the centroid from the top quad's image border (20 px = 0.3 m at 2 m)
        u, v = 40 * x / 3.0, 40 * y / 3.0
        margin = max(abs(u), abs(v)) - 40 * 0.3 / 2.0
        if abs(margin) < 1.5:
            continue  # within the 1 px tolerance band
        assert (k in vis) == (margin > 0), k
