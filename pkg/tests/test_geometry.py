import time

import cv2
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facepuppet.core import FaceImage, FiducialSet, Intrinsics, PhotoRecord, ValidationError, WarpField
from facepuppet.geometry import (
    PoseEstimationError,
    default_translation,
    estimate_pose,
    fit_affine,
    fit_tps,
    frontalize,
    load_template,
    project,
    rasterize_tps,
    rotation_from_axis_angle,
    sample_bilinear,
    tps_warp,
    warp_image,
)
from facepuppet.synthetic import Expression, FaceModel, Identity


def _points(seed=0, n=49):
    rng = np.random.default_rng(seed)
    return rng.uniform(10, 90, (n, 2))


def _smile(points, amount=3.0):
    c = points.mean(0)
    d = points - c
    out = points.copy()
    out[:, 0] += amount * np.tanh(d[:, 0] / 20) * np.exp(-(d[:, 1] - 15) ** 2 / 200)
    out[:, 1] -= amount * np.exp(-(d[:, 1] - 15) ** 2 / 200) * (d[:, 0] / 30) ** 2
    return out


point_sets = st.integers(0, 10_000).map(_points)


# -- TPS -------------------------------------------------------------------

def test_identity_fit_is_identity():
    p = _points()
    m = fit_tps(p, p, lam=0.0)
    np.testing.assert_allclose(m(p), p, atol=1e-9)
    assert abs(m.bending_energy()) < 1e-12


@settings(max_examples=25, deadline=None)
@given(p=point_sets, seed=st.integers(0, 1000))
def test_zero_lambda_interpolates(p, seed):
    src = p + np.random.default_rng(seed).normal(0, 2, p.shape)
    m = fit_tps(src, p, lam=0.0)
    assert np.abs(m(p) - src).max() <= 1e-6


@settings(max_examples=25, deadline=None)
@given(p=point_sets, a=st.lists(st.floats(-0.3, 0.3), min_size=4, max_size=4),
       t=st.lists(st.floats(-20, 20), min_size=2, max_size=2), lam=st.sampled_from([0.0, 1.0, 10.0, 1e4]))
def test_affine_reproduction(p, a, t, lam):
    mat = np.eye(2) + np.array(a).reshape(2, 2)
    src = p @ mat.T + np.array(t)
    m = fit_tps(src, p, lam=lam)
    # the least-squares affine oracle and the spline agree; no bending is used
    oracle = fit_affine(src, p)
    np.testing.assert_allclose(m.affine, oracle, atol=1e-8)
    assert np.abs(m.weights).max() <= 1e-8
    assert abs(m.bending_energy()) <= 1e-8
    np.testing.assert_allclose(m(p), src, atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(p=point_sets, lam=st.sampled_from([0.0, 0.5, 10.0, 100.0]))
def test_side_conditions(p, lam):
    m = fit_tps(_smile(p), p, lam)
    assert len(m.weights) == len(m.control_points)
    assert np.abs(m.side_conditions()).max() <= 1e-8


def test_smoothing_trades_residual_for_bending():
    p = _points(3)
    src = _smile(p, 4.0) + np.random.default_rng(0).normal(0, 0.5, p.shape)
    exact, smooth = fit_tps(src, p, 0.0), fit_tps(src, p, 10.0)
    res = lambda m: np.sum((m(p) - src) ** 2)
    assert res(smooth) > res(exact)
    assert smooth.bending_energy() < exact.bending_energy()


def test_large_lambda_tends_to_affine():
    p = _points(4)
    src = _smile(p, 4.0)
    m = fit_tps(src, p, 1e9)
    np.testing.assert_allclose(m.affine, fit_affine(src, p), atol=1e-4)


@settings(max_examples=20, deadline=None)
@given(p=point_sets, seed=st.integers(0, 1000), lam=st.sampled_from([0.0, 1.0, 10.0]))
def test_objective_is_minimal_under_perturbation(p, seed, lam):
    rng = np.random.default_rng(seed)
    src = _smile(p) + rng.normal(0, 1, p.shape)
    m = fit_tps(src, p, lam)
    base = m.objective(src)
    for _ in range(10):
        # perturb within the constraint set (side conditions kept)
        pert = rng.normal(0, 0.05, m.weights.shape)
        basis = np.column_stack([np.ones(len(p)), p])
        pert -= basis @ np.linalg.lstsq(basis, pert, rcond=None)[0]
        other = type(m)(m.control_points, m.weights + pert, m.affine + rng.normal(0, 0.01, (2, 3)), lam)
        assert other.objective(src) >= base - 1e-9 * max(1.0, base)


@settings(max_examples=20, deadline=None)
@given(p=point_sets, t=st.lists(st.floats(-30, 30), min_size=2, max_size=2))
def test_translation_equivariance(p, t):
    t = np.array(t)
    src = _smile(p)
    m1 = fit_tps(src, p, 10.0)
    m2 = fit_tps(src + t, p + t, 10.0)
    q = _points(99, 20)
    np.testing.assert_allclose(m2(q + t), m1(q) + t, atol=1e-6)


def test_collinear_targets_rejected():
    x = np.linspace(0, 50, 49)
    line = np.column_stack([x, 2 * x + 1])
    with pytest.raises(ValidationError):
        fit_tps(line, line, 10.0)


def test_tps_fit_runtime():
    p = _points(5)
    src = _smile(p)
    fit_tps(src, p, 10.0)
    t0 = time.perf_counter()
    for _ in range(20):
        fit_tps(src, p, 10.0)
    assert (time.perf_counter() - t0) / 20 < 0.05


def test_rasterize_identity_and_translation():
    p = _points(6)
    assert np.abs(rasterize_tps(fit_tps(p, p, 10.0), 30, 20).displacement).max() < 1e-9
    f = rasterize_tps(fit_tps(p + [2.5, -1.0], p, 10.0), 30, 20).displacement
    np.testing.assert_allclose(f[..., 0], 2.5, atol=1e-9)
    np.testing.assert_allclose(f[..., 1], -1.0, atol=1e-9)


def test_rasterized_field_matches_mapping_at_control_pixels():
    p = np.rint(_points(7))
    src = _smile(p, 3.0)
    m = fit_tps(src, p, 10.0)
    f = rasterize_tps(m, 100, 100).displacement
    got = sample_bilinear(f, p[:, 0], p[:, 1]) + p
    np.testing.assert_allclose(got, m(p), atol=1e-9)


def test_tps_warp_moves_landmarks_to_target():
    model = FaceModel(64, 80)
    img, fid = model.render(Expression(smile=1.0))
    neutral = FiducialSet(model.neutral_landmarks)
    warped, field = tps_warp(img, fid, neutral, lam=0.0)
    # pixels at the neutral landmark positions fetch from the smiling landmarks
    moved = sample_bilinear(field.displacement, neutral.points[:, 0], neutral.points[:, 1]) + neutral.points
    np.testing.assert_allclose(moved, fid.points, atol=0.05)


# -- warping ---------------------------------------------------------------

def test_zero_field_is_identity(rng):
    img = FaceImage(rng.uniform(size=(20, 30, 3)))
    np.testing.assert_array_equal(warp_image(img, WarpField.zeros(30, 20)).pixels, img.pixels)


def test_shift_of_a_ramp():
    ramp = np.tile(np.linspace(0, 1, 40), (20, 1))
    img = FaceImage(ramp)
    d = np.zeros((20, 40, 2))
    d[..., 0] = 1.0
    out = warp_image(img, WarpField(d)).pixels[..., 0]
    np.testing.assert_allclose(out[:, :-1], ramp[:, 1:], atol=1e-12)
    np.testing.assert_allclose(out[:, -1], ramp[:, -1])  # clamp to edge


def test_warp_dimension_mismatch(rng):
    with pytest.raises(ValidationError):
        warp_image(FaceImage(rng.uniform(size=(20, 30, 3))), WarpField.zeros(20, 30))


def test_warp_then_inverse(rng):
    h, w = 64, 64
    yy, xx = np.mgrid[0:h, 0:w] / 64.0
    img = FaceImage(0.5 + 0.4 * np.sin(2 * np.pi * xx) * np.cos(2 * np.pi * yy))
    d = np.stack([1.5 * np.sin(np.pi * yy), 1.0 * np.cos(np.pi * xx)], axis=-1)
    fwd = WarpField(d)
    # backward inverse by fixed point: e(p) = -d(p + e(p))
    e = -d.copy()
    for _ in range(30):
        e = -sample_bilinear(d, np.arange(w)[None, :] + e[..., 0], np.arange(h)[:, None] + e[..., 1])
    back = warp_image(warp_image(img, fwd), WarpField(e)).pixels
    err = np.abs(back - img.pixels)[5:-5, 5:-5].max()
    assert err <= 0.02 * np.ptp(img.pixels)


# -- pose ------------------------------------------------------------------

@pytest.fixture(scope="module")
def template():
    return load_template()


def _observe(template, rot, t, intr):
    return project(template.points_3d, rot, t, intr)


def test_identity_pose_recovered(template):
    intr = Intrinsics.default_for(194, 244)
    t = default_translation(intr)
    pose = estimate_pose(_observe(template, np.eye(3), t, intr), template.points_3d, intr)
    assert np.abs(pose.rotation - np.eye(3)).max() <= 1e-4
    assert np.abs(pose.translation - t).max() <= 1e-3
    assert pose.residual < 1e-6


def _angle_deg(r1, r2):
    c = (np.trace(r1.T @ r2) - 1) / 2
    return np.degrees(np.arccos(np.clip(c, -1, 1)))


def test_yaw_recovered(template):
    intr = Intrinsics.default_for(194, 244)
    rot = rotation_from_axis_angle(np.deg2rad([0, 10, 0]))
    obs = _observe(template, rot, default_translation(intr), intr)
    obs += np.random.default_rng(0).normal(0, 0.3, obs.shape)
    pose = estimate_pose(obs, template.points_3d, intr)
    assert _angle_deg(pose.rotation, rot) < 0.5


@pytest.mark.parametrize("seed", range(5))
def test_pose_agrees_with_opencv(template, seed):
    rng = np.random.default_rng(seed)
    intr = Intrinsics.default_for(194, 244)
    rot = rotation_from_axis_angle(np.deg2rad(rng.uniform(-20, 20, 3)))
    t = default_translation(intr) + rng.normal(0, 5, 3)
    obs = _observe(template, rot, t, intr) + rng.normal(0, 0.5, (49, 2))
    pose = estimate_pose(obs, template.points_3d, intr)
    # OpenCV uses x right, y down, z forward: flip y and z of our camera frame
    flip = np.diag([1.0, -1.0, -1.0])
    ok, rvec, tvec = cv2.solvePnP(np.ascontiguousarray(template.points_3d).reshape(-1, 1, 3),
                                  np.ascontiguousarray(obs).reshape(-1, 1, 2), intr.matrix(), None,
                                  rvec=cv2.Rodrigues(flip @ rot)[0], tvec=(flip @ t)[:, None],
                                  useExtrinsicGuess=True, flags=cv2.SOLVEPNP_ITERATIVE)
    assert ok
    r_cv = flip @ cv2.Rodrigues(rvec)[0]
    assert _angle_deg(pose.rotation, r_cv) < 0.05
    np.testing.assert_allclose(pose.translation, flip @ tvec.ravel(), atol=0.05 * np.linalg.norm(t))
    cv_res = np.linalg.norm(_observe(template, r_cv, flip @ tvec.ravel(), intr) - obs, axis=1).mean()
    assert pose.residual <= cv_res + 1e-6


def test_pose_needs_matching_points(template):
    intr = Intrinsics.default_for(194, 244)
    with pytest.raises(ValidationError):
        estimate_pose(np.zeros((49, 2)), template.points_3d[:10], intr)


def test_pose_iteration_cap_reports_trace(template):
    intr = Intrinsics.default_for(194, 244)
    obs = _observe(template, rotation_from_axis_angle([0.1, 0.2, 0]), default_translation(intr), intr)
    obs = obs + np.random.default_rng(0).normal(0, 2, obs.shape)
    with pytest.raises(PoseEstimationError) as info:
        estimate_pose(obs, template.points_3d, intr, max_iter=1, tol=0.0)
    assert len(info.value.residuals) >= 1


# -- frontalisation ----------------------------------------------------------

@pytest.fixture(scope="module")
def face():
    return FaceModel(96, 120)


def _psnr(a, b):
    return 10 * np.log10(1.0 / np.mean((a - b) ** 2))


def test_frontal_photo_is_unchanged(face):
    texture, canonical = face.render()
    img, fid, rot, t = face.render_photo()
    view = frontalize(PhotoRecord("a", img, fid), face.template())
    inner = np.zeros(face.mesh().shape, bool)
    inner[4:-4, 4:-4] = True
    assert _psnr(view.image.pixels[inner], texture.pixels[inner]) >= 40
    np.testing.assert_allclose(view.fiducials.points, canonical.points, atol=0.05)


def test_yawed_photo_fiducials(face):
    _, frontal = face.render()
    img, fid, rot, t = face.render_photo(yaw=15.0)
    view = frontalize(PhotoRecord("a", img, fid), face.template())
    rms = np.sqrt(np.mean(np.sum((view.fiducials.points - frontal.points) ** 2, axis=1)))
    assert rms <= 1.5
    assert _angle_deg(view.pose.rotation, rot) < 1.0


def _ray_occluded(mesh, pose, margin=0.5, steps=400):
    """Ray-march from every vertex to the camera centre; occluded if the ray dips under the surface."""
    h, w = mesh.shape
    verts = mesh.vertices.astype(np.float64)
    cam = -pose.rotation.T @ pose.translation  # camera centre in the face frame
    depth = verts[..., 2]
    hidden = np.zeros((h, w), bool)
    for s in np.linspace(0.0, 0.5, steps)[1:]:
        q = verts + s * (cam - verts)
        col = q[..., 0] + (w - 1) / 2.0
        row = (h - 1) / 2.0 - q[..., 1]
        inside = (col >= 0) & (col <= w - 1) & (row >= 0) & (row <= h - 1)
        z = sample_bilinear(depth, np.clip(col, 0, w - 1), np.clip(row, 0, h - 1))
        hidden |= inside & (z > q[..., 2] + margin)
    return hidden


def test_occluded_side_is_masked():
    # a deeper face than the default so that a 30 degree turn hides a real patch
    face = FaceModel(96, 120, Identity(nose_h=0.2, dome=0.2))
    img, fid, rot, t = face.render_photo(yaw=30.0)
    view = frontalize(PhotoRecord("a", img, fid), face.template())
    mesh = face.mesh()
    oracle = _ray_occluded(mesh, view.pose, margin=0.05, steps=1600)
    definite = _ray_occluded(mesh, view.pose, margin=1.0)  # rays that pass well under the surface
    assert definite.sum() > 500
    # every definitely hidden vertex is masked, and masked pixels hold zeros, not guesses
    masked = mesh.valid & ~view.visible
    assert (definite & ~masked).sum() == 0
    assert (oracle & ~masked).sum() <= 0.05 * oracle.sum()  # grazing dips within the depth slack
    assert np.all(view.image.pixels[masked] == 0)
    # the occlusion lies on the side turned away from the camera
    assert np.mean(np.nonzero(definite)[1] > (face.width - 1) / 2) > 0.95
    # surface that clearly faces the camera and is reachable in the photo is kept
    surf = mesh.vertices.astype(float)
    centre = -view.pose.rotation.T @ view.pose.translation
    ray = centre - surf
    ray /= np.linalg.norm(ray, axis=-1, keepdims=True)
    zy, zx = np.gradient(surf[..., 2])
    normal = np.stack([-zx, zy, np.ones_like(zx)], axis=-1)
    cos = np.einsum("...k,...k->...", normal / np.linalg.norm(normal, axis=-1, keepdims=True), ray)
    scr = project(surf, view.pose.rotation, view.pose.translation, view.pose.intrinsics)
    in_photo = (scr[..., 0] >= 0) & (scr[..., 0] <= img.width - 1) & (scr[..., 1] >= 0) & (scr[..., 1] <= img.height - 1)
    spurious = masked & ~oracle & in_photo & (cos > 0.2)
    # what remains is the foreshortened far silhouette, where dropping pixels is the safe side
    assert spurious.sum() <= 0.015 * mesh.valid.sum()


def test_frontal_view_hides_nothing(face):
    img, fid, *_ = face.render_photo()
    view = frontalize(PhotoRecord("b", img, fid), face.template())
    assert _ray_occluded(face.mesh(), view.pose).sum() == 0
    assert (face.mesh().valid & ~view.visible).sum() == 0
