"""Gaze-direction math and camera-space data normalization.

Normalization cancels head translation by rotating a virtual camera to
look at the face center from a fixed distance, and cancels head roll by
aligning the head x-axis with the image horizontal; the same rotation is
applied to the gaze label. Eye patches are cropped from the warped face
image around the eye-corner midpoints, converted to gray, and
histogram-equalized.

Coordinate conventions: camera frame has x right, y down, z forward
(depth); pixels are (x=column, y=row). Gaze vectors point from the face
toward the target, so straight-at-the-camera is (0, 0, -1).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    pass


# ---------------------------------------------------------------------------
# direction math


def angular_distance(a, b) -> np.ndarray:
    """Angle in radians between direction vectors, arccos of the normalized
    dot product. Accepts (..., 3) arrays; the ratio is clipped to [-1, 1] so
    identical vectors give exactly 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise GeometryError("angular_distance of a zero-norm vector")
    ratio = np.sum(a * b, axis=-1) / (na * nb)
    return np.arccos(np.clip(ratio, -1.0, 1.0))


def angular_distance_deg(a, b) -> np.ndarray:
    return np.degrees(angular_distance(a, b))


def pitchyaw_to_vector(pitch: float, yaw: float) -> np.ndarray:
    """Unit gaze vector for (pitch, yaw) radians:
    (-cos(p)*sin(y), -sin(p), -cos(p)*cos(y)); (0, 0) looks along -z."""
    pitch = np.asarray(pitch, dtype=np.float64)
    yaw = np.asarray(yaw, dtype=np.float64)
    if np.any(np.abs(pitch) >= np.pi / 2):
        raise GeometryError("pitch at or beyond +-pi/2 is gimbal-degenerate")
    cp = np.cos(pitch)
    return np.stack([-cp * np.sin(yaw), -np.sin(pitch), -cp * np.cos(yaw)], axis=-1)


def vector_to_pitchyaw(g) -> tuple:
    """Inverse of pitchyaw_to_vector (input need not be unit norm)."""
    g = np.asarray(g, dtype=np.float64)
    n = np.linalg.norm(g, axis=-1)
    if np.any(n == 0):
        raise GeometryError("zero-norm gaze vector")
    unit = g / n[..., None]
    horiz = np.hypot(unit[..., 0], unit[..., 2])
    if np.any(horiz < 1e-12):
        raise GeometryError("gaze along +-y is gimbal-degenerate")
    pitch = -np.arcsin(np.clip(unit[..., 1], -1.0, 1.0))
    yaw = np.arctan2(-unit[..., 0], -unit[..., 2])
    return pitch, yaw


# ---------------------------------------------------------------------------
# poses and normalization


@dataclass
class HeadPose:
    """Rigid head pose: rotation (3x3, head axes in camera frame) and
    translation (face center, camera frame, millimeters)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise GeometryError("head pose needs a 3x3 rotation and a 3-vector translation")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-5:
            raise GeometryError(f"rotation is not orthonormal (max deviation {err:.2e})")
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-5:
            raise GeometryError("rotation determinant must be +1")


@dataclass
class NormConfig:
    distance_mm: float = 600.0
    focal_px: float = 650.0
    face_size: tuple = (224, 224)  # (H, W)
    eye_size: tuple = (36, 60)     # (H, W)
    eye_width_factor: float = 1.5  # crop width as multiple of corner distance
    eye_aspect: float = 0.6        # crop height / crop width


@dataclass
class NormalizationResult:
    face: np.ndarray          # warped face image, uint8 (H, W, C)
    left_eye: np.ndarray      # equalized gray crop, uint8 (H, W)
    right_eye: np.ndarray
    rotation: np.ndarray      # R applied to the camera frame
    gaze: np.ndarray | None   # rotated gaze label (unit), None if not given
    landmarks: np.ndarray     # landmarks mapped into the warped face image
    head: HeadPose            # pose expressed in the normalized frame
    camera: np.ndarray = field(default=None)  # intrinsics of the virtual camera


def _bilinear_sample(image: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Sample image at float pixel coords (x=col, y=row); outside is 0."""
    img = image.astype(np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    valid = (x0 >= -1) & (x0 <= w - 1) & (y0 >= -1) & (y0 <= h - 1)

    def grab(yi, xi):
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        out = img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        out[~inside] = 0.0
        return out

    v00 = grab(y0, x0)
    v01 = grab(y0, x0 + 1)
    v10 = grab(y0 + 1, x0)
    v11 = grab(y0 + 1, x0 + 1)
    fx = fx[..., None]
    fy = fy[..., None]
    out = (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
           + v10 * (1 - fx) * fy + v11 * fx * fy)
    out[~valid] = 0.0
    if image.ndim == 2:
        out = out[..., 0]
    return out


def warp_perspective(image: np.ndarray, homography: np.ndarray, out_hw: tuple) -> np.ndarray:
    """Apply a source->destination homography to an image (bilinear, uint8)."""
    hd, wd = out_hw
    inv = np.linalg.inv(homography)
    yy, xx = np.meshgrid(np.arange(hd, dtype=np.float64),
                         np.arange(wd, dtype=np.float64), indexing="ij")
    denom = inv[2, 0] * xx + inv[2, 1] * yy + inv[2, 2]
    sx = (inv[0, 0] * xx + inv[0, 1] * yy + inv[0, 2]) / denom
    sy = (inv[1, 0] * xx + inv[1, 1] * yy + inv[1, 2]) / denom
    out = _bilinear_sample(image, sx, sy)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def apply_homography(points: np.ndarray, homography: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    homo = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ homography.T
    return homo[:, :2] / homo[:, 2:3]


def crop_resize(image: np.ndarray, center, width: float, height: float,
                out_hw: tuple) -> np.ndarray:
    """Axis-aligned crop around center, bilinear-resampled to out_hw (uint8)."""
    oh, ow = out_hw
    cx, cy = center
    xs = cx - width / 2 + (np.arange(ow) + 0.5) * (width / ow) - 0.5
    ys = cy - height / 2 + (np.arange(oh) + 0.5) * (height / oh) - 0.5
    sx, sy = np.meshgrid(xs, ys)
    out = _bilinear_sample(image, sx, sy)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 luma for RGB input; gray input passes through."""
    if image.ndim == 2:
        return image.astype(np.uint8)
    weights = np.array([0.299, 0.587, 0.114])
    return np.clip(np.rint(image[..., :3].astype(np.float64) @ weights), 0, 255).astype(np.uint8)


def equalize_grayscale(image: np.ndarray) -> np.ndarray:
    """Cumulative-histogram equalization of an (RGB or gray) image.

    The mapping is T(v) = floor(255 * cdf(v) / N), so a 50/50 two-level
    {0, 255} image maps to exactly {127, 255} and any constant image stays
    constant.
    """
    if image.size == 0:
        raise GeometryError("equalize_grayscale on an empty image")
    gray = to_grayscale(image)
    hist = np.bincount(gray.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    lut = (255 * cdf // cdf[-1]).astype(np.uint8)
    return lut[gray]


def eye_line_roll(landmarks: np.ndarray) -> float:
    """Roll angle (radians) of the line joining the two eye centers,
    measured on 2D landmarks laid out as [left outer, left inner,
    right inner, right outer] (plus any extra rows)."""
    lm = np.asarray(landmarks, dtype=np.float64)
    left = lm[0:2].mean(axis=0)
    right = lm[2:4].mean(axis=0)
    d = right - left
    return float(np.arctan2(d[1], d[0]))


def normalize_sample(image: np.ndarray, landmarks: np.ndarray, head: HeadPose,
                     camera: np.ndarray, gaze=None,
                     config: NormConfig | None = None) -> NormalizationResult:
    """Rotate the virtual camera onto the face center and cancel head roll.

    landmarks: (K>=4, 2) pixel coords, rows 0-1 the left-eye corners and
    rows 2-3 the right-eye corners (image-left eye first). gaze, when
    given, is rotated into the normalized frame along with the pose.
    """
    cfg = config or NormConfig()
    camera = np.asarray(camera, dtype=np.float64)
    lm = np.asarray(landmarks, dtype=np.float64)
    if lm.ndim != 2 or lm.shape[0] < 4 or lm.shape[1] != 2:
        raise GeometryError(f"landmarks must be (K>=4, 2), got {lm.shape}")
    if np.linalg.norm(lm[0] - lm[1]) < 1e-9 or np.linalg.norm(lm[2] - lm[3]) < 1e-9:
        raise GeometryError("degenerate landmarks: coincident eye corners")

    t = head.translation
    dist = np.linalg.norm(t)
    if dist < 1e-9:
        raise GeometryError("face center coincides with the camera origin")

    # rotation: z -> face center, x -> head x-axis with depth removed
    forward = t / dist
    right0 = head.rotation[:, 0]
    down = np.cross(forward, right0)
    n = np.linalg.norm(down)
    if n < 1e-9:
        raise GeometryError("head x-axis is parallel to the view ray")
    down /= n
    right = np.cross(down, forward)
    right /= np.linalg.norm(right)
    rot = np.stack([right, down, forward])

    scale = np.diag([1.0, 1.0, cfg.distance_mm / dist])
    conv = scale @ rot

    fh, fw = cfg.face_size
    cam_virtual = np.array([[cfg.focal_px, 0, fw / 2],
                            [0, cfg.focal_px, fh / 2],
                            [0, 0, 1.0]])
    homography = cam_virtual @ conv @ np.linalg.inv(camera)

    face = warp_perspective(image, homography, cfg.face_size)
    lm_warped = apply_homography(lm, homography)

    gaze_n = None
    if gaze is not None:
        gaze_n = rot @ np.asarray(gaze, dtype=np.float64)
        gaze_n = gaze_n / np.linalg.norm(gaze_n)

    head_n = HeadPose(rot @ head.rotation, conv @ t)

    def eye_crop(corner_a, corner_b):
        center = (corner_a + corner_b) / 2
        width = cfg.eye_width_factor * np.linalg.norm(corner_b - corner_a)
        height = cfg.eye_aspect * width
        eh, ew = cfg.eye_size
        patch = crop_resize(face, center, width, height, (eh, ew))
        return equalize_grayscale(patch)

    left = eye_crop(lm_warped[0], lm_warped[1])
    right_eye = eye_crop(lm_warped[2], lm_warped[3])

    return NormalizationResult(face=face, left_eye=left, right_eye=right_eye,
                               rotation=rot, gaze=gaze_n, landmarks=lm_warped,
                               head=head_n, camera=cam_virtual)
