"""Sample container format (GZDS) and a procedural gaze-image generator.

A sample is one face image, two gray eye patches, a unit gaze vector, and
a subject id. The generator renders schematic eyes whose iris position is
a smooth function of (pitch, yaw), embeds them in a schematic face with
subject-dependent texture, and labels every sample exactly by
construction, so desk-scale supervised runs have clean ground truth.

All integers little-endian; images row-major uint8.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .geometry import pitchyaw_to_vector

_MAGIC = b"GZDS"
DATASET_VERSION = 1


class DatasetError(ValueError):
    pass


@dataclass
class SampleRecord:
    face: np.ndarray       # (H, W, C) uint8
    left_eye: np.ndarray   # (H, W) uint8
    right_eye: np.ndarray  # (H, W) uint8
    gaze: np.ndarray       # (3,) float32, unit norm
    subject_id: int
    sample_id: int

    def validate(self):
        if self.face.dtype != np.uint8 or self.face.ndim != 3:
            raise DatasetError("face must be (H, W, C) uint8")
        for eye in (self.left_eye, self.right_eye):
            if eye.dtype != np.uint8 or eye.ndim != 2:
                raise DatasetError("eye patches must be (H, W) uint8")
        norm = float(np.linalg.norm(self.gaze))
        if abs(norm - 1.0) > 1e-4:
            raise DatasetError(f"gaze norm {norm:.6f} is not unit within 1e-4")
        if not 0 <= self.subject_id < 2**16:
            raise DatasetError("subject_id out of u16 range")


@dataclass
class DatasetHeader:
    version: int
    count: int
    face_shape: tuple  # (H, W, C)
    eye_shape: tuple   # (H, W)
    subject_count: int


class Dataset:
    """In-memory dataset: header plus records in file order."""

    def __init__(self, header: DatasetHeader, records: list):
        self.header = header
        self.records = records

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def subject_ids(self):
        return sorted({r.subject_id for r in self.records})


_HEADER_FMT = "<4sIIIIIIIH"
_HEADER_SIZE = struct.calcsize(_HEADER_FMT)


def _record_nbytes(face_shape, eye_shape) -> int:
    fh, fw, fc = face_shape
    eh, ew = eye_shape
    return fh * fw * fc + 2 * eh * ew + 3 * 4 + 2 + 4


def write_dataset(records, path):
    """Serialize records (one shared geometry) to a GZDS file."""
    records = list(records)
    if not records:
        raise DatasetError("refusing to write an empty dataset")
    face_shape = records[0].face.shape
    eye_shape = records[0].left_eye.shape
    blob = bytearray()
    subjects = set()
    for rec in records:
        rec.validate()
        if rec.face.shape != face_shape or rec.left_eye.shape != eye_shape \
                or rec.right_eye.shape != eye_shape:
            raise DatasetError(
                f"record {rec.sample_id}: geometry {rec.face.shape}/{rec.left_eye.shape} "
                f"does not match dataset geometry {face_shape}/{eye_shape}")
        subjects.add(rec.subject_id)
        blob += rec.face.tobytes()
        blob += rec.left_eye.tobytes()
        blob += rec.right_eye.tobytes()
        blob += rec.gaze.astype("<f4").tobytes()
        blob += struct.pack("<HI", rec.subject_id, rec.sample_id)
    header = struct.pack(_HEADER_FMT, _MAGIC, DATASET_VERSION, len(records),
                         *face_shape, *eye_shape, len(subjects))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(bytes(blob))


def read_dataset(path) -> Dataset:
    """Parse a GZDS file, validating geometry and gaze norms."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _HEADER_SIZE:
        raise DatasetError(f"file too short for a header: {len(buf)} bytes")
    magic, version, count, fh_, fw, fc, eh, ew, subject_count = \
        struct.unpack_from(_HEADER_FMT, buf, 0)
    if magic != _MAGIC:
        raise DatasetError(f"bad magic {magic!r} in {path}")
    if version != DATASET_VERSION:
        raise DatasetError(f"unsupported dataset version {version}")
    face_shape = (fh_, fw, fc)
    eye_shape = (eh, ew)
    expected = _HEADER_SIZE + count * _record_nbytes(face_shape, eye_shape)
    if len(buf) != expected:
        raise DatasetError(
            f"truncated or padded dataset: expected {expected} bytes, have {len(buf)}")
    offset = _HEADER_SIZE
    records = []
    face_n = fh_ * fw * fc
    eye_n = eh * ew
    for _ in range(count):
        face = np.frombuffer(buf, np.uint8, face_n, offset).reshape(face_shape).copy()
        offset += face_n
        left = np.frombuffer(buf, np.uint8, eye_n, offset).reshape(eye_shape).copy()
        offset += eye_n
        right = np.frombuffer(buf, np.uint8, eye_n, offset).reshape(eye_shape).copy()
        offset += eye_n
        gaze = np.frombuffer(buf, "<f4", 3, offset).copy()
        offset += 12
        subject_id, sample_id = struct.unpack_from("<HI", buf, offset)
        offset += 6
        rec = SampleRecord(face, left, right, gaze, subject_id, sample_id)
        rec.validate()
        records.append(rec)
    header = DatasetHeader(version, count, face_shape, eye_shape, subject_count)
    return Dataset(header, records)


def split_leave_one_subject_out(dataset, held_out: int):
    """(train, test) record lists: test is exactly the held-out subject."""
    records = list(dataset)
    if not records:
        raise DatasetError("empty dataset")
    subjects = {r.subject_id for r in records}
    if held_out not in subjects:
        raise DatasetError(f"subject {held_out} not present (have {sorted(subjects)})")
    train = [r for r in records if r.subject_id != held_out]
    test = [r for r in records if r.subject_id == held_out]
    return train, test


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass
class SynthConfig:
    subjects: int = 6
    samples_per_subject: int = 300
    pitch_range_deg: tuple = (-20.0, 20.0)
    yaw_range_deg: tuple = (-20.0, 20.0)
    face_hw: tuple = (56, 56)
    eye_hw: tuple = (18, 30)
    noise: float = 0.0
    seed: int = 0

    def validate(self):
        if self.subjects < 1 or self.samples_per_subject < 1:
            raise DatasetError("need at least one subject and one sample per subject")
        for lo, hi in (self.pitch_range_deg, self.yaw_range_deg):
            if not (-45.0 <= lo < hi <= 45.0):
                raise DatasetError("gaze ranges must satisfy -45 <= lo < hi <= 45 degrees")
        if self.noise < 0:
            raise DatasetError("noise must be non-negative")


@dataclass
class SubjectAppearance:
    """Per-subject rendering parameters, drawn once per subject."""

    iris_radius_frac: float    # iris radius as a fraction of eye height
    sclera_brightness: float
    skin_tone: float
    eyelid_aperture: float     # vertical opening of the eye ellipse
    iris_darkness: float
    texture_phase: float
    texture_gain: float


def subject_appearance(cfg: SynthConfig, subject_id: int) -> SubjectAppearance:
    rng = np.random.default_rng([cfg.seed, subject_id])
    return SubjectAppearance(
        iris_radius_frac=rng.uniform(0.28, 0.36),
        sclera_brightness=rng.uniform(205, 240),
        skin_tone=rng.uniform(120, 185),
        eyelid_aperture=rng.uniform(0.78, 0.98),
        iris_darkness=rng.uniform(30, 80),
        texture_phase=rng.uniform(0, 2 * np.pi),
        texture_gain=rng.uniform(4.0, 12.0),
    )


def render_eye(app: SubjectAppearance, pitch: float, yaw: float, eye_hw: tuple,
               side: int = 1) -> np.ndarray:
    """Render one eye patch as float64 in [0, 255].

    The iris center offset is proportional to (sin(yaw), -sin(pitch)), a
    smooth injective map over the configured gaze range. Looking sideways
    fades the contrast of the near-side eye (side +1 left, -1 right), so
    the two eyes carry asymmetric reliability that depends on the gaze
    itself; the fade is a deterministic function of yaw.
    """
    h, w = eye_hw
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cx, cy = (w - 1) / 2, (h - 1) / 2
    ax = 0.48 * w
    ay = 0.42 * h * app.eyelid_aperture

    img = np.full((h, w), app.skin_tone)
    sclera = np.clip((1.0 - ((xx - cx) / ax) ** 2 - ((yy - cy) / ay) ** 2) / 0.18, 0, 1)
    img = img * (1 - sclera) + sclera * app.sclera_brightness

    r_iris = app.iris_radius_frac * h
    icx = cx + 0.38 * w * np.sin(yaw)
    icy = cy - 0.38 * h * np.sin(pitch)
    dist = np.hypot(xx - icx, yy - icy)
    iris = np.clip((r_iris - dist) / 1.2, 0, 1) * sclera
    img = img * (1 - iris) + iris * app.iris_darkness

    pupil = np.clip((0.45 * r_iris - dist) / 0.9, 0, 1) * sclera
    img = img * (1 - pupil) + pupil * 8.0

    hl = np.hypot(xx - (icx - 0.35 * r_iris), yy - (icy - 0.35 * r_iris))
    highlight = np.clip((0.2 * r_iris - hl) / 0.8, 0, 1) * iris
    img = img * (1 - highlight) + highlight * 246.0

    fade = 0.45 * np.clip(side * np.sin(yaw) / np.sin(np.radians(20.0)), 0.0, 1.0)
    return app.skin_tone + (img - app.skin_tone) * (1 - fade)


def _downscale2(img: np.ndarray) -> np.ndarray:
    """Exact 2x2 block mean (inputs have even dims)."""
    h, w = img.shape
    return img.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def render_face(app: SubjectAppearance, left: np.ndarray, right: np.ndarray,
                face_hw: tuple) -> np.ndarray:
    """Schematic face: textured skin, embedded half-size eyes, nose, mouth."""
    h, w = face_hw
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    base = app.skin_tone + app.texture_gain * np.sin(
        2 * np.pi * (yy / h + 0.6 * xx / w) * 2.0 + app.texture_phase)

    le = _downscale2(left)
    re = _downscale2(right)
    eh, ew = le.shape
    row = int(round(0.30 * h - eh / 2))
    lcol = int(round(0.27 * w - ew / 2))
    rcol = int(round(0.73 * w - ew / 2))
    base[row:row + eh, lcol:lcol + ew] = le
    base[row:row + eh, rcol:rcol + ew] = re

    # schematic nose and mouth give the face non-eye structure
    nr0, nr1 = int(0.45 * h), int(0.62 * h)
    base[nr0:nr1, int(0.48 * w):int(0.52 * w)] -= 18.0
    mr = int(0.78 * h)
    base[mr:mr + max(1, h // 28), int(0.35 * w):int(0.65 * w)] = 70.0

    rgb = np.stack([base, base * 0.92, base * 0.84], axis=-1)
    return rgb


def render_sample(app: SubjectAppearance, pitch: float, yaw: float,
                  cfg: SynthConfig) -> tuple:
    """Pure render of (face, left_eye, right_eye) as uint8 at noise 0."""
    left = render_eye(app, pitch, yaw, cfg.eye_hw, side=1)
    right = render_eye(app, pitch, yaw, cfg.eye_hw, side=-1)
    face = render_face(app, left, right, cfg.face_hw)
    to_u8 = lambda a: np.clip(np.rint(a), 0, 255).astype(np.uint8)  # noqa: E731
    return to_u8(face), to_u8(left), to_u8(right)


def generate_records(cfg: SynthConfig) -> list:
    """Deterministic sample list for the config (per-subject derived seeds)."""
    cfg.validate()
    records = []
    sample_id = 0
    plo, phi = np.radians(cfg.pitch_range_deg)
    ylo, yhi = np.radians(cfg.yaw_range_deg)
    for subject in range(cfg.subjects):
        app = subject_appearance(cfg, subject)
        rng = np.random.default_rng([cfg.seed, subject, 7])
        noise_rng = np.random.default_rng([cfg.seed, subject, 13])
        for _ in range(cfg.samples_per_subject):
            pitch = float(np.float32(rng.uniform(plo, phi)))
            yaw = float(np.float32(rng.uniform(ylo, yhi)))
            if cfg.noise == 0:
                face, left, right = render_sample(app, pitch, yaw, cfg)
            else:
                left_f = render_eye(app, pitch, yaw, cfg.eye_hw, side=1)
                right_f = render_eye(app, pitch, yaw, cfg.eye_hw, side=-1)
                face_f = render_face(app, left_f, right_f, cfg.face_hw)
                noisy = []
                for img in (face_f, left_f, right_f):
                    img = img + noise_rng.normal(0, cfg.noise, size=img.shape)
                    noisy.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))
                face, left, right = noisy
            gaze = pitchyaw_to_vector(pitch, yaw).astype(np.float32)
            records.append(SampleRecord(face, left, right, gaze, subject, sample_id))
            sample_id += 1
    return records


def synth_generate(cfg: SynthConfig, path) -> int:
    """Render the configured dataset and write it to path; returns count."""
    records = generate_records(cfg)
    write_dataset(records, path)
    return len(records)


class NormalizedLayoutAdapter:
    """Interface for converting externally normalized gaze datasets into
    SampleRecords. Concrete adapters implement iter_samples; nothing in
    this package downloads or parses external archives."""

    def iter_samples(self):
        raise NotImplementedError("adapter must yield SampleRecord instances")
