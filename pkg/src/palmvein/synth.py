"""Procedural generator of palm-vein-like ROI images.

Each subject is a reproducible set of smooth dark curves (the identity);
each sample renders those curves under a small pose perturbation onto a
textured, brighter background. Two parameter distributions, A and B, differ
in stroke thickness, background texture and contrast to create a measurable
domain gap for cross-distribution experiments.

Every random draw derives from named SeedSequence streams, so the whole
dataset is a pure function of (master_seed, config) and any sample can be
regenerated independently of the others.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import make_interp_spline
from scipy.ndimage import gaussian_filter, map_coordinates, rotate, shift

from .dataio import MANIFEST_NAME, ManifestRecord, write_manifest, write_pgm
from .errors import ContractError, DimensionError

# Stream tags keep subject geometry, pose, background and augmentation
# randomness statistically independent of one another.
_TAG_SUBJECT = 101
_TAG_POSE = 202
_TAG_BACKGROUND = 303
_TAG_AUGMENT = 404

ROTATION_RANGE_DEG = 8.0   # pose rotation, +/- degrees
TRANSLATION_RANGE = 0.04   # pose translation, +/- fraction of width
REFERENCE_SIZE = 64        # resolution at which thickness is expressed


@dataclass(frozen=True)
class GenConfig:
    """Generator parameters; A and B presets differ in stroke/background stats."""

    distribution: str = "A"
    min_curves: int = 3
    max_curves: int = 12
    thickness_lo: float = 1.2
    thickness_hi: float = 2.6
    stroke_depth_lo: float = 0.35
    stroke_depth_hi: float = 0.55
    background_level: float = 0.86
    texture_amplitude: float = 0.05
    grain_sigma: float = 0.015

    def __post_init__(self):
        if not 3 <= self.min_curves <= self.max_curves <= 12:
            raise ContractError(
                f"curve count range [{self.min_curves},{self.max_curves}] outside [3,12]")

    @staticmethod
    def for_distribution(name: str) -> "GenConfig":
        if name == "A":
            return GenConfig()
        if name == "B":
            return GenConfig(distribution="B", thickness_lo=2.0, thickness_hi=4.0,
                             stroke_depth_lo=0.45, stroke_depth_hi=0.70,
                             background_level=0.74, texture_amplitude=0.09,
                             grain_sigma=0.025)
        raise ContractError(f"unknown distribution {name!r} (expected 'A' or 'B')")


@dataclass(frozen=True)
class SubjectTemplate:
    """Identity-bearing geometry: regenerable bit-for-bit from (id, seed)."""

    subject_id: int
    seed: int
    vein_curves: tuple[np.ndarray, ...]      # each [K,2] control points in [0,1]^2
    thickness_profile: tuple[float, ...]     # stroke width in px at REFERENCE_SIZE
    config: GenConfig = field(default_factory=GenConfig)


def generate_subject(subject_id: int, master_seed: int,
                     config: GenConfig | None = None) -> SubjectTemplate:
    """Deterministically grow a subject's vein geometry.

    Curves are smooth random walks: a start point, a heading, and per-step
    curvature noise, clipped to the unit square.
    """
    if config is None:
        config = GenConfig()
    seed = int(np.random.SeedSequence(
        [master_seed, subject_id, _TAG_SUBJECT]).generate_state(1, np.uint64)[0])
    rng = np.random.default_rng(seed)

    n_curves = int(rng.integers(config.min_curves, config.max_curves + 1))
    curves = []
    thickness = []
    for _ in range(n_curves):
        k = int(rng.integers(5, 8))
        pts = np.empty((k, 2))
        pts[0] = rng.uniform(0.08, 0.92, size=2)
        heading = rng.uniform(0.0, 2.0 * np.pi)
        step = rng.uniform(0.12, 0.22)
        for i in range(1, k):
            heading += rng.normal(0.0, 0.55)
            pts[i] = pts[i - 1] + step * np.array([np.cos(heading), np.sin(heading)])
        curves.append(np.clip(pts, 0.03, 0.97))
        thickness.append(float(rng.uniform(config.thickness_lo, config.thickness_hi)))
    return SubjectTemplate(subject_id=subject_id, seed=seed,
                           vein_curves=tuple(curves),
                           thickness_profile=tuple(thickness), config=config)


def _curve_points(ctrl: np.ndarray, n_dense: int) -> np.ndarray:
    """Evaluate a smooth spline through control points, uniform in arc length."""
    k = min(3, len(ctrl) - 1)
    t = np.linspace(0.0, 1.0, len(ctrl))
    spline = make_interp_spline(t, ctrl, k=k)
    raw = spline(np.linspace(0.0, 1.0, 4 * n_dense))
    seg = np.linalg.norm(np.diff(raw, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    if arc[-1] <= 0:
        return raw[:1].repeat(n_dense, axis=0)
    want = np.linspace(0.0, arc[-1], n_dense)
    x = np.interp(want, arc, raw[:, 0])
    y = np.interp(want, arc, raw[:, 1])
    return np.stack([x, y], axis=1)


def render_sample(template: SubjectTemplate, pose_seed: int, size: int = 64) -> np.ndarray:
    """Render one sample: posed dark strokes over a textured background.

    The pose stream perturbs global rotation (+/-8 deg), translation (+/-4%
    of width) and stroke intensity; the background stream adds low-frequency
    texture and fine grain. Output is float32 in [0,1].
    """
    if size < 32:
        raise DimensionError(f"render size must be >= 32, got {size}")
    cfg = template.config
    pose_rng = np.random.default_rng([template.seed, pose_seed, _TAG_POSE])
    bg_rng = np.random.default_rng([template.seed, pose_seed, _TAG_BACKGROUND])

    angle = pose_rng.uniform(-ROTATION_RANGE_DEG, ROTATION_RANGE_DEG) * np.pi / 180.0
    tx, ty = pose_rng.uniform(-TRANSLATION_RANGE, TRANSLATION_RANGE, size=2)
    intensity = pose_rng.uniform(0.85, 1.15)
    rot = np.array([[np.cos(angle), -np.sin(angle)],
                    [np.sin(angle), np.cos(angle)]])

    veins = np.zeros((size, size), dtype=np.float64)
    scale = size / REFERENCE_SIZE
    for ctrl, thick in zip(template.vein_curves, template.thickness_profile):
        posed = (ctrl - 0.5) @ rot.T + 0.5 + np.array([tx, ty])
        pts = _curve_points(posed, n_dense=4 * size) * size
        cols = np.clip(pts[:, 0].astype(np.int64), 0, size - 1)
        rows = np.clip(pts[:, 1].astype(np.int64), 0, size - 1)
        canvas = np.zeros((size, size), dtype=np.float64)
        np.add.at(canvas, (rows, cols), 1.0)
        sigma = max(0.6, 0.5 * thick * scale)
        canvas = gaussian_filter(canvas, sigma=sigma, mode="constant")
        depth = pose_rng.uniform(cfg.stroke_depth_lo, cfg.stroke_depth_hi)
        peak = canvas.max()
        if peak > 0:
            veins += (canvas / peak) * depth

    texture = gaussian_filter(bg_rng.normal(0.0, 1.0, (size, size)), sigma=size / 8.0,
                              mode="reflect")
    tex_peak = np.abs(texture).max()
    if tex_peak > 0:
        texture = texture / tex_peak * cfg.texture_amplitude
    grain = bg_rng.normal(0.0, cfg.grain_sigma, (size, size))
    img = cfg.background_level + texture + grain - np.clip(veins, 0.0, 0.9) * intensity
    return np.clip(img, 0.0, 1.0).astype(np.float32)


@dataclass(frozen=True)
class AugmentConfig:
    """Augmentation ranges; all zero means bit-exact identity."""

    rotation_range: float = 0.0    # degrees
    translation_range: float = 0.0  # fraction of width
    elastic_jitter: float = 0.0    # displacement amplitude, pixels
    brightness_range: float = 0.0  # additive offset
    noise_sigma: float = 0.0       # Gaussian std

    def __post_init__(self):
        for name in ("rotation_range", "translation_range", "elastic_jitter",
                     "brightness_range", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative")

    @staticmethod
    def training_default() -> "AugmentConfig":
        return AugmentConfig(rotation_range=5.0, translation_range=0.03,
                             elastic_jitter=1.2, brightness_range=0.06,
                             noise_sigma=0.015)


def augment(image: np.ndarray, aug_config: AugmentConfig, seed: int) -> np.ndarray:
    """Apply rotation, translation, elastic jitter, brightness, noise -- in
    that fixed order; each step runs only if its range is positive, so the
    all-zero config is a bit-exact identity. Deterministic given seed."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 2:
        raise DimensionError(f"augment expects a 2-D image, got {img.ndim} dims")
    cfg = aug_config
    rng = np.random.default_rng([seed, _TAG_AUGMENT])
    h, w = img.shape
    out = img.copy()

    if cfg.rotation_range > 0:
        angle = rng.uniform(-cfg.rotation_range, cfg.rotation_range)
        out = rotate(out, angle, reshape=False, order=1, mode="nearest")
    if cfg.translation_range > 0:
        dy, dx = rng.uniform(-cfg.translation_range, cfg.translation_range, size=2) * w
        out = shift(out, (dy, dx), order=1, mode="nearest")
    if cfg.elastic_jitter > 0:
        fields = gaussian_filter(rng.normal(0.0, 1.0, (2, h, w)),
                                 sigma=(0, h / 8.0, w / 8.0), mode="reflect")
        norm = np.abs(fields).max()
        if norm > 0:
            fields = fields / norm * cfg.elastic_jitter
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        out = map_coordinates(out, [ys + fields[0], xs + fields[1]],
                              order=1, mode="nearest").astype(np.float32)
    if cfg.brightness_range > 0:
        out = out + np.float32(rng.uniform(-cfg.brightness_range, cfg.brightness_range))
    if cfg.noise_sigma > 0:
        out = out + rng.normal(0.0, cfg.noise_sigma, (h, w)).astype(np.float32)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def build_dataset(n_subjects: int, samples_per_subject: int, size: int,
                  master_seed: int, distribution: str,
                  out_dir: str | Path) -> list[ManifestRecord]:
    """Generate a dataset on disk: PGM images plus a manifest.

    Sample indices 0..s/2-1 are the gallery, the rest the probe. The whole
    dataset is a pure function of (master_seed, distribution, sizes).
    """
    if samples_per_subject % 2 != 0:
        raise ContractError(
            f"samples_per_subject must be even for the half/half split, "
            f"got {samples_per_subject}")
    if n_subjects < 1 or samples_per_subject < 2:
        raise ContractError("need at least 1 subject and 2 samples per subject")
    config = GenConfig.for_distribution(distribution)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    half = samples_per_subject // 2

    records = []
    for sid in range(n_subjects):
        template = generate_subject(sid, master_seed, config)
        for idx in range(samples_per_subject):
            img = render_sample(template, pose_seed=idx, size=size)
            rel = f"s{sid:04d}_i{idx:02d}.pgm"
            write_pgm(out_dir / rel, img)
            records.append(ManifestRecord(
                subject_id=sid, sample_index=idx,
                role="gallery" if idx < half else "probe",
                distribution=distribution, relative_path=rel))
    write_manifest(records, out_dir / MANIFEST_NAME)
    return records
