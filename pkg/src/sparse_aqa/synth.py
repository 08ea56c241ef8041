"""Synthetic pose corpora.

Each sample is a BODY_25 skeleton drifting across the image at constant speed
while its joints oscillate on three shared low-frequency sinusoids. A hidden
quality latent scales the oscillation: the larger it is, the more uneven the
frame-to-frame motion energy and the lower the score. A second latent sets the
shoulder and hip widths and decides the gender label.
"""

import logging
import os

import numpy as np

from .config import (
    APPEARANCE_STEPS,
    NUM_CLIPS,
    NUM_JOINTS,
    YEAR_RANGE,
    Array,
    RawFrame,
    SampleLabel,
    SynthSpec,
)
from .exceptions import ConfigurationError
from .loader import write_features, write_labels
from .skeleton import format_openpose_frame


logger = logging.getLogger(__name__)

# Standing pose in pixels relative to MidHip, y pointing down.
BASE_POSE: Array = np.array(
    [
        [0.0, -150.0],
        [0.0, -100.0],
        [-30.0, -100.0],
        [-40.0, -60.0],
        [-45.0, -20.0],
        [30.0, -100.0],
        [40.0, -60.0],
        [45.0, -20.0],
        [0.0, 0.0],
        [-15.0, 0.0],
        [-17.0, 50.0],
        [-18.0, 100.0],
        [15.0, 0.0],
        [17.0, 50.0],
        [18.0, 100.0],
        [-5.0, -155.0],
        [5.0, -155.0],
        [-10.0, -150.0],
        [10.0, -150.0],
        [25.0, 108.0],
        [30.0, 106.0],
        [15.0, 104.0],
        [-25.0, 108.0],
        [-30.0, 106.0],
        [-15.0, 104.0],
    ]
)
TORSO_PX: float = 100.0
ORIGIN: tuple[float, float] = (640.0, 360.0)
SHOULDER_JOINTS: list[int] = [2, 3, 4, 5, 6, 7]
HIP_JOINTS: list[int] = [9, 10, 11, 12, 13, 14, 19, 20, 21, 22, 23, 24]

DRIFT_PX: float = 4.0
AMPLITUDE_PX: float = 12.0
FREQUENCIES: tuple[int, ...] = (1, 2, 3)
AUDIENCE_CONFIDENCE: float = 0.3
EVENT: str = "floor"


def sample_name(index: int) -> str:
    return f"synth_{index:04d}"


def frame_file_name(sample_id: str, frame: int) -> str:
    return f"{sample_id}_{frame:012d}_keypoints.json"


def motion_energy(trajectory: Array) -> Array:
    """Mean squared joint displacement between consecutive frames.

    Args:
        trajectory: joint positions of shape (frames, joints, 2).

    Returns:
        One value per frame transition.
    """
    step = np.diff(trajectory, axis=0)
    return np.asarray(np.mean(np.sum(step * step, axis=-1), axis=-1))


def motion_score(trajectory: Array, energy_scale: float) -> float:
    """Score a trajectory by how evenly its motion energy is spread in time.

    score = clamp01(1 - var(e) / mean(e)^2 / energy_scale) with e the motion
    energy. A motionless or constant-velocity trajectory scores 1.
    """
    if energy_scale <= 0:
        raise ConfigurationError(f"energy_scale must be positive, got {energy_scale}")
    energy = motion_energy(trajectory)
    level = float(np.mean(energy))
    if level == 0.0:
        return 1.0
    spread = float(np.var(energy)) / (level * level)
    return float(np.clip(1.0 - spread / energy_scale, 0.0, 1.0))


def _body(gender_latent: float) -> Array:
    body = BASE_POSE.copy()
    body[SHOULDER_JOINTS, 0] *= 0.8 + 0.4 * gender_latent
    body[HIP_JOINTS, 0] *= 1.2 - 0.4 * gender_latent
    return body


def _trajectory(
    rng: np.random.Generator, frames: int, quality: float, body: Array, noise: float
) -> Array:
    t = np.arange(frames)
    phases = rng.uniform(0.0, 2 * np.pi, len(FREQUENCIES))
    waves = np.stack(
        [np.sin(2 * np.pi * f * t / frames + phi) for f, phi in zip(FREQUENCIES, phases)]
    )

    amplitude = AMPLITUDE_PX * quality * rng.uniform(0.5, 1.0, (NUM_JOINTS, len(FREQUENCIES)))
    angle = rng.uniform(0.0, 2 * np.pi, (NUM_JOINTS, len(FREQUENCIES)))
    direction = np.stack([np.cos(angle), np.sin(angle)], axis=-1)

    # (frames, joints, 2) oscillation summed over the frequencies
    oscillation = np.einsum("kt,jk,jkd->tjd", waves, amplitude, direction)

    drift = np.zeros((frames, 1, 2))
    drift[:, 0, 0] = DRIFT_PX * t
    trajectory = np.asarray(ORIGIN) + body[None] + drift + oscillation
    if noise > 0:
        trajectory = trajectory + rng.normal(0.0, noise * TORSO_PX, trajectory.shape)
    return np.asarray(trajectory)


def _corrupt(rng: np.random.Generator, joints: Array) -> list[RawFrame]:
    """Apply one of the detector failure modes to a frame."""
    kind = int(rng.integers(4))
    if kind == 2:
        return []

    frame = joints.copy()
    if kind == 0:
        missing = rng.choice(NUM_JOINTS, size=int(rng.integers(1, 6)), replace=False)
        frame[missing] = 0.0
    elif kind == 1:
        missing = rng.choice(NUM_JOINTS, size=int(rng.integers(6, 11)), replace=False)
        frame[missing] = 0.0
    else:
        audience = joints.copy()
        audience[:, 0] += rng.uniform(200.0, 400.0)
        audience[:, 2] = AUDIENCE_CONFIDENCE
        return [RawFrame(frame), RawFrame(audience)]
    return [RawFrame(frame)]


def _appearance_features(trajectory: Array, projection: Array) -> Array:
    """Per-clip features summarizing joint speed, shape (7, 4, dim)."""
    centered = trajectory - trajectory[:, 8:9]
    speed = np.linalg.norm(np.diff(centered, axis=0), axis=-1) / TORSO_PX
    width = np.abs(centered[:, :, 0]) / TORSO_PX

    chunks = np.array_split(np.arange(speed.shape[0]), NUM_CLIPS * APPEARANCE_STEPS)
    stats = np.stack(
        [np.concatenate([speed[c].mean(axis=0), width[c].mean(axis=0)]) for c in chunks]
    )
    features = np.tanh(stats @ projection)
    return np.asarray(features.reshape(NUM_CLIPS, APPEARANCE_STEPS, projection.shape[1]))


def generate_sample(
    spec: SynthSpec, rng: np.random.Generator, sample_id: str
) -> tuple[list[list[RawFrame]], SampleLabel, Array]:
    """Draw one sample.

    Returns:
        Per frame the detections to write, the label and the clean trajectory
        of shape (frames, 25, 2) the label was computed from.
    """
    frames = spec.n_frames if spec.n_frames > 0 else (NUM_CLIPS + 1) * spec.clip_len
    quality = float(rng.uniform())
    gender_latent = float(rng.uniform())

    trajectory = _trajectory(rng, frames, quality, _body(gender_latent), spec.noise)
    score = motion_score(trajectory, spec.energy_scale)
    confidence = rng.uniform(0.6, 1.0, (frames, NUM_JOINTS))
    corrupted = rng.uniform(size=frames) < spec.missing_rate

    detections: list[list[RawFrame]] = []
    for t in range(frames):
        joints = np.concatenate([trajectory[t], confidence[t][:, None]], axis=-1)
        if corrupted[t]:
            detections.append(_corrupt(rng, joints))
        else:
            detections.append([RawFrame(joints)])

    label = SampleLabel(
        total_score=score,
        gender="male" if gender_latent >= spec.gender_threshold else "female",
        event=EVENT,
        year=int(rng.integers(YEAR_RANGE[0], YEAR_RANGE[1] + 1)),
        sample_id=sample_id,
    )
    return detections, label, trajectory


def generate_corpus(spec: SynthSpec, out_dir: str) -> list[SampleLabel]:
    """Write a synthetic corpus in the on-disk layout of a real one.

    Pose records go to `<out_dir>/poses/<sample_id>/`, labels to
    `<out_dir>/labels.csv` and, when `spec.appearance_dim` is positive,
    appearance features to `<out_dir>/features/<sample_id>.feat`.

    Returns:
        The generated labels in sample order.
    """
    if spec.n_samples < 1 or spec.clip_len < 2 or spec.noise < 0:
        raise ConfigurationError("n_samples, clip_len must be positive and noise >= 0")
    if not 0.0 <= spec.missing_rate <= 1.0:
        raise ConfigurationError(f"missing_rate must lie in [0, 1], got {spec.missing_rate}")
    frames = spec.n_frames if spec.n_frames > 0 else (NUM_CLIPS + 1) * spec.clip_len
    if spec.appearance_dim > 0 and frames <= NUM_CLIPS * APPEARANCE_STEPS:
        raise ConfigurationError(
            f"appearance features need more than {NUM_CLIPS * APPEARANCE_STEPS} frames, got {frames}"
        )

    children = np.random.SeedSequence(spec.seed).spawn(spec.n_samples + 1)
    projection_rng = np.random.Generator(np.random.PCG64(children[-1]))
    projection = projection_rng.normal(0.0, 1.0, (2 * NUM_JOINTS, max(spec.appearance_dim, 1)))

    pose_root = os.path.join(out_dir, "poses")
    os.makedirs(pose_root, exist_ok=True)
    if spec.appearance_dim > 0:
        os.makedirs(os.path.join(out_dir, "features"), exist_ok=True)

    labels: list[SampleLabel] = []
    for index in range(spec.n_samples):
        rng = np.random.Generator(np.random.PCG64(children[index]))
        sample_id = sample_name(index)
        detections, label, trajectory = generate_sample(spec, rng, sample_id)

        sample_dir = os.path.join(pose_root, sample_id)
        os.makedirs(sample_dir, exist_ok=True)
        for t, people in enumerate(detections):
            with open(os.path.join(sample_dir, frame_file_name(sample_id, t)), "w") as f:
                f.write(format_openpose_frame(people))

        if spec.appearance_dim > 0:
            features = _appearance_features(trajectory, projection)
            write_features(os.path.join(out_dir, "features", f"{sample_id}.feat"), features)

        labels.append(label)
        logger.debug("%s: score %.4f, %s", sample_id, label.total_score, label.gender)

    write_labels(os.path.join(out_dir, "labels.csv"), labels)
    logger.info("wrote %d synthetic samples to %s", len(labels), out_dir)
    return labels
