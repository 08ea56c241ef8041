import os
from pathlib import Path

import numpy as np
import pytest

from sparse_aqa import synth
from sparse_aqa.config import SynthSpec
from sparse_aqa.exceptions import ConfigurationError
from sparse_aqa.loader import load_labels, read_features, read_pose_directory


def _tree(root: str) -> dict[str, bytes]:
    files = {}
    for base, _, names in os.walk(root):
        for name in names:
            path = os.path.join(base, name)
            with open(path, "rb") as f:
                files[os.path.relpath(path, root)] = f.read()
    return files


def test_constant_velocity_scores_one() -> None:
    t = np.arange(40)[:, None, None]
    velocity = np.linspace(-3, 3, 50).reshape(1, 25, 2)
    assert synth.motion_score(t * velocity, 1.5) == 1.0
    assert synth.motion_score(np.ones((40, 25, 2)), 1.5) == 1.0


def test_uneven_motion_scores_lower(rng: np.random.Generator) -> None:
    steady = np.cumsum(np.ones((60, 25, 2)), axis=0)
    jerky = np.cumsum(rng.exponential(size=(60, 25, 2)) ** 3, axis=0)
    assert 0.0 <= synth.motion_score(jerky, 1.5) < synth.motion_score(steady, 1.5)


def test_motion_score_rejects_scale() -> None:
    with pytest.raises(ConfigurationError):
        synth.motion_score(np.zeros((3, 25, 2)), 0.0)


def test_label_follows_the_trajectory(rng: np.random.Generator) -> None:
    spec = SynthSpec(clip_len=8, noise=0.0)
    detections, label, trajectory = synth.generate_sample(spec, rng, "synth_0000")
    assert len(detections) == 64
    assert trajectory.shape == (64, 25, 2)
    assert label.total_score == synth.motion_score(trajectory, spec.energy_scale)
    assert 0.0 <= label.total_score <= 1.0
    assert label.gender in ("female", "male")
    assert label.sample_id == "synth_0000"


def test_generate_corpus_layout(tmp_path: Path) -> None:
    spec = SynthSpec(n_samples=16, clip_len=4, n_frames=30, missing_rate=0.2, appearance_dim=5, seed=11)
    labels = synth.generate_corpus(spec, str(tmp_path))

    assert len(labels) == 16
    poses = os.path.join(tmp_path, "poses")
    assert sorted(os.listdir(poses)) == [synth.sample_name(i) for i in range(16)]
    assert list(load_labels(os.path.join(tmp_path, "labels.csv"))) == [label.sample_id for label in labels]

    first = read_pose_directory(os.path.join(poses, "synth_0000"))
    assert len(first) == 30
    assert read_features(os.path.join(tmp_path, "features", "synth_0003.feat")).shape == (7, 4, 5)


def test_generate_corpus_is_deterministic(tmp_path: Path) -> None:
    spec = SynthSpec(n_samples=3, clip_len=4, noise=0.0, missing_rate=0.3, seed=5)
    synth.generate_corpus(spec, os.path.join(tmp_path, "a"))
    synth.generate_corpus(spec, os.path.join(tmp_path, "b"))
    assert _tree(os.path.join(tmp_path, "a")) == _tree(os.path.join(tmp_path, "b"))

    synth.generate_corpus(spec._replace(seed=6), os.path.join(tmp_path, "c"))
    assert _tree(os.path.join(tmp_path, "a")) != _tree(os.path.join(tmp_path, "c"))


def test_gender_threshold(tmp_path: Path) -> None:
    spec = SynthSpec(n_samples=6, clip_len=4, gender_threshold=0.0, missing_rate=0.0)
    assert {label.gender for label in synth.generate_corpus(spec, str(tmp_path))} == {"male"}


@pytest.mark.parametrize(
    "spec",
    [SynthSpec(n_samples=0), SynthSpec(noise=-0.1), SynthSpec(missing_rate=1.5)],
    ids=["no samples", "negative noise", "missing rate"],
)
def test_generate_corpus_rejects_spec(tmp_path: Path, spec: SynthSpec) -> None:
    with pytest.raises(ConfigurationError):
        synth.generate_corpus(spec, str(tmp_path))


def test_appearance_features_need_enough_frames(tmp_path: Path) -> None:
    with pytest.raises(ConfigurationError):
        synth.generate_corpus(SynthSpec(clip_len=2, appearance_dim=4), str(tmp_path))
