import json
import logging
from typing import Optional, Sequence, Union

import numpy as np
from scipy.sparse.csgraph import shortest_path

from .config import (
    BODY25_EDGES,
    INTERPOLATED_CONFIDENCE,
    KEYPOINT_VALUES,
    MAX_MISSING_JOINTS,
    MIDHIP,
    MIN_VALID_JOINTS,
    NECK,
    NUM_CLIPS,
    NUM_JOINTS,
    AdjacencyGraph,
    ClipBatch,
    FilterReport,
    RawFrame,
    SampleLabel,
    SkeletonSequence,
)
from .exceptions import (
    ConfigurationError,
    ContractError,
    DegeneratePoseError,
    EmptySequenceError,
    NoSkeletonError,
    ParseError,
    SchemaError,
    UnrepairableFrameError,
)
from .tensor import Tensor
from .utils import _is_number, _valid_count, _valid_mask


logger = logging.getLogger(__name__)


def build_adjacency() -> AdjacencyGraph:
    """Build the BODY_25 joint graph.

    Returns:
        The 24-edge skeleton with its binary adjacency matrix, the symmetrically
        normalized D^-1/2 (A + I) D^-1/2 and the hop distance between joints.
    """
    adjacency = np.zeros((NUM_JOINTS, NUM_JOINTS))
    for i, j in BODY25_EDGES:
        adjacency[i, j] = adjacency[j, i] = 1.0

    with_self = adjacency + np.eye(NUM_JOINTS)
    inv_sqrt = 1.0 / np.sqrt(with_self.sum(axis=1))
    a_norm = inv_sqrt[:, None] * with_self * inv_sqrt[None, :]

    hops = shortest_path(adjacency, method="D", directed=False, unweighted=True)

    for arr in (adjacency, a_norm, hops):
        arr.setflags(write=False)

    return AdjacencyGraph(list(BODY25_EDGES), adjacency, a_norm, hops)


def parse_openpose_frame(
    record: Union[str, bytes], frame_index: int = 0
) -> list[RawFrame]:
    """Decode one OpenPose BODY_25 JSON record.

    Args:
        record: JSON text with a `people` array; each person carries a flat
            `pose_keypoints_2d` array of 75 numbers (x, y, confidence per joint).
        frame_index: index assigned to the decoded frames.

    Returns:
        One `RawFrame` per detected person, in record order. An empty `people`
        array gives an empty list.

    Raises:
        ParseError: if the record is not valid JSON, with the byte offset.
        SchemaError: if the layout or the keypoint count is wrong.
    """
    if isinstance(record, bytes):
        try:
            text = record.decode("utf-8")
        except UnicodeDecodeError as e:
            raise ParseError("invalid UTF-8", e.start) from e
    else:
        text = record

    try:
        payload = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, len(text[: e.pos].encode("utf-8"))) from e

    if not isinstance(payload, dict) or not isinstance(payload.get("people"), list):
        raise SchemaError("pose record needs a 'people' array")

    frames: list[RawFrame] = []
    for i, person in enumerate(payload["people"]):
        if not isinstance(person, dict) or "pose_keypoints_2d" not in person:
            raise SchemaError(f"person {i} has no 'pose_keypoints_2d'")

        keypoints = person["pose_keypoints_2d"]
        if not isinstance(keypoints, list) or len(keypoints) != KEYPOINT_VALUES:
            count = len(keypoints) if isinstance(keypoints, list) else "no"
            raise SchemaError(
                f"person {i}: expected {KEYPOINT_VALUES} keypoint values, got {count}"
            )
        if not all(_is_number(v) for v in keypoints):
            raise SchemaError(f"person {i}: keypoints must be numbers")

        joints = np.asarray(keypoints, dtype=np.float64).reshape(NUM_JOINTS, 3)
        frames.append(RawFrame(joints, frame_index))

    return frames


def format_openpose_frame(people: Sequence[RawFrame]) -> str:
    """Encode detections as an OpenPose BODY_25 JSON record."""
    payload = {
        "version": 1.3,
        "people": [
            {
                "person_id": [-1],
                "pose_keypoints_2d": [float(v) for v in frame.joints.reshape(-1)],
            }
            for frame in people
        ],
    }
    return json.dumps(payload)


def _mean_confidence(frame: RawFrame) -> float:
    conf = frame.joints[:, 2]
    detected = conf > 0
    if not detected.any():
        return 0.0
    return float(conf[detected].mean())


def select_athlete(candidates: Sequence[RawFrame]) -> RawFrame:
    """Pick the detection with the highest mean confidence over detected joints.

    Ties go to the lowest person index. A bystander detected with higher
    confidence than the athlete is selected too; callers count multi-person
    frames in the `FilterReport` for that reason.

    Raises:
        NoSkeletonError: if there is no candidate.
    """
    if len(candidates) == 0:
        raise NoSkeletonError("frame does not contain any skeleton")

    best = max(range(len(candidates)), key=lambda i: (_mean_confidence(candidates[i]), -i))
    return candidates[best]


def filter_frames(seq: SkeletonSequence) -> tuple[SkeletonSequence, FilterReport]:
    """Drop frames with fewer than 20 valid joints, flag the incomplete ones.

    Returns:
        The kept frames with `flagged` marking frames that have between 1 and 5
        missing joints, and the counts of the decision.

    Raises:
        EmptySequenceError: if every frame is discarded.
    """
    kept: list[RawFrame] = []
    flagged: list[bool] = []
    for frame in seq.frames:
        valid = _valid_count(frame.joints)
        if valid < MIN_VALID_JOINTS:
            continue
        kept.append(frame)
        flagged.append(valid < NUM_JOINTS)

    report = FilterReport(
        kept=len(kept),
        flagged=int(np.count_nonzero(flagged)),
        discarded=len(seq.frames) - len(kept),
    )
    if len(kept) == 0:
        raise EmptySequenceError(
            f"{seq.sample_id or 'sequence'}: all {len(seq.frames)} frames discarded",
            report,
        )

    return seq._replace(frames=tuple(kept), flagged=tuple(flagged)), report


def interpolate_missing(frame: RawFrame, graph: AdjacencyGraph) -> RawFrame:
    """Repair missing joints by K-hop interpolation.

    Each missing joint becomes the mean of the two nearest observed joints,
    nearness ordered by hop distance in the joint graph and then by joint
    index. Repaired joints get confidence 0.5.

    Raises:
        ContractError: if more than 5 joints are missing.
        UnrepairableFrameError: if fewer than 2 observed joints are reachable.
    """
    valid = _valid_mask(frame.joints)
    missing = np.flatnonzero(~valid)
    if missing.size == 0:
        return frame
    if missing.size > MAX_MISSING_JOINTS:
        raise ContractError(
            f"frame {frame.frame_index} misses {missing.size} joints, "
            f"at most {MAX_MISSING_JOINTS} can be interpolated"
        )

    observed = np.flatnonzero(valid)
    joints = frame.joints.copy()
    for j in missing:
        hops = graph.hops[j, observed]
        order = np.lexsort((observed, hops))
        nearest = [int(observed[k]) for k in order if np.isfinite(hops[k])][:2]
        if len(nearest) < 2:
            raise UnrepairableFrameError(
                f"frame {frame.frame_index}: joint {j} has fewer than 2 reachable joints"
            )
        a, b = nearest
        joints[j, :2] = (frame.joints[a, :2] + frame.joints[b, :2]) / 2
        joints[j, 2] = INTERPOLATED_CONFIDENCE

    return frame._replace(joints=joints)


def normalize_sequence(seq: SkeletonSequence) -> SkeletonSequence:
    """Center every frame on MidHip and scale by the median Neck-MidHip length.

    Confidences are kept. Joints that are still missing stay at the origin and a
    frame without MidHip is centered on the mean of its observed joints.

    Raises:
        DegeneratePoseError: if the median torso length is below 1e-6.
    """
    if len(seq.frames) == 0:
        raise ContractError("cannot normalize an empty sequence")

    joints = np.stack([frame.joints for frame in seq.frames])
    valid = joints[..., 2] > 0

    root = joints[:, MIDHIP, :2].copy()
    for t in np.flatnonzero(~valid[:, MIDHIP]):
        if valid[t].any():
            root[t] = joints[t, valid[t], :2].mean(axis=0)

    has_torso = valid[:, NECK] & valid[:, MIDHIP]
    if not has_torso.any():
        raise DegeneratePoseError(f"{seq.sample_id}: no frame shows both Neck and MidHip")
    torso = np.linalg.norm(
        joints[has_torso, NECK, :2] - joints[has_torso, MIDHIP, :2], axis=-1
    )
    scale = float(np.median(torso))
    if scale < 1e-6:
        raise DegeneratePoseError(f"{seq.sample_id}: median torso length {scale:.3g}")

    out = joints.copy()
    out[..., :2] = (joints[..., :2] - root[:, None, :]) / scale
    out[~valid, :2] = 0.0

    frames = tuple(frame._replace(joints=out[t]) for t, frame in enumerate(seq.frames))
    return seq._replace(frames=frames)


def segment_clips(
    seq: SkeletonSequence,
    clip_len: int,
    use_confidence: bool = False,
    label: Optional[SampleLabel] = None,
) -> ClipBatch:
    """Cut a sequence into 7 non-overlapping clips of `clip_len` frames.

    Long sequences use clips starting at floor(i * (len - T) / 6). Sequences
    shorter than 7T are padded by cycling from frame 0 and split contiguously.

    Args:
        seq: cleaned sequence.
        clip_len: frames per clip (T).
        use_confidence: keep the confidence as a third input channel.
        label: label carried by the batch.

    Returns:
        A batch of shape (7, T, 25, C_in) with C_in = 3 if `use_confidence`
        else 2.
    """
    if clip_len < 2:
        raise ConfigurationError(f"clip length must be at least 2, got {clip_len}")
    n = len(seq.frames)
    if n == 0:
        raise ContractError("cannot segment an empty sequence")

    data = np.stack([frame.joints for frame in seq.frames])
    if n >= NUM_CLIPS * clip_len:
        starts = [i * (n - clip_len) // (NUM_CLIPS - 1) for i in range(NUM_CLIPS)]
        clips = np.stack([data[s : s + clip_len] for s in starts])
    else:
        index = np.arange(NUM_CLIPS * clip_len) % n
        clips = data[index].reshape(NUM_CLIPS, clip_len, NUM_JOINTS, 3)

    channels = 3 if use_confidence else 2
    return ClipBatch(Tensor(clips[..., :channels]), label, seq.sample_id)


def clean_sequence(
    candidates: Sequence[Sequence[RawFrame]],
    graph: AdjacencyGraph,
    sample_id: str = "",
    interpolate: bool = True,
) -> tuple[SkeletonSequence, FilterReport]:
    """Run athlete selection, frame filtering, interpolation and normalization.

    Args:
        candidates: per frame, the detections decoded from its pose record.
        graph: joint graph used for interpolation.
        sample_id: identifier copied into the sequence.
        interpolate: repair flagged frames; when False they keep their missing
            joints.

    Returns:
        The normalized sequence and the filtering counts.

    Raises:
        EmptySequenceError: if no frame survives, carrying the report.
    """
    frames: list[RawFrame] = []
    no_skeleton = 0
    multi_person = 0
    for index, people in enumerate(candidates):
        if len(people) > 1:
            multi_person += 1
            logger.debug("%s: frame %d has %d people", sample_id, index, len(people))
        try:
            frame = select_athlete(people)
        except NoSkeletonError:
            no_skeleton += 1
            continue
        frames.append(frame._replace(frame_index=index))

    base = FilterReport(no_skeleton=no_skeleton, multi_person=multi_person)
    try:
        seq, report = filter_frames(SkeletonSequence(tuple(frames), sample_id))
    except EmptySequenceError as e:
        partial = e.report if isinstance(e.report, FilterReport) else FilterReport()
        report = base._replace(discarded=partial.discarded + no_skeleton)
        raise EmptySequenceError(str(e), report) from e

    report = report._replace(
        discarded=report.discarded + no_skeleton,
        no_skeleton=no_skeleton,
        multi_person=multi_person,
    )

    if interpolate and report.flagged > 0:
        repaired: list[RawFrame] = []
        demoted = 0
        for frame, flag in zip(seq.frames, seq.flagged):
            if not flag:
                repaired.append(frame)
                continue
            try:
                repaired.append(interpolate_missing(frame, graph))
            except UnrepairableFrameError as e:
                demoted += 1
                logger.warning("%s: %s, frame discarded", sample_id, e)

        report = report._replace(
            kept=len(repaired),
            repaired=report.flagged - demoted,
            demoted=demoted,
            discarded=report.discarded + demoted,
        )
        if len(repaired) == 0:
            raise EmptySequenceError(f"{sample_id}: all frames discarded", report)
        seq = SkeletonSequence(tuple(repaired), sample_id, (False,) * len(repaired))

    return normalize_sequence(seq), report
