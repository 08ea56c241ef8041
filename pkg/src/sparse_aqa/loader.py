import csv
import json
import logging
import os
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from .config import (
    CHECKPOINT_MAGIC,
    FEATURE_MAGIC,
    GENDERS,
    METRICS_COLUMNS,
    NUM_JOINTS,
    REPORT_COLUMNS,
    SEQUENCE_MAGIC,
    YEAR_RANGE,
    AdamState,
    Array,
    Checkpoint,
    RawFrame,
    SampleLabel,
    SkeletonSequence,
    run_config_from_mapping,
)
from .exceptions import CheckpointError, ConfigurationError, FormatError, ParseError, SchemaError
from .skeleton import parse_openpose_frame


logger = logging.getLogger(__name__)

LABEL_COLUMNS: list[str] = ["sample_id", "total_score", "gender", "difficulty", "event", "year"]

_HEADER_DTYPE = np.dtype("<u4")
_ADAM_M = "adam.m."
_ADAM_V = "adam.v."


# ---------------------------------------------------------------------------
# Pose records and labels
# ---------------------------------------------------------------------------


def list_samples(input_dir: str) -> list[str]:
    """Sample ids of a pose corpus: the sub-directories of `input_dir`, sorted."""
    return sorted(
        name for name in os.listdir(input_dir) if os.path.isdir(os.path.join(input_dir, name))
    )


def read_pose_directory(path: str) -> list[list[RawFrame]]:
    """Decode every JSON pose record of a sample directory.

    Files are taken in file-name order; the position in that order is the
    frame index.

    Returns:
        Per frame, the list of detected people.
    """
    names = sorted(name for name in os.listdir(path) if name.lower().endswith(".json"))

    candidates: list[list[RawFrame]] = []
    for index, name in enumerate(names):
        with open(os.path.join(path, name), "rb") as f:
            record = f.read()
        try:
            candidates.append(parse_openpose_frame(record, frame_index=index))
        except ParseError as e:
            raise ParseError(f"{os.path.join(path, name)}: {e.reason}", e.offset) from e
        except SchemaError as e:
            raise SchemaError(f"{os.path.join(path, name)}: {e}") from e

    return candidates


def load_labels(path: str) -> dict[str, SampleLabel]:
    """Read a label file.

    The file is comma-delimited with a header row naming the columns
    sample_id, total_score, gender, difficulty, event, year. `difficulty` may
    be empty.

    Returns:
        Labels keyed by sample id, in file order.

    Raises:
        SchemaError: on missing columns or invalid values, with the line number.
    """
    labels: dict[str, SampleLabel] = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = set(LABEL_COLUMNS) - set(reader.fieldnames or [])
        if len(missing) > 0:
            raise SchemaError(f"{path}: missing label columns {sorted(missing)}")

        for row in reader:
            line = reader.line_num
            if None in row.values():
                short = [name for name, value in row.items() if value is None]
                raise SchemaError(f"{path}:{line}: row has no value for {short}")
            try:
                score = float(row["total_score"])
                year = int(row["year"])
                difficulty = float(row["difficulty"]) if row["difficulty"].strip() else None
            except ValueError as e:
                raise SchemaError(f"{path}:{line}: {e}") from e

            gender = row["gender"].strip().lower()
            if gender not in GENDERS:
                raise SchemaError(f"{path}:{line}: unknown gender '{row['gender']}'")
            if score < 0:
                raise SchemaError(f"{path}:{line}: negative total score {score}")
            if not YEAR_RANGE[0] <= year <= YEAR_RANGE[1]:
                raise SchemaError(f"{path}:{line}: year {year} outside {YEAR_RANGE}")

            sample_id = row["sample_id"].strip()
            labels[sample_id] = SampleLabel(
                total_score=score,
                gender=gender,
                event=row["event"].strip(),
                year=year,
                difficulty=difficulty,
                sample_id=sample_id,
            )

    return labels


def write_labels(path: str, labels: Iterable[SampleLabel]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(LABEL_COLUMNS)
        for label in labels:
            writer.writerow(
                [
                    label.sample_id,
                    repr(label.total_score),
                    label.gender,
                    "" if label.difficulty is None else repr(label.difficulty),
                    label.event,
                    label.year,
                ]
            )


# ---------------------------------------------------------------------------
# Binary containers
# ---------------------------------------------------------------------------


def _write_container(path: str, magic: bytes, data: Array, dtype: str) -> None:
    """Write magic, the three dimensions as little-endian uint32, then the payload."""
    header = np.asarray(data.shape, dtype=_HEADER_DTYPE).tobytes()
    with open(path, "wb") as f:
        f.write(magic)
        f.write(header)
        f.write(np.ascontiguousarray(data, dtype=dtype).tobytes())


def _read_container(path: str, magic: bytes, dtype: str) -> Array:
    with open(path, "rb") as f:
        raw = f.read()

    header_len = len(magic) + 3 * _HEADER_DTYPE.itemsize
    if len(raw) < header_len or raw[: len(magic)] != magic:
        raise FormatError(f"{path}: not a {magic.decode()} container")

    shape = tuple(int(v) for v in np.frombuffer(raw, _HEADER_DTYPE, 3, len(magic)))
    payload = raw[header_len:]
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(payload) != expected:
        raise FormatError(
            f"{path}: header announces {shape} but payload holds {len(payload)} bytes"
        )

    return np.frombuffer(payload, dtype=dtype).astype(np.float64).reshape(shape)


def write_sequence(path: str, seq: SkeletonSequence) -> None:
    """Store a cleaned sequence as an AQASEQ01 container of float64 values."""
    data = np.stack([frame.joints for frame in seq.frames])
    _write_container(path, SEQUENCE_MAGIC, data, "<f8")


def read_sequence(path: str) -> SkeletonSequence:
    data = _read_container(path, SEQUENCE_MAGIC, "<f8")
    if data.shape[1:] != (NUM_JOINTS, 3):
        raise FormatError(f"{path}: expected frames x {NUM_JOINTS} x 3, got {data.shape}")

    sample_id = os.path.splitext(os.path.basename(path))[0]
    frames = tuple(RawFrame(data[t], t) for t in range(data.shape[0]))
    return SkeletonSequence(frames, sample_id, (False,) * len(frames))


def write_features(path: str, features: Array) -> None:
    """Store per-clip appearance features (clips, steps, channels) as float32."""
    if features.ndim != 3:
        raise FormatError(f"appearance features must be 3-D, got {features.shape}")
    _write_container(path, FEATURE_MAGIC, features, "<f4")


def read_features(path: str) -> Array:
    return _read_container(path, FEATURE_MAGIC, "<f4")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    """Write parameters, optimizer moments and the run config to `path`.

    Layout: magic, little-endian uint64 header length, JSON header with sorted
    keys, then the float64 tensors in header order. Saving a loaded checkpoint
    reproduces the file byte for byte.
    """
    entries: list[tuple[str, Array]] = list(ckpt.params.items())
    entries += [(_ADAM_M + name, arr) for name, arr in ckpt.adam.m.items()]
    entries += [(_ADAM_V + name, arr) for name, arr in ckpt.adam.v.items()]

    index: list[dict[str, Any]] = []
    chunks: list[bytes] = []
    offset = 0
    for name, arr in entries:
        chunk = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index.append({"name": name, "offset": offset, "shape": list(arr.shape)})
        chunks.append(chunk)
        offset += len(chunk)

    header = {
        "adam_step": ckpt.adam.step,
        "config": ckpt.config._asdict(),
        "epoch": ckpt.epoch,
        "score_range": list(ckpt.score_range),
        "tensors": index,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(np.uint64(len(header_bytes)).astype("<u8").tobytes())
        f.write(header_bytes)
        for chunk in chunks:
            f.write(chunk)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()

    start = len(CHECKPOINT_MAGIC) + 8
    if len(raw) < start or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")

    header_len = int(np.frombuffer(raw, "<u8", 1, len(CHECKPOINT_MAGIC))[0])
    try:
        header = json.loads(raw[start : start + header_len].decode("utf-8"))
        config = run_config_from_mapping(header["config"])
        adam_step = int(header["adam_step"])
        epoch = int(header["epoch"])
        score_range = (float(header["score_range"][0]), float(header["score_range"][1]))
        index = [
            (str(entry["name"]), tuple(int(n) for n in entry["shape"]), int(entry["offset"]))
            for entry in header["tensors"]
        ]
    except (ValueError, KeyError, TypeError, IndexError) as e:
        raise CheckpointError(f"{path}: unreadable header: {e}") from e

    payload = raw[start + header_len :]
    params: dict[str, Array] = {}
    m: dict[str, Array] = {}
    v: dict[str, Array] = {}
    for name, shape, offset in index:
        count = int(np.prod(shape))
        if offset < 0 or offset + 8 * count > len(payload):
            raise CheckpointError(f"{path}: tensor '{name}' is truncated")
        arr = np.frombuffer(payload, "<f8", count, offset).astype(np.float64)
        arr = arr.reshape(shape)

        if name.startswith(_ADAM_M):
            m[name[len(_ADAM_M) :]] = arr
        elif name.startswith(_ADAM_V):
            v[name[len(_ADAM_V) :]] = arr
        else:
            params[name] = arr

    return Checkpoint(
        params=params,
        adam=AdamState(adam_step, m, v),
        config=config,
        epoch=epoch,
        score_range=score_range,
    )


# ---------------------------------------------------------------------------
# Reports and metrics
# ---------------------------------------------------------------------------


def write_report(path: str, rows: Sequence[dict[str, Any]]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def start_metrics_log(path: str) -> None:
    with open(path, "w", newline="") as f:
        csv.writer(f, lineterminator="\n").writerow(METRICS_COLUMNS)


def append_metrics_row(path: str, row: Sequence[str]) -> None:
    if len(row) != len(METRICS_COLUMNS):
        raise ConfigurationError(f"metrics row has {len(row)} fields")
    with open(path, "a", newline="") as f:
        csv.writer(f, lineterminator="\n").writerow(row)


def read_metrics_log(path: str) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def write_eval_record(path: str, record: dict[str, Any]) -> None:
    with open(path, "w") as f:
        json.dump(record, f, sort_keys=True, indent=2)
        f.write("\n")


def ensure_dir(path: Optional[str]) -> None:
    if path is not None:
        os.makedirs(path, exist_ok=True)
