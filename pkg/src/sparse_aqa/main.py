import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Optional, Sequence

import numpy as np

from .attention import MaskTape
from .config import (
    GENDERS,
    NUM_CLIPS,
    AdamState,
    AdjacencyGraph,
    Checkpoint,
    FeatureLayout,
    FilterReport,
    RunConfig,
    SampleLabel,
    SkeletonSequence,
    SynthSpec,
)
from .exceptions import (
    ConfigurationError,
    DegeneratePoseError,
    EmptySequenceError,
    NumericError,
    UndefinedCorrelationError,
)
from .gradcheck import GradAudit, audit_gradients
from .heads import (
    adam_step,
    gender_accuracy,
    init_adam_state,
    mae,
    predicted_gender,
    spearman,
)
from .jfe import load_appearance_features
from .loader import (
    append_metrics_row,
    ensure_dir,
    list_samples,
    load_checkpoint,
    load_labels,
    read_features,
    read_pose_directory,
    read_sequence,
    save_checkpoint,
    start_metrics_log,
    write_eval_record,
    write_labels,
    write_report,
    write_sequence,
)
from .model import (
    ModelParams,
    Sample,
    assign_params,
    flatten_params,
    forward_sample,
    freeze,
    init_model_params,
    params_to_arrays,
    random_sample,
    rebuild_params,
    sample_loss,
)
from .skeleton import build_adjacency, clean_sequence, segment_clips
from .synth import generate_corpus
from .tensor import CompGraph, Tensor, backward, seeded_rng
from .utils import _format_metric, _is_validation


logger = logging.getLogger(__name__)

CHECKPOINT_FILE: str = "checkpoint.aqa"
METRICS_FILE: str = "metrics.csv"
EVAL_FILE: str = "eval.json"
REPORT_FILE: str = "report.csv"
LABELS_FILE: str = "labels.csv"

GRADCHECK_CLIP_LEN: int = 8


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def _clean_sample(
    input_dir: str, sample_id: str, graph: AdjacencyGraph, interpolate: bool
) -> tuple[Optional[SkeletonSequence], FilterReport, str, int]:
    candidates = read_pose_directory(os.path.join(input_dir, sample_id))
    try:
        seq, report = clean_sequence(candidates, graph, sample_id, interpolate)
    except EmptySequenceError as e:
        logger.warning("%s", e)
        report = e.report if isinstance(e.report, FilterReport) else FilterReport()
        return None, report, "empty", len(candidates)
    except DegeneratePoseError as e:
        logger.warning("%s", e)
        return None, FilterReport(), "degenerate", len(candidates)
    return seq, report, "ok", len(candidates)


def cmd_preprocess(
    input_dir: str,
    labels: Optional[str],
    output_dir: str,
    interpolate: bool = True,
    workers: int = 1,
) -> list[dict[str, Any]]:
    """Clean every pose-record directory of `input_dir`.

    Writes one `<sample_id>.seq` file per usable sample, a `report.csv` with a
    row per sample and, when `labels` is given, the validated labels of the
    written samples.

    Args:
        input_dir: directory holding one sub-directory of JSON records per sample.
        labels: optional label file to validate and carry over.
        output_dir: destination directory, created if needed.
        interpolate: repair frames with 1 to 5 missing joints.
        workers: number of samples cleaned concurrently.

    Returns:
        The report rows, in sample order.
    """
    if not os.path.isdir(input_dir):
        raise FileNotFoundError(f"input directory not found: {input_dir}")
    label_map = load_labels(labels) if labels is not None else None
    ensure_dir(output_dir)

    graph = build_adjacency()
    samples = list_samples(input_dir)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(
            pool.map(lambda s: _clean_sample(input_dir, s, graph, interpolate), samples)
        )

    rows: list[dict[str, Any]] = []
    written: list[str] = []
    for sample_id, (seq, report, status, frames) in zip(samples, results):
        if seq is not None:
            write_sequence(os.path.join(output_dir, f"{sample_id}.seq"), seq)
            written.append(sample_id)
        rows.append(
            {
                "sample_id": sample_id,
                "status": status,
                "frames": frames,
                "kept": report.kept,
                "interpolated": report.repaired,
                "discarded": report.discarded,
                "no_skeleton": report.no_skeleton,
                "multi_person": report.multi_person,
            }
        )

    write_report(os.path.join(output_dir, REPORT_FILE), rows)
    if label_map is not None:
        missing = [s for s in written if s not in label_map]
        if len(missing) > 0:
            logger.warning("%d samples have no label: %s", len(missing), ", ".join(missing))
        write_labels(
            os.path.join(output_dir, LABELS_FILE),
            [label_map[s] for s in written if s in label_map],
        )

    logger.info("preprocessed %d of %d samples into %s", len(written), len(samples), output_dir)
    return rows


def cmd_synth(spec: SynthSpec, output_dir: str) -> list[SampleLabel]:
    """Generate a synthetic pose corpus, see `synth.generate_corpus`."""
    ensure_dir(output_dir)
    return generate_corpus(spec, output_dir)


# ---------------------------------------------------------------------------
# Corpus loading
# ---------------------------------------------------------------------------


class Corpus:
    """Labelled samples of a run, sorted by sample id."""

    def __init__(
        self, ids: list[str], samples: list[Sample], labels: list[SampleLabel], channels: int
    ) -> None:
        self.ids = ids
        self.samples = samples
        self.labels = labels
        self.channels = channels

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, keep: Sequence[int]) -> "Corpus":
        return Corpus(
            [self.ids[i] for i in keep],
            [self.samples[i] for i in keep],
            [self.labels[i] for i in keep],
            self.channels,
        )


def load_corpus(cfg: RunConfig) -> Corpus:
    """Read labels and the matching samples of the configured stream.

    Samples without a cleaned sequence (or feature file) are skipped with a
    warning.

    Raises:
        ConfigurationError: if a required path is not configured.
        FileNotFoundError: if a configured path does not exist.
    """
    source = cfg.data_dir if cfg.stream == "joint" else cfg.features_dir
    if cfg.labels is None or source is None:
        key = "data_dir" if cfg.stream == "joint" else "features_dir"
        raise ConfigurationError(f"config keys 'labels' and '{key}' are required")
    for path in (cfg.labels, source):
        if not os.path.exists(path):
            raise FileNotFoundError(f"path not found: {path}")

    labels = load_labels(cfg.labels)
    ids: list[str] = []
    samples: list[Sample] = []
    kept: list[SampleLabel] = []
    channels = cfg.channels[2]
    layout: Optional[FeatureLayout] = None

    for sample_id in sorted(labels):
        if cfg.stream == "joint":
            path = os.path.join(source, f"{sample_id}.seq")
        else:
            path = os.path.join(source, f"{sample_id}.feat")
        if not os.path.exists(path):
            logger.warning("%s: no file %s, sample skipped", sample_id, path)
            continue

        if cfg.stream == "joint":
            seq = read_sequence(path)
            seq = seq._replace(sample_id=sample_id)
            sample: Sample = segment_clips(
                seq, cfg.clip_len, cfg.use_confidence, labels[sample_id]
            )
        else:
            if layout is None:
                steps = read_features(path).shape[1]
                layout = FeatureLayout(NUM_CLIPS, steps, 1)
            sample = load_appearance_features(path, layout)
            channels = sample.features.shape[1]

        ids.append(sample_id)
        samples.append(sample)
        kept.append(labels[sample_id])

    if len(ids) == 0:
        raise ConfigurationError(f"no sample of {cfg.labels} was found in {source}")
    logger.info("loaded %d samples (%s stream)", len(ids), cfg.stream)
    return Corpus(ids, samples, kept, channels)


def _score_range(labels: Sequence[SampleLabel]) -> tuple[float, float]:
    scores = [label.total_score for label in labels]
    return min(scores), max(scores)


def _normalize(label: SampleLabel, score_range: tuple[float, float]) -> SampleLabel:
    low, high = score_range
    span = high - low if high > low else 1.0
    return label._replace(total_score=(label.total_score - low) / span)


def _denormalize(score: float, score_range: tuple[float, float]) -> float:
    low, high = score_range
    span = high - low if high > low else 1.0
    return low + score * span


# ---------------------------------------------------------------------------
# Training and evaluation
# ---------------------------------------------------------------------------


def predict_corpus(
    params: ModelParams, corpus: Corpus, cfg: RunConfig, graph: AdjacencyGraph
) -> tuple[list[float], list[str]]:
    """Normalized scores and predicted genders, in corpus order."""
    frozen = freeze(params)

    def _predict(sample: Sample) -> tuple[float, str]:
        pred = forward_sample(frozen, sample, cfg, graph)
        return pred.score_norm.item(), predicted_gender(pred)

    with ThreadPoolExecutor(max_workers=max(1, cfg.workers)) as pool:
        results = list(pool.map(_predict, corpus.samples))
    return [r[0] for r in results], [r[1] for r in results]


def _safe_spearman(preds: Sequence[float], targets: Sequence[float]) -> float:
    try:
        return spearman(preds, targets)
    except UndefinedCorrelationError:
        return math.nan


def _raise_non_finite(loss: Tensor, epoch: int, sample_id: str) -> None:
    node = CompGraph.trace(loss).first_nonfinite()
    op = node.op if node is not None else "unknown"
    raise NumericError(
        f"non-finite loss at epoch {epoch} on sample '{sample_id}', "
        f"first produced by operation '{op}'"
    )


def _checkpoint(
    params: ModelParams,
    adam: AdamState,
    cfg: RunConfig,
    epoch: int,
    score_range: tuple[float, float],
) -> Checkpoint:
    return Checkpoint(params_to_arrays(params), adam, cfg, epoch, score_range)


def cmd_train(cfg: RunConfig) -> Checkpoint:
    """Train the configured network and keep the best checkpoint.

    Samples are split 80/20 (by default) on a hash of their id. Every epoch
    appends train loss, train and validation Spearman and train gender
    accuracy to `metrics.csv`. The checkpoint with the best validation
    Spearman (train Spearman without a usable validation split) is written to
    `checkpoint.aqa` in the output directory.

    Returns:
        The best checkpoint.

    Raises:
        NumericError: if the loss becomes non-finite, naming the first
            operation that produced a non-finite value.
    """
    if cfg.output_dir is None:
        raise ConfigurationError("config key 'output_dir' is required for training")
    ensure_dir(cfg.output_dir)

    corpus = load_corpus(cfg)
    split = [_is_validation(s, cfg.val_fraction) for s in corpus.ids]
    val_index = [i for i, is_val in enumerate(split) if is_val]
    train_index = [i for i, is_val in enumerate(split) if not is_val]
    if len(train_index) == 0:
        raise ConfigurationError("the training split is empty")
    train, val = corpus.subset(train_index), corpus.subset(val_index)
    logger.info("split: %d training, %d validation samples", len(train), len(val))

    score_range = _score_range(train.labels)
    train_labels = [_normalize(label, score_range) for label in train.labels]
    train_targets = [label.total_score for label in train_labels]
    val_targets = [_normalize(label, score_range).total_score for label in val.labels]

    graph = build_adjacency()
    rng = seeded_rng(cfg.seed)
    params = init_model_params(cfg, rng, corpus.channels)
    arrays = params_to_arrays(params)
    adam = init_adam_state(arrays)

    metrics_path = os.path.join(cfg.output_dir, METRICS_FILE)
    checkpoint_path = os.path.join(cfg.output_dir, CHECKPOINT_FILE)
    start_metrics_log(metrics_path)

    best = _checkpoint(params, adam, cfg, 0, score_range)
    best_score = -math.inf
    if cfg.epochs == 0:
        save_checkpoint(checkpoint_path, best)
        return best

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        losses: list[float] = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            grads = {name: np.zeros_like(arr) for name, arr in arrays.items()}
            tensors = flatten_params(params)
            for i in batch:
                loss = sample_loss(params, train.samples[i], train_labels[i], cfg, graph)
                if not math.isfinite(loss.item()):
                    _raise_non_finite(loss, epoch, train.ids[i])
                losses.append(loss.item())
                for name, g in zip(tensors, backward(loss, list(tensors.values()))):
                    grads[name] += g / len(batch)

            arrays, adam = adam_step(
                arrays, grads, adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps
            )
            params = rebuild_params(params, arrays)

        preds, genders = predict_corpus(params, train, cfg, graph)
        train_spearman = _safe_spearman(preds, train_targets)
        accuracy = gender_accuracy(genders, [label.gender for label in train.labels])
        val_spearman = math.nan
        if len(val) > 1:
            val_preds, _ = predict_corpus(params, val, cfg, graph)
            val_spearman = _safe_spearman(val_preds, val_targets)

        train_loss = float(np.mean(losses))
        append_metrics_row(
            metrics_path,
            [
                str(epoch),
                _format_metric(train_loss),
                _format_metric(train_spearman),
                _format_metric(val_spearman),
                _format_metric(accuracy),
            ],
        )
        logger.info(
            "epoch %d: loss %.5f, train spearman %.4f, val spearman %.4f, gender acc %.3f",
            epoch,
            train_loss,
            train_spearman,
            val_spearman,
            accuracy,
        )

        selection = val_spearman if not math.isnan(val_spearman) else train_spearman
        if math.isnan(selection):
            selection = -math.inf
        if selection > best_score or epoch == 1:
            best_score = max(selection, best_score)
            best = _checkpoint(params, adam, cfg, epoch, score_range)
            save_checkpoint(checkpoint_path, best)

    return best


def restore_params(ckpt: Checkpoint) -> ModelParams:
    """Rebuild frozen model parameters from a checkpoint.

    Raises:
        CheckpointError: if the stored tensors do not match the layout the
            stored config implies.
    """
    cfg = ckpt.config
    channels: Optional[int] = None
    if cfg.stream == "appearance":
        trunk = ckpt.params.get("mlp.trunk1_w")
        width = trunk.shape[0] if trunk is not None else cfg.vfd_out_len + 1
        channels = width // (cfg.vfd_out_len + 1)
    template = init_model_params(cfg, seeded_rng(cfg.seed), channels)
    return rebuild_params(template, ckpt.params, requires_grad=False)


def cmd_eval(
    checkpoint: str,
    data_dir: Optional[str] = None,
    labels: Optional[str] = None,
    output_dir: Optional[str] = None,
) -> dict[str, Any]:
    """Score a corpus with a trained checkpoint.

    Args:
        checkpoint: checkpoint file written by `cmd_train`.
        data_dir: cleaned sequences (or appearance features for the
            appearance stream); defaults to the path stored in the checkpoint.
        labels: label file; defaults to the path stored in the checkpoint.
        output_dir: when given, the record is also written to `eval.json`.

    Returns:
        Spearman correlation and MAE on denormalized scores, gender accuracy
        and the sample count.

    Raises:
        UndefinedCorrelationError: if predictions or targets are constant.
    """
    ckpt = load_checkpoint(checkpoint)
    cfg = ckpt.config
    if data_dir is not None:
        key = "data_dir" if cfg.stream == "joint" else "features_dir"
        cfg = cfg._replace(**{key: data_dir})
    if labels is not None:
        cfg = cfg._replace(labels=labels)

    params = restore_params(ckpt)
    corpus = load_corpus(cfg)
    preds, genders = predict_corpus(params, corpus, cfg, build_adjacency())

    scores = [_denormalize(p, ckpt.score_range) for p in preds]
    targets = [label.total_score for label in corpus.labels]
    record = {
        "gender_accuracy": gender_accuracy(genders, [label.gender for label in corpus.labels]),
        "mae": mae(scores, targets),
        "n_samples": len(corpus),
        "spearman": spearman(scores, targets),
    }

    if output_dir is not None:
        ensure_dir(output_dir)
        write_eval_record(os.path.join(output_dir, EVAL_FILE), record)
    logger.info("evaluated %d samples: spearman %.4f", len(corpus), record["spearman"])
    return record


# ---------------------------------------------------------------------------
# Gradient audit
# ---------------------------------------------------------------------------


def gradcheck_config(cfg: RunConfig) -> RunConfig:
    """Shrink a run config to the audit batch: 7 clips of 8 frames."""
    kernel = min(cfg.temporal_kernel, GRADCHECK_CLIP_LEN - 1)
    if kernel != cfg.temporal_kernel:
        logger.info("temporal kernel reduced to %d for %d-frame clips", kernel, GRADCHECK_CLIP_LEN)
    return cfg._replace(clip_len=GRADCHECK_CLIP_LEN, temporal_kernel=kernel)


def _audit_point(params: ModelParams, rng: np.random.Generator) -> dict[str, Any]:
    """Random values for every parameter, scaled by fan-in."""
    arrays = {}
    for name, t in flatten_params(params).items():
        bound = 1.0 / math.sqrt(t.shape[0]) if t.ndim > 0 else 0.5
        arrays[name] = rng.uniform(-bound, bound, t.shape)
    return arrays


def cmd_gradcheck(cfg: RunConfig) -> list[GradAudit]:
    """Audit the gradients of every parameter tensor of the configured mode.

    The loss of one random sample is differentiated in reverse mode and by
    central finite differences.

    Returns:
        One audit row per parameter tensor.
    """
    cfg = gradcheck_config(cfg)
    rng = seeded_rng(cfg.seed)
    channels = cfg.channels[2]

    template = init_model_params(cfg, rng, channels)
    arrays = _audit_point(template, rng)
    sample = random_sample(cfg, rng, cfg.clip_len, channels)
    label = SampleLabel(
        total_score=float(rng.uniform()), gender=GENDERS[int(rng.integers(len(GENDERS)))]
    )

    graph = build_adjacency()
    tape = MaskTape()

    def loss_fn(tensors: dict[str, Tensor]) -> Tensor:
        tape.rewind()
        params = assign_params(template, tensors)
        return sample_loss(params, sample, label, cfg, graph, tape)

    audits = audit_gradients(loss_fn, arrays, rng, cfg.gradcheck_samples)
    logger.info(
        "gradient audit (%s): %d of %d groups pass",
        cfg.mode,
        np.count_nonzero([a.passed for a in audits]),
        len(audits),
    )
    return audits
