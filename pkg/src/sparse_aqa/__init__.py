import os.path as osp

from .attention import (
    distill,
    dnla_delta_forward,
    dnla_mu_forward,
    nla_forward,
    vfd_forward,
)
from .config import load_run_config, load_synth_spec
from .heads import adam_step, mlp_forward, spearman, total_loss
from .jfe import (
    jfe_forward,
    load_appearance_features,
    separable_temporal_conv,
    spatial_graph_conv,
)
from .main import cmd_eval, cmd_gradcheck, cmd_preprocess, cmd_synth, cmd_train
from .skeleton import (
    build_adjacency,
    clean_sequence,
    filter_frames,
    interpolate_missing,
    normalize_sequence,
    parse_openpose_frame,
    segment_clips,
    select_athlete,
)
from .tensor import Tensor, backward


__all__ = [
    "Tensor",
    "adam_step",
    "backward",
    "build_adjacency",
    "clean_sequence",
    "cmd_eval",
    "cmd_gradcheck",
    "cmd_preprocess",
    "cmd_synth",
    "cmd_train",
    "distill",
    "dnla_delta_forward",
    "dnla_mu_forward",
    "filter_frames",
    "interpolate_missing",
    "jfe_forward",
    "load_appearance_features",
    "load_run_config",
    "load_synth_spec",
    "mlp_forward",
    "nla_forward",
    "normalize_sequence",
    "parse_openpose_frame",
    "segment_clips",
    "select_athlete",
    "separable_temporal_conv",
    "spatial_graph_conv",
    "spearman",
    "total_loss",
    "vfd_forward",
]

version_path = osp.join(osp.dirname(__file__), "VERSION.md")
if osp.exists(version_path):
    with open(version_path, "r") as f:
        __version__ = f.readline().strip()
