"""One-vs-rest sigmoid networks with extreme-value calibration for open-set recognition."""

__version__ = "0.1.0"

from .data import LabeledDataset, OpenSetSplit, gen_blobs, gen_supplementary_2d, load_csv, open_split, save_csv
from .distributions import WeibullParams, fit_weibull, student_t_sf, weibull_cdf, weibull_loglik
from .estimator import OpenSetRecognizer
from .netcore import DenseLayer, FeedforwardNet, TrainConfig, forward, init_net, region_weights, train
from .openset import (
    UNKNOWN,
    CalibratedModel,
    ClassEvtParams,
    OvrModelBank,
    Recognition,
    calibrate,
    cross_class_validate,
    extract_tails,
    membership_probability,
    partition_scores,
    recognize,
    score,
    train_bank,
)

__all__ = [
    "CalibratedModel", "ClassEvtParams", "DenseLayer", "FeedforwardNet", "LabeledDataset",
    "OpenSetRecognizer", "OpenSetSplit", "OvrModelBank", "Recognition", "TrainConfig",
    "UNKNOWN", "WeibullParams", "calibrate", "cross_class_validate", "extract_tails",
    "fit_weibull", "forward", "gen_blobs", "gen_supplementary_2d", "init_net", "load_csv",
    "membership_probability", "open_split", "partition_scores", "recognize", "region_weights",
    "save_csv", "score", "student_t_sf", "train", "train_bank", "weibull_cdf", "weibull_loglik",
]
