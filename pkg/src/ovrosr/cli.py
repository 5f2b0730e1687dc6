"""
Command line experiment runner.

One JSON config drives every subcommand::

    ovrosr synth     --config exp.json
    ovrosr train     --config exp.json
    ovrosr calibrate --config exp.json
    ovrosr predict   --model out/calibrated.json --x 0.1,2.3
    ovrosr eval      --config exp.json
    ovrosr kl        --config exp.json
    ovrosr riskmap   --config exp.json --class o

Exit codes: 0 success, 1 runtime or numerical failure, 2 configuration or
usage error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    gen_blobs,
    gen_supplementary_2d,
    load_dataset,
    open_split,
    save_csv,
    save_osrf,
)
from .evaluation import (
    F_MEASURE_CONVENTION,
    ConfusionTally,
    OpennessSpec,
    kl_comparison_study,
    open_f_measure,
    open_space_risk,
    openness,
)
from .exceptions import (
    ConfigurationError,
    ContractError,
    DataError,
    OSRError,
    UnsupportedError,
)
from .netcore import TrainConfig
from .openset import (
    DEFAULT_ALPHA_GRID,
    DEFAULT_THETA_GRID,
    CalibratedModel,
    OvrModelBank,
    calibrate,
    cross_class_validate,
    membership_probability,
    recognize,
    train_bank,
)

log = logging.getLogger("ovrosr")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

DEFAULTS = {
    "seed": 0,
    "dataset": {"generator": "supplementary_2d", "n_per_class": 100},
    "split": None,
    "arch": [10],
    "train": {"learning_rate": 0.1, "epochs": 500, "batch_size": 32,
              "momentum": 0.9, "target_loss": 1e-3},
    "baseline": "none",
    "theta_grid": list(DEFAULT_THETA_GRID),
    "alpha_grid": list(DEFAULT_ALPHA_GRID),
    "holdout_classes": 1,
    "min_tail": 3,
    "kl_k": [4, 6, 8, 10],
    "openness_sweep": None,
    "riskmap": {"delta": 0.5, "r": 0.0, "grid_res": 128, "ball_margin": 0.25, "cutoff": None},
    "output_dir": "out",
    "formats": ["csv"],
    "test_dataset": None,
}


class ConfigError(ConfigurationError):
    def __init__(self, field_name, msg):
        self.field = field_name
        super().__init__(f"config field '{field_name}': {msg}")


def _merge(base, extra):
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _set_path(cfg, dotted, value):
    keys = dotted.split(".")
    cur = cfg
    for k in keys[:-1]:
        if not isinstance(cur.get(k), dict):
            cur[k] = {}
        cur = cur[k]
    cur[keys[-1]] = value


def _nonempty_numbers(cfg, name, lo=0.0, hi=1.0):
    vals = cfg.get(name)
    if not isinstance(vals, list) or not vals:
        raise ConfigError(name, "must be a nonempty list")
    for v in vals:
        if not isinstance(v, (int, float)) or not lo < v < hi + 1e-12:
            raise ConfigError(name, f"value {v!r} outside ({lo}, {hi}]")


@dataclass
class ExperimentConfig:
    raw: dict
    overrides: list = field(default_factory=list)

    def __getitem__(self, key):
        return self.raw[key]

    def get(self, key, default=None):
        return self.raw.get(key, default)

    @property
    def seed(self):
        return int(self.raw["seed"])

    @property
    def checksum(self):
        # output location is not part of the experiment
        content = {k: v for k, v in self.raw.items() if k != "output_dir"}
        return hashlib.sha256(json.dumps(content, sort_keys=True).encode()).hexdigest()

    @property
    def out_dir(self):
        return Path(self.raw["output_dir"])

    def train_config(self):
        t = self.raw["train"]
        try:
            return TrainConfig(float(t["learning_rate"]), int(t["epochs"]), int(t["batch_size"]),
                               float(t["momentum"]), self.seed, float(t["target_loss"]))
        except (ContractError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError("train", str(exc)) from None

    def provenance(self):
        return {"config_sha256": self.checksum, "seed": self.seed,
                "overrides": self.overrides, "version": __version__}

    @classmethod
    def load(cls, path=None, overrides=()):
        raw = {}
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise ConfigError("config", f"file not found: {p}")
            try:
                raw = json.loads(p.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError("config", f"invalid JSON: {exc}") from None
            if not isinstance(raw, dict):
                raise ConfigError("config", "top level must be an object")
        cfg = _merge(DEFAULTS, raw)
        applied = []
        for item in overrides:
            if "=" not in item:
                raise ConfigError(item, "override must look like key=value")
            key, val = item.split("=", 1)
            try:
                parsed = json.loads(val)
            except json.JSONDecodeError:
                parsed = val
            _set_path(cfg, key, parsed)
            if key != "output_dir":
                applied.append({"key": key, "value": parsed})
        out = cls(cfg, applied)
        out.validate()
        return out

    def validate(self):
        c = self.raw
        if not isinstance(c["seed"], int) or c["seed"] < 0:
            raise ConfigError("seed", "must be a nonnegative integer")
        ds = c["dataset"]
        if not isinstance(ds, dict):
            raise ConfigError("dataset", "must be an object")
        if "path" not in ds:
            gen = ds.get("generator")
            if gen == "supplementary_2d":
                n = ds.get("n_per_class", 100)
                if not isinstance(n, int) or n < 10:
                    raise ConfigError("dataset.n_per_class", "must be an integer >= 10")
            elif gen == "blobs":
                for key, lo in (("classes", 2), ("dim", 1), ("n_per_class", 1)):
                    v = ds.get(key)
                    if not isinstance(v, int) or v < lo:
                        raise ConfigError(f"dataset.{key}", f"must be an integer >= {lo}")
                sep = ds.get("separation", 4.0)
                if not isinstance(sep, (int, float)) or sep < 0:
                    raise ConfigError("dataset.separation", "must be a nonnegative number")
            else:
                raise ConfigError("dataset.generator",
                                  f"unknown generator {gen!r} (expected supplementary_2d or blobs)")
        arch = c["arch"]
        if not isinstance(arch, list) or not all(isinstance(h, int) and h > 0 for h in arch):
            raise ConfigError("arch", "must be a list of positive integers")
        self.train_config()
        if c["baseline"] not in ("none", "softmax", "single_sigmoid"):
            raise ConfigError("baseline", "must be none, softmax or single_sigmoid")
        _nonempty_numbers(c, "theta_grid")
        _nonempty_numbers(c, "alpha_grid")
        if not isinstance(c["holdout_classes"], int) or c["holdout_classes"] < 1:
            raise ConfigError("holdout_classes", "must be a positive integer")
        if not isinstance(c["min_tail"], int) or c["min_tail"] < 1:
            raise ConfigError("min_tail", "must be a positive integer")
        ks = c["kl_k"]
        if not isinstance(ks, list) or not ks or not all(isinstance(k, int) and k > 0 for k in ks):
            raise ConfigError("kl_k", "must be a nonempty list of positive integers")
        sp = c["split"]
        if sp is not None:
            if not isinstance(sp, dict) or not isinstance(sp.get("n_unknown", 0), int):
                raise ConfigError("split.n_unknown", "must be an integer")
            tf = sp.get("train_fraction", 0.8)
            if not isinstance(tf, (int, float)) or not 0 < tf < 1:
                raise ConfigError("split.train_fraction", "must be in (0, 1)")
        sweep = c["openness_sweep"]
        if sweep is not None and (not isinstance(sweep, list)
                                  or not all(isinstance(m, int) and m >= 0 for m in sweep)):
            raise ConfigError("openness_sweep", "must be a list of unknown-class counts")
        fmts = c["formats"]
        if not isinstance(fmts, list) or not set(fmts) <= {"csv", "osrf"} or not fmts:
            raise ConfigError("formats", "must be a nonempty subset of ['csv', 'osrf']")


# -- helpers -----------------------------------------------------------------

def _sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _write_rows(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return path


def make_dataset(cfg: ExperimentConfig):
    ds = cfg["dataset"]
    if "path" in ds:
        p = Path(ds["path"])
        if not p.exists():
            raise ConfigError("dataset.path", f"file not found: {p}")
        return load_dataset(p, ds.get("label_column", 0))
    seed = int(ds.get("seed", cfg.seed))
    if ds["generator"] == "supplementary_2d":
        return gen_supplementary_2d(seed, int(ds.get("n_per_class", 100)))
    return gen_blobs(seed, int(ds["classes"]), int(ds["dim"]),
                     float(ds.get("separation", 4.0)), int(ds["n_per_class"]))


def make_split(cfg: ExperimentConfig, data):
    """Training data and (optional) split according to the config."""
    sp = cfg["split"]
    if sp is None:
        return data, None
    split = open_split(data, int(sp.get("n_unknown", 0)), float(sp.get("train_fraction", 0.8)),
                       int(sp.get("seed", cfg.seed)))
    return split.train, split


def _model_path(cfg, given, default_name):
    return Path(given) if given else cfg.out_dir / default_name


def _load_json(path, what):
    path = Path(path)
    if not path.exists():
        raise ConfigError(what, f"file not found: {path}")
    return json.loads(path.read_text())


# -- subcommands -------------------------------------------------------------

def cmd_synth(cfg: ExperimentConfig, args):
    data = make_dataset(cfg)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    if "csv" in cfg["formats"]:
        p = save_csv(data, out / "dataset.csv")
        files["dataset.csv"] = _sha256_file(p)
    if "osrf" in cfg["formats"]:
        p = save_osrf(data, out / "dataset.osrf")
        files["dataset.osrf"] = _sha256_file(p)
        files["dataset.osrf.labels.csv"] = _sha256_file(str(p) + ".labels.csv")
    manifest = {
        "parameters": cfg["dataset"],
        "rows": len(data),
        "dim": data.dim,
        "classes": data.classes,
        "checksums": files,
        "checksum": hashlib.sha256(json.dumps(files, sort_keys=True).encode()).hexdigest(),
        **cfg.provenance(),
    }
    _write_json(out / "manifest.json", manifest)
    print(json.dumps({"rows": len(data), "checksum": manifest["checksum"]}))
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args):
    data = make_dataset(cfg)
    train, split = make_split(cfg, data)
    bank = train_bank(train, cfg["arch"], cfg.train_config(), cfg["baseline"])
    out = cfg.out_dir
    model = bank.to_dict()
    model.update({"calibrated": False, "seed": cfg.seed,
                  "train_config": cfg.train_config().to_dict()})
    _write_json(out / "model.json", model)
    rows = [(name, epoch, float(loss))
            for name, hist in bank.histories.items() for epoch, loss in enumerate(hist)]
    _write_rows(out / "losses.csv", ["head", "epoch", "loss"], rows)
    final = {name: float(h[-1]) for name, h in bank.histories.items()}
    report = {"final_losses": final, "max_final_loss": max(final.values()),
              "epochs_run": {k: len(h) - 1 for k, h in bank.histories.items()},
              "n_train": len(train), "classes": bank.class_labels, **cfg.provenance()}
    _write_json(out / "train_report.json", report)
    print(json.dumps({"max_final_loss": report["max_final_loss"]}))
    return EXIT_OK


def cmd_calibrate(cfg: ExperimentConfig, args):
    model = _load_json(_model_path(cfg, args.model, "model.json"), "model")
    bank = OvrModelBank.from_dict(model)
    data = make_dataset(cfg)
    train, _ = make_split(cfg, data)
    result = cross_class_validate(train, cfg["arch"], cfg.train_config(), cfg["theta_grid"],
                                  cfg["alpha_grid"], cfg["holdout_classes"], cfg.seed,
                                  cfg["min_tail"])
    evt = calibrate(bank, train, result.alpha, cfg["min_tail"])
    calibrated = CalibratedModel(bank, evt, result.theta, result.alpha, cfg.seed)
    out = cfg.out_dir
    d = calibrated.to_dict()
    d["heldout_for_validation"] = result.heldout
    _write_json(out / "calibrated.json", d)
    _write_rows(out / "validation_table.csv", ["theta", "alpha", "f_measure"],
                [(r["theta"], r["alpha"], r["f_measure"]) for r in result.rows()])
    report = {"theta": result.theta, "alpha": result.alpha,
              "best_f_measure": float(result.table.max()), "heldout": result.heldout,
              "fallback_classes": [e.cls for e in evt if e.fallback], **cfg.provenance()}
    _write_json(out / "calibrate_report.json", report)
    print(json.dumps({"theta": result.theta, "alpha": result.alpha}))
    return EXIT_OK


def cmd_predict(cfg: ExperimentConfig, args):
    model = CalibratedModel.from_dict(_load_json(_model_path(cfg, args.model, "calibrated.json"),
                                                 "model"))
    try:
        x = [float(v) for v in args.x.split(",")]
    except ValueError:
        raise ConfigError("x", f"not a comma-separated vector: {args.x!r}") from None
    if len(x) != model.bank.input_dim:
        raise ConfigError("x", f"expected {model.bank.input_dim} values, got {len(x)}")
    print(json.dumps(recognize(model, np.array(x)).to_dict(), sort_keys=True))
    return EXIT_OK


def _evaluate(model, test, known):
    pred = model.predict(test.features)
    tally = ConfusionTally.from_predictions(test.labels, pred, known)
    return tally, pred


def cmd_eval(cfg: ExperimentConfig, args):
    model = CalibratedModel.from_dict(_load_json(_model_path(cfg, args.model, "calibrated.json"),
                                                 "model"))
    data = make_dataset(cfg)
    _, split = make_split(cfg, data)
    if split is None:
        raise ConfigError("split", "eval needs a split section to define the test set")
    known = split.known_labels
    if list(model.classes) != list(known):
        raise DataError("model classes do not match the split's known classes")
    test = split.test
    if cfg.get("test_dataset"):
        p = Path(cfg["test_dataset"])
        if not p.exists():
            raise ConfigError("test_dataset", f"file not found: {p}")
        test = load_dataset(p)
        if test.dim != model.bank.input_dim:
            raise DataError(f"test features have dimension {test.dim}, model expects "
                            f"{model.bank.input_dim}")
    tally, pred = _evaluate(model, test, known)
    out = cfg.out_dir
    report = {"openness": split.openness, "f_measure_convention": F_MEASURE_CONVENTION,
              "rejection_rate": tally.n_rejected / max(tally.total, 1),
              "confusion": tally.to_dict(), "theta": model.theta, "alpha": model.alpha,
              **cfg.provenance()}
    status = EXIT_OK
    try:
        report["macro_f"] = open_f_measure(tally)
        report["per_class_f"] = tally.per_class_f1()
    except OSRError as exc:
        report["macro_f"] = None
        report["error"] = str(exc)
        status = EXIT_RUNTIME

    sweep = cfg["openness_sweep"]
    if sweep:
        rows = []
        unknown = split.unknown_labels
        for m in sweep:
            if m > len(unknown):
                raise ConfigError("openness_sweep", f"{m} exceeds {len(unknown)} unknown classes")
            keep = np.isin(test.labels, known + unknown[:m])
            t, _ = _evaluate(model, test.subset(keep, test.classes), known)
            k = len(known)
            op = openness(OpennessSpec(k, k + m, k + m))
            rows.append((m, op, open_f_measure(t)))
        _write_rows(out / "openness_sweep.csv", ["n_unknown", "openness", "macro_f"], rows)
        report["sweep"] = [{"n_unknown": r[0], "openness": r[1], "macro_f": r[2]} for r in rows]
    _write_json(out / "eval_report.json", report)
    print(json.dumps({"macro_f": report["macro_f"], "openness": report["openness"]}))
    return status


def cmd_kl(cfg: ExperimentConfig, args):
    model = _load_json(_model_path(cfg, args.model, "model.json"), "model")
    bank = OvrModelBank.from_dict(model)
    if bank.baseline is None or bank.baseline_kind != "softmax":
        raise ConfigurationError("kl needs a model trained with a softmax baseline")
    data = make_dataset(cfg)
    _, split = make_split(cfg, data)
    if split is None or not split.unknown_labels:
        raise ConfigError("split.n_unknown", "kl needs at least one unknown class")
    known, unknown = split.known_labels, split.unknown_labels
    feats_ovr, feats_soft = {}, {}
    for c in known + unknown:
        X = data.features[data.labels == c]
        feats_ovr[c] = bank.representation(X)
        feats_soft[c] = bank.baseline_representation(X)
    report = kl_comparison_study(feats_ovr, feats_soft, known, unknown, cfg["kl_k"], cfg.seed)
    out = cfg.out_dir
    _write_rows(out / "kl_pairs.csv", ["known", "unknown", "k", "kl_ovr", "kl_softmax"],
                [(r["known"], r["unknown"], r["k"], r["kl_ovr"], r["kl_softmax"])
                 for r in report.rows])
    _write_json(out / "kl_report.json", {"tests": report.tests, **cfg.provenance()})
    print(json.dumps(report.tests))
    return EXIT_OK


def cmd_riskmap(cfg: ExperimentConfig, args):
    model = CalibratedModel.from_dict(_load_json(_model_path(cfg, args.model, "calibrated.json"),
                                                 "model"))
    if model.bank.input_dim > 3:
        raise UnsupportedError(
            f"riskmap supports feature dimension <= 3, model has {model.bank.input_dim}")
    rm = cfg["riskmap"]
    cls = args.cls or rm.get("class") or model.classes[0]
    if cls not in model.classes:
        raise ConfigError("class", f"unknown class {cls!r}")
    j = model.classes.index(cls)
    data = make_dataset(cfg)
    train, _ = make_split(cfg, data)
    pts = train.features[train.labels == cls]
    head, evt = model.bank.heads[j], model.evt[j]
    train_probs = membership_probability(evt, head.predict(pts)[:, 0])
    min_train_prob = float(np.min(train_probs))
    cutoff = rm.get("cutoff")
    cutoff = model.theta if cutoff is None else float(cutoff)
    res = open_space_risk(head, 0, pts, float(rm["delta"]), float(rm["r"]), int(rm["grid_res"]),
                          float(rm["ball_margin"]), cutoff,
                          prob_fn=lambda s: membership_probability(evt, s))
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    res.grid.to_csv(out / f"risk_grid_{cls}.csv")
    g = res.grid
    _write_rows(out / f"probability_map_{cls}.csv",
                [f"x{i}" for i in range(g.coords.shape[1])] + ["probability"],
                [tuple(float(v) for v in c) + (float(p),) for c, p in zip(g.coords, g.probability)])
    summary = {"class": cls, "risk": res.risk, "undefined": res.undefined, "cutoff": cutoff,
               "delta": rm["delta"], "r": rm["r"], "grid_res": rm["grid_res"],
               "ball_center": g.center.tolist(), "ball_radius": g.radius,
               "min_training_probability": min_train_prob,
               "zero_risk_above_cutoff": min_train_prob,
               "raw_score_zero_risk_bound": float(head.predict(pts)[:, 0].min() - float(rm["r"])),
               **cfg.provenance()}
    _write_json(out / f"riskmap_summary_{cls}.json", summary)
    print(json.dumps({"class": cls, "risk": res.risk, "undefined": res.undefined}))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "calibrate": cmd_calibrate, "predict": cmd_predict,
    "eval": cmd_eval, "kl": cmd_kl, "riskmap": cmd_riskmap,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="ovrosr", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config field (dotted key, JSON value)")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("calibrate", "predict", "eval", "kl", "riskmap"):
            p.add_argument("--model", help="model file (defaults inside output_dir)")
        if name == "predict":
            p.add_argument("--x", required=True, help="comma-separated feature vector")
        if name == "riskmap":
            p.add_argument("--class", dest="cls", help="target class label")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    if args.out:
        overrides.append(f"output_dir={json.dumps(args.out)}")
    try:
        cfg = ExperimentConfig.load(args.config, overrides)
        log.info("%s: config %s, output %s", args.command, cfg.checksum[:12], cfg.out_dir)
        return COMMANDS[args.command](cfg, args)
    except (ConfigurationError, DataError, ContractError, UnsupportedError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSRError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
