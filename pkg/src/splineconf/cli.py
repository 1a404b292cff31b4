"""Command-line pipeline: synth, train, calibrate, evaluate, pipeline.

Every stage writes its resolved configuration (``config.json``) next to its
outputs so it can be rerun from that file alone.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import conformal, data, metrics, model as mdl
from .spline import SplineError

log = logging.getLogger("splineconf")

MODEL_KINDS = ("spice-nd", "spice-hpd", "hist")
SCORE_OF = {"spice-nd": "ND", "spice-hpd": "HPD", "hist": "HIST"}

# exit codes by error category
EXIT_USAGE, EXIT_DATA, EXIT_TRAIN, EXIT_IO = 2, 3, 4, 5

# Learning-rate / capacity grids, one preset per model family.
PRESETS = {
    "spice-n1": {"lr": [5e-2, 1e-2, 5e-3, 1e-3, 5e-4], "knots": [11, 21, 31, 51]},
    "spice-n2": {"lr": [1e-2, 5e-3, 1e-3, 5e-4, 1e-4], "knots": [11, 21, 31, 51]},
    "hist": {"lr": [1e-1, 5e-2, 1e-2, 5e-3, 1e-3], "bins": [11, 21, 31, 51]},
}


@dataclass
class RunConfig:
    command: str = "pipeline"
    data: str | None = None
    target_col: str = "y"
    synth_count: int = 2000
    model: str = "spice-nd"
    degree: int = 1
    knots: int = 31
    bins: int = 21
    alpha: list[float] = field(default_factory=lambda: [0.1])
    lr: float = 5e-3
    seed: int = 0
    bisection_steps: int = conformal.DEFAULT_BISECTION_STEPS
    max_batches: int = 50_000
    patience: int = 125
    split: str = "test"
    checkpoint: str | None = None
    calibration: str | None = None
    out: str = "out"

    def validate(self) -> None:
        if self.model not in MODEL_KINDS:
            raise mdl.ConfigError(f"--model must be one of {MODEL_KINDS}")
        if self.degree not in (1, 2):
            raise mdl.ConfigError("--degree must be 1 or 2")
        if self.knots < 2:
            raise mdl.ConfigError(f"--knots must be >= 2, got {self.knots}")
        if self.bins < 2:
            raise mdl.ConfigError(f"--bins must be >= 2, got {self.bins}")
        for a in self.alpha:
            if not 0 < a < 1:
                raise mdl.ConfigError(f"--alpha must lie in (0, 1), got {a}")
        if self.bisection_steps < 1:
            raise mdl.ConfigError("--bisection-steps must be >= 1")
        if self.split not in data.SPLITS:
            raise mdl.ConfigError(f"--split must be one of {data.SPLITS}")

    def train_config(self) -> mdl.TrainConfig:
        return mdl.TrainConfig(lr=self.lr, max_batches=self.max_batches, patience=self.patience, seed=self.seed)


def _fmt(v) -> str:
    return format(v, ".17g") if isinstance(v, float) else str(v)


def _write_config(cfg: RunConfig, out: Path, **extra) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({**asdict(cfg), **extra}, indent=2, sort_keys=True))


def _load_raw(cfg: RunConfig) -> data.RawDataset:
    if cfg.data is None:
        return data.synthetic_bimodal(cfg.synth_count, cfg.seed)
    return data.load_csv(cfg.data, cfg.target_col)


# --------------------------------------------------------------------------
# stages


def cmd_synth(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    _write_config(cfg, out)
    path = out / "data.csv"
    data.write_csv(data.synthetic_bimodal(cfg.synth_count, cfg.seed), path)
    return path


def cmd_train(cfg: RunConfig) -> Path:
    cfg.validate()
    out = Path(cfg.out)
    _write_config(cfg, out)
    bundle = data.preprocess(_load_raw(cfg), cfg.seed)
    Xt, yt, _ = bundle.part("train")
    Xv, _, _ = bundle.part("val")
    yv, n_clamped = bundle.clamped("val")
    if n_clamped:
        log.info("clamped %d validation targets into [0, 1]", n_clamped)
    d = Xt.shape[1]
    if cfg.model == "hist":
        model = mdl.HistModel(d, cfg.bins, seed=cfg.seed)
    else:
        model = mdl.SplineModel(d, cfg.degree, cfg.knots, seed=cfg.seed)
    try:
        mdl.train(cfg.train_config(), Xt, yt, Xv, yv, model)
    finally:
        history = model.meta.get("history", [])
        with (out / "train_log.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "train_loss", "val_loss", "lr"])
            for row in history:
                w.writerow([_fmt(v) for v in row])
    ckpt = out / "checkpoint.json"
    extra = {"model": cfg.model, "data": cfg.data, "target_col": cfg.target_col,
             "synth_count": cfg.synth_count, "seed": cfg.seed}
    mdl.save_checkpoint(model, ckpt, bundle.scaler(), extra)
    return ckpt


def _bundle_for(record: dict, cfg: RunConfig) -> data.DatasetBundle:
    extra = record["extra"]
    source = RunConfig(data=cfg.data or extra.get("data"), target_col=extra.get("target_col", "y"),
                       synth_count=extra.get("synth_count", 2000), seed=extra.get("seed", 0))
    return data.preprocess(_load_raw(source), source.seed)


def cmd_calibrate(cfg: RunConfig) -> Path:
    cfg.validate()
    if not cfg.checkpoint:
        raise mdl.ConfigError("calibrate needs --checkpoint")
    model, record = mdl.load_checkpoint(cfg.checkpoint)
    kind = SCORE_OF[cfg.model]
    if (kind == "HIST") != (model.kind == "hist"):
        raise conformal.UsageError(f"--model {cfg.model} does not match a {model.kind} checkpoint")
    bundle = _bundle_for(record, cfg)
    Xc, _, _ = bundle.part("cal")
    yc, _ = bundle.clamped("cal")
    scores = conformal.batch_scores(model, kind, Xc, yc)
    out = Path(cfg.out)
    _write_config(cfg, out)
    results = [conformal.calibrate(scores, a, kind).to_dict() for a in cfg.alpha]
    path = out / "calibration.json"
    payload = results[0] if len(results) == 1 else results
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


def _size_histogram(sizes: np.ndarray, bins: int = 20):
    hi = float(sizes.max()) if sizes.size and sizes.max() > 0 else 1.0
    counts, edges = np.histogram(sizes, bins=bins, range=(0.0, hi))
    return counts, edges


def cmd_evaluate(cfg: RunConfig) -> metrics.EvalReport:
    cfg.validate()
    if not (cfg.checkpoint and cfg.calibration):
        raise mdl.ConfigError("evaluate needs --checkpoint and --calibration")
    model, record = mdl.load_checkpoint(cfg.checkpoint)
    cal_raw = json.loads(Path(cfg.calibration).read_text())
    cal_list = cal_raw if isinstance(cal_raw, list) else [cal_raw]
    cal = conformal.CalibrationResult.from_dict(cal_list[0])
    bundle = _bundle_for(record, cfg)
    X, y_scaled, y_raw = bundle.part(cfg.split)
    n_clamped = int(np.sum((y_scaled < 0) | (y_scaled > 1)))
    sets = conformal.predict_sets(model, cal, X, cfg.bisection_steps)
    unscaled = metrics.unscale(sets, bundle.y_min, bundle.y_range)
    _, _, y_train = bundle.part("train")
    _, _, y_cal = bundle.part("cal")
    norm = metrics.normalization_constant(y_train, y_cal, cal.alpha)
    report = metrics.evaluate(unscaled, y_raw, cal.alpha, norm, kind=cal.kind, split=cfg.split,
                              q_hat=cal.q_hat, clamped=n_clamped)
    out = Path(cfg.out)
    _write_config(cfg, out)
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.to_csv())
    rows = bundle.rows(cfg.split)
    with (out / "sets.jsonl").open("w") as fh:
        for rid, s in zip(rows, unscaled):
            fh.write(json.dumps({"id": int(rid), "kind": cal.kind, "alpha": cal.alpha, "q_hat": cal.q_hat,
                                 "intervals": s.as_list(), "size": s.size}) + "\n")
    counts, edges = _size_histogram(np.array([s.size for s in unscaled]))
    with (out / "size_hist.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lo", "hi", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([_fmt(float(lo)), _fmt(float(hi)), int(c)])
    return report


def cmd_pipeline(cfg: RunConfig) -> list[metrics.EvalReport]:
    """synth (if no --data) -> train -> calibrate -> evaluate, per alpha."""
    cfg.validate()
    root = Path(cfg.out)
    base = RunConfig(**asdict(cfg))
    if cfg.data is None:
        base.data = str(cmd_synth(RunConfig(**{**asdict(cfg), "command": "synth", "out": str(root / "synth")})))
    ckpt = cmd_train(RunConfig(**{**asdict(base), "command": "train", "out": str(root / "train")}))
    reports = []
    for a in cfg.alpha:
        tag = f"alpha_{a:g}"
        cal = cmd_calibrate(RunConfig(**{**asdict(base), "command": "calibrate", "alpha": [a],
                                         "checkpoint": str(ckpt), "out": str(root / tag / "calibrate")}))
        reports.append(cmd_evaluate(RunConfig(**{**asdict(base), "command": "evaluate", "alpha": [a],
                                                 "checkpoint": str(ckpt), "calibration": str(cal),
                                                 "out": str(root / tag / "evaluate")})))
    _write_config(cfg, root)
    return reports


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "calibrate": cmd_calibrate,
            "evaluate": cmd_evaluate, "pipeline": cmd_pipeline}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splineconf", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--data", help="CSV file; omitted means synthetic bimodal data")
        s.add_argument("--target-col", default="y")
        s.add_argument("--count", dest="synth_count", type=int, default=2000, help="synthetic sample count")
        s.add_argument("--model", choices=MODEL_KINDS, default="spice-nd")
        s.add_argument("--degree", type=int, default=1)
        s.add_argument("--knots", type=int, default=31)
        s.add_argument("--bins", type=int, default=21)
        s.add_argument("--alpha", type=float, nargs="+", default=[0.1])
        s.add_argument("--lr", type=float, default=5e-3)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--bisection-steps", type=int, default=conformal.DEFAULT_BISECTION_STEPS)
        s.add_argument("--max-batches", type=int, default=50_000)
        s.add_argument("--patience", type=int, default=125)
        s.add_argument("--split", default="test", choices=data.SPLITS)
        s.add_argument("--checkpoint")
        s.add_argument("--calibration")
        s.add_argument("--out", default="out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    fields = {k: v for k, v in vars(args).items() if k != "verbose"}
    cfg = RunConfig(**fields)
    try:
        result = COMMANDS[cfg.command](cfg)
    except (mdl.ConfigError, conformal.UsageError, conformal.CalibrationError, SplineError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except data.DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (mdl.TrainingError, ArithmeticError) as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    if isinstance(result, list):
        for r in result:
            print(r.to_json())
    elif isinstance(result, metrics.EvalReport):
        print(result.to_json())
    else:
        print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
