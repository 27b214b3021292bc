"""Training and evaluation protocols: isolated (IT), intercepted (IR) and the adaptive pipeline (FSN)."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import fsn, scoring
from .errors import InvalidInputError
from .fdk import FdkParams
from .fsn import FsnConfig, FsnModel
from .synthdata import GeneratorConfig, Sample, generate, split
from .trajgeo import DEFAULT_MISS_THRESHOLD, ModeSet, batch_mode_errors

ADAPTIVE = "adaptive"


@dataclass(frozen=True)
class HarnessConfig:
    n_samples: int = 2500
    dataset_seed: int = 0
    split_seed: int = 0
    train_fraction: float = 0.8
    model: FsnConfig = FsnConfig()
    generator: GeneratorConfig = GeneratorConfig()
    fdk: FdkParams = FdkParams()
    score_kernel: str = "frechet"
    miss_threshold: float = DEFAULT_MISS_THRESHOLD
    warm_start: bool = True

    def with_(self, **changes) -> "HarnessConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class MetricRow:
    method: str
    horizon: int | str
    min_fde: float
    min_ade: float
    miss_rate: float


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("FLEXIHORIZON_THREADS", "1")))
    except ValueError:
        return 1


def _futures(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.future.points for s in samples])


def _metrics(pred: np.ndarray, gts: np.ndarray, threshold: float) -> tuple[float, float, float]:
    ade, fde = batch_mode_errors(pred, gts)
    return float(fde.mean()), float(ade.mean()), float(np.mean(fde > threshold))


def evaluate(predictions: Mapping[int, np.ndarray], samples: Sequence[Sample], method: str,
             threshold: float = DEFAULT_MISS_THRESHOLD, horizons=None) -> list[MetricRow]:
    """minFDE/minADE/MR per horizon; ``predictions[f]`` is ``(N, K, f, 2)`` in the world frame."""
    if not samples:
        raise InvalidInputError("cannot evaluate on an empty split")
    hs = sorted(predictions) if horizons is None else list(horizons)
    for f in hs:
        if f not in predictions:
            raise InvalidInputError(f"missing predictions for horizon {f}")
    gts = _futures(samples)

    def row(f):
        pred = np.asarray(predictions[f])
        if pred.shape[0] != len(samples) or pred.shape[2] != f:
            raise InvalidInputError(f"horizon {f} predictions have shape {pred.shape}")
        return MetricRow(method, f, *_metrics(pred, gts[:, :f], threshold))

    with ThreadPoolExecutor(_threads()) as pool:
        return list(pool.map(row, hs))


def evaluate_adaptive(per_sample: Sequence[np.ndarray], samples: Sequence[Sample], method: str,
                      threshold: float = DEFAULT_MISS_THRESHOLD) -> MetricRow:
    """Metrics with each sample judged at its own predicted horizon, averaged over samples."""
    fdes, ades = [], []
    for modes, s in zip(per_sample, samples):
        f = modes.shape[1]
        a, d = batch_mode_errors(modes[None], s.future.points[None, :f])
        ades.append(a[0])
        fdes.append(d[0])
    fdes, ades = np.array(fdes), np.array(ades)
    return MetricRow(method, ADAPTIVE, float(fdes.mean()), float(ades.mean()), float(np.mean(fdes > threshold)))


def _check_split(train, val):
    if not train or not val:
        raise InvalidInputError("train and validation splits must both be non-empty")


def make_splits(config: HarnessConfig):
    data = generate(config.n_samples, config.generator, config.dataset_seed)
    return split(data, config.train_fraction, config.split_seed)


def single_horizon_config(config: FsnConfig, f: int) -> FsnConfig:
    return config.with_(horizons=(f,), lam=0.0)


def run_it(train, val, config: HarnessConfig = HarnessConfig()):
    """One fixed-horizon model per horizon, each evaluated at its own horizon."""
    _check_split(train, val)
    models, rows = {}, []
    for f in config.model.horizons:
        cfg = single_horizon_config(config.model, f)
        model, _ = fsn.fit_decoders(fsn.init_model(cfg), train, f)
        models[f] = model
        rows += evaluate({f: fsn.predict(model, val, f)[0]}, val, "IT", config.miss_threshold)
    return models, rows


def run_ir(train, val, config: HarnessConfig = HarnessConfig()):
    """One model at the longest horizon; shorter horizons read its first ``f`` steps."""
    _check_split(train, val)
    F = max(config.model.horizons)
    model, log = fsn.fit_decoders(fsn.init_model(single_horizon_config(config.model, F)), train, F)
    return model, intercepted_rows(model, val, config.model.horizons, config.miss_threshold), log


def intercepted_rows(model: FsnModel, samples, horizons, threshold=DEFAULT_MISS_THRESHOLD, method="IR"):
    (F,) = model.config.horizons
    full, _ = fsn.predict(model, samples, F)
    return evaluate({f: full[:, :, :f] for f in horizons}, samples, method, threshold)


def collect_predictions(models: Mapping[int, FsnModel], samples) -> list[dict[int, ModeSet]]:
    """Per-sample map horizon -> ModeSet from a bank of fixed-horizon models."""
    per_h = {f: fsn.predict(m, samples, f) for f, m in models.items()}
    return [{f: ModeSet(per_h[f][0][i], per_h[f][1][i]) for f in sorted(models)} for i in range(len(samples))]


def label_samples(models, samples, config: HarnessConfig, kernel: str | None = None):
    preds = collect_predictions(models, samples)
    return scoring.label_dataset(preds, [s.future for s in samples], config.fdk, kernel or config.score_kernel,
                                 config.model.horizons, [s.agent_id for s in samples])


@dataclass
class FsnRun:
    model: FsnModel
    rows: list
    histogram: dict
    train_labels: list
    val_labels: list
    apm_log: fsn.TrainLog
    fsn_log: fsn.TrainLog
    timings: dict = field(default_factory=dict)


def run_fsn(train, val, config: HarnessConfig = HarnessConfig(), it_models=None, ir_model=None,
            kernel: str | None = None, lam: float | None = None) -> FsnRun:
    """Collectors -> labels -> classifier pre-training -> FSN training -> evaluation."""
    _check_split(train, val)
    timings = {}
    t0 = time.perf_counter()
    if it_models is None:
        it_models, _ = run_it(train, val, config)
    if ir_model is None:
        ir_model, _, _ = run_ir(train, val, config)
    timings["baselines"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    train_labels = label_samples(it_models, train, config, kernel)
    val_labels = label_samples(it_models, val, config, kernel)
    timings["labeling"] = time.perf_counter() - t0

    cfg = config.model if lam is None else config.model.with_(lam=lam)
    model = fsn.init_model(cfg)
    if config.warm_start:
        model = fsn.warm_start(model, ir_model)
    model = fsn.attach_apm_encoder(model, ir_model)

    t0 = time.perf_counter()
    model, apm_log = fsn.train_apm(model, train, train_labels, val, val_labels, cfg)
    model, fsn_log = fsn.train_fsn(model, train, train_labels, cfg)
    timings["training"] = time.perf_counter() - t0

    rows, hist = fsn_rows(model, val, config.miss_threshold)
    return FsnRun(model, rows, hist, train_labels, val_labels, apm_log, fsn_log, timings)


def fsn_rows(model: FsnModel, samples, threshold=DEFAULT_MISS_THRESHOLD, method="FSN"):
    """Per-horizon rows with the decoder forced to each horizon, plus the adaptive row and histogram."""
    hs = model.config.horizons
    rows = evaluate({f: fsn.predict(model, samples, f)[0] for f in hs}, samples, method, threshold)
    chosen = fsn.select_horizons(model, samples)
    per_sample = [None] * len(samples)
    for f in hs:
        idx = np.flatnonzero(chosen == f)
        if len(idx):
            pred, _ = fsn.predict(model, [samples[i] for i in idx], f)
            for j, i in enumerate(idx):
                per_sample[i] = pred[j]
    rows.append(evaluate_adaptive(per_sample, samples, method, threshold))
    hist = {int(f): int((chosen == f).sum()) for f in hs}
    return rows, hist


def ablation_scores(train, val, config: HarnessConfig = HarnessConfig(), it_models=None, ir_model=None,
                    kernels=("frechet", "fde", "ade")):
    """Score-kernel x distillation grid; returns ``(rows, runs)`` keyed by (kernel, kl_on)."""
    _check_split(train, val)
    if it_models is None:
        it_models, _ = run_it(train, val, config)
    if ir_model is None:
        ir_model, _, _ = run_ir(train, val, config)
    grid = [(k, True) for k in kernels] + [(kernels[0], False)]
    rows, runs = [], {}
    for kernel, kl_on in grid:
        lam = config.model.lam if kl_on else 0.0
        run = run_fsn(train, val, config, it_models, ir_model, kernel=kernel, lam=lam)
        runs[kernel, kl_on] = run
        adaptive = run.rows[-1]
        rows.append({"score": kernel, "kl": "on" if kl_on else "off", "minFDE": adaptive.min_fde,
                     "minADE": adaptive.min_ade, "MR": adaptive.miss_rate})
    return rows, runs


# -- reports ------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def metrics_csv(rows: Sequence[MetricRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "horizon", "minFDE", "minADE", "MR"])
    for r in rows:
        w.writerow([r.method, r.horizon, _fmt(r.min_fde), _fmt(r.min_ade), _fmt(r.miss_rate)])
    return buf.getvalue()


def read_metrics_csv(text: str) -> list[MetricRow]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        h = rec["horizon"]
        rows.append(MetricRow(rec["method"], h if h == ADAPTIVE else int(h), float(rec["minFDE"]),
                              float(rec["minADE"]), float(rec["MR"])))
    return rows


def ablation_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["score", "kl", "minFDE", "minADE", "MR"])
    for r in rows:
        w.writerow([r["score"], r["kl"], _fmt(r["minFDE"]), _fmt(r["minADE"]), _fmt(r["MR"])])
    return buf.getvalue()


def horizon_curve_csv(rows: Sequence[MetricRow]) -> str:
    """Horizon-vs-metric series per method for external plotting."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "horizon", "metric", "value"])
    for r in rows:
        if r.horizon == ADAPTIVE:
            continue
        for name, v in (("minADE", r.min_ade), ("minFDE", r.min_fde), ("MR", r.miss_rate)):
            w.writerow([r.method, r.horizon, name, _fmt(v)])
    return buf.getvalue()


def write_manifest(path, config: dict, seeds: dict, checkpoints: Mapping[str, str], extra: dict | None = None,
                   wall_clock: float | None = None) -> None:
    """Run manifest; wall-clock is kept out of the hashed artifacts so reruns stay byte-identical."""
    doc = {"config": config, "seeds": seeds, "checkpoints": dict(checkpoints)}
    if extra:
        doc.update(extra)
    if wall_clock is not None:
        doc["wall_clock_seconds"] = round(wall_clock, 3)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
