"""Command-line entry point: generate, label, train, eval, frechet, ablate.

Exit codes: 0 success, 2 usage or validation error, 3 missing or incompatible artifact.
Data goes to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fsn, harness, scoring, synthdata
from .errors import ConfigurationError, FlexiHorizonError, InvalidInputError, ParseError
from .fdk import FdkParams, fdk_distance
from .fsn import FsnConfig
from .harness import HarnessConfig
from .synthdata import GeneratorConfig
from .trajgeo import DEFAULT_HORIZONS, HorizonSet, ModeSet, discrete_frechet

EXIT_OK, EXIT_USAGE, EXIT_ARTIFACT = 0, 2, 3


class UsageError(FlexiHorizonError):
    pass


class ArtifactError(FlexiHorizonError):
    pass


# -- configuration ------------------------------------------------------------------


def _ints(text: str) -> tuple:
    return tuple(int(x) for x in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> parser
SCHEMA = {
    "dataset": {"n": int, "seed": int, "train_fraction": float, "noise": float, "history_len": int,
                "future_len": int, "dt": float},
    "scoring": {"horizons": _ints, "kernel": str, "beta": float, "gamma": float, "delta": float,
                "epsilon": float},
    "model": {"num_modes": int, "latent_dim": int, "encoder_hidden": _ints, "apm_hidden": _ints,
              "decoder_hidden": _ints, "reg_loss": str, "huber_delta": float, "lambda": float,
              "freeze_apm_encoder": _bool, "warm_start": _bool},
    "optim": {"lr": float, "weight_decay": float, "epochs": int, "batch_size": int},
    "eval": {"miss_threshold": float},
}


@dataclass
class RunConfig:
    """Flat effective configuration; every key has a section in :data:`SCHEMA`."""

    values: dict = field(default_factory=dict)

    def get(self, section: str, key: str, default=None):
        return self.values.get(section, {}).get(key, default)

    def set(self, section: str, key: str, value) -> None:
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise UsageError(f"unknown config key {section}.{key}")
        self.values.setdefault(section, {})[key] = value

    def to_dict(self) -> dict:
        return {s: dict(sorted(v.items())) for s, v in sorted(self.values.items())}


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise UsageError(f"config syntax error: {exc}") from None
    cfg = RunConfig()
    for section in parser.sections():
        if section not in SCHEMA:
            raise UsageError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise UsageError(f"unknown config key {section}.{key}")
            try:
                cfg.set(section, key, SCHEMA[section][key](raw))
            except ValueError as exc:
                raise UsageError(f"bad value for {section}.{key}: {exc}") from None
    return cfg


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    return parse_config(p.read_text())


def sub_seeds(seed: int) -> dict[str, int]:
    """Named child seeds so every random stream derives from one ``--seed``."""
    names = ("dataset", "split", "init")
    return {n: int(np.random.SeedSequence([seed, i]).generate_state(1)[0]) for i, n in enumerate(names)}


def build_configs(cfg: RunConfig, seed: int) -> HarnessConfig:
    seeds = sub_seeds(seed)
    g = lambda s, k, d: cfg.get(s, k, d)  # noqa: E731
    try:
        generator = GeneratorConfig(history_len=g("dataset", "history_len", 20), future_len=g("dataset", "future_len", 30),
                                    dt=g("dataset", "dt", 0.1), noise=g("dataset", "noise", 0.05))
        model = FsnConfig(
            horizons=g("scoring", "horizons", DEFAULT_HORIZONS), history_len=generator.history_len,
            num_modes=g("model", "num_modes", 6), latent_dim=g("model", "latent_dim", 64),
            encoder_hidden=g("model", "encoder_hidden", (64,)), apm_hidden=g("model", "apm_hidden", (64, 64)),
            decoder_hidden=g("model", "decoder_hidden", (64, 128)), reg_loss=g("model", "reg_loss", "huber"),
            huber_delta=g("model", "huber_delta", 1.0), lam=g("model", "lambda", 0.5),
            epochs=g("optim", "epochs", 64), batch_size=g("optim", "batch_size", 32), lr=g("optim", "lr", 5e-4),
            weight_decay=g("optim", "weight_decay", 1e-4), seed=seeds["init"],
            freeze_apm_encoder=g("model", "freeze_apm_encoder", True),
        )
        fdk = FdkParams(g("scoring", "beta", 100.0), g("scoring", "gamma", 1.0), g("scoring", "delta", 0.1),
                        g("scoring", "epsilon", 0.0))
        kernel = g("scoring", "kernel", "frechet")
        if kernel not in scoring.SCORE_KERNELS:
            raise UsageError(f"unknown score kernel {kernel!r}")
        return HarnessConfig(n_samples=g("dataset", "n", 2500), dataset_seed=g("dataset", "seed", seeds["dataset"]),
                             split_seed=seeds["split"], train_fraction=g("dataset", "train_fraction", 0.8),
                             model=model, generator=generator, fdk=fdk, score_kernel=kernel,
                             miss_threshold=g("eval", "miss_threshold", 2.0), warm_start=g("model", "warm_start", True))
    except (InvalidInputError, ConfigurationError) as exc:
        raise UsageError(str(exc)) from None


def _apply_flags(cfg: RunConfig, args) -> RunConfig:
    for flag, (section, key) in {"epochs": ("optim", "epochs"), "horizons": ("scoring", "horizons"),
                                 "kernel": ("scoring", "kernel"), "lam": ("model", "lambda"),
                                 "n": ("dataset", "n")}.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg.set(section, key, _ints(value) if flag == "horizons" else value)
    return cfg


def _setup(args) -> tuple[RunConfig, HarnessConfig]:
    cfg = _apply_flags(load_config(getattr(args, "config", None)), args)
    return cfg, build_configs(cfg, args.seed)


# -- helpers ------------------------------------------------------------------------


def _out_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc}") from None
    return p


def _write(path, text: str) -> None:
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc}") from None


def _read_data(path):
    if not Path(path).is_file():
        raise ArtifactError(f"dataset not found: {path}")
    return synthdata.read_jsonl(path)


def _split(hc: HarnessConfig, data):
    train, val, perm = synthdata.split(data, hc.train_fraction, hc.split_seed)
    if not train or not val:
        raise UsageError("dataset too small to split into train and validation")
    return train, val, perm


def _load(path) -> fsn.FsnModel:
    try:
        return fsn.load_model(path)
    except (ConfigurationError, ParseError) as exc:
        raise ArtifactError(str(exc)) from None


def _info(msg: str) -> None:
    print(msg, file=sys.stderr)


def _write_logs(out: Path, name: str, log: fsn.TrainLog) -> None:
    _write(out / f"{name}_log.csv", log.to_csv())
    _write(out / f"{name}_steps.csv", log.to_csv(per_step=True))


# -- commands -----------------------------------------------------------------------


def cmd_generate(args) -> int:
    if args.n < 0:
        raise UsageError("--n must be non-negative")
    _, hc = _setup(args)
    samples = synthdata.generate(args.n, hc.generator, hc.dataset_seed)
    try:
        synthdata.write_jsonl(samples, args.out)
    except OSError as exc:
        raise UsageError(f"cannot write {args.out}: {exc}") from None
    kinds = {k: sum(s.kind == k for s in samples) for k in synthdata.KINDS}
    print(json.dumps({"samples": len(samples), "kinds": kinds, "path": str(args.out)}, sort_keys=True))
    return EXIT_OK


def _collector_models(directory, horizons):
    models = {}
    for f in horizons:
        path = Path(directory) / f"it_{f}.ckpt"
        if not path.is_file():
            raise ArtifactError(f"missing baseline checkpoint for horizon {f}: {path}")
        models[f] = _load(path)
        if tuple(models[f].config.horizons) != (f,):
            raise ArtifactError(f"{path} is not a horizon-{f} baseline")
    return models


def cmd_label(args) -> int:
    _, hc = _setup(args)
    data = _read_data(args.data)
    hs = hc.model.horizons
    if args.oracle:
        preds = scoring.oracle_predictions([s.future for s in data], hs, hc.model.num_modes, args.noise, args.seed)
        labels = scoring.label_dataset(preds, [s.future for s in data], hc.fdk, hc.score_kernel, hs,
                                       [s.agent_id for s in data])
    else:
        if args.checkpoints is None:
            raise UsageError("label needs --checkpoints DIR or --oracle")
        labels = harness.label_samples(_collector_models(args.checkpoints, hs), data, hc)
    try:
        scoring.write_labels(labels, args.out)
    except OSError as exc:
        raise UsageError(f"cannot write {args.out}: {exc}") from None
    dist = scoring.class_distribution(labels, hs)
    _info("class distribution: " + json.dumps(dist))
    print(json.dumps({"labels": len(labels), "classes": sum(v > 0 for v in dist.values())}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, hc = _setup(args)
    t0 = time.perf_counter()
    data = _read_data(args.data)
    train, val, perm = _split(hc, data)
    out = _out_dir(args.out)
    ckpts, rows, extra = {}, [], {}
    if args.protocol == "it":
        models, rows = harness.run_it(train, val, hc)
        for f, m in models.items():
            ckpts[f"it_{f}"] = str(out / f"it_{f}.ckpt")
            fsn.save_model(ckpts[f"it_{f}"], m)
    elif args.protocol == "ir":
        model, rows, log = harness.run_ir(train, val, hc)
        ckpts["ir"] = str(out / "ir.ckpt")
        fsn.save_model(ckpts["ir"], model)
        _write_logs(out, "ir", log)
    elif args.protocol == "apm":
        if args.labels is None:
            raise UsageError("--protocol apm needs --labels")
        labels = _read_labels(args.labels)
        model = fsn.init_model(hc.model)
        if args.baseline:
            model = fsn.attach_apm_encoder(model, _load(args.baseline))
        model, log = fsn.train_apm(model, train, labels, val, labels)
        ckpts["apm"] = str(out / "apm.ckpt")
        fsn.save_model(ckpts["apm"], model)
        _write_logs(out, "apm", log)
    else:
        run, base_rows = _full_pipeline(train, val, hc, out, ckpts)
        rows = base_rows + run.rows
        extra["horizon_histogram"] = run.histogram
    _write(out / "metrics.csv", harness.metrics_csv(rows))
    harness.write_manifest(out / "manifest.json", {"effective": cfg.to_dict(), "harness": hc.to_dict()},
                           {"seed": args.seed, **sub_seeds(args.seed)},
                           {k: Path(v).name for k, v in ckpts.items()},  # relative to the manifest
                           {"protocol": args.protocol, "split_permutation": perm, **extra},
                           wall_clock=time.perf_counter() - t0 if args.timing else None)
    sys.stdout.write(harness.metrics_csv(rows))
    return EXIT_OK


def _read_labels(path):
    if not Path(path).is_file():
        raise ArtifactError(f"labels not found: {path}")
    return scoring.read_labels(path)


def _full_pipeline(train, val, hc, out: Path, ckpts: dict):
    it_models, it_rows = harness.run_it(train, val, hc)
    ir_model, ir_rows, ir_log = harness.run_ir(train, val, hc)
    run = harness.run_fsn(train, val, hc, it_models, ir_model)
    for f, m in it_models.items():
        ckpts[f"it_{f}"] = str(out / f"it_{f}.ckpt")
        fsn.save_model(ckpts[f"it_{f}"], m)
    ckpts["ir"] = str(out / "ir.ckpt")
    fsn.save_model(ckpts["ir"], ir_model)
    ckpts["fsn"] = str(out / "fsn.ckpt")
    fsn.save_model(ckpts["fsn"], run.model)
    scoring.write_labels(run.train_labels + run.val_labels, out / "labels.jsonl")
    _write_logs(out, "ir", ir_log)
    _write_logs(out, "apm", run.apm_log)
    _write_logs(out, "fsn", run.fsn_log)
    _write(out / "horizon_histogram.json", json.dumps(run.histogram, sort_keys=True) + "\n")
    return run, it_rows + ir_rows


def cmd_eval(args) -> int:
    _, hc = _setup(args)
    data = _read_data(args.data)
    samples = _split(hc, data)[1] if args.split == "val" else data
    hs = hc.model.horizons
    if args.oracle:
        rows = harness.evaluate({f: np.stack([s.future.points[None, :f] for s in samples]) for f in hs},
                                samples, "oracle", hc.miss_threshold)
    else:
        if args.checkpoint is None:
            raise UsageError("eval needs --checkpoint or --oracle")
        model = _load(args.checkpoint)
        _check_compatible(model, samples, hs)
        if len(model.config.horizons) == 1:
            rows = harness.intercepted_rows(model, samples, [f for f in hs if f <= model.config.horizons[0]],
                                            hc.miss_threshold, args.method or "IR")
        else:
            if not model.apm_trained:
                raise ArtifactError("checkpoint has no trained horizon classifier")
            rows, hist = harness.fsn_rows(model, samples, hc.miss_threshold, args.method or "FSN")
            _info("horizon histogram: " + json.dumps(hist))
    text = harness.metrics_csv(rows)
    if args.out:
        _write(args.out, text)
    if args.plot_data:
        _write(args.plot_data, harness.horizon_curve_csv(rows))
    sys.stdout.write(text)
    return EXIT_OK


def _check_compatible(model, samples, horizons) -> None:
    T = model.config.history_len
    if any(len(s.history) != T for s in samples):
        raise ArtifactError(f"checkpoint expects {T}-step histories")
    longest = max(model.config.horizons)
    if any(len(s.future) < longest for s in samples):
        raise ArtifactError(f"dataset futures shorter than checkpoint horizon {longest}")
    if len(model.config.horizons) > 1 and tuple(model.config.horizons) != tuple(horizons):
        raise ArtifactError(f"checkpoint horizons {model.config.horizons} differ from configured {tuple(horizons)}")


def _read_trajectory(path) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"trajectory file not found: {path}")
    text = p.read_text().strip()
    try:
        if text.startswith("["):
            pts = np.array(json.loads(text), dtype=float)
        else:
            pts = np.array([[float(v) for v in line.replace(",", " ").split()]
                            for line in text.splitlines() if line.strip() and not line.startswith("#")])
    except (ValueError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot parse trajectory {path}: {exc}") from None
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) == 0:
        raise UsageError(f"{path} must hold one or more x,y points")
    return pts


def cmd_frechet(args) -> int:
    a, b = _read_trajectory(args.a), _read_trajectory(args.b)
    try:
        params = FdkParams(args.beta, args.gamma, args.delta, args.epsilon)
    except InvalidInputError as exc:
        raise UsageError(str(exc)) from None
    exact = discrete_frechet(a, b)
    smooth = fdk_distance(a, b, params)
    print(f"exact\t{exact:.12g}")
    print(f"fdk\t{smooth:.12g}")
    print(f"params\tbeta={params.beta:g} gamma={params.gamma:g} delta={params.delta:g} epsilon={params.epsilon:g}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg, hc = _setup(args)
    t0 = time.perf_counter()
    train, val, perm = _split(hc, _read_data(args.data))
    out = _out_dir(args.out)
    rows, runs = harness.ablation_scores(train, val, hc)
    for (kernel, kl_on), run in runs.items():
        _write_logs(out, f"fsn_{kernel}_kl{'on' if kl_on else 'off'}", run.fsn_log)
    text = harness.ablation_csv(rows)
    _write(out / "ablation.csv", text)
    harness.write_manifest(out / "manifest.json", {"effective": cfg.to_dict(), "harness": hc.to_dict()},
                           {"seed": args.seed, **sub_seeds(args.seed)}, {},
                           {"protocol": "ablate", "split_permutation": perm},
                           wall_clock=time.perf_counter() - t0 if args.timing else None)
    sys.stdout.write(text)
    return EXIT_OK


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flexihorizon", description="Adaptive-horizon trajectory forecasting experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="INI config file; flags override it")
        sp.add_argument("--seed", type=int, default=0)
        if data:
            sp.add_argument("--data", required=True, help="JSONL dataset (.gz accepted)")

    g = sub.add_parser("generate", help="write a synthetic dataset")
    common(g, data=False)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    lb = sub.add_parser("label", help="compute optimal-horizon labels")
    common(lb)
    lb.add_argument("--out", required=True)
    lb.add_argument("--checkpoints", help="directory holding it_<f>.ckpt baselines")
    lb.add_argument("--oracle", action="store_true", help="use noise-corrupted ground truth as the predictor")
    lb.add_argument("--noise", type=float, default=0.05)
    lb.add_argument("--kernel", choices=scoring.SCORE_KERNELS)
    lb.add_argument("--horizons")
    lb.set_defaults(func=cmd_label)

    t = sub.add_parser("train", help="run a training protocol")
    common(t)
    t.add_argument("--protocol", required=True, choices=("it", "ir", "fsn", "apm"))
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--epochs", type=int)
    t.add_argument("--horizons")
    t.add_argument("--lam", type=float)
    t.add_argument("--labels", help="label file (apm protocol)")
    t.add_argument("--baseline", help="checkpoint whose encoder the classifier reuses (apm protocol)")
    t.add_argument("--timing", action="store_true", help="record wall-clock in the manifest")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--oracle", action="store_true", help="score ground truth against itself")
    e.add_argument("--split", choices=("val", "all"), default="val")
    e.add_argument("--out")
    e.add_argument("--plot-data", dest="plot_data")
    e.add_argument("--method")
    e.add_argument("--horizons")
    e.set_defaults(func=cmd_eval)

    fr = sub.add_parser("frechet", help="exact and smoothed Fréchet distance of two trajectories")
    fr.add_argument("a")
    fr.add_argument("b")
    fr.add_argument("--beta", type=float, default=100.0)
    fr.add_argument("--gamma", type=float, default=1.0)
    fr.add_argument("--delta", type=float, default=0.1)
    fr.add_argument("--epsilon", type=float, default=0.0)
    fr.set_defaults(func=cmd_frechet)

    ab = sub.add_parser("ablate", help="score-kernel x distillation ablation")
    common(ab)
    ab.add_argument("--out", required=True)
    ab.add_argument("--epochs", type=int)
    ab.add_argument("--timing", action="store_true")
    ab.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ArtifactError as exc:
        _info(f"error: {exc}")
        return EXIT_ARTIFACT
    except (UsageError, ParseError, InvalidInputError, ConfigurationError) as exc:
        _info(f"error: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
