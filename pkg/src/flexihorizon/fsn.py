"""Adaptive-horizon forecaster: encoder, horizon classifier (APM) and per-horizon decoder bank.

Parameters live in one flat dict with block prefixes ``encoder/``, ``apm/`` and
``decoder/<f>/``. Losses and gradients are computed by hand on top of :mod:`nnet`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from . import nnet
from .errors import ConfigurationError, InvalidInputError
from .fdk import _huber
from .nnet import MlpSpec, OptimState, log_softmax, mlp_backward, mlp_forward, softmax
from .scoring import HorizonLabel
from .synthdata import Sample
from .trajgeo import DEFAULT_HORIZONS, HorizonSet, ModeSet, points_of

SCALE_FLOOR = 1e-3
REG_LOSSES = ("huber", "laplace")


@dataclass(frozen=True)
class FsnConfig:
    horizons: tuple = DEFAULT_HORIZONS
    history_len: int = 20
    num_modes: int = 6
    latent_dim: int = 64
    encoder_hidden: tuple = (64,)
    apm_hidden: tuple = (64, 64)
    decoder_hidden: tuple = (64, 128)
    reg_loss: str = "huber"
    huber_delta: float = 1.0
    lam: float = 0.5
    epochs: int = 64
    batch_size: int = 32
    lr: float = 5e-4
    weight_decay: float = 1e-4
    seed: int = 0
    freeze_apm_encoder: bool = True

    def __post_init__(self):
        object.__setattr__(self, "horizons", tuple(HorizonSet(self.horizons)))
        for name in ("encoder_hidden", "apm_hidden", "decoder_hidden"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))
        if not self.decoder_hidden:
            raise ConfigurationError("decoder needs at least one hidden layer")
        if self.history_len < 2:
            raise ConfigurationError("history_len must be >= 2")
        if self.num_modes < 1 or self.latent_dim < 1:
            raise ConfigurationError("num_modes and latent_dim must be positive")
        if self.reg_loss not in REG_LOSSES:
            raise ConfigurationError(f"reg_loss must be one of {REG_LOSSES}")
        if self.lam < 0:
            raise ConfigurationError("lambda must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if not self.lr > 0 or self.weight_decay < 0 or not self.huber_delta > 0:
            raise ConfigurationError("lr and huber_delta must be positive, weight_decay non-negative")

    def with_(self, **changes) -> "FsnConfig":
        return dataclasses.replace(self, **changes)

    # network shapes
    @property
    def encoder_spec(self) -> MlpSpec:
        return MlpSpec((2 * (self.history_len - 1), *self.encoder_hidden, self.latent_dim))

    @property
    def apm_spec(self) -> MlpSpec:
        return MlpSpec((self.latent_dim, *self.apm_hidden, len(self.horizons)))

    @property
    def trunk_spec(self) -> MlpSpec:
        return MlpSpec((self.latent_dim, *self.decoder_hidden), final_activation=True)

    def head_spec(self, f: int) -> MlpSpec:
        return MlpSpec((self.decoder_hidden[-1], self.head_width(f)))

    def head_width(self, f: int) -> int:
        return (4 if self.reg_loss == "laplace" else 2) * f + 1


@dataclass
class FsnModel:
    config: FsnConfig
    params: dict
    apm_trained: bool = False

    @property
    def horizons(self) -> HorizonSet:
        return HorizonSet(self.config.horizons)

    def copy(self) -> "FsnModel":
        return FsnModel(self.config, {k: v.copy() for k, v in self.params.items()}, self.apm_trained)


def _block(params: Mapping, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def _prefixed(grads: Mapping, prefix: str) -> dict:
    return {prefix + k: v for k, v in grads.items()}


def _embedding(rng, k, d):
    bound = np.sqrt(6.0 / (k + d))
    return rng.uniform(-bound, bound, size=(k, d))


def init_model(config: FsnConfig = FsnConfig()) -> FsnModel:
    rng = np.random.default_rng(config.seed)
    params = {}
    enc = nnet.init_params(config.encoder_spec, rng)
    params.update(_prefixed(enc, "encoder/"))
    params["encoder/embed"] = _embedding(rng, config.num_modes, config.latent_dim)
    params.update(_prefixed({k: v.copy() for k, v in enc.items()}, "apm/encoder/"))
    params["apm/encoder/embed"] = params["encoder/embed"].copy()
    params.update(_prefixed(nnet.init_params(config.apm_spec, rng), "apm/head/"))
    for f in config.horizons:
        params.update(_prefixed(nnet.init_params(config.trunk_spec, rng), f"decoder/{f}/trunk/"))
        params.update(_prefixed(nnet.init_params(config.head_spec(f), rng), f"decoder/{f}/head/"))
    return FsnModel(config, params)


def decoder_block_names(model: FsnModel, f: int) -> list[str]:
    return sorted(k for k in model.params if k.startswith(f"decoder/{f}/"))


# -- frames -------------------------------------------------------------------------


def normalize_histories(histories: np.ndarray):
    """Translate each ``(T, 2)`` history so its last point is the origin and rotate its
    last displacement onto +x. Returns ``(displacements, origins, rotations)``."""
    h = np.asarray(histories, dtype=np.float64)
    origin = h[:, -1].copy()
    last = h[:, -1] - h[:, -2]
    norm = np.hypot(last[:, 0], last[:, 1])
    moving = norm > 0
    c = np.where(moving, last[:, 0] / np.where(moving, norm, 1), 1.0)
    s = np.where(moving, last[:, 1] / np.where(moving, norm, 1), 0.0)
    rot = np.stack([np.stack([c, s], -1), np.stack([-s, c], -1)], 1)  # world -> local
    local = np.einsum("btj,bij->bti", h - origin[:, None], rot)
    return np.diff(local, axis=1), origin, rot


def to_local(points: np.ndarray, origin: np.ndarray, rot: np.ndarray) -> np.ndarray:
    return np.einsum("b...j,bij->b...i", points - origin.reshape(len(origin), *([1] * (points.ndim - 2)), 2), rot)


def to_world(points: np.ndarray, origin: np.ndarray, rot: np.ndarray) -> np.ndarray:
    shape = (len(origin),) + (1,) * (points.ndim - 2) + (2,)
    return np.einsum("b...i,bij->b...j", points, rot) + origin.reshape(shape)


# -- encoder ------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EncoderLatent:
    """Per-mode latent vectors plus the rigid transform of the history they came from."""

    values: np.ndarray  # (K, D)
    origin: np.ndarray = field(default_factory=lambda: np.zeros(2))
    rotation: np.ndarray = field(default_factory=lambda: np.eye(2))

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or min(v.shape) < 1 or not np.all(np.isfinite(v)):
            raise InvalidInputError(f"latent must be a finite (K, D) array, got shape {v.shape}")


def _encode_batch(params, prefix: str, config: FsnConfig, disp: np.ndarray):
    X = disp.reshape(len(disp), -1)
    h, cache = mlp_forward(config.encoder_spec, _block(params, prefix + "encoder/"), X)
    return h[:, None, :] + params[prefix + "encoder/embed"][None], cache


def _encoder_backward(params, prefix, config, cache, glat):
    gh = glat.sum(axis=1)
    grads, _ = mlp_backward(config.encoder_spec, _block(params, prefix + "encoder/"), cache, gh)
    grads = _prefixed(grads, prefix + "encoder/")
    grads[prefix + "encoder/embed"] = glat.sum(axis=0)
    return grads


def _histories(samples_or_histories, history_len: int) -> np.ndarray:
    hs = [points_of(s.history if isinstance(s, Sample) else s) for s in samples_or_histories]
    for h in hs:
        if len(h) != history_len:
            raise InvalidInputError(f"history has {len(h)} points, model expects {history_len}")
    return np.stack(hs) if hs else np.zeros((0, history_len, 2))


def encode(history, model: FsnModel, branch: str = "decoder") -> EncoderLatent:
    """Latent for one history; ``branch="apm"`` uses the classifier's own encoder copy."""
    prefix = {"decoder": "", "apm": "apm/"}[branch]
    disp, origin, rot = normalize_histories(_histories([history], model.config.history_len))
    lat, _ = _encode_batch(model.params, prefix, model.config, disp)
    return EncoderLatent(lat[0], origin[0], rot[0])


# -- APM ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ApmOutput:
    horizon_probs: np.ndarray
    f_pred: int
    f_soft: float
    horizons: tuple = DEFAULT_HORIZONS


def _apm_logits(params, config, lat):
    pooled = lat.mean(axis=-2)
    logits, cache = mlp_forward(config.apm_spec, _block(params, "apm/head/"), pooled)
    return logits, cache


def _apm_outputs(probs: np.ndarray, horizons) -> tuple[np.ndarray, np.ndarray]:
    hs = np.asarray(horizons, dtype=np.float64)
    return hs[np.argmax(probs, axis=-1)].astype(int), probs @ hs


def apm_from_probs(probs, horizons=DEFAULT_HORIZONS) -> ApmOutput:
    p = np.asarray(probs, dtype=np.float64)
    if p.shape != (len(horizons),):
        raise InvalidInputError("one probability per horizon class required")
    f_pred, f_soft = _apm_outputs(p, horizons)
    return ApmOutput(p, int(f_pred), float(f_soft), tuple(horizons))


def apm_forward(latent: EncoderLatent, model: FsnModel) -> ApmOutput:
    lat = np.asarray(latent.values)
    if lat.shape[1] != model.config.latent_dim:
        raise InvalidInputError(f"latent width {lat.shape[1]} != {model.config.latent_dim}")
    logits, _ = _apm_logits(model.params, model.config, lat[None])
    return apm_from_probs(softmax(logits[0]), model.config.horizons)


def apm_loss(output: ApmOutput, label: HorizonLabel | int) -> tuple[float, float, float]:
    """``(L_cls, L_reg, total)`` with the expected horizon standing in for the argmax."""
    f_gt = label.f_gt if isinstance(label, HorizonLabel) else int(label)
    if f_gt not in output.horizons:
        raise InvalidInputError(f"label horizon {f_gt} not in {output.horizons}")
    one_hot = np.zeros(len(output.horizons))
    one_hot[output.horizons.index(f_gt)] = 1.0
    l_cls = nnet.cross_entropy(output.horizon_probs, one_hot)
    l_reg = nnet.squared_error(np.array(output.f_soft), np.array(float(f_gt)))
    return l_cls, l_reg, l_cls + l_reg


def _apm_batch_loss(params, config, disp, classes, train_encoder: bool):
    hs = np.asarray(config.horizons, dtype=np.float64)
    B = len(classes)
    lat, enc_cache = _encode_batch(params, "apm/", config, disp)
    logits, cache = _apm_logits(params, config, lat)
    p = softmax(logits)
    logp = log_softmax(logits)
    f_soft = p @ hs
    f_gt = hs[classes]
    l_cls = -logp[np.arange(B), classes].mean()
    l_reg = ((f_soft - f_gt) ** 2).mean()
    one_hot = np.eye(len(hs))[classes]
    g = (p - one_hot) / B + (2 * (f_soft - f_gt) / B)[:, None] * p * (hs[None] - f_soft[:, None])
    grads, gpool = mlp_backward(config.apm_spec, _block(params, "apm/head/"), cache, g)
    grads = _prefixed(grads, "apm/head/")
    if train_encoder:
        K = lat.shape[1]
        glat = np.repeat(gpool[:, None, :] / K, K, axis=1)
        grads.update(_encoder_backward(params, "apm/", config, enc_cache, glat))
    correct = int((np.argmax(p, axis=1) == classes).sum())
    return l_cls, l_reg, grads, correct


# -- decoder ------------------------------------------------------------------------


class DecoderPass(NamedTuple):
    traj: np.ndarray  # (N, K, f, 2) local frame
    logits: np.ndarray  # (N, K)
    scales: np.ndarray | None  # (N, K, f, 2)
    feats: np.ndarray  # (N*K, H)
    raw: np.ndarray  # (N, K, width)
    trunk_cache: list
    head_cache: list


def _decode_batch(params, config: FsnConfig, lat: np.ndarray, f: int) -> DecoderPass:
    if f not in config.horizons:
        raise InvalidInputError(f"horizon {f} has no decoder; bank covers {config.horizons}")
    N, K, D = lat.shape
    feats, tc = mlp_forward(config.trunk_spec, _block(params, f"decoder/{f}/trunk/"), lat.reshape(N * K, D))
    out, hc = mlp_forward(config.head_spec(f), _block(params, f"decoder/{f}/head/"), feats)
    raw = out.reshape(N, K, -1)
    # heads emit per-step displacements; positions are their running sum
    traj = np.cumsum(raw[..., : 2 * f].reshape(N, K, f, 2), axis=2)
    scales = None
    if config.reg_loss == "laplace":
        scales = nnet.softplus(raw[..., 2 * f : 4 * f]).reshape(N, K, f, 2) + SCALE_FLOOR
    return DecoderPass(traj, raw[..., -1], scales, feats, raw, tc, hc)


def decode(latent: EncoderLatent, f: int, model: FsnModel, return_scales: bool = False):
    """Run only the sub-network for horizon ``f`` and map its modes to the world frame."""
    lat = np.asarray(latent.values)
    if lat.shape != (model.config.num_modes, model.config.latent_dim):
        raise InvalidInputError(f"latent shape {lat.shape} does not match model")
    out = _decode_batch(model.params, model.config, lat[None], int(f))
    world = to_world(out.traj, latent.origin[None], latent.rotation[None])[0]
    modes = ModeSet(world, softmax(out.logits[0]))
    if return_scales:
        return modes, None if out.scales is None else out.scales[0]
    return modes


# -- distillation and the combined objective ----------------------------------------


def _ranking(scores: np.ndarray) -> tuple[int, np.ndarray]:
    """Batch-best index and the worse half of the batch, by ascending score."""
    B = len(scores)
    order = np.argsort(np.asarray(scores, dtype=np.float64), kind="stable")
    return int(order[0]), order[B - B // 2 :]


def _distill(features: np.ndarray, scores: np.ndarray, teacher_features=None):
    """KL from each worse-half sample to the batch best; gradient only on the students."""
    B = len(features)
    grad = np.zeros_like(features)
    if B < 2:
        return features.dtype.type(0), grad
    teacher, students = _ranking(scores)
    logq = log_softmax(features[teacher] if teacher_features is None else teacher_features)
    logp = log_softmax(features[students])
    p = np.exp(logp)
    kl = (p * (logp - logq[None])).sum(axis=1)
    grad[students] = p * (logp - logq[None] - kl[:, None]) / len(students)
    return kl.mean(), grad


def kl_feature_distill(features, scores) -> float:
    """Mean KL(softmax(V_h) || softmax(V_l)) pairing the worse half of a batch with its best sample."""
    feats = np.asarray(features, dtype=np.float64)
    sc = np.asarray(scores, dtype=np.float64)
    if feats.ndim != 2 or len(sc) != len(feats):
        raise InvalidInputError("need (B, H) features and one score per sample")
    return float(_distill(feats, sc)[0])


@dataclass(frozen=True, eq=False)
class TrainBatch:
    """Samples in the normalized frame with their active horizons and distillation scores."""

    disp: np.ndarray  # (B, T-1, 2)
    targets: np.ndarray  # (B, F, 2) local-frame futures
    horizons: np.ndarray  # (B,)
    scores: np.ndarray  # (B,)
    origin: np.ndarray
    rotation: np.ndarray

    def __len__(self):
        return len(self.horizons)

    def subset(self, idx) -> "TrainBatch":
        return TrainBatch(self.disp[idx], self.targets[idx], self.horizons[idx], self.scores[idx],
                          self.origin[idx], self.rotation[idx])


def make_batch(samples: Sequence[Sample], horizons, scores=None, history_len: int = 20) -> TrainBatch:
    hist = _histories(samples, history_len)
    fut = np.stack([points_of(s.future) for s in samples])
    hz = np.broadcast_to(np.asarray(horizons, dtype=int), (len(samples),)).copy()
    if np.any(hz > fut.shape[1]):
        raise InvalidInputError("active horizon exceeds future length")
    sc = np.zeros(len(samples)) if scores is None else np.asarray(scores, dtype=np.float64)
    disp, origin, rot = normalize_histories(hist)
    return TrainBatch(disp, to_local(fut, origin, rot), hz, sc, origin, rot)


class LossTerms(NamedTuple):
    reg: float
    cls: float
    kl: float
    total: float


def _objective(params, config: FsnConfig, batch: TrainBatch, lam: float, teacher=None, with_grads=True):
    B = len(batch)
    K = config.num_modes
    lat, enc_cache = _encode_batch(params, "", config, batch.disp)
    dtype = lat.dtype
    glat = np.zeros_like(lat)
    reg = cls = dtype.type(0)
    width = config.decoder_hidden[-1]
    pooled = np.zeros((B, width), dtype=dtype)
    passes = []
    for f in sorted(set(batch.horizons.tolist())):
        idx = np.flatnonzero(batch.horizons == f)
        n = len(idx)
        out = _decode_batch(params, config, lat[idx], f)
        gt = batch.targets[idx, :f]
        diff = out.traj - gt[:, None]
        ade = np.sqrt((diff**2).sum(-1)).mean(-1)
        best = np.argmin(ade, axis=1)  # winner-take-all
        rows = np.arange(n)
        res = diff[rows, best]
        draw = np.zeros_like(out.raw)
        if config.reg_loss == "huber":
            reg = reg + _huber(res, config.huber_delta).mean(axis=(1, 2)).sum()
            gres = np.clip(res, -config.huber_delta, config.huber_delta) / (2 * f * B)
        else:
            b = out.scales[rows, best]
            reg = reg + (np.log(2 * b) + np.abs(res) / b).mean(axis=(1, 2)).sum()
            gres = np.sign(res) / b / (2 * f * B)
            gb = (1 / b - np.abs(res) / (b * b)) / (2 * f * B)
            rawb = out.raw[rows, best, 2 * f : 4 * f].reshape(n, f, 2)
            draw[rows, best, 2 * f : 4 * f] = (gb * nnet.sigmoid(rawb)).reshape(n, 2 * f)
        gdisp = np.flip(np.cumsum(np.flip(gres, 1), axis=1), 1)
        draw[rows, best, : 2 * f] = gdisp.reshape(n, 2 * f)
        logp = log_softmax(out.logits)
        cls = cls - logp[rows, best].sum()
        draw[..., -1] = (np.exp(logp) - np.eye(K)[best]) / B
        pooled[idx] = out.feats.reshape(n, K, width).mean(axis=1)
        passes.append((f, idx, out, draw))

    if lam > 0:
        l_kl, gpool = _distill(pooled, batch.scores, teacher)
    else:
        l_kl, gpool = dtype.type(0), np.zeros_like(pooled)
    reg, cls = reg / B, cls / B
    terms = LossTerms(reg, cls, l_kl, reg + cls + lam * l_kl)
    if not with_grads:
        return terms, pooled

    grads = {}
    for f, idx, out, draw in passes:
        n = len(idx)
        hg, gfeat = mlp_backward(config.head_spec(f), _block(params, f"decoder/{f}/head/"), out.head_cache,
                                 draw.reshape(n * K, -1))
        gfeat = gfeat + np.repeat(lam * gpool[idx] / K, K, axis=0)
        tg, glin = mlp_backward(config.trunk_spec, _block(params, f"decoder/{f}/trunk/"), out.trunk_cache, gfeat)
        grads.update(_prefixed(hg, f"decoder/{f}/head/"))
        grads.update(_prefixed(tg, f"decoder/{f}/trunk/"))
        glat[idx] = glin.reshape(n, K, -1)
    grads.update(_encoder_backward(params, "", config, enc_cache, glat))
    return terms, grads


def teacher_features(model: FsnModel, batch: TrainBatch, params: Mapping | None = None) -> np.ndarray:
    """Pooled penultimate features of the batch-best sample, the distillation target."""
    params = model.params if params is None else params
    _, pooled = _objective(params, model.config, batch, 0.0, with_grads=False)
    return pooled[_ranking(batch.scores)[0]].copy()


def nonsmooth_margin(model: FsnModel, batch: TrainBatch, params: Mapping | None = None) -> float:
    """Distance of an instance from the loss's kinks.

    The smallest of: |pre-activation| over every ReLU, the ADE gap between the winning
    mode and the runner-up, and (Laplace head) |residual| of the winning mode. Finite
    differences are only meaningful when this is well above the step size.
    """
    params = model.params if params is None else params
    cfg = model.config
    lat, enc_cache = _encode_batch(params, "", cfg, batch.disp)
    margins = [np.abs(z).min() for _, z, _ in enc_cache[:-1]]
    for f in sorted(set(batch.horizons.tolist())):
        idx = np.flatnonzero(batch.horizons == f)
        out = _decode_batch(params, cfg, lat[idx], f)
        margins += [np.abs(z).min() for _, z, _ in out.trunk_cache]
        diff = out.traj - batch.targets[idx, None, :f]
        ade = np.sort(np.sqrt((diff**2).sum(-1)).mean(-1), axis=1)
        if ade.shape[1] > 1:
            margins.append((ade[:, 1] - ade[:, 0]).min())
        if cfg.reg_loss == "laplace":
            best = np.argmin(np.sqrt((diff**2).sum(-1)).mean(-1), axis=1)
            margins.append(np.abs(diff[np.arange(len(idx)), best]).min())
    return float(min(margins))


def fsn_loss(model: FsnModel, batch: TrainBatch, params: Mapping | None = None, lam: float | None = None,
             teacher: np.ndarray | None = None):
    """``(LossTerms, grads)`` for a batch decoded at each sample's active horizon.

    Gradients cover the encoder and every decoder block; blocks of inactive horizons get
    exact zeros. ``params`` overrides the model's parameters (any float dtype). The
    distillation target is a stopped gradient; pass ``teacher`` (see :func:`teacher_features`)
    to pin it, which makes the loss a function whose derivative is exactly ``grads``.
    """
    params = model.params if params is None else params
    lam = model.config.lam if lam is None else lam
    for f in set(batch.horizons.tolist()):
        if f not in model.config.horizons:
            raise InvalidInputError(f"horizon {f} has no decoder")
        if f > batch.targets.shape[1]:
            raise InvalidInputError(f"horizon {f} exceeds ground-truth length {batch.targets.shape[1]}")
    terms, grads = _objective(params, model.config, batch, lam, teacher)
    for name, value in params.items():
        if not name.startswith("apm/") and name not in grads:
            grads[name] = np.zeros_like(value)
    return terms, grads


# -- training -----------------------------------------------------------------------


@dataclass
class TrainLog:
    columns: tuple
    epochs: list = field(default_factory=list)
    steps: list = field(default_factory=list)

    def to_csv(self, per_step: bool = False) -> str:
        rows = self.steps if per_step else self.epochs
        cols = ("epoch", "step") + self.columns[1:] if per_step else self.columns
        lines = [",".join(cols)]
        for r in rows:
            lines.append(",".join(str(v) if isinstance(v, (int, np.integer)) else f"{v:.10g}" for v in r))
        return "\n".join(lines) + "\n"


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def _label_map(samples: Sequence[Sample], labels) -> list[HorizonLabel]:
    by_id = {l.agent_id: l for l in labels}
    try:
        return [by_id[s.agent_id] for s in samples]
    except KeyError as exc:
        raise InvalidInputError(f"no label for agent {exc.args[0]}") from None


def attach_apm_encoder(model: FsnModel, source: FsnModel) -> FsnModel:
    """Copy ``source``'s encoder into the classifier branch of ``model``."""
    for name, value in source.params.items():
        if name.startswith("encoder/"):
            model.params["apm/" + name] = value.copy()
    return model


def _classes(samples, labels, horizons) -> np.ndarray:
    """Class indices from HorizonLabels (matched by agent id) or from aligned horizon values."""
    labels = list(labels)
    if labels and isinstance(labels[0], HorizonLabel):
        fs = [l.f_gt for l in _label_map(samples, labels)]
    else:
        fs = [int(l) for l in labels]
    if len(fs) != len(samples):
        raise InvalidInputError(f"{len(fs)} labels for {len(samples)} samples")
    hs = HorizonSet(horizons)
    return np.array([hs.index_of(f) for f in fs], dtype=int)


def train_apm(model: FsnModel, samples: Sequence[Sample], labels, val: Sequence[Sample] = (), val_labels=(),
              config: FsnConfig | None = None) -> tuple[FsnModel, TrainLog]:
    """Pre-train the horizon classifier; its encoder copy is frozen unless configured otherwise."""
    cfg = config or model.config
    if not samples:
        raise InvalidInputError("cannot train on an empty dataset")
    model = model.copy()
    classes = _classes(samples, labels, cfg.horizons)
    disp, _, _ = normalize_histories(_histories(samples, cfg.history_len))
    if len(val):
        vclasses = _classes(val, val_labels, cfg.horizons)
        vdisp, _, _ = normalize_histories(_histories(val, cfg.history_len))
    else:
        vclasses, vdisp = classes, disp
    train_enc = not cfg.freeze_apm_encoder
    state = OptimState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    log = TrainLog(("epoch", "L_cls", "L_reg", "total", "accuracy"))
    rng = _rng(cfg.seed, 1)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(classes))
        tot = np.zeros(2)
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            l_cls, l_reg, grads, _ = _apm_batch_loss(model.params, cfg, disp[idx], classes[idx], train_enc)
            nnet.optimizer_step(model.params, grads, state)
            log.steps.append((epoch, state.step, float(l_cls), float(l_reg), float(l_cls + l_reg)))
            tot += np.array([l_cls, l_reg]) * len(idx)
        acc = apm_accuracy(model, vdisp, vclasses)
        tot /= len(order)
        log.epochs.append((epoch, tot[0], tot[1], tot.sum(), acc))
    model.apm_trained = True
    return model, log


def apm_accuracy(model: FsnModel, disp: np.ndarray, classes: np.ndarray) -> float:
    lat, _ = _encode_batch(model.params, "apm/", model.config, disp)
    logits, _ = _apm_logits(model.params, model.config, lat)
    return float(np.mean(np.argmax(logits, axis=1) == classes))


def select_horizons(model: FsnModel, samples: Sequence) -> np.ndarray:
    """APM argmax horizon for each sample (ties resolve to the smallest horizon)."""
    disp, _, _ = normalize_histories(_histories(samples, model.config.history_len))
    lat, _ = _encode_batch(model.params, "apm/", model.config, disp)
    logits, _ = _apm_logits(model.params, model.config, lat)
    return np.asarray(model.config.horizons)[np.argmax(logits, axis=1)]


def fit_decoders(model: FsnModel, samples: Sequence[Sample], horizons, scores=None,
                 config: FsnConfig | None = None) -> tuple[FsnModel, TrainLog]:
    """Mini-batch AdamW on the combined objective, each sample decoded at its given horizon.

    Only blocks touched by a batch are stepped, so idle decoders stay put.
    """
    cfg = config or model.config
    if not samples:
        raise InvalidInputError("cannot train on an empty dataset")
    model = model.copy()
    data = make_batch(samples, horizons, scores, cfg.history_len)
    state = OptimState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    log = TrainLog(("epoch", "L_reg", "L_cls", "L_KL", "total", "accuracy"))
    rng = _rng(cfg.seed, 2)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        tot = np.zeros(4)
        for start in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[start : start + cfg.batch_size])
            batch = data.subset(idx)
            terms, grads = _objective(model.params, cfg, batch, cfg.lam)
            nnet.optimizer_step(model.params, grads, state)
            vals = [float(t) for t in terms]
            log.steps.append((epoch, state.step, *vals))
            tot += np.array(vals) * len(idx)
        tot /= len(order)
        log.epochs.append((epoch, *tot, mode_accuracy(model, data)))
    return model, log


def mode_accuracy(model: FsnModel, data: TrainBatch) -> float:
    """Share of samples whose most probable mode is also the lowest-ADE mode."""
    lat, _ = _encode_batch(model.params, "", model.config, data.disp)
    hits = 0
    for f in sorted(set(data.horizons.tolist())):
        idx = np.flatnonzero(data.horizons == f)
        out = _decode_batch(model.params, model.config, lat[idx], f)
        ade = np.linalg.norm(out.traj - data.targets[idx, None, :f], axis=-1).mean(-1)
        hits += int((np.argmax(out.logits, 1) == np.argmin(ade, 1)).sum())
    return hits / len(data)


def train_fsn(model: FsnModel, samples: Sequence[Sample], labels, config: FsnConfig | None = None):
    """Train encoder and decoder bank with the classifier frozen, teacher-forcing labeled horizons."""
    if not model.apm_trained:
        raise ConfigurationError("FSN training needs a pre-trained horizon classifier")
    ls = _label_map(samples, labels)
    return fit_decoders(model, samples, [l.f_gt for l in ls], [l.q for l in ls], config)


def warm_start(model: FsnModel, baseline: FsnModel) -> FsnModel:
    """Initialize encoder and every decoder from a single-horizon baseline at the longest horizon.

    Each decoder keeps the baseline trunk and the head rows for its first ``f`` steps.
    """
    (F,) = baseline.config.horizons
    cfg = model.config
    if (cfg.latent_dim, cfg.decoder_hidden, cfg.num_modes, cfg.reg_loss) != (
        baseline.config.latent_dim, baseline.config.decoder_hidden, baseline.config.num_modes, baseline.config.reg_loss
    ):
        raise ConfigurationError("baseline architecture does not match")
    model = model.copy()
    for name, value in baseline.params.items():
        if name.startswith("encoder/"):
            model.params[name] = value.copy()
    for f in cfg.horizons:
        if f > F:
            raise ConfigurationError(f"baseline horizon {F} shorter than {f}")
        for name, value in _block(baseline.params, f"decoder/{F}/trunk/").items():
            model.params[f"decoder/{f}/trunk/{name}"] = value.copy()
        cols = list(range(2 * f)) + [-1]
        if cfg.reg_loss == "laplace":
            cols = list(range(2 * f)) + list(range(2 * F, 2 * F + 2 * f)) + [-1]
        model.params[f"decoder/{f}/head/W0"] = baseline.params[f"decoder/{F}/head/W0"][:, cols].copy()
        model.params[f"decoder/{f}/head/b0"] = baseline.params[f"decoder/{F}/head/b0"][cols].copy()
    return model


# -- inference ----------------------------------------------------------------------


def predict(model: FsnModel, samples: Sequence, f) -> tuple[np.ndarray, np.ndarray]:
    """World-frame modes ``(N, K, f, 2)`` and probabilities ``(N, K)`` at one horizon."""
    disp, origin, rot = normalize_histories(_histories(samples, model.config.history_len))
    lat, _ = _encode_batch(model.params, "", model.config, disp)
    out = _decode_batch(model.params, model.config, lat, int(f))
    return to_world(out.traj, origin, rot), softmax(out.logits)


def infer(history, model: FsnModel, override_f: int | None = None) -> tuple[int, ModeSet]:
    """Encode, pick a horizon with the classifier (or ``override_f``), decode at that horizon."""
    if override_f is None and not model.apm_trained:
        raise ConfigurationError("model has no trained horizon classifier")
    if override_f is None:
        f = apm_forward(encode(history, model, branch="apm"), model).f_pred
    else:
        f = int(override_f)
    return f, decode(encode(history, model), f, model)


# -- checkpoints --------------------------------------------------------------------


def model_meta(model: FsnModel) -> dict:
    cfg = dataclasses.asdict(model.config)
    return {"kind": "fsn", "config": cfg, "apm_trained": model.apm_trained}


def save_model(path, model: FsnModel, extra: dict | None = None) -> None:
    meta = model_meta(model)
    if extra:
        meta["extra"] = extra
    nnet.save_checkpoint(path, model.params, meta)


def load_model(path) -> FsnModel:
    try:
        params, meta = nnet.load_checkpoint(path)
    except FileNotFoundError:
        raise ConfigurationError(f"checkpoint not found: {path}") from None
    if meta.get("kind") != "fsn":
        raise ConfigurationError(f"{path} is not a model checkpoint")
    try:
        cfg = FsnConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["config"].items()})
    except TypeError as exc:
        raise ConfigurationError(f"checkpoint config unreadable: {exc}") from None
    expected = init_model(cfg).params
    for name, value in expected.items():
        if name not in params or params[name].shape != value.shape:
            raise ConfigurationError(f"checkpoint block {name} missing or mis-shaped")
    return FsnModel(cfg, params, bool(meta.get("apm_trained")))
