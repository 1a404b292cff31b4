"""Neural spline density estimator, histogram classifier and their trainer."""

from __future__ import annotations

import base64
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import erf

from . import gradcore as gc
from .spline import SplineDensity, _positive_mass_local, build_density, sign_pieces

log = logging.getLogger(__name__)

HIDDEN = 32
NLL_FLOOR = 1e-12
DEFAULT_EPS = 1e-3
CHECKPOINT_FORMAT = "splineconf-checkpoint/1"


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 5e-3
    weight_decay: float = 1e-4
    batch_size: int = 512
    max_batches: int = 50_000
    patience: int = 125
    val_every: int = 100
    val_batches: int = 10
    clip_norm: float = 5.0
    cosine_horizon: int | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("lr", "batch_size", "max_batches", "patience", "val_every", "val_batches", "clip_norm"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")

    @property
    def horizon(self) -> int:
        return self.cosine_horizon or self.max_batches


# --------------------------------------------------------------------------
# networks


def _uniform(rng, fan_in, shape, bound):
    return rng.uniform(-bound, bound, size=shape)


def _init_encoder(store: gc.ParamStore, rng, input_dim: int) -> None:
    # He-style uniform fan-in scaling
    store.add("enc1.W", _uniform(rng, input_dim, (input_dim, HIDDEN), math.sqrt(6.0 / input_dim)))
    store.add("enc1.b", np.zeros(HIDDEN))
    store.add("enc2.W", _uniform(rng, HIDDEN, (HIDDEN, HIDDEN), math.sqrt(6.0 / HIDDEN)))
    store.add("enc2.b", np.zeros(HIDDEN))


def _encode(store: gc.ParamStore, X) -> gc.Node:
    h = gc.gelu(gc.matvec(X, store["enc1.W"]) + store["enc1.b"])
    return gc.gelu(gc.matvec(h, store["enc2.W"]) + store["enc2.b"])


def _linear(store, name, z):
    return gc.matvec(z, store[name + ".W"]) + store[name + ".b"]


class SplineModel:
    """Encoder plus knot-position and knot-height heads."""

    kind = "spline"

    def __init__(self, input_dim: int, degree: int = 1, K: int = 31, eps: float = DEFAULT_EPS,
                 seed: int = 0, zero: bool = False):
        if degree not in (1, 2):
            raise ConfigError(f"degree must be 1 or 2, got {degree}")
        if K < 2:
            raise ConfigError(f"need at least 2 knots, got K={K}")
        if not 0 <= eps < 1.0 / K:
            raise ConfigError(f"eps={eps} must lie in [0, 1/K)")
        self.input_dim, self.degree, self.K, self.eps, self.seed = input_dim, degree, K, eps, seed
        self.params = gc.ParamStore()
        self.meta: dict = {}
        rng = np.random.default_rng(seed)
        _init_encoder(self.params, rng, input_dim)
        head_bound = 1.0 / math.sqrt(HIDDEN)
        self.params.add("pos.W", _uniform(rng, HIDDEN, (HIDDEN, K - 1), head_bound))
        self.params.add("pos.b", np.zeros(K - 1))
        self.params.add("height.W", _uniform(rng, HIDDEN, (HIDDEN, K), head_bound))
        self.params.add("height.b", np.zeros(K))
        if degree == 2:
            self.params.add("mid.W", _uniform(rng, HIDDEN, (HIDDEN, K - 1), 1e-2))
            self.params.add("mid.b", np.full(K - 1, math.log(2.0)))
        if zero:
            self.params.set_flat(np.zeros(self.params.count()))

    # graph pieces
    def knots(self, X):
        """Positions (B, K), endpoint heights (B, K) and midpoint heights (B, K-1) as nodes."""
        X = X if isinstance(X, gc.Node) else gc.constant(np.atleast_2d(X))
        z = _encode(self.params, X)
        v = gc.softmax(_linear(self.params, "pos", z))
        w = self.eps + (1.0 - self.eps * self.K) * v
        cum = gc.cumulative_sum(w)
        n = X.shape[0]
        t = gc.concat([np.zeros((n, 1)), cum[:, : self.K - 2], np.ones((n, 1))], axis=1)
        h = gc.softplus(_linear(self.params, "height", z))
        mid = _linear(self.params, "mid", z) if self.degree == 2 else None
        return t, h, mid

    def log_density(self, X, y) -> gc.Node:
        """Per-sample log of the floored density, shape (B,)."""
        t, h, mid = self.knots(X)
        y = np.clip(np.asarray(y, dtype=np.float64), 0.0, 1.0)
        K = self.K
        widths = t[:, 1:] - t[:, :-1]
        h0, h1 = h[:, : K - 1], h[:, 1:]
        idx = np.clip((t.value <= y[:, None]).sum(axis=1) - 1, 0, K - 2)[:, None]
        t_l = gc.take(t, idx, axis=1)
        w_l = gc.take(widths, idx, axis=1)
        s = (y[:, None] - t_l) / w_l
        if self.degree == 1:
            Z = gc.sum_(0.5 * widths * (h0 + h1), axis=1)
            a0 = gc.take(h0, idx, axis=1)
            a1 = gc.take(h1, idx, axis=1)
            p = a0 + (a1 - a0) * s
        else:
            A = 2.0 * h0 - 4.0 * mid + 2.0 * h1
            B = -3.0 * h0 + 4.0 * mid - h1
            C = h0
            # Integration bounds at the clipped roots carry no gradient: the
            # integrand vanishes there, or the bound is a fixed segment end.
            bounds, positive = sign_pieces(A.value, B.value, C.value)
            lo, hi = bounds[..., :-1], bounds[..., 1:]
            mask = positive.astype(np.float64)

            def F(s_):
                return A * (s_**3 / 3.0) + B * (s_**2 / 2.0) + C * s_

            seg = gc.constant(0.0)
            for k in range(3):
                seg = seg + (F(hi[..., k]) - F(lo[..., k])) * mask[..., k]
            Z = gc.sum_(widths * seg, axis=1)
            Al, Bl, Cl = (gc.take(q, idx, axis=1) for q in (A, B, C))
            p = gc.max0((Al * s + Bl) * s + Cl)
        f = p[:, 0] / Z
        return gc.log(gc.maximum_const(f, NLL_FLOOR))

    def loss(self, X, y) -> gc.Node:
        return gc.neg(gc.mean(self.log_density(X, y)))

    # inference
    def densities(self, X) -> list[SplineDensity]:
        t, h, mid = self.knots(np.atleast_2d(np.asarray(X, dtype=np.float64)))
        out = []
        for i in range(t.shape[0]):
            pos = t.value[i].copy()
            pos[-1] = 1.0
            m = mid.value[i] if mid is not None else None
            out.append(build_density(pos, h.value[i], self.degree, m, eps=self.eps))
        return out

    def density(self, x) -> SplineDensity:
        return self.densities(np.atleast_2d(x))[0]

    def architecture(self) -> dict:
        return {"kind": self.kind, "input_dim": self.input_dim, "degree": self.degree,
                "K": self.K, "eps": self.eps, "seed": self.seed}


class HistModel:
    """Encoder plus a B-way classifier over evenly spaced target bins."""

    kind = "hist"

    def __init__(self, input_dim: int, bins: int = 21, seed: int = 0, zero: bool = False,
                 lo: float = 0.0, hi: float = 1.0):
        if bins < 2:
            raise ConfigError(f"need at least 2 bins, got {bins}")
        if not hi > lo:
            raise ConfigError("bin range must have hi > lo")
        self.input_dim, self.bins, self.seed = input_dim, bins, seed
        self.edges = np.linspace(lo, hi, bins + 1)
        self.params = gc.ParamStore()
        self.meta: dict = {}
        rng = np.random.default_rng(seed)
        _init_encoder(self.params, rng, input_dim)
        self.params.add("cls.W", _uniform(rng, HIDDEN, (HIDDEN, bins), 1.0 / math.sqrt(HIDDEN)))
        self.params.add("cls.b", np.zeros(bins))
        if zero:
            self.params.set_flat(np.zeros(self.params.count()))

    def logits(self, X) -> gc.Node:
        X = X if isinstance(X, gc.Node) else gc.constant(np.atleast_2d(X))
        return _linear(self.params, "cls", _encode(self.params, X))

    def bin_index(self, y) -> np.ndarray:
        return discretize(y, self.bins, self.edges[0], self.edges[-1])

    def loss(self, X, y) -> gc.Node:
        logp = gc.log_softmax(self.logits(X), axis=1)
        idx = self.bin_index(y)[:, None]
        return gc.neg(gc.mean(gc.take(logp, idx, axis=1)))

    def probabilities(self, X) -> np.ndarray:
        return gc.softmax(self.logits(np.atleast_2d(np.asarray(X, dtype=np.float64))), axis=1).value

    def architecture(self) -> dict:
        return {"kind": self.kind, "input_dim": self.input_dim, "bins": self.bins,
                "edges": self.edges.tolist(), "seed": self.seed}


def batched_losses(model, flats, X, y) -> np.ndarray:
    """Loss values for many flat parameter vectors at once, without a tape.

    ``flats`` has shape (M, P); returns shape (M,).  Used as the numeric
    side of finite-difference checks.
    """
    flats = np.atleast_2d(np.asarray(flats, dtype=np.float64))
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.clip(np.asarray(y, dtype=np.float64), 0.0, 1.0)
    M = flats.shape[0]
    P, i = {}, 0
    for k, node in model.params.params.items():
        n = node.value.size
        P[k] = flats[:, i:i + n].reshape((M,) + node.value.shape)
        i += n

    def gelu(v):
        return 0.5 * v * (1.0 + erf(v / math.sqrt(2.0)))

    def lin(name, z):
        return np.einsum("mbi,mio->mbo", z, P[name + ".W"]) + P[name + ".b"][:, None, :]

    z = gelu(np.einsum("bi,mio->mbo", X, P["enc1.W"]) + P["enc1.b"][:, None, :])
    z = gelu(lin("enc2", z))
    if model.kind == "hist":
        logits = lin("cls", z)
        logits = logits - logits.max(axis=-1, keepdims=True)
        logp = logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))
        idx = model.bin_index(y)
        return -logp[:, np.arange(len(y)), idx].mean(axis=1)
    K = model.K
    raw = lin("pos", z)
    e = np.exp(raw - raw.max(axis=-1, keepdims=True))
    w = model.eps + (1.0 - model.eps * K) * e / e.sum(axis=-1, keepdims=True)
    cum = np.cumsum(w, axis=-1)
    t = np.concatenate([np.zeros(cum.shape[:-1] + (1,)), cum[..., :-1], np.ones(cum.shape[:-1] + (1,))], axis=-1)
    h = np.logaddexp(0.0, lin("height", z))
    widths = np.diff(t, axis=-1)
    h0, h1 = h[..., :-1], h[..., 1:]
    if model.degree == 1:
        A = np.zeros_like(h0)
        B, C = h1 - h0, h0
        seg = 0.5 * (h0 + h1)
    else:
        mid = lin("mid", z)
        A, B, C = 2 * h0 - 4 * mid + 2 * h1, -3 * h0 + 4 * mid - h1, h0
        seg = _positive_mass_local(A, B, C)
    Z = (widths * seg).sum(axis=-1)
    idx = np.clip((t <= y[None, :, None]).sum(axis=-1) - 1, 0, K - 2)[..., None]
    tk = np.take_along_axis(t, idx, -1)[..., 0]
    wk = np.take_along_axis(widths, idx, -1)[..., 0]
    s = (y[None, :] - tk) / wk
    Ak, Bk, Ck = (np.take_along_axis(q, idx, -1)[..., 0] for q in (A, B, C))
    f = np.maximum((Ak * s + Bk) * s + Ck, 0.0) / Z
    return -np.log(np.maximum(f, NLL_FLOOR)).mean(axis=1)


def discretize(y, B: int, lo: float, hi: float) -> np.ndarray:
    """Bin index clamp(floor((y - lo) * B / (hi - lo)), 0, B-1)."""
    if B < 2:
        raise ConfigError("need at least 2 bins")
    if not hi > lo:
        raise ConfigError("degenerate target range (max == min)")
    y = np.asarray(y, dtype=np.float64)
    return np.clip(np.floor((y - lo) * B / (hi - lo)), 0, B - 1).astype(np.int64)


def spline_forward(model: SplineModel, x) -> SplineDensity:
    return model.density(x)


def nll_loss(model, X, y) -> float:
    return float(model.loss(np.atleast_2d(X), np.atleast_1d(y)).value)


def hist_forward(model: HistModel, x) -> np.ndarray:
    return model.probabilities(x)[0]


# --------------------------------------------------------------------------
# optimization


def cosine_lr(step: int, total_steps: int, lr_max: float) -> float:
    if not 0 <= step <= total_steps:
        raise ConfigError("cosine_lr needs 0 <= step <= total_steps")
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float = 5.0) -> dict[str, np.ndarray]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}
    return grads


def adamw_step(params: gc.ParamStore, grads: dict[str, np.ndarray], lr: float, weight_decay: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One decoupled-weight-decay Adam update, in place."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter '{k}'")
    params.step += 1
    c1 = 1.0 - beta1**params.step
    c2 = 1.0 - beta2**params.step
    for k, node in params.params.items():
        g = grads[k]
        p = node.value * (1.0 - lr * weight_decay)
        m = params.m[k] = beta1 * params.m[k] + (1.0 - beta1) * g
        v = params.v[k] = beta2 * params.v[k] + (1.0 - beta2) * g * g
        node.value = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def _batches(n: int, size: int, rng):
    order = rng.permutation(n)
    for i in range(0, n, size):
        yield order[i:i + size]


def evaluate_loss(model, X, y, batch_size: int = 512, max_batches: int | None = None) -> float:
    """Mean loss over the first ``max_batches`` batches (sample-weighted)."""
    n = len(y)
    stop = n if max_batches is None else min(n, max_batches * batch_size)
    total = 0.0
    for i in range(0, stop, batch_size):
        j = min(i + batch_size, stop)
        total += float(model.loss(X[i:j], y[i:j]).value) * (j - i)
    return total / stop


def train(config: TrainConfig, X_train, y_train, X_val, y_val, model):
    """Fit ``model`` in place and return it, restored to its best checkpoint.

    Validation runs at step 0 and then every ``min(val_every, one pass)``
    batches.  Training stops after ``max_batches`` or once ``patience``
    passes go by without a strictly better validation loss.
    """
    X_train, y_train = np.asarray(X_train, float), np.asarray(y_train, float)
    X_val, y_val = np.asarray(X_val, float), np.asarray(y_val, float)
    if len(y_train) == 0 or len(y_val) == 0:
        raise ConfigError("train and validation splits must be nonempty")
    rng = np.random.default_rng(config.seed)
    per_pass = math.ceil(len(y_train) / config.batch_size)
    cadence = max(1, min(config.val_every, per_pass))
    patience_steps = config.patience * per_pass

    def val():
        return evaluate_loss(model, X_val, y_val, config.batch_size, config.val_batches)

    best = val()
    best_step, best_params = 0, model.params.values()
    history = [(0, float("nan"), best, cosine_lr(0, config.horizon, config.lr))]
    step, bad, last_train = 0, 0, float("nan")
    while step < config.max_batches:
        for idx in _batches(len(y_train), config.batch_size, rng):
            lr = cosine_lr(min(step, config.horizon), config.horizon, config.lr)
            try:
                loss = model.loss(X_train[idx], y_train[idx])
                grads = model.params.grads(loss)
                finite = np.isfinite(loss.value) and all(np.all(np.isfinite(g)) for g in grads.values())
            except gc.NumericalError as exc:
                log.debug("step %d: %s", step, exc)
                finite = False
            if finite:
                adamw_step(model.params, clip_gradients(grads, config.clip_norm), lr, config.weight_decay)
                last_train, bad = float(loss.value), 0
            else:
                bad += 1
                if bad >= per_pass:
                    raise TrainingError(f"loss non-finite for a full pass ending at step {step}")
            step += 1
            if step % cadence == 0:
                v = val()
                history.append((step, last_train, v, lr))
                if v < best:
                    best, best_step, best_params = v, step, model.params.values()
                if step - best_step >= patience_steps:
                    break
            if step >= config.max_batches:
                break
        else:
            continue
        break
    final_val = history[-1][2]
    model.params.load(best_params)
    model.meta.update(best_val_loss=best, best_step=best_step, steps=step,
                      final_val_loss=final_val, history=history, config=asdict(config))
    log.info("trained %s: %d steps, best val %.6f at step %d", model.kind, step, best, best_step)
    return model


# --------------------------------------------------------------------------
# checkpoints


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(np.float64)


def save_checkpoint(model, path, scaler: dict | None = None, extra: dict | None = None) -> None:
    meta = {k: v for k, v in model.meta.items() if k != "history"}
    record = {
        "format": CHECKPOINT_FORMAT,
        "architecture": model.architecture(),
        "weights": {k: _encode_array(v) for k, v in model.params.values().items()},
        "meta": meta,
        "scaler": scaler or {},
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(record, indent=1, sort_keys=True))


def load_checkpoint(path):
    record = json.loads(Path(path).read_text())
    if record.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: not a checkpoint file")
    arch = record["architecture"]
    if arch["kind"] == "spline":
        model = SplineModel(arch["input_dim"], arch["degree"], arch["K"], arch["eps"], arch["seed"])
    elif arch["kind"] == "hist":
        edges = arch["edges"]
        model = HistModel(arch["input_dim"], arch["bins"], arch["seed"], lo=edges[0], hi=edges[-1])
        model.edges = np.array(edges)
    else:
        raise ConfigError(f"unknown model kind {arch['kind']!r}")
    model.params.load({k: _decode_array(v) for k, v in record["weights"].items()})
    model.meta = record["meta"]
    return model, record
