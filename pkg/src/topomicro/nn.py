"""Multi-branch dense regressor over persistence images, trained with
hand-written reverse-mode gradients in float64.

Layout: every input channel gets its own branch of feed-forward blocks;
the encodings of the channels that belong to one phase are concatenated
and passed through a phase branch; the phase encodings are concatenated
and sent through a dense head ending in one linear unit.

A feed-forward block is dense -> batch norm -> activation -> dropout.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from .errors import InvalidArgument

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
ACTIVATIONS = ("selu", "gelu", "mish")

_SELU_ALPHA = 1.6732632423543772
_SELU_SCALE = 1.0507009873554805


# ------------------------------------------------------------ activations

def activate(name: str, x: np.ndarray) -> np.ndarray:
    if name == "selu":
        return _SELU_SCALE * np.where(x > 0, x, _SELU_ALPHA * np.expm1(np.minimum(x, 0.0)))
    if name == "gelu":
        return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))
    if name == "mish":
        return x * np.tanh(np.logaddexp(0.0, x))
    raise InvalidArgument(f"unknown activation {name!r}")


def activate_grad(name: str, x: np.ndarray) -> np.ndarray:
    """Derivative of :func:`activate` with respect to its input."""
    if name == "selu":
        return _SELU_SCALE * np.where(x > 0, 1.0, _SELU_ALPHA * np.exp(np.minimum(x, 0.0)))
    if name == "gelu":
        cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return cdf + x * pdf
    if name == "mish":
        sp = np.logaddexp(0.0, x)
        th = np.tanh(sp)
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        return th + x * (1.0 - th * th) * sig
    raise InvalidArgument(f"unknown activation {name!r}")


# ---------------------------------------------------------------- configs

@dataclass
class NindenConfig:
    activation: str = "selu"
    pi_branch_widths: tuple = (256, 128)
    phase_branch_widths: tuple = (256, 128)
    head_widths: tuple = (128, 64, 32)
    encoding_length: int = 64
    dropout_pi: float = 1.2e-3
    dropout_main: float = 1.2e-3
    resolution: int = 32
    # number of phase groups and channels per group (3 x 3 for the full model)
    n_groups: int = 3
    channels_per_group: int = 3

    def __post_init__(self):
        self.activation = self.activation.lower()
        if self.activation not in ACTIVATIONS:
            raise InvalidArgument(f"activation must be one of {ACTIVATIONS}")
        self.pi_branch_widths = tuple(int(w) for w in self.pi_branch_widths)
        self.phase_branch_widths = tuple(int(w) for w in self.phase_branch_widths)
        self.head_widths = tuple(int(w) for w in self.head_widths)
        widths = self.pi_branch_widths + self.phase_branch_widths + self.head_widths
        if any(w < 1 for w in widths) or self.encoding_length < 1:
            raise InvalidArgument("layer widths must be >= 1")
        if len(self.head_widths) != 3:
            raise InvalidArgument("head must have exactly three hidden layers")
        for p in (self.dropout_pi, self.dropout_main):
            if not 0.0 <= p < 1.0:
                raise InvalidArgument("dropout rates must lie in [0, 1)")
        if self.resolution < 1 or self.n_groups < 1 or self.channels_per_group < 1:
            raise InvalidArgument("resolution and group counts must be >= 1")

    @property
    def n_channels(self) -> int:
        return self.n_groups * self.channels_per_group

    @property
    def input_length(self) -> int:
        return self.resolution * self.resolution

    def to_json(self) -> dict:
        d = asdict(self)
        for k in ("pi_branch_widths", "phase_branch_widths", "head_widths"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_json(cls, d: dict) -> "NindenConfig":
        return cls(**d)


@dataclass
class TrainConfig:
    lr0: float = 1.2e-3
    lr_min: float = 0.0
    weight_decay: float = 1.72e-1
    patience: int = 4
    T0: int = 25
    Tmult: int = 2
    batch_size: int = 32
    max_epochs: int = 200
    seed: int = 0

    def __post_init__(self):
        if not self.lr0 > 0:
            raise InvalidArgument("lr0 must be positive")
        if self.patience < 1 or self.T0 < 1 or self.Tmult < 1:
            raise InvalidArgument("patience, T0 and Tmult must be >= 1")
        if self.batch_size < 2 or self.max_epochs < 1:
            raise InvalidArgument("batch_size must be >= 2 and max_epochs >= 1")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# ------------------------------------------------------------- parameters

def layer_plan(cfg: NindenConfig) -> list[tuple[str, int, int, bool]]:
    """(prefix, fan_in, fan_out, is_block) for every dense layer in
    declaration order. ``is_block`` is False only for the output unit."""
    plan = []
    for c in range(cfg.n_channels):
        fan = cfg.input_length
        for i, w in enumerate(cfg.pi_branch_widths + (cfg.encoding_length,)):
            plan.append((f"pi{c}.{i}", fan, w, True))
            fan = w
    for g in range(cfg.n_groups):
        fan = cfg.channels_per_group * cfg.encoding_length
        for i, w in enumerate(cfg.phase_branch_widths + (cfg.encoding_length,)):
            plan.append((f"phase{g}.{i}", fan, w, True))
            fan = w
    fan = cfg.n_groups * cfg.encoding_length
    for i, w in enumerate(cfg.head_widths):
        plan.append((f"head.{i}", fan, w, True))
        fan = w
    plan.append(("out", fan, 1, False))
    return plan


@dataclass
class ModelParams:
    config: NindenConfig
    weights: dict = field(default_factory=dict)  # trainable, declaration order
    buffers: dict = field(default_factory=dict)  # batch-norm running statistics

    def copy(self) -> "ModelParams":
        return ModelParams(self.config,
                           {k: v.copy() for k, v in self.weights.items()},
                           {k: v.copy() for k, v in self.buffers.items()})

    def n_parameters(self) -> int:
        return sum(v.size for v in self.weights.values())


def init(cfg: NindenConfig, seed: int = 0) -> ModelParams:
    """LeCun-normal weights (std 1/sqrt(fan_in)), zero biases, identity
    batch norm."""
    rng = np.random.default_rng(seed)
    weights, buffers = {}, {}
    for prefix, fan_in, fan_out, block in layer_plan(cfg):
        weights[prefix + ".W"] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out))
        weights[prefix + ".b"] = np.zeros(fan_out)
        if block:
            weights[prefix + ".gamma"] = np.ones(fan_out)
            weights[prefix + ".beta"] = np.zeros(fan_out)
            buffers[prefix + ".mean"] = np.zeros(fan_out)
            buffers[prefix + ".var"] = np.ones(fan_out)
    return ModelParams(cfg, weights, buffers)


def is_decayed(name: str) -> bool:
    """Weight decay applies to dense weight matrices only."""
    return name.endswith(".W")


# ---------------------------------------------------------------- forward

def _as_batch(cfg: NindenConfig, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4:
        x = x.reshape(x.shape[0], x.shape[1], -1)
    if x.ndim != 3 or x.shape[1:] != (cfg.n_channels, cfg.input_length):
        raise InvalidArgument(
            f"expected batch of shape (B, {cfg.n_channels}, {cfg.input_length}), got {x.shape}")
    return x


def _block_forward(p: ModelParams, prefix, x, training, drop, rng, tape, new_stats):
    w = p.weights
    z = x @ w[prefix + ".W"] + w[prefix + ".b"]
    if training:
        mu = z.mean(axis=0)
        var = z.var(axis=0)
        n = z.shape[0]
        if new_stats is not None:
            unbiased = var * n / (n - 1) if n > 1 else var
            new_stats[prefix + ".mean"] = (1 - BN_MOMENTUM) * p.buffers[prefix + ".mean"] + BN_MOMENTUM * mu
            new_stats[prefix + ".var"] = (1 - BN_MOMENTUM) * p.buffers[prefix + ".var"] + BN_MOMENTUM * unbiased
    else:
        mu = p.buffers[prefix + ".mean"]
        var = p.buffers[prefix + ".var"]
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (z - mu) * inv_std
    y = w[prefix + ".gamma"] * xhat + w[prefix + ".beta"]
    a = activate(p.config.activation, y)
    mask = None
    if training and drop > 0:
        mask = (rng.random(a.shape) >= drop) / (1.0 - drop)
        a = a * mask
    if tape is not None:
        tape[prefix] = (x, xhat, inv_std, y, mask)
    return a


def _dense_forward(p, prefix, x, tape):
    if tape is not None:
        tape[prefix] = (x,)
    return x @ p.weights[prefix + ".W"] + p.weights[prefix + ".b"]


def _run(p: ModelParams, x, training, rng, tape=None, new_stats=None) -> np.ndarray:
    cfg = p.config
    x = _as_batch(cfg, x)
    if training and rng is None:
        rng = np.random.default_rng(0)
    n_pi = len(cfg.pi_branch_widths) + 1
    n_ph = len(cfg.phase_branch_widths) + 1
    encodings = []
    for c in range(cfg.n_channels):
        h = x[:, c, :]
        for i in range(n_pi):
            h = _block_forward(p, f"pi{c}.{i}", h, training, cfg.dropout_pi, rng, tape, new_stats)
        encodings.append(h)
    phases = []
    for g in range(cfg.n_groups):
        k = cfg.channels_per_group
        h = np.concatenate(encodings[g * k:(g + 1) * k], axis=1)
        for i in range(n_ph):
            h = _block_forward(p, f"phase{g}.{i}", h, training, cfg.dropout_main, rng, tape, new_stats)
        phases.append(h)
    h = np.concatenate(phases, axis=1)
    for i in range(len(cfg.head_widths)):
        h = _block_forward(p, f"head.{i}", h, training, cfg.dropout_main, rng, tape, new_stats)
    return _dense_forward(p, "out", h, tape)[:, 0]


def forward(p: ModelParams, batch, training: bool = False, rng=None) -> np.ndarray:
    """Scalar prediction per sample. ``training`` switches batch norm to
    batch statistics and enables dropout (masks drawn from ``rng``)."""
    return _run(p, batch, training, rng)


def predict(p: ModelParams, features) -> np.ndarray:
    return _run(p, features, False, None)


# --------------------------------------------------------------- backward

def _block_backward(p: ModelParams, prefix, grad_out, tape, grads):
    x, xhat, inv_std, y, mask = tape[prefix]
    w = p.weights
    if mask is not None:
        grad_out = grad_out * mask
    dy = grad_out * activate_grad(p.config.activation, y)
    grads[prefix + ".gamma"] = (dy * xhat).sum(axis=0)
    grads[prefix + ".beta"] = dy.sum(axis=0)
    dxhat = dy * w[prefix + ".gamma"]
    n = dxhat.shape[0]
    dz = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    grads[prefix + ".W"] = x.T @ dz
    grads[prefix + ".b"] = dz.sum(axis=0)
    return dz @ w[prefix + ".W"].T


def loss_and_gradients(p: ModelParams, batch, targets, rng=None, update_stats: bool = False):
    """Training-mode MSE and its exact gradient for every trainable array.

    Dropout masks come from ``rng``; passing identically seeded generators
    reproduces the same masks. With ``update_stats`` the batch-norm running
    statistics in ``p.buffers`` are updated in place.
    """
    cfg = p.config
    y = np.asarray(targets, dtype=np.float64).ravel()
    tape: dict = {}
    new_stats = {} if update_stats else None
    pred = _run(p, batch, True, rng, tape, new_stats)
    if len(y) != len(pred):
        raise InvalidArgument("targets and batch differ in length")
    res = pred - y
    mse = float(np.mean(res * res))
    grads: dict = {}

    g = (2.0 / len(y)) * res[:, None]
    (h,) = tape["out"]
    grads["out.W"] = h.T @ g
    grads["out.b"] = g.sum(axis=0)
    g = g @ p.weights["out.W"].T
    for i in reversed(range(len(cfg.head_widths))):
        g = _block_backward(p, f"head.{i}", g, tape, grads)

    n_ph = len(cfg.phase_branch_widths) + 1
    n_pi = len(cfg.pi_branch_widths) + 1
    e = cfg.encoding_length
    k = cfg.channels_per_group
    for grp in range(cfg.n_groups):
        gg = g[:, grp * e:(grp + 1) * e]
        for i in reversed(range(n_ph)):
            gg = _block_backward(p, f"phase{grp}.{i}", gg, tape, grads)
        for j in range(k):
            c = grp * k + j
            gc = gg[:, j * e:(j + 1) * e]
            for i in reversed(range(n_pi)):
                gc = _block_backward(p, f"pi{c}.{i}", gc, tape, grads)

    if new_stats:
        p.buffers.update(new_stats)
    return mse, {name: grads[name] for name in p.weights}


# -------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, p: ModelParams) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in p.weights.items()},
                   {k: np.zeros_like(a) for k, a in p.weights.items()})


def adamw_step(p: ModelParams, state: AdamState, grads: dict, lr: float,
               weight_decay: float) -> None:
    """Decoupled-decay Adam update, in place."""
    b1, b2 = ADAM_BETAS
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, theta in p.weights.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise InvalidArgument(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        if weight_decay and is_decayed(name):
            update = update + weight_decay * theta
        theta -= lr * update


def cosine_lr(t: float, cycle_len: float, lr0: float, lr_min: float = 0.0) -> float:
    if not 0 <= t <= cycle_len:
        raise InvalidArgument("epoch-in-cycle must lie in [0, cycle_len]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / cycle_len))


def sgdr_position(epoch: int, T0: int, Tmult: int) -> tuple[int, int]:
    """(epoch within cycle, cycle length) for a 0-based epoch counter."""
    t, T = epoch, T0
    while t >= T:
        t -= T
        T *= Tmult
    return t, T


def sgdr_lr(epoch: int, tcfg: TrainConfig) -> float:
    t, T = sgdr_position(epoch, tcfg.T0, tcfg.Tmult)
    return cosine_lr(t, T, tcfg.lr0, tcfg.lr_min)


# --------------------------------------------------------------- training

@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = 0  # 1-based; 0 before any epoch has run

    @property
    def stop_epoch(self) -> int:
        return len(self.val_loss)

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch - 1]

    def to_json(self) -> dict:
        return asdict(self)


class EarlyStopping:
    """Tracks the best validation loss; ``update`` returns True once the
    loss has failed to improve for ``patience`` consecutive epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.epoch = 0

    def update(self, val_loss: float) -> bool:
        self.epoch += 1
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = self.epoch
            return False
        return self.epoch - self.best_epoch >= self.patience

    @property
    def improved(self) -> bool:
        return self.best_epoch == self.epoch


def _mse(p, x, y) -> float:
    r = predict(p, x) - y
    return float(np.mean(r * r))


def train(cfg: NindenConfig, tcfg: TrainConfig, dataset, split, params: ModelParams | None = None):
    """Mini-batch AdamW with cosine warm restarts and early stopping.

    ``dataset`` is ``(features, targets)`` with targets already transformed;
    ``split`` supplies ``train`` and ``val`` index arrays. Returns the
    parameters of the best validation epoch and the history.
    """
    features, targets = dataset
    x = _as_batch(cfg, features)
    y = np.asarray(targets, dtype=np.float64).ravel()
    tr = np.asarray(split.train, dtype=np.int64)
    va = np.asarray(split.val, dtype=np.int64)
    if len(tr) < 2 or len(va) < 1:
        raise InvalidArgument("training split needs >= 2 samples and validation >= 1")
    if not np.all(np.isfinite(y[tr])) or not np.all(np.isfinite(y[va])):
        raise InvalidArgument("targets of the split must be finite")

    rng = np.random.default_rng(tcfg.seed)
    p = params.copy() if params is not None else init(cfg, int(rng.integers(2**31)))
    state = AdamState.zeros_like(p)
    hist = TrainHistory()
    stopper = EarlyStopping(tcfg.patience)
    best = p.copy()
    n_batches = max(1, math.ceil(len(tr) / tcfg.batch_size))
    for epoch in range(tcfg.max_epochs):
        lr = sgdr_lr(epoch, tcfg)
        order = rng.permutation(tr)
        losses = []
        for idx in np.array_split(order, n_batches):
            if len(idx) < 2:
                continue
            loss, grads = loss_and_gradients(p, x[idx], y[idx], rng, update_stats=True)
            adamw_step(p, state, grads, lr, tcfg.weight_decay)
            losses.append(loss * len(idx))
        hist.train_loss.append(float(sum(losses) / len(tr)))
        hist.lr.append(lr)
        val = _mse(p, x[va], y[va])
        if not math.isfinite(val):
            raise FloatingPointError("validation loss is not finite")
        hist.val_loss.append(val)
        stop = stopper.update(val)
        if stopper.improved:
            best = p.copy()
            hist.best_epoch = stopper.best_epoch
        if stop:
            break
    return best, hist


# ------------------------------------------------------------- checkpoint

def save_checkpoint(directory, p: ModelParams, extra: dict | None = None) -> None:
    """``manifest.json`` plus ``params.f64``: trainable arrays then buffers,
    each flattened in declaration order, little-endian float64."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = list(p.weights) + list(p.buffers)
    arrays = [*p.weights.values(), *p.buffers.values()]
    manifest = {
        "config": p.config.to_json(),
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)],
        "n_weights": len(p.weights),
    }
    manifest.update(extra or {})
    flat = np.concatenate([a.ravel() for a in arrays]).astype("<f8")
    (d / "params.f64").write_bytes(flat.tobytes())
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(directory) -> tuple[ModelParams, dict]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    flat = np.frombuffer((d / "params.f64").read_bytes(), dtype="<f8")
    cfg = NindenConfig.from_json(manifest["config"])
    sizes = [int(np.prod(e["shape"])) for e in manifest["arrays"]]
    if sum(sizes) != len(flat):
        raise InvalidArgument("parameter file length does not match manifest")
    weights, buffers = {}, {}
    pos = 0
    for i, entry in enumerate(manifest["arrays"]):
        size = int(np.prod(entry["shape"]))
        arr = flat[pos:pos + size].reshape(entry["shape"]).astype(np.float64)
        pos += size
        (weights if i < manifest["n_weights"] else buffers)[entry["name"]] = arr
    return ModelParams(cfg, weights, buffers), manifest
