"""LSTM discriminator/generator pair and their adversarial minibatch training.

The discriminator reads a traffic feature matrix row by row (one row per time
step), passes the LSTM outputs through a per-step tanh layer, averages over
time and squashes to a probability. The generator maps a latent sequence of
the same length to a feature matrix in [0, 1].

All forward functions accept a single matrix ``(n, d)`` or a stack
``(batch, n, d)``.
"""
import base64
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .lstm import (
    DivergenceError,
    LstmGrads,
    LstmParams,
    lstm_backward,
    lstm_forward,
)
from .tensor import DTYPE, ShapeError, sigmoid

log = logging.getLogger(__name__)

PROB_EPS = 1e-7
CHECKPOINT_FORMAT = "trafficgan-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDataError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class GanConfig:
    n_steps: int = 12
    feature_dim: int = 11
    hidden_size: int = 16
    latent_dim: int = 16
    dense_size: int = 16
    lr_d: float = 0.05
    lr_g: float = 0.05
    d_steps_per_g_step: int = 1
    minibatch_size: int = 32
    epochs: int = 300
    seed: int = 0
    non_saturating: bool = True
    grad_clip: float = 5.0
    optimizer: str = "sgd"
    momentum: float = 0.9
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999

    def __post_init__(self):
        for name in ("n_steps", "feature_dim", "hidden_size", "latent_dim", "dense_size",
                     "d_steps_per_g_step", "minibatch_size", "epochs"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"gan.{name} must be >= 1")
        for name in ("lr_d", "lr_g", "grad_clip"):
            if not getattr(self, name) > 0:
                raise ValueError(f"gan.{name} must be > 0")
        if self.optimizer not in ("sgd", "momentum", "adam"):
            raise ValueError("gan.optimizer must be sgd, momentum or adam")


# --------------------------------------------------------------------------- networks

@dataclass
class DiscriminatorNet:
    lstm: LstmParams
    dense2_W: np.ndarray
    dense2_b: np.ndarray
    out_W: np.ndarray
    out_b: np.ndarray

    @classmethod
    def init(cls, config, rng):
        H, F, D2 = config.hidden_size, config.feature_dim, config.dense_size
        r2 = 1.0 / np.sqrt(H)
        r3 = 1.0 / np.sqrt(D2)
        return cls(
            lstm=LstmParams.init_uniform(H, F, rng),
            dense2_W=rng.uniform(-r2, r2, size=(D2, H)),
            dense2_b=np.zeros(D2),
            out_W=rng.uniform(-r3, r3, size=(1, D2)),
            out_b=np.zeros(1),
        )


@dataclass
class GeneratorNet:
    lstm: LstmParams
    out_W: np.ndarray
    out_b: np.ndarray

    @classmethod
    def init(cls, config, rng):
        H, F = config.hidden_size, config.feature_dim
        r = 1.0 / np.sqrt(H)
        return cls(
            lstm=LstmParams.init_uniform(H, config.latent_dim, rng),
            out_W=rng.uniform(-r, r, size=(F, H)),
            out_b=np.zeros(F),
        )


def net_arrays(net):
    """Flat name -> array view of a discriminator or generator."""
    out = {f"lstm.{k}": v for k, v in net.lstm.arrays().items()}
    for k, v in vars(net).items():
        if k != "lstm":
            out[k] = v
    return out


def net_from_arrays(cls, arrays):
    lstm = LstmParams(**{k[5:]: np.array(v, dtype=DTYPE) for k, v in arrays.items() if k.startswith("lstm.")})
    rest = {k: np.array(v, dtype=DTYPE) for k, v in arrays.items() if not k.startswith("lstm.")}
    return cls(lstm=lstm, **rest)


def _net_map(net, fn):
    cls = type(net)
    lstm_cls = type(net.lstm)
    lstm = lstm_cls(**{k: fn(f"lstm.{k}", v) for k, v in net.lstm.arrays().items()})
    rest = {k: fn(k, v) for k, v in vars(net).items() if k != "lstm"}
    return cls(lstm=lstm, **rest)


def copy_net(net):
    return _net_map(net, lambda _, v: v.copy())


def zeros_like_net(net):
    return _net_map(net, lambda _, v: np.zeros_like(v))


def clip_net_grads(grads, limit):
    return _net_map(grads, lambda _, v: np.clip(v, -limit, limit))


def sgd_step_net(net, grads, lr, direction="descend"):
    """Plain SGD over every array of a network bundle."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    sign = -1.0 if direction == "descend" else 1.0
    g = net_arrays(grads)
    for k, v in g.items():
        if not np.all(np.isfinite(v)):
            raise DivergenceError(f"non-finite gradient in {k}")
    out = _net_map(net, lambda k, v: v + sign * lr * g[k])
    out.lstm = LstmParams(**out.lstm.arrays())
    return out


class NetOptimizer:
    """Per-network update rule: plain SGD, heavy-ball momentum or Adam."""

    def __init__(self, kind, lr, momentum=0.9, beta1=0.5, beta2=0.999, eps=1e-8, state=None):
        self.kind, self.lr = kind, lr
        self.momentum, self.beta1, self.beta2, self.eps = momentum, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}
        if state:
            self.t = int(state["t"])
            self.m = {k: np.asarray(a, dtype=DTYPE) for k, a in state["m"].items()}
            self.v = {k: np.asarray(a, dtype=DTYPE) for k, a in state["v"].items()}

    def step(self, net, grads):
        if self.kind == "sgd":
            return sgd_step_net(net, grads, self.lr)
        g = net_arrays(grads)
        for k, v in g.items():
            if not np.all(np.isfinite(v)):
                raise DivergenceError(f"non-finite gradient in {k}")
        self.t += 1
        upd = {}
        for k, gk in g.items():
            if self.kind == "momentum":
                vel = self.momentum * self.m.get(k, 0.0) + gk
                self.m[k] = vel
                upd[k] = -self.lr * vel
            else:
                mk = self.beta1 * self.m.get(k, 0.0) + (1 - self.beta1) * gk
                vk = self.beta2 * self.v.get(k, 0.0) + (1 - self.beta2) * gk * gk
                self.m[k], self.v[k] = mk, vk
                mhat = mk / (1 - self.beta1 ** self.t)
                vhat = vk / (1 - self.beta2 ** self.t)
                upd[k] = -self.lr * mhat / (np.sqrt(vhat) + self.eps)
        out = _net_map(net, lambda k, v: v + upd[k])
        out.lstm = LstmParams(**out.lstm.arrays())
        return out

    def state(self):
        return {"t": self.t, "m": self.m, "v": self.v}


def _stack(x, width, what):
    x = np.asarray(x, dtype=DTYPE)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[-1] != width:
        raise ShapeError(f"{what} must be (n, {width}) or (batch, n, {width}); got {x.shape}")
    return x, single


@dataclass
class _DCache:
    lstm_cache: object
    h: np.ndarray
    a: np.ndarray
    pool: np.ndarray
    logit: np.ndarray
    prob: np.ndarray


def discriminator_forward(net, features):
    """Return (probabilities, cache) for a stack of feature matrices (batch, n, F)."""
    x, _ = _stack(features, net.lstm.input_size, "features")
    seq = np.transpose(x, (1, 0, 2))  # (n, B, F)
    h, lc = lstm_forward(net.lstm, seq)
    a = np.tanh(h @ net.dense2_W.T + net.dense2_b)
    pool = a.mean(axis=0)
    logit = pool @ net.out_W[0] + net.out_b[0]
    prob = sigmoid(logit)
    return prob, _DCache(lc, h, a, pool, logit, prob)


def discriminator_backward(net, cache, dlogit):
    """Backprop dE/dlogit (batch,) to parameter grads and dE/dfeatures (batch, n, F)."""
    dlogit = np.asarray(dlogit, dtype=DTYPE)
    n = cache.a.shape[0]
    g_out_W = (dlogit @ cache.pool)[None, :]
    g_out_b = np.array([dlogit.sum()])
    da = np.broadcast_to(dlogit[:, None] * net.out_W[0] / n, cache.a.shape)
    dpre = da * (1.0 - cache.a ** 2)
    g_W2 = np.einsum("tbk,tbh->kh", dpre, cache.h)
    g_b2 = dpre.sum(axis=(0, 1))
    dh = dpre @ net.dense2_W
    lg, dx = lstm_backward(net.lstm, cache.lstm_cache, dh)
    grads = DiscriminatorNet(lstm=lg, dense2_W=g_W2, dense2_b=g_b2, out_W=g_out_W, out_b=g_out_b)
    return grads, np.transpose(dx, (1, 0, 2))


def discriminate(net, features):
    """Probability that each input matrix came from the training data."""
    prob, _ = discriminator_forward(net, features)
    return float(prob[0]) if np.asarray(features).ndim == 2 else prob


@dataclass
class _GCache:
    lstm_cache: object
    h: np.ndarray
    out: np.ndarray


def generator_forward(net, z):
    x, _ = _stack(z, net.lstm.input_size, "latent sequence")
    h, lc = lstm_forward(net.lstm, np.transpose(x, (1, 0, 2)))
    out = sigmoid(h @ net.out_W.T + net.out_b)  # (n, B, F)
    return np.transpose(out, (1, 0, 2)), _GCache(lc, h, out)


def generator_backward(net, cache, dout):
    """Backprop dE/d(output) (batch, n, F) to parameter grads and dE/dz (batch, n, L)."""
    dout = np.transpose(np.asarray(dout, dtype=DTYPE), (1, 0, 2))
    dlogit = dout * cache.out * (1.0 - cache.out)
    g_W = np.einsum("tbf,tbh->fh", dlogit, cache.h)
    g_b = dlogit.sum(axis=(0, 1))
    dh = dlogit @ net.out_W
    lg, dz = lstm_backward(net.lstm, cache.lstm_cache, dh)
    return GeneratorNet(lstm=lg, out_W=g_W, out_b=g_b), np.transpose(dz, (1, 0, 2))


def generate(net, z):
    out, _ = generator_forward(net, z)
    return out[0] if np.asarray(z).ndim == 2 else out


def sample_latent(rng, config, batch=None):
    """Uniform prior on [-1, 1]; shape (n, latent) or (batch, n, latent)."""
    shape = (config.n_steps, config.latent_dim) if batch is None else (batch, config.n_steps, config.latent_dim)
    return rng.uniform(-1.0, 1.0, size=shape)


# --------------------------------------------------------------------------- losses

def _log_clamped(p):
    """log(clip(p, eps, 1-eps)) and its derivative w.r.t. p."""
    p = np.asarray(p, dtype=DTYPE)
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    inside = (p > PROB_EPS) & (p < 1.0 - PROB_EPS)
    return np.log(pc), np.where(inside, 1.0 / pc, 0.0)


def log_one_minus_d(prob):
    """log(1 - D) with clamping; returns (value, dvalue/dlogit)."""
    val, dval_dq = _log_clamped(1.0 - prob)
    return val, -dval_dq * prob * (1.0 - prob)


def log_d(prob):
    val, dval_dp = _log_clamped(prob)
    return val, dval_dp * prob * (1.0 - prob)


def gan_loss_terms(net_d, real, fake):
    """Minibatch-mean (d_loss, g_loss) for the minimax objective.

    d_loss = -[log D(real) + log(1 - D(fake))], g_loss = log(1 - D(fake)).
    """
    p_real = np.atleast_1d(discriminate(net_d, real))
    p_fake = np.atleast_1d(discriminate(net_d, fake))
    lr, _ = log_d(p_real)
    lf, _ = log_one_minus_d(p_fake)
    return float(-(lr.mean() + lf.mean())), float(lf.mean())


def discriminator_grads(net_d, real, fake):
    """d_loss and its gradient with respect to the discriminator parameters."""
    x = np.concatenate([real, fake], axis=0)
    nr, nf = real.shape[0], fake.shape[0]
    prob, cache = discriminator_forward(net_d, x)
    lr, dlr = log_d(prob[:nr])
    lf, dlf = log_one_minus_d(prob[nr:])
    d_loss = -(lr.mean() + lf.mean())
    dlogit = np.concatenate([-dlr / nr, -dlf / nf])
    grads, _ = discriminator_backward(net_d, cache, dlogit)
    return float(d_loss), grads, prob


def generator_grads(net_g, net_d, z, non_saturating=False):
    """g_loss and its gradient w.r.t. generator params, through a frozen discriminator."""
    fake, gcache = generator_forward(net_g, z)
    prob, dcache = discriminator_forward(net_d, fake)
    B = fake.shape[0]
    if non_saturating:
        val, dv = log_d(prob)
        loss, dlogit = -val.mean(), -dv / B
    else:
        val, dv = log_one_minus_d(prob)
        loss, dlogit = val.mean(), dv / B
    _, dfake = discriminator_backward(net_d, dcache, dlogit)
    grads, _ = generator_backward(net_g, gcache, dfake)
    return float(loss), grads


def d_accuracy(net_d, real, fake):
    """Fraction of real scored > 0.5 and fake scored < 0.5, pooled."""
    pr = np.atleast_1d(discriminate(net_d, real))
    pf = np.atleast_1d(discriminate(net_d, fake))
    return float((np.sum(pr > 0.5) + np.sum(pf < 0.5)) / (pr.size + pf.size))


# --------------------------------------------------------------------------- training

@dataclass
class TrainHistory:
    epoch: list = field(default_factory=list)
    d_loss: list = field(default_factory=list)
    g_loss: list = field(default_factory=list)
    d_accuracy: list = field(default_factory=list)

    def append(self, epoch, d_loss, g_loss, acc):
        self.epoch.append(epoch)
        self.d_loss.append(d_loss)
        self.g_loss.append(g_loss)
        self.d_accuracy.append(acc)

    def rows(self):
        return list(zip(self.epoch, self.d_loss, self.g_loss, self.d_accuracy))


@dataclass
class GanModel:
    generator: GeneratorNet
    discriminator: DiscriminatorNet
    config: GanConfig
    epochs_done: int = 0
    rng_state: dict = None
    optimizer_state: dict = None

    @classmethod
    def init(cls, config):
        rng = np.random.default_rng(config.seed)
        d = DiscriminatorNet.init(config, rng)
        g = GeneratorNet.init(config, rng)
        return cls(generator=g, discriminator=d, config=config, rng_state=rng.bit_generator.state)


def train(model, dataset, config=None, holdout=None, epochs=None, progress=None):
    """Simultaneous minibatch SGD on the discriminator and the generator.

    `dataset` is an array (N, n_steps, feature_dim) of normalized matrices.
    `holdout`, if given, is used for the per-epoch discriminator accuracy
    (real vs freshly generated); otherwise a fixed slice of the dataset is.
    Training continues from ``model.epochs_done`` for ``epochs`` more epochs
    (default: up to ``config.epochs`` total). Returns (model, history).
    """
    config = config or model.config
    data = np.asarray(dataset, dtype=DTYPE)
    if data.ndim != 3 or data.shape[0] == 0:
        raise TrainingDataError("no training data")
    if not np.all(np.isfinite(data)):
        raise TrainingDataError("training data contains non-finite values")
    if data.shape[1:] != (config.n_steps, config.feature_dim):
        raise ShapeError(f"training matrices must be {config.n_steps}x{config.feature_dim}, got {data.shape[1:]}")

    rng = np.random.default_rng()
    rng.bit_generator.state = model.rng_state or np.random.default_rng(config.seed).bit_generator.state
    net_g, net_d = copy_net(model.generator), copy_net(model.discriminator)

    eval_real = np.asarray(holdout, dtype=DTYPE) if holdout is not None else data[: min(len(data), 256)]
    eval_z = sample_latent(np.random.default_rng(config.seed + 7919), config, len(eval_real))

    opt_state = model.optimizer_state or {}
    opt_d = NetOptimizer(config.optimizer, config.lr_d, config.momentum, config.adam_beta1,
                         config.adam_beta2, state=opt_state.get("d"))
    opt_g = NetOptimizer(config.optimizer, config.lr_g, config.momentum, config.adam_beta1,
                         config.adam_beta2, state=opt_state.get("g"))

    N, mb = len(data), config.minibatch_size
    start = model.epochs_done
    stop = config.epochs if epochs is None else start + epochs
    history = TrainHistory()
    for epoch in range(start, stop):
        perm = rng.permutation(N)
        d_losses, g_losses = [], []
        for lo in range(0, N, mb):
            real = data[perm[lo: lo + mb]]
            try:
                for _ in range(config.d_steps_per_g_step):
                    fake = generate(net_g, sample_latent(rng, config, len(real)))
                    d_loss, gd, _ = discriminator_grads(net_d, real, fake)
                    net_d = opt_d.step(net_d, clip_net_grads(gd, config.grad_clip))
                z = sample_latent(rng, config, len(real))
                g_loss, gg = generator_grads(net_g, net_d, z, config.non_saturating)
                net_g = opt_g.step(net_g, clip_net_grads(gg, config.grad_clip))
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch + 1}: {exc}") from exc
            if not (np.isfinite(d_loss) and np.isfinite(g_loss)):
                raise DivergenceError(f"non-finite loss at epoch {epoch + 1}")
            d_losses.append(d_loss)
            g_losses.append(g_loss)
        acc = d_accuracy(net_d, eval_real, generate(net_g, eval_z))
        history.append(epoch + 1, float(np.mean(d_losses)), float(np.mean(g_losses)), acc)
        if progress is not None:
            progress(epoch + 1, history)
        log.debug("epoch %d d_loss %.4f g_loss %.4f d_acc %.3f", epoch + 1, d_losses[-1], g_losses[-1], acc)

    trained = GanModel(generator=net_g, discriminator=net_d, config=config,
                       epochs_done=stop, rng_state=rng.bit_generator.state,
                       optimizer_state={"d": opt_d.state(), "g": opt_g.state()})
    return trained, history


# --------------------------------------------------------------------------- checkpoints

def _encode_array(arr, encoding):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    if encoding == "decimal":
        return {"shape": list(arr.shape), "data": [repr(float(v)) for v in arr.ravel()]}
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode_array(obj, encoding):
    shape = tuple(obj["shape"])
    if encoding == "decimal":
        flat = np.array([float(v) for v in obj["data"]], dtype=DTYPE)
    else:
        flat = np.frombuffer(base64.b64decode(obj["data"]), dtype="<f8").astype(DTYPE)
    if flat.size != int(np.prod(shape)):
        raise CheckpointError(f"array data does not match shape {shape}")
    return flat.reshape(shape)


def _encode_optimizer_state(state, encoding):
    if not state:
        return None
    return {net: {"t": st["t"],
                  "m": {k: _encode_array(v, encoding) for k, v in sorted(st["m"].items())},
                  "v": {k: _encode_array(v, encoding) for k, v in sorted(st["v"].items())}}
            for net, st in sorted(state.items())}


def _decode_optimizer_state(obj, encoding):
    if not obj:
        return None
    return {net: {"t": st["t"],
                  "m": {k: _decode_array(v, encoding) for k, v in st["m"].items()},
                  "v": {k: _decode_array(v, encoding) for k, v in st["v"].items()}}
            for net, st in obj.items()}


def save_checkpoint(path, model, scaler=None, encoding="decimal", extra=None):
    """Write the model as one JSON document."""
    if encoding not in ("decimal", "float64le"):
        raise ValueError(f"unknown encoding {encoding!r}")
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "encoding": encoding,
        "config": asdict(model.config),
        "seed": model.config.seed,
        "epochs_done": model.epochs_done,
        "rng_state": model.rng_state,
        "scaler": None if scaler is None else scaler.to_dict(),
        "generator": {k: _encode_array(v, encoding) for k, v in net_arrays(model.generator).items()},
        "discriminator": {k: _encode_array(v, encoding) for k, v in net_arrays(model.discriminator).items()},
        "optimizer_state": _encode_optimizer_state(model.optimizer_state, encoding),
    }
    if extra:
        doc["provenance"] = extra
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Return (GanModel, scaler or None, document)."""
    from .data import Scaler

    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: not a checkpoint document ({exc})") from exc
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    enc = doc["encoding"]
    config = GanConfig(**doc["config"])
    gen = net_from_arrays(GeneratorNet, {k: _decode_array(v, enc) for k, v in doc["generator"].items()})
    disc = net_from_arrays(DiscriminatorNet, {k: _decode_array(v, enc) for k, v in doc["discriminator"].items()})
    rng_state = doc.get("rng_state")
    model = GanModel(generator=gen, discriminator=disc, config=config,
                     epochs_done=int(doc.get("epochs_done", 0)), rng_state=rng_state,
                     optimizer_state=_decode_optimizer_state(doc.get("optimizer_state"), enc))
    scaler = Scaler.from_dict(doc["scaler"]) if doc.get("scaler") else None
    return model, scaler, doc
