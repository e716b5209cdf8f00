"""Central finite-difference checks for every hand-derived gradient.

The numerical side only ever calls forward functions, so it stays
independent of the backward code it audits.
"""
from dataclasses import dataclass

import numpy as np

from .data import Geometry, Scaler
from .estimation import LossWeights, total_loss, total_loss_and_grad
from .gan import (
    DiscriminatorNet,
    GanConfig,
    GanModel,
    GeneratorNet,
    discriminate,
    generate,
    generator_grads,
    log_one_minus_d,
    net_arrays,
)
from .lstm import PARAM_NAMES, LstmParams, lstm_backward, lstm_forward

FD_EPS = 1e-5
TOLERANCE = 1e-4
REL_FLOOR = 1e-6


def relative_error(analytic, numeric, floor=REL_FLOOR):
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(f, arr, eps=FD_EPS):
    """dF/d(arr) by central differences, perturbing `arr` in place."""
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + eps
        fp = f()
        flat[k] = old - eps
        fm = f()
        flat[k] = old
        gflat[k] = (fp - fm) / (2 * eps)
    return g


def _randomize(arrays, rng, scale):
    for v in arrays.values():
        v[...] = rng.normal(0.0, scale, size=v.shape)


def check_lstm(hidden, inputs, steps, rng, loss="weighted", perturb=0.0):
    """Max relative error per parameter family (plus 'dx') for one random instance.

    `loss` is "sum" (E = sum of all h_t) or "weighted" (E = sum w_t . h_t).
    `perturb` scales the analytic gradient by (1 + perturb): a detector test hook.
    """
    p = LstmParams.zeros(hidden, inputs)
    _randomize(p.arrays(), rng, 0.5)
    x = rng.normal(size=(steps, inputs))
    w = np.ones((steps, hidden)) if loss == "sum" else rng.normal(size=(steps, hidden))

    def energy():
        return float(np.sum(w * lstm_forward(p, x)[0]))

    _, cache = lstm_forward(p, x)
    grads, dx = lstm_backward(p, cache, w)
    out = {}
    for name in PARAM_NAMES:
        num = numeric_grad(energy, getattr(p, name))
        out[name] = float(np.max(relative_error(getattr(grads, name) * (1 + perturb), num)))
    out["dx"] = float(np.max(relative_error(dx * (1 + perturb), numeric_grad(energy, x))))
    return out


def tiny_model(rng, hidden=2, latent=2, steps=3, features=3, dense=2, scale=0.6):
    cfg = GanConfig(n_steps=steps, feature_dim=features, hidden_size=hidden, latent_dim=latent,
                    dense_size=dense, epochs=1)
    g = GeneratorNet.init(cfg, rng)
    d = DiscriminatorNet.init(cfg, rng)
    _randomize(net_arrays(g), rng, scale)
    _randomize(net_arrays(d), rng, scale)
    return GanModel(generator=g, discriminator=d, config=cfg)


def check_generator_through_discriminator(rng, perturb=0.0, non_saturating=False, batch=2):
    """Relative error of d g_loss / d(generator params) through the frozen discriminator."""
    model = tiny_model(rng)
    cfg = model.config
    z = rng.uniform(-1, 1, size=(batch, cfg.n_steps, cfg.latent_dim))

    def g_loss():
        prob = np.atleast_1d(discriminate(model.discriminator, generate(model.generator, z)))
        if non_saturating:
            return float(-np.mean(np.log(prob)))
        val, _ = log_one_minus_d(prob)
        return float(np.mean(val))

    _, grads = generator_grads(model.generator, model.discriminator, z, non_saturating)
    analytic = net_arrays(grads)
    out = {}
    for name, arr in net_arrays(model.generator).items():
        out[f"G.{name}"] = float(np.max(relative_error(analytic[name] * (1 + perturb), numeric_grad(g_loss, arr))))
    return out


def check_latent_gradient(rng, perturb=0.0, weights=None):
    """Relative error of d total_loss / dz with all three loss terms active."""
    model = tiny_model(rng)
    cfg = model.config
    m = (cfg.feature_dim - 1) // 2
    geometry = Geometry(dt=1.0 / 12.0, cell_lengths=rng.uniform(0.4, 0.8, size=m))
    scaler = Scaler(lo=rng.uniform(0, 5, cfg.feature_dim), hi=rng.uniform(20, 60, cfg.feature_dim))
    weights = weights or LossWeights(lambda_p=0.7, lambda_c=0.05)
    z = rng.uniform(-1, 1, size=(cfg.n_steps, cfg.latent_dim))
    y = rng.uniform(0, 1, size=(cfg.n_steps, cfg.feature_dim))
    mask = (rng.random(size=y.shape) < 0.7).astype(float)

    def f():
        return total_loss(z, model, y, mask, weights, geometry, scaler)

    _, dz, _ = total_loss_and_grad(z[None], model, y[None], mask[None], weights, geometry, scaler)
    return {"dz": float(np.max(relative_error(dz[0] * (1 + perturb), numeric_grad(f, z))))}


@dataclass
class GradcheckReport:
    rows: list  # (component, family, max relative error)
    tolerance: float = TOLERANCE

    @property
    def passed(self):
        return all(err < self.tolerance for _, _, err in self.rows)

    def worst(self):
        return max(self.rows, key=lambda r: r[2])

    def summary(self):
        by_key = {}
        for comp, fam, err in self.rows:
            key = (comp, fam)
            by_key[key] = max(by_key.get(key, 0.0), err)
        return by_key


def run_gradcheck(instances=100, seed=0, composed_instances=20, perturb=0.0,
                  hidden_sizes=(1, 2, 4, 8), input_sizes=(1, 3), step_counts=(1, 2, 5, 10)):
    """LSTM, generator-through-discriminator and latent-gradient checks."""
    rng = np.random.default_rng(seed)
    rows = []
    combos = [(h, i, n) for h in hidden_sizes for i in input_sizes for n in step_counts]
    for k in range(instances):
        h, i, n = combos[k % len(combos)]
        for fam, err in check_lstm(h, i, n, rng, perturb=perturb).items():
            rows.append(("lstm", fam, err))
    for k in range(composed_instances):
        for fam, err in check_generator_through_discriminator(rng, perturb=perturb).items():
            rows.append(("generator", fam, err))
        for fam, err in check_latent_gradient(rng, perturb=perturb).items():
            rows.append(("latent", fam, err))
    return GradcheckReport(rows=rows)
