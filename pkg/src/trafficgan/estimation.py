"""Latent-space reconstruction of partially observed traffic matrices.

A corrupted matrix ``y`` with observation mask ``M`` is explained by the
generator output ``G(z)``; ``z`` is found by gradient descent on

    ||M * (G(z) - y)||_1 + lambda_p * log(1 - D(G(z))) + lambda_c * conservation

and the missing entries are then filled from ``G(z_hat)``.
"""
from dataclasses import dataclass, field

import numpy as np

from .gan import (
    discriminator_backward,
    discriminator_forward,
    generator_backward,
    generator_forward,
    log_one_minus_d,
)
from .tensor import DTYPE, ShapeError


class EstimationDivergence(RuntimeError):
    pass


@dataclass
class LossWeights:
    lambda_p: float = 0.1
    lambda_c: float = 0.01

    def __post_init__(self):
        if self.lambda_p < 0 or self.lambda_c < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class EstimateConfig:
    iterations: int = 500
    step_size: float = 0.05
    restarts: int = 3
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    clip_latent: bool = False

    def __post_init__(self):
        if self.iterations < 1 or self.restarts < 1:
            raise ValueError("iterations and restarts must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")


def _same_shape(*arrays):
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise ShapeError(f"shape mismatch: {sorted(shapes)}")


def contextual_loss(gz, y, mask):
    """Sum of |gz - y| over observed entries (mask == 1)."""
    _same_shape(gz, y, mask)
    return float(np.sum(np.abs(np.asarray(mask) * (np.asarray(gz) - np.asarray(y)))))


def perceptual_loss(net_d, gz):
    prob, _ = discriminator_forward(net_d, gz)
    val, _ = log_one_minus_d(prob)
    return float(val[0])


def _conservation_parts(gz, geometry, scaler):
    """Residuals (batch, n-1, m) in physical units plus d(phys)/d(gz) per column."""
    gz = np.asarray(gz, dtype=DTYPE)
    m = geometry.m
    if gz.shape[-1] != 2 * m + 1:
        raise ShapeError(f"feature width {gz.shape[-1]} does not match {m} cells")
    if scaler is None:
        phys, dphys = gz, np.ones(gz.shape[-1])
    else:
        phys, dphys = scaler.inverse(gz), scaler.scale()
    flow, dens = phys[..., : m + 1], phys[..., m + 1:]
    ratio = geometry.dt / geometry.cell_lengths
    r = dens[..., 1:, :] - dens[..., :-1, :] - ratio * (flow[..., :-1, :-1] - flow[..., :-1, 1:])
    return r, dphys


def conservative_loss(gz, geometry, scaler=None):
    """Mean squared violation of the discrete conservation law.

    `gz` is a normalized feature matrix decoded with `scaler`; pass
    ``scaler=None`` when `gz` already holds physical values.
    """
    r, _ = _conservation_parts(gz, geometry, scaler)
    return float(np.mean(r ** 2))


def _conservative_grad(gz, geometry, scaler):
    """Per-sample mean squared residual and its gradient w.r.t. gz, for a stack (B, n, F)."""
    r, dphys = _conservation_parts(gz, geometry, scaler)
    m = geometry.m
    count = r.shape[-2] * r.shape[-1]
    loss = np.mean(r ** 2, axis=(-2, -1))
    g = 2.0 * r / count
    ratio = geometry.dt / geometry.cell_lengths
    d = np.zeros_like(gz)
    d[..., 1:, m + 1:] += g
    d[..., :-1, m + 1:] -= g
    d[..., :-1, : m] -= ratio * g
    d[..., :-1, 1: m + 1] += ratio * g
    return loss, d * dphys


def total_loss(z, model, y, mask, weights, geometry, scaler=None):
    """Contextual + lambda_p * perceptual + lambda_c * conservative at G(z)."""
    losses, _, _ = total_loss_and_grad(np.asarray(z)[None], model, np.asarray(y)[None],
                                       np.asarray(mask)[None], weights, geometry, scaler)
    return float(losses[0])


def total_loss_and_grad(z, model, y, mask, weights, geometry, scaler=None):
    """Per-sample total loss and its gradient w.r.t. z for stacks (B, n, ·).

    Returns (losses (B,), dz (B, n, latent), gz (B, n, F)).
    """
    gz, gcache = generator_forward(model.generator, z)
    _same_shape(gz, y, mask)
    diff = gz - y
    losses = np.sum(np.abs(mask * diff), axis=(1, 2))
    dgz = mask * np.sign(diff)
    if weights.lambda_p > 0:
        prob, dcache = discriminator_forward(model.discriminator, gz)
        val, dlogit = log_one_minus_d(prob)
        losses = losses + weights.lambda_p * val
        _, dfeat = discriminator_backward(model.discriminator, dcache, weights.lambda_p * dlogit)
        dgz = dgz + dfeat
    if weights.lambda_c > 0:
        cl, dcl = _conservative_grad(gz, geometry, scaler)
        losses = losses + weights.lambda_c * cl
        dgz = dgz + weights.lambda_c * dcl
    _, dz = generator_backward(model.generator, gcache, dgz)
    return losses, dz, gz


@dataclass
class EstimateResult:
    z_hat: np.ndarray
    gz_hat: np.ndarray
    loss_trace: np.ndarray
    restart: int = 0


def estimate_batch(model, ys, masks, config, geometry, scaler=None):
    """Run `estimate` for a stack of records at once (records are independent).

    Returns a list of EstimateResult, one per record.
    """
    ys = np.asarray(ys, dtype=DTYPE)
    masks = np.asarray(masks, dtype=DTYPE)
    _same_shape(ys, masks)
    B = ys.shape[0]
    R, L, n = config.restarts, model.config.latent_dim, model.config.n_steps
    if ys.shape[1:] != (n, model.config.feature_dim):
        raise ShapeError(f"records must be {n}x{model.config.feature_dim}, got {ys.shape[1:]}")
    rng = np.random.default_rng(config.seed)
    z = rng.uniform(-1.0, 1.0, size=(B, R, n, L)).reshape(B * R, n, L)
    y_rep = np.repeat(ys, R, axis=0)
    m_rep = np.repeat(masks, R, axis=0)

    best_loss = np.full(B * R, np.inf)
    best_z = z.copy()
    best_gz = np.zeros_like(y_rep)
    trace = np.empty((config.iterations + 1, B * R))
    for it in range(config.iterations + 1):
        losses, dz, gz = total_loss_and_grad(z, model, y_rep, m_rep, config.weights, geometry, scaler)
        if not np.all(np.isfinite(losses)):
            raise EstimationDivergence(f"non-finite loss at iteration {it}")
        better = losses < best_loss
        best_loss[better] = losses[better]
        best_z[better] = z[better]
        best_gz[better] = gz[better]
        trace[it] = best_loss
        if it < config.iterations:
            z = z - config.step_size * dz
            if config.clip_latent:
                z = np.clip(z, -1.0, 1.0)

    results = []
    final = best_loss.reshape(B, R)
    for b in range(B):
        r = int(np.argmin(final[b]))  # first index wins ties
        k = b * R + r
        results.append(EstimateResult(z_hat=best_z[k], gz_hat=best_gz[k], loss_trace=trace[:, k].copy(), restart=r))
    return results


def estimate(model, y, mask, config, geometry, scaler=None):
    """Best-of-restarts latent fit for one corrupted record."""
    return estimate_batch(model, np.asarray(y)[None], np.asarray(mask)[None], config, geometry, scaler)[0]


def reconstruct(y, mask, gz_hat):
    """Observed entries from y, missing entries from the generator."""
    _same_shape(y, mask, gz_hat)
    mask = np.asarray(mask)
    return np.where(mask == 1.0, np.asarray(y, dtype=DTYPE), np.asarray(gz_hat, dtype=DTYPE))
