"""Reference interaction-aware trajectory predictor.

A shared feed-forward encoder maps each vehicle history to an embedding;
present-neighbor embeddings are mean-pooled, concatenated with the target
embedding, and decoded into a per-step bivariate Gaussian over future
positions. Forward and reverse passes are written by hand against the flat
parameter vector, so loss gradients come out as plain vectors for the
continual trainer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyBatch, ShapeMismatch
from .nn import GradientVector, Layout, ParameterVector, init_params

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class BivariateGaussianStep:
    """Per-step distribution parameters (meters, correlation in (-1, 1))."""

    mu_x: float
    mu_y: float
    sigma_x: float
    sigma_y: float
    rho: float


@dataclass
class PredictionDistribution:
    """One bivariate Gaussian per future frame."""

    steps: list

    def __len__(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and output-map settings for the reference predictor."""

    t_h_frames: int = 20
    t_f_frames: int = 40
    n_neighbors: int = 5
    enc_hidden: int = 32
    enc_dim: int = 32
    dec_hidden: int = 64
    coord_scale: float = 0.1       # input coordinates are multiplied by this
    normalize: bool = True         # shift inputs to the last observed target position
    sigma_min: float = 1e-3
    sigma_max: float = 1e3
    sigma_init: float = 4.0        # initial output sigma (head bias), meters
    rho_max: float = 0.99

    def layout(self) -> Layout:
        d_in = 2 * self.t_h_frames
        return Layout([
            ("enc_w1", (d_in, self.enc_hidden)),
            ("enc_b1", (self.enc_hidden,)),
            ("enc_w2", (self.enc_hidden, self.enc_dim)),
            ("enc_b2", (self.enc_dim,)),
            ("dec_w1", (2 * self.enc_dim, self.dec_hidden)),
            ("dec_b1", (self.dec_hidden,)),
            ("dec_w2", (self.dec_hidden, 5 * self.t_f_frames)),
            ("dec_b2", (5 * self.t_f_frames,)),
        ])


def new_model(config: ModelConfig, seed: int = 0) -> ParameterVector:
    params = init_params(config.layout(), seed)
    # start with wide output sigmas so early gradients stay moderate
    head_bias = params.view("dec_b2").reshape(config.t_f_frames, 5)
    head_bias[:, 2:4] = math.log(config.sigma_init)
    return params


def pack_batch(samples, config: ModelConfig) -> dict:
    """Stack samples into batch arrays and check shapes against the config."""
    if len(samples) == 0:
        raise EmptyBatch("batch is empty")
    hist = np.stack([s.target_history for s in samples]).astype(np.float64)
    nbrs = np.stack([s.neighbor_histories for s in samples]).astype(np.float64)
    mask = np.stack([s.neighbor_mask for s in samples]).astype(np.float64)
    fut = np.stack([s.target_future for s in samples]).astype(np.float64)
    if hist.shape[1] != config.t_h_frames:
        raise ShapeMismatch(
            f"history has {hist.shape[1]} frames, model expects {config.t_h_frames}")
    if fut.shape[1] != config.t_f_frames:
        raise ShapeMismatch(
            f"future has {fut.shape[1]} frames, model expects {config.t_f_frames}")
    if nbrs.shape[1] != config.n_neighbors:
        raise ShapeMismatch(
            f"{nbrs.shape[1]} neighbor slots, model expects {config.n_neighbors}")
    return {"hist": hist, "nbrs": nbrs, "mask": mask, "fut": fut}


def _forward_arrays(params: ParameterVector, config: ModelConfig, batch: dict) -> dict:
    """Batched forward pass; returns all intermediates needed for backward."""
    hist, nbrs, mask = batch["hist"], batch["nbrs"], batch["mask"]
    b, h = hist.shape[0], config.t_h_frames
    n = config.n_neighbors

    shift = hist[:, -1, :].copy() if config.normalize else np.zeros((b, 2))
    sc = config.coord_scale
    xt = ((hist - shift[:, None, :]) * sc).reshape(b, 2 * h)
    xn = ((nbrs - shift[:, None, None, :]) * sc) * mask[:, :, None, None]
    xn = xn.reshape(b * n, 2 * h)

    w = params.view
    # shared encoder
    ht1 = np.tanh(xt @ w("enc_w1") + w("enc_b1"))
    et = np.tanh(ht1 @ w("enc_w2") + w("enc_b2"))
    hn1 = np.tanh(xn @ w("enc_w1") + w("enc_b1"))
    en = np.tanh(hn1 @ w("enc_w2") + w("enc_b2")).reshape(b, n, config.enc_dim)

    cnt = np.maximum(mask.sum(axis=1), 1.0)
    pooled = (en * mask[:, :, None]).sum(axis=1) / cnt[:, None]

    dec_in = np.concatenate([et, pooled], axis=1)
    hd = np.tanh(dec_in @ w("dec_w1") + w("dec_b1"))
    raw = (hd @ w("dec_w2") + w("dec_b2")).reshape(b, config.t_f_frames, 5)

    # the head emits per-step displacements; positions are their running sum
    mu = np.cumsum(raw[:, :, 0:2], axis=1)
    s_raw = raw[:, :, 2:4]
    lo, hi = math.log(config.sigma_min), math.log(config.sigma_max)
    sigma = np.exp(np.clip(s_raw, lo, hi))
    s_active = (s_raw > lo) & (s_raw < hi)
    rho = config.rho_max * np.tanh(raw[:, :, 4])

    return {
        "shift": shift, "xt": xt, "xn": xn, "ht1": ht1, "et": et, "hn1": hn1,
        "en": en, "mask": mask, "cnt": cnt, "pooled": pooled, "dec_in": dec_in,
        "hd": hd, "mu": mu, "sigma": sigma, "s_active": s_active,
        "rho": rho,
    }


def forward(params: ParameterVector, sample, config: ModelConfig) -> PredictionDistribution:
    """Predict the future distribution for one sample (absolute coordinates)."""
    batch = pack_batch([sample], config)
    f = _forward_arrays(params, config, batch)
    mu = f["mu"][0] + f["shift"][0]
    steps = [
        BivariateGaussianStep(float(mu[t, 0]), float(mu[t, 1]),
                              float(f["sigma"][0, t, 0]), float(f["sigma"][0, t, 1]),
                              float(f["rho"][0, t]))
        for t in range(config.t_f_frames)
    ]
    return PredictionDistribution(steps)


def forward_batch(params: ParameterVector, samples, config: ModelConfig) -> np.ndarray:
    """Batched distribution parameters, shape (B, t_f_frames, 5), absolute coords."""
    batch = pack_batch(samples, config)
    f = _forward_arrays(params, config, batch)
    out = np.empty((len(samples), config.t_f_frames, 5))
    out[:, :, 0:2] = f["mu"] + f["shift"][:, None, :]
    out[:, :, 2:4] = f["sigma"]
    out[:, :, 4] = f["rho"]
    return out


def bivariate_nll(mu_x, mu_y, sigma_x, sigma_y, rho, x, y):
    """Negative log density of a bivariate Gaussian, vectorized."""
    u = (x - mu_x) / sigma_x
    v = (y - mu_y) / sigma_y
    m = 1.0 - rho ** 2
    q = u * u - 2.0 * rho * u * v + v * v
    return LOG_2PI + np.log(sigma_x) + np.log(sigma_y) + 0.5 * np.log(m) + q / (2.0 * m)


def _nll_terms(f: dict, fut: np.ndarray) -> dict:
    """Per-sample per-step NLL plus the pieces reused by the backward pass."""
    shift = f["shift"]
    dx = (fut[:, :, 0] - shift[:, 0:1]) - f["mu"][:, :, 0]
    dy = (fut[:, :, 1] - shift[:, 1:2]) - f["mu"][:, :, 1]
    sx, sy = f["sigma"][:, :, 0], f["sigma"][:, :, 1]
    rho = f["rho"]
    u, v = dx / sx, dy / sy
    m = 1.0 - rho ** 2
    q = u * u - 2.0 * rho * u * v + v * v
    nll = LOG_2PI + np.log(sx) + np.log(sy) + 0.5 * np.log(m) + q / (2.0 * m)
    return {"nll": nll, "u": u, "v": v, "m": m, "q": q, "sx": sx, "sy": sy, "rho": rho}


def nll_loss(params: ParameterVector, samples, config: ModelConfig) -> float:
    """Mean per-step negative log-likelihood of the true future positions."""
    batch = pack_batch(samples, config)
    f = _forward_arrays(params, config, batch)
    return float(np.mean(_nll_terms(f, batch["fut"])["nll"]))


def loss_gradient(params: ParameterVector, samples,
                  config: ModelConfig) -> tuple:
    """Loss and its exact reverse-mode gradient as a flat vector."""
    batch = pack_batch(samples, config)
    f = _forward_arrays(params, config, batch)
    t = _nll_terms(f, batch["fut"])
    b, tf = t["nll"].shape
    scale = 1.0 / (b * tf)
    loss = float(np.mean(t["nll"]))

    u, v, m, q, rho = t["u"], t["v"], t["m"], t["q"], t["rho"]
    sx, sy = t["sx"], t["sy"]

    # dNLL/d(raw head outputs); mu gradients flow through dx = y - mu and
    # the running sum (each displacement affects all later steps)
    g_raw = np.empty((b, tf, 5))
    g_mu = np.empty((b, tf, 2))
    g_mu[:, :, 0] = -(u - rho * v) / (m * sx) * scale
    g_mu[:, :, 1] = -(v - rho * u) / (m * sy) * scale
    g_raw[:, :, 0:2] = np.flip(np.cumsum(np.flip(g_mu, axis=1), axis=1), axis=1)
    g_raw[:, :, 2] = (1.0 - u * (u - rho * v) / m) * f["s_active"][:, :, 0] * scale
    g_raw[:, :, 3] = (1.0 - v * (v - rho * u) / m) * f["s_active"][:, :, 1] * scale
    d_rho = (-rho / m - u * v / m + q * rho / (m * m)) * scale
    cfg_r = config.rho_max
    g_raw[:, :, 4] = d_rho * cfg_r * (1.0 - (rho / cfg_r) ** 2)

    grad = np.zeros(params.layout.size)
    gw = GradientVector(grad, params.layout).view
    w = params.view

    g_flat = g_raw.reshape(b, 5 * tf)
    gw("dec_w2")[...] += f["hd"].T @ g_flat
    gw("dec_b2")[...] += g_flat.sum(axis=0)
    d_hd = (g_flat @ w("dec_w2").T) * (1.0 - f["hd"] ** 2)
    gw("dec_w1")[...] += f["dec_in"].T @ d_hd
    gw("dec_b1")[...] += d_hd.sum(axis=0)
    d_dec_in = d_hd @ w("dec_w1").T

    e = f["et"].shape[1]
    d_et = d_dec_in[:, :e]
    d_pooled = d_dec_in[:, e:]

    n = f["en"].shape[1]
    d_en = (d_pooled[:, None, :] * f["mask"][:, :, None]) / f["cnt"][:, None, None]
    d_en = d_en.reshape(b * n, e)

    def enc_backward(x, h1, enc_out, d_enc):
        d2 = d_enc * (1.0 - enc_out ** 2)
        gw("enc_w2")[...] += h1.T @ d2
        gw("enc_b2")[...] += d2.sum(axis=0)
        d1 = (d2 @ w("enc_w2").T) * (1.0 - h1 ** 2)
        gw("enc_w1")[...] += x.T @ d1
        gw("enc_b1")[...] += d1.sum(axis=0)

    enc_backward(f["xt"], f["ht1"], f["et"], d_et)
    enc_backward(f["xn"], f["hn1"], f["en"].reshape(b * n, e), d_en)

    return loss, GradientVector(grad, params.layout)


def sgd_step(params: ParameterVector, gradient: GradientVector, lr: float) -> ParameterVector:
    """theta' = theta - lr * gradient."""
    if gradient.values.shape != params.values.shape:
        raise ShapeMismatch("gradient length does not match parameter vector")
    return ParameterVector(params.values - lr * gradient.values, params.layout)


def mean_trajectory(dist: PredictionDistribution) -> np.ndarray:
    """Per-step (mu_x, mu_y) point estimate, shape (t_f_frames, 2)."""
    return np.array([[s.mu_x, s.mu_y] for s in dist.steps], dtype=np.float64)


def mean_trajectories(dist_params: np.ndarray) -> np.ndarray:
    """Point estimates for a batched forward output (B, t_f, 5) -> (B, t_f, 2)."""
    return dist_params[:, :, 0:2].copy()
