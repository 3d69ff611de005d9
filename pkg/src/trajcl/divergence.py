"""Traffic divergence between scenarios.

Pipeline: every sample becomes a condition (flattened target history plus
eigenvectors of an interaction Laplacian over the neighbor histories) and a
future vector. A mixture density network per scenario estimates the
conditional density of futures; divergence between two scenarios is the
Monte-Carlo conditional KL divergence between those densities, combined in
both directions into a weighted value.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (BadLambda, BadWeight, DimensionMismatch, EmptyConditions,
                     KTooLarge, NonFiniteLoss, ShapeMismatch, InsufficientData)
from .nn import GradientVector, Layout, ParameterVector, init_params, logsumexp

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_FAR_DISTANCE = 100.0      # effective distance (m) imputed for absent vehicles
DEFAULT_LOG_DENSITY_FLOOR = -1e4  # nats


@dataclass
class InteractionLaplacian:
    """Graph Laplacian of the decayed-distance affinity between vehicles."""

    laplacian: np.ndarray   # (N, N)
    affinity: np.ndarray    # (N, N)
    lambda_decay: float
    imputed: bool = False


@dataclass
class ConditionVector:
    """MDN conditioning input: target history block plus spectral block."""

    x0: np.ndarray          # flattened (downsampled) target history
    spectral: np.ndarray    # (k, N) eigenvectors
    imputed: bool = False

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.x0, self.spectral.ravel()])


@dataclass
class GaussianMixture:
    """Diagonal-covariance Gaussian mixture over future-trajectory vectors."""

    weights: np.ndarray     # (K,) simplex
    means: np.ndarray       # (K, d)
    variances: np.ndarray   # (K, d), >= variance floor

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def log_density(self, y: np.ndarray) -> np.ndarray:
        """Stable log density at points y of shape (n, d)."""
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        if y.shape[1] != self.dim:
            raise DimensionMismatch(f"points have dim {y.shape[1]}, mixture has {self.dim}")
        diff = y[:, None, :] - self.means[None, :, :]
        comp = -0.5 * np.sum(LOG_2PI + np.log(self.variances)[None, :, :]
                             + diff * diff / self.variances[None, :, :], axis=2)
        return logsumexp(np.log(self.weights)[None, :] + comp, axis=1)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        ks = rng.choice(len(self.weights), size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        return self.means[ks] + np.sqrt(self.variances[ks]) * eps


# --- interaction encoding ---

def interaction_laplacian(neighbor_histories: np.ndarray, lambda_decay: float,
                          present_mask: np.ndarray | None = None,
                          far_distance: float = DEFAULT_FAR_DISTANCE) -> InteractionLaplacian:
    """Laplacian L = D - A of the exponentially decayed mean-distance affinity.

    a_ij = exp(-sum_k w_k e_ij^k / sum_k w_k) with w_k = lambda^((T-1)-k); the
    row-sum diagonal D makes every row of L sum to zero. Vehicles marked
    absent are imputed at a fixed far distance so the matrix stays N x N.
    """
    if not (0.0 < lambda_decay <= 1.0):
        raise BadLambda(f"lambda_decay must be in (0, 1], got {lambda_decay}")
    hist = np.asarray(neighbor_histories, dtype=np.float64)
    if hist.ndim != 3 or hist.shape[2] != 2:
        raise ShapeMismatch(f"neighbor_histories must be (N, T, 2), got {hist.shape}")
    n, t = hist.shape[0], hist.shape[1]
    if present_mask is None:
        present_mask = np.ones(n, dtype=bool)
    present_mask = np.asarray(present_mask, dtype=bool)
    if present_mask.shape != (n,):
        raise ShapeMismatch("present_mask must have one entry per vehicle")

    omega = lambda_decay ** np.arange(t - 1, -1, -1, dtype=np.float64)
    diff = hist[:, None, :, :] - hist[None, :, :, :]
    dist = np.hypot(diff[..., 0], diff[..., 1])           # (N, N, T)
    wavg = (dist * omega).sum(axis=2) / omega.sum()

    both_present = present_mask[:, None] & present_mask[None, :]
    off_diag = ~np.eye(n, dtype=bool)
    imputed = off_diag & ~both_present
    wavg[imputed] = far_distance

    affinity = np.exp(-wavg)
    lap = np.diag(affinity.sum(axis=1)) - affinity
    return InteractionLaplacian(lap, affinity, lambda_decay, imputed=bool(imputed.any()))


def spectral_features(lap: InteractionLaplacian, k: int) -> np.ndarray:
    """Eigenvectors of the k smallest eigenvalues, sign-canonical, rows of (k, N).

    Signs are fixed so the first largest-magnitude component of each vector is
    positive; equal eigenvalues are ordered by lexicographic comparison of the
    canonicalized vectors.
    """
    n = lap.laplacian.shape[0]
    if k > n:
        raise KTooLarge(f"k={k} exceeds matrix size {n}")
    eigvals, eigvecs = np.linalg.eigh(lap.laplacian)
    vecs = eigvecs.T.copy()                               # rows are eigenvectors
    for i in range(n):
        j = int(np.argmax(np.abs(vecs[i])))
        if vecs[i, j] < 0:
            vecs[i] = -vecs[i]
    keys = tuple(vecs[:, c] for c in range(n - 1, -1, -1)) + (eigvals,)
    order = np.lexsort(keys)
    return vecs[order[:k]]


def downsampled(arr: np.ndarray, factor: int) -> np.ndarray:
    """Every factor-th frame, keeping the most recent one."""
    if factor < 1:
        raise ValueError("downsample factor must be >= 1")
    return arr[factor - 1::factor]


def build_condition(sample, k: int = 3, lambda_decay: float = 0.9,
                    downsample: int = 5,
                    far_distance: float = DEFAULT_FAR_DISTANCE) -> tuple:
    """Condition vector and future vector for one sample.

    Condition = [flattened downsampled target history, k Laplacian
    eigenvectors], future = flattened downsampled target future.
    """
    lap = interaction_laplacian(sample.neighbor_histories, lambda_decay,
                                present_mask=sample.neighbor_mask,
                                far_distance=far_distance)
    vecs = spectral_features(lap, k)
    x0 = downsampled(sample.target_history, downsample).ravel()
    future = downsampled(sample.target_future, downsample).ravel()
    cond = ConditionVector(x0=x0, spectral=vecs, imputed=lap.imputed)
    return cond, future


def build_cases(samples, k: int = 3, lambda_decay: float = 0.9,
                downsample: int = 5) -> tuple:
    """Stack conditions/futures for many samples into (X, Y) arrays."""
    conds, futs = [], []
    for s in samples:
        c, f = build_condition(s, k=k, lambda_decay=lambda_decay, downsample=downsample)
        conds.append(c.vector)
        futs.append(f)
    return np.asarray(conds), np.asarray(futs)


# --- mixture density network ---

@dataclass(frozen=True)
class MDNConfig:
    hidden: int = 64
    variance_floor: float = 1e-6
    raw_cap: float = 30.0                # cap on log-variance head pre-activation
    min_cases_per_component: int = 300   # data-sufficiency guard
    batch_size: int = 128


@dataclass
class MDNModel:
    """Mixture density network with per-scenario input/output standardization."""

    params: ParameterVector
    n_components: int
    cond_dim: int
    out_dim: int
    config: MDNConfig
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray
    epoch_losses: list = field(default_factory=list)


def _mdn_layout(cond_dim: int, out_dim: int, n_components: int, hidden: int) -> Layout:
    return Layout([
        ("w1", (cond_dim, hidden)),
        ("b1", (hidden,)),
        ("w_logit", (hidden, n_components)),
        ("b_logit", (n_components,)),
        ("w_mu", (hidden, n_components * out_dim)),
        ("b_mu", (n_components * out_dim,)),
        ("w_var", (hidden, n_components * out_dim)),
        ("b_var", (n_components * out_dim,)),
    ])


def _mdn_forward(params: ParameterVector, xs: np.ndarray, n_components: int,
                 out_dim: int, config: MDNConfig) -> dict:
    w = params.view
    h = np.tanh(xs @ w("w1") + w("b1"))
    logits = h @ w("w_logit") + w("b_logit")
    mu = (h @ w("w_mu") + w("b_mu")).reshape(-1, n_components, out_dim)
    raw = (h @ w("w_var") + w("b_var")).reshape(-1, n_components, out_dim)
    ev = np.exp(np.minimum(raw, config.raw_cap))
    var = np.maximum(ev, config.variance_floor)
    active = (ev > config.variance_floor) & (raw < config.raw_cap)
    return {"xs": xs, "h": h, "logits": logits, "mu": mu, "var": var, "active": active}


def _mdn_loss_grad(params: ParameterVector, xs: np.ndarray, zs: np.ndarray,
                   n_components: int, out_dim: int, config: MDNConfig) -> tuple:
    f = _mdn_forward(params, xs, n_components, out_dim, config)
    b = xs.shape[0]
    logits, mu, var = f["logits"], f["mu"], f["var"]
    log_w = logits - logsumexp(logits, axis=1)[:, None]
    diff = zs[:, None, :] - mu
    comp = -0.5 * np.sum(LOG_2PI + np.log(var) + diff * diff / var, axis=2)
    a = log_w + comp
    ll = logsumexp(a, axis=1)
    loss = -float(np.mean(ll))

    r = np.exp(a - ll[:, None])                   # responsibilities
    soft = np.exp(log_w)
    d_logits = (soft - r) / b
    d_mu = -(r[:, :, None] * diff / var) / b
    d_raw = -(r[:, :, None] * (diff * diff / (2.0 * var) - 0.5)) * f["active"] / b

    grad = np.zeros(params.layout.size)
    gw = GradientVector(grad, params.layout).view
    w = params.view
    h = f["h"]
    d_mu_f = d_mu.reshape(b, -1)
    d_raw_f = d_raw.reshape(b, -1)
    gw("w_logit")[...] += h.T @ d_logits
    gw("b_logit")[...] += d_logits.sum(axis=0)
    gw("w_mu")[...] += h.T @ d_mu_f
    gw("b_mu")[...] += d_mu_f.sum(axis=0)
    gw("w_var")[...] += h.T @ d_raw_f
    gw("b_var")[...] += d_raw_f.sum(axis=0)
    d_h = (d_logits @ w("w_logit").T + d_mu_f @ w("w_mu").T + d_raw_f @ w("w_var").T)
    d_pre = d_h * (1.0 - h * h)
    gw("w1")[...] += xs.T @ d_pre
    gw("b1")[...] += d_pre.sum(axis=0)
    return loss, GradientVector(grad, params.layout)


def _as_case_arrays(cases) -> tuple:
    if isinstance(cases, tuple) and len(cases) == 2 and isinstance(cases[0], np.ndarray):
        return np.asarray(cases[0], dtype=np.float64), np.asarray(cases[1], dtype=np.float64)
    xs, ys = [], []
    for cond, fut in cases:
        vec = cond.vector if isinstance(cond, ConditionVector) else np.asarray(cond)
        xs.append(np.asarray(vec, dtype=np.float64))
        ys.append(np.asarray(fut, dtype=np.float64))
    return np.asarray(xs), np.asarray(ys)


def mdn_required_cases(n_components: int, config: MDNConfig = MDNConfig()) -> int:
    return config.min_cases_per_component * n_components


def fit_mdn(cases, n_components: int, epochs: int = 60, lr: float = 0.05,
            seed: int = 0, config: MDNConfig = MDNConfig()) -> MDNModel:
    """Fit a mixture density network by minibatch NLL descent.

    Raises InsufficientData when fewer than min_cases_per_component * K cases
    are supplied; too little data cannot pin down that many components.
    """
    x, y = _as_case_arrays(cases)
    required = mdn_required_cases(n_components, config)
    if x.shape[0] < required:
        raise InsufficientData(x.shape[0], required)
    cond_dim, out_dim = x.shape[1], y.shape[1]

    in_mean, in_std = x.mean(axis=0), np.maximum(x.std(axis=0), 1e-8)
    out_mean, out_std = y.mean(axis=0), np.maximum(y.std(axis=0), 1e-8)
    xs = (x - in_mean) / in_std
    zs = (y - out_mean) / out_std

    layout = _mdn_layout(cond_dim, out_dim, n_components, config.hidden)
    params = init_params(layout, seed)
    rng = np.random.default_rng(seed)
    n = x.shape[0]
    epoch_losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grad = _mdn_loss_grad(params, xs[idx], zs[idx],
                                        n_components, out_dim, config)
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"MDN loss became non-finite ({loss})")
            params = ParameterVector(params.values - lr * grad.values, layout)
            batch_losses.append(loss)
        epoch_losses.append(float(np.mean(batch_losses)))
    return MDNModel(params, n_components, cond_dim, out_dim, config,
                    in_mean, in_std, out_mean, out_std, epoch_losses)


def mixture_at(model: MDNModel, condition) -> GaussianMixture:
    """Conditional mixture in original future-vector units."""
    vec = condition.vector if isinstance(condition, ConditionVector) else np.asarray(condition)
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (model.cond_dim,):
        raise ShapeMismatch(f"condition has shape {vec.shape}, model expects ({model.cond_dim},)")
    xs = ((vec - model.in_mean) / model.in_std)[None, :]
    f = _mdn_forward(model.params, xs, model.n_components, model.out_dim, model.config)
    logits = f["logits"][0]
    weights = np.exp(logits - logsumexp(logits[None, :], axis=1)[0])
    weights = weights / weights.sum()
    means = model.out_mean + model.out_std * f["mu"][0]
    variances = np.maximum(model.out_std ** 2 * f["var"][0], model.config.variance_floor)
    return GaussianMixture(weights, means, variances)


# --- Monte-Carlo KL divergence ---

def _mc_kld_stats(p1: GaussianMixture, p2: GaussianMixture, n_mc: int, seed,
                  log_density_floor: float = DEFAULT_LOG_DENSITY_FLOOR) -> tuple:
    if p1.dim != p2.dim:
        raise DimensionMismatch(f"mixture dims differ: {p1.dim} vs {p2.dim}")
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    rng = np.random.default_rng(seed)
    y = p1.sample(n_mc, rng)
    log_p1 = p1.log_density(y)
    log_p2 = p2.log_density(y)
    n_floored = int(np.sum(log_p2 < log_density_floor))
    log_p2 = np.maximum(log_p2, log_density_floor)
    terms = log_p1 - log_p2
    return float(np.mean(terms)), n_floored, float(np.std(terms) / np.sqrt(n_mc))


def mc_kld(p1: GaussianMixture, p2: GaussianMixture, n_mc: int, seed,
           log_density_floor: float = DEFAULT_LOG_DENSITY_FLOOR) -> float:
    """Monte-Carlo estimate of KL(p1 || p2) by sampling from p1."""
    return _mc_kld_stats(p1, p2, n_mc, seed, log_density_floor)[0]


def condition_seed(base_seed: int, condition: np.ndarray) -> np.random.SeedSequence:
    """Splittable per-condition seed derived from the condition's content.

    Content-based derivation keeps the Monte-Carlo stream for a condition the
    same no matter how often or in which order it appears.
    """
    buf = np.ascontiguousarray(np.asarray(condition, dtype=np.float64)).tobytes()
    digest = hashlib.sha256(buf).digest()
    words = [int.from_bytes(digest[i:i + 8], "little") for i in range(0, 32, 8)]
    return np.random.SeedSequence([int(base_seed)] + words)


def ckld_stats(model_1: MDNModel, model_2: MDNModel, conditions, n_mc: int,
               seed: int, log_density_floor: float = DEFAULT_LOG_DENSITY_FLOOR) -> dict:
    """Per-condition KLD values plus floored-evaluation bookkeeping."""
    if (model_1.cond_dim, model_1.out_dim) != (model_2.cond_dim, model_2.out_dim):
        raise DimensionMismatch("models do not share condition/output dimensions")
    conditions = np.atleast_2d(np.asarray(conditions, dtype=np.float64))
    if conditions.shape[0] == 0:
        raise EmptyConditions("no conditions supplied")
    values, floored, ses = [], 0, []
    for x in conditions:
        p1 = mixture_at(model_1, x)
        p2 = mixture_at(model_2, x)
        v, nf, se = _mc_kld_stats(p1, p2, n_mc, condition_seed(seed, x), log_density_floor)
        values.append(v)
        ses.append(se)
        floored += nf
    values = np.asarray(values)
    return {
        "value": float(values.mean()),
        "per_condition": values,
        "n_conditions": int(values.size),
        "n_floored": floored,
        "standard_error": float(np.sqrt(np.sum(np.square(ses))) / values.size),
    }


def ckld(model_1: MDNModel, model_2: MDNModel, conditions, n_mc: int, seed: int,
         log_density_floor: float = DEFAULT_LOG_DENSITY_FLOOR) -> float:
    """Conditional KLD: mean Monte-Carlo KLD over conditions from scenario 1."""
    return ckld_stats(model_1, model_2, conditions, n_mc, seed, log_density_floor)["value"]


def weighted_ckld(ckld_12: float, ckld_21: float, w1: float = 0.5) -> float:
    """w1 * CKLD(p1||p2) + (1 - w1) * CKLD(p2||p1)."""
    if not (0.0 <= w1 <= 1.0):
        raise BadWeight(f"w1 must be in [0, 1], got {w1}")
    return w1 * ckld_12 + (1.0 - w1) * ckld_21


# --- scenario-level report ---

@dataclass
class DivergenceReport:
    """Directed and weighted CKLD matrices plus all knobs that produced them."""

    names: list
    directed: np.ndarray          # directed[i, j] = CKLD(p_i || p_j)
    weighted: np.ndarray          # weighted[i, j] = w1*directed[i,j] + w2*directed[j,i]
    w1: float
    n_mc: int
    n_conditions: np.ndarray      # conditions used per source scenario row
    case_counts: dict
    seeds: dict
    n_floored: np.ndarray
    standard_errors: np.ndarray
    log_density_floor: float = DEFAULT_LOG_DENSITY_FLOOR
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "directed_ckld": self.directed.tolist(),
            "weighted_ckld": self.weighted.tolist(),
            "w1": self.w1,
            "w2": 1.0 - self.w1,
            "n_mc": self.n_mc,
            "n_conditions": self.n_conditions.tolist(),
            "case_counts": {str(k): int(v) for k, v in self.case_counts.items()},
            "seeds": self.seeds,
            "n_floored": self.n_floored.tolist(),
            "mc_standard_errors": self.standard_errors.tolist(),
            "log_density_floor": self.log_density_floor,
            **self.extra,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def measure_divergence(case_sets: dict, n_components: int = 20, epochs: int = 60,
                       lr: float = 0.05, n_mc: int = 1000, w1: float = 0.5,
                       seed: int = 0, condition_cap: int = 2000,
                       mdn_config: MDNConfig = MDNConfig()) -> DivergenceReport:
    """Fit one MDN per scenario and compute all pairwise weighted CKLDs.

    case_sets maps scenario name -> (X, Y) case arrays. Conditions for each
    directed term come from the first (source) scenario, capped to
    condition_cap picked uniformly at a fixed seed.
    """
    if not (0.0 <= w1 <= 1.0):
        raise BadWeight(f"w1 must be in [0, 1], got {w1}")
    names = list(case_sets)
    models = {}
    conds = {}
    rng = np.random.default_rng(seed)
    for name in names:
        x, y = _as_case_arrays(case_sets[name])
        models[name] = fit_mdn((x, y), n_components, epochs=epochs, lr=lr,
                               seed=seed, config=mdn_config)
        if x.shape[0] > condition_cap:
            keep = np.sort(rng.choice(x.shape[0], size=condition_cap, replace=False))
            x = x[keep]
        conds[name] = x

    n = len(names)
    directed = np.zeros((n, n))
    floored = np.zeros((n, n), dtype=np.int64)
    ses = np.zeros((n, n))
    for i, a in enumerate(names):
        for j, b in enumerate(names):
            if i == j:
                continue
            stats = ckld_stats(models[a], models[b], conds[a], n_mc, seed)
            directed[i, j] = stats["value"]
            floored[i, j] = stats["n_floored"]
            ses[i, j] = stats["standard_error"]
    weighted = w1 * directed + (1.0 - w1) * directed.T
    return DivergenceReport(
        names=names, directed=directed, weighted=weighted, w1=w1, n_mc=n_mc,
        n_conditions=np.array([conds[name].shape[0] for name in names]),
        case_counts={name: _as_case_arrays(case_sets[name])[0].shape[0] for name in names},
        seeds={"seed": seed},
        n_floored=floored, standard_errors=ses,
        extra={"n_components": n_components, "epochs": epochs, "lr": lr,
               "condition_cap": condition_cap},
    )
