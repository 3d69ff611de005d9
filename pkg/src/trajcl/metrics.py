"""Displacement metrics, forgetting bookkeeping, and the TTCP diagnostic."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import Empty, MissingBaseline, NoConflict, ShapeMismatch

INTERACTION_THRESHOLD_S = 3.0


def _check_shapes(predictions: np.ndarray, ground_truth: np.ndarray) -> tuple:
    predictions = np.asarray(predictions, dtype=np.float64)
    ground_truth = np.asarray(ground_truth, dtype=np.float64)
    if predictions.shape != ground_truth.shape:
        raise ShapeMismatch(
            f"predictions {predictions.shape} vs ground truth {ground_truth.shape}")
    if predictions.ndim != 3 or predictions.shape[2] != 2:
        raise ShapeMismatch(f"expected (N, t_f, 2) arrays, got {predictions.shape}")
    if predictions.shape[0] == 0 or predictions.shape[1] == 0:
        raise Empty("no samples or no time steps")
    return predictions, ground_truth


def ade(predictions, ground_truth) -> float:
    """Mean per-step Euclidean displacement over all samples and steps."""
    predictions, ground_truth = _check_shapes(predictions, ground_truth)
    d = predictions - ground_truth
    return float(np.mean(np.hypot(d[..., 0], d[..., 1])))


def fde(predictions, ground_truth) -> float:
    """Mean Euclidean displacement of the final predicted position."""
    predictions, ground_truth = _check_shapes(predictions, ground_truth)
    d = predictions[:, -1, :] - ground_truth[:, -1, :]
    return float(np.mean(np.hypot(d[:, 0], d[:, 1])))


def average_error(per_scenario_errors) -> float:
    """Unweighted mean error over the learned scenarios."""
    values = list(per_scenario_errors)
    if len(values) == 0:
        raise Empty("no per-scenario errors")
    return float(np.mean(values))


@dataclass
class EvalReport:
    mode: str
    checkpoint_id: str
    per_scenario: dict            # scenario_id -> {"ade", "fde", "n_ts"}
    learned_order: list
    average_ade: float
    average_fde: float

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "checkpoint_id": self.checkpoint_id,
            "per_scenario": {str(k): v for k, v in self.per_scenario.items()},
            "learned_order": list(self.learned_order),
            "average_ade": self.average_ade,
            "average_fde": self.average_fde,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        return cls(doc["mode"], doc["checkpoint_id"],
                   {int(k): v for k, v in doc["per_scenario"].items()},
                   list(doc["learned_order"]), doc["average_ade"], doc["average_fde"])


@dataclass
class ForgettingReport:
    """Error increments per past scenario: now vs right after it was learned."""

    per_scenario: dict   # scenario_id -> {"then", "now", "increment", "percent"} per metric

    def to_dict(self) -> dict:
        return {str(k): v for k, v in self.per_scenario.items()}


def forgetting(eval_history: list) -> ForgettingReport:
    """Compare the latest report against each scenario's right-after baseline."""
    if len(eval_history) == 0:
        raise MissingBaseline("no evaluation reports")
    latest = eval_history[-1]
    out = {}
    for sid in latest.learned_order:
        baseline = next((r for r in eval_history if r.learned_order
                         and r.learned_order[-1] == sid), None)
        if baseline is None:
            raise MissingBaseline(f"scenario {sid} has no right-after-learning report")
        entry = {}
        for metric in ("ade", "fde"):
            then = baseline.per_scenario[sid][metric]
            now = latest.per_scenario[sid][metric]
            increment = now - then
            percent = (increment / then * 100.0) if then != 0 else (math.inf if increment > 0 else 0.0)
            entry[metric] = {"then": then, "now": now,
                             "increment": increment, "percent": percent}
        out[sid] = entry
    return ForgettingReport(out)


# --- minimum time-to-conflict-point ---

def _speeds(path: np.ndarray, dt: float) -> np.ndarray:
    step = np.hypot(*(np.diff(path, axis=0).T))
    v = np.empty(len(path))
    v[:-1] = step / dt
    v[-1] = v[-2] if len(path) > 1 else 0.0
    return v


def ttcp_min(path_1: np.ndarray, path_2: np.ndarray, conflict_point, dt: float = 0.1,
             window: tuple | None = None, conflict_radius: float = 0.5,
             min_speed: float = 0.1) -> float:
    """Minimum over time of |l_1/v_1 - l_2/v_2|, the times-to-conflict-point.

    Paths are (T, 2) position arrays sampled on the same frames. l_i is the
    remaining along-path distance to the conflict point, v_i the finite
    difference speed. The window ends when the first vehicle reaches the
    conflict point; frames where either speed drops below min_speed are
    skipped.
    """
    p1 = np.asarray(path_1, dtype=np.float64)
    p2 = np.asarray(path_2, dtype=np.float64)
    cp = np.asarray(conflict_point, dtype=np.float64)
    if p1.ndim != 2 or p2.ndim != 2 or p1.shape[1] != 2 or p2.shape[1] != 2:
        raise ShapeMismatch("paths must be (T, 2) arrays")

    arcs, conflict_idx = [], []
    for p in (p1, p2):
        seg = np.hypot(*(np.diff(p, axis=0).T))
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        dist_cp = np.hypot(p[:, 0] - cp[0], p[:, 1] - cp[1])
        idx = int(np.argmin(dist_cp))
        if dist_cp[idx] > conflict_radius:
            raise NoConflict(
                f"path passes no closer than {dist_cp[idx]:.2f} m to the conflict point")
        arcs.append(cum)
        conflict_idx.append(idx)

    t_end = min(conflict_idx)
    t_start = 0
    if window is not None:
        t_start, t_end = int(window[0]), int(window[1])
    v1, v2 = _speeds(p1, dt), _speeds(p2, dt)

    best = math.inf
    for t in range(t_start, t_end + 1):
        if v1[t] < min_speed or v2[t] < min_speed:
            continue
        l1 = arcs[0][conflict_idx[0]] - arcs[0][t]
        l2 = arcs[1][conflict_idx[1]] - arcs[1][t]
        best = min(best, abs(l1 / v1[t] - l2 / v2[t]))
    if not math.isfinite(best):
        raise NoConflict("no frame in the window has both speeds above the minimum")
    return float(best)


def _segment_crossing(a: np.ndarray, b: np.ndarray):
    """First proper crossing point of two polylines, or None."""
    a0, a1 = a[:-1], a[1:]
    b0, b1 = b[:-1], b[1:]
    da = a1 - a0
    db = b1 - b0

    def cross(u, v):
        return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]

    # orientation of each b endpoint relative to each a segment and vice versa
    d1 = cross(da[:, None, :], b0[None, :, :] - a0[:, None, :])
    d2 = cross(da[:, None, :], b1[None, :, :] - a0[:, None, :])
    d3 = cross(db[None, :, :], a0[:, None, :] - b0[None, :, :])
    d4 = cross(db[None, :, :], a1[:, None, :] - b0[None, :, :])
    hit = (d1 * d2 < 0) & (d3 * d4 < 0)
    if not hit.any():
        return None
    i, j = np.argwhere(hit)[0]
    denom = cross(da[i], db[j])
    t = cross(b0[j] - a0[i], db[j]) / denom
    return a0[i] + t * da[i]


@dataclass(frozen=True)
class ConflictConfig:
    conflict_radius: float = 0.5
    min_speed: float = 0.1
    threshold_s: float = INTERACTION_THRESHOLD_S
    histogram_edges: tuple = tuple(float(x) for x in range(0, 11))  # last bin is overflow


@dataclass
class TTCPReport:
    pair_values: list            # (track_id_1, track_id_2, delta_ttcp_min)
    histogram_edges: list
    histogram_counts: list
    interaction_fraction: float
    n_pairs: int
    n_skipped: int
    flagged_pairs: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "pair_values": [[int(a), int(b), float(v)] for a, b, v in self.pair_values],
            "histogram_edges": list(self.histogram_edges),
            "histogram_counts": list(self.histogram_counts),
            "interaction_fraction": self.interaction_fraction,
            "n_pairs": self.n_pairs,
            "n_skipped": self.n_skipped,
            "flagged_pairs": [[int(a), int(b)] for a, b in self.flagged_pairs],
        }


def interaction_density(tracks, config: ConflictConfig = ConflictConfig(),
                        dt: float = 0.1) -> TTCPReport:
    """Detect path crossings between track pairs and histogram their TTCP minima."""
    values, skipped, flagged = [], 0, []
    tracks = sorted(tracks, key=lambda tr: tr.track_id)
    for i in range(len(tracks)):
        for j in range(i + 1, len(tracks)):
            a, b = tracks[i], tracks[j]
            first = max(a.frames[0], b.frames[0])
            last = min(a.frames[-1], b.frames[-1])
            if last - first < 1:
                continue
            pa = a.xy[np.searchsorted(a.frames, first):np.searchsorted(a.frames, last) + 1]
            pb = b.xy[np.searchsorted(b.frames, first):np.searchsorted(b.frames, last) + 1]
            cp = _segment_crossing(pa, pb)
            if cp is None:
                continue
            try:
                v = ttcp_min(pa, pb, cp, dt=dt, conflict_radius=config.conflict_radius,
                             min_speed=config.min_speed)
            except NoConflict:
                skipped += 1
                flagged.append((a.track_id, b.track_id))
                continue
            values.append((a.track_id, b.track_id, v))

    edges = list(config.histogram_edges) + [math.inf]
    counts = [0] * (len(edges) - 1)
    for _, _, v in values:
        for k in range(len(edges) - 1):
            if edges[k] <= v < edges[k + 1]:
                counts[k] += 1
                break
    fraction = (sum(1 for _, _, v in values if v <= config.threshold_s) / len(values)
                if values else 0.0)
    return TTCPReport(values, edges, counts, fraction, len(values), skipped, flagged)
