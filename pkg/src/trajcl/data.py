"""Trajectory logs, windowed prediction samples, and synthetic scenarios.

A scenario is a set of vehicle tracks recorded at a fixed frame rate. Tracks
are windowed into samples (target history + neighbor histories + target
future) and split deterministically into train/val/test.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadRatios, BadSpec, EmptyFile, MissingColumn, NonMonotonicFrames

log = logging.getLogger(__name__)

AGENT_TYPES = ("car", "truck", "other")
REQUIRED_COLUMNS = ("track_id", "frame_id", "timestamp_ms", "x", "y")
SYNTHETIC_FAMILIES = ("straight_flow", "merge", "roundabout", "intersection_stop")


@dataclass(frozen=True)
class TrackPoint:
    """One observation of one vehicle."""

    track_id: int
    frame: int
    t: float
    x: float
    y: float
    vx: float | None = None
    vy: float | None = None
    agent_type: str = "car"


@dataclass
class Track:
    """All observations of one vehicle, frame-sorted, as arrays."""

    track_id: int
    frames: np.ndarray        # (T,) int
    t: np.ndarray             # (T,) seconds
    xy: np.ndarray            # (T, 2) meters
    vxy: np.ndarray | None = None
    agent_type: str = "car"

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def contiguous(self) -> bool:
        return len(self.frames) < 2 or bool(np.all(np.diff(self.frames) == 1))

    def points(self) -> list[TrackPoint]:
        out = []
        for i in range(len(self.frames)):
            vx, vy = (None, None) if self.vxy is None else (float(self.vxy[i, 0]), float(self.vxy[i, 1]))
            out.append(TrackPoint(self.track_id, int(self.frames[i]), float(self.t[i]),
                                  float(self.xy[i, 0]), float(self.xy[i, 1]), vx, vy, self.agent_type))
        return out


@dataclass
class TrajectorySample:
    """One prediction sample: target + neighbor histories, target future."""

    target_history: np.ndarray      # (t_h_frames, 2)
    neighbor_histories: np.ndarray  # (N_max, t_h_frames, 2); zeros where absent
    neighbor_mask: np.ndarray       # (N_max,) bool, True = neighbor present
    target_future: np.ndarray       # (t_f_frames, 2)
    scenario_id: int = 0
    target_track_id: int = -1
    start_frame: int = -1

    def validate(self) -> None:
        h = self.target_history.shape[0]
        n = self.neighbor_histories.shape[0]
        if self.target_history.shape != (h, 2):
            raise ValueError("target_history must be (t_h_frames, 2)")
        if self.neighbor_histories.shape != (n, h, 2):
            raise ValueError("neighbor_histories must be (N_max, t_h_frames, 2)")
        if self.neighbor_mask.shape != (n,):
            raise ValueError("neighbor_mask must be (N_max,)")
        if self.target_future.ndim != 2 or self.target_future.shape[1] != 2:
            raise ValueError("target_future must be (t_f_frames, 2)")
        for arr in (self.target_history, self.target_future):
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite coordinates in sample")
        if not np.all(np.isfinite(self.neighbor_histories[self.neighbor_mask])):
            raise ValueError("non-finite coordinates in present neighbor history")


@dataclass
class ScenarioDataset:
    """A scenario's samples plus a deterministic train/val/test partition."""

    scenario_id: int
    name: str
    samples: list
    split: dict                      # {"train"|"val"|"test": np.ndarray of indices}
    frame_rate: float = 10.0
    split_seed: int = 0
    tracks: list = field(default_factory=list)

    def subset(self, part: str) -> list:
        return [self.samples[i] for i in self.split[part]]


@dataclass(frozen=True)
class SyntheticScenarioSpec:
    """Parameters for one synthetic traffic scenario."""

    family: str
    n_vehicles: int
    speed_range: tuple = (6.0, 12.0)   # m/s
    noise_std: float = 0.05            # meters
    curvature: float = 0.05            # 1/m, roundabout radius = 1/curvature
    merge_angle_deg: float = 15.0
    seed: int = 0
    duration_s: float = 60.0
    frame_rate: float = 10.0

    def validate(self) -> None:
        if self.family not in SYNTHETIC_FAMILIES:
            raise BadSpec(f"unknown family {self.family!r}; choose from {SYNTHETIC_FAMILIES}")
        if self.n_vehicles < 1:
            raise BadSpec("n_vehicles must be >= 1")
        lo, hi = self.speed_range
        if not (0 < lo <= hi):
            raise BadSpec("speed_range must satisfy 0 < lo <= hi")
        if self.noise_std < 0:
            raise BadSpec("noise_std must be >= 0")
        if self.curvature <= 0:
            raise BadSpec("curvature must be > 0")
        if self.duration_s <= 0 or self.frame_rate <= 0:
            raise BadSpec("duration_s and frame_rate must be > 0")


def _to_float(value, row_idx: int, column: str) -> float:
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ValueError(f"row {row_idx}: column {column!r} is not numeric: {value!r}")


def parse_tracks(csv_source, frame_rate: float = 10.0) -> list:
    """Parse a trajectory CSV into frame-sorted Track objects.

    csv_source may be a path or a file-like object. Rows with non-finite
    coordinates are dropped. Output tracks are sorted by track_id and
    independent of input row order.
    """
    if hasattr(csv_source, "read"):
        handle = csv_source
        close = False
    else:
        handle = open(csv_source, "r", newline="")
        close = True
    try:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            raise EmptyFile("no header row")
        fields = [f.strip() for f in reader.fieldnames]
        for col in REQUIRED_COLUMNS:
            if col not in fields:
                raise MissingColumn(col)
        has_v = "vx" in fields and "vy" in fields
        has_type = "agent_type" in fields

        rows_by_track: dict = {}
        n_rows = 0
        n_dropped = 0
        for idx, row in enumerate(reader):
            n_rows += 1
            x = _to_float(row["x"], idx, "x")
            y = _to_float(row["y"], idx, "y")
            if not (math.isfinite(x) and math.isfinite(y)):
                n_dropped += 1
                continue
            tid = int(row["track_id"])
            frame = int(row["frame_id"])
            t = _to_float(row["timestamp_ms"], idx, "timestamp_ms") / 1000.0
            vx = vy = None
            if has_v and row.get("vx") not in (None, "") and row.get("vy") not in (None, ""):
                vx = _to_float(row["vx"], idx, "vx")
                vy = _to_float(row["vy"], idx, "vy")
            agent = row.get("agent_type", "car") if has_type else "car"
            agent = agent if agent in AGENT_TYPES else "other"
            rows_by_track.setdefault(tid, []).append((frame, t, x, y, vx, vy, agent))
        if n_rows == 0:
            raise EmptyFile("no data rows")
        if n_dropped:
            log.info("parse_tracks: dropped %d rows with non-finite coordinates", n_dropped)

        tracks = []
        for tid in sorted(rows_by_track):
            rows = sorted(rows_by_track[tid], key=lambda r: r[0])
            frames = np.array([r[0] for r in rows], dtype=np.int64)
            if len(frames) > 1 and np.any(np.diff(frames) <= 0):
                raise NonMonotonicFrames(tid)
            t = np.array([r[1] for r in rows], dtype=np.float64)
            xy = np.array([[r[2], r[3]] for r in rows], dtype=np.float64)
            vxy = None
            if all(r[4] is not None for r in rows):
                vxy = np.array([[r[4], r[5]] for r in rows], dtype=np.float64)
            tracks.append(Track(tid, frames, t, xy, vxy, rows[0][6]))
        return tracks
    finally:
        if close:
            handle.close()


def horizon_frames(horizon_s: float, frame_rate: float) -> int:
    return int(round(horizon_s * frame_rate))


def build_samples(tracks, t_h: float, t_f: float, frame_rate: float,
                  n_max: int = 5, stride: int = 1) -> tuple:
    """Window tracks into TrajectorySamples.

    Returns (samples, n_skipped). A window is emitted for every target track
    and start position where the target covers the full t_h + t_f span with
    contiguous frames; windows failing that are skipped and counted.
    Neighbors are the n_max tracks closest to the target at the last observed
    frame, among tracks covering the full history span.
    """
    if t_h <= 0 or t_f <= 0:
        raise ValueError("t_h and t_f must be > 0")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    h = horizon_frames(t_h, frame_rate)
    f = horizon_frames(t_f, frame_rate)
    span = h + f

    tracks = sorted(tracks, key=lambda tr: tr.track_id)
    # frame -> row index lookup per track, for neighbor coverage tests
    frame_index = [{int(fr): i for i, fr in enumerate(tr.frames)} for tr in tracks]

    samples = []
    n_skipped = 0
    for ti, target in enumerate(tracks):
        if len(target) < span:
            continue
        for s in range(0, len(target) - span + 1, stride):
            first, last = int(target.frames[s]), int(target.frames[s + span - 1])
            if last - first != span - 1:
                n_skipped += 1
                continue
            obs_frame = first + h - 1
            hist = target.xy[s:s + h]
            fut = target.xy[s + h:s + span]
            target_pos = target.xy[s + h - 1]

            candidates = []
            for nj, other in enumerate(tracks):
                if nj == ti:
                    continue
                fidx = frame_index[nj]
                rows = [fidx.get(first + k) for k in range(h)]
                if any(r is None for r in rows):
                    continue
                d = float(np.hypot(*(other.xy[rows[-1]] - target_pos)))
                candidates.append((d, other.track_id, other.xy[rows[0]:rows[0] + h]))
            candidates.sort(key=lambda c: (c[0], c[1]))

            nb = np.zeros((n_max, h, 2), dtype=np.float64)
            mask = np.zeros(n_max, dtype=bool)
            for slot, (_, _, nb_hist) in enumerate(candidates[:n_max]):
                nb[slot] = nb_hist
                mask[slot] = True
            samples.append(TrajectorySample(
                target_history=hist.copy(),
                neighbor_histories=nb,
                neighbor_mask=mask,
                target_future=fut.copy(),
                target_track_id=target.track_id,
                start_frame=first,
            ))
    if n_skipped:
        log.info("build_samples: skipped %d non-contiguous windows", n_skipped)
    return samples, n_skipped


def split_dataset(samples, ratios=(0.7, 0.1, 0.2), seed: int = 0,
                  scenario_id: int = 0, name: str = "", frame_rate: float = 10.0,
                  tracks=None) -> ScenarioDataset:
    """Deterministic shuffled train/val/test partition."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise BadRatios(f"need three non-negative ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise BadRatios(f"ratios must sum to 1, got sum={sum(ratios)!r}")
    n = len(samples)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    c1 = int(math.floor(n * ratios[0] + 0.5))
    c2 = int(math.floor(n * (ratios[0] + ratios[1]) + 0.5))
    split = {
        "train": np.sort(perm[:c1]),
        "val": np.sort(perm[c1:c2]),
        "test": np.sort(perm[c2:]),
    }
    for s in samples:
        if isinstance(s, TrajectorySample):
            s.scenario_id = scenario_id
    return ScenarioDataset(scenario_id, name or f"scenario-{scenario_id}", list(samples),
                           split, frame_rate, seed, list(tracks) if tracks else [])


# --- synthetic scenario generation ---

def _polyline_pos(vertices: np.ndarray, s: float) -> np.ndarray:
    """Position at arclength s along a polyline (clamped to its ends)."""
    seg = np.diff(vertices, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    s = min(max(s, 0.0), cum[-1])
    i = int(np.searchsorted(cum, s, side="right") - 1)
    i = min(i, len(seg) - 1)
    frac = (s - cum[i]) / seg_len[i] if seg_len[i] > 0 else 0.0
    return vertices[i] + frac * seg[i]


def _tracks_from_positions(per_vehicle_xy, spec, rng) -> list:
    """Wrap raw position arrays as Tracks, adding measurement noise."""
    n_frames = per_vehicle_xy[0].shape[0]
    dt = 1.0 / spec.frame_rate
    frames = np.arange(n_frames, dtype=np.int64)
    t = frames * dt
    tracks = []
    for vid, xy in enumerate(per_vehicle_xy):
        vxy = np.gradient(xy, dt, axis=0)
        if spec.noise_std > 0:
            xy = xy + rng.normal(0.0, spec.noise_std, size=xy.shape)
        tracks.append(Track(vid, frames.copy(), t.copy(), xy, vxy, "car"))
    return tracks


def generate_tracks(spec: SyntheticScenarioSpec) -> list:
    """Generate raw tracks for one synthetic scenario family.

    Deterministic: the same (spec, seed) regenerates bit-identical tracks.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_frames = int(round(spec.duration_s * spec.frame_rate)) + 1
    dt = 1.0 / spec.frame_rate
    tt = np.arange(n_frames) * dt
    lo, hi = spec.speed_range
    speeds = rng.uniform(lo, hi, size=spec.n_vehicles)

    positions = []
    if spec.family == "straight_flow":
        lane_y = np.array([0.0, 4.0, 8.0])
        for i in range(spec.n_vehicles):
            lane = i % 3
            x0 = -30.0 * (i // 3) + rng.uniform(-5.0, 5.0)
            xy = np.column_stack([x0 + speeds[i] * tt, np.full(n_frames, lane_y[lane])])
            positions.append(xy)

    elif spec.family == "merge":
        ang = math.radians(spec.merge_angle_deg)
        approach = 400.0
        outflow = 1200.0
        main = np.array([[-approach, 0.0], [0.0, 0.0], [outflow, 0.0]])
        ramp = np.array([[-approach * math.cos(ang), -approach * math.sin(ang)],
                         [0.0, 0.0], [outflow, 0.0]])
        for i in range(spec.n_vehicles):
            path = main if i % 2 == 0 else ramp
            s0 = 30.0 * (i // 2) + rng.uniform(0.0, 10.0)
            xy = np.array([_polyline_pos(path, s0 + speeds[i] * t) for t in tt])
            positions.append(xy)

    elif spec.family == "roundabout":
        base_r = 1.0 / spec.curvature
        for i in range(spec.n_vehicles):
            r = base_r + 3.5 * (i % 2)
            theta0 = 2.0 * math.pi * i / spec.n_vehicles + rng.uniform(-0.2, 0.2)
            theta = theta0 + (speeds[i] / r) * tt
            xy = np.column_stack([r * np.cos(theta), r * np.sin(theta)])
            positions.append(xy)

    elif spec.family == "intersection_stop":
        stop_line = -6.0
        decel = 2.0
        accel = 2.0
        for i in range(spec.n_vehicles):
            v_cruise = speeds[i]
            wait_s = 1.5 + rng.uniform(0.0, 2.0)
            s = stop_line - 40.0 - 40.0 * (i // 2) - rng.uniform(0.0, 10.0)
            v = v_cruise
            brake_dist = v_cruise ** 2 / (2.0 * decel)
            stopped_for = 0.0
            state = "cruise"
            ss = np.empty(n_frames)
            for k in range(n_frames):
                ss[k] = s
                if state == "cruise" and stop_line - brake_dist <= s < stop_line:
                    state = "braking"
                if state == "braking":
                    v = max(0.0, v - decel * dt)
                    if v == 0.0:
                        state = "stopped"
                elif state == "stopped":
                    stopped_for += dt
                    if stopped_for >= wait_s:
                        state = "go"
                elif state == "go" and v < v_cruise:
                    v = min(v_cruise, v + accel * dt)
                s += v * dt
            # even vehicles travel west->east, odd south->north; offset lanes cross
            if i % 2 == 0:
                xy = np.column_stack([ss, np.full(n_frames, -1.75)])
            else:
                xy = np.column_stack([np.full(n_frames, 1.75), ss])
            positions.append(xy)

    return _tracks_from_positions(positions, spec, rng)


def generate_synthetic(spec: SyntheticScenarioSpec, t_h: float = 2.0, t_f: float = 4.0,
                       n_max: int = 5, stride: int = 5, ratios=(0.7, 0.1, 0.2),
                       split_seed: int = 0, scenario_id: int = 0,
                       name: str = "") -> ScenarioDataset:
    """Generate a synthetic scenario and window it into a ScenarioDataset."""
    tracks = generate_tracks(spec)
    samples, _ = build_samples(tracks, t_h, t_f, spec.frame_rate, n_max=n_max, stride=stride)
    return split_dataset(samples, ratios, split_seed, scenario_id,
                         name or spec.family, spec.frame_rate, tracks=tracks)


# --- persistence ---

def pack_samples(samples) -> dict:
    """Stack samples into arrays for storage or batched evaluation."""
    return {
        "target_history": np.stack([s.target_history for s in samples]),
        "neighbor_histories": np.stack([s.neighbor_histories for s in samples]),
        "neighbor_mask": np.stack([s.neighbor_mask for s in samples]),
        "target_future": np.stack([s.target_future for s in samples]),
        "scenario_id": np.array([s.scenario_id for s in samples], dtype=np.int64),
        "target_track_id": np.array([s.target_track_id for s in samples], dtype=np.int64),
        "start_frame": np.array([s.start_frame for s in samples], dtype=np.int64),
    }


def unpack_samples(arrays: dict) -> list:
    n = arrays["target_history"].shape[0]
    return [
        TrajectorySample(
            target_history=arrays["target_history"][i],
            neighbor_histories=arrays["neighbor_histories"][i],
            neighbor_mask=arrays["neighbor_mask"][i].astype(bool),
            target_future=arrays["target_future"][i],
            scenario_id=int(arrays["scenario_id"][i]),
            target_track_id=int(arrays["target_track_id"][i]),
            start_frame=int(arrays["start_frame"][i]),
        )
        for i in range(n)
    ]


def save_dataset(dataset: ScenarioDataset, out_dir) -> dict:
    """Persist a dataset (manifest JSON + sample arrays); returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.savez(out / "samples.npz", **pack_samples(dataset.samples))
    manifest = {
        "scenario_id": dataset.scenario_id,
        "name": dataset.name,
        "frame_rate": dataset.frame_rate,
        "n_samples": len(dataset.samples),
        "split_seed": dataset.split_seed,
        "split_counts": {k: int(len(v)) for k, v in dataset.split.items()},
        "split_indices": {k: [int(i) for i in v] for k, v in dataset.split.items()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_dataset(in_dir) -> ScenarioDataset:
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    with np.load(src / "samples.npz") as arrays:
        samples = unpack_samples({k: arrays[k] for k in arrays.files})
    split = {k: np.asarray(v, dtype=np.int64) for k, v in manifest["split_indices"].items()}
    return ScenarioDataset(manifest["scenario_id"], manifest["name"], samples, split,
                           manifest["frame_rate"], manifest["split_seed"])
