"""Bounded scenario repository and divergence-driven memory allocation.

The repository keeps at most M items in total: each of the c scenarios seen
so far holds at most floor(M/c) items, split between prediction samples and
divergence cases. The allocator turns weighted-CKLD values into per-past-task
memory counts, giving the most divergent task the full per-task budget.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadCapacity, CapacityZero, UnknownScenario

log = logging.getLogger(__name__)

DEFAULT_ALLOCATION_FLOOR = 10   # minimum samples allocated per past task


@dataclass
class ScenarioBuffer:
    prediction: list = field(default_factory=list)
    divergence: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.prediction) + len(self.divergence)


@dataclass
class ScenarioRepository:
    """Per-scenario memory buffers under one total capacity M."""

    capacity: int
    prediction_fraction: float = 0.5
    buffers: dict = field(default_factory=dict)   # scenario_id -> ScenarioBuffer

    def __post_init__(self):
        if self.capacity <= 0:
            raise CapacityZero(f"capacity must be positive, got {self.capacity}")
        if not (0.0 < self.prediction_fraction < 1.0):
            raise ValueError("prediction_fraction must be in (0, 1)")

    @property
    def n_scenarios(self) -> int:
        return len(self.buffers)

    @property
    def total_stored(self) -> int:
        return sum(len(b) for b in self.buffers.values())

    def per_scenario_caps(self) -> tuple:
        c = max(self.n_scenarios, 1)
        pred = int(self.capacity * self.prediction_fraction) // c
        div = int(self.capacity * (1.0 - self.prediction_fraction)) // c
        return pred, div


def _subsample(items: list, cap: int, rng: np.random.Generator) -> list:
    if len(items) <= cap:
        return list(items)
    keep = np.sort(rng.choice(len(items), size=cap, replace=False))
    return [items[i] for i in keep]


def repo_update(repo: ScenarioRepository, scenario_id: int, prediction_samples,
                divergence_cases=(), seed: int = 0) -> ScenarioRepository:
    """Store a scenario's data and shrink all buffers to the new per-scenario cap.

    A scenario id seen before merges into its existing buffer without
    increasing the scenario count. Shrinking keeps a uniform random subset of
    what a buffer already holds, so kept items are always a subset of the
    previous contents.
    """
    if repo.capacity <= 0:
        raise CapacityZero("repository has zero capacity")
    rng = np.random.default_rng(seed)
    if scenario_id in repo.buffers:
        buf = repo.buffers[scenario_id]
        buf.prediction.extend(prediction_samples)
        buf.divergence.extend(divergence_cases)
    else:
        repo.buffers[scenario_id] = ScenarioBuffer(list(prediction_samples),
                                                   list(divergence_cases))
    pred_cap, div_cap = repo.per_scenario_caps()
    for sid in sorted(repo.buffers):
        buf = repo.buffers[sid]
        buf.prediction = _subsample(buf.prediction, pred_cap, rng)
        buf.divergence = _subsample(buf.divergence, div_cap, rng)
    return repo


@dataclass
class AllocationPlan:
    """Per-past-task memory counts derived from weighted-CKLD values."""

    counts: dict                 # scenario_id -> allocated sample count
    m_max: int
    weighted_cklds: dict

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def to_dict(self) -> dict:
        return {
            "counts": {str(k): int(v) for k, v in self.counts.items()},
            "m_max": self.m_max,
            "weighted_cklds": {str(k): float(v) for k, v in self.weighted_cklds.items()},
            "total": self.total,
        }


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def allocate(weighted_cklds: dict, m_cl: int, c: int,
             m_floor: int = DEFAULT_ALLOCATION_FLOOR) -> AllocationPlan:
    """Memory counts proportional to weighted-CKLD, capped at m_max per task.

    m_max = floor(M_cl / (c-1)); the most divergent past task receives exactly
    m_max, the others round-half-up of the proportional share, floored at
    m_floor so no task's constraint disappears entirely.
    """
    if c < 2:
        raise BadCapacity(f"allocation needs at least one past task (c={c})")
    if m_cl <= 0:
        raise BadCapacity(f"M_cl must be positive, got {m_cl}")
    if len(weighted_cklds) != c - 1:
        raise ValueError(f"expected {c - 1} weighted-CKLD values, got {len(weighted_cklds)}")
    values = {k: float(v) for k, v in weighted_cklds.items()}
    if any(v < 0 for v in values.values()):
        raise ValueError("weighted-CKLD values must be non-negative")

    m_max = m_cl // (c - 1)
    vmax = max(values.values())
    if vmax == 0.0:
        warnings.warn("all weighted-CKLD values are zero; falling back to equal allocation")
        counts = {k: m_max for k in values}
    else:
        counts = {
            k: min(m_max, max(min(m_floor, m_max), _round_half_up(m_max * v / vmax)))
            for k, v in values.items()
        }
    return AllocationPlan(counts, m_max, values)


def equal_plan(past_scenarios, m_cl: int, c: int) -> AllocationPlan:
    """Non-dynamic variant: every past task gets m_max = floor(M_cl/(c-1))."""
    if c < 2:
        raise BadCapacity(f"allocation needs at least one past task (c={c})")
    if m_cl <= 0:
        raise BadCapacity(f"M_cl must be positive, got {m_cl}")
    m_max = m_cl // (c - 1)
    return AllocationPlan({r: m_max for r in past_scenarios}, m_max,
                          {r: 1.0 for r in past_scenarios})


def save_repository(repo: ScenarioRepository, out_dir, seeds: dict | None = None) -> None:
    """Persist the repository: manifest plus per-scenario sample/case files."""
    from .data import pack_samples
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "capacity": repo.capacity,
        "prediction_fraction": repo.prediction_fraction,
        "n_scenarios": repo.n_scenarios,
        "scenario_ids": sorted(repo.buffers),
        "counts": {str(s): {"prediction": len(b.prediction), "divergence": len(b.divergence)}
                   for s, b in repo.buffers.items()},
        "seeds": seeds or {},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    for sid in sorted(repo.buffers):
        buf = repo.buffers[sid]
        if buf.prediction:
            np.savez(out / f"scenario_{sid}_samples.npz", **pack_samples(buf.prediction))
        if buf.divergence:
            np.savez(out / f"scenario_{sid}_cases.npz",
                     conditions=np.stack([np.asarray(c[0]) for c in buf.divergence]),
                     futures=np.stack([np.asarray(c[1]) for c in buf.divergence]))


def load_repository(in_dir) -> ScenarioRepository:
    from .data import unpack_samples
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    repo = ScenarioRepository(manifest["capacity"], manifest["prediction_fraction"])
    for sid in manifest["scenario_ids"]:
        buf = ScenarioBuffer()
        samples_path = src / f"scenario_{sid}_samples.npz"
        if samples_path.exists():
            with np.load(samples_path) as arrays:
                buf.prediction = unpack_samples({k: arrays[k] for k in arrays.files})
        cases_path = src / f"scenario_{sid}_cases.npz"
        if cases_path.exists():
            with np.load(cases_path) as arrays:
                buf.divergence = list(zip(arrays["conditions"], arrays["futures"]))
        repo.buffers[int(sid)] = buf
    return repo


def sample_memory(repo: ScenarioRepository, plan: AllocationPlan, seed: int = 0) -> dict:
    """Draw each past task's allocated batch uniformly without replacement."""
    rng = np.random.default_rng(seed)
    batches = {}
    for sid in sorted(plan.counts):
        if sid not in repo.buffers:
            raise UnknownScenario(f"scenario {sid} is not in the repository")
        pool = repo.buffers[sid].prediction
        want = plan.counts[sid]
        if want > len(pool):
            log.warning("scenario %s: requested %d memory samples but buffer holds %d",
                        sid, want, len(pool))
            want = len(pool)
        idx = np.sort(rng.choice(len(pool), size=want, replace=False))
        batches[sid] = [pool[i] for i in idx]
    return batches
