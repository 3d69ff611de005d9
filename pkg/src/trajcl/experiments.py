"""Desk-scale experiment harnesses over synthetic scenarios.

Three protocols: (I) how divergence between two scenarios relates to the
error increment after learning the second, (II) how per-task memory size
affects retention, (III) continual modes compared over a scenario sequence.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import divergence as div
from .config import RunConfig
from .data import SyntheticScenarioSpec, generate_synthetic
from .trainer import derive_seed, run_continual

log = logging.getLogger(__name__)

DEFAULT_FAMILIES = ("straight_flow", "merge", "roundabout")


def desk_config(**overrides) -> RunConfig:
    """A RunConfig sized for minutes-scale synthetic runs."""
    base = dict(
        memory_capacity=4000,
        m_cl=300,
        mdn_components=2,
        mdn_epochs=10,
        n_mc=100,
        condition_cap=100,
        lr=0.01,
        epochs=25,
        batch_size=32,
        clip_norm=25.0,
    )
    base.update(overrides)
    return RunConfig(**base)


def synthetic_sequence(families, base_seed: int, n_vehicles: int = 10,
                       duration_s: float = 40.0, stride: int = 3) -> list:
    """One ScenarioDataset per family, seeded from base_seed."""
    out = []
    for idx, family in enumerate(families):
        seed = derive_seed(base_seed, idx)
        spec = SyntheticScenarioSpec(family=family, n_vehicles=n_vehicles,
                                     seed=seed, duration_s=duration_s)
        out.append(generate_synthetic(spec, stride=stride, scenario_id=idx + 1,
                                      split_seed=seed, name=family))
    return out


@dataclass
class ComparisonResult:
    """Final evaluation per mode per seed plus memory bookkeeping."""

    modes: tuple
    seeds: tuple
    average_ade: dict = field(default_factory=dict)   # (mode, seed) -> float
    average_fde: dict = field(default_factory=dict)
    per_scenario: dict = field(default_factory=dict)  # (mode, seed) -> {sid: ade}
    memory_allocated: dict = field(default_factory=dict)
    eval_histories: dict = field(default_factory=dict)

    def mean_ade(self, mode: str) -> float:
        return float(np.mean([self.average_ade[(mode, s)] for s in self.seeds]))

    def wins(self, mode: str, against: str) -> int:
        return sum(1 for s in self.seeds
                   if self.average_ade[(mode, s)] < self.average_ade[(against, s)])


def run_forgetting_comparison(seeds=(0, 1, 2, 3, 4), families=DEFAULT_FAMILIES,
                              modes=("vanilla", "gsm", "dgsm"),
                              config: RunConfig | None = None) -> ComparisonResult:
    """Protocol III analogue: continual modes over one scenario sequence."""
    base = config or desk_config()
    result = ComparisonResult(tuple(modes), tuple(seeds))
    for seed in seeds:
        scenarios = synthetic_sequence(families, base_seed=derive_seed(1000, seed))
        for mode in modes:
            cfg = RunConfig(**{**base.to_dict(), "mode": mode,
                               "model_seed": seed, "train_seed": seed,
                               "memory_seed": seed, "repo_seed": seed,
                               "divergence_seed": seed})
            art = run_continual(scenarios, cfg, mode)
            rep = art.final_report
            result.average_ade[(mode, seed)] = rep.average_ade
            result.average_fde[(mode, seed)] = rep.average_fde
            result.per_scenario[(mode, seed)] = {
                sid: v["ade"] for sid, v in rep.per_scenario.items()}
            result.memory_allocated[(mode, seed)] = art.total_memory_allocated
            result.eval_histories[(mode, seed)] = art.eval_history
            log.info("forgetting-comparison mode=%s seed=%s avg ADE %.3f",
                     mode, seed, rep.average_ade)
    return result


def run_memory_sweep(seeds=(0, 1, 2, 3, 4), per_task_memories=(0, 100, 500),
                     families=DEFAULT_FAMILIES,
                     config: RunConfig | None = None) -> dict:
    """Protocol II analogue: retention vs fixed per-task memory size.

    Memory 0 runs the plain sequential baseline; positive sizes run the
    equal-allocation continual mode with that many samples per past task.
    Past-task gradients use the full allocation so retention scales with the
    memory volume rather than with a fixed resampled batch.
    """
    base = config or desk_config(memory_batch_mode="full")
    mean_ade = {}
    per_seed = {}
    for m in per_task_memories:
        values = []
        for seed in seeds:
            scenarios = synthetic_sequence(families, base_seed=derive_seed(1000, seed))
            mode = "vanilla" if m == 0 else "gsm"
            cfg = RunConfig(**{**base.to_dict(), "mode": mode,
                               "per_task_memory": m if m > 0 else None,
                               "model_seed": seed, "train_seed": seed,
                               "memory_seed": seed, "repo_seed": seed})
            art = run_continual(scenarios, cfg, mode)
            values.append(art.final_report.average_ade)
            log.info("memory-sweep m=%d seed=%s avg ADE %.3f", m, seed, values[-1])
        per_seed[m] = values
        mean_ade[m] = float(np.mean(values))
    return {"mean_ade": mean_ade, "per_seed": per_seed,
            "per_task_memories": tuple(per_task_memories), "seeds": tuple(seeds)}


def rank_correlation(x, y) -> float:
    """Spearman rank correlation (average ranks on ties)."""
    def ranks(a):
        a = np.asarray(a, dtype=np.float64)
        order = np.argsort(a, kind="stable")
        r = np.empty(len(a))
        r[order] = np.arange(1, len(a) + 1)
        for val in np.unique(a):
            idx = np.nonzero(a == val)[0]
            if len(idx) > 1:
                r[idx] = r[idx].mean()
        return r
    rx, ry = ranks(x), ranks(y)
    rx, ry = rx - rx.mean(), ry - ry.mean()
    denom = np.sqrt((rx ** 2).sum() * (ry ** 2).sum())
    return float((rx * ry).sum() / denom) if denom > 0 else 0.0


def run_divergence_correlation(pair_families=None, seed: int = 0,
                               config: RunConfig | None = None) -> dict:
    """Protocol I analogue over two-scenario sequences of varied divergence.

    For each (first, second) pair: measure the weighted CKLD between the two
    scenarios, train the plain sequential baseline through both, and record
    the ADE increment on the first scenario. Returns the pairs plus the rank
    correlation between divergence and increment.
    """
    if pair_families is None:
        pair_families = (("straight_flow", "straight_flow"),
                         ("straight_flow", "merge"),
                         ("straight_flow", "roundabout"))
    base = config or desk_config()
    divergences, increments, detail = [], [], []
    for idx, (fam_a, fam_b) in enumerate(pair_families):
        scenarios = synthetic_sequence((fam_a, fam_b), base_seed=derive_seed(2000, seed, idx))
        cases = {
            ds.scenario_id: div.build_cases(ds.subset("train"), k=base.k,
                                            lambda_decay=base.lambda_decay,
                                            downsample=base.downsample)
            for ds in scenarios
        }
        report = div.measure_divergence(
            cases, n_components=base.mdn_components, epochs=base.mdn_epochs,
            lr=base.mdn_lr, n_mc=base.n_mc, w1=base.w1,
            seed=derive_seed(base.divergence_seed, idx),
            condition_cap=base.condition_cap, mdn_config=base.mdn_config())
        wt = float(report.weighted[1, 0])   # second (current) scenario highlighted

        cfg = RunConfig(**{**base.to_dict(), "mode": "vanilla",
                           "model_seed": seed, "train_seed": seed})
        art = run_continual(scenarios, cfg, "vanilla")
        sid = scenarios[0].scenario_id
        then = art.eval_history[0].per_scenario[sid]["ade"]
        now = art.eval_history[-1].per_scenario[sid]["ade"]
        divergences.append(wt)
        increments.append(now - then)
        detail.append({"pair": (fam_a, fam_b), "weighted_ckld": wt,
                       "ade_then": then, "ade_now": now, "increment": now - then})
        log.info("divergence-correlation %s->%s wtCKLD %.2f increment %.3f",
                 fam_a, fam_b, wt, now - then)
    return {
        "pairs": detail,
        "divergences": divergences,
        "increments": increments,
        "spearman": rank_correlation(divergences, increments),
    }
