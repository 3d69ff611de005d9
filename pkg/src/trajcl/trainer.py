"""Gradient-episodic continual trainer.

Each optimizer step computes the current-batch gradient g and one gradient
g_r per past task from its allocated memory pool. Whenever some <g, g_r> is
negative, g is projected to the closest vector (in squared L2) whose inner
products with every g_r are non-negative; the projection is found through the
small dual QP over the c-1 constraint multipliers.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import divergence as div
from . import metrics
from .data import ScenarioDataset
from .errors import EmptyBatch, NonFiniteInput, ShapeMismatch
from .memory import (AllocationPlan, ScenarioRepository, allocate, equal_plan,
                     repo_update, sample_memory)
from .nn import GradientVector, ParameterVector, save_params
from .predictor import (ModelConfig, forward_batch, loss_gradient,
                        mean_trajectories, new_model, nll_loss)

log = logging.getLogger(__name__)

MODES = ("vanilla", "gsm", "dgsm", "joint")


@dataclass
class TaskLossSet:
    """Per-past-task losses of the live model against the scenario-start snapshot."""

    current: dict                 # task id -> l(f_theta, m_r)
    reference: dict               # task id -> l(f'_theta, m_r), frozen per scenario
    snapshot_id: str = ""


@dataclass
class GradientMatrix:
    """Stacked past-task gradients, one row per task."""

    task_ids: list
    rows: np.ndarray              # (c-1, p)


@dataclass
class DualSolution:
    v: np.ndarray
    kkt_residual: float
    iterations: int
    converged: bool


@dataclass
class ProjectionResult:
    g_tilde: np.ndarray
    active: bool
    violations_before: list
    violations_after: list
    dual: DualSolution | None = None


@dataclass(frozen=True)
class TrainerConfig:
    lr: float = 0.01
    epochs: int = 5
    batch_size: int = 32
    gamma: float = 1e-3
    eps_feas: float = 1e-8
    qp_tol: float = 1e-8
    qp_max_iter: int = 10000
    memory_batch_mode: str = "resample"   # or "full"
    clip_norm: float | None = None        # clip gradient L2 norms before projecting
    seed: int = 0
    memory_seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("lr, epochs and batch_size must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.memory_batch_mode not in ("resample", "full"):
            raise ValueError("memory_batch_mode must be 'resample' or 'full'")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive when set")


def gradient_violations(g: np.ndarray, gmat: GradientMatrix) -> list:
    """Task ids whose gradient has a strictly negative inner product with g."""
    g = np.asarray(g, dtype=np.float64)
    if gmat.rows.shape[1] != g.shape[0]:
        raise ShapeMismatch(
            f"gradient has dim {g.shape[0]}, constraint rows have {gmat.rows.shape[1]}")
    dots = gmat.rows @ g
    return [gmat.task_ids[i] for i in np.nonzero(dots < 0.0)[0]]


def qp_solve_dual(ggt: np.ndarray, gg: np.ndarray, qp_tol: float = 1e-8,
                  max_iter: int = 10000) -> DualSolution:
    """Minimize (1/2) v' GG' v + (Gg)' v over v >= 0.

    Projected gradient with diagonal preconditioning, Nesterov acceleration
    and adaptive restart (GG' is often singular, where plain projected
    gradient crawls). Stops when the fixed-point residual
    ||v - max(0, v - grad)||_inf drops below qp_tol.
    """
    ggt = np.asarray(ggt, dtype=np.float64)
    gg = np.asarray(gg, dtype=np.float64)
    if not (np.all(np.isfinite(ggt)) and np.all(np.isfinite(gg))):
        raise NonFiniteInput("QP input contains non-finite values")
    r = gg.shape[0]
    d = np.maximum(np.diag(ggt), 1e-12)
    scale = 1.0 / np.sqrt(d)
    lips = float(np.linalg.eigvalsh(ggt * scale[:, None] * scale[None, :]).max())
    step = 1.0 / max(lips, 1e-12)

    v = np.zeros(r)
    y = v.copy()
    t = 1.0
    best_v, best_res = v, np.inf
    for it in range(1, max_iter + 1):
        grad = ggt @ v + gg
        residual = float(np.max(np.abs(v - np.maximum(0.0, v - grad))))
        if residual < best_res:
            best_res, best_v = residual, v
        if residual <= qp_tol:
            return DualSolution(v, residual, it - 1, True)
        grad_y = ggt @ y + gg
        v_new = np.maximum(0.0, y - step * grad_y / d)
        if float(np.dot(grad_y, v_new - v)) > 0.0:
            y = v_new.copy()
            t = 1.0
        else:
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            y = v_new + ((t - 1.0) / t_new) * (v_new - v)
            t = t_new
        v = v_new
    grad = ggt @ v + gg
    residual = float(np.max(np.abs(v - np.maximum(0.0, v - grad))))
    if residual < best_res:
        best_res, best_v = residual, v
    log.warning("QP dual did not reach tol %.1e in %d iterations (residual %.3e)",
                qp_tol, max_iter, best_res)
    return DualSolution(best_v, best_res, max_iter, False)


def project_gradient(g: np.ndarray, gmat: GradientMatrix, gamma: float = 0.0,
                     eps_feas: float = 1e-8, qp_tol: float = 1e-8,
                     max_iter: int = 10000) -> ProjectionResult:
    """GEM projection: g unchanged when feasible, else g_tilde = G'(v*+gamma) + g."""
    g = np.asarray(g, dtype=np.float64)
    before = gradient_violations(g, gmat)
    if not before:
        return ProjectionResult(g, False, [], [])
    ggt = gmat.rows @ gmat.rows.T
    gg = gmat.rows @ g
    dual = qp_solve_dual(ggt, gg, qp_tol, max_iter)
    g_tilde = gmat.rows.T @ (dual.v + gamma) + g
    dots = gmat.rows @ g_tilde
    norms = np.linalg.norm(gmat.rows, axis=1) * np.linalg.norm(g_tilde)
    after = [gmat.task_ids[i] for i in np.nonzero(dots < -eps_feas * np.maximum(norms, 1.0))[0]]
    return ProjectionResult(g_tilde, True, before, after, dual)


def previous_losses(theta, memory_batches: dict, loss_fn) -> dict:
    """Mean loss of theta on each past task's memory batch."""
    out = {}
    for task_id in sorted(memory_batches):
        batch = memory_batches[task_id]
        if len(batch) == 0:
            raise EmptyBatch(f"memory batch for task {task_id} is empty")
        out[task_id] = float(loss_fn(theta, batch))
    return out


@dataclass
class StepRecord:
    step: int
    epoch: int
    loss: float
    task_losses: dict
    n_violations: int
    projection_active: bool
    projection_delta: float


@dataclass
class TrainingHistory:
    records: list = field(default_factory=list)
    reference_losses: dict = field(default_factory=dict)
    final_task_losses: dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        task_ids = sorted(self.reference_losses)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "epoch", "loss"]
                            + [f"task_{t}_loss" for t in task_ids]
                            + ["violations", "projection_active", "projection_delta"])
            for rec in self.records:
                writer.writerow([rec.step, rec.epoch, f"{rec.loss:.8f}"]
                                + [f"{rec.task_losses.get(t, float('nan')):.8f}" for t in task_ids]
                                + [rec.n_violations, int(rec.projection_active),
                                   f"{rec.projection_delta:.8e}"])


def _values(g):
    return g.values if isinstance(g, GradientVector) else np.asarray(g, dtype=np.float64)


def _clip(g: np.ndarray, clip_norm: float | None) -> np.ndarray:
    if clip_norm is None:
        return g
    norm = float(np.linalg.norm(g))
    return g * (clip_norm / norm) if norm > clip_norm else g


def _apply_step(theta, g: np.ndarray, lr: float):
    if isinstance(theta, ParameterVector):
        return ParameterVector(theta.values - lr * g, theta.layout)
    return theta - lr * g


def train_scenario(theta, current_train_data, repo: ScenarioRepository | None,
                   plan: AllocationPlan | None, config: TrainerConfig,
                   loss_grad_fn, loss_fn) -> tuple:
    """Train on one scenario under GEM constraints from the allocated memory.

    loss_grad_fn(theta, batch) -> (loss, gradient); loss_fn(theta, batch) ->
    loss. With an empty plan this reduces exactly to plain minibatch SGD.
    """
    if len(current_train_data) == 0:
        raise EmptyBatch("no training data for the current scenario")
    rng = np.random.default_rng(config.seed)
    pools = {}
    if plan is not None and plan.counts:
        pools = sample_memory(repo, plan, seed=config.memory_seed)
    task_ids = sorted(pools)

    history = TrainingHistory()
    history.reference_losses = previous_losses(theta, pools, loss_fn) if pools else {}

    n = len(current_train_data)
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = [current_train_data[i] for i in order[start:start + config.batch_size]]
            loss, g = loss_grad_fn(theta, batch)
            g = _clip(_values(g), config.clip_norm)

            task_losses = {}
            rows = []
            for r in task_ids:
                pool = pools[r]
                if config.memory_batch_mode == "full" or len(pool) <= config.batch_size:
                    mem_batch = pool
                else:
                    idx = rng.choice(len(pool), size=config.batch_size, replace=False)
                    mem_batch = [pool[i] for i in idx]
                l_r, g_r = loss_grad_fn(theta, mem_batch)
                task_losses[r] = float(l_r)
                # row scaling leaves the feasible cone <z, g_r> >= 0 unchanged
                rows.append(_clip(_values(g_r), config.clip_norm))

            if rows:
                gmat = GradientMatrix(task_ids, np.stack(rows))
                proj = project_gradient(g, gmat, config.gamma, config.eps_feas,
                                        config.qp_tol, config.qp_max_iter)
                # conflicting constraints can blow up ||g_tilde||; rescaling
                # keeps the update inside the trust region without leaving
                # the feasible cone (positively homogeneous)
                g_use = _clip(proj.g_tilde, config.clip_norm)
                record = StepRecord(step, epoch, float(loss), task_losses,
                                    len(proj.violations_before), proj.active,
                                    float(np.linalg.norm(proj.g_tilde - g)))
            else:
                g_use = g
                record = StepRecord(step, epoch, float(loss), {}, 0, False, 0.0)
            theta = _apply_step(theta, g_use, config.lr)
            history.records.append(record)
            step += 1

    history.final_task_losses = previous_losses(theta, pools, loss_fn) if pools else {}
    return theta, history


# --- full continual runs ---

@dataclass
class RunArtifacts:
    mode: str
    eval_history: list = field(default_factory=list)     # one EvalReport per phase
    plans: dict = field(default_factory=dict)            # phase index -> AllocationPlan
    divergence_reports: dict = field(default_factory=dict)
    histories: dict = field(default_factory=dict)        # phase index -> TrainingHistory
    checkpoints: dict = field(default_factory=dict)      # phase index -> path or None
    out_dir: str | None = None

    @property
    def total_memory_allocated(self) -> int:
        return sum(p.total for p in self.plans.values())

    @property
    def final_report(self):
        return self.eval_history[-1]


def derive_seed(base: int, *parts) -> int:
    return int(np.random.SeedSequence([int(base)] + [int(p) for p in parts])
               .generate_state(1)[0])


def predictor_loss_fns(model_config: ModelConfig) -> tuple:
    def grad_fn(theta, batch):
        return loss_gradient(theta, batch, model_config)

    def loss_fn(theta, batch):
        return nll_loss(theta, batch, model_config)

    return grad_fn, loss_fn


def evaluate_model(theta, learned: list, model_config: ModelConfig, mode: str,
                   checkpoint_id: str = "") -> "metrics.EvalReport":
    """ADE/FDE of the mean trajectory on every learned scenario's test split."""
    per_scenario = {}
    for ds in learned:
        test = ds.subset("test")
        params = forward_batch(theta, test, model_config)
        pred = mean_trajectories(params)
        truth = np.stack([s.target_future for s in test])
        per_scenario[ds.scenario_id] = {
            "ade": metrics.ade(pred, truth),
            "fde": metrics.fde(pred, truth),
            "n_ts": len(test),
        }
    return metrics.EvalReport(
        mode=mode,
        checkpoint_id=checkpoint_id,
        per_scenario=per_scenario,
        learned_order=[ds.scenario_id for ds in learned],
        average_ade=metrics.average_error([v["ade"] for v in per_scenario.values()]),
        average_fde=metrics.average_error([v["fde"] for v in per_scenario.values()]),
    )


def run_continual(scenarios: list, config, mode: str, out_dir=None) -> RunArtifacts:
    """Train through a scenario sequence in one of the four modes.

    vanilla: sequential fine-tuning without memory. gsm: equal per-task
    memory m_max = floor(M_cl/(c-1)). dgsm: memory proportional to measured
    weighted-CKLD. joint: one training pass over all scenarios' data at once.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if len(scenarios) == 0:
        raise ValueError("need at least one scenario")
    model_config = config.model_config()
    loss_grad_fn, loss_fn = predictor_loss_fns(model_config)
    theta = new_model(model_config, config.model_seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(
            {**config.to_dict(), "mode": mode}, indent=2, sort_keys=True))
    artifacts = RunArtifacts(mode=mode, out_dir=str(out) if out else None)

    def phase_trainer_config(phase: int) -> TrainerConfig:
        return TrainerConfig(
            lr=config.lr, epochs=config.epochs, batch_size=config.batch_size,
            gamma=config.gamma, eps_feas=config.eps_feas, qp_tol=config.qp_tol,
            memory_batch_mode=config.memory_batch_mode, clip_norm=config.clip_norm,
            seed=derive_seed(config.train_seed, phase),
            memory_seed=derive_seed(config.memory_seed, phase),
        )

    def finish_phase(phase: int, theta, history, learned: list):
        checkpoint_id = f"phase-{phase:02d}"
        report = evaluate_model(theta, learned, model_config, mode, checkpoint_id)
        artifacts.eval_history.append(report)
        artifacts.histories[phase] = history
        if out is not None:
            save_params(theta, out / f"checkpoint_{phase:02d}.json",
                        meta={"mode": mode, "phase": phase,
                              "normalize": model_config.normalize})
            (out / f"eval_{phase:02d}.json").write_text(
                json.dumps(report.to_dict(), indent=2, sort_keys=True))
            if history is not None:
                history.write_csv(out / f"training_log_{phase:02d}.csv")
            artifacts.checkpoints[phase] = str(out / f"checkpoint_{phase:02d}.json")

    if mode == "joint":
        all_train = [s for ds in scenarios for s in ds.subset("train")]
        theta, history = train_scenario(theta, all_train, None, None,
                                        phase_trainer_config(0), loss_grad_fn, loss_fn)
        finish_phase(0, theta, history, list(scenarios))
        return artifacts

    repo = ScenarioRepository(config.memory_capacity) if mode in ("gsm", "dgsm") else None
    for c_idx, ds in enumerate(scenarios, start=1):
        phase = c_idx - 1
        train_samples = ds.subset("train")
        if repo is not None:
            cases = div.build_cases(train_samples, k=config.k,
                                    lambda_decay=config.lambda_decay,
                                    downsample=config.downsample)
            repo_update(repo, ds.scenario_id, train_samples,
                        list(zip(cases[0], cases[1])),
                        seed=derive_seed(config.repo_seed, phase))

        plan = None
        if c_idx > 1 and mode in ("gsm", "dgsm"):
            past_ids = [s.scenario_id for s in scenarios[:phase]]
            if mode == "gsm":
                if config.per_task_memory is not None:
                    plan = AllocationPlan({r: config.per_task_memory for r in past_ids},
                                          config.per_task_memory,
                                          {r: 1.0 for r in past_ids})
                else:
                    plan = equal_plan(past_ids, config.m_cl, c_idx)
            else:
                case_sets = {}
                for sid in [ds.scenario_id] + past_ids:
                    stored = repo.buffers[sid].divergence
                    case_sets[sid] = (np.stack([c[0] for c in stored]),
                                      np.stack([c[1] for c in stored]))
                report = div.measure_divergence(
                    case_sets, n_components=config.mdn_components,
                    epochs=config.mdn_epochs, lr=config.mdn_lr, n_mc=config.n_mc,
                    w1=config.w1, seed=derive_seed(config.divergence_seed, phase),
                    condition_cap=config.condition_cap,
                    mdn_config=config.mdn_config())
                names = list(case_sets)
                cur = names.index(ds.scenario_id)
                weighted = {sid: float(report.weighted[cur, names.index(sid)])
                            for sid in past_ids}
                plan = allocate(weighted, config.m_cl, c_idx)
                artifacts.divergence_reports[phase] = report
                if out is not None:
                    report.save(out / f"divergence_{phase:02d}.json")
            artifacts.plans[phase] = plan
            if out is not None:
                (out / f"plan_{phase:02d}.json").write_text(
                    json.dumps(plan.to_dict(), indent=2, sort_keys=True))

        theta, history = train_scenario(theta, train_samples, repo, plan,
                                        phase_trainer_config(phase),
                                        loss_grad_fn, loss_fn)
        finish_phase(phase, theta, history, list(scenarios[:c_idx]))

    if out is not None:
        (out / "manifest.json").write_text(json.dumps({
            "mode": mode,
            "phases": len(artifacts.eval_history),
            "scenario_ids": [ds.scenario_id for ds in scenarios],
            "scenario_names": [ds.name for ds in scenarios],
            "total_memory_allocated": artifacts.total_memory_allocated,
        }, indent=2, sort_keys=True))
    return artifacts
