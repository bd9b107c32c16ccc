"""Alternating robust MAP optimization of a scene layout.

Each outer iteration runs two L-BFGS-B inner solves: first over the
relaxed indicators (clamped back into [0, 1] after the step) with
attributes fixed, then over all slot attributes with indicators fixed.
Every inner result is accepted only if it lowers the objective, so the
recorded objective sequence is non-increasing by construction.

A converged run can still sit in a poor basin when a slot that was
predicted present with nonsense attributes gets relocated somewhere
plausible and drags the rest of the layout along. Such slots are
recognizable afterwards: they end up active with a fully saturated unary
robust term (their own prediction gives them no support). Because the
count prior only pins the per-class indicator sums, the offending mass
may have migrated to a different slot of the same class during the run,
so the saturated slot itself need not be the bad prediction. The solver
therefore restarts from the predictions once per predicted-active slot
of each saturated slot's class, with that slot clamped off, and keeps
the best restart only if it reaches a lower objective. The final scene
hardens indicators at 0.5.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize

from .objective import HyperParams, ObjectiveCore, PredictionBundle
from .scene import SceneLayout

__all__ = ["OptimizeConfig", "OptimizeReport", "synchronize"]


@dataclass(frozen=True)
class OptimizeConfig:
    """Settings for the alternating solver.

    `lbfgs_max_evals` caps function/gradient evaluations per inner solve;
    a tuple gives a per-outer-iteration schedule (the last entry repeats).
    The default front-loads the budget: early iterations do the heavy
    rearranging, later ones only polish. `restart_rounds` bounds the
    clamped restarts for saturated active slots; `saturation_threshold`
    is the unary robust-term value above which an active slot counts as
    unsupported by its own prediction.
    """

    outer_iters: int = 25
    lbfgs_memory: int = 10
    lbfgs_max_evals: tuple = (150, 70, 35, 20)
    lbfgs_ftol: float = 1e-10
    grad_tol: float = 1e-6
    harden_threshold: float = 0.5
    early_stop_tol: float = 1e-8
    early_stop_patience: int = 3
    restart_rounds: int = 2
    restart_outer_iters: int = 8
    restart_max_evals: tuple = (60, 30, 18, 12)
    saturation_threshold: float = 0.9

    def __post_init__(self):
        if self.outer_iters < 1:
            raise ValueError("outer_iters must be >= 1")
        if not 0.0 < self.harden_threshold < 1.0:
            raise ValueError("harden_threshold must lie in (0, 1)")
        if not 0.0 < self.saturation_threshold < 1.0:
            raise ValueError("saturation_threshold must lie in (0, 1)")
        if self.restart_rounds < 0:
            raise ValueError("restart_rounds must be >= 0")

    def max_evals_at(self, outer_iter: int) -> int:
        sched = self.lbfgs_max_evals
        if np.isscalar(sched):
            return int(sched)
        return int(sched[min(outer_iter, len(sched) - 1)])

    def to_dict(self) -> dict:
        return {
            "outer_iters": self.outer_iters,
            "lbfgs_memory": self.lbfgs_memory,
            "lbfgs_max_evals": list(self.lbfgs_max_evals)
            if not np.isscalar(self.lbfgs_max_evals)
            else self.lbfgs_max_evals,
            "lbfgs_ftol": self.lbfgs_ftol,
            "grad_tol": self.grad_tol,
            "harden_threshold": self.harden_threshold,
            "early_stop_tol": self.early_stop_tol,
            "early_stop_patience": self.early_stop_patience,
            "restart_rounds": self.restart_rounds,
            "restart_outer_iters": self.restart_outer_iters,
            "restart_max_evals": list(self.restart_max_evals)
            if not np.isscalar(self.restart_max_evals)
            else self.restart_max_evals,
            "saturation_threshold": self.saturation_threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizeConfig":
        d = dict(d)
        for key in ("lbfgs_max_evals", "restart_max_evals"):
            if isinstance(d.get(key), list):
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class OptimizeReport:
    """Trace of one synchronization run.

    `objectives[0]` is the value at the initial scene; entry i+1 is the
    value after outer iteration i (entries past the base run come from
    accepted restarts and only ever lower the objective further).
    `accepted_attr` / `accepted_ind` record whether each inner solve of
    the base run improved the objective.
    """

    objectives: tuple
    accepted_attr: tuple
    accepted_ind: tuple
    outer_iters_run: int
    stopped_early: bool
    restarts_tried: int
    restarts_accepted: int
    wall_seconds: float

    def to_dict(self) -> dict:
        return {
            "objectives": list(self.objectives),
            "accepted_attr": list(self.accepted_attr),
            "accepted_ind": list(self.accepted_ind),
            "outer_iters_run": self.outer_iters_run,
            "stopped_early": self.stopped_early,
            "restarts_tried": self.restarts_tried,
            "restarts_accepted": self.restarts_accepted,
            "wall_seconds": self.wall_seconds,
        }


def _lbfgs(fun, x0, config, max_evals, bounds=None):
    res = minimize(
        fun,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={
            "maxcor": config.lbfgs_memory,
            "maxfun": max_evals,
            "gtol": config.grad_tol,
            "ftol": config.lbfgs_ftol,
        },
    )
    return res.x


def _attr_step(core, attrs, z, config, max_evals):
    shape = attrs.shape

    def fun(x):
        f, g = core.value_grad_attrs(x.reshape(shape), z)
        return f, g.ravel()

    return _lbfgs(fun, attrs.ravel(), config, max_evals).reshape(shape)


def _indicator_step(core, attrs, z, config, max_evals, clamp_off=None):
    def fun(x):
        f, g = core.value_grad_z(attrs, x)
        return f, g

    bounds = [(0.0, 1.0)] * len(z)
    if clamp_off is not None:
        for i in clamp_off:
            bounds[i] = (0.0, 0.0)
    x = _lbfgs(fun, z, config, max_evals, bounds=bounds)
    x = np.clip(x, 0.0, 1.0)
    if clamp_off is not None:
        x[list(clamp_off)] = 0.0
    return x


def _alternate(core, attrs, z, config, clamp_off=None):
    """The alternating descent loop from one starting point.

    Returns (attrs, z, objective trace, attr/indicator acceptance flags,
    iterations run, stopped_early).
    """
    f_cur = core.value(attrs, z)
    objectives = [f_cur]
    acc_a, acc_i = [], []
    flat = 0
    stopped_early = False
    iters_run = 0

    for it in range(config.outer_iters):
        iters_run += 1
        max_evals = config.max_evals_at(it)

        # Indicators first: implausible slots are switched off while their
        # attributes still carry the implausible predicted values.
        cand = _indicator_step(core, attrs, z, config, max_evals, clamp_off)
        f_cand = core.value(attrs, cand)
        if f_cand < f_cur:
            z, f_cur = cand, f_cand
            acc_i.append(True)
        else:
            acc_i.append(False)

        cand = _attr_step(core, attrs, z, config, max_evals)
        f_cand = core.value(cand, z)
        if f_cand < f_cur:
            attrs, f_cur = cand, f_cand
            acc_a.append(True)
        else:
            acc_a.append(False)

        objectives.append(f_cur)
        if objectives[-2] - objectives[-1] < config.early_stop_tol:
            flat += 1
            if flat >= config.early_stop_patience:
                stopped_early = True
                break
        else:
            flat = 0

    return attrs, z, objectives, acc_a, acc_i, iters_run, stopped_early


def _saturated_active_slots(core, attrs, z, config):
    """Active slots whose unary robust term is fully saturated."""
    T = core._terms(attrs, z)
    on = z > config.harden_threshold
    return [int(i) for i in np.nonzero(on & (T["rho_u"] > config.saturation_threshold))[0]]


def synchronize(
    hyper: HyperParams,
    preds: PredictionBundle,
    init: SceneLayout | None = None,
    config: OptimizeConfig | None = None,
):
    """Optimize a scene against predictions; returns (scene, report).

    `init` defaults to the node predictions themselves. The returned scene
    has hard indicators; the report's objective trace refers to the soft
    iterate before hardening.
    """
    config = config or OptimizeConfig()
    core = ObjectiveCore(hyper, preds)
    if init is None:
        init = preds.node_preds
    if init.class_table != preds.class_table:
        raise ValueError("init scene uses a different class table")

    t0 = time.perf_counter()
    attrs, z, objectives, acc_a, acc_i, iters_run, stopped_early = _alternate(
        core, init.attrs.copy(), init.indicators.copy(), config
    )
    f_cur = objectives[-1]

    restarts_tried = 0
    restarts_accepted = 0
    clamped: set[int] = set()
    cls_idx = np.asarray(preds.class_table.class_index_per_slot())
    pred_on = init.indicators > config.harden_threshold
    rcfg = replace(
        config,
        outer_iters=config.restart_outer_iters,
        lbfgs_max_evals=config.restart_max_evals,
    )
    for _ in range(config.restart_rounds):
        suspects = _saturated_active_slots(core, attrs, z, config)
        candidates: set[int] = set()
        for s in suspects:
            if s in clamped:
                continue
            candidates.update(
                int(i) for i in np.nonzero((cls_idx == cls_idx[s]) & pred_on)[0]
            )
            candidates.add(int(s))
        candidates -= clamped
        best = None
        for i in sorted(candidates):
            restarts_tried += 1
            trial_clamp = clamped | {i}
            r_attrs, r_z, r_obj, *_ = _alternate(
                core,
                init.attrs.copy(),
                init.indicators.copy(),
                rcfg,
                clamp_off=trial_clamp,
            )
            if r_obj[-1] < f_cur and (best is None or r_obj[-1] < best[0]):
                best = (r_obj[-1], r_attrs, r_z, trial_clamp)
        if best is None:
            break
        f_cur, attrs, z, clamped = best
        objectives.append(f_cur)
        restarts_accepted += 1

    scene = SceneLayout(preds.class_table, attrs, z).harden(config.harden_threshold)
    report = OptimizeReport(
        tuple(objectives),
        tuple(acc_a),
        tuple(acc_i),
        iters_run,
        stopped_early,
        restarts_tried,
        restarts_accepted,
        time.perf_counter() - t0,
    )
    return scene, report
