"""Closed-loop evaluation suites: success rate and completion time.

Episodes are fresh-seeded per (eval seed, suite, index), never drawn from the
training set. Rollouts are independent, so they may fan out to a thread pool;
results are merged by episode index, which makes the report identical for any
worker count. SR gets a bootstrap standard deviation over 1000 resamples;
completion time is reported over successful episodes only.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .sim import (SUITES, VARIANTS_PER_SUITE, SimConfig, TaskSpec,
                  evaluate_rollout, make_task, scene_seed_for)

BOOTSTRAP_RESAMPLES = 1000
_BOOTSTRAP_SEED = 20260101


class EvalError(RuntimeError):
    pass


@dataclass
class EpisodeRow:
    index: int
    suite: str
    variant: int
    scene_seed: int
    success: bool
    completion_time: float
    steps: int
    failure_reason: str
    trace: list = field(repr=False, default_factory=list)

    def csv_row(self) -> list:
        return [self.index, self.suite, self.variant, self.scene_seed,
                int(self.success), f"{self.completion_time:.6f}", self.steps,
                self.failure_reason]


@dataclass
class SuiteStats:
    n: int
    sr: float
    sr_std: float
    ct_mean: float  # over successes; nan if none
    ct_median: float

    def as_dict(self) -> dict:
        return {"n": self.n, "sr": self.sr, "sr_std": self.sr_std,
                "ct_mean": self.ct_mean, "ct_median": self.ct_median}


@dataclass
class EvalReport:
    rows: list
    suites: dict  # suite name -> SuiteStats
    overall: SuiteStats
    config_echo: dict
    run_id: str
    eval_seed: int

    def as_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "eval_seed": self.eval_seed,
            "n_episodes": len(self.rows),
            "overall": self.overall.as_dict(),
            "suites": {name: s.as_dict() for name, s in sorted(self.suites.items())},
            "config": self.config_echo,
        }


def bootstrap_sr_std(outcomes, resamples: int = BOOTSTRAP_RESAMPLES) -> float:
    """Std of the success rate over seeded bootstrap resamples of the episodes."""
    if not outcomes:
        return 0.0
    arr = np.asarray(outcomes, dtype=np.float64)
    rng = np.random.default_rng(_BOOTSTRAP_SEED)
    means = rng.choice(arr, size=(resamples, len(arr)), replace=True).mean(axis=1)
    return float(means.std())


def _stats(rows) -> SuiteStats:
    outcomes = [r.success for r in rows]
    cts = [r.completion_time for r in rows if r.success]
    sr = float(np.mean(outcomes)) if outcomes else 0.0
    return SuiteStats(
        n=len(rows), sr=sr, sr_std=bootstrap_sr_std(outcomes),
        ct_mean=float(np.mean(cts)) if cts else float("nan"),
        ct_median=float(np.median(cts)) if cts else float("nan"))


def eval_tasks(suites, n_episodes: int, seed: int) -> list[TaskSpec]:
    """Deterministic fresh-seeded task list, round-robin over suites/variants."""
    suites = list(suites)
    tasks = []
    for i in range(n_episodes):
        suite = suites[i % len(suites)]
        variant = (i // len(suites)) % VARIANTS_PER_SUITE
        suite_index = SUITES.index(suite)
        # offset keeps eval scene seeds disjoint from dataset scene seeds
        scene_seed = scene_seed_for(seed, 1000 + suite_index * VARIANTS_PER_SUITE
                                    + variant, i)
        tasks.append(make_task(suite, variant, scene_seed))
    return tasks


def run_suite(policy, suites, n_episodes: int, seed: int,
              sim_cfg: SimConfig | None = None, budget: float = 20.0,
              history_frames: int = 2, workers: int = 1,
              config_echo: dict | None = None, run_id: str = "") -> EvalReport:
    """Roll out `n_episodes` fresh episodes and aggregate SR / CT per suite."""
    if n_episodes < 1:
        raise EvalError("n_episodes must be >= 1")
    if isinstance(suites, str):
        suites = SUITES if suites == "all" else (suites,)
    for s in suites:
        if s not in SUITES:
            raise EvalError(f"unknown suite {s!r}")
    sim_cfg = sim_cfg or SimConfig()
    tasks = eval_tasks(suites, n_episodes, seed)

    def one(i: int) -> EpisodeRow:
        res = evaluate_rollout(tasks[i], policy, sim_cfg, budget=budget,
                               history_frames=history_frames)
        return EpisodeRow(index=i, suite=tasks[i].suite, variant=tasks[i].variant,
                          scene_seed=tasks[i].scene_seed, success=res.success,
                          completion_time=res.completion_time, steps=res.steps,
                          failure_reason=res.failure_reason, trace=res.trace)

    if workers <= 1:
        rows = [one(i) for i in range(len(tasks))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, range(len(tasks))))
    rows.sort(key=lambda r: r.index)

    by_suite: dict[str, list] = {}
    for row in rows:
        by_suite.setdefault(row.suite, []).append(row)
    return EvalReport(rows=rows,
                      suites={name: _stats(rs) for name, rs in by_suite.items()},
                      overall=_stats(rows), config_echo=config_echo or {},
                      run_id=run_id, eval_seed=seed)
