"""Ablation matrix driver: train and evaluate one variant per flag setting
under identical seeds, then report directional comparisons.

The default matrix covers the studied axes: visual representation switches
(spatial / temporal embedding, fusion on/off), action representation (with
and without the duration head), input modalities (single frame, no proprio),
fusion strategies (attention / concatenation / gating), and single-stage
training. The variant named "full" uses the unmodified config, so with the
same seed it reproduces the main pipeline bitwise.
"""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .evaluate import run_suite
from .train import generate_dataset, train_pipeline

DEFAULT_MATRIX = [
    {"name": "full", "overrides": {}},
    {"name": "spatial_action_only", "overrides": {"use_dt_head": False}},
    {"name": "no_spatial_embed", "overrides": {"use_spatial": False}},
    {"name": "no_temporal_embed", "overrides": {"use_temporal": False}},
    {"name": "fusion_additive", "overrides": {"fusion": "additive"}},
    {"name": "fusion_concat", "overrides": {"fusion": "concat"}},
    {"name": "fusion_gate", "overrides": {"fusion": "gate"}},
    {"name": "image_only", "overrides": {"history_frames": 1}},
    {"name": "no_proprio", "overrides": {"use_proprio": False}},
    {"name": "stage2_only", "overrides": {"stage1_epochs": 0}},
]


def load_matrix(path) -> list[dict]:
    entries = json.loads(Path(path).read_text())
    for e in entries:
        if "name" not in e or "overrides" not in e:
            raise ValueError("matrix entries need 'name' and 'overrides'")
    return entries


def run_variant(cfg: RunConfig, data_dir, suites="all") -> dict:
    """Train (both stages) and evaluate one configuration."""
    stack, stage_summaries = train_pipeline(cfg, data_dir)
    report = run_suite(stack, suites, cfg.eval_episodes, cfg.eval_seed,
                       budget=cfg.eval_budget,
                       history_frames=cfg.history_frames, workers=cfg.workers,
                       config_echo=cfg.echo(), run_id=cfg.run_id())
    return {
        "sr": report.overall.sr,
        "sr_std": report.overall.sr_std,
        "ct_mean": report.overall.ct_mean,
        "ct_median": report.overall.ct_median,
        "suites": {k: v.as_dict() for k, v in report.suites.items()},
        "heldout_dt_mae": stage_summaries["stage2"]["heldout_dt_mae"],
        "stage1_flagged": stage_summaries["stage1"]["flagged"],
        "stage_summaries": stage_summaries,
        "report": report,
    }


def ablate(cfg: RunConfig, matrix: list[dict], seeds=(1, 2, 3),
           work_dir: str | Path = "ablation_work", suites="all") -> tuple[list, dict]:
    """Run every (variant, seed) cell; returns flat rows plus trend verdicts.

    The dataset is generated once per seed and shared by all variants, since
    data generation does not depend on any model flag.
    """
    work_dir = Path(work_dir)
    rows = []
    for seed in seeds:
        seed_cfg = replace(cfg, seed=seed)
        data_dir = work_dir / f"data_seed{seed}"
        if not (data_dir / "dataset.jsonl").exists():
            generate_dataset(seed_cfg, data_dir)
        for entry in matrix:
            variant_cfg = replace(seed_cfg, **entry["overrides"]).validate()
            result = run_variant(variant_cfg, data_dir, suites=suites)
            rows.append({"variant": entry["name"], "seed": seed,
                         **{k: result[k] for k in ("sr", "sr_std", "ct_mean",
                                                   "ct_median", "heldout_dt_mae",
                                                   "stage1_flagged")},
                         "suites": result["suites"]})
    return rows, compute_trends(rows)


def _per_seed(rows, variant, key):
    return {r["seed"]: r[key] for r in rows if r["variant"] == variant}


def compute_trends(rows) -> dict:
    """Directional comparisons between variants, per seed.

    full_vs_spatial_ct: the duration-aware model finishes faster (median CT)
    than the fixed-cadence spatial-only variant, counted per seed.
    attention_vs_concat_sr: attention fusion does not lose to concatenation.
    """
    trends: dict = {}
    variants = {r["variant"] for r in rows}
    if {"full", "spatial_action_only"} <= variants:
        full_ct = _per_seed(rows, "full", "ct_median")
        spat_ct = _per_seed(rows, "spatial_action_only", "ct_median")
        full_sr = _per_seed(rows, "full", "sr")
        spat_sr = _per_seed(rows, "spatial_action_only", "sr")
        seeds = sorted(set(full_ct) & set(spat_ct))
        ct_wins = [s for s in seeds
                   if np.isfinite(full_ct[s]) and np.isfinite(spat_ct[s])
                   and full_ct[s] < spat_ct[s]]
        sr_ok = [s for s in seeds if full_sr[s] >= spat_sr[s] - 0.02]
        trends["full_vs_spatial_ct"] = {
            "seeds": seeds, "ct_wins": ct_wins,
            "ct_win_count": len(ct_wins),
            "sr_within_2pts_all_seeds": len(sr_ok) == len(seeds),
            "full_ct_median": full_ct, "spatial_ct_median": spat_ct,
            "full_sr": full_sr, "spatial_sr": spat_sr,
            "pass": len(ct_wins) >= 2 and len(sr_ok) == len(seeds),
        }
    if {"full", "fusion_concat"} <= variants:
        att_sr = _per_seed(rows, "full", "sr")
        cat_sr = _per_seed(rows, "fusion_concat", "sr")
        seeds = sorted(set(att_sr) & set(cat_sr))
        wins = [s for s in seeds if att_sr[s] >= cat_sr[s]]
        trends["attention_vs_concat_sr"] = {
            "seeds": seeds, "at_least_ties": wins, "win_count": len(wins),
            "attention_sr": att_sr, "concat_sr": cat_sr,
            "pass": len(wins) >= 2,
        }
    return trends
