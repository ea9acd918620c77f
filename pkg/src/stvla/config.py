"""Flat key=value run configuration.

Every key has a default; an unknown key in a config file is an error. The
non-path, non-execution keys are echoed into every report and hashed into the
run id, so a report fully identifies the experiment that produced it. Path
keys and the worker count are deliberately excluded from the echo: they change
where a run writes or how it schedules, never what it computes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .stack import StackConfig


class ConfigError(ValueError):
    pass


# excluded from the echo and the run id
PATH_KEYS = ("out_dir", "data_dir", "ckpt_in", "ckpt_out")
EXEC_KEYS = ("workers",)


@dataclass
class RunConfig:
    seed: int = 1
    # dataset generation
    subtasks: int = 40
    episodes_per: int = 6
    hz: float = 20.0
    train_frac: float = 0.8
    cos_thresh: float = 0.95
    max_chunk_steps: int = 16
    # model dimensions
    d_fourier: int = 32
    d_embed: int = 64
    d_model: int = 128
    n_blocks: int = 2
    ff_mult: int = 4
    history_frames: int = 2
    lang_len: int = 11
    workspace_half: float = 0.28
    t_max: float = 8.0
    pos_sigma: float = 1.0
    time_sigma: float = 0.25
    depth_norm: float = 1.5
    dx_scale: float = 0.5
    dtheta_scale: float = 0.8
    dt_min: float = 0.05
    dt_max: float = 1.0
    fixed_chunk_dt: float = 0.8
    lora_rank: int = 16
    lora_alpha: float = 32.0
    # ablation switches
    fusion: str = "attention"
    use_spatial: bool = True
    use_temporal: bool = True
    use_proprio: bool = True
    use_dt_head: bool = True
    # training
    optimizer: str = "adam"
    stage1_epochs: int = 4
    stage1_lr: float = 1e-4
    stage1_batch: int = 16
    stage2_epochs: int = 10
    stage2_lr: float = 5e-5
    stage2_batch: int = 24
    clip_norm: float = 10.0
    loss_w_dx: float = 1.0
    loss_w_dtheta: float = 1.0
    loss_w_grip: float = 1.0
    loss_w_dt: float = 1.0
    # evaluation
    eval_episodes: int = 50
    eval_budget: float = 20.0
    eval_seed: int = 1000
    workers: int = 1
    # paths
    out_dir: str = "runs/default"
    data_dir: str = "data/default"
    ckpt_in: str = ""
    ckpt_out: str = ""

    def stack_config(self) -> StackConfig:
        return StackConfig(
            d_fourier=self.d_fourier, d_embed=self.d_embed, d_model=self.d_model,
            n_blocks=self.n_blocks, ff_mult=self.ff_mult,
            history_frames=self.history_frames, lang_len=self.lang_len,
            workspace_half=self.workspace_half, t_max=self.t_max,
            pos_sigma=self.pos_sigma, time_sigma=self.time_sigma,
            depth_norm=self.depth_norm, fusion=self.fusion,
            use_spatial=self.use_spatial, use_temporal=self.use_temporal,
            use_proprio=self.use_proprio, use_dt_head=self.use_dt_head,
            fixed_chunk_dt=self.fixed_chunk_dt, dx_scale=self.dx_scale,
            dtheta_scale=self.dtheta_scale, dt_min=self.dt_min, dt_max=self.dt_max)

    def loss_weights(self) -> tuple:
        w_dt = self.loss_w_dt if self.use_dt_head else 0.0
        return (self.loss_w_dx, self.loss_w_dtheta, self.loss_w_grip, w_dt)

    def echo(self) -> dict:
        skip = set(PATH_KEYS) | set(EXEC_KEYS)
        return {k: v for k, v in sorted(asdict(self).items()) if k not in skip}

    def run_id(self) -> str:
        blob = json.dumps(self.echo(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def validate(self) -> "RunConfig":
        if self.stage1_lr <= 0 or self.stage2_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.optimizer not in ("gd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.fusion not in ("attention", "concat", "gate", "additive"):
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        if not 0 < self.train_frac < 1:
            raise ConfigError("train_frac must be in (0, 1)")
        return self


_FIELDS = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELDS[key]
    raw = raw.strip()
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"bad boolean for {key}: {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config(text: str) -> RunConfig:
    """Parse `key = value` lines; '#' starts a comment; unknown keys error."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    return RunConfig(**values).validate()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    return parse_config(Path(path).read_text())


def format_config(cfg: RunConfig) -> str:
    lines = [f"{k} = {v}" for k, v in sorted(asdict(cfg).items())]
    return "\n".join(lines) + "\n"
