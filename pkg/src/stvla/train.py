"""Two-stage training driver.

Stage 1 (alignment): with the action head frozen, train the spatiotemporal
embedding, cross-attention fusion, projectors, and transformer adapters on a
self-supervised proxy: regress each fused visual token back to its own
normalized (position, time) and classify, conditioned on the instruction,
which workspace quadrant holds the instruction's target object.

Stage 2 (action fine-tuning): freeze the embedding and fusion base weights,
add adapters on the fusion maps, and train the action head, projectors, and
all adapters with the grouped L1 action loss over chunk samples.

Both stages snapshot their frozen set so the freezing contract is checkable
bitwise, run deterministically per (config, seed), and abort to the last
epoch's parameters if the loss goes non-finite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .dataset import Dataset, chunk_trajectory, load, serialize, split
from .policy import action_loss
from .sim import SimConfig, all_subtasks, generate_episode, make_task, scene_seed_for, template_words
from .stack import PolicyStack
from . import tensor as T
from .tensor import Tensor


class TrainError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# optimizers


class GradientDescent:
    """Plain gradient descent with global-norm clipping."""

    def __init__(self, params: dict, lr: float, clip_norm: float = 10.0):
        self.params = dict(params)
        self.lr = lr
        self.clip_norm = clip_norm

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def _clipped(self):
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float((p.grad * p.grad).sum())
        norm = np.sqrt(total)
        scale = self.clip_norm / norm if norm > self.clip_norm else 1.0
        return scale

    def step(self) -> None:
        scale = self._clipped()
        for p in self.params.values():
            if p.grad is not None:
                p.data -= self.lr * scale * p.grad


class Adam:
    """Adam with bias correction and the same global-norm clip."""

    def __init__(self, params: dict, lr: float, clip_norm: float = 10.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.clip_norm = clip_norm
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float((p.grad * p.grad).sum())
        norm = np.sqrt(total)
        scale = self.clip_norm / norm if norm > self.clip_norm else 1.0
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for n, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * scale
            self.m[n] = self.beta1 * self.m[n] + (1 - self.beta1) * g
            self.v[n] = self.beta2 * self.v[n] + (1 - self.beta2) * g * g
            p.data -= self.lr * (self.m[n] / b1c) / (np.sqrt(self.v[n] / b2c) + self.eps)


def make_optimizer(kind: str, params: dict, lr: float, clip_norm: float):
    if kind == "gd":
        return GradientDescent(params, lr, clip_norm)
    if kind == "adam":
        return Adam(params, lr, clip_norm)
    raise TrainError(f"unknown optimizer {kind!r}")


# ---------------------------------------------------------------------------
# dataset generation and sample assembly


def generate_dataset(cfg: RunConfig, out_dir=None):
    """Generate, chunk, and serialize the full synthetic dataset."""
    out_dir = out_dir or cfg.data_dir
    sim_cfg = SimConfig(hz=cfg.hz, workspace_half=cfg.workspace_half,
                        dt_min=cfg.dt_min)
    annotated, episode_ids = [], []
    ep_id = 0
    for si, (suite, variant) in enumerate(all_subtasks(cfg.subtasks)):
        for ei in range(cfg.episodes_per):
            task = make_task(suite, variant, scene_seed_for(cfg.seed, si, ei))
            ep = generate_episode(task, hz=cfg.hz, cfg=sim_cfg)
            annotated.append(chunk_trajectory(ep, cfg.cos_thresh, cfg.max_chunk_steps))
            episode_ids.append(ep_id)
            ep_id += 1
    return serialize(annotated, out_dir, cfg.seed, template_words(),
                     episode_ids=episode_ids,
                     gen_params={"seed": cfg.seed, "subtasks": cfg.subtasks,
                                 "episodes_per": cfg.episodes_per})


@dataclass
class SampleSet:
    """Precomputed training arrays, one row per chunk sample."""

    pixels: np.ndarray  # (N, Nv, patch_pixels)
    positions: np.ndarray  # (N, Nv, 3) normalized
    times: np.ndarray  # (N, Nv, 1) normalized
    proprio: np.ndarray  # (N, 7)
    lang: np.ndarray  # (N, lang_len)
    actions: np.ndarray  # (N, 8)
    quadrant: np.ndarray  # (N,)
    episode_ids: np.ndarray  # (N,)

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def batch(self, idx) -> dict:
        return {"pixels": self.pixels[idx], "positions": self.positions[idx],
                "times": self.times[idx], "proprio": self.proprio[idx],
                "lang": self.lang[idx]}

    def token_targets(self, idx) -> np.ndarray:
        """(B, Nv, 4) per-token regression targets: normalized position + time."""
        return np.concatenate([self.positions[idx], self.times[idx]], axis=-1)


def build_samples(ds: Dataset, stack: PolicyStack) -> SampleSet:
    """Featurize every chunk record with its frame history window."""
    h = stack.cfg.history_frames
    feats, actions, quadrants, ep_ids = [], [], [], []
    for ep_id, records in ds.by_episode().items():
        records = sorted(records, key=lambda r: r.chunk_index)
        frames = [ds.load_frames(r) for r in records]
        for k, rec in enumerate(records):
            history = frames[max(0, k - h + 1):k + 1]
            feats.append(stack.featurize(history, rec.instruction))
            actions.append(rec.action)
            quadrants.append(rec.aux.get("target_quadrant", 0))
            ep_ids.append(ep_id)
    if not feats:
        raise TrainError("no samples in dataset")
    stacked = PolicyStack.collate(feats)
    return SampleSet(pixels=stacked["pixels"], positions=stacked["positions"],
                     times=stacked["times"], proprio=stacked["proprio"],
                     lang=stacked["lang"], actions=np.stack(actions),
                     quadrant=np.array(quadrants, dtype=np.int64),
                     episode_ids=np.array(ep_ids, dtype=np.int64))


# ---------------------------------------------------------------------------
# freezing contract helpers


STAGE1_TRAINABLE = ("embed", "fusion_base", "projectors", "transformer_lora", "aux")
STAGE2_TRAINABLE = ("head", "projectors", "transformer_lora", "fusion_lora")


def trainable_params(stack: PolicyStack, group_names) -> dict:
    out: dict[str, Tensor] = {}
    groups = stack.param_groups()
    for name in group_names:
        out.update(groups.get(name, {}))
    return out


def frozen_params(stack: PolicyStack, group_names) -> dict:
    trainable = set(trainable_params(stack, group_names))
    return {n: p for n, p in stack.params().items() if n not in trainable}


def snapshot(params: dict) -> dict:
    return {n: p.data.copy() for n, p in params.items()}


def assert_unchanged(params: dict, snap: dict) -> None:
    for n, p in params.items():
        if not np.array_equal(p.data, snap[n]):
            raise TrainError(f"frozen parameter {n} changed during training")


# ---------------------------------------------------------------------------
# stages


@dataclass
class StageReport:
    stage: int
    epoch_losses: list = field(default_factory=list)
    flagged: bool = False
    aborted: bool = False
    heldout_losses: list = field(default_factory=list)
    heldout_dt_mae: float = float("nan")
    heldout_dt_mean: float = float("nan")
    heldout_dt_baseline_mae: float = float("nan")

    def summary(self) -> dict:
        return {"stage": self.stage, "epoch_losses": self.epoch_losses,
                "flagged": self.flagged, "aborted": self.aborted,
                "heldout_losses": self.heldout_losses,
                "heldout_dt_mae": self.heldout_dt_mae,
                "heldout_dt_mean": self.heldout_dt_mean,
                "heldout_dt_baseline_mae": self.heldout_dt_baseline_mae}


def build_stack(cfg: RunConfig) -> PolicyStack:
    stack = PolicyStack(cfg.stack_config(), cfg.seed)
    stack.add_transformer_lora(cfg.lora_rank, cfg.lora_alpha)
    return stack


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) >= 2:  # drop ragged tail below 2: keeps batch stats sane
            yield idx


def _stage1_loss(stack: PolicyStack, samples: SampleSet, idx) -> Tensor:
    reg, cls = stack.stage1_batch(samples.batch(idx))
    reg_loss = T.l1_loss(reg, Tensor(samples.token_targets(idx)))
    cls_loss = T.nll(T.log_softmax(cls, axis=-1), samples.quadrant[idx])
    return T.add(reg_loss, cls_loss)


def _run_stage(stack: PolicyStack, samples: SampleSet, loss_fn, trainable: dict,
               frozen: dict, epochs: int, batch_size: int, optimizer_kind: str,
               lr: float, clip_norm: float, seed: int, stage: int,
               eval_fn=None) -> StageReport:
    report = StageReport(stage=stage)
    frozen_snap = snapshot(frozen)
    opt = make_optimizer(optimizer_kind, trainable, lr, clip_norm)
    rng = np.random.default_rng([seed, stage])
    for epoch in range(epochs):
        epoch_snap = snapshot(trainable)
        total, count = 0.0, 0
        for idx in _epoch_batches(len(samples), batch_size, rng):
            opt.zero_grad()
            loss = loss_fn(idx)
            value = loss.item()
            if not np.isfinite(value):
                for n, p in trainable.items():  # abort to last-good parameters
                    p.data = epoch_snap[n]
                report.aborted = True
                assert_unchanged(frozen, frozen_snap)
                return report
            loss.backward()
            opt.step()
            total += value
            count += 1
        report.epoch_losses.append(total / max(count, 1))
        if eval_fn is not None:
            report.heldout_losses.append(eval_fn())
    assert_unchanged(frozen, frozen_snap)
    if report.epoch_losses:
        first, last = report.epoch_losses[0], report.epoch_losses[-1]
        report.flagged = not (last <= 0.5 * first)
    return report


def train_stage1(cfg: RunConfig, samples: SampleSet,
                 stack: PolicyStack | None = None) -> tuple[PolicyStack, StageReport]:
    """Alignment stage; returns the trained stack and the per-epoch log."""
    stack = stack or build_stack(cfg)
    trainable = trainable_params(stack, STAGE1_TRAINABLE)
    frozen = frozen_params(stack, STAGE1_TRAINABLE)
    report = _run_stage(
        stack, samples, lambda idx: _stage1_loss(stack, samples, idx),
        trainable, frozen, cfg.stage1_epochs, cfg.stage1_batch,
        cfg.optimizer, cfg.stage1_lr, cfg.clip_norm, cfg.seed, stage=1)
    return stack, report


def _heldout_action_loss(stack: PolicyStack, samples: SampleSet, weights,
                         batch_size: int = 64) -> float:
    total, count = 0.0, 0
    for start in range(0, len(samples), batch_size):
        idx = np.arange(start, min(start + batch_size, len(samples)))
        pred = stack.forward_batch(samples.batch(idx))
        total += action_loss(pred, Tensor(samples.actions[idx]), weights).item() * len(idx)
        count += len(idx)
    return total / max(count, 1)


def heldout_dt_stats(stack: PolicyStack, train_samples: SampleSet,
                     heldout: SampleSet, batch_size: int = 64) -> tuple[float, float, float]:
    """(model dt MAE, mean ground-truth dt, predict-train-mean-dt baseline MAE)."""
    preds = []
    for start in range(0, len(heldout), batch_size):
        idx = np.arange(start, min(start + batch_size, len(heldout)))
        preds.append(stack.forward_batch(heldout.batch(idx)).data[:, 7])
    pred_dt = np.concatenate(preds)
    gt_dt = heldout.actions[:, 7]
    mean_train_dt = float(train_samples.actions[:, 7].mean())
    mae = float(np.abs(pred_dt - gt_dt).mean())
    baseline = float(np.abs(mean_train_dt - gt_dt).mean())
    return mae, float(gt_dt.mean()), baseline


def train_stage2(cfg: RunConfig, train_samples: SampleSet, heldout: SampleSet | None,
                 stack: PolicyStack) -> tuple[PolicyStack, StageReport]:
    """Action fine-tuning stage on chunk samples."""
    if "fusion" not in stack.lora_spec:
        stack.add_fusion_lora(cfg.lora_rank, cfg.lora_alpha)
    weights = cfg.loss_weights()
    trainable = trainable_params(stack, STAGE2_TRAINABLE)
    frozen = frozen_params(stack, STAGE2_TRAINABLE)

    def loss_fn(idx):
        pred = stack.forward_batch(train_samples.batch(idx))
        return action_loss(pred, Tensor(train_samples.actions[idx]), weights)

    eval_fn = None
    if heldout is not None and len(heldout):
        eval_fn = lambda: _heldout_action_loss(stack, heldout, weights)

    report = _run_stage(stack, train_samples, loss_fn, trainable, frozen,
                        cfg.stage2_epochs, cfg.stage2_batch, cfg.optimizer,
                        cfg.stage2_lr, cfg.clip_norm, cfg.seed, stage=2,
                        eval_fn=eval_fn)
    if heldout is not None and len(heldout):
        mae, mean_dt, baseline = heldout_dt_stats(stack, train_samples, heldout)
        report.heldout_dt_mae = mae
        report.heldout_dt_mean = mean_dt
        report.heldout_dt_baseline_mae = baseline
    return stack, report


def load_and_split(cfg: RunConfig, data_dir=None) -> tuple[Dataset, Dataset, Dataset]:
    from pathlib import Path

    ds = load(Path(data_dir or cfg.data_dir) / "dataset.jsonl")
    train, heldout = split(ds, cfg.train_frac, cfg.seed)
    return ds, train, heldout


def train_pipeline(cfg: RunConfig, data_dir=None) -> tuple[PolicyStack, dict]:
    """Full stage 1 + stage 2 run from a serialized dataset."""
    _, train_ds, heldout_ds = load_and_split(cfg, data_dir)
    stack = build_stack(cfg)
    train_samples = build_samples(train_ds, stack)
    heldout_samples = build_samples(heldout_ds, stack) if heldout_ds.records else None
    stack, rep1 = train_stage1(cfg, train_samples, stack)
    stack, rep2 = train_stage2(cfg, train_samples, heldout_samples, stack)
    return stack, {"stage1": rep1.summary(), "stage2": rep2.summary()}
