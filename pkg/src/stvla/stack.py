"""The full observation-to-action pipeline.

Depth frames are cut into patches; a frozen random-projection feature encoder
stands in for a pretrained vision backbone, and the simulator's ground-truth
poses stand in for a geometry encoder. Patch-center world positions plus frame
timestamps go through the Fourier embedder, get fused into the visual features,
and the policy network maps [visual tokens, proprio token, instruction tokens]
to one spatiotemporal action.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .embed import SpatioTemporalEmbedder
from .fusion import make_fuser
from .geometry import unproject_patch_centers
from .policy import InstructionVocab, PolicyNet, PolicyNetConfig
from .sim import template_words
from .tensor import Tensor
from .types import SimFrame, SpatioTemporalAction

VIEWS = ("third", "wrist")


@dataclass
class StackConfig:
    d_fourier: int = 32
    d_embed: int = 64
    d_model: int = 128
    n_blocks: int = 2
    ff_mult: int = 4
    render_size: int = 16
    patch_grid: int = 4
    history_frames: int = 2
    lang_len: int = 11
    workspace_half: float = 0.28
    t_max: float = 8.0
    pos_sigma: float = 1.0
    time_sigma: float = 0.25
    depth_norm: float = 1.5
    fusion: str = "attention"
    use_spatial: bool = True
    use_temporal: bool = True
    use_proprio: bool = True
    use_dt_head: bool = True
    fixed_chunk_dt: float = 0.8  # execution cadence when the dt head is off
    dx_scale: float = 0.5
    dtheta_scale: float = 0.8
    dt_min: float = 0.05
    dt_max: float = 1.0
    contrast_gain: float = 8.0  # amplification of within-patch depth relief

    @property
    def patches_per_view(self) -> int:
        return self.patch_grid * self.patch_grid

    @property
    def patch_pixels(self) -> int:
        # absolute (clipped) depths plus contrast-amplified relief channels
        return 2 * (self.render_size // self.patch_grid) ** 2

    @property
    def n_visual(self) -> int:
        return self.history_frames * len(VIEWS) * self.patches_per_view


class VisionFeatureEncoder:
    """Frozen random projection of each patch token to the feature width.

    Stand-in for a pretrained ViT + geometry encoder: deterministic per seed,
    never trained, shared across views. Its token features mix three frozen
    channels, mirroring what real backbone tokens carry: patch appearance
    (depth pixels), a per-slot positional embedding (ViT position codes), and
    the token's own normalized world position + timestamp (the ground-truth
    geometry that replaces a learned geometry encoder). The geometry channel
    is what lets downstream attention align a visual token with its own
    spatiotemporal embedding.
    """

    def __init__(self, patch_pixels: int, n_slots: int, d_model: int,
                 rng: np.random.Generator):
        self.w = Tensor(rng.normal(0.0, 1.0 / np.sqrt(patch_pixels),
                                   size=(patch_pixels, d_model)),
                        requires_grad=True, name="vision.w")
        self.w_geo = Tensor(rng.normal(0.0, 0.5, size=(4, d_model)),
                            requires_grad=True, name="vision.w_geo")
        self.b = Tensor(rng.uniform(-0.1, 0.1, size=d_model), requires_grad=True,
                        name="vision.b")
        self.slot_embed = Tensor(rng.normal(0.0, 0.5, size=(n_slots, d_model)),
                                 requires_grad=True, name="vision.slot_embed")

    def encode(self, pixels: Tensor, geo: Tensor) -> Tensor:
        """pixels: (..., N, patch_pixels); geo: (..., N, 4) normalized
        [position, time], zeroed by the caller for ablation variants."""
        h = T.add(T.matmul(pixels, self.w), T.matmul(geo, self.w_geo))
        return T.tanh(T.add(T.add(h, self.slot_embed), self.b))

    def params(self):
        return {self.w.name: self.w, self.w_geo.name: self.w_geo,
                self.b.name: self.b, self.slot_embed.name: self.slot_embed}


class PolicyStack:
    def __init__(self, cfg: StackConfig, seed: int):
        self.cfg = cfg
        self.seed = int(seed)
        streams = np.random.SeedSequence([int(seed), 0xC0FFEE]).spawn(4)
        rngs = [np.random.default_rng(s) for s in streams]
        self.vocab = InstructionVocab(template_words())
        self.vision = VisionFeatureEncoder(cfg.patch_pixels, cfg.n_visual,
                                           cfg.d_model, rngs[0])
        self.embedder = SpatioTemporalEmbedder(
            cfg.d_fourier, cfg.d_embed, cfg.d_model, rngs[1],
            pos_sigma=cfg.pos_sigma, time_sigma=cfg.time_sigma,
            workspace_half=cfg.workspace_half, t_max=cfg.t_max)
        self.fuser = make_fuser(cfg.fusion, cfg.d_model, rngs[2])
        self.net = PolicyNet(PolicyNetConfig(
            d_model=cfg.d_model, n_blocks=cfg.n_blocks, ff_mult=cfg.ff_mult,
            vocab_size=len(self.vocab), lang_len=cfg.lang_len,
            n_visual=cfg.n_visual, dx_scale=cfg.dx_scale,
            dtheta_scale=cfg.dtheta_scale, dt_min=cfg.dt_min, dt_max=cfg.dt_max),
            rngs[3])
        self.lora_spec: dict = {}

    # -- adapters -----------------------------------------------------------

    def add_transformer_lora(self, rank: int, alpha: float) -> None:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0x10AA]))
        self.net.apply_lora(rank, alpha, rng)
        self.lora_spec["transformer"] = {"rank": rank, "alpha": alpha}

    def add_fusion_lora(self, rank: int, alpha: float) -> None:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0x10AB]))
        self.fuser.add_lora(rank, alpha, rng)
        if self.fuser.lora_params():
            self.lora_spec["fusion"] = {"rank": rank, "alpha": alpha}

    # -- featurization --------------------------------------------------------

    def _pixel_heights(self, frame: SimFrame) -> np.ndarray:
        """Per-pixel world height of the rendered surface (0 where invalid).

        Unprojects every valid pixel through the frame's own pose; the table
        plane maps to 0 for any viewpoint, so height is a clean, view-
        independent relief signal for objects sitting on it.
        """
        k, pose = frame.intrinsics, frame.pose
        size = frame.depth.height
        u = np.arange(size, dtype=np.float64)
        uu, vv = np.meshgrid(u, u)
        dirs_cam = np.stack([(uu - k.cx) / k.fx, (vv - k.cy) / k.fy,
                             np.ones_like(uu)], axis=-1)
        dir_z_world = dirs_cam @ pose.rotation[:, 2]
        origin_z = pose.camera_center()[2]
        depth = frame.depth.values
        return np.where(depth > 0, origin_z + depth * dir_z_world, 0.0)

    def _frame_features(self, frame: SimFrame):
        cfg = self.cfg
        grid = (cfg.patch_grid, cfg.patch_grid)
        ph = cfg.render_size // cfg.patch_grid

        def to_patches(img):
            return (img.reshape(cfg.patch_grid, ph, cfg.patch_grid, ph)
                    .transpose(0, 2, 1, 3).reshape(cfg.patches_per_view, -1))

        raw = to_patches(frame.depth.values)
        depth = np.clip(raw, 0.0, cfg.depth_norm) / cfg.depth_norm
        relief = np.clip(to_patches(self._pixel_heights(frame)) * cfg.contrast_gain,
                         -1.0, 1.0)
        pixels = np.concatenate([depth, relief], axis=1)
        points = unproject_patch_centers(frame.depth, frame.intrinsics, frame.pose, grid)
        positions = self.embedder.normalize_positions(
            np.stack([p.as_array() for p in points]))
        times = np.full((cfg.patches_per_view, 1),
                        float(self.embedder.normalize_times(np.array(frame.timestamp))))
        return pixels, positions, times

    def featurize(self, history, instruction: str) -> dict:
        """history: list of (third, wrist) SimFrame pairs, oldest first.

        Shorter histories are left-padded by repeating the oldest pair. Token
        order: time-major (oldest first), then view (third, wrist), then
        patches row-major.
        """
        cfg = self.cfg
        if not history:
            raise ValueError("empty frame history")
        hist = list(history)[-cfg.history_frames:]
        hist = [hist[0]] * (cfg.history_frames - len(hist)) + hist
        pix, pos, tms = [], [], []
        for pair in hist:
            for frame in pair:
                p, q, t = self._frame_features(frame)
                pix.append(p)
                pos.append(q)
                tms.append(t)
        current = hist[-1][0].proprio
        proprio = current.as_vector().copy()
        proprio[0:3] /= cfg.workspace_half
        if not cfg.use_proprio:
            proprio = np.zeros_like(proprio)
        return {
            "pixels": np.concatenate(pix, axis=0),
            "positions": np.concatenate(pos, axis=0),
            "times": np.concatenate(tms, axis=0),
            "proprio": proprio,
            "lang": self.vocab.encode_padded(instruction, cfg.lang_len),
        }

    @staticmethod
    def collate(feature_list) -> dict:
        return {key: np.stack([f[key] for f in feature_list])
                for key in ("pixels", "positions", "times", "proprio", "lang")}

    # -- forward ---------------------------------------------------------------

    def fused_visual(self, batch: dict) -> Tensor:
        cfg = self.cfg
        # the ablation switches silence position / time everywhere at once
        pos = batch["positions"] if cfg.use_spatial else np.zeros_like(batch["positions"])
        tms = batch["times"] if cfg.use_temporal else np.zeros_like(batch["times"])
        geo = Tensor(np.concatenate([pos, tms], axis=-1))
        f_v = self.vision.encode(Tensor(batch["pixels"]), geo)
        f4d = self.embedder.embed(Tensor(pos), Tensor(tms),
                                  use_spatial=cfg.use_spatial,
                                  use_temporal=cfg.use_temporal)
        f4d_hat = self.embedder.match_dim(f4d)
        return self.fuser.fuse(f_v, f4d_hat)

    def forward_batch(self, batch: dict) -> Tensor:
        """(B, 8) squashed action predictions."""
        f_v4d = self.fused_visual(batch)
        return self.net.forward(f_v4d, Tensor(batch["proprio"]), batch["lang"])

    def stage1_batch(self, batch: dict) -> tuple[Tensor, Tensor]:
        """(per-token position/time regression, scene-attribute logits)."""
        f_v4d = self.fused_visual(batch)
        return self.net.aux_outputs(f_v4d, Tensor(batch["proprio"]), batch["lang"])

    def act(self, history, instruction: str) -> SpatioTemporalAction:
        batch = self.collate([self.featurize(history, instruction)])
        pred = self.forward_batch(batch).data[0]
        dt = float(pred[7]) if self.cfg.use_dt_head else self.cfg.fixed_chunk_dt
        return SpatioTemporalAction(pred[0:3], pred[3:6], float(pred[6]), dt)

    def __call__(self, history, instruction: str) -> SpatioTemporalAction:
        return self.act(history, instruction)

    # -- parameters ----------------------------------------------------------

    def param_groups(self) -> dict[str, dict[str, Tensor]]:
        net_groups = self.net.param_groups()
        return {
            "vision": self.vision.params(),
            "embed": self.embedder.params(),
            "fusion_base": self.fuser.base_params(),
            "fusion_lora": self.fuser.lora_params(),
            **net_groups,
        }

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for group in self.param_groups().values():
            out.update(group)
        return out

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        meta = {"d_model": self.cfg.d_model, "config": asdict(self.cfg),
                "seed": self.seed, "lora": self.lora_spec,
                "vocab_hash": self.vocab.vocab_hash}
        save_checkpoint(path, self.params(), meta)

    def load(self, path) -> dict:
        return load_into(path, self.params())

    @classmethod
    def from_checkpoint(cls, path) -> "PolicyStack":
        header, _ = load_checkpoint(path)
        meta = header["meta"]
        stack = cls(StackConfig(**meta["config"]), meta["seed"])
        lora = meta.get("lora", {})
        if "transformer" in lora:
            stack.add_transformer_lora(lora["transformer"]["rank"],
                                       lora["transformer"]["alpha"])
        if "fusion" in lora:
            stack.add_fusion_lora(lora["fusion"]["rank"], lora["fusion"]["alpha"])
        stack.load(path)
        return stack
