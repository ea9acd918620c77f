"""Trajectory chunking and the serialized vision-language-action dataset.

Fixed-frequency expert episodes are chunked greedily into variable-duration
actions: a step joins the current chunk while its motion direction stays
aligned with the chunk's first nonzero direction, the grip signal is
unchanged, and the chunk is under the length cap. Zero-motion steps are
exempt from the direction test only. Each chunk's duration annotation is its
step count over the sampling frequency, so durations and displacements are
conserved exactly.

On disk a dataset is one JSON-lines file (header object, then one record per
chunk sample) plus little-endian binary frame blobs, one file per chunk-start
frame per view.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, CameraPose, DepthMap
from .sim import Episode, TaskSpec, target_quadrant, build_scene
from .types import ProprioState, SimFrame

FORMAT_VERSION = 1
_BLOB_MAGIC = b"STFR"


class DatasetError(ValueError):
    pass


@dataclass
class Chunk:
    delta_x: np.ndarray  # (3,) summed member displacement
    delta_theta: np.ndarray  # (3,) summed member rotation increments
    grip: float
    delta_t: float  # steps / hz
    start: int  # member step range [start, stop)
    stop: int


@dataclass
class AnnotatedEpisode:
    episode: Episode
    chunks: list
    provenance: dict  # chunking parameters

    @property
    def spec(self) -> TaskSpec:
        return self.episode.spec


def chunk_trajectory(ep: Episode, cos_thresh: float = 0.95,
                     max_chunk_steps: int = 16,
                     forced_boundaries: set | None = None) -> AnnotatedEpisode:
    """Greedy left-to-right chunking by consistent motion trend.

    forced_boundaries: optional step indices where a chunk must end regardless
    of the join rules (used when chunking concatenated trajectories).
    """
    if not 0 < cos_thresh <= 1:
        raise DatasetError(f"cos_thresh must be in (0, 1], got {cos_thresh}")
    if max_chunk_steps < 1:
        raise DatasetError("max_chunk_steps must be >= 1")
    if not ep.actions:
        raise DatasetError("empty episode")
    forced = forced_boundaries or set()

    chunks: list[Chunk] = []
    start = 0
    ref_dir: np.ndarray | None = None
    cur_grip: float | None = None

    def flush(stop: int) -> None:
        dx = np.zeros(3)
        dth = np.zeros(3)
        for a in ep.actions[start:stop]:
            dx = dx + a.delta_x
            dth = dth + a.delta_theta
        chunks.append(Chunk(dx, dth, float(cur_grip), (stop - start) / ep.hz,
                            start, stop))

    for i, a in enumerate(ep.actions):
        norm = float(np.linalg.norm(a.delta_x))
        moving = norm > 1e-12
        direction = a.delta_x / norm if moving else None
        if i == start and cur_grip is None:
            cur_grip = a.grip
        joins = i == start
        if not joins:
            if i in forced:
                joins = False
            elif a.grip != cur_grip:
                joins = False
            elif i - start >= max_chunk_steps:
                joins = False
            elif moving and ref_dir is not None and float(direction @ ref_dir) < cos_thresh:
                joins = False
            else:
                joins = True
        if not joins:
            flush(i)
            start = i
            ref_dir = None
            cur_grip = a.grip
        if moving and ref_dir is None:
            ref_dir = direction
    flush(len(ep.actions))

    annotated = AnnotatedEpisode(ep, chunks,
                                 {"cos_thresh": cos_thresh,
                                  "max_chunk_steps": max_chunk_steps})
    _validate_chunks(annotated)
    return annotated


def _validate_chunks(ann: AnnotatedEpisode) -> None:
    ep = ann.episode
    pos = 0
    for c in ann.chunks:
        if c.start != pos or c.stop <= c.start:
            raise DatasetError(f"chunk ranges do not partition episode at step {pos}")
        if abs(c.delta_t - (c.stop - c.start) / ep.hz) > 1e-12:
            raise DatasetError(f"chunk delta_t mismatch at step {c.start}")
        pos = c.stop
    if pos != len(ep.actions):
        raise DatasetError("chunks do not cover the episode")


# ---------------------------------------------------------------------------
# frame blobs


def write_frame_blob(path: Path, frame: SimFrame) -> None:
    depth = frame.depth.values.astype("<f4")
    k, pose, p = frame.intrinsics, frame.pose, frame.proprio
    view_code = 0 if frame.view == "third" else 1
    with open(path, "wb") as fh:
        fh.write(_BLOB_MAGIC)
        fh.write(struct.pack("<III", FORMAT_VERSION, depth.shape[0], depth.shape[1]))
        fh.write(depth.tobytes())
        fh.write(struct.pack("<4d", k.fx, k.fy, k.cx, k.cy))
        fh.write(pose.rotation.astype("<f8").tobytes())
        fh.write(pose.translation.astype("<f8").tobytes())
        fh.write(struct.pack("<d", frame.timestamp))
        fh.write(p.as_vector().astype("<f8").tobytes())
        fh.write(struct.pack("<B", view_code))


def read_frame_blob(path: Path) -> SimFrame:
    raw = Path(path).read_bytes()
    if raw[:4] != _BLOB_MAGIC:
        raise DatasetError(f"bad frame blob magic in {path}")
    version, h, w = struct.unpack_from("<III", raw, 4)
    if version != FORMAT_VERSION:
        raise DatasetError(f"frame blob version {version} unsupported in {path}")
    off = 16
    depth = np.frombuffer(raw, dtype="<f4", count=h * w, offset=off).astype(np.float64)
    off += 4 * h * w
    fx, fy, cx, cy = struct.unpack_from("<4d", raw, off)
    off += 32
    rot = np.frombuffer(raw, dtype="<f8", count=9, offset=off).reshape(3, 3).copy()
    off += 72
    trans = np.frombuffer(raw, dtype="<f8", count=3, offset=off).copy()
    off += 24
    (timestamp,) = struct.unpack_from("<d", raw, off)
    off += 8
    prop = np.frombuffer(raw, dtype="<f8", count=7, offset=off)
    off += 56
    (view_code,) = struct.unpack_from("<B", raw, off)
    return SimFrame(timestamp=timestamp, view="third" if view_code == 0 else "wrist",
                    depth=DepthMap(depth.reshape(h, w)),
                    intrinsics=CameraIntrinsics(fx, fy, cx, cy),
                    pose=CameraPose(rot, trans),
                    proprio=ProprioState(prop[0:3], prop[3:6], float(prop[6])))


# ---------------------------------------------------------------------------
# dataset records


def _vocab_hash(words: list[str]) -> str:
    return hashlib.sha256(" ".join(words).encode()).hexdigest()[:16]


@dataclass
class ChunkRecord:
    episode_id: int
    chunk_index: int
    instruction: str
    frame_refs: list  # [third_path, wrist_path] for this chunk's start step
    proprio: np.ndarray  # (7,) at chunk start
    action: np.ndarray  # (8,) [dx, dtheta, grip, dt]
    start: int
    stop: int
    aux: dict  # suite, variant, scene_seed, target_quadrant

    def to_json(self) -> str:
        payload = {
            "episode_id": self.episode_id,
            "chunk_index": self.chunk_index,
            "instruction": self.instruction,
            "frame_refs": self.frame_refs,
            "proprio": [float(x) for x in self.proprio],
            "action": {
                "dx": [float(x) for x in self.action[0:3]],
                "dtheta": [float(x) for x in self.action[3:6]],
                "grip": float(self.action[6]),
                "dt": float(self.action[7]),
            },
            "range": [self.start, self.stop],
            "aux": self.aux,
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(line: str, lineno: int) -> "ChunkRecord":
        try:
            d = json.loads(line)
            action = np.array(d["action"]["dx"] + d["action"]["dtheta"]
                              + [d["action"]["grip"], d["action"]["dt"]])
            return ChunkRecord(
                episode_id=int(d["episode_id"]),
                chunk_index=int(d["chunk_index"]),
                instruction=d["instruction"],
                frame_refs=list(d["frame_refs"]),
                proprio=np.array(d["proprio"], dtype=np.float64),
                action=action,
                start=int(d["range"][0]),
                stop=int(d["range"][1]),
                aux=dict(d.get("aux", {})),
            )
        except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
            raise DatasetError(f"corrupt record at line {lineno}: {exc}") from None


@dataclass
class Dataset:
    header: dict
    records: list  # ChunkRecord, ordered by (episode_id, chunk_index)
    root: Path

    @property
    def hz(self) -> float:
        return float(self.header["hz"])

    def episode_ids(self) -> list[int]:
        out, seen = [], set()
        for r in self.records:
            if r.episode_id not in seen:
                seen.add(r.episode_id)
                out.append(r.episode_id)
        return out

    def by_episode(self) -> dict[int, list]:
        out: dict[int, list] = {}
        for r in self.records:
            out.setdefault(r.episode_id, []).append(r)
        return out

    def load_frames(self, record: ChunkRecord) -> tuple[SimFrame, SimFrame]:
        third = read_frame_blob(self.root / record.frame_refs[0])
        wrist = read_frame_blob(self.root / record.frame_refs[1])
        return third, wrist


def serialize(annotated: list, out_dir: str | Path, master_seed: int,
              vocab_words: list[str], episode_ids: list[int] | None = None,
              gen_params: dict | None = None) -> Path:
    """Write dataset.jsonl plus frame blobs for every chunk-start step.

    Records are ordered by (episode_id, chunk_index); identical inputs produce
    byte-identical files. gen_params (generation seed / counts) are recorded in
    the header so the episode set can be regenerated for re-annotation.
    """
    out_dir = Path(out_dir)
    frames_dir = out_dir / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    if episode_ids is None:
        episode_ids = list(range(len(annotated)))

    lines = []
    order = sorted(range(len(annotated)), key=lambda i: episode_ids[i])
    for idx in order:
        ann, ep_id = annotated[idx], episode_ids[idx]
        ep = ann.episode
        world0 = build_scene(ep.spec, ep.final_world.config)
        quadrant = target_quadrant(world0)
        for ci, chunk in enumerate(ann.chunks):
            third, wrist = ep.frames[chunk.start]
            refs = []
            for frame, view in ((third, "third"), (wrist, "wrist")):
                name = f"ep{ep_id:05d}_s{chunk.start:04d}_{view}.bin"
                write_frame_blob(frames_dir / name, frame)
                refs.append(f"frames/{name}")
            action = np.concatenate([chunk.delta_x, chunk.delta_theta,
                                     [chunk.grip, chunk.delta_t]])
            rec = ChunkRecord(
                episode_id=ep_id, chunk_index=ci, instruction=ep.spec.instruction,
                frame_refs=refs, proprio=third.proprio.as_vector(), action=action,
                start=chunk.start, stop=chunk.stop,
                aux={"suite": ep.spec.suite, "variant": ep.spec.variant,
                     "scene_seed": ep.spec.scene_seed, "target_quadrant": quadrant,
                     "steps": len(ep.actions)},
            )
            lines.append(rec.to_json())

    header = {
        "format_version": FORMAT_VERSION,
        "hz": annotated[0].episode.hz if annotated else 20.0,
        "workspace": annotated[0].episode.final_world.config.workspace_half if annotated else 0.28,
        "vocab_hash": _vocab_hash(vocab_words),
        "n_episodes": len(annotated),
        "seed": master_seed,
        "gen": gen_params or {},
        "chunking": annotated[0].provenance if annotated else {},
    }
    path = out_dir / "dataset.jsonl"
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for line in lines:
            fh.write(line + "\n")
    return path


def load(path: str | Path) -> Dataset:
    """Read and validate a serialized dataset.

    Checks per episode: chunk ranges partition [0, steps), each delta_t equals
    its span over hz (1e-12), durations sum to steps/hz. Violations name the
    offending record line.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"no dataset at {path}")
    records = []
    with open(path) as fh:
        header_line = fh.readline()
        if not header_line:
            raise DatasetError("truncated file: missing header")
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"corrupt header: {exc}") from None
        if header.get("format_version") != FORMAT_VERSION:
            raise DatasetError(f"format_version {header.get('format_version')} "
                               f"unsupported (want {FORMAT_VERSION})")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                raise DatasetError(f"corrupt record at line {lineno}: blank line")
            records.append((lineno, ChunkRecord.from_json(line, lineno)))

    hz = float(header["hz"])
    by_ep: dict[int, list] = {}
    for lineno, rec in records:
        by_ep.setdefault(rec.episode_id, []).append((lineno, rec))
    for ep_id, recs in by_ep.items():
        pos = 0
        total_dt = 0.0
        for lineno, rec in recs:
            if rec.start != pos:
                raise DatasetError(f"line {lineno}: episode {ep_id} chunk ranges "
                                   f"do not partition (expected start {pos})")
            span_dt = (rec.stop - rec.start) / hz
            if abs(rec.action[7] - span_dt) > 1e-12:
                raise DatasetError(f"line {lineno}: episode {ep_id} delta_t "
                                   f"{rec.action[7]} != span/hz {span_dt}")
            total_dt += rec.action[7]
            pos = rec.stop
        steps = recs[-1][1].aux.get("steps", pos)
        if pos != steps:
            raise DatasetError(f"episode {ep_id}: chunks cover {pos} of {steps} steps")
        if abs(total_dt - steps / hz) > 1e-12:
            raise DatasetError(f"episode {ep_id}: durations sum to {total_dt}, "
                               f"want {steps / hz}")
    return Dataset(header, [r for _, r in records], path.parent)


def split(ds: Dataset, train_frac: float, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministic episode-level split; never splits inside an episode."""
    if not 0 < train_frac < 1:
        raise DatasetError(f"train_frac must be in (0, 1), got {train_frac}")
    ids = ds.episode_ids()
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(len(ids)))
    n_train = int(round(train_frac * len(ids)))
    train_ids = {ids[i] for i in order[:n_train]}
    train = [r for r in ds.records if r.episode_id in train_ids]
    heldout = [r for r in ds.records if r.episode_id not in train_ids]
    return (Dataset(ds.header, train, ds.root), Dataset(ds.header, heldout, ds.root))
