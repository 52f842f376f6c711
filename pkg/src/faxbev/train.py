"""Toy-scale training and evaluation on synthetic scenes.

Both the single-agent baseline and CoBEVT are trained on the same scenes
with visibility-masked weighted cross-entropy, Adam and a cosine schedule.
Evaluation aggregates vehicle IoU over a held-out scene set (intersection
and union counts are summed over scenes before dividing).
"""
from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from faxbev import nn
from faxbev.errors import ConfigurationError, NonFiniteError
from faxbev.geometry import BevGrid, CameraRig, Pose2D
from faxbev.models import CoBEVT, ModelConfig, SingleAgentModel, build_model, payload_bytes
from faxbev.scenes import SceneConfig, generate_scene, iou_counts, rasterize_labels, render_views
from faxbev.tensor import Tensor, backward, index_select, no_grad, weighted_cross_entropy

# held-out evaluation scenes never share seeds with training scenes
EVAL_SEED_OFFSET = 1_000_000
VAL_SEED_OFFSET = 2_000_000


@dataclass
class SceneData:
    """One rendered scene: every agent's camera images plus labels in every agent's frame.

    Images are stored as 8-bit to keep large datasets in memory.
    """

    images: np.ndarray          # [A, M, h, w, 3] uint8
    poses: list[Pose2D]
    rigs: list[CameraRig]
    labels: np.ndarray          # [A, H, W] vehicle class ids with agent a as the ego
    visible: np.ndarray         # [A, H, W] bool, seen by at least one agent
    seed: int

    @property
    def num_agents(self) -> int:
        return len(self.poses)

    @property
    def label(self) -> np.ndarray:
        return self.labels[0]

    def view(self, ego: int = 0, dtype=np.float32):
        """(images, poses, label, visible) with agent ``ego`` moved to slot 0."""
        order = [ego] + [a for a in range(self.num_agents) if a != ego]
        images = self.images[order].astype(dtype) / 255.0
        return images, [self.poses[a] for a in order], self.labels[ego], self.visible[ego]


def render_scene_data(scene_cfg: SceneConfig, seed: int) -> SceneData:
    scene = generate_scene(scene_cfg, seed)
    images = np.stack([render_views(scene, a) for a in range(len(scene.agents))])
    images = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    labels, visible = [], []
    for agent in scene.agents:
        lab = rasterize_labels(scene, agent.pose, scene_cfg.label_grid)
        labels.append(lab.dynamic.astype(np.int8))
        visible.append(lab.visible)
    return SceneData(images, scene.poses, scene.agents[0].rigs, np.stack(labels), np.stack(visible), seed)


def build_dataset(scene_cfg: SceneConfig, seeds: Iterable[int]) -> list[SceneData]:
    return [render_scene_data(scene_cfg, int(s)) for s in seeds]


@dataclass
class TrainConfig:
    seed: int = 0
    train_scenes: int = 800
    val_scenes: int = 0
    epochs: int = 4
    batch_size: int = 4
    lr: float = 3e-3
    min_lr: float = 1e-5
    warmup_steps: int = 30
    weight_decay: float = 0.0
    grad_clip: float | None = 5.0
    class_weights: tuple[float, float] = (1.0, 4.0)
    # chance that a training sample uses a non-ego agent as the ego (data augmentation)
    any_agent_as_ego: float = 0.5
    # chance of training CoBEVT on a random subset of agents (keeps it usable for any N)
    agent_subset_prob: float = 0.25
    # chance that a cooperative training sample has a random number of ego cameras blanked,
    # so the model learns to lean on shared maps when its own view fails
    camera_dropout: float = 0.2
    # initialise CoBEVT's SinBEVT and decoder from the trained single-agent model
    warm_start: bool = True
    dtype: str = "f32"
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        for key in ("any_agent_as_ego", "agent_subset_prob", "camera_dropout"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ConfigurationError(f"{key} must lie in [0, 1], got {getattr(self, key)}")

    def np_dtype(self):
        if self.dtype not in ("f32", "f64"):
            raise ConfigurationError(f"dtype must be f32 or f64, got {self.dtype!r}")
        return np.float32 if self.dtype == "f32" else np.float64

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training config keys: {sorted(unknown)}")
        if "scene" in d:
            s = dict(d["scene"])
            if "label_grid" in s:
                s["label_grid"] = BevGrid(**s["label_grid"])
            for k in ("agent_count", "image_size"):
                if k in s:
                    s[k] = tuple(s[k])
            d["scene"] = SceneConfig(**s)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "class_weights" in d:
            d["class_weights"] = tuple(d["class_weights"])
        return cls(**d)


def scene_seeds(cfg: TrainConfig, split: str, n: int | None = None) -> list[int]:
    base = {"train": 0, "eval": EVAL_SEED_OFFSET, "val": VAL_SEED_OFFSET}[split]
    count = n if n is not None else {"train": cfg.train_scenes, "val": cfg.val_scenes}.get(split, 0)
    return [base + cfg.seed * 100_000 + i for i in range(count)]


def _batch(scenes: Sequence[SceneData], egos: Sequence[int], dtype, drop_cameras: int = 0):
    views = [d.view(e, dtype) for d, e in zip(scenes, egos)]
    images = np.stack([v[0] for v in views])
    if drop_cameras:
        images[:, 0, :drop_cameras] = 0.0
    return images, [v[1] for v in views], np.stack([v[2] for v in views]), np.stack([v[3] for v in views])


def forward_batch(model: nn.Module, images: np.ndarray, rigs, poses, max_agents: int | None = None) -> Tensor:
    """Ego logits [B, H, W, K] for a batch of scenes with equal agent counts."""
    x = Tensor(images)
    if isinstance(model, CoBEVT):
        return model(x, rigs, poses, max_agents=max_agents)
    return model(x, rigs)


def forward_scene(model: nn.Module, data: SceneData, max_agents: int | None = None,
                  drop_cameras: int = 0, dtype=np.float32) -> Tensor:
    """Ego logits [H, W, K] for one scene; ``drop_cameras`` blanks that many ego cameras."""
    images, poses, _, _ = _batch([data], [0], dtype, drop_cameras)
    return index_select(forward_batch(model, images, data.rigs, poses, max_agents), np.array(0), axis=0)


def _groups(train: Sequence[SceneData]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i, d in enumerate(train):
        groups.setdefault(d.num_agents, []).append(i)
    return groups


def train_model(model: nn.Module, train: Sequence[SceneData], cfg: TrainConfig,
                val: Sequence[SceneData] = (), log: Callable[[dict], None] | None = None) -> list[dict]:
    """Adam + cosine annealing over batches of scenes.  Returns per-epoch records.

    Each epoch visits every training scene once (batches are drawn among
    scenes with equal agent counts).  Raises :class:`NonFiniteError` naming
    the step when the loss or any parameter stops being finite.
    """
    if not train:
        raise ConfigurationError("training set is empty")
    dtype = cfg.np_dtype()
    rng = np.random.default_rng([cfg.seed, 17, 0 if model.kind == "single" else 1])
    opt = nn.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip)
    bs = max(1, cfg.batch_size)
    groups = _groups(train)
    per_epoch = sum(math.ceil(len(g) / bs) for g in groups.values())
    total = cfg.epochs * per_epoch
    weights = np.asarray(cfg.class_weights, dtype=np.float64)
    cooperative = isinstance(model, CoBEVT)
    n_max = model.config.fusebevt.max_agents if cooperative else 1
    records = []
    step = 0
    lr = cfg.lr
    for epoch in range(cfg.epochs):
        model.train()
        t0 = time.perf_counter()
        batches = []
        for members in groups.values():
            perm = rng.permutation(members)
            batches.extend(perm[i:i + bs] for i in range(0, len(perm), bs))
        losses = []
        for bi in rng.permutation(len(batches)):
            scenes = [train[i] for i in batches[bi]]
            egos = [int(rng.integers(d.num_agents)) if rng.random() < cfg.any_agent_as_ego else 0 for d in scenes]
            images, poses, labels, visible = _batch(scenes, egos, dtype)
            if cooperative and cfg.camera_dropout > 0:
                m = images.shape[2]
                for b in range(len(scenes)):
                    if rng.random() < cfg.camera_dropout:
                        images[b, 0, rng.choice(m, int(rng.integers(1, m + 1)), replace=False)] = 0.0
            max_agents = None
            if cooperative and rng.random() < cfg.agent_subset_prob:
                max_agents = int(rng.integers(1, n_max + 1))
            lr = nn.cosine_lr(step, total, cfg.lr, cfg.min_lr, cfg.warmup_steps)
            logits = forward_batch(model, images, scenes[0].rigs, poses, max_agents)
            loss = weighted_cross_entropy(logits, labels, weights, mask=visible)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteError(f"non-finite loss {value} at epoch {epoch} step {step} "
                                     f"(scene seeds {[d.seed for d in scenes]}, lr {lr:.3g})")
            opt.zero_grad()
            backward(loss)
            opt.step(lr)
            bad = [p.name for p in model.parameters() if not np.all(np.isfinite(p.data))]
            if bad:
                raise NonFiniteError(f"non-finite parameters {bad[:3]} after step {step} (epoch {epoch})")
            losses.append(value)
            step += 1
        rec = {"event": "epoch", "model": model.kind, "epoch": epoch, "loss": float(np.mean(losses)),
               "lr": lr, "seconds": round(time.perf_counter() - t0, 3)}
        if val:
            rec["val_iou"] = evaluate(model, val)["iou"]
        records.append(rec)
        if log is not None:
            log(rec)
    model.eval()
    return records


def warm_start(cooperative: CoBEVT, single: SingleAgentModel) -> None:
    """Copy the single-agent SinBEVT and decoder weights (and BN buffers) into ``cooperative``."""
    state = single.state_dict()
    own = cooperative.state_dict()
    for name, arr in state.items():
        if name not in own or own[name].shape != arr.shape:
            raise ConfigurationError(f"cannot warm-start: {name} differs between models")
        own[name] = arr
    cooperative.load_state_dict(own)


def evaluate(model: nn.Module, scenes: Sequence[SceneData], max_agents: int | None = None,
             drop_cameras: int = 0, batch_size: int = 8) -> dict:
    """Dataset-level vehicle IoU restricted to visible cells."""
    was_training = model.training
    model.eval()
    dtype = model.parameters()[0].dtype
    inter = union = 0
    with no_grad():
        for members in _groups(scenes).values():
            for k in range(0, len(members), batch_size):
                chunk = [scenes[i] for i in members[k:k + batch_size]]
                images, poses, labels, visible = _batch(chunk, [0] * len(chunk), dtype, drop_cameras)
                pred = forward_batch(model, images, chunk[0].rigs, poses, max_agents).data.argmax(axis=-1)
                i, u = iou_counts(pred, labels, 1, visible)
                inter += i
                union += u
    if was_training:
        model.train()
    return {"iou": 1.0 if union == 0 else inter / union, "intersection": int(inter), "union": int(union),
            "scenes": len(scenes)}


def eval_report(model: nn.Module, scenes: Sequence[SceneData], compression_rate: int | None = None,
                drop_cameras: int = 0, max_agents: int | None = None) -> dict:
    cfg: ModelConfig = model.config
    h = cfg.sinbevt.bev_sizes[-1]
    rate = cfg.compressor.rate if compression_rate is None else compression_rate
    res = evaluate(model, scenes, max_agents, drop_cameras)
    res.update({
        "event": "eval", "model": model.kind, "drop_cameras": drop_cameras,
        "max_agents": max_agents, "compression_rate": rate,
        "payload_bytes": payload_bytes(h, h, cfg.sinbevt.dim, rate) if model.kind == "cobevt" else 0,
        # what the same rate would cost on a 32x32x128 feature map (reference-scale model)
        "payload_bytes_full_scale": payload_bytes(32, 32, 128, rate) if model.kind == "cobevt" else 0,
    })
    return res


def json_line(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True)


def cooperative_study(cfg: TrainConfig, eval_scenes: int = 200, agent_counts: Sequence[int] = (1, 2, 3, 4),
                      log: Callable[[dict], None] | None = None) -> dict:
    """Train both models on the same scenes and run the paired held-out comparison.

    Returns IoU for the single-agent model and CoBEVT, CoBEVT IoU per agent
    cap, both models with every ego camera blanked, and wall-clock seconds.
    """
    t0 = time.perf_counter()
    emit = log or (lambda rec: None)
    train = build_dataset(cfg.scene, scene_seeds(cfg, "train"))
    val = build_dataset(cfg.scene, scene_seeds(cfg, "val"))
    held_out = build_dataset(cfg.scene, scene_seeds(cfg, "eval", eval_scenes))
    emit({"event": "data", "train": len(train), "eval": len(held_out),
          "seconds": round(time.perf_counter() - t0, 3)})
    dtype = cfg.np_dtype()
    single = build_model("single", cfg.model, seed=cfg.seed).to(dtype)
    train_model(single, train, cfg, val, emit)
    coop = build_model("cobevt", cfg.model, seed=cfg.seed).to(dtype)
    if cfg.warm_start:
        warm_start(coop, single)
    train_model(coop, train, cfg, val, emit)
    cameras = len(held_out[0].rigs) if held_out else 0
    out = {
        "single": evaluate(single, held_out)["iou"],
        "cobevt": evaluate(coop, held_out)["iou"],
        "cobevt_by_agents": {n: evaluate(coop, held_out, max_agents=n)["iou"] for n in agent_counts},
        "single_all_cameras_dropped": evaluate(single, held_out, drop_cameras=cameras)["iou"],
        "cobevt_all_cameras_dropped": evaluate(coop, held_out, drop_cameras=cameras)["iou"],
    }
    out["seconds"] = round(time.perf_counter() - t0, 1)
    emit({"event": "study", **{k: v for k, v in out.items() if k != "cobevt_by_agents"},
          "cobevt_by_agents": {str(k): v for k, v in out["cobevt_by_agents"].items()}})
    out["models"] = (single, coop)
    return out
