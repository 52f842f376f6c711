"""Synthetic multi-agent driving scenes.

A scene is a flat world with a road layout (straight road or four-way
intersection), oriented-rectangle vehicles and occluders, and a few
camera-equipped agents.  Cameras are rendered by casting one ray per image
column in the ground plane; the nearest hit decides the column's content and
vertical extent.  Everything is a pure function of ``(config, seed)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from faxbev.errors import ConfigurationError, DimensionError, FormatError
from faxbev.geometry import BevGrid, CameraRig, Pose2D, surround_rigs

SCENE_FORMAT_VERSION = 1

VEHICLE, OCCLUDER = "vehicle", "occluder"
BOX_CLASSES = (VEHICLE, OCCLUDER)
DRIVABLE, LANE = "drivable", "lane"

# dynamic head: 0 background, 1 vehicle; static head: 0 background, 1 drivable, 2 lane
DYNAMIC_CLASSES = ("background", VEHICLE)
STATIC_CLASSES = ("background", DRIVABLE, LANE)

VEHICLE_SIZE = (4.5, 2.0)
HEIGHTS = {VEHICLE: 1.5, OCCLUDER: 3.0}
CAMERA_HEIGHT = 1.6

SKY = np.array([0.55, 0.70, 0.90])
GRASS = np.array([0.30, 0.42, 0.28])
ROAD = np.array([0.42, 0.42, 0.42])
LANE_PAINT = np.array([0.90, 0.90, 0.85])
COLORS = {VEHICLE: np.array([0.90, 0.15, 0.10]), OCCLUDER: np.array([0.55, 0.50, 0.35])}


@dataclass(frozen=True)
class Box:
    """Oriented rectangle: ``extent`` is (length along yaw, width)."""

    cx: float
    cy: float
    length: float
    width: float
    yaw: float
    cls: str = VEHICLE

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise ValueError(f"box extents must be positive, got {self.length}x{self.width}")
        if self.cls not in BOX_CLASSES:
            raise ValueError(f"unknown box class {self.cls!r}")

    @property
    def height(self) -> float:
        return HEIGHTS[self.cls]

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.length / 2, self.width / 2
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        return local @ np.array([[c, s], [-s, c]]) + [self.cx, self.cy]

    def contains(self, pts: np.ndarray) -> np.ndarray:
        d = np.asarray(pts) - [self.cx, self.cy]
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        u = d[..., 0] * c + d[..., 1] * s
        v = -d[..., 0] * s + d[..., 1] * c
        return (np.abs(u) <= self.length / 2) & (np.abs(v) <= self.width / 2)


@dataclass
class Layout:
    template: str
    drivable: list[np.ndarray] = field(default_factory=list)
    lanes: list[np.ndarray] = field(default_factory=list)

    def classify(self, pts: np.ndarray) -> np.ndarray:
        """Static class id (0 bg, 1 drivable, 2 lane) of world points [..., 2]."""
        out = np.zeros(pts.shape[:-1], dtype=np.int64)
        for poly in self.drivable:
            out[points_in_polygon(pts, poly)] = 1
        for poly in self.lanes:
            out[points_in_polygon(pts, poly)] = 2
        return out

    def road_headings(self) -> list[float]:
        return [0.0, math.pi] if self.template == "straight" else [0.0, math.pi / 2, math.pi, -math.pi / 2]


@dataclass
class AgentSpec:
    pose: Pose2D
    rigs: list[CameraRig]


@dataclass
class SceneSample:
    agents: list[AgentSpec]
    boxes: list[Box]
    layout: Layout
    seed: int

    @property
    def ego(self) -> Pose2D:
        return self.agents[0].pose

    @property
    def poses(self) -> list[Pose2D]:
        return [a.pose for a in self.agents]

    def vehicles(self) -> list[Box]:
        return [b for b in self.boxes if b.cls == VEHICLE]


@dataclass(frozen=True)
class SceneConfig:
    agent_count: tuple[int, int] = (4, 4)
    box_density: float = 5.0          # expected vehicles per 1000 m^2 of the label area
    occluder_density: float = 0.5     # expected free-standing occluders per scene
    occlusion_prob: float = 0.8       # chance the ego gets forced occlusions
    parked_fraction: float = 0.3      # vehicles placed off the road
    max_forced_occlusions: int = 2
    label_grid: BevGrid = BevGrid(64, 64, 0.5)
    agent_radius: float = 12.0        # other agents are placed within this distance of the ego
    road_width: float = 8.0
    yaw_noise_deg: float = 5.0
    image_size: tuple[int, int] = (32, 64)
    fov_deg: float = 110.0
    max_attempts: int = 400

    def __post_init__(self):
        lo, hi = self.agent_count
        if lo < 1 or hi < lo:
            raise ConfigurationError(f"agent_count must satisfy 1 <= lo <= hi, got {self.agent_count}")
        if self.box_density < 0 or self.occluder_density < 0:
            raise ConfigurationError("densities must be non-negative")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ConfigurationError("occlusion_prob must lie in [0, 1]")


# -- geometry helpers ------------------------------------------------------------

def points_in_polygon(pts: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd rule, vectorised over points [..., 2]."""
    x, y = pts[..., 0], pts[..., 1]
    inside = np.zeros(x.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        crosses = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (x < xint)
    return inside


def _rect(x0, x1, y0, y1) -> np.ndarray:
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float)


def ray_box_hits(origins: np.ndarray, dirs: np.ndarray, boxes: Sequence[Box]) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit of each ray against oriented boxes (slab test).

    ``origins``: [R, 2] or [2]; ``dirs``: [R, 2] unit vectors.
    Returns (t, box_index) with t=inf and index=-1 where nothing is hit.
    A ray starting inside a box hits it at t=0.
    """
    dirs = np.asarray(dirs, dtype=float)
    origins = np.broadcast_to(np.asarray(origins, dtype=float), dirs.shape)
    nr = dirs.shape[0]
    if not boxes:
        return np.full(nr, np.inf), np.full(nr, -1, dtype=np.int64)
    cx = np.array([b.cx for b in boxes])
    cy = np.array([b.cy for b in boxes])
    c = np.cos([b.yaw for b in boxes])
    s = np.sin([b.yaw for b in boxes])
    hl = np.array([b.length / 2 for b in boxes])
    hw = np.array([b.width / 2 for b in boxes])
    ox = origins[:, 0:1] - cx
    oy = origins[:, 1:2] - cy
    ou = ox * c + oy * s
    ov = -ox * s + oy * c
    du = dirs[:, 0:1] * c + dirs[:, 1:2] * s
    dv = -dirs[:, 0:1] * s + dirs[:, 1:2] * c
    with np.errstate(divide="ignore", invalid="ignore"):
        t1u, t2u = (-hl - ou) / du, (hl - ou) / du
        t1v, t2v = (-hw - ov) / dv, (hw - ov) / dv
    tmin_u = np.where(du == 0, np.where(np.abs(ou) <= hl, -np.inf, np.inf), np.minimum(t1u, t2u))
    tmax_u = np.where(du == 0, np.where(np.abs(ou) <= hl, np.inf, -np.inf), np.maximum(t1u, t2u))
    tmin_v = np.where(dv == 0, np.where(np.abs(ov) <= hw, -np.inf, np.inf), np.minimum(t1v, t2v))
    tmax_v = np.where(dv == 0, np.where(np.abs(ov) <= hw, np.inf, -np.inf), np.maximum(t1v, t2v))
    tnear = np.maximum(tmin_u, tmin_v)
    tfar = np.minimum(tmax_u, tmax_v)
    hit = (tnear <= tfar) & (tfar >= 0)
    t = np.where(hit, np.maximum(tnear, 0.0), np.inf)
    idx = np.argmin(t, axis=1)
    tbest = t[np.arange(nr), idx]
    idx = np.where(np.isfinite(tbest), idx, -1)
    return tbest, idx


def _boxes_overlap(a: Box, b: Box, margin: float = 0.0) -> bool:
    """Separating-axis test on two oriented rectangles, grown by ``margin``."""
    ca, cb = a.corners(), b.corners()
    for box in (a, b):
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        for axis in (np.array([c, s]), np.array([-s, c])):
            pa, pb = ca @ axis, cb @ axis
            if pa.max() + margin < pb.min() or pb.max() + margin < pa.min():
                return False
    return True


# -- rendering ------------------------------------------------------------------

def column_rays(pose: Pose2D, rig: CameraRig) -> tuple[np.ndarray, np.ndarray]:
    """World-frame unit directions of every image column and their lateral slopes."""
    fx, cx = rig.K[0, 0], rig.K[0, 2]
    xc = (np.arange(rig.width) + 0.5 - cx) / fx
    ang = pose.yaw + rig.yaw - np.arctan(xc)
    return np.stack([np.cos(ang), np.sin(ang)], axis=1), xc


def render_camera(scene: SceneSample, pose: Pose2D, rig: CameraRig) -> tuple[np.ndarray, np.ndarray]:
    """Render one camera. Returns (image [h, w, 3] float32, hit box index per column)."""
    dirs, xc = column_rays(pose, rig)
    origin = np.array([pose.x, pose.y])
    t, idx = ray_box_hits(origin, dirs, scene.boxes)
    h, w = rig.height, rig.width
    fy, cy = rig.K[1, 1], rig.K[1, 2]
    yc = (np.arange(h) + 0.5 - cy) / fy                      # [h], positive looks down
    stretch = np.sqrt(1.0 + xc * xc)                          # horizontal distance per unit depth
    img = np.empty((h, w, 3))
    img[:] = SKY
    # ground: rows looking down hit the plane at forward depth CAMERA_HEIGHT / yc
    down = yc > 0
    zg = np.where(down, CAMERA_HEIGHT / np.where(down, yc, 1.0), np.inf)   # [h]
    dist_g = zg[:, None] * stretch[None, :]                                # [h, w]
    gpts = origin + dist_g[..., None] * dirs[None, :, :]
    gcls = scene.layout.classify(np.where(np.isfinite(gpts), gpts, 0.0))
    ground = np.stack([GRASS, ROAD, LANE_PAINT])[gcls]
    ground = ground * _shade(dist_g)[..., None]
    gmask = down[:, None] & np.ones((1, w), dtype=bool)
    # objects: visible rows are those whose ray is between ground and object top at the hit distance
    hit = idx >= 0
    heights = np.array([scene.boxes[i].height if i >= 0 else 0.0 for i in idx])
    z_hit = np.where(hit, t / stretch, np.inf)
    elev = CAMERA_HEIGHT - yc[:, None] * z_hit[None, :]       # [h, w] height of the ray at the hit
    omask = hit[None, :] & (elev >= 0) & (elev <= heights[None, :])
    ocol = np.zeros((w, 3))
    for j in np.nonzero(hit)[0]:
        ocol[j] = COLORS[scene.boxes[idx[j]].cls] * _shade(t[j])
    ground_first = gmask & (dist_g < np.where(hit, t, np.inf)[None, :])
    img = np.where(gmask[..., None], ground, img)
    img = np.where((omask & ~ground_first)[..., None], ocol[None, :, :], img)
    return img.astype(np.float32), idx


def _shade(dist):
    return 1.0 / (1.0 + np.asarray(dist) / 15.0)


def render_views(scene: SceneSample, agent_index: int, render_cfg: SceneConfig | None = None) -> np.ndarray:
    """All camera images of one agent, [M, h, w, 3]."""
    agent = scene.agents[agent_index]
    return np.stack([render_camera(scene, agent.pose, rig)[0] for rig in agent.rigs])


def boxes_seen_by(scene: SceneSample, agent_index: int) -> set[int]:
    agent = scene.agents[agent_index]
    seen: set[int] = set()
    for rig in agent.rigs:
        dirs, _ = column_rays(agent.pose, rig)
        _, idx = ray_box_hits(np.array([agent.pose.x, agent.pose.y]), dirs, scene.boxes)
        seen.update(int(i) for i in idx if i >= 0)
    return seen


# -- labels -------------------------------------------------------------------

@dataclass
class BevLabel:
    dynamic: np.ndarray      # [H, W] int, 0 bg / 1 vehicle
    static: np.ndarray       # [H, W] int, 0 bg / 1 drivable / 2 lane
    visible: np.ndarray      # [H, W] bool, seen by at least one agent

    def for_head(self, head: str) -> np.ndarray:
        return self.dynamic if head == "dynamic" else self.static


def visibility_mask(scene: SceneSample, grid: BevGrid, ego: Pose2D,
                    agents: Sequence[int] | None = None) -> np.ndarray:
    """Cells whose centre is in line of sight of at least one agent.

    A cell inside an object counts as seen when that object is the first
    thing the sight line meets.
    """
    pts = ego.to_world(grid.cell_centers()).reshape(-1, 2)
    vis = np.zeros(len(pts), dtype=bool)
    which = range(len(scene.agents)) if agents is None else agents
    for a in which:
        o = np.array([scene.agents[a].pose.x, scene.agents[a].pose.y])
        d = pts - o
        dist = np.linalg.norm(d, axis=1)
        dirs = d / np.maximum(dist, 1e-9)[:, None]
        t, idx = ray_box_hits(o, dirs, scene.boxes)
        clear = t >= dist - 1e-9
        inside = np.zeros(len(pts), dtype=bool)
        for b in np.unique(idx[idx >= 0]):
            sel = idx == b
            inside[sel] = scene.boxes[b].contains(pts[sel])
        vis |= clear | inside
    return vis.reshape(grid.H, grid.W)


def rasterize_labels(scene: SceneSample, ego: Pose2D, grid: BevGrid) -> BevLabel:
    """Vehicle and road-layout classes on ``grid`` in ``ego``'s frame, plus visibility."""
    pts = ego.to_world(grid.cell_centers())
    dyn = np.zeros((grid.H, grid.W), dtype=np.int64)
    for b in scene.boxes:
        if b.cls == VEHICLE:
            dyn[b.contains(pts)] = 1
    static = scene.layout.classify(pts)
    return BevLabel(dyn, static, visibility_mask(scene, grid, ego))


def iou(pred: np.ndarray, label, class_id: int = 1, mask: np.ndarray | None = None) -> float:
    """Intersection over union of ``class_id``; 1.0 when both sets are empty.

    ``label`` may be a class grid or a :class:`BevLabel` (dynamic head), in
    which case its visibility mask restricts the evaluation.
    """
    counts = iou_counts(pred, label, class_id, mask)
    return 1.0 if counts[1] == 0 else counts[0] / counts[1]


def iou_counts(pred: np.ndarray, label, class_id: int = 1, mask: np.ndarray | None = None) -> tuple[int, int]:
    if isinstance(label, BevLabel):
        if mask is None:
            mask = label.visible
        label = label.dynamic
    pred = np.asarray(pred)
    label = np.asarray(label)
    if pred.shape != label.shape:
        raise DimensionError(f"prediction {pred.shape} and label {label.shape} differ in size")
    m = np.ones(pred.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    p = (pred == class_id) & m
    t = (label == class_id) & m
    return int((p & t).sum()), int((p | t).sum())


# -- generation -------------------------------------------------------------------

def make_layout(template: str, road_width: float, half_len: float = 60.0) -> Layout:
    hw = road_width / 2
    lane = 0.15
    if template == "straight":
        drivable = [_rect(-half_len, half_len, -hw, hw)]
        lanes = [_rect(-half_len, half_len, -lane, lane)]
    elif template == "intersection":
        drivable = [_rect(-half_len, half_len, -hw, hw), _rect(-hw, hw, -half_len, half_len)]
        lanes = [_rect(-half_len, -hw, -lane, lane), _rect(hw, half_len, -lane, lane),
                 _rect(-lane, lane, -half_len, -hw), _rect(-lane, lane, hw, half_len)]
    else:
        raise ConfigurationError(f"unknown layout template {template!r}")
    return Layout(template, drivable, lanes)


def _road_point(rng, layout: Layout, lim: float, road_width: float) -> tuple[float, float, float]:
    """Random (x, y, heading) on the drivable area within ``|x|, |y| <= lim``."""
    hw = road_width / 2 - 1.2
    if layout.template == "intersection" and rng.random() < 0.5:
        x = rng.uniform(-hw, hw)
        y = rng.uniform(-lim, lim)
        heading = math.pi / 2 if x < 0 else -math.pi / 2
    else:
        x = rng.uniform(-lim, lim)
        y = rng.uniform(-hw, hw)
        heading = 0.0 if y < 0 else math.pi
    return x, y, heading


def _agent_rigs(cfg: SceneConfig) -> list[CameraRig]:
    return surround_rigs(cfg.image_size[0], cfg.image_size[1], cfg.fov_deg)


def _free(box: Box, boxes: Sequence[Box], agents: Sequence[Pose2D], margin: float = 0.5) -> bool:
    if any(_boxes_overlap(box, b, margin) for b in boxes):
        return False
    pts = np.array([[p.x, p.y] for p in agents]) if agents else np.zeros((0, 2))
    if len(pts):
        grown = Box(box.cx, box.cy, box.length + 2.5, box.width + 2.5, box.yaw, box.cls)
        if grown.contains(pts).any():
            return False
    return True


def generate_scene(cfg: SceneConfig, seed: int) -> SceneSample:
    """Reproducible random scene; agent 0 is the ego at the world origin facing +x."""
    rng = np.random.default_rng(seed)
    template = "straight" if rng.random() < 0.5 else "intersection"
    layout = make_layout(template, cfg.road_width)
    rigs = _agent_rigs(cfg)
    noise = math.radians(cfg.yaw_noise_deg)
    half = cfg.label_grid.H * cfg.label_grid.meters_per_cell / 2
    lim = half - 1.5
    ego = Pose2D(0.0, 0.0, 0.0)
    poses: list[Pose2D] = [ego]
    boxes: list[Box] = []
    n_agents = int(rng.integers(cfg.agent_count[0], cfg.agent_count[1] + 1))

    area = (2 * half) ** 2
    n_vehicles = int(rng.poisson(cfg.box_density * area / 1000.0)) if cfg.box_density > 0 else 0
    for _ in range(n_vehicles):
        for _attempt in range(cfg.max_attempts):
            if rng.random() < cfg.parked_fraction:
                x, y = rng.uniform(-lim, lim, size=2)
                hd = float(rng.choice(layout.road_headings()))
            else:
                x, y, hd = _road_point(rng, layout, lim, cfg.road_width)
            b = Box(x, y, *VEHICLE_SIZE, hd + rng.normal(0, noise), VEHICLE)
            if math.hypot(x, y) > 4.0 and _free(b, boxes, poses):
                boxes.append(b)
                break
        else:
            raise ConfigurationError(f"could not place {n_vehicles} vehicles; box_density too high")

    n_occ = int(rng.poisson(cfg.occluder_density)) if cfg.occluder_density > 0 else 0
    for _ in range(n_occ):
        for _attempt in range(cfg.max_attempts):
            x, y = rng.uniform(-lim, lim, size=2)
            b = Box(x, y, rng.uniform(2.0, 5.0), rng.uniform(1.0, 3.0), rng.uniform(-math.pi, math.pi), OCCLUDER)
            if math.hypot(x, y) > 5.0 and _free(b, boxes, poses):
                boxes.append(b)
                break

    scene = SceneSample([AgentSpec(ego, rigs)], boxes, layout, seed)
    if cfg.box_density > 0 and rng.random() < cfg.occlusion_prob:
        _force_occlusions(rng, cfg, scene, n_agents, noise, lim)

    # remaining agents, on the road near the ego
    while len(scene.agents) < n_agents:
        for attempt in range(cfg.max_attempts):
            x, y, hd = _road_point(rng, layout, min(cfg.agent_radius, lim), cfg.road_width)
            if attempt >= cfg.max_attempts // 2:   # road is full: fall back to the verge
                x, y = rng.uniform(-1, 1, size=2) * min(cfg.agent_radius, lim)
            p = Pose2D(x, y, hd + rng.normal(0, noise))
            if math.hypot(x, y) > 3.0 and _agent_spot_free(p, scene):
                scene.agents.append(AgentSpec(p, rigs))
                break
        else:
            raise ConfigurationError("could not place agents; scene too crowded")
    return scene


def _agent_spot_free(p: Pose2D, scene: SceneSample) -> bool:
    if not all(math.hypot(p.x - q.x, p.y - q.y) > 3.0 for q in scene.poses):
        return False
    return all(_free(b, [], [p]) for b in scene.boxes)


def _far_vehicle(rng, cfg: SceneConfig, scene: SceneSample, noise: float, lim: float) -> int | None:
    for _attempt in range(cfg.max_attempts):
        x, y = rng.uniform(-lim, lim, size=2)
        hd = float(rng.choice(scene.layout.road_headings()))
        b = Box(x, y, *VEHICLE_SIZE, hd + rng.normal(0, noise), VEHICLE)
        if math.hypot(x, y) >= 8.0 and _free(b, scene.boxes, scene.poses):
            scene.boxes.append(b)
            return len(scene.boxes) - 1
    return None


def _force_occlusions(rng, cfg: SceneConfig, scene: SceneSample, n_agents: int, noise: float, lim: float) -> None:
    """Hide up to ``max_forced_occlusions`` vehicles from the ego behind occluders,
    each seen by some other agent (adding a helper agent if needed)."""
    vehicles = [i for i, b in enumerate(scene.boxes) if b.cls == VEHICLE and math.hypot(b.cx, b.cy) >= 7.0]
    rng.shuffle(vehicles)
    k = int(rng.integers(1, cfg.max_forced_occlusions + 1))
    done = 0
    extra = 0
    while vehicles or (done == 0 and extra < 40):
        if vehicles:
            vi = vehicles.pop(0)
        else:
            extra += 1
            vi = _far_vehicle(rng, cfg, scene, noise, lim)
            if vi is None:
                continue
        if done >= k:
            break
        target = scene.boxes[vi]
        ang = math.atan2(target.cy, target.cx)
        placed = False
        for _attempt in range(40):
            f = rng.uniform(0.35, 0.6)
            radius = 0.5 * math.hypot(*VEHICLE_SIZE)
            half_len = radius * f + 0.8
            occ = Box(target.cx * f, target.cy * f, 2 * half_len, 1.0, ang + math.pi / 2, OCCLUDER)
            if not _free(occ, scene.boxes, scene.poses, 0.2):
                continue
            scene.boxes.append(occ)
            if vi in boxes_seen_by(scene, 0):
                scene.boxes.pop()
                continue
            placed = True
            break
        if not placed:
            continue
        if any(vi in boxes_seen_by(scene, a) for a in range(1, len(scene.agents))):
            done += 1
            continue
        if len(scene.agents) >= n_agents:
            scene.boxes.pop()
            continue
        helper = _place_helper(rng, cfg, scene, vi, noise, lim)
        if helper is None:
            scene.boxes.pop()
            continue
        done += 1
    if done == 0 and cfg.occlusion_prob >= 1.0:
        raise ConfigurationError("could not construct a forced occlusion for this seed")


def _place_helper(rng, cfg, scene: SceneSample, vi: int, noise: float, lim: float):
    target = scene.boxes[vi]
    rigs = scene.agents[0].rigs
    for _attempt in range(cfg.max_attempts):
        x, y, hd = _road_point(rng, scene.layout, lim, cfg.road_width)
        if not 4.0 < math.hypot(x - target.cx, y - target.cy) < 12.0 or math.hypot(x, y) < 3.0:
            continue
        if math.hypot(x, y) > cfg.agent_radius + 4.0:
            continue
        p = Pose2D(x, y, hd + rng.normal(0, noise))
        if not _agent_spot_free(p, scene):
            continue
        scene.agents.append(AgentSpec(p, rigs))
        if vi in boxes_seen_by(scene, len(scene.agents) - 1):
            return p
        scene.agents.pop()
    return None


def ego_occluded_boxes(scene: SceneSample) -> list[int]:
    """Vehicles no ego camera column hits but some other agent's camera does."""
    ego_seen = boxes_seen_by(scene, 0)
    others = set()
    for a in range(1, len(scene.agents)):
        others |= boxes_seen_by(scene, a)
    return [i for i, b in enumerate(scene.boxes) if b.cls == VEHICLE and i not in ego_seen and i in others]


# -- scene files -------------------------------------------------------------

def scene_to_dict(scene: SceneSample) -> dict:
    return {
        "format": "faxbev-scene",
        "version": SCENE_FORMAT_VERSION,
        "seed": int(scene.seed),
        "layout": {
            "template": scene.layout.template,
            "drivable": [p.tolist() for p in scene.layout.drivable],
            "lanes": [p.tolist() for p in scene.layout.lanes],
        },
        "agents": [
            {
                "pose": {"x": a.pose.x, "y": a.pose.y, "yaw": a.pose.yaw},
                "cameras": [
                    {"K": r.K.tolist(), "R": r.R.tolist(), "t": r.t.tolist(),
                     "height": r.height, "width": r.width, "yaw": r.yaw}
                    for r in a.rigs
                ],
            }
            for a in scene.agents
        ],
        "boxes": [asdict(b) for b in scene.boxes],
    }


def scene_from_dict(d: dict) -> SceneSample:
    if d.get("format") != "faxbev-scene":
        raise FormatError("not a faxbev scene file")
    if d.get("version") != SCENE_FORMAT_VERSION:
        raise FormatError(f"unsupported scene version {d.get('version')}")
    lay = d["layout"]
    layout = Layout(lay["template"], [np.array(p, dtype=float) for p in lay["drivable"]],
                    [np.array(p, dtype=float) for p in lay["lanes"]])
    agents = []
    for a in d["agents"]:
        rigs = [CameraRig(np.array(c["K"]), np.array(c["R"]), np.array(c["t"]), c["height"], c["width"],
                          c.get("yaw", 0.0)) for c in a["cameras"]]
        p = a["pose"]
        agents.append(AgentSpec(Pose2D(p["x"], p["y"], p["yaw"]), rigs))
    if not agents:
        raise FormatError("scene has no agents")
    boxes = [Box(**b) for b in d["boxes"]]
    return SceneSample(agents, boxes, layout, int(d["seed"]))


def save_scene(path, scene: SceneSample) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), indent=1))


def load_scene(path) -> SceneSample:
    return scene_from_dict(json.loads(Path(path).read_text()))
