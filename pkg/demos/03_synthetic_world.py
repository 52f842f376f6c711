"""The synthetic driving world used for training and evaluation.

Every scene is a flat road layout with boxes (vehicles and walls) and a few
cooperating agents, each carrying four cameras.  Cameras are rendered by
casting one ray per image column, so a vehicle hidden behind another box is
genuinely invisible to the ego while a nearby agent may still see it.  That
occlusion is what gives sharing something to fix.

Writes PPM images to ``demo_out/`` (any image viewer opens them).
"""
from pathlib import Path

import numpy as np

from faxbev.dump import write_ppm
from faxbev.scenes import (VEHICLE, SceneConfig, boxes_seen_by, ego_occluded_boxes, generate_scene,
                           iou, rasterize_labels, render_views)

out = Path("demo_out")
out.mkdir(exist_ok=True)
cfg = SceneConfig()
scene = generate_scene(cfg, seed=7)

print(f"layout {scene.layout.template!r}, {len(scene.agents)} agents, {len(scene.boxes)} boxes")
for a, spec in enumerate(scene.agents):
    p = spec.pose
    seen = sorted(boxes_seen_by(scene, a))
    print(f"  agent {a} at ({p.x:6.1f}, {p.y:6.1f}) heading {np.degrees(p.yaw):6.1f} deg sees boxes {seen}")
hidden = ego_occluded_boxes(scene)
print("vehicles hidden from the ego but seen by a teammate:", hidden)

# Camera strips: one row per agent, cameras front/left/back/right side by side.
strips = [np.concatenate(list(render_views(scene, a)), axis=1) for a in range(len(scene.agents))]
write_ppm(out / "cameras.ppm", np.concatenate(strips, axis=0))

# Ground truth in the ego frame.  Dark red marks cells no agent can see.
lab = rasterize_labels(scene, scene.ego, cfg.label_grid)
img = np.where(lab.dynamic[..., None] == VEHICLE, 1.0, 0.15) * np.ones(3)
img[~lab.visible] = img[~lab.visible] * 0.5 + [0.4, 0.0, 0.0]
write_ppm(out / "ego_label.ppm", np.kron(img, np.ones((4, 4, 1))))
print(f"vehicle cells {int(lab.dynamic.sum())}, visible cells {int(lab.visible.sum())} of {lab.visible.size}")

# IoU counts only the vehicle class inside the visible area.
blurred = np.roll(lab.dynamic, 1, axis=0)
print(f"IoU of the label with itself shifted one row: {iou(blurred, lab):.3f}")
print("wrote", ", ".join(str(p) for p in sorted(out.glob("*.ppm"))))
