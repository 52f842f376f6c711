"""Sharing BEV maps between vehicles.

Each vehicle predicts features in its own frame: row 0 is straight ahead,
column 0 is to the left.  Before fusing, the ego resamples every sender's map
into its own frame with a bilinear warp built from the two poses.
"""
import math

import numpy as np

from faxbev.geometry import BevGrid, Pose2D, in_comm_range, surround_rigs, warp_features
from faxbev.tensor import Tensor

grid = BevGrid(8, 8, 1.0)
ego = Pose2D(0.0, 0.0, 0.0)

# A sender with a single hot cell just ahead and right of itself.
feat = np.zeros((8, 8, 1))
feat[2, 5] = 1.0


def show(title, arr):
    print(title)
    for row in arr[..., 0]:
        print("  " + " ".join("#" if v > 0.5 else ("+" if v > 0.05 else ".") for v in row))


show("sender's own view", feat)
for label, pose in [("sender 2 m ahead of the ego", Pose2D(2.0, 0.0, 0.0)),
                    ("sender 2 m to the ego's left", Pose2D(0.0, 2.0, 0.0)),
                    ("sender turned 90 degrees left", Pose2D(0.0, 0.0, math.pi / 2)),
                    ("sender 1.5 m ahead (fractional shift)", Pose2D(1.5, 0.0, 0.0))]:
    show(label, warp_features(Tensor(feat), pose, ego, grid).data)

# The warp is linear, so gradients flow back into the sender's features.
f = Tensor(np.random.default_rng(0).standard_normal((8, 8, 4)), requires_grad=True)
warp_features(f, Pose2D(1.0, -1.0, 0.3), ego, grid).sum().backward()
print("\ncells of the sender map that reach the ego grid:", int((np.abs(f.grad[..., 0]) > 0).sum()), "of 64")

poses = [ego, Pose2D(30, 5, 0), Pose2D(69.9, 0, 1), Pose2D(0, 71, 0)]
print("within 70 m of the ego:", in_comm_range(poses, 0, 70.0).tolist())

print("\nsurround rig: camera yaw (deg), mount point and the ray through the image centre (ego frame)")
for rig in surround_rigs():
    ray = rig.rays((2, 2)).mean(axis=(0, 1))
    ray = np.round(ray / np.linalg.norm(ray), 3) + 0.0
    print(f"  {math.degrees(rig.yaw):6.1f}  {rig.origin.round(2).tolist()}  {ray.tolist()}")
