"""Artifact dumps for one scene: attention maps, warped shared features, predictions.

Tensors go to ``.tdump`` files; predictions also get PPM renderings (label,
prediction and the ego camera strip) so they can be eyeballed without any
plotting dependency.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from faxbev.errors import UsageError
from faxbev.io import save_tensor
from faxbev.models import CoBEVT
from faxbev.scenes import SceneConfig
from faxbev.tensor import Tensor, no_grad

WHAT = ("attention-maps", "warped-features", "predictions")


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary PPM (P6) from an [H, W, 3] array in [0, 1] or uint8."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected [H, W, 3], got {rgb.shape}")
    if rgb.dtype != np.uint8:
        rgb = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    h, w = rgb.shape[:2]
    Path(path).write_bytes(f"P6 {w} {h} 255\n".encode() + rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path} is not a binary PPM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)


def _mask_rgb(label: np.ndarray, pred: np.ndarray, visible: np.ndarray) -> np.ndarray:
    """Side-by-side label | prediction; vehicles white, background dark, invisible cells red-tinted."""
    def paint(m):
        img = np.where(m[..., None] == 1, 1.0, 0.15) * np.ones(3)
        img[~visible] = img[~visible] * 0.5 + np.array([0.4, 0.0, 0.0])
        return img
    gap = np.ones((label.shape[0], 2, 3))
    return np.concatenate([paint(label), gap, paint(pred)], axis=1)


def dump_scene(model, scene_cfg: SceneConfig, seed: int, what: str, out) -> list[Path]:
    """Run ``model`` on scene ``seed`` and write the requested artifacts into ``out``."""
    from faxbev.train import render_scene_data  # train imports models; keep this lazy

    if what not in WHAT:
        raise UsageError(f"unknown dump kind {what!r}; choose from {', '.join(WHAT)}")
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create {out}: {exc.strerror}") from None
    if what == "warped-features" and not isinstance(model, CoBEVT):
        raise UsageError("warped features exist only for the cooperative model")
    data = render_scene_data(scene_cfg, seed)
    probe: dict = {}
    model.eval()
    with no_grad():
        images, poses, _, _ = data.view(0, np.float32)
        if isinstance(model, CoBEVT):
            logits = model(Tensor(images), data.rigs, poses, probe=probe)
        else:
            logits = model(Tensor(images), data.rigs, probe=probe)
    written: list[Path] = []

    def save(name, arr):
        p = out / name
        try:
            save_tensor(p, np.asarray(arr))
        except OSError as exc:
            raise UsageError(f"cannot write {p}: {exc.strerror}") from None
        written.append(p)

    if what == "attention-maps":
        for key in sorted(k for k in probe if k != "warped"):
            for j, weights in enumerate(probe[key]):
                save(f"attn.{key}.{j}.tdump", weights)
    elif what == "warped-features":
        for j, feat in enumerate(probe["warped"]):
            save(f"warped.{j + 1}.tdump", feat)
    else:
        save("logits.tdump", logits.data)
        pred = logits.data.argmax(axis=-1)
        p = out / "prediction.ppm"
        write_ppm(p, _mask_rgb(data.label, pred, data.visible[0]))
        written.append(p)
        p = out / "ego_cameras.ppm"
        write_ppm(p, np.concatenate(list(data.images[0]), axis=1))
        written.append(p)
    return written
