"""Patch-based training of the DAN with the cost-sensitive Huber loss.

Every iteration draws its randomness from ``default_rng([seed, iteration])``,
so a run resumed from a checkpoint at iteration k replays exactly the same
scene choices, crops and noise as an uninterrupted run.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dan as dan_mod
from .annot import SceneAnnotation, load_annotation, pixel_key
from .densegen import StructuredMapConfig, structured_density_map
from .errors import ConfigError, IoFailure, MalformedFile, PatchTooLarge
from .evalmetrics import mae_mse
from .lossopt import AdamState, HuberParams, adam_step, l2_report, structured_loss
from .pgm import read_pgm
from .synthgen import SynthScene, read_manifest

log = logging.getLogger(__name__)

OPT_MAGIC = b"ADAM"


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    iterations: int = 20000
    patch_size: int | None = None  # None: half of each image side (1/4 of the area)
    flip_prob: float = 0.5
    noise_sigma: float = 0.01
    seed: int = 0
    checkpoint_every: int = 0
    eval_every: int = 0  # 0: once per epoch over the training split
    weight_decay: float = 0.0
    val_fraction: float = 0.2
    loss: str = "huber"
    weighted: bool = True
    huber: HuberParams = field(default_factory=HuberParams)
    map_config: StructuredMapConfig = field(default_factory=StructuredMapConfig)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.patch_size is not None and (self.patch_size <= 0 or self.patch_size % 4):
            raise ConfigError("patch_size must be a positive multiple of 4")
        if not 0 <= self.flip_prob <= 1 or self.noise_sigma < 0:
            raise ConfigError("flip_prob must be in [0, 1] and noise_sigma >= 0")
        if self.loss not in ("huber", "l2"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must be in [0, 1)")

    def patch_shape(self, height: int, width: int) -> tuple[int, int]:
        if self.patch_size is not None:
            return self.patch_size, self.patch_size
        return (height // 2) // 4 * 4, (width // 2) // 4 * 4


@dataclass
class TrainLog:
    iteration: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    lam: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    dead_fraction: list[float] = field(default_factory=list)
    val_iteration: list[int] = field(default_factory=list)
    val_mae: list[float] = field(default_factory=list)

    def extend(self, other: "TrainLog") -> None:
        for f in dataclasses.fields(self):
            getattr(self, f.name).extend(getattr(other, f.name))

    def write_tsv(self, path) -> None:
        rows = ["iteration\tloss\tlambda\tgrad_norm\tdead_fraction"]
        for row in zip(self.iteration, self.loss, self.lam, self.grad_norm, self.dead_fraction):
            rows.append("%d\t%r\t%r\t%r\t%r" % row)
        Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")

    def write_val_tsv(self, path) -> None:
        rows = ["iteration\tval_mae"]
        rows.extend("%d\t%r" % r for r in zip(self.val_iteration, self.val_mae))
        Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


# --- data ---------------------------------------------------------------

def load_scenes(manifest) -> list[SynthScene]:
    return [SynthScene(read_pgm(e.image_path), load_annotation(e.annotation_path)) for e in read_manifest(manifest)]


def split_scenes(scenes, val_fraction: float):
    """Hold out the last ``round(val_fraction * n)`` scenes (manifest order)."""
    n_val = int(round(val_fraction * len(scenes)))
    if len(scenes) > 1:
        n_val = min(max(n_val, 1 if val_fraction > 0 else 0), len(scenes) - 1)
    else:
        n_val = 0
    return scenes[: len(scenes) - n_val], scenes[len(scenes) - n_val :]


def crop_patch(scene: SynthScene, patch_shape, rng):
    """Uniformly placed crop; returns (image patch, annotation of points inside it).

    A point belongs to the crop when the pixel it rounds to does.
    """
    ph, pw = patch_shape
    H, W = scene.image.shape
    if ph > H or pw > W:
        raise PatchTooLarge(f"patch {ph}x{pw} larger than image {H}x{W}")
    if ph % 4 or pw % 4:
        raise PatchTooLarge(f"patch sides {ph}x{pw} must be divisible by 4")
    top = int(rng.integers(0, H - ph + 1))
    left = int(rng.integers(0, W - pw + 1))
    patch = scene.image[top : top + ph, left : left + pw]
    pts = []
    for r, c in scene.annotation.points:
        i, j = pixel_key(r, c)
        if top <= i < top + ph and left <= j < left + pw:
            # a center within half a pixel of the crop edge is pulled onto the edge
            pts.append((min(max(r - top, 0.0), ph - 1.0), min(max(c - left, 0.0), pw - 1.0)))
    pts = tuple(pts)
    return patch, SceneAnnotation(ph, pw, pts, scene.annotation.scene_id)


def flip_horizontal(patch: np.ndarray, ann: SceneAnnotation):
    W = ann.image_width
    pts = tuple((r, (W - 1) - c) for r, c in ann.points)
    return patch[:, ::-1].copy(), SceneAnnotation(ann.image_height, W, pts, ann.scene_id)


def augment(patch: np.ndarray, ann: SceneAnnotation, flip_prob: float, noise_sigma: float, rng):
    # both draws always happen so the stream length does not depend on outcomes
    do_flip = rng.random() < flip_prob
    noise = rng.normal(0.0, 1.0, size=patch.shape)
    if do_flip:
        patch, ann = flip_horizontal(patch, ann)
    if noise_sigma > 0:
        patch = np.clip(patch + noise_sigma * noise, 0.0, 1.0)
    return patch, ann


# --- training -----------------------------------------------------------

def _grad_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))


def validation_mae(model, scenes) -> float:
    pairs = [(dan_mod.predict_count(model, s.image)[0], s.annotation.count()) for s in scenes]
    return mae_mse(pairs)[0]


def train_step(model, image, ann, cfg: TrainConfig, state: AdamState):
    """Forward, loss, backward and one Adam update; returns (report, grad_norm, pass)."""
    target = structured_density_map(ann, cfg.map_config).values
    ps = dan_mod.run(model, image)
    pred = ps.values()[0]
    if cfg.loss == "huber":
        rep = structured_loss(pred, target, cfg.huber, weighted=cfg.weighted)
    else:
        rep = l2_report(pred, target)
    grads = ps.backward(rep.grad)
    gnorm = _grad_norm(grads)
    adam_step(model.param_arrays(), grads, state, cfg.weight_decay)
    return rep, gnorm, ps


def train(
    model,
    scenes,
    cfg: TrainConfig,
    state: AdamState | None = None,
    start_iteration: int = 0,
    checkpoint_dir=None,
):
    """Train a copy of ``model``; returns (model, TrainLog, AdamState).

    ``scenes`` is a manifest path or an already loaded list of SynthScene.
    Pass ``state`` and ``start_iteration`` to resume from a checkpoint.
    """
    if not isinstance(scenes, list):
        scenes = load_scenes(scenes)
    if not scenes:
        raise ConfigError("dataset is empty")
    train_set, val_set = split_scenes(scenes, cfg.val_fraction)
    model = model.copy()
    if state is None:
        state = AdamState(learning_rate=cfg.learning_rate)
        state.init_for(model.param_arrays())
    logd = TrainLog()
    eval_every = cfg.eval_every or len(train_set)
    for it in range(start_iteration, cfg.iterations):
        rng = np.random.default_rng([cfg.seed, it])
        scene = train_set[int(rng.integers(len(train_set)))]
        H, W = scene.image.shape
        patch, ann = crop_patch(scene, cfg.patch_shape(H, W), rng)
        patch, ann = augment(patch, ann, cfg.flip_prob, cfg.noise_sigma, rng)
        rep, gnorm, ps = train_step(model, patch, ann, cfg, state)
        alive = ps.unit_alive()
        logd.iteration.append(it)
        logd.loss.append(rep.loss_value)
        logd.lam.append(rep.lam)
        logd.grad_norm.append(gnorm)
        logd.dead_fraction.append(float(1.0 - alive.mean()) if alive.size else 0.0)
        done = it + 1
        if val_set and (done % eval_every == 0 or done == cfg.iterations):
            logd.val_iteration.append(done)
            logd.val_mae.append(validation_mae(model, val_set))
            log.info("iter %d loss %.5g val_mae %.4g", done, rep.loss_value, logd.val_mae[-1])
        if checkpoint_dir is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            save_checkpoint(model, state, Path(checkpoint_dir) / f"ckpt_{done:06d}.danw", done)
    return model, logd, state


# --- checkpoints ---------------------------------------------------------

def checkpoint_bytes(model, state: AdamState | None = None, iteration: int = 0) -> bytes:
    """DANW model block, optionally followed by an ADAM optimizer block.

    ADAM block: magic, u64 iteration, u64 step_count, f64 lr/beta1/beta2/eps,
    then f32 first and second moments per parameter in declaration order.
    """
    parts = [dan_mod.model_to_bytes(model)]
    if state is not None:
        parts.append(OPT_MAGIC)
        parts.append(struct.pack("<QQ", iteration, state.step_count))
        parts.append(struct.pack("<dddd", state.learning_rate, state.beta1, state.beta2, state.eps))
        moments = state.first_moment or [np.zeros_like(p) for p in model.param_arrays()]
        seconds = state.second_moment or [np.zeros_like(p) for p in model.param_arrays()]
        for m in moments:
            parts.append(np.ascontiguousarray(m, dtype="<f4").tobytes())
        for v in seconds:
            parts.append(np.ascontiguousarray(v, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model, state: AdamState | None, path, iteration: int = 0) -> None:
    try:
        Path(path).write_bytes(checkpoint_bytes(model, state, iteration))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_checkpoint(path):
    """Returns (model, AdamState or None, iteration)."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    rd = dan_mod.read_header(buf)
    model = dan_mod.model_from_reader(rd)
    if rd.off == len(buf):
        return model, None, 0
    if buf[rd.off : rd.off + 4] != OPT_MAGIC:
        raise MalformedFile("unexpected trailing data in checkpoint")
    rd.off += 4
    iteration, steps = rd.take("<QQ")
    lr, b1, b2, eps = rd.take("<dddd")
    shapes = [p.shape for p in model.params]
    first = [rd.array(s).copy() for s in shapes]
    second = [rd.array(s).copy() for s in shapes]
    if rd.off != len(buf):
        raise MalformedFile("trailing bytes after optimizer block")
    state = AdamState(lr, b1, b2, eps, steps, first, second)
    return model, state, iteration


# --- key = value config files -------------------------------------------

_MODEL_KEYS = {
    "trunk_channels": "ints",
    "branch_hidden": int,
    "branch_kernel": int,
    "trunk_kernel": int,
    "init_epsilon": float,
    "leaky_slope": float,
    "activation": str,
}
_TRAIN_KEYS = {
    "learning_rate": float,
    "iterations": int,
    "patch_size": int,
    "flip_prob": float,
    "noise_sigma": float,
    "seed": int,
    "checkpoint_every": int,
    "eval_every": int,
    "weight_decay": float,
    "val_fraction": float,
    "loss": str,
    "weighted": "bool",
}
_MAP_KEYS = {
    "levels": int,
    "thresholds": "floats",
    "sigma_v": float,
    "sigmas": "floats",
    "sigma_g": float,
    "scale": float,
    "k_neighbors": int,
}
_HUBER_KEYS = {"delta": float, "alpha": float, "beta": float}
CONFIG_KEYS = {**_TRAIN_KEYS, **_MAP_KEYS, **_HUBER_KEYS, **_MODEL_KEYS}


def _convert(key, kind, raw):
    try:
        if kind == "ints":
            return tuple(int(v) for v in raw.split(","))
        if kind == "floats":
            return tuple(float(v) for v in raw.split(","))
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return low in ("true", "1")
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, ln in enumerate(text.splitlines(), start=1):
        if not ln.strip():
            continue
        if "=" not in ln:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in ln.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = _convert(key, CONFIG_KEYS[key], raw)
    return out


def configs_from_dict(values: dict):
    """Split a parsed config into (TrainConfig, DanConfig)."""
    mkw = {k: values[k] for k in _MAP_KEYS if k in values}
    if "levels" in mkw:
        mkw["D"] = mkw.pop("levels")
    map_cfg = StructuredMapConfig(**mkw)
    huber = HuberParams(**{k: values[k] for k in _HUBER_KEYS if k in values})
    tkw = {k: values[k] for k in _TRAIN_KEYS if k in values}
    train_cfg = TrainConfig(huber=huber, map_config=map_cfg, **tkw)
    dkw = {k: values[k] for k in _MODEL_KEYS if k in values}
    model_cfg = dan_mod.DanConfig(D=map_cfg.D, **dkw)
    return train_cfg, model_cfg


def load_config(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return configs_from_dict(parse_config_text(text))
