"""Counting metrics, map quality, dataset evaluation and the gradient-pathology lab."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyInput, ShapeMismatch

PSNR_CAP = 99.0


def mae_mse(pairs):
    """(MAE, MSE) over (predicted, true) count pairs; MSE is the root of the mean square."""
    arr = np.asarray(list(pairs), dtype=np.float64).reshape(-1, 2)
    if len(arr) == 0:
        raise EmptyInput("mae_mse needs at least one pair")
    err = arr[:, 0] - arr[:, 1]
    return float(np.mean(np.abs(err))), float(math.sqrt(np.mean(err * err)))


def psnr(pred_map, gt_map) -> float:
    """PSNR in dB with both maps rescaled by the ground-truth range.

    The ground-truth map's minimum maps to 0 and its maximum (the peak) to 1.
    Identical maps return 99 dB; so does any error below that.
    """
    p = np.asarray(pred_map, dtype=np.float64)
    g = np.asarray(gt_map, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeMismatch(f"psnr: shapes {p.shape} and {g.shape} differ")
    lo, hi = float(g.min()), float(g.max())
    span = hi - lo if hi > lo else 1.0
    mse = float(np.mean(((p - lo) / span - (g - lo) / span) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


@dataclass
class SceneResult:
    scene_id: str
    c_pred: float
    c_gt: float
    abs_error: float
    psnr: float


@dataclass
class EvalReport:
    mae: float
    mse: float
    per_scene: list[SceneResult]
    per_level_mass: np.ndarray

    @property
    def psnr_per_scene(self) -> list[float]:
        return [s.psnr for s in self.per_scene]

    def write_tsv(self, path) -> None:
        rows = ["scene_id\tc_pred\tc_gt\tabs_error\tpsnr_db"]
        for s in self.per_scene:
            rows.append(f"{s.scene_id}\t{s.c_pred!r}\t{s.c_gt!r}\t{s.abs_error!r}\t{s.psnr!r}")
        Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")

    def write_summary(self, path) -> None:
        rows = ["metric\tvalue", f"mae\t{self.mae!r}", f"mse\t{self.mse!r}"]
        rows.append(f"mean_psnr_db\t{float(np.mean(self.psnr_per_scene))!r}")
        for d, m in enumerate(self.per_level_mass, start=1):
            rows.append(f"level{d}_mass\t{float(m)!r}")
        Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


class OracleModel:
    """Predicts the ground-truth structured map of the scene it is handed."""

    def __init__(self, map_config):
        self.map_config = map_config

    def predict_maps(self, image, annotation) -> np.ndarray:
        from .densegen import structured_density_map

        return structured_density_map(annotation, self.map_config).values


def _predict_maps(model, image, annotation) -> np.ndarray:
    if hasattr(model, "predict_maps"):
        return np.asarray(model.predict_maps(image, annotation), dtype=np.float64)
    from .dan import forward

    return forward(model, image).astype(np.float64)


def evaluate(model, scenes, map_config) -> EvalReport:
    """Full-image evaluation of a DanModel (or any object with ``predict_maps``).

    ``scenes`` is a manifest path or a list of SynthScene.
    """
    from .densegen import structured_density_map

    if not isinstance(scenes, list):
        from .trainer import load_scenes

        scenes = load_scenes(scenes)
    if not scenes:
        raise EmptyInput("evaluate needs at least one scene")
    results, masses = [], []
    for s in scenes:
        pred = _predict_maps(model, s.image, s.annotation)
        gt = structured_density_map(s.annotation, map_config).values
        if pred.shape != gt.shape:
            raise ShapeMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
        level_mass = np.maximum(pred, 0.0).sum(axis=(1, 2))
        c_pred, c_gt = float(level_mass.sum()), float(s.annotation.count())
        quality = float(np.mean([psnr(pred[d], gt[d]) for d in range(gt.shape[0])]))
        results.append(SceneResult(s.annotation.scene_id, c_pred, c_gt, abs(c_pred - c_gt), quality))
        masses.append(level_mass)
    mae, mse = mae_mse((r.c_pred, r.c_gt) for r in results)
    return EvalReport(mae, mse, results, np.mean(masses, axis=0))


# --- gradient pathology lab ---------------------------------------------

DIVERGE_NORM = 1e6


@dataclass
class PathologyReport:
    label: str
    loss_type: str
    activation: str
    init_epsilon: float
    learning_rate: float
    grad_norm: list[float] = field(default_factory=list)
    dead_fraction: list[float] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    diverged: bool = False

    @property
    def max_grad_norm(self) -> float:
        finite = [g for g in self.grad_norm if math.isfinite(g)]
        return max(finite) if len(finite) == len(self.grad_norm) else math.inf

    def write_tsv(self, path) -> None:
        rows = [
            f"# label={self.label} loss={self.loss_type} activation={self.activation} "
            f"init_epsilon={self.init_epsilon!r} learning_rate={self.learning_rate!r} "
            f"diverged={self.diverged}",
            "iteration\tloss\tgrad_norm\tdead_fraction",
        ]
        for i, (l, g, d) in enumerate(zip(self.loss, self.grad_norm, self.dead_fraction)):
            rows.append(f"{i}\t{l!r}\t{g!r}\t{d!r}")
        Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


@dataclass
class OutlierRecord:
    noise_level: float
    n_affected: int
    n_affected_active: int
    l2_delta: float
    huber_delta: float
    delta: float


@dataclass
class LabSetup:
    """Shared data stream for the pathology runs."""

    images: np.ndarray  # (n, h, w)
    targets: np.ndarray  # (n, D, h/4, w/4)
    probe: np.ndarray  # (16, h, w)


def _lab_setup(seed: int, count_range, map_cfg, n_scenes: int = 16, side: int = 32, gain: float = 1.0):
    from .densegen import structured_density_map
    from .synthgen import SynthConfig, generate_scene

    cfg = SynthConfig(side, side, count_range, 2.0, (1.5, 3.0), 0.02, seed)
    scenes = [generate_scene(cfg.with_seed(seed * 1000 + i)) for i in range(n_scenes)]
    images = np.stack([s.image for s in scenes])
    targets = np.stack([structured_density_map(s.annotation, map_cfg).values for s in scenes]) * gain
    return LabSetup(images, targets, images[:16])


def _lab_run(label, setup: LabSetup, model_cfg, loss_type, lr, iterations, seed) -> PathologyReport:
    from .dan import build_dan, run
    from .lossopt import AdamState, HuberParams, adam_step, l2_report, structured_loss
    from .trainer import _grad_norm

    model = build_dan(model_cfg, seed, np.float32)
    state = AdamState(learning_rate=lr)
    state.init_for(model.param_arrays())
    rep = PathologyReport(label, loss_type, model_cfg.activation, model_cfg.init_epsilon, lr)
    n = len(setup.images)
    with np.errstate(all="ignore"):
        for it in range(iterations):
            k = it % n
            ps = run(model, setup.images[k])
            pred = ps.values()[0]
            if loss_type == "l2":
                lr_rep = l2_report(pred, setup.targets[k])
            else:
                lr_rep = structured_loss(pred, setup.targets[k], HuberParams())
            grads = ps.backward(lr_rep.grad)
            gnorm = _grad_norm(grads)
            rep.loss.append(lr_rep.loss_value)
            rep.grad_norm.append(gnorm)
            alive = run(model, setup.probe).unit_alive()
            rep.dead_fraction.append(float(1.0 - alive.mean()))
            if not math.isfinite(gnorm) or gnorm > DIVERGE_NORM:
                rep.diverged = True
            if not math.isfinite(gnorm):
                # pad the series so its length still equals the iteration count
                remaining = iterations - it - 1
                rep.loss.extend([math.nan] * remaining)
                rep.grad_norm.extend([math.nan] * remaining)
                rep.dead_fraction.extend([rep.dead_fraction[-1]] * remaining)
                break
            adam_step(model.param_arrays(), grads, state)
    return rep


def _tiny_config(**kw):
    from .dan import DanConfig

    base = dict(trunk_channels=(8, 8, 8), branch_hidden=8, D=1)
    base.update(kw)
    return DanConfig(**base)


def _lab_map_config():
    from .densegen import StructuredMapConfig

    return StructuredMapConfig(D=1, thresholds=(49.0,), sigmas=(4.0,))


def dying_relu_experiment(seed: int, iterations: int = 300):
    """(ReLU + l2, leaky ReLU + structured Huber) at learning rate 1e-2."""
    if iterations < 200:
        raise ValueError("iterations must be >= 200")
    setup = _lab_setup(seed, (20, 60), _lab_map_config())
    relu_run = _lab_run(
        "relu_l2", setup, _tiny_config(activation="relu"), "l2", 1e-2, iterations, seed
    )
    leaky_run = _lab_run(
        "leaky_huber", setup, _tiny_config(activation="leaky"), "huber", 1e-2, iterations, seed
    )
    return relu_run, leaky_run


# high-count targets: every target map is multiplied by this factor
EXPLODE_GAIN = 10.0


def exploding_gradient_experiment(seed: int, iterations: int = 200):
    """Returns (unscaled init + l2, eps-scaled init + Huber, eps-scaled init + l2).

    The first two are the headline pair; the third isolates the effect of
    the initialization alone under l2.
    """
    setup = _lab_setup(seed, (150, 250), _lab_map_config(), gain=EXPLODE_GAIN)
    unscaled = _lab_run("unscaled_l2", setup, _tiny_config(init_epsilon=1.0), "l2", 1e-3, iterations, seed)
    scaled_huber = _lab_run(
        "scaled_huber", setup, _tiny_config(init_epsilon=1e-3), "huber", 1e-3, iterations, seed
    )
    scaled = _lab_run("scaled_l2", setup, _tiny_config(init_epsilon=1e-3), "l2", 1e-3, iterations, seed)
    return unscaled, scaled_huber, scaled


def _dyadic(rng, shape, lo, hi, bits=8):
    """Uniform values on a 2**-bits grid so sums below are exact in float64."""
    return rng.integers(int(lo * 2**bits), int(hi * 2**bits) + 1, size=shape) / 2.0**bits


def outlier_sensitivity_experiment(noise_level: float, seed: int, n_affected: int = 10,
                                   side: int = 16, K: int = 4, delta: float = 0.2) -> OutlierRecord:
    """Bias change of a 1x1 conv + ReLU output layer when ``noise_level`` is added to some targets.

    The instance is built on a dyadic grid so the l2 change is exact. Chosen
    pixels are active (positive output) and start with residual in [-delta, 0].
    """
    from .lossopt import huber, last_layer_l2_grads

    if noise_level < 0:
        raise ValueError("noise level must be >= 0")
    rng = np.random.default_rng(seed)
    z = _dyadic(rng, (side, side, K), 0.0, 1.0)
    w = _dyadic(rng, (K,), -0.5, 1.0)
    b = 0.125
    out = np.maximum(z @ w + b, 0.0)
    g = np.maximum(out - _dyadic(rng, out.shape, -delta, 0.0), 0.0)
    active = np.flatnonzero(out.reshape(-1) > 0)
    chosen = rng.choice(active, size=min(n_affected, len(active)), replace=False)
    mask = np.zeros(out.size, dtype=bool)
    mask[chosen] = True
    mask = mask.reshape(out.shape)
    g_noisy = g + np.where(mask, noise_level, 0.0)

    _, gb_clean = last_layer_l2_grads(z, w, b, g)
    _, gb_noisy = last_layer_l2_grads(z, w, b, g_noisy)

    def huber_bias_grad(target):
        r = out - target
        _, hg = huber(r, delta)
        return float(np.sum(np.where(out > 0, hg, 0.0)))

    return OutlierRecord(
        noise_level,
        int(mask.sum()),
        int((mask & (out > 0)).sum()),
        abs(gb_noisy - gb_clean),
        abs(huber_bias_grad(g_noisy) - huber_bias_grad(g)),
        delta,
    )
