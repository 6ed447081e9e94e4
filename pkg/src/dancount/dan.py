"""The toy Density-Aware Network.

A shared trunk of 3x3 conv blocks with two 2x2 poolings (map scale 1/4),
followed by D parallel branches. Each branch is two 5x5 convolutions: a
hidden block with activation and a linear 1-channel output, one density
level per branch.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import BadShape, MalformedFile, ShapeMismatch, VersionMismatch

CKPT_MAGIC = b"DANW"
CKPT_VERSION = 1
_ACTIVATIONS = ("leaky", "relu")


@dataclass
class DanConfig:
    trunk_channels: tuple[int, ...] = (16, 32, 32)
    trunk_kernel: int = 3
    branch_kernel: int = 5
    branch_hidden: int = 8
    D: int = 4
    leaky_slope: float = 0.01
    init_epsilon: float = 1e-3
    pool_after_blocks: tuple[int, ...] = (1, 2)
    activation: str = "leaky"

    def __post_init__(self):
        self.trunk_channels = tuple(int(c) for c in self.trunk_channels)
        self.pool_after_blocks = tuple(int(b) for b in self.pool_after_blocks)
        if self.D < 1:
            raise ValueError("D must be >= 1")
        if not self.trunk_channels or min(self.trunk_channels) < 1 or self.branch_hidden < 1:
            raise ValueError("channel counts must be >= 1")
        if len(self.pool_after_blocks) != 2:
            raise ValueError("exactly two pooling stages are required")
        if any(not 1 <= b <= len(self.trunk_channels) for b in self.pool_after_blocks):
            raise ValueError(f"pool_after_blocks {self.pool_after_blocks} out of range")
        if self.trunk_kernel % 2 == 0 or self.branch_kernel % 2 == 0:
            raise ValueError("kernel sizes must be odd")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")
        if self.activation == "leaky" and not 0 < self.leaky_slope < 1:
            raise ValueError("leaky_slope must lie in (0, 1)")


@dataclass
class DanModel:
    config: DanConfig
    trunk: list[nc.ConvLayer]
    branches: list[list[nc.ConvLayer]]

    @property
    def layers(self) -> list[nc.ConvLayer]:
        """All conv layers in declaration order: trunk, then branch by branch."""
        out = list(self.trunk)
        for br in self.branches:
            out.extend(br)
        return out

    @property
    def params(self) -> list[nc.Tensor]:
        return [p for layer in self.layers for p in layer.params]

    @property
    def dtype(self):
        return self.trunk[0].weight.dtype

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def astype(self, dtype) -> "DanModel":
        def cp(layer):
            return nc.ConvLayer(
                nc.Tensor(layer.weight.data.astype(dtype), requires_grad=True),
                nc.Tensor(layer.bias.data.astype(dtype), requires_grad=True),
            )

        return DanModel(self.config, [cp(l) for l in self.trunk], [[cp(l) for l in br] for br in self.branches])

    def copy(self) -> "DanModel":
        return self.astype(self.dtype)

    def param_arrays(self) -> list[np.ndarray]:
        return [p.data for p in self.params]


def _layer(rng, c_out, c_in, k, scale, dtype) -> nc.ConvLayer:
    w = nc.xavier_uniform(rng, (c_out, c_in, k, k)) * scale
    return nc.ConvLayer(
        nc.Tensor(w.astype(dtype), requires_grad=True),
        nc.Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True),
    )


def build_dan(cfg: DanConfig = DanConfig(), rng_seed: int = 0, dtype=np.float32) -> DanModel:
    """Xavier-uniform weights, zero biases; branch weights are scaled by init_epsilon."""
    rng = np.random.default_rng(rng_seed)
    trunk, c_in = [], 1
    for c in cfg.trunk_channels:
        trunk.append(_layer(rng, c, c_in, cfg.trunk_kernel, 1.0, dtype))
        c_in = c
    branches = []
    for _ in range(cfg.D):
        branches.append(
            [
                _layer(rng, cfg.branch_hidden, c_in, cfg.branch_kernel, cfg.init_epsilon, dtype),
                _layer(rng, 1, cfg.branch_hidden, cfg.branch_kernel, cfg.init_epsilon, dtype),
            ]
        )
    return DanModel(cfg, trunk, branches)


def _activate(cfg: DanConfig, x: nc.Tensor) -> nc.Tensor:
    if cfg.activation == "relu":
        return nc.relu(x)
    return nc.leaky_relu(x, cfg.leaky_slope)


def _grad_mask(cfg: DanConfig, pre: np.ndarray) -> np.ndarray:
    if cfg.activation == "relu":
        return nc.relu_grad_mask(pre)
    return nc.leaky_relu_grad_mask(pre, cfg.leaky_slope)


def _as_batch(image, dtype) -> np.ndarray:
    x = np.asarray(image, dtype=dtype)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise BadShape(f"expected (H, W) or (N, H, W) input, got {x.shape}")
    if x.shape[1] % 4 or x.shape[2] % 4:
        raise BadShape(f"input dims {x.shape[1]}x{x.shape[2]} must be divisible by 4")
    return x[:, None]


@dataclass
class Pass:
    """A recorded forward pass; ``outputs[d]`` has shape (N, 1, h, w)."""

    model: DanModel
    outputs: list[nc.Tensor]
    pre_activations: list[np.ndarray] = field(default_factory=list)

    def values(self) -> np.ndarray:
        """Predictions as (N, D, h, w)."""
        return np.concatenate([o.data for o in self.outputs], axis=1)

    def backward(self, upstream) -> list[np.ndarray]:
        """Parameter gradients for upstream gradients shaped like ``values()``.

        Accepts (D, h, w) for a single-image pass.
        """
        up = np.asarray(upstream, dtype=self.model.dtype)
        vals_shape = (self.outputs[0].shape[0], len(self.outputs)) + self.outputs[0].shape[2:]
        if up.ndim == 3:
            up = up[None]
        if up.shape != vals_shape:
            raise ShapeMismatch(f"upstream gradient {up.shape}, expected {vals_shape}")
        self.model.zero_grad()
        nc.backward(self.outputs, [up[:, d : d + 1] for d in range(up.shape[1])])
        return [
            p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.model.params
        ]

    def unit_alive(self) -> np.ndarray:
        """Per hidden channel: True if its activation derivative is nonzero somewhere."""
        cfg = self.model.config
        alive = [np.any(_grad_mask(cfg, pre) != 0, axis=(0, 2, 3)) for pre in self.pre_activations]
        return np.concatenate(alive) if alive else np.zeros(0, dtype=bool)


def run(m: DanModel, image) -> Pass:
    cfg = m.config
    x = nc.Tensor(_as_batch(image, m.dtype))
    pres = []
    for k, layer in enumerate(m.trunk, start=1):
        x = layer(x)
        pres.append(x.data)
        x = _activate(cfg, x)
        if k in cfg.pool_after_blocks:
            x = nc.maxpool2(x)
    outs = []
    for hidden, last in m.branches:
        h = hidden(x)
        pres.append(h.data)
        outs.append(last(_activate(cfg, h)))
    return Pass(m, outs, pres)


def forward(m: DanModel, image) -> np.ndarray:
    """Raw (D, H/4, W/4) prediction for one (H, W) image; may contain negatives."""
    vals = run(m, image).values()
    return vals[0] if np.ndim(image) == 2 else vals


def backward(m: DanModel, image, upstream) -> list[np.ndarray]:
    return run(m, image).backward(upstream)


def predict_count(m: DanModel, image):
    """(total, per_level) with negative pixels clamped to zero."""
    vals = np.maximum(forward(m, image).astype(np.float64), 0.0)
    per_level = vals.sum(axis=(-2, -1))
    return float(per_level.sum()), per_level


# --- checkpoint serialization ------------------------------------------

def config_to_bytes(cfg: DanConfig) -> bytes:
    parts = [struct.pack("<I", len(cfg.trunk_channels))]
    parts.append(struct.pack(f"<{len(cfg.trunk_channels)}I", *cfg.trunk_channels))
    parts.append(struct.pack("<IIII", cfg.trunk_kernel, cfg.branch_kernel, cfg.branch_hidden, cfg.D))
    parts.append(struct.pack("<dd", cfg.leaky_slope, cfg.init_epsilon))
    parts.append(struct.pack("<I", len(cfg.pool_after_blocks)))
    parts.append(struct.pack(f"<{len(cfg.pool_after_blocks)}I", *cfg.pool_after_blocks))
    parts.append(struct.pack("<I", _ACTIVATIONS.index(cfg.activation)))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, off: int = 0):
        self.buf, self.off = buf, off

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.off + size > len(self.buf):
            raise MalformedFile("truncated checkpoint")
        vals = struct.unpack_from(fmt, self.buf, self.off)
        self.off += size
        return vals

    def array(self, shape, dtype="<f4") -> np.ndarray:
        n = int(np.prod(shape))
        size = n * np.dtype(dtype).itemsize
        if self.off + size > len(self.buf):
            raise MalformedFile("truncated checkpoint")
        arr = np.frombuffer(self.buf, dtype=dtype, count=n, offset=self.off).reshape(shape)
        self.off += size
        return arr.astype(np.float32)


def config_from_reader(rd: _Reader) -> DanConfig:
    (n,) = rd.take("<I")
    trunk = rd.take(f"<{n}I")
    tk, bk, bh, D = rd.take("<IIII")
    slope, eps = rd.take("<dd")
    (npool,) = rd.take("<I")
    pools = rd.take(f"<{npool}I")
    (act,) = rd.take("<I")
    if act >= len(_ACTIVATIONS):
        raise MalformedFile(f"unknown activation code {act}")
    return DanConfig(trunk, tk, bk, bh, D, slope, eps, pools, _ACTIVATIONS[act])


def model_to_bytes(m: DanModel) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), config_to_bytes(m.config)]
    for p in m.params:
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return b"".join(parts)


def read_header(buf: bytes) -> _Reader:
    if len(buf) < 8:
        raise VersionMismatch("file too short to be a checkpoint")
    if buf[:4] != CKPT_MAGIC:
        raise VersionMismatch(f"bad magic {buf[:4]!r}, expected {CKPT_MAGIC!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CKPT_VERSION:
        raise VersionMismatch(f"checkpoint version {version} unsupported")
    return _Reader(buf, 8)


def model_from_reader(rd: _Reader) -> DanModel:
    cfg = config_from_reader(rd)
    template = build_dan(cfg, 0, np.float32)
    for p in template.params:
        p.data = rd.array(p.shape)
    return template
