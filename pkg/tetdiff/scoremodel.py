"""Noise predictors: an analytic Gaussian oracle and a small volumetric conv denoiser.

The denoiser is a stack of same-padded 3D convolutions over the cubic lattice with SiLU
between layers. The lattice mask enters as an extra input channel and the timestep as a
sinusoidal embedding projected to a per-layer bias. Gradients are hand-written and checked
against central differences by `grad_check`.
"""

from __future__ import annotations

import itertools
import logging
import struct
from abc import ABC, abstractmethod
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import ValidationError
from scipy.special import expit

from tetdiff.diffusion import DiffusionTensor, NoiseSchedule, forward_sample, masked_mse
from tetdiff.errors import (
    DimensionError,
    FormatError,
    NumericError,
    ParameterError,
    StateError,
)
from tetdiff.models import GradCheckReport, NetArch, TrainConfig
from tetdiff.optim import Adam, AdamState
from tetdiff.tetgrid import (
    GridState,
    TetGrid,
    clip_deformations,
    embed_to_cubic,
)

logger = logging.getLogger(__name__)

MDCK_MAGIC = b"MDCK"
MDCK_VERSION = 1

GRAD_CHECK_STEP = 1e-4
# absolute floor on the relative-error denominator
GRAD_CHECK_FLOOR = 1e-4


class ScoreModel(ABC):
    """Anything that predicts the injected noise eps from (x_t, t)."""

    trainable: bool = False

    @abstractmethod
    def eval(self, x_t: np.ndarray, t: int, mask: np.ndarray | None) -> np.ndarray: ...


# ---------------------------------------------------------------------------
# Gaussian oracle
# ---------------------------------------------------------------------------


def oracle_gaussian_eps(
    x_t: np.ndarray, t: int, sched: NoiseSchedule, mu: np.ndarray | float, var: np.ndarray | float
) -> np.ndarray:
    """Exact minimizer of the denoising loss when the data are N(mu, var * I)."""
    var = np.asarray(var, dtype=np.float64)
    if np.any(var < 0):
        raise ParameterError("oracle variance must be non-negative")
    ab = sched.alpha_bars[t]
    return (x_t - np.sqrt(ab) * np.asarray(mu)) * np.sqrt(1.0 - ab) / (ab * var + 1.0 - ab)


class GaussianOracle(ScoreModel):
    def __init__(self, sched: NoiseSchedule, mu: np.ndarray | float, var: np.ndarray | float = 0.0):
        self.sched = sched
        self.mu = mu
        self.var = var

    def eval(self, x_t: np.ndarray, t: int, mask: np.ndarray | None = None) -> np.ndarray:
        return oracle_gaussian_eps(x_t, t, self.sched, self.mu, self.var)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def time_embedding(t: int, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10_000.0) * np.arange(half) / max(half, 1))
    angles = float(t) * freqs
    emb = np.concatenate([np.sin(angles), np.cos(angles)])
    return np.pad(emb, (0, dim - len(emb)))


def _silu(z: np.ndarray) -> np.ndarray:
    return z * expit(z)


def _silu_grad(z: np.ndarray) -> np.ndarray:
    s = expit(z)
    return s * (1.0 + z * (1.0 - s))


def _offsets(k: int):
    return itertools.product(range(k), repeat=3)


def _conv3d(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Same-padded 3D cross-correlation; x (Cin, X, Y, Z), w (Cout, Cin, k, k, k)."""
    k = w.shape[2]
    p = k // 2
    nx, ny, nz = x.shape[1:]
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))
    out = np.zeros((w.shape[0], nx, ny, nz))
    for a, b, c in _offsets(k):
        patch = xp[:, a : a + nx, b : b + ny, c : c + nz]
        out += np.tensordot(w[:, :, a, b, c], patch, axes=([1], [0]))
    return out


def _conv3d_backward(
    x: np.ndarray, w: np.ndarray, dout: np.ndarray, need_dx: bool = True
) -> tuple[np.ndarray | None, np.ndarray]:
    k = w.shape[2]
    p = k // 2
    nx, ny, nz = x.shape[1:]
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))
    dxp = np.zeros_like(xp) if need_dx else None
    dw = np.zeros_like(w)
    for a, b, c in _offsets(k):
        window = (slice(None), slice(a, a + nx), slice(b, b + ny), slice(c, c + nz))
        dw[:, :, a, b, c] = np.tensordot(dout, xp[window], axes=([1, 2, 3], [1, 2, 3]))
        if dxp is not None:
            dxp[window] += np.tensordot(w[:, :, a, b, c], dout, axes=([0], [0]))
    dx = None if dxp is None else dxp[:, p : p + nx, p : p + ny, p : p + nz]
    return dx, dw


# ---------------------------------------------------------------------------
# Denoiser
# ---------------------------------------------------------------------------


def param_specs(arch: NetArch) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in storage order."""
    chans = [arch.data_channels + 1, *arch.widths, arch.data_channels]
    k = arch.kernel
    specs: list[tuple[str, tuple[int, ...]]] = []
    for i, (cin, cout) in enumerate(itertools.pairwise(chans)):
        specs += [
            (f"conv{i}.weight", (cout, cin, k, k, k)),
            (f"conv{i}.bias", (cout,)),
            (f"time{i}.weight", (cout, arch.time_dim)),
        ]
    return specs


def init_params(arch: NetArch, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_specs(arch):
        if name.endswith("bias"):
            p = np.zeros(shape)
        elif name.startswith("conv"):
            fan_in = shape[1] * arch.kernel**3
            p = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
        else:
            p = rng.normal(0.0, 1.0 / np.sqrt(arch.time_dim), shape)
        params[name] = p.astype(dtype)
    return params


@dataclass
class _ForwardCache:
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    emb: np.ndarray


class DenoiserNet(ScoreModel):
    trainable = True

    def __init__(
        self,
        arch: NetArch,
        params: dict[str, np.ndarray] | None = None,
        seed: int = 0,
        dtype=np.float32,
    ) -> None:
        self.arch = arch
        self.params = init_params(arch, seed, dtype) if params is None else params
        for name, shape in param_specs(arch):
            if name not in self.params or self.params[name].shape != shape:
                raise DimensionError(f"parameter {name} missing or not of shape {shape}")
        self._cache: _ForwardCache | None = None

    @property
    def num_layers(self) -> int:
        return len(self.arch.widths) + 1

    def with_dtype(self, dtype) -> DenoiserNet:
        return DenoiserNet(self.arch, {k: v.astype(dtype) for k, v in self.params.items()})

    def _run(
        self, x_t: np.ndarray, t: int, mask: np.ndarray | None
    ) -> tuple[np.ndarray, _ForwardCache]:
        x = np.asarray(x_t, dtype=np.float64)
        if x.ndim != 4 or x.shape[0] != self.arch.data_channels:
            raise DimensionError(
                f"expected ({self.arch.data_channels}, L, L, L) input, got {x.shape}"
            )
        m = np.ones(x.shape[1:]) if mask is None else np.asarray(mask, dtype=np.float64)
        if m.shape != x.shape[1:]:
            raise DimensionError(f"mask shape {m.shape} does not match input {x.shape}")

        a = np.concatenate([x * m, m[None]])
        emb = time_embedding(t, self.arch.time_dim)
        inputs, pre = [], []
        for i in range(self.num_layers):
            w = self.params[f"conv{i}.weight"].astype(np.float64)
            bias = self.params[f"conv{i}.bias"] + self.params[f"time{i}.weight"] @ emb
            z = _conv3d(a, w) + bias.astype(np.float64)[:, None, None, None]
            inputs.append(a)
            pre.append(z)
            a = _silu(z) if i < self.num_layers - 1 else z
        return a, _ForwardCache(inputs, pre, emb)

    def forward(self, x_t: np.ndarray, t: int, mask: np.ndarray | None) -> np.ndarray:
        out, self._cache = self._run(x_t, t, mask)
        return out

    def eval(self, x_t: np.ndarray, t: int, mask: np.ndarray | None = None) -> np.ndarray:
        return self._run(x_t, t, mask)[0]

    def backward(self, upstream: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients of a scalar loss given d(loss)/d(output) of the last forward."""
        if self._cache is None:
            raise StateError("backward called without a cached forward pass")
        cache = self._cache
        g = np.asarray(upstream, dtype=np.float64)
        grads: dict[str, np.ndarray] = {}
        for i in reversed(range(self.num_layers)):
            if i < self.num_layers - 1:
                g = g * _silu_grad(cache.pre[i])
            w = self.params[f"conv{i}.weight"].astype(np.float64)
            dx, dw = _conv3d_backward(cache.inputs[i], w, g, need_dx=i > 0)
            db = g.sum(axis=(1, 2, 3))
            grads[f"conv{i}.weight"] = dw
            grads[f"conv{i}.bias"] = db
            grads[f"time{i}.weight"] = np.outer(db, cache.emb)
            g = dx
        return grads


def net_forward(net: DenoiserNet, x_t: np.ndarray, t: int, mask: np.ndarray | None) -> np.ndarray:
    return net.forward(x_t, t, mask)


def net_backward(net: DenoiserNet, upstream: np.ndarray) -> dict[str, np.ndarray]:
    return net.backward(upstream)


def grad_check(
    net: DenoiserNet,
    tolerance: float = 1e-4,
    per_param: int = 10,
    lattice: int = 5,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backward() with central differences on a 64-bit copy of the net."""
    net64 = net.with_dtype(np.float64)
    rng = np.random.default_rng(seed)
    shape = (net.arch.data_channels, lattice, lattice, lattice)
    x = rng.standard_normal(shape)
    mask = rng.random(shape[1:]) > 0.25
    eps = rng.standard_normal(shape) * mask
    t = int(rng.integers(1, net.arch.T + 1))

    def loss() -> float:
        return masked_mse(net64.eval(x, t, mask), eps, mask)[0]

    _, upstream = masked_mse(net64.forward(x, t, mask), eps, mask)
    grads = net64.backward(upstream)

    per_layer: dict[str, float] = {}
    failures = []
    for name, p in net64.params.items():
        worst = 0.0
        for idx in rng.choice(p.size, min(per_param, p.size), replace=False):
            orig = p.flat[idx]
            p.flat[idx] = orig + GRAD_CHECK_STEP
            up = loss()
            p.flat[idx] = orig - GRAD_CHECK_STEP
            down = loss()
            p.flat[idx] = orig
            numeric = (up - down) / (2.0 * GRAD_CHECK_STEP)
            analytic = grads[name].flat[idx]
            denom = max(abs(analytic), abs(numeric), GRAD_CHECK_FLOOR)
            worst = max(worst, abs(analytic - numeric) / denom)
        per_layer[name] = worst
        if worst > tolerance:
            failures.append(name)

    max_err = max(per_layer.values(), default=0.0)
    if failures:
        logger.warning("Gradient check failed for %s (max rel error %.2e)", failures, max_err)
    return GradCheckReport(
        passed=not failures,
        tolerance=tolerance,
        max_rel_error=max_err,
        per_layer=per_layer,
        failures=failures,
    )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _jittered_data(
    grid: TetGrid, state: GridState, jitter: float, rng: np.random.Generator
) -> DiffusionTensor:
    """Embedded data with one random translation added to every deformation."""
    offset = rng.uniform(-1.0, 1.0, 3) * jitter * grid.delta_max
    moved = GridState(state.deformation + offset, state.sdf, normalized=True)
    emb = embed_to_cubic(grid, clip_deformations(moved, grid.delta_max))
    return DiffusionTensor.from_embedding(emb)


def train(
    net: DenoiserNet,
    dataset: Sequence[GridState],
    grid: TetGrid,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    optimizer: Adam | None = None,
) -> tuple[list[float], Adam]:
    """Minimize the masked eps-prediction loss; returns the per-step loss trace."""
    if not dataset:
        raise ParameterError("training dataset is empty")
    if any(not s.normalized for s in dataset):
        raise StateError("training states must have normalized (+-1) SDF values")
    if net.arch.lattice not in (None, grid.lattice_size):
        raise DimensionError(
            f"net was built for lattice {net.arch.lattice}, grid has {grid.lattice_size}"
        )

    rng = np.random.default_rng(cfg.seed)
    adam = optimizer or Adam(cfg.learning_rate, cfg.beta1, cfg.beta2)
    mask = embed_to_cubic(grid, dataset[0]).mask
    trace: list[float] = []

    for step in range(cfg.steps):
        acc = {name: np.zeros(p.shape) for name, p in net.params.items()}
        total = 0.0
        for _ in range(cfg.batch_size):
            state = dataset[int(rng.integers(len(dataset)))]
            x0 = _jittered_data(grid, state, cfg.jitter, rng).values
            t = int(rng.integers(1, sched.T + 1))
            eps = rng.standard_normal(x0.shape) * mask
            xt = forward_sample(x0, t, eps, sched, mask)
            loss, upstream = masked_mse(net.forward(xt, t, mask), eps, mask)
            if not np.isfinite(loss):
                raise NumericError(f"training loss is not finite at step {step}", step=step)
            for name, g in net.backward(upstream).items():
                acc[name] += g
            total += loss

        increments = adam.update({k: g / cfg.batch_size for k, g in acc.items()})
        for name, inc in increments.items():
            p = net.params[name]
            net.params[name] = (p.astype(np.float64) - inc).astype(p.dtype)
        trace.append(total / cfg.batch_size)
        if (step + 1) % cfg.log_every == 0:
            logger.info("Step %d/%d: loss %.4f", step + 1, cfg.steps, trace[-1])
    return trace, adam


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_MDCK_HEADER = struct.Struct("<4sIII")  # magic, version, descriptor bytes, optimizer step


def save_checkpoint(path: Path, net: DenoiserNet, optimizer: Adam | None = None) -> None:
    state = optimizer.state if optimizer is not None else AdamState()
    descriptor = net.arch.model_dump_json().encode()
    blobs = [net.params[name] for name, _ in param_specs(net.arch)]
    for moments in (state.m, state.v):
        blobs += [moments.get(name, np.zeros(shape)) for name, shape in param_specs(net.arch)]
    payload = b"".join(np.asarray(b, dtype="<f4").tobytes() for b in blobs)
    header = _MDCK_HEADER.pack(MDCK_MAGIC, MDCK_VERSION, len(descriptor), state.step)
    Path(path).write_bytes(header + descriptor + payload)


def load_checkpoint(path: Path) -> tuple[DenoiserNet, AdamState]:
    blob = Path(path).read_bytes()
    if len(blob) < _MDCK_HEADER.size:
        raise FormatError(f"{path}: truncated checkpoint header")
    magic, version, desc_len, step = _MDCK_HEADER.unpack_from(blob)
    if magic != MDCK_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != MDCK_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    start = _MDCK_HEADER.size + desc_len
    try:
        arch = NetArch.model_validate_json(blob[_MDCK_HEADER.size : start])
    except ValidationError as exc:
        raise FormatError(f"{path}: bad architecture descriptor") from exc

    specs = param_specs(arch)
    sizes = [int(np.prod(shape)) for _, shape in specs]
    if len(blob) != start + 3 * 4 * sum(sizes):
        raise FormatError(f"{path}: checkpoint payload size mismatch")
    values = np.frombuffer(blob, dtype="<f4", offset=start)

    groups: list[dict[str, np.ndarray]] = []
    pos = 0
    for _ in range(3):
        group = {}
        for (name, shape), size in zip(specs, sizes, strict=True):
            group[name] = values[pos : pos + size].reshape(shape).astype(np.float32)
            pos += size
        groups.append(group)
    params, m, v = groups
    logger.debug("Loaded checkpoint %s (arch %s, step %d)", path, arch, step)
    return DenoiserNet(arch, params), AdamState(m=m, v=v, step=step)
