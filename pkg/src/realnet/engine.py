"""Tensor plumbing shared by every stage.

Arithmetic and reverse-mode differentiation come from torch (CPU only).
This module adds what torch does not pin down for us: a counter-based
splittable RNG, the RNTF / ParamSet binary formats, deterministic parameter
initialisation, a finite-difference gradient oracle and a few shape-checked
primitives used across the pipeline.
"""
from __future__ import annotations

import hashlib
import io
import math
import struct
from collections import OrderedDict
from pathlib import Path
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

RNTF_MAGIC = b"RNTF"
RNTF_VERSION = 1


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class ContractError(ValueError):
    pass


def set_deterministic(threads: int | None = None) -> None:
    torch.use_deterministic_algorithms(True)
    if threads is not None:
        torch.set_num_threads(threads)


# --------------------------------------------------------------------------
# RNG
# --------------------------------------------------------------------------


class Rng:
    """Philox-backed generator; children derived by key never overlap.

    Every consumer that needs independent randomness (a worker, a sample, a
    network initialisation) should call :meth:`split` with a stable key
    instead of sharing one stream, so results do not depend on scheduling.
    """

    def __init__(self, seed: int, path: Sequence[int] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence([self.seed, *self.path])
        self.gen = np.random.Generator(np.random.Philox(ss))

    def split(self, key: int | str) -> "Rng":
        if isinstance(key, str):
            key = int.from_bytes(hashlib.sha256(key.encode()).digest()[:4], "little")
        return Rng(self.seed, (*self.path, int(key)))

    def get_state(self) -> dict:
        return self.gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.gen.bit_generator.state = state

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self.gen.integers(low, high, size)

    def torch_seed(self) -> int:
        return int(self.gen.integers(0, 2**63 - 1))


def sample_standard_normal(rng: Rng, shape: Sequence[int], dtype=torch.float32) -> torch.Tensor:
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ShapeError(f"negative extent in shape {shape}")
    draws = rng.gen.standard_normal(shape)
    return torch.from_numpy(np.ascontiguousarray(draws)).to(dtype)


# --------------------------------------------------------------------------
# primitives with the shape rules the pipeline relies on
# --------------------------------------------------------------------------

stop_gradient = torch.Tensor.detach


def conv3x3(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None, stride: int = 1):
    if weight.shape[-2:] != (3, 3):
        raise ShapeError(f"conv3x3 needs a 3x3 kernel, got {tuple(weight.shape)}")
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")
    if x.dim() != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"input {tuple(x.shape)} does not match kernel {tuple(weight.shape)}")
    return F.conv2d(x, weight, bias, stride=stride, padding=1)


def resize(x: torch.Tensor, size: tuple[int, int], mode: str = "bilinear") -> torch.Tensor:
    """Resize an NCHW tensor. Same-size bilinear is the identity."""
    if x.dim() != 4:
        raise ShapeError(f"resize expects NCHW, got {tuple(x.shape)}")
    size = (int(size[0]), int(size[1]))
    if tuple(x.shape[-2:]) == size:
        return x
    if mode == "nearest":
        return F.interpolate(x, size=size, mode="nearest")
    if mode == "bilinear":
        return F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    raise ValueError(f"unknown resize mode {mode!r}")


def global_max_pool(x: torch.Tensor) -> torch.Tensor:
    return x.flatten(-2).amax(-1)


def global_avg_pool(x: torch.Tensor) -> torch.Tensor:
    return x.flatten(-2).mean(-1)


def concat_channels(xs: Sequence[torch.Tensor]) -> torch.Tensor:
    spatial = {tuple(t.shape[-2:]) for t in xs}
    if len(spatial) != 1:
        raise ShapeError(f"cannot concatenate maps with spatial sizes {sorted(spatial)}")
    return torch.cat(list(xs), dim=1)


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {what}")
    return t


# --------------------------------------------------------------------------
# parameters, initialisation, optimiser
# --------------------------------------------------------------------------

def param_set(module: nn.Module, prefix: str = "") -> "OrderedDict[str, torch.Tensor]":
    """Parameters plus buffers (running statistics) of ``module``, detached."""
    out = OrderedDict()
    for name, t in module.state_dict().items():
        if t.is_floating_point():
            out[prefix + name] = t.detach().clone()
    return out


def load_param_set(module: nn.Module, params, prefix: str = "") -> None:
    state = module.state_dict()
    missing = [k for k, v in state.items() if v.is_floating_point() and prefix + k not in params]
    if missing:
        raise ContractError(f"parameter set lacks {missing[:5]}")
    with torch.no_grad():
        for k, v in state.items():
            if v.is_floating_point():
                src = params[prefix + k]
                if tuple(src.shape) != tuple(v.shape):
                    raise ShapeError(f"{prefix + k}: stored {tuple(src.shape)} vs model {tuple(v.shape)}")
                v.copy_(src.to(v.dtype))


def seeded_init(module: nn.Module, rng: Rng) -> nn.Module:
    """Re-initialise conv/linear layers from ``rng`` (torch's default scheme)."""
    gen = torch.Generator().manual_seed(rng.torch_seed())
    for m in module.modules():
        if isinstance(m, (nn.modules.conv._ConvNd, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5), generator=gen)
            if m.bias is not None:
                fan_in = m.weight[0].numel()
                bound = 1.0 / math.sqrt(fan_in) if fan_in > 0 else 0.0
                nn.init.uniform_(m.bias, -bound, bound, generator=gen)
    return module


def make_optimizer(params: Iterable[torch.Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
    return torch.optim.Adam(list(params), lr=lr, betas=betas, eps=eps)


def sgd_adaptive_step(optimizer: torch.optim.Optimizer) -> None:
    """One bias-corrected adaptive-moment update; every parameter needs a gradient."""
    for group in optimizer.param_groups:
        for p in group["params"]:
            if p.grad is None:
                raise ContractError("parameter without gradient passed to the optimiser")
    optimizer.step()


# --------------------------------------------------------------------------
# RNTF / ParamSet formats
# --------------------------------------------------------------------------


def write_rntf(f: BinaryIO, t: torch.Tensor | np.ndarray) -> None:
    arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    arr = np.asarray(arr, dtype="<f4").copy(order="C")  # keeps rank 0 (ascontiguousarray promotes it)
    if arr.ndim > 255:
        raise ShapeError("rank above 255")
    f.write(RNTF_MAGIC)
    f.write(struct.pack("<BB", RNTF_VERSION, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.tobytes(order="C"))


def read_rntf(f: BinaryIO) -> torch.Tensor:
    magic = f.read(4)
    if magic != RNTF_MAGIC:
        raise ValueError(f"bad RNTF magic {magic!r}")
    version, rank = struct.unpack("<BB", f.read(2))
    if version != RNTF_VERSION:
        raise ValueError(f"unsupported RNTF version {version}")
    shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
    count = int(np.prod(shape)) if rank else 1
    buf = f.read(4 * count)
    if len(buf) != 4 * count:
        raise ValueError("truncated RNTF payload")
    arr = np.frombuffer(buf, dtype="<f4").reshape(shape)
    return torch.from_numpy(arr.astype(np.float32))


def save_tensor(path: str | Path, t) -> None:
    with open(path, "wb") as f:
        write_rntf(f, t)


def load_tensor(path: str | Path) -> torch.Tensor:
    with open(path, "rb") as f:
        return read_rntf(f)


def dump_params(params) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(params)))
    for name, t in params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        write_rntf(buf, t)
    return buf.getvalue()


def parse_params(data: bytes) -> "OrderedDict[str, torch.Tensor]":
    buf = io.BytesIO(data)
    (count,) = struct.unpack("<I", buf.read(4))
    out = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack("<I", buf.read(4))
        name = buf.read(n).decode("utf-8")
        if name in out:
            raise ValueError(f"duplicate parameter name {name!r}")
        out[name] = read_rntf(buf)
    return out


def save_params(path: str | Path, params) -> None:
    Path(path).write_bytes(dump_params(params))


def load_params(path: str | Path):
    return parse_params(Path(path).read_bytes())


def params_digest(params) -> str:
    return hashlib.sha256(dump_params(params)).hexdigest()


# --------------------------------------------------------------------------
# finite-difference oracle
# --------------------------------------------------------------------------


def numerical_gradient(fn: Callable[[], torch.Tensor], x: torch.Tensor, eps: float = 1e-4,
                       indices: Sequence[int] | None = None) -> torch.Tensor:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``x`` (mutated in place and restored)."""
    grad = torch.zeros_like(x)
    flat = x.data.view(-1)
    gflat = grad.view(-1)
    idx = range(flat.numel()) if indices is None else indices
    with torch.no_grad():
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + eps
            up = float(fn())
            flat[i] = orig - eps
            down = float(fn())
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-12) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``."""
    a = analytic.double().reshape(-1)
    n = numeric.double().reshape(-1)
    denom = max(a.norm().item(), n.norm().item(), floor)
    return (a - n).norm().item() / denom


def gradient_check(fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor], eps: float = 1e-4,
                   max_entries: int | None = None, rng: Rng | None = None) -> float:
    """Norm-wise relative error between autograd and central differences.

    The error is taken over the concatenation of every compared coordinate, so
    parameters whose exact gradient is zero (e.g. biases cancelled by a
    following normalisation) do not turn FD round-off into a spurious failure.
    ``fn`` must rebuild the scalar loss from the current tensor values. When
    ``max_entries`` is given, a random subset of coordinates per tensor is
    compared (selected by ``rng``).
    """
    for t in tensors:
        if t.grad is not None:
            t.grad = None
    loss = fn()
    if loss.numel() != 1:
        raise ContractError("gradient check needs a scalar loss")
    grads = torch.autograd.grad(loss, list(tensors), allow_unused=True)
    picker = rng or Rng(0)
    analytic, numeric = [], []
    for t, g in zip(tensors, grads):
        if g is None:
            g = torch.zeros_like(t)
        idx = None
        if max_entries is not None and t.numel() > max_entries:
            idx = sorted(picker.gen.choice(t.numel(), size=max_entries, replace=False).tolist())
        num = numerical_gradient(fn, t, eps, idx)
        if idx is not None:
            g = g.reshape(-1)[idx]
            num = num.reshape(-1)[idx]
        analytic.append(g.reshape(-1))
        numeric.append(num.reshape(-1))
    return relative_error(torch.cat(analytic), torch.cat(numeric))
