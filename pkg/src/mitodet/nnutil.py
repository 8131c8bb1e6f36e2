"""Shared torch plumbing: seeded init, image/tensor conversion, state export.

Training entry points are bit-deterministic given a seed. Determinism here
relies on (a) initializing every parameter from a caller-owned
``torch.Generator`` instead of the global RNG, (b) pinning the intra-op
thread count for the duration of a run, and (c) avoiding batch-dependent
layers (no batch norm anywhere).
"""

from __future__ import annotations

import contextlib
import hashlib
from typing import Iterator, Mapping, Sequence

import numpy as np
import torch
from torch import nn

__all__ = [
    "single_threaded_torch",
    "init_weights",
    "image_to_tensor",
    "batch_to_tensor",
    "tensor_to_image",
    "state_arrays",
    "load_state_arrays",
    "fingerprint_arrays",
]


@contextlib.contextmanager
def single_threaded_torch() -> Iterator[None]:
    """Pin torch to one intra-op thread so reductions are bit-reproducible."""
    old = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(old)


def init_weights(module: nn.Module, generator: torch.Generator, std: float = 0.02) -> None:
    """Gaussian(0, std) conv/linear weights, zero biases, unit norm scales."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            m.weight.data.normal_(0.0, std, generator=generator)
            if m.bias is not None:
                m.bias.data.zero_()
        elif isinstance(m, nn.GroupNorm):
            m.weight.data.fill_(1.0)
            m.bias.data.zero_()


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """HxWx3 uint8 raster -> 1x3xHxW float32 tensor scaled to [-1, 1]."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 raster, got shape {image.shape}")
    arr = np.asarray(image, dtype=np.float32) / 127.5 - 1.0
    return torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0).contiguous()


def batch_to_tensor(images: Sequence[np.ndarray] | np.ndarray) -> torch.Tensor:
    """Stack of HxWx3 rasters -> Bx3xHxW float32 tensor scaled to [-1, 1]."""
    arr = np.asarray(images, dtype=np.float32) / 127.5 - 1.0
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise ValueError(f"expected BxHxWx3 rasters, got shape {arr.shape}")
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    """3xHxW or 1x3xHxW tensor in [-1, 1] -> HxWx3 uint8, round-half-up."""
    if t.dim() == 4:
        if t.shape[0] != 1:
            raise ValueError(f"expected a single image, got batch of {t.shape[0]}")
        t = t[0]
    arr = t.detach().permute(1, 2, 0).numpy().astype(np.float64)
    arr = np.clip((arr + 1.0) * 127.5, 0.0, 255.0)
    return np.floor(arr + 0.5).clip(0, 255).astype(np.uint8)


def state_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    """Parameters and buffers as plain numpy arrays, keyed by state-dict name."""
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_state_arrays(module: nn.Module, arrays: Mapping[str, np.ndarray]) -> None:
    state = {k: torch.from_numpy(np.asarray(v)) for k, v in arrays.items()}
    module.load_state_dict(state, strict=True)


def fingerprint_arrays(arrays: Mapping[str, np.ndarray]) -> str:
    """Content hash of a parameter set, for cache keys and provenance checks."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        arr = np.ascontiguousarray(arrays[name])
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
