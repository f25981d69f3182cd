"""Core numerics: FFT convolution, reverse-mode gradients, counter-based noise.

Real tensors are float64 ``torch.Tensor`` objects unless a caller opts into
float32. Random streams are keyed by ``(seed, stream)`` on a Philox
counter-based generator, so a draw never depends on what other streams did
before it.
"""

from __future__ import annotations

import hashlib
import math
from collections.abc import Callable, Mapping, Sequence

import numpy as np
import torch

from hydrodiffusion.errors import ArgumentError, NumericError

_U64 = (1 << 64) - 1

ParamDict = dict[str, torch.Tensor]


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def next_pow2(n: int) -> int:
    """Smallest power of two that is >= n."""
    return 1 << max(0, math.ceil(math.log2(max(n, 1))))


def fft_linear_convolve(u: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Causal linear convolution ``y[t] = sum_{s<=t} k[s] u[t-s]`` along the last axis.

    Both inputs are zero-padded to the next power of two >= 2L-1, multiplied in
    the frequency domain and truncated back to L. Leading axes broadcast.
    """
    if u.shape[-1] != k.shape[-1]:
        raise ArgumentError(
            f"Sequence and kernel lengths differ: {u.shape[-1]} vs {k.shape[-1]}"
        )
    length = u.shape[-1]
    if length < 1:
        raise ArgumentError("Sequences must have length >= 1")
    n_fft = next_pow2(2 * length - 1)
    u_f = torch.fft.rfft(u, n=n_fft)
    k_f = torch.fft.rfft(k, n=n_fft)
    return torch.fft.irfft(u_f * k_f, n=n_fft)[..., :length]


def direct_linear_convolve(u: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """O(L^2) reference for :func:`fft_linear_convolve`."""
    if u.shape[-1] != k.shape[-1]:
        raise ArgumentError(
            f"Sequence and kernel lengths differ: {u.shape[-1]} vs {k.shape[-1]}"
        )
    length = u.shape[-1]
    out = torch.zeros(torch.broadcast_shapes(u.shape, k.shape), dtype=u.dtype)
    for t in range(length):
        # k[0..t] against u[t..0]
        out[..., t] = (k[..., : t + 1] * u[..., : t + 1].flip(-1)).sum(-1)
    return out


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


def gradient_of(
    loss: Callable[[ParamDict], torch.Tensor], params: Mapping[str, torch.Tensor]
) -> ParamDict:
    """Gradient of a scalar loss with respect to every named parameter.

    Args:
        loss: Callable mapping a parameter dict to a scalar tensor.
        params: Named real tensors at which to differentiate.

    Returns:
        Dict with the same keys; parameters the loss ignores get exact zeros.

    Raises:
        NumericError: the loss is not finite.
    """
    leaves = {name: p.detach().clone().requires_grad_(True) for name, p in params.items()}
    value = loss(leaves)
    if value.numel() != 1:
        raise ArgumentError(f"Loss must be scalar, got shape {tuple(value.shape)}")
    if not torch.isfinite(value).all():
        raise NumericError(f"Loss is not finite: {value.item()}")
    names = list(leaves)
    grads = torch.autograd.grad(value, [leaves[n] for n in names], allow_unused=True)
    return {
        name: torch.zeros_like(leaves[name]) if g is None else g.detach()
        for name, g in zip(names, grads)
    }


@torch.no_grad()
def central_difference(
    loss: Callable[[ParamDict], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    h: float = 1e-4,
) -> ParamDict:
    """Per-element central finite differences ``(f(p+h) - f(p-h)) / 2h``."""
    work = {name: p.detach().clone() for name, p in params.items()}
    result: ParamDict = {}
    for name, tensor in work.items():
        grad = torch.zeros_like(tensor)
        flat = tensor.view(-1)
        flat_grad = grad.view(-1)
        for i in range(flat.numel()):
            original = flat[i].item()
            flat[i] = original + h
            plus = loss(work).item()
            flat[i] = original - h
            minus = loss(work).item()
            flat[i] = original
            flat_grad[i] = (plus - minus) / (2.0 * h)
        result[name] = grad
    return result


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


def derive_seed(root_seed: int, label: str) -> int:
    """Stable 63-bit seed for a named sub-stream of ``root_seed``."""
    digest = hashlib.blake2b(f"{root_seed}:{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def philox_generator(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, stream)``."""
    key = np.array([seed & _U64, stream & _U64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def gaussian_sample(
    shape: int | Sequence[int],
    seed: int,
    stream: int = 0,
    dtype: torch.dtype = torch.float64,
) -> torch.Tensor:
    """i.i.d. standard normal tensor; identical ``(seed, stream)`` gives identical bits."""
    if isinstance(shape, int):
        shape = (shape,)
    values = philox_generator(seed, stream).standard_normal(tuple(shape))
    return torch.from_numpy(values).to(dtype)
