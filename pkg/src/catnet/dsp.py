"""STFT and ISTFT written as fixed-kernel convolutions inside the tensor graph.

Analysis is two strided ``conv1d`` calls whose kernels are the window-scaled
rows of the real and imaginary DFT matrices. Synthesis applies the inverse
DFT as 1x1 convolutions over the bin axis, windows each frame, and overlap-adds
with a strided ``conv1d_transposed`` carrying an identity kernel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor

MAG_EPS = 1e-8
ENVELOPE_FLOOR = 1e-8


@dataclass(frozen=True)
class StftConfig:
    window_size: int = 2048
    hop: int = 441
    window_kind: str = "hann"
    center: bool = True

    def __post_init__(self):
        if self.window_size < 2 or self.window_size % 2:
            raise ConfigError(f"window_size must be even and >= 2, got {self.window_size}")
        if not 0 < self.hop <= self.window_size:
            raise ConfigError(f"hop must lie in (0, window_size], got {self.hop}")
        if self.window_kind not in ("hann", "rect"):
            raise ConfigError(f"unknown window kind {self.window_kind!r}")

    @property
    def bins(self) -> int:
        """One-sided bin count N/2 + 1."""
        return self.window_size // 2 + 1


@dataclass(frozen=True)
class DftMatrices:
    size: int
    real: np.ndarray
    imag: np.ndarray
    inv_real: np.ndarray
    inv_imag: np.ndarray


@dataclass
class ComplexSpec:
    """Real and imaginary STFT parts, each (B, T, N) over all N bins."""

    real: Tensor
    imag: Tensor
    hop: int
    window_kind: str
    signal_length: Optional[int] = None

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise DimensionError(f"real {self.real.shape} and imag {self.imag.shape} differ")

    @property
    def frame_count(self) -> int:
        return self.real.shape[-2]

    @property
    def bin_count(self) -> int:
        return self.real.shape[-1]

    def to_complex(self) -> np.ndarray:
        return self.real.data + 1j * self.imag.data


def make_dft_matrices(n: int, dtype=np.float64) -> DftMatrices:
    if n < 2 or n % 2:
        raise ConfigError(f"DFT size must be even and >= 2, got {n}")
    k = np.arange(n)
    # reduce kn mod N before scaling so large N keeps full phase accuracy
    angle = 2.0 * np.pi * (np.outer(k, k) % n) / n
    cos, sin = np.cos(angle), np.sin(angle)
    return DftMatrices(
        size=n,
        real=cos.astype(dtype),
        imag=(-sin).astype(dtype),
        inv_real=(cos / n).astype(dtype),
        inv_imag=(sin / n).astype(dtype),
    )


def window(kind: str, n: int, dtype=np.float64) -> np.ndarray:
    if kind == "hann":
        # periodic Hann
        return (0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)).astype(dtype)
    if kind == "rect":
        return np.ones(n, dtype=dtype)
    raise ConfigError(f"unknown window kind {kind!r}")


def frame_geometry(length: int, cfg: StftConfig) -> tuple[int, int, int]:
    """Return (left_pad, right_pad, frame_count) for a signal of ``length`` samples."""
    n, hop = cfg.window_size, cfg.hop
    left = n // 2 if cfg.center else 0
    padded = length + (n if cfg.center else 0)
    if padded < n:
        extra = n - padded
    else:
        extra = (-(padded - n)) % hop
    right = (n // 2 if cfg.center else 0) + extra
    frames = (padded + extra - n) // hop + 1
    return left, right, frames


def _as_batch(x) -> Tensor:
    x = T.as_tensor(x)
    if x.ndim == 1:
        x = T.reshape(x, (1, x.shape[0]))
    if x.ndim != 2:
        raise DimensionError(f"expected a (B, L) signal, got {x.shape}")
    return x


def _padded(x: Tensor, cfg: StftConfig) -> Tensor:
    left, right, _ = frame_geometry(x.shape[1], cfg)
    x = T.pad(x, ((0, 0), (left, right)))
    return T.reshape(x, (x.shape[0], 1, x.shape[1]))


_kernel_cache: dict = {}


def _kernels(cfg: StftConfig, dtype) -> dict:
    key = (cfg.window_size, cfg.window_kind, np.dtype(dtype).str)
    cached = _kernel_cache.get(key)
    if cached is None:
        n = cfg.window_size
        d = make_dft_matrices(n, np.float64)
        win = window(cfg.window_kind, n, np.float64)
        eye = np.eye(n)
        cached = {
            "fwd_real": (d.real * win)[:, None, :],
            "fwd_imag": (d.imag * win)[:, None, :],
            "inv_real": d.inv_real[:, :, None],
            "inv_imag": d.inv_imag[:, :, None],
            "frame": (eye * win)[:, None, :],
            "overlap_add": eye[:, None, :],
            "window": win[None, :, None],
        }
        cached = {name: Tensor(arr.astype(dtype)) for name, arr in cached.items()}
        _kernel_cache[key] = cached
    return cached


def frame_signal(x, cfg: StftConfig) -> Tensor:
    """Windowed frames (B, T, N); frame t holds padded samples [t*hop, t*hop + N)."""
    x = _as_batch(x)
    k = _kernels(cfg, x.dtype)
    frames = T.conv1d(_padded(x, cfg), k["frame"], stride=cfg.hop)
    return T.transpose(frames, (0, 2, 1))


def stft(x, cfg: StftConfig) -> ComplexSpec:
    x = _as_batch(x)
    k = _kernels(cfg, x.dtype)
    xp = _padded(x, cfg)
    real = T.conv1d(xp, k["fwd_real"], stride=cfg.hop)
    imag = T.conv1d(xp, k["fwd_imag"], stride=cfg.hop)
    return ComplexSpec(
        real=T.transpose(real, (0, 2, 1)),
        imag=T.transpose(imag, (0, 2, 1)),
        hop=cfg.hop,
        window_kind=cfg.window_kind,
        signal_length=x.shape[1],
    )


def magnitude(spec: ComplexSpec, eps: float = MAG_EPS) -> tuple[Tensor, Tensor, Tensor]:
    """Return |X| and the cosine and sine of the phase of X, all (B, T, N)."""
    mag = T.sqrt(T.square(spec.real) + T.square(spec.imag) + eps * eps)
    return mag, spec.real / mag, spec.imag / mag


def one_sided(t: Tensor) -> Tensor:
    n = t.shape[-1]
    return t[..., : n // 2 + 1]


def masked_spec(mask: Tensor, mag: Tensor, cos: Tensor, sin: Tensor) -> tuple[ComplexSpec, Tensor]:
    """Scale one-sided magnitudes by ``mask`` and reuse the mixture phase.

    Returns the full-spectrum estimate and the masked one-sided magnitude.
    """
    n = mag.shape[-1]
    f = n // 2 + 1
    if mask.shape[-1] != f or mask.shape[:-1] != mag.shape[:-1]:
        raise DimensionError(f"mask {mask.shape} does not fit one-sided magnitude of {mag.shape}")
    est = mask * mag[..., :f]
    # bins N/2+1..N-1 mirror bins N/2-1..1 (magnitudes are even in k)
    full = T.concat([est, est[..., f - 2 : 0 : -1]], axis=-1)
    spec = ComplexSpec(real=full * cos, imag=full * sin, hop=0, window_kind="")
    return spec, est


def apply_mask_and_phase(mask: Tensor, mix_spec: ComplexSpec) -> ComplexSpec:
    if np.any(mask.data < 0) or np.any(mask.data > 1):
        raise ContractError("mask values must lie in [0, 1]")
    mag, cos, sin = magnitude(mix_spec)
    spec, _ = masked_spec(mask, mag, cos, sin)
    spec.hop = mix_spec.hop
    spec.window_kind = mix_spec.window_kind
    spec.signal_length = mix_spec.signal_length
    return spec


_envelope_cache: dict = {}


def _envelope(cfg: StftConfig, frames: int, dtype) -> np.ndarray:
    key = (cfg, frames, np.dtype(dtype).str)
    env = _envelope_cache.get(key)
    if env is None:
        win2 = window(cfg.window_kind, cfg.window_size) ** 2
        total = np.zeros((frames - 1) * cfg.hop + cfg.window_size)
        for t in range(frames):
            total[t * cfg.hop : t * cfg.hop + cfg.window_size] += win2
        env = (1.0 / np.maximum(total, ENVELOPE_FLOOR)).astype(dtype)
        _envelope_cache[key] = env
    return env


def istft(spec: ComplexSpec, cfg: StftConfig, out_length: int) -> Tensor:
    """Inverse STFT returning (B, out_length)."""
    if spec.bin_count != cfg.window_size:
        raise DimensionError(f"spec has {spec.bin_count} bins, config expects {cfg.window_size}")
    dtype = spec.real.dtype
    k = _kernels(cfg, dtype)
    frames_count = spec.frame_count
    n = cfg.window_size
    start = n // 2 if cfg.center else 0
    span = (frames_count - 1) * cfg.hop + n - 2 * start
    if out_length > span:
        raise DimensionError(f"out_length {out_length} exceeds reconstructable span {span}")
    real = T.transpose(spec.real, (0, 2, 1))
    imag = T.transpose(spec.imag, (0, 2, 1))
    frames = T.conv1d(real, k["inv_real"]) - T.conv1d(imag, k["inv_imag"])
    frames = frames * k["window"]
    signal = T.conv1d_transposed(frames, k["overlap_add"], stride=cfg.hop)
    signal = signal * _envelope(cfg, frames_count, dtype)
    signal = T.reshape(signal, (signal.shape[0], signal.shape[2]))
    return signal[:, start : start + out_length]
