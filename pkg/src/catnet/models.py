"""UNet (spectrogram mask), WavUNet (waveform) and CatNet (their sum) separators."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import dsp
from . import tensor as T
from .data import AudioSegment
from .errors import ConfigError, DimensionError, InputError
from .tensor import Tensor

MODEL_KINDS = ("unet_spec_loss", "unet_wav_loss", "wavunet", "catnet")
SOURCES = ("vocals", "drums", "bass", "other")


@dataclass
class ModelConfig:
    sample_rate: int = 8000
    stft: dsp.StftConfig = field(default_factory=lambda: dsp.StftConfig(256, 64, "hann"))
    unet_depth: int = 3
    unet_channels: list = field(default_factory=lambda: [8, 16, 32])
    unet_kernel: int = 3
    unet_pool: int = 2
    wavunet_depth: int = 3
    wavunet_channels: list = field(default_factory=lambda: [8, 16, 32])
    wavunet_kernel: int = 3
    wavunet_pool: int = 4
    input_channels: int = 1
    sources: list = field(default_factory=lambda: list(SOURCES))

    def __post_init__(self):
        if isinstance(self.stft, dict):
            self.stft = dsp.StftConfig(**self.stft)
        self.unet_channels = list(self.unet_channels)
        self.wavunet_channels = list(self.wavunet_channels)
        self.sources = list(self.sources)
        self.validate()

    def validate(self) -> None:
        if len(self.unet_channels) != self.unet_depth:
            raise ConfigError(f"unet_channels {self.unet_channels} does not match depth {self.unet_depth}")
        if len(self.wavunet_channels) != self.wavunet_depth:
            raise ConfigError(
                f"wavunet_channels {self.wavunet_channels} does not match depth {self.wavunet_depth}"
            )
        if min(self.unet_channels + self.wavunet_channels) < 1 or self.unet_depth < 1 or self.wavunet_depth < 1:
            raise ConfigError("depths and channel counts must be positive")
        if self.unet_kernel % 2 == 0 or self.wavunet_kernel % 2 == 0:
            raise ConfigError("convolution kernels must be odd to preserve extents")
        if self.sample_rate <= 0 or self.input_channels < 1:
            raise ConfigError("sample_rate and input_channels must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def desk_config() -> ModelConfig:
    return ModelConfig()


def full_scale_config() -> ModelConfig:
    """Full-scale architecture: 44.1 kHz stereo, Hann 2048/441, six blocks of 32..1024 channels."""
    channels = [32, 64, 128, 256, 512, 1024]
    return ModelConfig(
        sample_rate=44100,
        stft=dsp.StftConfig(2048, 441, "hann"),
        unet_depth=6,
        unet_channels=channels,
        wavunet_depth=6,
        wavunet_channels=channels,
        input_channels=2,
    )


# ----------------------------------------------------------------------------
# layers


class _Params:
    """Collects named parameters and buffers while a branch is being built."""

    def __init__(self, rng: np.random.Generator, dtype, prefix: str = ""):
        self.rng = rng
        self.dtype = np.dtype(dtype)
        self.prefix = prefix
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def weight(self, name, shape, fan_in, scale=1.0) -> Tensor:
        bound = scale * np.sqrt(1.0 / fan_in)
        data = self.rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        return self._add(name, data)

    def const(self, name, shape, value) -> Tensor:
        return self._add(name, np.full(shape, value, dtype=self.dtype))

    def buffer(self, name, shape, value) -> np.ndarray:
        arr = np.full(shape, value, dtype=self.dtype)
        self.buffers[self.prefix + name] = arr
        return arr

    def _add(self, name, data) -> Tensor:
        t = Tensor(data, requires_grad=True)
        self.params[self.prefix + name] = t
        return t


class ConvBnRelu:
    def __init__(self, p: _Params, name: str, cin: int, cout: int, kernel: int, nd: int):
        self.nd = nd
        shape = (cout, cin) + (kernel,) * nd
        self.weight = p.weight(f"{name}.weight", shape, cin * kernel**nd)
        self.gamma = p.const(f"{name}.bn.gamma", (cout,), 1.0)
        self.beta = p.const(f"{name}.bn.beta", (cout,), 0.0)
        self.running_mean = p.buffer(f"{name}.bn.running_mean", (cout,), 0.0)
        self.running_var = p.buffer(f"{name}.bn.running_var", (cout,), 1.0)
        self.padding = kernel // 2

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        conv = T.conv2d if self.nd == 2 else T.conv1d
        y = conv(x, self.weight, padding=self.padding)
        y = T.batch_norm(y, self.gamma, self.beta, self.running_mean, self.running_var, training)
        return T.relu(y)


class Upsample:
    """Strided transposed convolution with bias."""

    def __init__(self, p: _Params, name: str, cin: int, cout: int, kernel: int, stride: int, nd: int):
        self.nd = nd
        self.stride = stride
        self.weight = p.weight(f"{name}.weight", (cin, cout) + (kernel,) * nd, cin * kernel**nd)
        self.bias = p.const(f"{name}.bias", (cout,), 0.0)

    def __call__(self, x: Tensor) -> Tensor:
        tconv = T.conv2d_transposed if self.nd == 2 else T.conv1d_transposed
        y = tconv(x, self.weight, stride=self.stride)
        return y + T.reshape(self.bias, (1, -1) + (1,) * self.nd)


class Pointwise:
    def __init__(self, p: _Params, name: str, cin: int, cout: int, nd: int, scale: float = 1.0):
        self.nd = nd
        self.weight = p.weight(f"{name}.weight", (cout, cin) + (1,) * nd, cin, scale=scale)
        self.bias = p.const(f"{name}.bias", (cout,), 0.0)

    def __call__(self, x: Tensor) -> Tensor:
        conv = T.conv2d if self.nd == 2 else T.conv1d
        return conv(x, self.weight) + T.reshape(self.bias, (1, -1) + (1,) * self.nd)


def _fit(x: Tensor, extents: tuple[int, ...]) -> Tensor:
    """Crop or zero-pad the trailing spatial axes of ``x`` to ``extents``."""
    nd = len(extents)
    current = x.shape[-nd:]
    if current == tuple(extents):
        return x
    index = (slice(None),) * (x.ndim - nd) + tuple(slice(0, min(c, e)) for c, e in zip(current, extents))
    x = x[index]
    widths = [(0, 0)] * (x.ndim - nd) + [(0, e - min(c, e)) for c, e in zip(current, extents)]
    return T.pad(x, widths) if any(b for _, b in widths) else x


class _EncoderDecoder:
    """Shared UNet skeleton; ``nd`` selects 2-D (spectrogram) or 1-D (waveform)."""

    def __init__(self, p, channels, kernel, pool, convs_per_block, up_kernel, nd, out_scale):
        self.nd = nd
        self.pool = pool
        self.encoders = []
        cin = 1
        for i, c in enumerate(channels):
            block = [ConvBnRelu(p, f"enc{i}.conv{j}", cin if j == 0 else c, c, kernel, nd) for j in range(convs_per_block)]
            self.encoders.append(block)
            cin = c
        self.decoders = []
        for i in reversed(range(len(channels))):
            c = channels[i]
            up = Upsample(p, f"dec{i}.up", cin, c, up_kernel, pool, nd)
            block = [ConvBnRelu(p, f"dec{i}.conv{j}", 2 * c if j == 0 else c, c, kernel, nd) for j in range(convs_per_block)]
            self.decoders.append((up, block))
            cin = c
        self.head = Pointwise(p, "head", channels[0], 1, nd, scale=out_scale)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        skips = []
        for block in self.encoders:
            for layer in block:
                x = layer(x, training)
            skips.append(x)
            x = T.avg_pool(x, (self.pool,) * self.nd)
        for (up, block), skip in zip(self.decoders, reversed(skips)):
            x = _fit(up(x), skip.shape[2:])
            x = T.concat([x, skip], axis=1)
            for layer in block:
                x = layer(x, training)
        return self.head(x)


class UNetBranch:
    """Predicts a sigmoid mask over the one-sided mixture magnitude."""

    def __init__(self, config: ModelConfig, p: _Params):
        self.config = config
        self.net = _EncoderDecoder(
            p, config.unet_channels, config.unet_kernel, config.unet_pool, 2, config.unet_kernel, 2, 1.0
        )
        self.mask_override: Optional[float] = None
        self.last_mask: Optional[Tensor] = None

    def mask(self, mag: Tensor, training: bool) -> Tensor:
        """(B, T, F) magnitudes to (B, T, F) mask in (0, 1)."""
        b, t, f = mag.shape
        if self.mask_override is not None:
            return Tensor(np.full((b, t, f), self.mask_override, dtype=mag.dtype))
        unit = self.config.unet_pool**self.config.unet_depth
        x = T.reshape(mag, (b, 1, t, f))
        x = T.pad(x, ((0, 0), (0, 0), (0, -t % unit), (0, -f % unit)))
        logits = self.net(x, training)[:, 0, :t, :f]
        return T.sigmoid(logits)

    def __call__(self, x: Tensor, training: bool) -> tuple[Tensor, Tensor]:
        cfg = self.config.stft
        length = x.shape[1]
        if length < cfg.window_size:
            raise DimensionError(f"input of {length} samples is shorter than one STFT frame ({cfg.window_size})")
        spec = dsp.stft(x, cfg)
        mag, cos, sin = dsp.magnitude(spec)
        mask = self.mask(dsp.one_sided(mag), training)
        self.last_mask = mask
        est_spec, est_mag = dsp.masked_spec(mask, mag, cos, sin)
        return dsp.istft(est_spec, cfg, length), est_mag


class WavUNetBranch:
    def __init__(self, config: ModelConfig, p: _Params):
        self.config = config
        # stride-4 upsampling uses kernel 4 so every output sample is covered exactly once
        self.net = _EncoderDecoder(
            p,
            config.wavunet_channels,
            config.wavunet_kernel,
            config.wavunet_pool,
            1,
            config.wavunet_pool,
            1,
            0.01,
        )
        self.output_override: Optional[float] = None

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        b, length = x.shape
        if self.output_override is not None:
            return Tensor(np.full((b, length), self.output_override, dtype=x.dtype))
        unit = self.config.wavunet_pool**self.config.wavunet_depth
        h = T.pad(T.reshape(x, (b, 1, length)), ((0, 0), (0, 0), (0, -length % unit)))
        y = self.net(h, training)
        return T.reshape(y[:, 0, :length], (b, length))


class SeparationModel:
    """One network estimating one target source from a mixture.

    ``forward`` takes (B, C, L) or (B, L) waveforms; audio channels are folded
    into the batch so they share parameters.
    """

    def __init__(self, kind: str, config: ModelConfig, seed: int = 0, dtype=np.float32, target: str = "vocals"):
        if kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
        config.validate()
        self.kind = kind
        self.config = config
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.target = target
        self.training = True
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.unet: Optional[UNetBranch] = None
        self.wavunet: Optional[WavUNetBranch] = None
        if kind != "wavunet":
            p = _Params(rng, dtype, "unet.")
            self.unet = UNetBranch(config, p)
            self.params.update(p.params)
            self.buffers.update(p.buffers)
        if kind in ("wavunet", "catnet"):
            p = _Params(rng, dtype, "wavunet.")
            self.wavunet = WavUNetBranch(config, p)
            self.params.update(p.params)
            self.buffers.update(p.buffers)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def train(self, mode: bool = True) -> "SeparationModel":
        self.training = mode
        return self

    def eval(self) -> "SeparationModel":
        return self.train(False)

    def _fold(self, mixture) -> tuple[Tensor, tuple[int, ...]]:
        x = T.as_tensor(mixture)
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype), requires_grad=x.requires_grad) if x.is_leaf else x
        shape = x.shape
        if x.ndim == 3:
            x = T.reshape(x, (shape[0] * shape[1], shape[2]))
        elif x.ndim == 1:
            x = T.reshape(x, (1, shape[0]))
        elif x.ndim != 2:
            raise DimensionError(f"mixture must be (B, L) or (B, C, L), got {shape}")
        return x, shape

    def branches(self, mixture) -> dict[str, Tensor]:
        """Per-branch waveforms (and UNet masked magnitude) in the folded (B*C, L) layout."""
        x, _ = self._fold(mixture)
        out = {}
        if self.unet is not None:
            out["unet"], out["magnitude"] = self.unet(x, self.training)
        if self.wavunet is not None:
            out["wavunet"] = self.wavunet(x, self.training)
        return out

    def forward(self, mixture) -> Tensor:
        _, shape = self._fold(mixture)
        parts = self.branches(mixture)
        if self.kind == "catnet":
            y = parts["unet"] + parts["wavunet"]
        elif self.kind == "wavunet":
            y = parts["wavunet"]
        else:
            y = parts["unet"]
        return T.reshape(y, shape)

    __call__ = forward

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"param/{k}": v.data for k, v in self.params.items()}
        state.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            arr = state[f"param/{k}"]
            if arr.shape != v.shape:
                raise ConfigError(f"parameter {k}: stored shape {arr.shape} != model shape {v.shape}")
            v.data = arr.astype(self.dtype).copy()
        for k, v in self.buffers.items():
            v[...] = state[f"buffer/{k}"]


def build_unet(config: ModelConfig, seed: int = 0, spectrogram_loss: bool = False, **kw) -> SeparationModel:
    return SeparationModel("unet_spec_loss" if spectrogram_loss else "unet_wav_loss", config, seed, **kw)


def build_wavunet(config: ModelConfig, seed: int = 0, **kw) -> SeparationModel:
    return SeparationModel("wavunet", config, seed, **kw)


def build_catnet(config: ModelConfig, seed: int = 0, **kw) -> SeparationModel:
    return SeparationModel("catnet", config, seed, **kw)


def build_model(kind: str, config: ModelConfig, seed: int = 0, **kw) -> SeparationModel:
    return SeparationModel(kind, config, seed, **kw)


def unet_forward(model: SeparationModel, mixture) -> tuple[Tensor, Tensor]:
    """Separated waveform and masked one-sided magnitude from the UNet branch."""
    if model.unet is None:
        raise ConfigError(f"model kind {model.kind} has no UNet branch")
    x, _ = model._fold(mixture)
    return model.unet(x, model.training)


def wavunet_forward(model: SeparationModel, mixture) -> Tensor:
    if model.wavunet is None:
        raise ConfigError(f"model kind {model.kind} has no WavUNet branch")
    x, _ = model._fold(mixture)
    return model.wavunet(x, model.training)


def catnet_forward(model: SeparationModel, mixture) -> Tensor:
    if model.kind != "catnet":
        raise ConfigError(f"catnet_forward needs a catnet model, got {model.kind}")
    x, _ = model._fold(mixture)
    return model.unet(x, model.training)[0] + model.wavunet(x, model.training)


def crossfade_weights(total: int, segment_len: int, overlap: int) -> tuple[list[int], list[np.ndarray]]:
    """Segment offsets and per-segment weights; the weights sum to one at every sample."""
    # beyond half a segment, ramps of non-neighbouring segments would overlap
    if overlap < 0 or 2 * overlap > segment_len:
        raise InputError(f"overlap must lie in [0, segment_len / 2], got {overlap}")
    step = segment_len - overlap
    offsets = [0]
    while offsets[-1] + segment_len < total:
        offsets.append(offsets[-1] + step)
    ramp = (np.arange(overlap) + 0.5) / overlap if overlap else np.zeros(0)
    weights = []
    for i, _ in enumerate(offsets):
        w = np.ones(segment_len)
        if overlap and i > 0:
            w[:overlap] = ramp
        if overlap and i < len(offsets) - 1:
            w[-overlap:] = 1.0 - ramp
        weights.append(w)
    return offsets, weights


def separate_track(
    model: SeparationModel,
    mixture: AudioSegment,
    segment_len: Optional[int] = None,
    overlap: Optional[int] = None,
) -> dict[str, AudioSegment]:
    """Separate a full track by overlapping segments with linear cross-fades.

    Returns the target source estimate, plus ``accompaniment`` (mixture minus
    the estimate) when the target is vocals.
    """
    if mixture.sample_rate != model.config.sample_rate:
        raise InputError(
            f"mixture sample rate {mixture.sample_rate} Hz != model sample rate {model.config.sample_rate} Hz"
        )
    if segment_len is None:
        segment_len = model.config.sample_rate
    if overlap is None:
        overlap = segment_len // 4
    samples = mixture.samples
    channels, total = samples.shape
    offsets, weights = crossfade_weights(total, segment_len, overlap)
    padded = np.zeros((channels, offsets[-1] + segment_len), dtype=model.dtype)
    padded[:, :total] = samples
    out = np.zeros_like(padded)
    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            for off, w in zip(offsets, weights):
                seg = padded[None, :, off : off + segment_len]
                y = model.forward(Tensor(seg)).data[0]
                out[:, off : off + segment_len] += y * w
    finally:
        model.train(was_training)
    estimate = AudioSegment(out[:, :total].astype(np.float32), mixture.sample_rate)
    result = {model.target: estimate}
    if model.target == "vocals":
        result["accompaniment"] = AudioSegment(
            (samples - estimate.samples).astype(np.float32), mixture.sample_rate
        )
    return result
