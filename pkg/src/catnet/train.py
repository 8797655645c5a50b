"""Adam optimization of separation models on mix-audio training pairs, with checkpoints."""

from __future__ import annotations

import json
import logging
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import dsp
from . import tensor as T
from .data import SOURCES, AugmentConfig, TrackStems, make_batch
from .errors import CheckpointIntegrityError, CheckpointVersionError, ConfigError, TrainingError
from .models import ModelConfig, SeparationModel, unet_forward
from .tensor import Tensor

logger = logging.getLogger(__name__)

LOSS_KINDS = ("waveform_mae", "spectrogram_mae")


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    Parameters whose gradient is missing keep their value and moments.
    """
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ConfigError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self) -> None:
        adam_step(
            {k: p.data for k, p in self.params.items()},
            {k: p.grad for k, p in self.params.items() if p.grad is not None},
            self.state,
        )

    def zero_grad(self) -> None:
        T.zero_grad(self.params.values())


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 4
    steps: int = 200
    seed: int = 0
    loss: str = "waveform_mae"
    checkpoint_interval: int = 0
    grad_clip: Optional[float] = None
    dtype: str = "float32"

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.steps < 0 or self.checkpoint_interval < 0:
            raise ConfigError("lr and batch_size must be positive; steps and checkpoint_interval non-negative")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"unknown loss {self.loss!r}; expected one of {LOSS_KINDS}")


def compute_loss(model: SeparationModel, x: np.ndarray, s: np.ndarray, kind: Optional[str] = None) -> Tensor:
    """Waveform MAE, or magnitude MAE on one-sided STFT bins for the spectrogram-loss UNet."""
    if kind is None:
        kind = "spectrogram_mae" if model.kind == "unet_spec_loss" else "waveform_mae"
    x = Tensor(np.asarray(x, dtype=model.dtype))
    s = np.asarray(s, dtype=model.dtype)
    if kind == "waveform_mae":
        return T.mae_loss(model.forward(x), Tensor(s))
    if model.unet is None:
        raise ConfigError("spectrogram loss needs a model with a UNet branch")
    _, est_mag = unet_forward(model, x)
    with T.no_grad():
        flat = s.reshape(-1, s.shape[-1])
        target_mag, _, _ = dsp.magnitude(dsp.stft(Tensor(flat), model.config.stft))
    return T.mae_loss(est_mag, dsp.one_sided(target_mag))


def train_step(
    model: SeparationModel,
    batch: tuple[np.ndarray, np.ndarray],
    optimizer: Adam,
    loss_kind: Optional[str] = None,
    grad_clip: Optional[float] = None,
    step: int = 0,
) -> float:
    x, s = batch
    model.train()
    loss = compute_loss(model, x, s, loss_kind)
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at step {step} (batch shape {np.shape(x)})")
    T.backward(loss)
    if grad_clip is not None:
        total = np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in model.parameters() if p.grad is not None))
        if total > grad_clip:
            for p in model.parameters():
                if p.grad is not None:
                    p.grad *= grad_clip / total
    optimizer.step()
    optimizer.zero_grad()
    return value


def branch_grad_norms(model: SeparationModel) -> dict[str, float]:
    norms: dict[str, float] = {}
    for name, p in model.params.items():
        if p.grad is not None:
            branch = name.split(".", 1)[0]
            norms[branch] = norms.get(branch, 0.0) + float(np.sum(p.grad.astype(np.float64) ** 2))
    return {k: float(np.sqrt(v)) for k, v in norms.items()}


class Trainer:
    """Owns the model, optimizer, sampling rng and step counter for one target source."""

    def __init__(
        self,
        model: SeparationModel,
        dataset: Sequence[TrackStems],
        config: TrainConfig,
        augment: AugmentConfig,
        sources: Sequence[str] = SOURCES,
    ):
        self.model = model
        self.dataset = dataset
        self.config = config
        self.augment = augment
        self.sources = list(sources)
        self.optimizer = Adam(model.params, lr=config.lr)
        self.rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
        self.step = 0
        self.losses: list[float] = []

    def next_batch(self) -> tuple[np.ndarray, np.ndarray]:
        return make_batch(
            self.dataset, self.model.target, self.augment, self.rng, self.config.batch_size, self.sources
        )

    def run(
        self,
        steps: Optional[int] = None,
        log_path=None,
        checkpoint_path=None,
    ) -> list[float]:
        """Train until ``self.step`` reaches ``steps`` (default: the configured total)."""
        target = self.config.steps if steps is None else steps
        losses = []
        while self.step < target:
            batch = self.next_batch()
            value = train_step(self.model, batch, self.optimizer, grad_clip=self.config.grad_clip, step=self.step)
            self.step += 1
            losses.append(value)
            self.losses.append(value)
            if log_path is not None:
                append_loss(log_path, self.step, value)
            if self.step % 50 == 0:
                logger.info("step %d loss %.6f", self.step, value)
            interval = self.config.checkpoint_interval
            if checkpoint_path is not None and interval and self.step % interval == 0:
                self.save(checkpoint_path)
        if checkpoint_path is not None:
            self.save(checkpoint_path)
        return losses

    def save(self, path, extra: Optional[dict] = None) -> None:
        save_checkpoint(
            path,
            self.model,
            self.optimizer.state,
            self.step,
            self.rng,
            {"train": asdict(self.config), "augment": asdict(self.augment), "sources": self.sources, **(extra or {})},
        )

    @classmethod
    def from_checkpoint(cls, path, dataset: Sequence[TrackStems]) -> "Trainer":
        ckpt = load_checkpoint(path)
        model = ckpt.build_model()
        meta = ckpt.meta
        trainer = cls(
            model,
            dataset,
            TrainConfig(**meta["train"]),
            AugmentConfig(**meta["augment"]),
            meta.get("sources", SOURCES),
        )
        trainer.optimizer.state = ckpt.adam_state(model)
        trainer.step = ckpt.step
        trainer.rng.bit_generator.state = ckpt.rng_state
        return trainer


def append_loss(path, step: int, value: float) -> None:
    new = not os.path.exists(path)
    with open(path, "a") as fh:
        if new:
            fh.write("step,loss\n")
        fh.write(f"{step},{value!r}\n")


# ----------------------------------------------------------------------------
# checkpoint format
#
#   b"CATN" | u32 version | u32 chunk count
#   chunk: u16 name length | name (utf-8) | u8 kind | u64 payload length | payload | u32 crc32(payload)
#   kind 0: utf-8 text; kind 1: array = u8 dtype code | u8 ndim | ndim x u64 extents | little-endian data

MAGIC = b"CATN"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    version: int
    model_kind: str
    model_config: ModelConfig
    target: str
    dtype: str
    seed: int
    step: int
    arrays: dict[str, np.ndarray]
    adam: dict
    rng_state: dict
    meta: dict

    def build_model(self) -> SeparationModel:
        model = SeparationModel(self.model_kind, self.model_config, seed=self.seed, dtype=self.dtype, target=self.target)
        model.load_state_dict(self.arrays)
        return model

    def adam_state(self, model: SeparationModel) -> AdamState:
        state = AdamState(**{k: self.adam[k] for k in ("lr", "beta1", "beta2", "eps", "t")})
        for name in model.params:
            if f"adam.m/{name}" in self.arrays:
                state.m[name] = self.arrays[f"adam.m/{name}"].astype(model.dtype)
                state.v[name] = self.arrays[f"adam.v/{name}"].astype(model.dtype)
        return state


def _encode_array(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dtype = arr.dtype.newbyteorder("<")
    if dtype not in _CODES:
        raise ConfigError(f"cannot serialize array of dtype {arr.dtype}")
    head = struct.pack("<BB", _CODES[dtype], arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def _decode_array(buf: bytes, name: str) -> np.ndarray:
    if len(buf) < 2:
        raise CheckpointIntegrityError(f"array chunk {name!r} too short")
    code, ndim = struct.unpack_from("<BB", buf)
    if code not in _DTYPES or len(buf) < 2 + 8 * ndim:
        raise CheckpointIntegrityError(f"array chunk {name!r} has a malformed header")
    shape = struct.unpack_from(f"<{ndim}Q", buf, 2)
    dtype = _DTYPES[code]
    expected = int(np.prod(shape)) * dtype.itemsize
    body = buf[2 + 8 * ndim :]
    if len(body) != expected:
        raise CheckpointIntegrityError(f"array chunk {name!r} holds {len(body)} bytes, shape needs {expected}")
    return np.frombuffer(body, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def write_chunks(path, chunks: list[tuple[str, object]]) -> None:
    out = [MAGIC, struct.pack("<II", VERSION, len(chunks))]
    for name, value in chunks:
        if isinstance(value, str):
            kind, payload = 0, value.encode("utf-8")
        else:
            kind, payload = 1, _encode_array(value)
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BQ", kind, len(payload)))
        out.append(payload)
        out.append(struct.pack("<I", zlib.crc32(payload)))
    tmp = Path(f"{path}.tmp")
    tmp.write_bytes(b"".join(out))
    os.replace(tmp, path)


def read_chunks(path) -> dict[str, object]:
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise CheckpointIntegrityError(f"{path}: bad magic bytes {buf[:4]!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads version {VERSION}")
    pos = 12
    chunks: dict[str, object] = {}
    for i in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2 : pos + 2 + nlen].decode("utf-8")
            pos += 2 + nlen
            kind, plen = struct.unpack_from("<BQ", buf, pos)
            pos += 9
            payload = buf[pos : pos + plen]
            if len(payload) != plen:
                raise CheckpointIntegrityError(f"{path}: chunk {i} ({name!r}) truncated")
            pos += plen
            (crc,) = struct.unpack_from("<I", buf, pos)
            pos += 4
        except (struct.error, UnicodeDecodeError) as exc:
            raise CheckpointIntegrityError(f"{path}: truncated or corrupt at chunk {i} (byte {pos})") from exc
        if zlib.crc32(payload) != crc:
            raise CheckpointIntegrityError(f"{path}: checksum mismatch in chunk {name!r}")
        chunks[name] = payload.decode("utf-8") if kind == 0 else _decode_array(payload, name)
    if pos != len(buf):
        raise CheckpointIntegrityError(f"{path}: {len(buf) - pos} trailing bytes after last chunk")
    return chunks


def save_checkpoint(
    path,
    model: SeparationModel,
    adam: Optional[AdamState],
    step: int,
    rng: Optional[np.random.Generator],
    meta: Optional[dict] = None,
) -> None:
    header = {
        "model_kind": model.kind,
        "model_config": model.config.to_dict(),
        "target": model.target,
        "dtype": model.dtype.name,
        "seed": model.seed,
        "step": step,
    }
    chunks: list[tuple[str, object]] = [("config", json.dumps(header, sort_keys=True))]
    chunks.append(("meta", json.dumps(meta or {}, sort_keys=True)))
    chunks += sorted(model.state_dict().items())
    adam = adam or AdamState()
    chunks.append(("adam", json.dumps({k: getattr(adam, k) for k in ("lr", "beta1", "beta2", "eps", "t")})))
    for name in sorted(adam.m):
        chunks.append((f"adam.m/{name}", adam.m[name]))
        chunks.append((f"adam.v/{name}", adam.v[name]))
    chunks.append(("rng", json.dumps(rng.bit_generator.state if rng is not None else {})))
    write_chunks(path, chunks)


def load_checkpoint(path) -> Checkpoint:
    chunks = read_chunks(path)
    try:
        header = json.loads(chunks["config"])
        meta = json.loads(chunks["meta"])
        adam = json.loads(chunks["adam"])
        rng_state = json.loads(chunks["rng"])
    except KeyError as exc:
        raise CheckpointIntegrityError(f"{path}: missing chunk {exc}") from None
    arrays = {k: v for k, v in chunks.items() if isinstance(v, np.ndarray)}
    return Checkpoint(
        version=VERSION,
        model_kind=header["model_kind"],
        model_config=ModelConfig.from_dict(header["model_config"]),
        target=header["target"],
        dtype=header["dtype"],
        seed=header["seed"],
        step=header["step"],
        arrays=arrays,
        adam=adam,
        rng_state=rng_state,
        meta=meta,
    )
