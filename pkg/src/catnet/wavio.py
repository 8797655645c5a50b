"""RIFF/WAVE reading and writing for 16-bit PCM and 32-bit float audio."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import WavError

PCM = 1
IEEE_FLOAT = 3
EXTENSIBLE = 0xFFFE
ENCODINGS = {"pcm16": (PCM, 16), "float32": (IEEE_FLOAT, 32)}


@dataclass(frozen=True)
class WavInfo:
    sample_rate: int
    channel_count: int
    encoding: str
    frame_count: int
    data_offset: int


def _chunks(buf: bytes):
    if len(buf) < 12:
        raise WavError(f"file is {len(buf)} bytes, too short for a RIFF header (offset 0)")
    if buf[0:4] != b"RIFF":
        raise WavError(f"missing RIFF magic at offset 0 (found {buf[0:4]!r})")
    if buf[8:12] != b"WAVE":
        raise WavError(f"missing WAVE form type at offset 8 (found {buf[8:12]!r})")
    pos = 12
    while pos + 8 <= len(buf):
        cid = buf[pos : pos + 4]
        (size,) = struct.unpack_from("<I", buf, pos + 4)
        yield cid, pos + 8, size
        pos += 8 + size + (size & 1)


def _parse(buf: bytes) -> WavInfo:
    fmt = None
    data = None
    for cid, start, size in _chunks(buf):
        if cid == b"fmt ":
            if size < 16 or start + 16 > len(buf):
                raise WavError(f"fmt chunk too short ({size} bytes) at offset {start - 8}")
            tag, channels, rate, _, align, bits = struct.unpack_from("<HHIIHH", buf, start)
            if tag == EXTENSIBLE:
                if size < 40:
                    raise WavError(f"extensible fmt chunk too short ({size} bytes) at offset {start - 8}")
                (tag,) = struct.unpack_from("<H", buf, start + 24)
            fmt = (tag, channels, rate, align, bits, start - 8)
        elif cid == b"data":
            data = (start, size)
            break
    if fmt is None:
        raise WavError("no fmt chunk found before data")
    if data is None:
        raise WavError("no data chunk found")
    tag, channels, rate, align, bits, fmt_offset = fmt
    encoding = next((name for name, spec in ENCODINGS.items() if spec == (tag, bits)), None)
    if encoding is None:
        raise WavError(f"unsupported encoding format={tag} bits={bits} in fmt chunk at offset {fmt_offset}")
    if channels < 1 or rate < 1:
        raise WavError(f"invalid channel count {channels} or sample rate {rate} at offset {fmt_offset}")
    if align != channels * bits // 8:
        raise WavError(f"block align {align} inconsistent with {channels}x{bits} bits at offset {fmt_offset}")
    start, size = data
    if start + size > len(buf):
        raise WavError(
            f"data chunk at offset {start - 8} declares {size} bytes but only {len(buf) - start} remain"
        )
    if size % align:
        raise WavError(f"data chunk size {size} at offset {start - 8} is not a multiple of block align {align}")
    return WavInfo(rate, channels, encoding, size // align, start)


def read_wav_info(path: Union[str, os.PathLike]) -> WavInfo:
    with open(path, "rb") as fh:
        return _parse(fh.read())


def read_wav(path: Union[str, os.PathLike]):
    """Decode ``path`` into an :class:`~catnet.data.AudioSegment` of float32 samples."""
    from .data import AudioSegment

    with open(path, "rb") as fh:
        samples, rate = decode_wav(fh.read())
    return AudioSegment(samples, rate)


def decode_wav(buf: bytes) -> tuple[np.ndarray, int]:
    """Return (channels x frames float32 array, sample rate)."""
    info = _parse(buf)
    count = info.frame_count * info.channel_count
    if info.encoding == "pcm16":
        raw = np.frombuffer(buf, dtype="<i2", count=count, offset=info.data_offset)
        samples = raw.astype(np.float32) / 32768.0
    else:
        samples = np.frombuffer(buf, dtype="<f4", count=count, offset=info.data_offset).astype(np.float32)
    return samples.reshape(info.frame_count, info.channel_count).T.copy(), info.sample_rate


def encode_wav(samples: np.ndarray, sample_rate: int, encoding: str = "pcm16") -> bytes:
    samples = np.atleast_2d(np.asarray(samples))
    if encoding not in ENCODINGS:
        raise WavError(f"unsupported encoding {encoding!r}")
    tag, bits = ENCODINGS[encoding]
    channels = samples.shape[0]
    interleaved = samples.T.reshape(-1)
    if encoding == "pcm16":
        payload = np.clip(np.round(interleaved * 32768.0), -32768, 32767).astype("<i2").tobytes()
    else:
        payload = interleaved.astype("<f4").tobytes()
    align = channels * bits // 8
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, tag, channels, sample_rate, sample_rate * align, align, bits)
    header += b"data" + struct.pack("<I", len(payload))
    return header + payload


def write_wav(path: Union[str, os.PathLike], segment, encoding: str = "pcm16") -> None:
    data = encode_wav(segment.samples, segment.sample_rate, encoding)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
