"""Stem datasets, segment sampling, mix-audio augmentation and a synthetic stem generator."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy import signal as sps

from .errors import ContractError, DatasetError

SOURCES = ("vocals", "drums", "bass", "other")
MIXTURE_TOLERANCE = 1e-3
# synthetic stem level; with the drum peak limit every mixture stays inside [-1, 1]
STEM_RMS = 0.05
DRUM_PEAK = 0.4


@dataclass
class AudioSegment:
    """Float32 samples shaped (channels, frames) at ``sample_rate`` Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float32)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2:
            raise ContractError(f"samples must be (channels, frames), got shape {arr.shape}")
        if self.sample_rate <= 0:
            raise ContractError(f"sample_rate must be positive, got {self.sample_rate}")
        self.samples = arr

    @property
    def channel_count(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    def window(self, offset: int, length: int) -> "AudioSegment":
        """Samples [offset, offset + length), zero-padded past the end."""
        out = np.zeros((self.channel_count, length), dtype=np.float32)
        piece = self.samples[:, offset : offset + length]
        out[:, : piece.shape[1]] = piece
        return AudioSegment(out, self.sample_rate)

    def __add__(self, other: "AudioSegment") -> "AudioSegment":
        _check_compatible([self, other])
        return AudioSegment(self.samples + other.samples, self.sample_rate)

    def __sub__(self, other: "AudioSegment") -> "AudioSegment":
        _check_compatible([self, other])
        return AudioSegment(self.samples - other.samples, self.sample_rate)


def _check_compatible(segments: Sequence[AudioSegment]) -> None:
    ref = segments[0]
    for s in segments[1:]:
        if s.samples.shape != ref.samples.shape or s.sample_rate != ref.sample_rate:
            raise ContractError(
                f"segments differ: {s.samples.shape}@{s.sample_rate} vs {ref.samples.shape}@{ref.sample_rate}"
            )


class TrackStems:
    """One track: isolated stems plus an optional stored mixture.

    Stems may be given in memory or as file paths that are decoded on first use.
    """

    def __init__(
        self,
        name: str,
        stems: Optional[dict[str, AudioSegment]] = None,
        mixture: Optional[AudioSegment] = None,
        paths: Optional[dict[str, Path]] = None,
        sample_rate: Optional[int] = None,
        length: Optional[int] = None,
    ):
        self.name = name
        self._stems = stems
        self._mixture = mixture
        self._paths = paths or {}
        if stems is not None:
            seg = next(iter(stems.values()))
            sample_rate, length = seg.sample_rate, seg.length
            self._validate(stems, mixture)
        self.sample_rate = sample_rate
        self.length = length

    @property
    def sources(self) -> list[str]:
        return list(self._stems) if self._stems is not None else [k for k in self._paths if k != "mixture"]

    @property
    def stems(self) -> dict[str, AudioSegment]:
        if self._stems is None:
            from .wavio import read_wav

            stems = {k: read_wav(p) for k, p in self._paths.items() if k != "mixture"}
            mixture = read_wav(self._paths["mixture"]) if "mixture" in self._paths else None
            self._validate(stems, mixture)
            self._stems, self._mixture = stems, mixture
        return self._stems

    def stem(self, source: str) -> AudioSegment:
        try:
            return self.stems[source]
        except KeyError:
            raise DatasetError(f"track {self.name!r} has no stem {source!r}") from None

    @property
    def mixture(self) -> AudioSegment:
        stems = self.stems
        if self._mixture is None:
            self._mixture = mix_audio_augment(list(stems.values()))
        return self._mixture

    @property
    def has_stored_mixture(self) -> bool:
        return self._mixture is not None or "mixture" in self._paths

    def _validate(self, stems, mixture) -> None:
        segs = list(stems.values())
        ref = segs[0]
        for source, seg in stems.items():
            if seg.sample_rate != ref.sample_rate:
                raise DatasetError(
                    f"track {self.name!r}: stem {source!r} at {seg.sample_rate} Hz, expected {ref.sample_rate} Hz"
                )
            if seg.samples.shape != ref.samples.shape:
                raise DatasetError(
                    f"track {self.name!r}: stem {source!r} shape {seg.samples.shape} != {ref.samples.shape}"
                )
        if mixture is not None:
            total = sum(s.samples.astype(np.float64) for s in segs)
            if mixture.samples.shape != ref.samples.shape or mixture.sample_rate != ref.sample_rate:
                raise DatasetError(f"track {self.name!r}: mixture shape/rate differs from stems")
            err = np.max(np.abs(mixture.samples - total)) if total.size else 0.0
            if err > MIXTURE_TOLERANCE:
                raise DatasetError(f"track {self.name!r}: mixture deviates from stem sum by {err:.3g}")


@dataclass
class AugmentConfig:
    mix_count: int = 2
    enable: bool = False
    random_track_mixing: bool = True
    segment_seconds: float = 1.0
    random_gain: bool = False

    def __post_init__(self):
        if self.mix_count < 1:
            raise ContractError(f"mix_count must be >= 1, got {self.mix_count}")
        if self.segment_seconds <= 0:
            raise ContractError(f"segment_seconds must be positive, got {self.segment_seconds}")

    @property
    def draws_per_source(self) -> int:
        return self.mix_count if self.enable else 1


def load_dataset(root, sources: Sequence[str] = SOURCES) -> list[TrackStems]:
    """Index ``root/<track>/{mixture,<source>...}.wav``; audio is decoded lazily."""
    from .wavio import read_wav_info

    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    tracks = []
    for track_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        paths = {}
        for source in sources:
            path = track_dir / f"{source}.wav"
            if not path.is_file():
                raise DatasetError(f"track {track_dir.name!r} is missing stem {source!r} ({path})")
            paths[source] = path
        if (track_dir / "mixture.wav").is_file():
            paths["mixture"] = track_dir / "mixture.wav"
        infos = {k: read_wav_info(p) for k, p in paths.items()}
        rates = {k: i.sample_rate for k, i in infos.items()}
        lengths = {k: i.frame_count for k, i in infos.items()}
        if len(set(rates.values())) != 1:
            raise DatasetError(f"track {track_dir.name!r}: sample rates differ across stems {rates}")
        if len(set(lengths.values())) != 1:
            raise DatasetError(f"track {track_dir.name!r}: lengths differ across stems {lengths}")
        tracks.append(
            TrackStems(
                track_dir.name,
                paths=paths,
                sample_rate=next(iter(rates.values())),
                length=next(iter(lengths.values())),
            )
        )
    return tracks


def write_dataset(tracks: Iterable[TrackStems], root, encoding: str = "float32") -> None:
    from .wavio import write_wav

    root = Path(root)
    for track in tracks:
        d = root / track.name
        d.mkdir(parents=True, exist_ok=True)
        for source, seg in track.stems.items():
            write_wav(d / f"{source}.wav", seg, encoding)
        write_wav(d / "mixture.wav", track.mixture, encoding)


# ----------------------------------------------------------------------------
# sampling and augmentation


def segment_samples(dataset: Sequence[TrackStems], seconds: float) -> int:
    return int(round(seconds * dataset[0].sample_rate))


def draw_window(dataset: Sequence[TrackStems], rng: np.random.Generator, length: int) -> tuple[TrackStems, int]:
    """Uniform track, then uniform offset among positions that keep the window inside the track."""
    if not dataset:
        raise DatasetError("dataset is empty")
    track = dataset[int(rng.integers(len(dataset)))]
    offset = int(rng.integers(max(track.length - length, 0) + 1))
    return track, offset


def sample_source_segment(
    dataset: Sequence[TrackStems], source: str, rng: np.random.Generator, length: int
) -> AudioSegment:
    track, offset = draw_window(dataset, rng, length)
    return track.stem(source).window(offset, length)


def mix_audio_augment(segments: Sequence[AudioSegment]) -> AudioSegment:
    """Plain sum of same-source segments: no gain, no renormalization, no clipping."""
    if not segments:
        raise ContractError("need at least one segment to mix")
    _check_compatible(segments)
    total = segments[0].samples.copy()
    for seg in segments[1:]:
        total += seg.samples
    return AudioSegment(total, segments[0].sample_rate)


def make_training_mixes(
    dataset: Sequence[TrackStems],
    aug: AugmentConfig,
    rng: np.random.Generator,
    sources: Sequence[str] = SOURCES,
    sampler: Callable = sample_source_segment,
) -> tuple[AudioSegment, dict[str, AudioSegment]]:
    """Return the input mixture and every source's augmented segment.

    The mixture is the sum over sources of their augmented segments, in the
    order of ``sources``.
    """
    length = segment_samples(dataset, aug.segment_seconds)
    draws = aug.draws_per_source
    mixes: dict[str, AudioSegment] = {}
    if aug.random_track_mixing:
        for source in sources:
            segs = [sampler(dataset, source, rng, length) for _ in range(draws)]
            mixes[source] = _gained(segs, aug, rng)
    else:
        track, _ = draw_window(dataset, rng, length)
        offsets = [int(rng.integers(max(track.length - length, 0) + 1)) for _ in range(draws)]
        for source in sources:
            segs = [track.stem(source).window(off, length) for off in offsets]
            mixes[source] = _gained(segs, aug, rng)
    x_mix = mix_audio_augment([mixes[s] for s in sources])
    return x_mix, mixes


def _gained(segs: list[AudioSegment], aug: AugmentConfig, rng) -> AudioSegment:
    if aug.random_gain:
        segs = [AudioSegment(s.samples * np.float32(rng.uniform(0.5, 1.0)), s.sample_rate) for s in segs]
    return mix_audio_augment(segs)


def make_training_pair(
    dataset: Sequence[TrackStems],
    target_source: str,
    aug: AugmentConfig,
    rng: np.random.Generator,
    sources: Sequence[str] = SOURCES,
) -> tuple[AudioSegment, AudioSegment]:
    if target_source not in sources:
        raise DatasetError(f"target {target_source!r} not among sources {list(sources)}")
    x_mix, mixes = make_training_mixes(dataset, aug, rng, sources)
    return x_mix, mixes[target_source]


def make_batch(
    dataset: Sequence[TrackStems],
    target_source: str,
    aug: AugmentConfig,
    rng: np.random.Generator,
    batch_size: int,
    sources: Sequence[str] = SOURCES,
) -> tuple[np.ndarray, np.ndarray]:
    """Stack ``batch_size`` training pairs into (B, C, L) arrays."""
    pairs = [make_training_pair(dataset, target_source, aug, rng, sources) for _ in range(batch_size)]
    x = np.stack([p[0].samples for p in pairs])
    s = np.stack([p[1].samples for p in pairs])
    return x, s


def worker_rng(seed: int, worker_id: int) -> np.random.Generator:
    """Independent stream for one sampling worker, reproducible from (seed, worker_id)."""
    return np.random.default_rng(np.random.SeedSequence([seed, worker_id]))


# ----------------------------------------------------------------------------
# synthetic stems


def _note_sequence(rng, duration, sr, lengths, pitches):
    """Piecewise-constant frequency track with per-note envelopes."""
    n = int(round(duration * sr))
    freq = np.zeros(n)
    env = np.zeros(n)
    t = 0
    while t < n:
        span = int(rng.uniform(*lengths) * sr)
        span = max(min(span, n - t), 1)
        freq[t : t + span] = rng.choice(pitches)
        attack = min(int(0.02 * sr), span // 4 + 1)
        release = min(int(0.05 * sr), span // 4 + 1)
        e = np.ones(span)
        e[:attack] = np.linspace(0.0, 1.0, attack)
        e[-release:] = np.minimum(e[-release:], np.linspace(1.0, 0.0, release))
        env[t : t + span] = e
        t += span
    return freq, env


def _harmonic(freq, sr, amps, phase0=0.0):
    phase = 2.0 * np.pi * np.cumsum(freq) / sr + phase0
    out = np.zeros_like(freq)
    nyquist = sr / 2
    for h, a in enumerate(amps, start=1):
        audible = (h * freq) < nyquist * 0.95
        out += a * np.sin(h * phase) * audible
    return out


def _rms_normalize(x, target=STEM_RMS):
    rms = np.sqrt(np.mean(x**2))
    return x * (target / rms) if rms > 0 else x


def _vocals(rng, duration, sr):
    n = int(round(duration * sr))
    t = np.arange(n) / sr
    scale = 392.0 * 2.0 ** (np.array([0, 2, 4, 5, 7, 9, 11, 12]) / 12.0)
    freq, env = _note_sequence(rng, duration, sr, (0.2, 0.5), scale)
    vib_rate = rng.uniform(4.5, 6.5)
    freq = freq * (1.0 + 0.02 * np.sin(2.0 * np.pi * vib_rate * t))
    amps = [1.0, 0.6, 0.45, 0.3, 0.2, 0.12]
    am = 0.75 + 0.25 * np.sin(2.0 * np.pi * rng.uniform(1.5, 3.0) * t + rng.uniform(0, 2 * np.pi))
    return _rms_normalize(_harmonic(freq, sr, amps, rng.uniform(0, 2 * np.pi)) * env * am)


def _drums(rng, duration, sr):
    n = int(round(duration * sr))
    out = np.zeros(n)
    step = 60.0 / rng.uniform(100, 130) / 2
    b_low, a_low = sps.butter(2, 150 / (sr / 2), btype="low")
    b_high, a_high = sps.butter(2, min(2500 / (sr / 2), 0.95), btype="high")
    k = 0
    while k * step < duration:
        start = int(k * step * sr)
        if k % 4 == 0 or rng.random() < 0.15:
            span = int(0.12 * sr)
            burst = sps.lfilter(b_low, a_low, rng.standard_normal(span)) * np.exp(-np.arange(span) / (0.03 * sr))
            burst = burst / (np.max(np.abs(burst)) + 1e-12)
        else:
            span = int(0.05 * sr)
            burst = sps.lfilter(b_high, a_high, rng.standard_normal(span)) * np.exp(-np.arange(span) / (0.01 * sr))
            burst = 0.5 * burst / (np.max(np.abs(burst)) + 1e-12)
        end = min(start + span, n)
        out[start:end] += burst[: end - start]
        k += 1
    out = _rms_normalize(out)
    peak = np.max(np.abs(out))
    return out * (DRUM_PEAK / peak) if peak > DRUM_PEAK else out


def _bass(rng, duration, sr):
    pitches = 55.0 * 2.0 ** (np.array([0, 3, 5, 7, 10, 12]) / 12.0)
    freq, env = _note_sequence(rng, duration, sr, (0.4, 0.8), pitches)
    return _rms_normalize(_harmonic(freq, sr, [1.0, 0.5, 0.25], rng.uniform(0, 2 * np.pi)) * env)


def _other(rng, duration, sr):
    n = int(round(duration * sr))
    out = np.zeros(n)
    roots = 196.0 * 2.0 ** (np.array([0, 2, 5, 7, 9]) / 12.0)
    chord_len = int(rng.uniform(1.5, 2.5) * sr)
    for start in range(0, n, chord_len):
        span = min(chord_len, n - start)
        root = rng.choice(roots)
        ratios = (1.0, 2.0 ** (4 / 12), 2.0 ** (7 / 12)) if rng.random() < 0.5 else (1.0, 2.0 ** (3 / 12), 2.0 ** (7 / 12))
        env = np.minimum(1.0, np.minimum(np.arange(span), span - np.arange(span)) / (0.15 * sr))
        chord = np.zeros(span)
        for r in ratios:
            chord += _harmonic(np.full(span, root * r), sr, [1.0, 0.3], rng.uniform(0, 2 * np.pi))
        out[start : start + span] = chord * env
    return _rms_normalize(out)


_GENERATORS = {"vocals": _vocals, "drums": _drums, "bass": _bass, "other": _other}


def generate_synthetic_dataset(
    seed: int = 0, n_tracks: int = 8, seconds: float = 10.0, sample_rate: int = 8000, channels: int = 1
) -> list[TrackStems]:
    """Deterministic tracks whose four stems occupy distinct spectral regions.

    vocals: vibrato harmonic melody (392-784 Hz fundamentals); drums: low and
    high filtered noise bursts on an eighth-note grid; bass: 55-110 Hz tones;
    other: sustained triads around 196-330 Hz.
    """
    tracks = []
    for i in range(n_tracks):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        stems = {}
        for source in SOURCES:
            chans = [_GENERATORS[source](rng, seconds, sample_rate) for _ in range(channels)]
            stems[source] = AudioSegment(np.stack(chans).astype(np.float32), sample_rate)
        tracks.append(TrackStems(f"track{i:03d}", stems=stems))
    return tracks
