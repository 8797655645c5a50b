"""Energy-ratio source-to-distortion ratio with framewise median aggregation.

This is not the projection-based BSSEval SDR: the distortion is simply the
difference between reference and estimate. Reports carry ``METRIC_NAME`` so
the two are not confused.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .data import AudioSegment, TrackStems
from .errors import CatNetError, ContractError, UndefinedReferenceError

logger = logging.getLogger(__name__)

METRIC_NAME = "energy-ratio SDR (framewise median)"
SDR_CAP_DB = 60.0
SILENCE_THRESHOLD = 1e-8


def _samples(x) -> np.ndarray:
    return np.asarray(x.samples if isinstance(x, AudioSegment) else x, dtype=np.float64)


def sdr(reference, estimate) -> float:
    """10 log10(|s|^2 / |s - s_hat|^2) in dB over all channels jointly, capped at +60 dB."""
    s, e = _samples(reference), _samples(estimate)
    if s.shape != e.shape:
        raise ContractError(f"reference {s.shape} and estimate {e.shape} differ in shape")
    signal = float(np.sum(s * s))
    if signal == 0.0:
        raise UndefinedReferenceError("reference is all zeros; SDR is undefined")
    noise = float(np.sum((s - e) ** 2))
    if noise <= signal * 10.0 ** (-SDR_CAP_DB / 10.0):
        return SDR_CAP_DB
    return 10.0 * np.log10(signal / noise)


@dataclass
class SdrReport:
    track: str
    source: str
    frame_sdrs: list
    median_sdr: float
    frame_seconds: float
    hop_seconds: float
    silent_frames: int
    metric: str = METRIC_NAME

    @property
    def frames_used(self) -> int:
        return len(self.frame_sdrs)


def framewise_median_sdr(
    reference,
    estimate,
    sample_rate: Optional[int] = None,
    frame_seconds: float = 1.0,
    hop_seconds: float = 1.0,
    track: str = "",
    source: str = "",
) -> SdrReport:
    if sample_rate is None:
        if not isinstance(reference, AudioSegment):
            raise ContractError("sample_rate is required for raw arrays")
        sample_rate = reference.sample_rate
    s, e = np.atleast_2d(_samples(reference)), np.atleast_2d(_samples(estimate))
    if s.shape != e.shape:
        raise ContractError(f"reference {s.shape} and estimate {e.shape} differ in shape")
    frame = int(round(frame_seconds * sample_rate))
    hop = int(round(hop_seconds * sample_rate))
    values, silent = [], 0
    start = 0
    while start < s.shape[1]:
        ref = s[:, start : start + frame]
        if np.mean(ref * ref) < SILENCE_THRESHOLD:
            silent += 1
        else:
            values.append(sdr(ref, e[:, start : start + frame]))
        if start + frame >= s.shape[1]:
            break
        start += hop
    if not values:
        raise UndefinedReferenceError(f"all {silent} frames of {track or 'reference'}/{source} are silent")
    return SdrReport(track, source, values, float(np.median(values)), frame_seconds, hop_seconds, silent)


Separator = Callable[[AudioSegment], Mapping[str, AudioSegment]]


def model_separator(models, segment_len: Optional[int] = None, overlap: Optional[int] = None) -> Separator:
    """Wrap one model or a {source: model} mapping as a separator callable."""
    from .models import SeparationModel, separate_track

    if isinstance(models, SeparationModel):
        models = {models.target: models}

    def run(mixture: AudioSegment) -> dict[str, AudioSegment]:
        out: dict[str, AudioSegment] = {}
        for model in models.values():
            out.update(separate_track(model, mixture, segment_len, overlap))
        return out

    return run


@dataclass
class Evaluation:
    reports: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def medians(self) -> dict[str, float]:
        """Across-track median of per-track medians, per source."""
        by_source: dict[str, list[float]] = {}
        for r in self.reports:
            by_source.setdefault(r.source, []).append(r.median_sdr)
        return {k: float(np.median(v)) for k, v in sorted(by_source.items())}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["track", "source", "frames_used", "median_sdr_db"])
            for r in self.reports:
                w.writerow([r.track, r.source, r.frames_used, f"{r.median_sdr:.6f}"])

    def summary(self) -> dict:
        return {
            "metric": METRIC_NAME,
            "sdr_cap_db": SDR_CAP_DB,
            "silence_threshold": SILENCE_THRESHOLD,
            "median_over_tracks": self.medians(),
            "tracks": sorted({r.track for r in self.reports}),
            "per_track": [
                {k: v for k, v in asdict(r).items() if k != "frame_sdrs"} | {"frames_used": r.frames_used}
                for r in self.reports
            ],
            "failures": self.failures,
            "config": self.config,
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)


def evaluate_model(
    separator: Union[Separator, Mapping, object],
    dataset: Sequence[TrackStems],
    sources: Sequence[str],
    frame_seconds: float = 1.0,
    hop_seconds: float = 1.0,
    config: Optional[dict] = None,
) -> Evaluation:
    """Separate every track and score each requested source.

    ``accompaniment`` is scored as well whenever the separator returns it.
    Tracks are processed in name order. A track whose separation fails is
    logged and recorded under its name; a source whose reference is entirely
    silent is recorded as ``track/source`` and the remaining sources still
    count.
    """
    if not callable(separator) or hasattr(separator, "params"):
        separator = model_separator(separator)
    result = Evaluation(config=dict(config or {}))
    for track in sorted(dataset, key=lambda t: t.name):
        try:
            mixture = track.mixture
            estimates = separator(mixture)
            wanted = [s for s in sources if s in estimates]
            if "vocals" in wanted and "accompaniment" in estimates:
                wanted.append("accompaniment")
            for source in wanted:
                if source == "accompaniment":
                    reference = mixture - track.stem("vocals")
                else:
                    reference = track.stem(source)
                try:
                    report = framewise_median_sdr(
                        reference, estimates[source], None, frame_seconds, hop_seconds, track.name, source
                    )
                except UndefinedReferenceError as exc:
                    logger.warning("%s/%s not scored: %s", track.name, source, exc)
                    result.failures[f"{track.name}/{source}"] = str(exc)
                    continue
                result.reports.append(report)
        except CatNetError as exc:
            logger.warning("track %s failed: %s", track.name, exc)
            result.failures[track.name] = str(exc)
    return result
