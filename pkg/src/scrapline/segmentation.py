"""Temporal layer segmentation from magnet/railcar detection tracks.

Per-frame magnet-over-railcar IoU traces are segmented into grab intervals
with hysteresis thresholds, keyframes are picked near each interval's IoU
peak subject to frame-quality gating, and whole tracks are checked for
spatial ROI conformance before any unloading is processed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class SegmentationError(Exception):
    pass


# canonical rejection order: codes are always reported in this sequence
FAILURE_CODES = (
    "BLUR",
    "UNDEREXP",
    "OVEREXP",
    "OCCLUDED",
    "EXTRANEOUS_OBJECT",
    "NO_RAILCAR",
    "BAD_ASPECT",
    "CHECKSUM",
)


@dataclass(frozen=True)
class Box:
    """Axis-aligned pixel box (x, y, width, height)."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise SegmentationError(f"negative box size: w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def contains(self, px: float, py: float) -> bool:
        return self.x <= px <= self.x + self.w and self.y <= py <= self.y + self.h


@dataclass
class FrameQuality:
    blur: float = 0.0
    exposure: float = 0.5
    occluded: bool = False
    extraneous_object: bool = False
    no_railcar: bool = False
    bad_aspect: bool = False
    checksum_failed: bool = False


@dataclass
class QualityThresholds:
    blur_max: float = 0.7
    exposure_min: float = 0.15
    exposure_max: float = 0.85


@dataclass
class TrackFrame:
    frame: int
    timestamp: float
    magnet: Box
    railcar: Box
    quality: FrameQuality = field(default_factory=FrameQuality)

    @property
    def railcar_centroid(self) -> tuple[float, float]:
        return (self.railcar.x + self.railcar.w / 2.0, self.railcar.y + self.railcar.h / 2.0)


@dataclass
class DetectionTrack:
    frames: list[TrackFrame]

    def __post_init__(self):
        if any(b.frame <= a.frame for a, b in zip(self.frames, self.frames[1:])):
            raise SegmentationError("track frame indices must be strictly increasing")

    def iou_trace(self) -> np.ndarray:
        return np.array([iou(f.magnet, f.railcar) for f in self.frames])


@dataclass
class GrabInterval:
    start: int
    end: int
    peak: int
    peak_iou: float
    keyframes: list[int] = field(default_factory=list)
    eligible: bool = True
    failure_codes: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.start <= self.peak <= self.end:
            raise SegmentationError(f"peak {self.peak} outside [{self.start}, {self.end}]")


def iou(box_a: Box, box_b: Box) -> float:
    """Intersection over union of two boxes; 0 when both are degenerate."""
    ix = max(0.0, min(box_a.x + box_a.w, box_b.x + box_b.w) - max(box_a.x, box_b.x))
    iy = max(0.0, min(box_a.y + box_a.h, box_b.y + box_b.h) - max(box_a.y, box_b.y))
    inter = ix * iy
    union = box_a.area + box_b.area - inter
    if union == 0.0:
        return 0.0
    return inter / union


@dataclass
class RoiResult:
    conformant: bool
    fraction_inside: float
    outside_frames: list[int] = field(default_factory=list)


def roi_conformance(track: DetectionTrack, roi: Box, min_fraction: float = 0.95) -> RoiResult:
    """Unloading may proceed only if the railcar centroid sits inside the ROI
    for at least min_fraction of frames."""
    if not track.frames:
        raise SegmentationError("roi_conformance on an empty track")
    outside = [f.frame for f in track.frames if not roi.contains(*f.railcar_centroid)]
    fraction = 1.0 - len(outside) / len(track.frames)
    return RoiResult(conformant=fraction >= min_fraction, fraction_inside=fraction,
                     outside_frames=outside)


def segment_grabs(iou_trace, tau_hi: float = 0.15, tau_lo: float = 0.05,
                  min_len: int = 3) -> list[GrabInterval]:
    """Hysteresis segmentation of an IoU trace into grab intervals.

    An interval opens at the first frame >= tau_hi and closes at the frame
    before the trace drops below tau_lo. Intervals spanning fewer than
    min_len frames are discarded. The peak is the earliest argmax.
    """
    trace = np.asarray(iou_trace, dtype=np.float64)
    if trace.size == 0:
        raise SegmentationError("empty IoU trace")
    if not 0.0 <= tau_lo < tau_hi <= 1.0:
        raise SegmentationError(f"thresholds must satisfy 0 <= tau_lo < tau_hi <= 1, "
                                f"got tau_lo={tau_lo}, tau_hi={tau_hi}")
    intervals: list[GrabInterval] = []
    open_at: int | None = None
    for i, v in enumerate(trace):
        if open_at is None:
            if v >= tau_hi:
                open_at = i
        elif v < tau_lo:
            _close(intervals, trace, open_at, i - 1, min_len)
            open_at = None
    if open_at is not None:
        _close(intervals, trace, open_at, len(trace) - 1, min_len)
    return intervals


def _close(intervals: list[GrabInterval], trace: np.ndarray, start: int, end: int,
           min_len: int) -> None:
    if end - start + 1 < min_len:
        return
    window = trace[start:end + 1]
    peak = start + int(np.argmax(window))  # argmax returns the earliest tie
    intervals.append(GrabInterval(start=start, end=end, peak=peak, peak_iou=float(trace[peak])))


def quality_filter(fq: FrameQuality, thresholds: QualityThresholds | None = None) -> list[str]:
    """All triggered failure codes in canonical order; empty means eligible."""
    th = thresholds or QualityThresholds()
    if not np.isfinite(fq.blur) or not np.isfinite(fq.exposure):
        raise SegmentationError("quality scores must be finite")
    triggered = {
        "BLUR": fq.blur > th.blur_max,
        "UNDEREXP": fq.exposure < th.exposure_min,
        "OVEREXP": fq.exposure > th.exposure_max,
        "OCCLUDED": fq.occluded,
        "EXTRANEOUS_OBJECT": fq.extraneous_object,
        "NO_RAILCAR": fq.no_railcar,
        "BAD_ASPECT": fq.bad_aspect,
        "CHECKSUM": fq.checksum_failed,
    }
    return [code for code in FAILURE_CODES if triggered[code]]


def select_keyframes(interval: GrabInterval, track: DetectionTrack, k: int = 1,
                     thresholds: QualityThresholds | None = None) -> GrabInterval:
    """Pick up to k quality-passing frames nearest the peak, scanning outward.

    At equal distance the earlier frame is preferred. If no frame passes,
    the interval is marked ineligible and carries the union of failure codes.
    """
    by_index = {f.frame: f for f in track.frames}
    candidates = [i for i in range(interval.start, interval.end + 1) if i in by_index]
    order = sorted(candidates, key=lambda i: (abs(i - interval.peak), i))
    chosen: list[int] = []
    seen_codes: set[str] = set()
    for i in order:
        codes = quality_filter(by_index[i].quality, thresholds)
        if codes:
            seen_codes.update(codes)
            continue
        chosen.append(i)
        if len(chosen) == k:
            break
    interval.keyframes = sorted(chosen)
    interval.eligible = bool(chosen)
    interval.failure_codes = [] if chosen else [c for c in FAILURE_CODES if c in seen_codes]
    return interval


def track_to_jsonl(track: DetectionTrack) -> str:
    """Serialize a track to the line-delimited schema shared with the simulator."""
    lines = []
    for f in track.frames:
        q = f.quality
        lines.append(json.dumps({
            "frame": f.frame,
            "ts": f.timestamp,
            "magnet": [f.magnet.x, f.magnet.y, f.magnet.w, f.magnet.h],
            "railcar": [f.railcar.x, f.railcar.y, f.railcar.w, f.railcar.h],
            "quality": {
                "blur": q.blur, "exposure": q.exposure, "occluded": q.occluded,
                "extraneous_object": q.extraneous_object, "no_railcar": q.no_railcar,
                "bad_aspect": q.bad_aspect, "checksum_failed": q.checksum_failed,
            },
        }, sort_keys=True))
    return "\n".join(lines) + "\n"


def track_from_jsonl(text: str) -> DetectionTrack:
    frames = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            q = rec.get("quality", {})
            frames.append(TrackFrame(
                frame=int(rec["frame"]),
                timestamp=float(rec["ts"]),
                magnet=Box(*rec["magnet"]),
                railcar=Box(*rec["railcar"]),
                quality=FrameQuality(
                    blur=float(q.get("blur", 0.0)),
                    exposure=float(q.get("exposure", 0.5)),
                    occluded=bool(q.get("occluded", False)),
                    extraneous_object=bool(q.get("extraneous_object", False)),
                    no_railcar=bool(q.get("no_railcar", False)),
                    bad_aspect=bool(q.get("bad_aspect", False)),
                    checksum_failed=bool(q.get("checksum_failed", False)),
                ),
            ))
        except (KeyError, ValueError, TypeError) as exc:
            raise SegmentationError(f"bad track record on line {lineno}: {exc}") from exc
    return DetectionTrack(frames=frames)


def load_track(path: str | Path) -> DetectionTrack:
    return track_from_jsonl(Path(path).read_text())
