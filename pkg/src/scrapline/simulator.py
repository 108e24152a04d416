"""Synthetic unloading campaigns for desk-scale runs of the whole pipeline.

A campaign holds railcars with ground-truth contamination and grade,
per-layer feature vectors (a seeded linear mixing of contamination signal,
hot-layer marker, and grade one-hot, plus Gaussian noise), per-railcar IoU
traces whose grab count equals the layer count, injected frame-quality
faults, and a panel of annotators with configurable bias, scale, and noise.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .annotation import SplitAssignment, aggregate_categorical, aggregate_continuous, split_by_railcar
from .mil import Bag, BagLabel, DEFAULT_CLASS_NAMES
from .segmentation import Box, DetectionTrack, FrameQuality, TrackFrame, track_to_jsonl

_STREAM_STRUCTURE = 10
_STREAM_FEATURES = 11
_STREAM_TRACES = 12
_STREAM_LABELS = 13
_STREAM_FAULTS = 14


class SimulatorError(Exception):
    pass


@dataclass
class AnnotatorProfile:
    rater_id: str
    bias: float = 0.0
    scale: float = 1.0
    sigma: float = 0.3
    grade_error_rate: float = 0.0

    def __post_init__(self):
        if self.scale <= 0:
            raise SimulatorError(f"rater scale must be positive, got {self.scale}")


def default_profiles(k: int = 3, sigma: float = 0.3) -> list[AnnotatorProfile]:
    return [AnnotatorProfile(rater_id=f"rater-{i}", sigma=sigma) for i in range(k)]


@dataclass
class CampaignConfig:
    n_railcars: int = 405
    layers_min: int = 8
    layers_max: int = 14
    lines: int = 6
    contamination_low: float = 0.0
    contamination_high: float = 5.0
    grade_prior: tuple[float, ...] = (0.25, 0.25, 0.25, 0.25)
    class_names: tuple[str, ...] = DEFAULT_CLASS_NAMES
    feature_dim: int = 32
    sigma_feat: float = 0.3
    p_hot: float = 0.0
    hot_factor: float = 5.0
    # separable dilution regime: when set, non-hot layers all sit at this
    # constant contamination floor and a hot layer carries a variable payload
    # of at least hot_factor times the floor, so the railcar's signal lives
    # in that single layer and naive averaging dilutes it
    dilution_floor: float | None = None
    # amplitude of the hot layer's concentration cue in feature space
    # (dense clumping is visually distinctive even when the payload readout
    # is noisy); only meaningful when p_hot > 0
    hot_marker_scale: float = 1.0
    layer_jitter: float = 0.1
    fault_rate: float = 0.02
    grade_feature_scale: float = 1.0
    split_ratios: tuple[float, float, float] = (300 / 405, 60 / 405, 45 / 405)
    frames_per_grab: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.lines < 1:
            raise SimulatorError("at least one unloading line required")
        if self.sigma_feat < 0 or self.layer_jitter < 0:
            raise SimulatorError("noise widths must be nonnegative")
        if not 0.0 <= self.p_hot <= 1.0 or not 0.0 <= self.fault_rate <= 1.0:
            raise SimulatorError("probabilities must lie in [0, 1]")
        if abs(sum(self.grade_prior) - 1.0) > 1e-9:
            raise SimulatorError("grade prior must sum to 1")

    def digest(self) -> str:
        payload = asdict(self)
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def table_scale_config(**overrides) -> CampaignConfig:
    """Full-scale campaign mirroring the production dataset's railcar counts."""
    base = dict(n_railcars=2032, split_ratios=(1504 / 2032, 305 / 2032, 223 / 2032))
    base.update(overrides)
    return CampaignConfig(**base)


def dilution_config(**overrides) -> CampaignConfig:
    """Separable hot-layer regime: some railcars concentrate their contamination
    in one layer carrying at least hot_factor times the others' floor level.

    The wide test split keeps the attention-vs-mean comparison statistically
    stable at desk scale.
    """
    base = dict(n_railcars=700, split_ratios=(300 / 700, 60 / 700, 340 / 700),
                p_hot=0.2, dilution_floor=0.5, layers_min=5, layers_max=5,
                sigma_feat=3.0, hot_marker_scale=6.0, layer_jitter=0.0, fault_rate=0.0)
    base.update(overrides)
    return CampaignConfig(**base)


@dataclass
class SimLayer:
    index: int
    contamination: float
    features: np.ndarray
    quality_ok: bool = True
    fault_codes: list[str] = field(default_factory=list)


@dataclass
class SimRailcar:
    railcar_id: str
    line_id: int
    grade: int
    contamination: float
    hot_layer: int | None
    layers: list[SimLayer]
    trace: np.ndarray
    peaks: list[int]

    def bag(self, eligible_only: bool = True) -> Bag:
        rows = [l for l in self.layers if l.quality_ok] if eligible_only else self.layers
        if not rows:
            rows = self.layers  # fall back so desk-scale faults never orphan a railcar
        return Bag(
            railcar_id=self.railcar_id,
            instances=np.stack([l.features for l in rows]),
            layer_indices=[l.index for l in rows],
        )


@dataclass
class Campaign:
    config: CampaignConfig
    railcars: list[SimRailcar]
    profiles: list[AnnotatorProfile]
    labels: dict[str, dict[str, tuple[float, str]]]  # railcar -> rater -> (percent, grade)
    noise_floor: float

    def ground_truth(self) -> dict[str, tuple[float, int]]:
        return {r.railcar_id: (r.contamination, r.grade) for r in self.railcars}

    def consensus(self, railcar_id: str) -> tuple[float, str | None]:
        per_rater = self.labels[railcar_id]
        mean, _, _ = aggregate_continuous([v[0] for v in per_rater.values()])
        grade = aggregate_categorical([v[1] for v in per_rater.values()], self.config.class_names)
        return mean, (grade if grade in self.config.class_names else None)

    def dataset(self, truth_labels: bool = False) -> list[tuple[Bag, BagLabel]]:
        """(bag, label) pairs; labels are rater consensus unless truth_labels."""
        names = list(self.config.class_names)
        out = []
        for car in self.railcars:
            if truth_labels:
                y, g = car.contamination, car.grade
            else:
                y, grade_name = self.consensus(car.railcar_id)
                g = names.index(grade_name) if grade_name else car.grade
            out.append((car.bag(), BagLabel(contamination=max(0.0, y), grade=g)))
        return out

    def split(self, seed: int | None = None) -> SplitAssignment:
        return split_by_railcar([r.railcar_id for r in self.railcars],
                                ratios=self.config.split_ratios,
                                seed=self.config.seed if seed is None else seed)

    def split_dataset(self, truth_labels: bool = False):
        """Dict of partition name -> list[(Bag, BagLabel)]."""
        assignment = self.split()
        data = {name: [] for name in ("train", "val", "test")}
        for (bag, label) in self.dataset(truth_labels=truth_labels):
            data[assignment.partition_of(bag.railcar_id)].append((bag, label))
        return data


def annotate_sim(profile: AnnotatorProfile, truth_percent: float, rng: np.random.Generator) -> float:
    """One rater's contamination label: clamp(bias + scale*truth + noise, 0, 100)."""
    if not 0.0 <= truth_percent <= 100.0:
        raise SimulatorError(f"truth {truth_percent} outside [0, 100]")
    raw = profile.bias + profile.scale * truth_percent + rng.normal(0.0, profile.sigma)
    return float(min(100.0, max(0.0, raw)))


def noise_floor(profiles: list[AnnotatorProfile], mode: str = "analytic",
                cfg: CampaignConfig | None = None, mc_draws: int = 200_000,
                seed: int = 0) -> float:
    """Expected MAE between rater consensus and ground truth.

    The analytic form holds for unbiased, unit-scale raters (consensus error
    is zero-mean Gaussian): MAE = sigma_consensus * sqrt(2/pi). Any biased or
    rescaled panel falls back to Monte Carlo over the contamination prior.
    """
    unbiased = all(p.bias == 0.0 and p.scale == 1.0 for p in profiles)
    if all(p.sigma == 0.0 for p in profiles) and unbiased:
        return 0.0
    if mode == "analytic" and unbiased:
        k = len(profiles)
        sigma_c = math.sqrt(sum(p.sigma ** 2 for p in profiles)) / k
        return sigma_c * math.sqrt(2.0 / math.pi)
    config = cfg or CampaignConfig()
    rng = np.random.default_rng([seed, _STREAM_LABELS, 999])
    truths = rng.uniform(config.contamination_low, config.contamination_high, size=mc_draws)
    consensus = np.zeros(mc_draws)
    for p in profiles:
        raw = p.bias + p.scale * truths + rng.normal(0.0, p.sigma, size=mc_draws)
        consensus += np.clip(raw, 0.0, 100.0)
    consensus /= len(profiles)
    return float(np.mean(np.abs(consensus - truths)))


def gen_iou_trace(n_grabs: int, frames_per_grab: int = 30, baseline_noise: float = 0.03,
                  rng: np.random.Generator | None = None) -> tuple[np.ndarray, list[int]]:
    """Trace with exactly n_grabs humps above 0.15 separated by sub-0.05 valleys.

    Returns (trace, apex frame indices). Humps are noiseless triangles so the
    recovered peak equals the constructed apex; noise rides the baseline only
    and is clipped strictly below the low hysteresis threshold.
    """
    if n_grabs < 0:
        raise SimulatorError("n_grabs must be >= 0")
    rng = rng or np.random.default_rng(0)
    noise_hi = min(baseline_noise, 0.04)
    valley = max(4, frames_per_grab // 3)
    parts = [np.clip(rng.uniform(0.0, noise_hi, size=valley), 0.0, 0.045)]
    peaks: list[int] = []
    cursor = valley
    for _ in range(n_grabs):
        width = frames_per_grab
        apex = width // 2
        height = float(rng.uniform(0.35, 0.75))
        ramp = np.array([height * (1.0 - abs(i - apex) / (apex + 1)) for i in range(width)])
        parts.append(ramp)
        peaks.append(cursor + apex)
        cursor += width
        parts.append(np.clip(rng.uniform(0.0, noise_hi, size=valley), 0.0, 0.045))
        cursor += valley
    return np.concatenate(parts), peaks


def _trace_to_track(trace: np.ndarray, quality: list[FrameQuality], fps: float = 25.0) -> DetectionTrack:
    """Embed an IoU trace in box geometry: a fixed railcar and a sliding magnet
    whose overlap reproduces the requested IoU per frame."""
    frames = []
    rail = Box(0.0, 0.0, 100.0, 100.0)
    for i, v in enumerate(trace):
        v = float(min(v, 0.99))
        # magnet is a 100x100 box offset horizontally; overlap fraction f of
        # area gives IoU f / (2 - f), so f = 2v / (1 + v)
        f = 2.0 * v / (1.0 + v)
        magnet = Box(100.0 - 100.0 * f, 0.0, 100.0, 100.0)
        frames.append(TrackFrame(frame=i, timestamp=i / fps, magnet=magnet, railcar=rail,
                                 quality=quality[i] if i < len(quality) else FrameQuality()))
    return DetectionTrack(frames)


def railcar_track(car: SimRailcar) -> DetectionTrack:
    return _trace_to_track(car.trace, [FrameQuality()] * len(car.trace))


def gen_campaign(cfg: CampaignConfig, profiles: list[AnnotatorProfile] | None = None) -> Campaign:
    """Deterministic campaign: structure, features, traces, faults, labels."""
    profiles = profiles if profiles is not None else default_profiles()
    struct_rng = np.random.default_rng([cfg.seed, _STREAM_STRUCTURE])
    fault_rng = np.random.default_rng([cfg.seed, _STREAM_FAULTS])

    # mixing map rows: [contamination, hot marker, grade one-hot...]
    n_classes = len(cfg.grade_prior)
    mix_rng = np.random.default_rng([cfg.seed, _STREAM_FEATURES])
    mixing = mix_rng.normal(size=(2 + n_classes, cfg.feature_dim))

    railcars: list[SimRailcar] = []
    labels: dict[str, dict[str, tuple[float, str]]] = {}
    names = list(cfg.class_names)
    for i in range(cfg.n_railcars):
        car_id = f"RC-{i:05d}"
        y = float(struct_rng.uniform(cfg.contamination_low, cfg.contamination_high))
        grade = int(struct_rng.choice(n_classes, p=cfg.grade_prior))
        n_layers = int(struct_rng.integers(cfg.layers_min, cfg.layers_max + 1))
        hot = bool(struct_rng.random() < cfg.p_hot)
        hot_idx = int(struct_rng.integers(0, n_layers)) if hot else None

        if cfg.dilution_floor is not None:
            # floor-mode: uniform baseline layers, railcar signal carried
            # entirely by the hot layer's payload (at least hot_factor x floor)
            layer_c = np.full(n_layers, cfg.dilution_floor)
            if hot:
                payload = cfg.hot_factor * cfg.dilution_floor * struct_rng.uniform(1.0, 3.0)
                layer_c[hot_idx] = payload
        elif hot:
            base = y * n_layers / (n_layers - 1 + cfg.hot_factor)
            layer_c = np.full(n_layers, base)
            layer_c[hot_idx] = cfg.hot_factor * base
        else:
            jitter = np.clip(struct_rng.normal(0.0, cfg.layer_jitter, size=n_layers), -0.9, 0.9)
            layer_c = y * (1.0 + jitter)
            total = layer_c.sum()
            if total > 0:
                layer_c *= (y * n_layers) / total
        true_y = float(np.mean(layer_c))  # railcar truth is exactly the layer mean

        feat_rng = np.random.default_rng([cfg.seed, _STREAM_FEATURES, i])
        layers = []
        for j in range(n_layers):
            signal = np.zeros(2 + n_classes)
            signal[0] = layer_c[j]
            signal[1] = cfg.hot_marker_scale if hot_idx == j else 0.0
            signal[2 + grade] = cfg.grade_feature_scale
            feats = signal @ mixing + feat_rng.normal(0.0, cfg.sigma_feat, size=cfg.feature_dim)
            layers.append(SimLayer(index=j, contamination=float(layer_c[j]), features=feats))

        for layer in layers:
            if fault_rng.random() < cfg.fault_rate:
                layer.quality_ok = False
                layer.fault_codes = ["BLUR"]

        trace_rng = np.random.default_rng([cfg.seed, _STREAM_TRACES, i])
        trace, peaks = gen_iou_trace(n_layers, cfg.frames_per_grab, rng=trace_rng)

        railcars.append(SimRailcar(
            railcar_id=car_id, line_id=i % cfg.lines, grade=grade,
            contamination=true_y, hot_layer=hot_idx, layers=layers,
            trace=trace, peaks=peaks))

        label_rng = np.random.default_rng([cfg.seed, _STREAM_LABELS, i])
        per_rater: dict[str, tuple[float, str]] = {}
        for p in profiles:
            percent = annotate_sim(p, true_y, label_rng)
            grade_name = names[grade]
            if p.grade_error_rate > 0 and label_rng.random() < p.grade_error_rate:
                wrong = [g for g in names if g != grade_name]
                grade_name = wrong[int(label_rng.integers(0, len(wrong)))]
            per_rater[p.rater_id] = (percent, grade_name)
        labels[car_id] = per_rater

    return Campaign(config=cfg, railcars=railcars, profiles=profiles, labels=labels,
                    noise_floor=noise_floor(profiles))


def write_campaign(campaign: Campaign, out_dir: str | Path) -> Path:
    """Emit the campaign as line-delimited files plus a manifest with digests."""
    out = Path(out_dir)
    (out / "tracks").mkdir(parents=True, exist_ok=True)
    cfg = campaign.config

    with (out / "ground_truth.jsonl").open("w") as fh:
        for car in campaign.railcars:
            fh.write(json.dumps({
                "railcar": car.railcar_id, "line": car.line_id,
                "contamination": car.contamination, "grade": car.grade,
                "hot_layer": car.hot_layer,
                "per_layer": [l.contamination for l in car.layers],
            }, sort_keys=True) + "\n")

    with (out / "layers.jsonl").open("w") as fh:
        for car in campaign.railcars:
            for layer in car.layers:
                fh.write(json.dumps({
                    "railcar": car.railcar_id, "line": car.line_id, "layer": layer.index,
                    "features": [float(x) for x in layer.features],
                    "quality_ok": layer.quality_ok, "fault_codes": layer.fault_codes,
                }, sort_keys=True) + "\n")

    for car in campaign.railcars:
        (out / "tracks" / f"{car.railcar_id}.jsonl").write_text(track_to_jsonl(railcar_track(car)))

    with (out / "raters.jsonl").open("w") as fh:
        for p in campaign.profiles:
            fh.write(json.dumps(asdict(p), sort_keys=True) + "\n")

    with (out / "labels.jsonl").open("w") as fh:
        for car_id in sorted(campaign.labels):
            for rater_id, (percent, grade) in sorted(campaign.labels[car_id].items()):
                fh.write(json.dumps({
                    "railcar": car_id, "rater": rater_id,
                    "contamination": percent, "grade": grade,
                }, sort_keys=True) + "\n")

    manifest = {
        "seed": cfg.seed,
        "config": asdict(cfg),
        "config_digest": cfg.digest(),
        "noise_floor": campaign.noise_floor,
        "n_railcars": len(campaign.railcars),
        "n_layers": sum(len(c.layers) for c in campaign.railcars),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2))
    return out


def load_campaign(in_dir: str | Path) -> Campaign:
    """Rebuild a campaign from its emitted files."""
    src = Path(in_dir)
    try:
        manifest = json.loads((src / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SimulatorError(f"unreadable campaign manifest in {src}: {exc}") from exc
    cfg_dict = dict(manifest["config"])
    for key in ("grade_prior", "class_names", "split_ratios"):
        cfg_dict[key] = tuple(cfg_dict[key])
    cfg = CampaignConfig(**cfg_dict)

    truth = {}
    for line in (src / "ground_truth.jsonl").read_text().splitlines():
        rec = json.loads(line)
        truth[rec["railcar"]] = rec

    layer_rows: dict[str, list[dict]] = {}
    for line in (src / "layers.jsonl").read_text().splitlines():
        rec = json.loads(line)
        layer_rows.setdefault(rec["railcar"], []).append(rec)

    profiles = [AnnotatorProfile(**json.loads(line))
                for line in (src / "raters.jsonl").read_text().splitlines()]

    labels: dict[str, dict[str, tuple[float, str]]] = {}
    for line in (src / "labels.jsonl").read_text().splitlines():
        rec = json.loads(line)
        labels.setdefault(rec["railcar"], {})[rec["rater"]] = (rec["contamination"], rec["grade"])

    railcars = []
    for car_id in sorted(truth):
        t = truth[car_id]
        rows = sorted(layer_rows.get(car_id, []), key=lambda r: r["layer"])
        layers = [SimLayer(index=r["layer"], contamination=t["per_layer"][r["layer"]],
                           features=np.array(r["features"]), quality_ok=r["quality_ok"],
                           fault_codes=list(r["fault_codes"])) for r in rows]
        trace_rng = np.random.default_rng([cfg.seed, _STREAM_TRACES, int(car_id.split("-")[1])])
        trace, peaks = gen_iou_trace(len(layers), cfg.frames_per_grab, rng=trace_rng)
        railcars.append(SimRailcar(
            railcar_id=car_id, line_id=t["line"], grade=t["grade"],
            contamination=t["contamination"], hot_layer=t.get("hot_layer"),
            layers=layers, trace=trace, peaks=peaks))
    return Campaign(config=cfg, railcars=railcars, profiles=profiles, labels=labels,
                    noise_floor=manifest["noise_floor"])
