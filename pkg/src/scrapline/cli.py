"""Command-line entry points: batch tools plus a thin client for the service.

Every subcommand reads an optional JSON config file; command-line flags
override config values. Exit codes: 0 ok, 2 config error, 3 data error,
4 model-integrity error.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .annotation import AnnotationError, AnnotationStore, AuditLog, pseudonymize, route
from .autograd import AutogradError, OptimizerConfig
from .metrics import MetricsError, evaluate
from .mil import (
    CheckpointIntegrityError, MilError, ModelConfig, TrainingConfig,
    load_checkpoint, save_checkpoint, train_mil, train_mtl,
)
from .pipeline import PipelineError
from .segmentation import SegmentationError, load_track, segment_grabs
from .simulator import (
    CampaignConfig, SimulatorError, dilution_config, gen_campaign,
    load_campaign, table_scale_config, write_campaign,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_INTEGRITY = 4

_CONFIG_ERRORS = (SimulatorError, AutogradError, click.BadParameter, ValueError, TypeError)
_DATA_ERRORS = (FileNotFoundError, AnnotationError, SegmentationError,
                MetricsError, PipelineError, MilError, json.JSONDecodeError, KeyError)


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)


def _pick(flag, cfg: dict, key: str, default):
    if flag is not None:
        return flag
    return cfg.get(key, default)


def _run(body):
    try:
        body()
    except CheckpointIntegrityError as exc:
        click.echo(f"model integrity error: {exc}", err=True)
        sys.exit(EXIT_INTEGRITY)
    except _CONFIG_ERRORS as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except _DATA_ERRORS as exc:
        click.echo(f"data error: {exc}", err=True)
        sys.exit(EXIT_DATA)


@click.group()
def main():
    """Railcar scrap acceptance pipeline."""


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--preset", type=click.Choice(["default", "dilution", "table"]), default=None)
@click.option("--railcars", type=int, default=None)
@click.option("--seed", type=int, default=None)
def simulate(config_path, out_dir, preset, railcars, seed):
    """Generate a synthetic unloading campaign."""
    cfg = _load_config(config_path)

    def body():
        chosen = _pick(preset, cfg, "preset", "default")
        overrides = dict(cfg.get("campaign", {}))
        if railcars is not None:
            overrides["n_railcars"] = railcars
        if seed is not None:
            overrides["seed"] = seed
        for key in ("grade_prior", "class_names", "split_ratios"):
            if key in overrides:
                overrides[key] = tuple(overrides[key])
        if chosen == "dilution":
            campaign_cfg = dilution_config(**overrides)
        elif chosen == "table":
            campaign_cfg = table_scale_config(**overrides)
        else:
            campaign_cfg = CampaignConfig(**overrides)
        out = _pick(out_dir, cfg, "out", "campaign")
        from .simulator import default_profiles
        profiles = default_profiles(k=cfg.get("raters", 3),
                                    sigma=cfg.get("rater_sigma", 0.3))
        campaign = gen_campaign(campaign_cfg, profiles=profiles)
        write_campaign(campaign, out)
        click.echo(json.dumps({
            "out": str(out), "railcars": len(campaign.railcars),
            "layers": sum(len(c.layers) for c in campaign.railcars),
            "noise_floor": campaign.noise_floor, "seed": campaign_cfg.seed,
        }))

    _run(body)


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--campaign", "campaign_dir", type=click.Path(), default=None)
@click.option("--out", "out_path", type=click.Path(), default=None)
@click.option("--mode", type=click.Choice(["mil", "mtl"]), default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--samples-per-bag", type=int, default=None)
@click.option("--lambda-cls", type=float, default=None)
@click.option("--learning-rate", type=float, default=None)
@click.option("--pooling", type=click.Choice(["attention", "mean"]), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--truth-labels", is_flag=True, default=False,
              help="Train on ground truth instead of rater consensus.")
def train(config_path, campaign_dir, out_path, mode, epochs, batch_size,
          samples_per_bag, lambda_cls, learning_rate, pooling, seed, truth_labels):
    """Train the bag model on a campaign and write a sealed checkpoint."""
    cfg = _load_config(config_path)

    def body():
        campaign = load_campaign(_pick(campaign_dir, cfg, "campaign", "campaign"))
        parts = campaign.split_dataset(truth_labels=truth_labels or cfg.get("truth_labels", False))
        optimizer = OptimizerConfig(learning_rate=_pick(learning_rate, cfg, "learning_rate", 1e-3))
        train_cfg = TrainingConfig(
            epochs=_pick(epochs, cfg, "epochs", 40),
            samples_per_bag=_pick(samples_per_bag, cfg, "samples_per_bag", 5),
            batch_size=_pick(batch_size, cfg, "batch_size", 16),
            lambda_cls=_pick(lambda_cls, cfg, "lambda_cls", 1.0),
            optimizer=optimizer,
            seed=_pick(seed, cfg, "seed", 0),
            pooling=_pick(pooling, cfg, "pooling", "attention"))
        model_cfg = ModelConfig(feature_dim=campaign.config.feature_dim,
                                class_names=campaign.config.class_names,
                                class_num=len(campaign.config.class_names))
        trainer = train_mtl if _pick(mode, cfg, "mode", "mtl") == "mtl" else train_mil
        model = trainer(parts["train"], train_cfg, model_cfg, val=parts["val"])
        out = _pick(out_path, cfg, "out", "model.ckpt")
        digest = save_checkpoint(model, out)
        click.echo(json.dumps({
            "out": str(out), "model_version": model.version, "checkpoint_hash": digest,
            "train_railcars": len(parts["train"]),
            "final_train_loss": model.history["epoch_train_loss"][-1],
        }))

    _run(body)


@main.command("eval")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--campaign", "campaign_dir", type=click.Path(), default=None)
@click.option("--model", "model_path", type=click.Path(), default=None)
@click.option("--split", type=click.Choice(["train", "val", "test"]), default=None)
@click.option("--out", "out_path", type=click.Path(), default=None)
@click.option("--csv", "csv_path", type=click.Path(), default=None)
@click.option("--truth-labels", is_flag=True, default=False)
def eval_cmd(config_path, campaign_dir, model_path, split, out_path, csv_path, truth_labels):
    """Evaluate a checkpoint on one campaign split at railcar level."""
    cfg = _load_config(config_path)

    def body():
        campaign = load_campaign(_pick(campaign_dir, cfg, "campaign", "campaign"))
        model, _ = load_checkpoint(_pick(model_path, cfg, "model", "model.ckpt"))
        split_name = _pick(split, cfg, "split", "test")
        rows = campaign.split_dataset(
            truth_labels=truth_labels or cfg.get("truth_labels", False))[split_name]
        if not rows:
            raise AnnotationError(f"split {split_name!r} is empty")
        preds = [model.predict_bag(bag) for bag, _ in rows]
        report = evaluate(
            [p.contamination for p in preds], [lb.contamination for _, lb in rows],
            [p.grade_index for p in preds], [lb.grade for _, lb in rows],
            class_num=model.config.class_num, split=split_name,
            model_version=model.version)
        if out := _pick(out_path, cfg, "out", None):
            Path(out).write_text(report.to_json())
        if csv := _pick(csv_path, cfg, "csv", None):
            Path(csv).write_text(report.to_csv_row())
        click.echo(report.to_json())

    _run(body)


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--model", "model_path", type=click.Path(), default=None)
@click.option("--host", default=None)
@click.option("--port", type=int, default=None)
@click.option("--wal-dir", type=click.Path(), default=None)
@click.option("--lines", type=int, default=None)
@click.option("--contamination-threshold", type=float, default=None)
@click.option("--confidence-threshold", type=float, default=None)
@click.option("--annotations", "annotations_dir", type=click.Path(), default=None,
              help="Seed the adjudication inbox from an annotate run.")
def serve(config_path, model_path, host, port, wal_dir, lines,
          contamination_threshold, confidence_threshold, annotations_dir):
    """Start the versioned inference service from a sealed checkpoint."""
    cfg = _load_config(config_path)

    def body():
        import uvicorn

        from .service import build_store, create_app

        store = build_store(
            _pick(model_path, cfg, "model", "model.ckpt"),
            wal_dir=_pick(wal_dir, cfg, "wal_dir", None),
            lines=_pick(lines, cfg, "lines", 6),
            contamination_threshold=_pick(contamination_threshold, cfg,
                                          "contamination_threshold", 2.0),
            confidence_threshold=_pick(confidence_threshold, cfg,
                                       "confidence_threshold", 0.5),
            annotations_dir=_pick(annotations_dir, cfg, "annotations", None))
        app = create_app(store)
        uvicorn.run(app, host=_pick(host, cfg, "host", "127.0.0.1"),
                    port=_pick(port, cfg, "port", 8000), log_level="warning")

    _run(body)


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--campaign", "campaign_dir", type=click.Path(), default=None)
@click.option("--url", default=None)
@click.option("--finalize/--no-finalize", "do_finalize", default=True)
@click.option("--check-tracks/--no-check-tracks", default=True,
              help="Segment each track file and cross-check grab counts.")
def replay(config_path, campaign_dir, url, do_finalize, check_tracks):
    """Feed a campaign's layers through a running service (thin client)."""
    cfg = _load_config(config_path)

    def body():
        import httpx

        campaign = load_campaign(_pick(campaign_dir, cfg, "campaign", "campaign"))
        base = _pick(url, cfg, "url", "http://127.0.0.1:8000").rstrip("/")
        src = Path(_pick(campaign_dir, cfg, "campaign", "campaign"))
        with httpx.Client(base_url=base, timeout=30.0) as client:
            health = client.get("/healthz")
            health.raise_for_status()
            version = health.json()["model_version"]
            counts = {"accepted": 0, "duplicate": 0, "rejected": 0}
            finalized = 0
            escalated = 0
            for car in campaign.railcars:
                trace_digest = ""
                track_path = src / "tracks" / f"{car.railcar_id}.jsonl"
                if check_tracks and track_path.exists():
                    track = load_track(track_path)
                    grabs = segment_grabs(track.iou_trace())
                    if len(grabs) != len(car.layers):
                        raise SegmentationError(
                            f"{car.railcar_id}: {len(grabs)} grabs for {len(car.layers)} layers")
                    import hashlib
                    trace_digest = hashlib.sha256(track_path.read_bytes()).hexdigest()[:16]
                for layer in car.layers:
                    res = client.post(
                        f"/v{version}/lines/{car.line_id}/layers",
                        json={"dedupe_id": f"{car.railcar_id}:{layer.index}",
                              "railcar_id": car.railcar_id,
                              "layer_index": layer.index,
                              "features": [float(x) for x in layer.features],
                              "quality_ok": layer.quality_ok,
                              "fault_codes": list(layer.fault_codes),
                              "timestamp": float(layer.index),
                              "trace_digest": trace_digest})
                    res.raise_for_status()
                    counts[res.json()["status"]] += 1
                if do_finalize:
                    res = client.post(f"/v{version}/railcars/{car.railcar_id}/finalize")
                    res.raise_for_status()
                    finalized += 1
                    if res.json()["status"] == "escalated":
                        escalated += 1
        click.echo(json.dumps({"ingested": counts, "finalized": finalized,
                               "escalated": escalated}))

    _run(body)


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--url", default=None)
@click.option("--railcar", "railcar_id", default=None)
@click.option("--all", "show_all", is_flag=True, default=False)
@click.option("--queue", "show_queue", is_flag=True, default=False)
def report(config_path, url, railcar_id, show_all, show_queue):
    """Fetch operational reports or the active-learning queue (thin client)."""
    cfg = _load_config(config_path)

    def body():
        import httpx

        base = _pick(url, cfg, "url", "http://127.0.0.1:8000").rstrip("/")
        with httpx.Client(base_url=base, timeout=30.0) as client:
            if show_queue:
                res = client.get("/queue/active-learning")
            elif show_all:
                res = client.get("/railcars")
            elif railcar_id:
                res = client.get(f"/railcars/{railcar_id}/report")
            else:
                raise click.BadParameter("one of --railcar, --all, --queue required")
            if res.status_code == 404:
                raise PipelineError(res.json().get("detail", "not found"))
            res.raise_for_status()
            click.echo(json.dumps(res.json(), indent=2))

    _run(body)


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--campaign", "campaign_dir", type=click.Path(), default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--salt", default=None)
@click.option("--seed", type=int, default=None)
def annotate(config_path, campaign_dir, out_dir, salt, seed):
    """Run the double-blind annotation workflow over a campaign's rater labels."""
    cfg = _load_config(config_path)

    def body():
        campaign = load_campaign(_pick(campaign_dir, cfg, "campaign", "campaign"))
        out = Path(_pick(out_dir, cfg, "out", "annotations"))
        out.mkdir(parents=True, exist_ok=True)
        use_salt = _pick(salt, cfg, "salt", "scrapline")
        route_seed = _pick(seed, cfg, "seed", 0)
        audit = AuditLog(out / "audit.jsonl")
        store = AnnotationStore(required_raters=3, audit=audit,
                                taxonomy=campaign.config.class_names)
        pool = [p.rater_id for p in campaign.profiles]
        mapping = {}
        flagged = 0
        tiebreaks = 0
        for car in campaign.railcars:
            blind = pseudonymize(car.railcar_id, use_salt)
            mapping[car.railcar_id] = blind
            raters = route(car.railcar_id, pool, k=3, seed=route_seed)
            store.open_record(blind, raters)
            for rater in raters:
                percent, grade = campaign.labels[car.railcar_id][rater]
                store.submit(blind, rater, percent, grade)
            rec = store.get_record(blind)
            flagged += rec.flagged
            tiebreaks += rec.needs_tiebreak
        from .annotation import record_to_dict

        rows = [record_to_dict(rec)
                for rec in sorted(store.aggregated_records(), key=lambda r: r.blind_id)]
        (out / "records.jsonl").write_text(
            "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
        (out / "pseudonyms.json").write_text(json.dumps(mapping, sort_keys=True, indent=1))
        click.echo(json.dumps({"out": str(out), "records": len(rows),
                               "flagged": flagged, "tiebreaks": tiebreaks}))

    _run(body)


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--annotations", "ann_dir", type=click.Path(), default=None)
@click.option("--tag", default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
def export(config_path, ann_dir, tag, out_dir):
    """Export a versioned, digest-sealed dataset snapshot from annotations."""
    cfg = _load_config(config_path)

    def body():
        import hashlib

        from .annotation import split_by_railcar

        src = Path(_pick(ann_dir, cfg, "annotations", "annotations"))
        records_path = src / "records.jsonl"
        if not records_path.exists():
            raise FileNotFoundError(f"no records at {records_path}")
        rows = [json.loads(line) for line in records_path.read_text().splitlines()
                if line.strip()]
        use_tag = _pick(tag, cfg, "tag", "v1")
        seed = int.from_bytes(hashlib.sha256(use_tag.encode()).digest()[:4], "big")
        if len(rows) >= 3:
            split = split_by_railcar([r["blind_id"] for r in rows], seed=seed)
            for row in rows:
                row["partition"] = split.partition_of(row["blind_id"])
        else:
            for row in rows:
                row["partition"] = "train"
        body_text = json.dumps({"tag": use_tag, "seed": seed, "rows": rows},
                               sort_keys=True, separators=(",", ":"))
        digest = hashlib.sha256(body_text.encode()).hexdigest()
        out = Path(_pick(out_dir, cfg, "out", "exports"))
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"{use_tag}.json"
        payload = json.dumps({"tag": use_tag, "seed": seed, "digest": digest,
                              "rows": rows}, sort_keys=True, indent=1)
        if path.exists():
            if json.loads(path.read_text()).get("digest") != digest:
                raise PipelineError(f"export tag {use_tag!r} exists with different content")
        else:
            path.write_text(payload)
        click.echo(json.dumps({"out": str(path), "digest": digest, "rows": len(rows)}))

    _run(body)


if __name__ == "__main__":
    main()
