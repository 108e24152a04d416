"""Attention-pooled bag model for railcar contamination and grade.

A railcar's layers form a bag of feature-vector instances. A linear
projection adapter maps each precomputed instance embedding into the model
width, a two-layer scoring MLP (Linear-Tanh-Linear) produces per-instance
attention logits, softmax over the bag yields pooling weights, and the
weighted sum feeds a regression head and a classification head (each
Linear-ReLU-Dropout-Linear). Training covers the single-task regression
loop and the joint regression+classification loop with a weighted loss.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import OptimizerConfig, ParameterStore, Tensor

log = logging.getLogger(__name__)

DEFAULT_CLASS_NAMES = ("3A", "3A1", "3AH", "cast_iron")

# independent RNG stream tags so optional branches (classification dropout)
# never perturb the draws of the branches shared with regression-only runs
_STREAM_INIT = 0
_STREAM_SAMPLING = 1
_STREAM_SHUFFLE = 2
_STREAM_DROPOUT_REG = 3
_STREAM_DROPOUT_CLS = 4


class MilError(Exception):
    """Invalid bag, label, or configuration."""


class TrainingError(MilError):
    """Training aborted (empty dataset, non-finite loss, missing labels)."""


class CheckpointIntegrityError(MilError):
    """Checkpoint content hash does not match its payload."""


@dataclass
class Bag:
    """One railcar's ordered layers, each a feature vector with a quality flag."""

    railcar_id: str
    instances: np.ndarray
    layer_indices: list[int] = field(default_factory=list)
    quality_ok: list[bool] = field(default_factory=list)

    def __post_init__(self):
        self.instances = np.asarray(self.instances, dtype=np.float64)
        if self.instances.ndim != 2:
            raise MilError(f"bag {self.railcar_id!r}: instances must be 2-D, got {self.instances.shape}")
        n = self.instances.shape[0]
        if not self.layer_indices:
            self.layer_indices = list(range(n))
        if not self.quality_ok:
            self.quality_ok = [True] * n
        if len(self.layer_indices) != n or len(self.quality_ok) != n:
            raise MilError(f"bag {self.railcar_id!r}: per-instance metadata length mismatch")
        if any(nxt < prev for prev, nxt in zip(self.layer_indices, self.layer_indices[1:])):
            raise MilError(f"bag {self.railcar_id!r}: instances must be ordered by layer index")
        if not any(self.quality_ok):
            raise MilError(f"bag {self.railcar_id!r}: no eligible instance")

    @property
    def feature_dim(self) -> int:
        return self.instances.shape[1]

    def eligible_indices(self) -> list[int]:
        return [i for i, ok in enumerate(self.quality_ok) if ok]

    def eligible_instances(self) -> np.ndarray:
        return self.instances[self.eligible_indices()]


@dataclass
class BagLabel:
    """Railcar-level targets: contamination percent and optional grade index."""

    contamination: float
    grade: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.contamination <= 100.0:
            raise MilError(f"contamination {self.contamination} outside [0, 100]")


@dataclass
class ModelConfig:
    feature_dim: int = 32
    enc_dim: int = 128
    attn_dim: int = 64
    head_dim: int = 256
    class_num: int = 4
    class_names: tuple[str, ...] = DEFAULT_CLASS_NAMES
    dropout_rate: float = 0.25
    sigma_ref: float = 2.0
    # inference pools every eligible layer by default; flip to sample
    # eval_samples layers per bag instead (deterministic per railcar)
    eval_pool_all: bool = True
    eval_samples: int = 5

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        if len(self.class_names) != self.class_num:
            raise MilError(f"{self.class_num} classes but {len(self.class_names)} names")


@dataclass
class TrainingConfig:
    epochs: int = 50
    samples_per_bag: int = 5
    batch_size: int = 16
    lambda_cls: float = 1.0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    pooling: str = "attention"

    def __post_init__(self):
        if self.epochs < 1:
            raise MilError(f"epochs must be >= 1, got {self.epochs}")
        if self.samples_per_bag < 1:
            raise MilError(f"samples_per_bag must be >= 1, got {self.samples_per_bag}")
        if self.lambda_cls < 0:
            raise MilError(f"lambda_cls must be >= 0, got {self.lambda_cls}")
        if self.pooling not in ("attention", "mean"):
            raise MilError(f"pooling must be 'attention' or 'mean', got {self.pooling!r}")


def sample_instances(bag: Bag, s: int, rng: np.random.Generator) -> np.ndarray:
    """Draw s eligible instances, without replacement when the bag is big enough."""
    idx = bag.eligible_indices()
    if not idx:
        raise MilError(f"bag {bag.railcar_id!r} has no eligible instance")
    if len(idx) >= s:
        chosen = rng.choice(len(idx), size=s, replace=False)
    else:
        chosen = rng.choice(len(idx), size=s, replace=True)
    return bag.instances[[idx[i] for i in chosen]]


class MilModel:
    """Encoder + attention pooling + regression and classification heads."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0, pooling: str = "attention"):
        self.config = config or ModelConfig()
        self.seed = seed
        self.pooling = pooling
        self.store = ParameterStore()
        self.training = False
        self._version: str | None = None
        self.history: dict[str, list] = {}
        # input standardization, fitted on the training set; identity until then
        self.feature_mean = np.zeros((1, self.config.feature_dim))
        self.feature_std = np.ones((1, self.config.feature_dim))
        self._dropout_rng = {
            "reg": np.random.default_rng([seed, _STREAM_DROPOUT_REG]),
            "cls": np.random.default_rng([seed, _STREAM_DROPOUT_CLS]),
        }
        self._init_params(np.random.default_rng([seed, _STREAM_INIT]))

    def _init_params(self, rng: np.random.Generator) -> None:
        cfg = self.config

        def uniform_fan_in(fan_in, fan_out):
            a = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-a, a, size=(fan_in, fan_out))

        add = self.store.add
        add("enc.w", uniform_fan_in(cfg.feature_dim, cfg.enc_dim))
        add("enc.b", np.zeros((1, cfg.enc_dim)))
        add("attn.w1", uniform_fan_in(cfg.enc_dim, cfg.attn_dim))
        add("attn.b1", np.zeros((1, cfg.attn_dim)))
        add("attn.w2", uniform_fan_in(cfg.attn_dim, 1))
        add("attn.b2", np.zeros((1, 1)))
        add("reg.w1", uniform_fan_in(cfg.enc_dim, cfg.head_dim))
        add("reg.b1", np.zeros((1, cfg.head_dim)))
        add("reg.w2", uniform_fan_in(cfg.head_dim, 1))
        add("reg.b2", np.zeros((1, 1)))
        add("cls.w1", uniform_fan_in(cfg.enc_dim, cfg.head_dim))
        add("cls.b1", np.zeros((1, cfg.head_dim)))
        add("cls.w2", uniform_fan_in(cfg.head_dim, cfg.class_num))
        add("cls.b2", np.zeros((1, cfg.class_num)))

    @property
    def version(self) -> str:
        return self._version or "untrained"

    def finalize_version(self) -> str:
        if self._version is not None:
            raise MilError("model version is immutable once set")
        digest = hashlib.sha256()
        for name in sorted(self.store.names()):
            digest.update(name.encode())
            digest.update(self.store[name].data.tobytes())
        digest.update(self.feature_mean.tobytes())
        digest.update(self.feature_std.tobytes())
        self._version = digest.hexdigest()[:12]
        return self._version

    def train_mode(self) -> None:
        self.training = True

    def eval_mode(self) -> None:
        self.training = False

    def fit_normalizer(self, instances: np.ndarray) -> None:
        x = np.asarray(instances, dtype=np.float64)
        self.feature_mean = x.mean(axis=0, keepdims=True)
        self.feature_std = np.maximum(x.std(axis=0, keepdims=True), 1e-8)

    def encode(self, instances: np.ndarray) -> Tensor:
        """Standardize and project instances; the adapter is linear so that
        external backbone embeddings plug in without retraining assumptions."""
        x = np.asarray(instances, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.config.feature_dim:
            raise MilError(f"instances shape {x.shape} does not match feature_dim {self.config.feature_dim}")
        x = (x - self.feature_mean) / self.feature_std
        s = self.store
        return ag.linear(ag.tensor(x), s["enc.w"], s["enc.b"])

    def forward_bag(self, instances: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Pool a bag of instances into (embedding, attention weights)."""
        if len(instances) == 0:
            raise MilError("forward_bag on an empty instance set")
        f = self.encode(instances)
        if self.pooling == "mean":
            n = f.shape[0]
            return ag.mean_rows(f), np.full(n, 1.0 / n)
        s = self.store
        hidden = ag.tanh(ag.linear(f, s["attn.w1"], s["attn.b1"]))
        scores = ag.linear(hidden, s["attn.w2"], s["attn.b2"])
        alpha = ag.softmax_rows(ag.transpose(scores))
        z = ag.matmul(alpha, f)
        return z, alpha.data.ravel().copy()

    def _head(self, z: Tensor, prefix: str) -> Tensor:
        s = self.store
        h = ag.relu(ag.linear(z, s[f"{prefix}.w1"], s[f"{prefix}.b1"]))
        h = ag.dropout(h, self.config.dropout_rate, self._dropout_rng[prefix], self.training)
        return ag.linear(h, s[f"{prefix}.w2"], s[f"{prefix}.b2"])

    def regression_output(self, z: Tensor) -> Tensor:
        if z.shape[1] != self.config.enc_dim:
            raise MilError(f"embedding width {z.shape[1]} != enc_dim {self.config.enc_dim}")
        return self._head(z, "reg")

    def classification_logits(self, z: Tensor) -> Tensor:
        if z.shape[1] != self.config.enc_dim:
            raise MilError(f"embedding width {z.shape[1]} != enc_dim {self.config.enc_dim}")
        return self._head(z, "cls")

    def predict_reg(self, z: Tensor) -> float:
        return self.regression_output(z).item()

    def predict_cls(self, z: Tensor) -> np.ndarray:
        return ag.softmax(self.classification_logits(z).data.ravel())

    def _bag_embedding(self, bag: Bag) -> tuple[Tensor, np.ndarray]:
        instances = bag.eligible_instances()
        if not self.config.eval_pool_all and len(instances) > self.config.eval_samples:
            key = int.from_bytes(hashlib.sha256(bag.railcar_id.encode()).digest()[:4], "big")
            rng = np.random.default_rng([self.seed, _STREAM_SAMPLING, key])
            pick = rng.choice(len(instances), size=self.config.eval_samples, replace=False)
            instances = instances[sorted(pick)]
        return self.forward_bag(instances)

    def predict_bag(self, bag: Bag) -> "BagPrediction":
        """Eval-mode prediction over all eligible layers of one bag."""
        was_training = self.training
        self.eval_mode()
        try:
            z, alpha = self._bag_embedding(bag)
            contamination = self.predict_reg(z)
            probs = self.predict_cls(z)
            reg_conf, per_instance = self._regression_confidence(bag)
            return BagPrediction(
                railcar_id=bag.railcar_id,
                contamination=contamination,
                class_probs=probs,
                grade_index=int(np.argmax(probs)),
                grade=self.config.class_names[int(np.argmax(probs))],
                attention=alpha,
                reg_conf=reg_conf,
                cls_conf=float(probs.max()),
                per_instance_outputs=per_instance,
                model_version=self.version,
            )
        finally:
            self.training = was_training

    def _regression_confidence(self, bag: Bag) -> tuple[float, np.ndarray]:
        outputs = []
        for row in bag.eligible_instances():
            z, _ = self.forward_bag(row.reshape(1, -1))
            outputs.append(self.predict_reg(z))
        per_instance = np.array(outputs)
        sigma_inst = float(per_instance.std())  # population std; 0 for a single instance
        reg_conf = 1.0 - min(1.0, sigma_inst / self.config.sigma_ref)
        return reg_conf, per_instance

    def confidence(self, bag: Bag) -> tuple[float, float]:
        """(regression confidence, classification confidence), both in [0, 1]."""
        pred = self.predict_bag(bag)
        return pred.reg_conf, pred.cls_conf


@dataclass
class BagPrediction:
    railcar_id: str
    contamination: float
    class_probs: np.ndarray
    grade_index: int
    grade: str
    attention: np.ndarray
    reg_conf: float
    cls_conf: float
    per_instance_outputs: np.ndarray
    model_version: str


def _check_dataset(dataset, need_cls: bool) -> None:
    if not dataset:
        raise TrainingError("empty training dataset")
    for bag, label in dataset:
        if label is None:
            raise TrainingError(f"bag {bag.railcar_id!r} has no label")
        if need_cls and label.grade is None:
            raise TrainingError(f"bag {bag.railcar_id!r} is missing a classification label")


def _epoch_minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _validation_mae(model: MilModel, val) -> float:
    errs = [abs(model.predict_bag(bag).contamination - label.contamination) for bag, label in val]
    return float(np.mean(errs))


def _train(dataset, cfg: TrainingConfig, model_cfg: ModelConfig | None, val, joint: bool) -> MilModel:
    _check_dataset(dataset, need_cls=joint)
    model = MilModel(model_cfg or ModelConfig(), seed=cfg.seed, pooling=cfg.pooling)
    if dataset[0][0].feature_dim != model.config.feature_dim:
        raise TrainingError(
            f"bag feature_dim {dataset[0][0].feature_dim} != model feature_dim {model.config.feature_dim}")
    optimizer = ag.make_optimizer(cfg.optimizer)
    model.fit_normalizer(np.vstack([bag.eligible_instances() for bag, _ in dataset]))
    sample_rng = np.random.default_rng([cfg.seed, _STREAM_SAMPLING])
    shuffle_rng = np.random.default_rng([cfg.seed, _STREAM_SHUFFLE])

    history: dict[str, list] = {"epoch_train_loss": [], "epoch_val_mae": [],
                                "step_loss": [], "step_reg_loss": [], "step_cls_loss": []}
    model.train_mode()
    for epoch in range(cfg.epochs):
        epoch_losses = []
        for batch in _epoch_minibatches(len(dataset), cfg.batch_size, shuffle_rng):
            embeddings = []
            y_reg = np.empty((len(batch), 1))
            y_cls = np.empty(len(batch), dtype=np.int64)
            for row, i in enumerate(batch):
                bag, label = dataset[i]
                sampled = sample_instances(bag, cfg.samples_per_bag, sample_rng)
                z, _ = model.forward_bag(sampled)
                embeddings.append(z)
                y_reg[row, 0] = label.contamination
                if joint:
                    y_cls[row] = label.grade
            zs = ag.concat_rows(embeddings)
            reg_loss = ag.mse_loss(model.regression_output(zs), y_reg)
            if joint:
                cls_loss = ag.cross_entropy_loss(model.classification_logits(zs), y_cls)
                loss = ag.add(reg_loss, ag.scale(cls_loss, cfg.lambda_cls))
                history["step_cls_loss"].append(cls_loss.item())
            else:
                loss = reg_loss
            if not np.isfinite(loss.item()):
                raise TrainingError(
                    f"non-finite loss {loss.item()} at epoch {epoch} step {len(history['step_loss'])}")
            history["step_reg_loss"].append(reg_loss.item())
            history["step_loss"].append(loss.item())
            epoch_losses.append(loss.item())
            model.store.zero_grad()
            loss.backward()
            optimizer.step(model.store)
        train_loss = float(np.mean(epoch_losses))
        history["epoch_train_loss"].append(train_loss)
        if val:
            model.eval_mode()
            val_mae = _validation_mae(model, val)
            model.train_mode()
            history["epoch_val_mae"].append(val_mae)
            log.info("epoch %d train_loss=%.6f val_mae=%.6f", epoch, train_loss, val_mae)
        else:
            log.info("epoch %d train_loss=%.6f", epoch, train_loss)
    model.eval_mode()
    model.history = history
    model.finalize_version()
    return model


def train_mil(dataset, cfg: TrainingConfig, model_cfg: ModelConfig | None = None, val=None) -> MilModel:
    """Regression-only bag training: sample, encode, attend, pool, head, step."""
    return _train(dataset, cfg, model_cfg, val, joint=False)


def train_mtl(dataset, cfg: TrainingConfig, model_cfg: ModelConfig | None = None, val=None) -> MilModel:
    """Joint training with loss = regression + lambda_cls * classification."""
    return _train(dataset, cfg, model_cfg, val, joint=True)


def select_lambda(grid, train, val, cfg: TrainingConfig, model_cfg: ModelConfig | None = None):
    """Pick the grid value minimizing val MAE + (1 - val macro F1); ties go small.

    Returns (best_lambda, {lambda: score}).
    """
    from .metrics import classification_metrics, mae

    if not grid:
        raise MilError("empty lambda grid")
    scores: dict[float, float] = {}
    for lam in grid:
        run_cfg = TrainingConfig(
            epochs=cfg.epochs, samples_per_bag=cfg.samples_per_bag, batch_size=cfg.batch_size,
            lambda_cls=float(lam), optimizer=cfg.optimizer, seed=cfg.seed, pooling=cfg.pooling)
        model = train_mtl(train, run_cfg, model_cfg)
        preds = [model.predict_bag(bag) for bag, _ in val]
        val_mae = mae([p.contamination for p in preds], [lb.contamination for _, lb in val])
        cls = classification_metrics(
            [p.grade_index for p in preds], [lb.grade for _, lb in val], model.config.class_num)
        scores[float(lam)] = val_mae + (1.0 - cls.macro_f1)
    best = min(sorted(scores), key=lambda lam: (scores[lam], lam))
    return best, scores


def save_checkpoint(model: MilModel, path: str | Path) -> str:
    """Write a hash-sealed JSON checkpoint; returns the content hash."""
    def encode_array(arr):
        return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode()

    payload = {
        "format": "scrapline-checkpoint-1",
        "model_version": model.version,
        "seed": model.seed,
        "pooling": model.pooling,
        "config": asdict(model.config),
        "feature_mean": encode_array(model.feature_mean),
        "feature_std": encode_array(model.feature_std),
        "params": {
            name: {
                "shape": list(t.data.shape),
                "data": encode_array(t.data),
            }
            for name, t in model.store.items()
        },
    }
    payload["config"]["class_names"] = list(model.config.class_names)
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    content_hash = hashlib.sha256(canonical.encode()).hexdigest()
    payload["content_hash"] = content_hash
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1))
    return content_hash


def load_checkpoint(path: str | Path) -> tuple[MilModel, str]:
    """Load a checkpoint, verifying its content hash; returns (model, hash)."""
    if not Path(path).exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointIntegrityError(f"unreadable checkpoint {path}: {exc}") from exc
    stored_hash = payload.pop("content_hash", None)
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    actual = hashlib.sha256(canonical.encode()).hexdigest()
    if stored_hash != actual:
        raise CheckpointIntegrityError(
            f"checkpoint hash mismatch: stored {stored_hash}, computed {actual}")
    cfg_dict = dict(payload["config"])
    cfg_dict["class_names"] = tuple(cfg_dict["class_names"])
    model = MilModel(ModelConfig(**cfg_dict), seed=payload["seed"], pooling=payload["pooling"])
    state = {}
    for name, entry in payload["params"].items():
        arr = np.frombuffer(base64.b64decode(entry["data"]), dtype="<f8").reshape(entry["shape"])
        state[name] = arr.astype(np.float64)
    model.store.load_state_arrays(state)
    d = model.config.feature_dim
    model.feature_mean = np.frombuffer(
        base64.b64decode(payload["feature_mean"]), dtype="<f8").reshape(1, d).copy()
    model.feature_std = np.frombuffer(
        base64.b64decode(payload["feature_std"]), dtype="<f8").reshape(1, d).copy()
    model._version = payload["model_version"]
    return model, actual
