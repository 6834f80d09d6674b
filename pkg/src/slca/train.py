"""Training loop, evaluation and experiment records."""
from __future__ import annotations

import json
import logging
import time
from collections.abc import Callable
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import HyperParams, TAP_NAMES
from .data import Dataset, flip, random_flip_codes, to_feature_map
from .digest import hex64
from .encoder import Encoder, EncoderTapSet
from .errors import NumericError, SlcaError
from .metrics import accuracy, auc_per_class
from .model import FusionModel
from .nn import AdamW, softmax, softmax_cross_entropy

log = logging.getLogger(__name__)

EVAL_BATCH = 100
TAP_CHUNK = 64


class TrainingDiverged(NumericError):
    def __init__(self, message: str, record: "ExperimentRecord"):
        super().__init__(message)
        self.record = record


class FrozenContractError(SlcaError):
    """Encoder weights changed during training."""


@dataclass
class Metrics:
    accuracy: float
    auc_macro_ovr: float
    loss: float
    auc_skipped: list[int] = field(default_factory=list)


@dataclass
class Split:
    dataset: Dataset
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def labels(self) -> np.ndarray:
        return self.dataset.labels[self.indices].astype(np.int64)


class TapCache:
    """Frozen-encoder taps per (sample, flip).

    Taps are computed a whole chunk of consecutive dataset indices at a time,
    so cached values do not depend on which batch first asked for them.
    """

    def __init__(self, encoder: Encoder, dataset: Dataset, chunk: int = TAP_CHUNK):
        self.encoder = encoder
        self.dataset = dataset
        self.chunk = chunk
        self._store: dict[tuple[int, int], tuple[np.ndarray, ...]] = {}

    def _block(self, code: int, c: int) -> tuple[np.ndarray, ...]:
        key = (code, c)
        if key not in self._store:
            lo, hi = c * self.chunk, min((c + 1) * self.chunk, len(self.dataset))
            imgs = self.dataset.images[lo:hi]
            if code:
                imgs = flip(imgs, np.full(hi - lo, code))
            self._store[key] = self.encoder.encode_with_taps(to_feature_map(imgs)).as_tuple()
        return self._store[key]

    def get(self, indices: np.ndarray, codes: np.ndarray | None = None) -> EncoderTapSet:
        codes = np.zeros(len(indices), dtype=np.int64) if codes is None else codes
        rows = [[] for _ in TAP_NAMES]
        for i, code in zip(indices, codes):
            block = self._block(int(code), int(i) // self.chunk)
            for t in range(len(TAP_NAMES)):
                rows[t].append(block[t][int(i) % self.chunk])
        return EncoderTapSet(*(np.stack(r) for r in rows))


@dataclass
class ExperimentRecord:
    run_id: str
    spec: dict
    hyper: dict
    fraction: float
    seed: int
    split_seed: int
    train_size: int
    val_size: int
    model_selection: str = "best_val_accuracy"
    taps_alias: bool = False
    initial: dict | None = None
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_accuracy: float = 0.0
    final_test: dict | None = None
    encoder_digest_before: str = ""
    encoder_digest_after: str = ""
    backbone_digest_before: str = ""
    backbone_digest_after: str = ""
    status: str = "ok"
    wall_clock_seconds: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_clock_seconds")
        return d

    def to_json(self) -> str:
        """Canonical JSON (no timing), byte-stable for a fixed configuration."""
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @property
    def frozen_ok(self) -> bool:
        return self.encoder_digest_before == self.encoder_digest_after

    @property
    def test_accuracy(self) -> float:
        return self.final_test["accuracy"]

    @property
    def test_auc(self) -> float:
        return self.final_test["auc_macro_ovr"]


def predict(model: FusionModel, split: Split, taps: TapCache | None) -> np.ndarray:
    """Eval-mode logits over a split in fixed-size consecutive batches."""
    out = []
    for lo in range(0, len(split), EVAL_BATCH):
        idx = split.indices[lo : lo + EVAL_BATCH]
        x = to_feature_map(split.dataset.images[idx])
        t = taps.get(idx) if model.uses_encoder else None
        out.append(model.forward(x, t, training=False))
    return np.concatenate(out)


def evaluate(model: FusionModel, split: Split, taps: TapCache | None) -> Metrics:
    logits = predict(model, split, taps)
    labels = split.labels
    loss, _ = softmax_cross_entropy(logits.astype(np.float64), labels)
    per, skipped = auc_per_class(softmax(logits.astype(np.float64)), labels)
    auc = float(np.mean(list(per.values()))) if per else float("nan")
    return Metrics(accuracy(logits, labels), auc, loss, skipped)


def _batches(rng: np.random.Generator, n: int, batch_size: int) -> list[np.ndarray]:
    order = rng.permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # batch norm needs at least two samples
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


MetricSink = Callable[[dict], None]


def train(model: FusionModel, train_split: Split, val_split: Split, hp: HyperParams, *,
          test_split: Split | None = None, taps: TapCache | None = None,
          sink: MetricSink | None = None, run_id: str = "run", fraction: float = 1.0,
          split_seed: int = 0) -> tuple[ExperimentRecord, dict[str, np.ndarray]]:
    """Train with AdamW, keeping the weights of the best validation epoch.

    Returns the experiment record and the best state dict.  The record's
    final test metrics are those of the best state on ``test_split`` (or the
    validation split when no test split is given).
    """
    if len(train_split) < 2 or len(val_split) < 1:
        raise ValueError("training needs >= 2 samples and a non-empty validation split")
    t0 = time.perf_counter()
    if taps is None and model.uses_encoder:
        taps = TapCache(model.encoder, train_split.dataset)
    record = ExperimentRecord(
        run_id=run_id, spec=model.spec.model_dump(mode="json"), hyper=hp.model_dump(mode="json"),
        fraction=fraction, seed=hp.seed, split_seed=split_seed, train_size=len(train_split),
        val_size=len(val_split), taps_alias=model.spec.encoder.taps_alias,
        encoder_digest_before=hex64(model.encoder_digest()),
        backbone_digest_before=hex64(model.backbone_digest()))
    emit = sink or (lambda _: None)

    def log_metrics(epoch: int, split: str, m: Metrics) -> dict:
        row = {"run_id": run_id, "epoch": epoch, "split": split, "accuracy": m.accuracy,
               "auc": m.auc_macro_ovr, "loss": m.loss}
        emit(row)
        return row

    def snapshot() -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in model.state_dict().items()}

    initial = evaluate(model, val_split, taps)
    record.initial = asdict(initial)
    log_metrics(0, "val", initial)
    best_state, best_acc = snapshot(), initial.accuracy
    record.best_val_accuracy = best_acc

    opt = AdamW(model.parameters(trainable_only=True), lr=hp.lr, weight_decay=hp.weight_decay)
    rng = np.random.default_rng([hp.seed, 7919])
    labels = train_split.labels
    for epoch in range(1, hp.epochs + 1):
        total, seen = 0.0, 0
        for b in _batches(rng, len(train_split), hp.batch_size):
            idx = train_split.indices[b]
            codes = random_flip_codes(rng, len(b)) if hp.augment else np.zeros(len(b), dtype=np.int64)
            x = to_feature_map(flip(train_split.dataset.images[idx], codes))
            t = taps.get(idx, codes) if model.uses_encoder else None
            opt.zero_grad()
            try:
                logits = model.forward(x, t, training=True)
                loss, dlogits = softmax_cross_entropy(logits, labels[b])
                if not np.isfinite(loss):
                    raise NumericError("non-finite loss")
                model.backward(dlogits)
            except NumericError as exc:
                record.status = "diverged"
                record.wall_clock_seconds = time.perf_counter() - t0
                raise TrainingDiverged(f"diverged at epoch {epoch}: {exc}", record) from exc
            opt.step()
            total += loss * len(b)
            seen += len(b)
        entry = {"epoch": epoch, "train_loss": total / seen}
        if epoch % hp.eval_every == 0 or epoch == hp.epochs:
            m = evaluate(model, val_split, taps)
            log_metrics(epoch, "val", m)
            entry["val"] = asdict(m)
            if m.accuracy > best_acc:
                best_acc, best_state = m.accuracy, snapshot()
                record.best_epoch, record.best_val_accuracy = epoch, best_acc
        record.history.append(entry)
        log.debug("%s epoch %d loss %.4f", run_id, epoch, entry["train_loss"])

    record.encoder_digest_after = hex64(model.encoder_digest())
    record.backbone_digest_after = hex64(model.backbone_digest())
    if not record.frozen_ok:
        raise FrozenContractError(f"{run_id}: encoder digest changed during training")

    final_state = snapshot()
    model.load_state_dict(best_state)
    final = evaluate(model, test_split or val_split, taps)
    model.load_state_dict(final_state)
    record.final_test = asdict(final)
    log_metrics(record.best_epoch, "test", final)
    record.wall_clock_seconds = time.perf_counter() - t0
    return record, best_state
