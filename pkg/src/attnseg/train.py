"""Pixelwise cross-entropy, Adam, and the epoch loop."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .data import LabelMap, SamplePatch, augment, derive_rng, random_crop
from .metrics import ConfusionMatrix, accumulate, compute_report
from .model import Model, save_checkpoint
from .tensor import ContractError, NonFiniteError, Tape, Tensor, as_tensor, record

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.sckp"
HISTORY_NAME = "history.csv"


class TrainingAborted(NonFiniteError):
    """Training hit a non-finite loss or gradient; the last good checkpoint is kept."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 50
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    ignore_class: int | None = None
    patch_size: int | None = None  # None: train on whole tiles
    augment: bool = True

    def validate(self) -> None:
        if not self.lr >= 0:
            raise ContractError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ContractError(f"epochs must be >= 0, got {self.epochs}")
        if not all(0 < b < 1 for b in self.betas):
            raise ContractError(f"betas must lie in (0, 1), got {self.betas}")
        if self.eps <= 0:
            raise ContractError(f"eps must be positive, got {self.eps}")

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "betas":
                v = f"{v[0]!r},{v[1]!r}"
            elif v is None:
                v = ""
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        """Parse flat ``key=value`` lines; keys are field names, '#' comments."""
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = (s.strip() for s in line.partition("="))
            if not sep:
                raise ContractError(f"line {lineno}: expected key=value, got {raw!r}")
            values[key] = val
        return (base or cls()).updated(values)

    def updated(self, values: dict[str, str]) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(self)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ContractError(f"unknown train config keys: {unknown}")
        kw = {}
        try:
            for key, val in values.items():
                if key == "betas":
                    b1, b2 = (float(v) for v in val.split(","))
                    kw[key] = (b1, b2)
                elif key in ("ignore_class", "patch_size"):
                    kw[key] = int(val) if val not in ("", "none", "None") else None
                elif key == "augment":
                    if val.lower() not in ("1", "0", "true", "false", "yes", "no"):
                        raise ValueError(f"not a boolean: {val!r}")
                    kw[key] = val.lower() in ("1", "true", "yes")
                elif key in ("batch_size", "epochs", "seed"):
                    kw[key] = int(val)
                else:
                    kw[key] = float(val)
        except ValueError as exc:
            raise ContractError(f"bad value for {key!r}: {exc}") from None
        cfg = dataclasses.replace(self, **kw)
        cfg.validate()
        return cfg


# loss ------------------------------------------------------------------------


def cross_entropy(logits, targets, ignore_class: int | None = None) -> Tensor:
    """Mean of -log softmax(logits)[target] over non-ignored pixels.

    ``logits`` is N×K×H×W; ``targets`` an N×H×W integer array or a sequence
    of label maps.
    """
    logits = as_tensor(logits)
    if not isinstance(targets, np.ndarray):
        targets = np.stack([t.labels if isinstance(t, LabelMap) else np.asarray(t) for t in targets])
    t = targets.astype(np.int64)
    n, k, h, w = logits.shape
    if t.shape != (n, h, w):
        raise ContractError(f"targets {t.shape} do not match logits {logits.shape}")
    keep = np.ones(t.shape, dtype=bool) if ignore_class is None else t != ignore_class
    if not keep.any():
        raise ContractError("every pixel is ignored; cross-entropy is undefined")
    if (t[keep] < 0).any() or (t[keep] >= k).any():
        raise ContractError(f"target labels must lie in [0, {k})")
    count = int(keep.sum())

    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    tsafe = np.where(keep, t, 0)
    picked = np.take_along_axis(z, tsafe[:, None], axis=1)[:, 0]
    loss = ((lse - picked) * keep).sum() / count

    def vjp(g):
        p = np.exp(z - lse[:, None])
        onehot = np.arange(k)[None, :, None, None] == tsafe[:, None]
        return ((p - onehot) * keep[:, None] * (g / count),)

    return record("cross_entropy", (logits,), np.asarray(loss), vjp)


# optimizer -------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, Tensor], grads: dict[str, object], state: AdamState, cfg: TrainConfig
) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update. ``state`` is advanced in place.

    A non-finite gradient or update rejects the whole step; ``state`` is
    then left untouched.
    """
    garrays = {}
    for name, p in params.items():
        g = grads[name]
        g = np.asarray(g.data if isinstance(g, Tensor) else g, dtype=np.float64)
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
        garrays[name] = g

    b1, b2 = cfg.betas
    t = state.t + 1
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    moments, out = {}, {}
    with np.errstate(over="ignore", invalid="ignore"):
        for name, p in params.items():
            g = garrays[name]
            m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
            v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
            new = p.data - (cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)).astype(p.data.dtype)
            if not np.all(np.isfinite(new)):
                raise NonFiniteError(f"update for parameter {name} is not finite")
            moments[name] = (m, v)
            out[name] = Tensor(new, requires_grad=p.requires_grad)
    for name, (m, v) in moments.items():
        state.m[name], state.v[name] = m, v
    state.t = t
    return out, state


# loop ------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    seconds: float
    oa: float | None = None
    miou: float | None = None
    af: float | None = None


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    def to_csv(self, include_seconds: bool = False) -> str:
        """Columns epoch,loss,oa,miou,af,seconds.

        Wall time varies between runs, so ``seconds`` is left blank unless
        ``include_seconds`` is set; the rest is reproducible byte for byte.
        """
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "loss", "oa", "miou", "af", "seconds"])

        def fmt(v):
            return "" if v is None else f"{v:.8f}"

        for e in self.epochs:
            secs = f"{e.seconds:.3f}" if include_seconds else ""
            writer.writerow([e.epoch, f"{e.loss:.8f}", fmt(e.oa), fmt(e.miou), fmt(e.af), secs])
        return buf.getvalue()


def _prefetch(it: Iterable, depth: int = 2) -> Iterator:
    """Run ``it`` on a worker thread, handing items over a bounded queue."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()
    stop = threading.Event()

    def worker():
        try:
            for item in it:
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
            q.put(done)
        except BaseException as exc:  # re-raised on the consumer side
            q.put(exc)

    thread = threading.Thread(target=worker, daemon=True)
    thread.start()
    try:
        while True:
            item = q.get()
            if item is done:
                return
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()


def _as_pairs(dataset) -> list[tuple[np.ndarray, np.ndarray]]:
    pairs = []
    for item in dataset:
        if isinstance(item, SamplePatch):
            image, mask = item.image, item.mask
        else:
            image, mask = item
        image = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)
        mask = mask.labels if isinstance(mask, LabelMap) else np.asarray(mask)
        pairs.append((image, mask))
    return pairs


def _epoch_batches(pairs, cfg: TrainConfig, epoch: int):
    order = derive_rng(cfg.seed, "shuffle", epoch).permutation(len(pairs))
    for start in range(0, len(order), cfg.batch_size):
        images, masks = [], []
        for idx in order[start : start + cfg.batch_size]:
            image, mask = pairs[idx]
            rng = derive_rng(cfg.seed, int(idx), epoch)
            size = cfg.patch_size or min(mask.shape)
            patch = random_crop(image, mask, size, rng)
            if cfg.augment:
                patch = augment(patch, rng)
            images.append(patch.image)
            masks.append(patch.mask)
        yield np.stack(images).astype(np.float32), np.stack(masks)


def evaluate(model: Model, dataset, batch_size: int = 16) -> ConfusionMatrix:
    cm = ConfusionMatrix(model.config.num_classes)
    pairs = _as_pairs(dataset)
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        preds = model.predict_labels(np.stack([im for im, _ in chunk]))
        for pred, (_, mask) in zip(preds, chunk):
            cm = accumulate(cm, pred, mask)
    return cm


def train(
    model: Model,
    dataset,
    cfg: TrainConfig,
    out_dir=None,
    eval_data=None,
    excluded: Sequence[int] = (),
) -> tuple[Model, TrainHistory]:
    """Train ``model`` in place with Adam on pixelwise cross-entropy.

    With ``out_dir`` set, the initial weights and then each finished epoch are
    checkpointed there and the history CSV is rewritten after every epoch.
    Per-epoch metrics come from ``eval_data`` when given, otherwise from the
    predictions made on the training batches during the epoch.
    """
    cfg.validate()
    pairs = _as_pairs(dataset)
    if not pairs:
        raise ContractError("training dataset is empty")
    factor = model.config.downsample_factor
    for image, mask in pairs:
        size = cfg.patch_size or min(mask.shape)
        if size % factor:
            raise ContractError(f"patch size {size} is not divisible by the downsample factor {factor}")
        if image.shape[0] != model.config.in_channels:
            raise ContractError(f"image has {image.shape[0]} bands, model expects {model.config.in_channels}")
        if mask.size and int(mask.max()) >= model.config.num_classes:
            raise ContractError(f"mask label {int(mask.max())} >= num_classes {model.config.num_classes}")

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out_dir / CHECKPOINT_NAME)
        (out_dir / HISTORY_NAME).write_text(TrainHistory().to_csv())

    state = AdamState()
    history = TrainHistory()
    names = list(model.params)
    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        losses = []
        running = ConfusionMatrix(model.config.num_classes)
        for images, masks in _prefetch(_epoch_batches(pairs, cfg, epoch)):
            try:
                with Tape() as tape:
                    logits = model.forward(images, "train")
                    loss = cross_entropy(logits, masks, cfg.ignore_class)
                    grads = tape.backward(loss, [model.params[n] for n in names])
                new_params, state = adam_step(
                    model.params, {n: grads[model.params[n]] for n in names}, state, cfg
                )
            except NonFiniteError as exc:
                raise TrainingAborted(f"epoch {epoch}: {exc}; last good checkpoint kept") from exc
            model.params = new_params
            losses.append(loss.item())
            if eval_data is None:
                for pred, mask in zip(logits.data.argmax(axis=1), masks):
                    running = accumulate(running, pred, mask)

        cm = evaluate(model, eval_data) if eval_data is not None else running
        report = compute_report(cm, excluded)
        record_ = EpochRecord(
            epoch=epoch,
            loss=float(np.mean(losses)),
            seconds=time.perf_counter() - started,
            oa=report.oa,
            miou=report.miou,
            af=report.af,
        )
        history.epochs.append(record_)
        log.info("epoch %d loss %.4f oa %.4f (%.1fs)", epoch, record_.loss, record_.oa, record_.seconds)
        if out_dir is not None:
            save_checkpoint(model, out_dir / CHECKPOINT_NAME)
            (out_dir / HISTORY_NAME).write_text(history.to_csv())
    return model, history
