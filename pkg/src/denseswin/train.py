"""Cross-entropy training with Adam, decoupled weight decay and a step schedule.

Every random draw during training is derived statelessly from the run seed
and the (epoch, step) position, so a resumed run replays exactly the batches,
dropout masks and augmentations of an uninterrupted one.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import container
from . import tensor as T
from .config import RunConfig, TrainConfig, run_config_from_dict
from .data import (
    LABELS,
    ImageSet,
    LabelSet,
    batch_iterator,
    generate_synthetic,
    load_split,
    minority_oversample,
    read_manifest,
    stratified_split,
)
from .errors import CheckpointError, ContractError, DimensionError, NumericError
from .model import HybridDenseSwin
from .tensor import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the batch, via log-sum-exp."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [B, K] logits, got {logits.shape}")
    b, k = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {b}")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ContractError(f"labels must be integers in [0, {k}), got {labels.tolist()}")
    x = logits.data.astype(np.float64)
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(b)
    loss = (-logp[rows, labels]).mean()

    def bw(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return ((d * (float(g) / b)).astype(logits.dtype),)

    return T.make_op(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


# ---------------------------------------------------------------------------
# optimiser and schedule
# ---------------------------------------------------------------------------


@dataclass
class LrSchedule:
    base_lr: float = 1e-3
    decay_factor: float = 0.15
    period: int = 20

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "LrSchedule":
        return cls(cfg.base_lr, cfg.decay_factor, cfg.decay_period)


def lr_at(epoch: int, sched: LrSchedule | None = None) -> float:
    """``base_lr * decay_factor ** floor(epoch / period)``."""
    sched = sched or LrSchedule()
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    return sched.base_lr * sched.decay_factor ** (epoch // sched.period)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.04
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "AdamState":
        return cls(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)


def adam_step(params: dict, grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, then ``p -= lr * wd * p``; mutates in place.

    ``params`` maps names to :class:`~denseswin.nn.Parameter`. All gradients
    are validated before any parameter changes.
    """
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= (lr * step).astype(p.dtype)
        if state.weight_decay:
            p.data -= (lr * state.weight_decay * p.data).astype(p.dtype)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_acc: float | None = None


@dataclass
class Checkpoint:
    config: RunConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    optimizer: AdamState
    epoch: int
    seed: int
    history: list[EpochRecord] = field(default_factory=list)
    labels: LabelSet = LABELS


def _sections(ck: Checkpoint) -> dict[str, np.ndarray]:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": ck.config.to_dict(),
        "labels": list(ck.labels.names),
        "epoch": ck.epoch,
        "seed": ck.seed,
        "history": [asdict(r) for r in ck.history],
        "adam": {
            "beta1": ck.optimizer.beta1,
            "beta2": ck.optimizer.beta2,
            "eps": ck.optimizer.eps,
            "weight_decay": ck.optimizer.weight_decay,
        },
    }
    out = {"meta": container.json_section(meta), "adam.t": np.array([ck.optimizer.t], dtype=np.int64)}
    for name, arr in ck.params.items():
        out[f"param/{name}"] = arr
    for name, arr in ck.buffers.items():
        out[f"buffer/{name}"] = arr
    for name, arr in ck.optimizer.m.items():
        out[f"adam.m/{name}"] = arr
    for name, arr in ck.optimizer.v.items():
        out[f"adam.v/{name}"] = arr
    return out


def save_checkpoint(path, ck: Checkpoint) -> None:
    container.save(path, _sections(ck))


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    return container.encode(_sections(ck))


def load_checkpoint(path) -> Checkpoint:
    sec = container.load(path)
    try:
        meta = container.read_json_section(sec.pop("meta"))
        t = int(sec.pop("adam.t")[0])
    except KeyError as e:
        raise CheckpointError(f"{path}: missing section {e}") from None
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: checkpoint format {meta.get('format')}, expected {CHECKPOINT_FORMAT}")
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "buffer": {}, "adam.m": {}, "adam.v": {}}
    for key, arr in sec.items():
        kind, _, name = key.partition("/")
        if kind not in groups:
            raise CheckpointError(f"{path}: unexpected section {key!r}")
        groups[kind][name] = arr
    opt = AdamState(**meta["adam"], t=t, m=groups["adam.m"], v=groups["adam.v"])
    return Checkpoint(
        config=run_config_from_dict(meta["config"], seed=meta["seed"]),
        params=groups["param"],
        buffers=groups["buffer"],
        optimizer=opt,
        epoch=int(meta["epoch"]),
        seed=int(meta["seed"]),
        history=[EpochRecord(**r) for r in meta["history"]],
        labels=LabelSet(tuple(meta["labels"])),
    )


def model_state(model: HybridDenseSwin) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    params = {n: p.data.copy() for n, p in model.named_parameters()}
    buffers = {n: b.copy() for n, b in model.named_buffers()}
    return params, buffers


def restore_model(model: HybridDenseSwin, params: dict, buffers: dict) -> None:
    reg = model.registry()
    if set(reg) != set(params):
        missing = sorted(set(reg) - set(params))[:3]
        extra = sorted(set(params) - set(reg))[:3]
        raise CheckpointError(f"parameter names differ from the model (missing {missing}, unexpected {extra})")
    for name, p in reg.items():
        p.assign(params[name])
    bufs = dict(model.named_buffers())
    if set(bufs) != set(buffers):
        raise CheckpointError("buffer names differ from the model")
    for name, arr in bufs.items():
        arr[...] = buffers[name]


def model_from_checkpoint(ck: Checkpoint) -> HybridDenseSwin:
    model = HybridDenseSwin(ck.config.model, seed=ck.seed)
    restore_model(model, ck.params, ck.buffers)
    return model.eval()


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def dropout_rng(seed: int, epoch: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, step, 0xD0]))


def predict_logits(model: HybridDenseSwin, images: np.ndarray, batch_size: int = 16, with_features: bool = False):
    """Eval-mode logits (and fused features) for ``[N, 3, H, W]`` images."""
    model.eval()
    logits, feats = [], []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            x = Tensor(images[start : start + batch_size])
            lg, ft = model.forward_with_features(x)
            logits.append(lg.data)
            feats.append(ft.data)
    logits = np.concatenate(logits)
    return (logits, np.concatenate(feats)) if with_features else logits


def accuracy(model: HybridDenseSwin, data: ImageSet, batch_size: int = 16) -> float:
    preds = predict_logits(model, data.images[data.sources], batch_size).argmax(axis=1)
    return float(np.mean(preds == data.labels))


def mean_loss(model: HybridDenseSwin, data: ImageSet, batch_size: int = 16) -> float:
    logits = predict_logits(model, data.images[data.sources], batch_size)
    with T.no_grad():
        return float(cross_entropy(Tensor(logits, dtype=np.float64), data.labels).item())


def train_step(model, images, labels, state, lr, rng) -> tuple[float, int]:
    """One optimiser step; returns (summed loss, correct count) for the batch."""
    params = model.registry()
    model.train()
    with T.use_tape() as tape:
        logits = model(Tensor(images), rng)
        loss = cross_entropy(logits, labels)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"loss became {value}")
        grads = T.backward(loss, tape=tape, wrt=params.values())
    adam_step(params, {n: grads[p.node_id].data for n, p in params.items()}, state, lr)
    correct = int(np.sum(logits.data.argmax(axis=1) == labels))
    return value * len(labels), correct


def log_csv(history: list[EpochRecord], with_test: bool) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["epoch", "lr", "train_loss", "train_acc"] + (["test_acc"] if with_test else [])
    w.writerow(header)
    for r in history:
        row = [r.epoch, repr(r.lr), repr(r.train_loss), repr(r.train_acc)]
        if with_test:
            row.append("" if r.test_acc is None else repr(r.test_acc))
        w.writerow(row)
    return buf.getvalue()


@dataclass
class Datasets:
    train: ImageSet
    test: ImageSet | None = None


def prepare_data(cfg: RunConfig, out_dir: Path) -> Datasets:
    """Load (or synthesize) the manifest, split it and decode both splits."""
    if cfg.data.manifest is None:
        path = generate_synthetic(out_dir / "synthetic", cfg.data.synthetic_per_class, cfg.seed, cfg.model.image_size)
    else:
        path = Path(cfg.data.manifest)
    manifest = stratified_split(read_manifest(path), cfg.data.test_fraction, cfg.seed)
    train_m = manifest.split("train")
    if cfg.data.oversample:
        train_m = minority_oversample(train_m, cfg.data.balance_factor)
    test_m = manifest.split("test")
    size = cfg.data.input_size or cfg.model.image_size
    return Datasets(load_split(train_m, size), load_split(test_m, size) if len(test_m) else None)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: HybridDenseSwin
    history: list[EpochRecord]


def train(
    cfg: RunConfig,
    out_dir,
    *,
    data: Datasets | None = None,
    resume: Checkpoint | str | Path | None = None,
    epochs: int | None = None,
    progress: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Run the recipe in ``cfg`` and write artifacts under ``out_dir``.

    Writes ``resolved_config.json``, ``train_log.csv`` (rewritten after every
    epoch), ``ckpt_epochNNNN.hdsw`` every ``checkpoint_every`` epochs and
    ``final.hdsw``. ``train_acc`` is the eval-mode accuracy on the
    unaugmented train split at the end of each epoch. A non-finite loss
    aborts with :class:`NumericError`; checkpoints already written are kept.
    """
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(cfg.to_json(), encoding="utf-8")
    data = data or prepare_data(cfg, out)
    if len(data.train) == 0:
        raise ContractError("train split is empty")
    tc = cfg.train
    total = tc.epochs if epochs is None else epochs
    seed = cfg.seed

    model = HybridDenseSwin(cfg.model, seed=seed)
    state = AdamState.from_config(tc)
    history: list[EpochRecord] = []
    start = 0
    if resume is not None:
        ck = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        if ck.config.model.to_dict() != cfg.model.to_dict():
            raise CheckpointError("checkpoint model config differs from the run config")
        restore_model(model, ck.params, ck.buffers)
        state = AdamState(
            ck.optimizer.beta1, ck.optimizer.beta2, ck.optimizer.eps, ck.optimizer.weight_decay,
            ck.optimizer.t, {k: v.copy() for k, v in ck.optimizer.m.items()}, {k: v.copy() for k, v in ck.optimizer.v.items()},
        )
        history = list(ck.history)
        start = ck.epoch

    sched = LrSchedule.from_config(tc)
    aug = cfg.data.augmentation
    with_test = tc.eval_test and data.test is not None

    def snapshot(epoch: int) -> Checkpoint:
        params, buffers = model_state(model)
        opt = AdamState(state.beta1, state.beta2, state.eps, state.weight_decay, state.t,
                        {k: v.copy() for k, v in state.m.items()}, {k: v.copy() for k, v in state.v.items()})
        return Checkpoint(cfg, params, buffers, opt, epoch, seed, list(history))

    for epoch in range(start, total):
        lr = lr_at(epoch, sched)
        loss_sum, n = 0.0, 0
        batches = batch_iterator(data.train, tc.batch_size, seed, epoch, aug)
        for step, (images, labels) in enumerate(batches):
            try:
                s, _ = train_step(model, images, labels, state, lr, dropout_rng(seed, epoch, step))
            except NumericError as e:
                raise NumericError(f"epoch {epoch} step {step}: {e}; last checkpoints in {out} are kept") from e
            loss_sum += s
            n += len(labels)
        rec = EpochRecord(epoch, lr, loss_sum / n, accuracy(model, data.train, tc.batch_size))
        if with_test:
            rec.test_acc = accuracy(model, data.test, tc.batch_size)
        history.append(rec)
        (out / "train_log.csv").write_text(log_csv(history, with_test), encoding="utf-8")
        log.info("epoch %d lr %.3g loss %.4f acc %.4f", epoch, lr, rec.train_loss, rec.train_acc)
        if progress is not None:
            progress(rec)
        done = epoch + 1
        if tc.checkpoint_every and done % tc.checkpoint_every == 0:
            save_checkpoint(out / f"ckpt_epoch{done:04d}.hdsw", snapshot(done))

    final = snapshot(max(total, start))
    save_checkpoint(out / "final.hdsw", final)
    if not history:
        (out / "train_log.csv").write_text(log_csv(history, with_test), encoding="utf-8")
    return TrainResult(final, model, history)
