"""Generational training: a patriarch, then students distilled from their
predecessor, with checkpoints, resumable process directories and
softmax-averaging ensembles.

Process directory layout::

    out/
      config.json          resolved ProcessConfig plus data fingerprint
      manifest.json        completed generation indices (resume marker)
      gen_00/              patriarch
        best.ckpt  last.ckpt
        epochs.jsonl       one line per epoch, fixed field order
        record.json        GenerationRecord
      gen_01/ ...
      process.json         ProcessRecord, written when all generations finish
"""
from dataclasses import dataclass, field
import json
import logging
import os
import zlib

import numpy as np

from . import data as data_mod
from .core import Tape, no_grad_softmax
from .losses import LossConfig, confidence_ranking, eta_from_u, student_loss
from .model import (
    MlpSpec,
    SgdConfig,
    SgdState,
    forward,
    init_params,
    load_checkpoint,
    predict_logits,
    save_checkpoint,
    sgd_step,
)

log = logging.getLogger(__name__)

PROCESS_FORMAT_VERSION = 1
EPOCH_FIELDS = ("epoch", "lr", "loss", "train_acc", "test_acc")
# desk-scale MLPs on the synthetic hierarchy train stably at half the usual 0.1
DEFAULT_LR = 0.05


class ProcessStateError(RuntimeError):
    pass


def derive_seed(*keys):
    """Deterministic 63-bit seed from a tuple of non-negative integers."""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def epoch_order(seed, generation, epoch, n):
    return np.random.default_rng(np.random.SeedSequence([seed, generation, 1, epoch])).permutation(n)


@dataclass(frozen=True)
class ProcessConfig:
    """One run of the process D(u, lambda).

    ``u`` is the TSD patriarch's target top-1 confidence; ``u >= 1`` means a
    plain cross-entropy patriarch. ``lam`` weights cross-entropy against the
    teacher KL term for every student generation.
    """

    u: float = 0.6
    lam: float = 0.6
    K: int = 5
    generations: int = 5
    patriarch: str = "TSD"
    hidden_dims: tuple = (32,)
    sgd: SgdConfig = field(default_factory=lambda: SgdConfig.for_epochs(200, base_lr=DEFAULT_LR))
    seed: int = 0
    eps: float = 0.1
    beta: float = 0.1
    teacher_checkpoint: str = "last"
    include_patriarch_in_ensemble: bool = False
    cache_teacher: bool = False

    def __post_init__(self):
        object.__setattr__(self, "patriarch", self.patriarch.upper())
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not 0.0 < self.u <= 1.0:
            raise ValueError(f"u must lie in (0, 1], got {self.u}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.K < 2 or self.generations < 0:
            raise ValueError("need K >= 2 and a non-negative generation count")
        if self.patriarch not in ("BL", "LSR", "CP", "TSD"):
            raise ValueError(f"unknown patriarch kind {self.patriarch!r}")
        if self.teacher_checkpoint not in ("best", "last"):
            raise ValueError("teacher_checkpoint must be 'best' or 'last'")

    def patriarch_loss(self):
        if self.patriarch == "TSD" and self.u < 1.0:
            return LossConfig("TSD", eta=eta_from_u(self.u, self.K), K=self.K)
        if self.patriarch == "LSR":
            return LossConfig("LSR", eps=self.eps)
        if self.patriarch == "CP":
            return LossConfig("CP", beta=self.beta)
        return LossConfig("BL")

    def model_spec(self, input_dim, num_classes, generation):
        return MlpSpec(input_dim, self.hidden_dims, num_classes, seed=derive_seed(self.seed, generation, 0))

    def to_dict(self):
        return {
            "u": self.u,
            "lam": self.lam,
            "K": self.K,
            "generations": self.generations,
            "patriarch": self.patriarch,
            "hidden_dims": list(self.hidden_dims),
            "sgd": self.sgd.to_dict(),
            "seed": self.seed,
            "eps": self.eps,
            "beta": self.beta,
            "teacher_checkpoint": self.teacher_checkpoint,
            "include_patriarch_in_ensemble": self.include_patriarch_in_ensemble,
            "cache_teacher": self.cache_teacher,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["sgd"] = SgdConfig.from_dict(d["sgd"])
        d["hidden_dims"] = tuple(d["hidden_dims"])
        return cls(**d)


@dataclass
class FitResult:
    best_params: object
    best_epoch: int
    last_params: object
    history: list


def accuracy(probs_or_logits, labels):
    """Top-1 accuracy; ties resolve to the lower class id."""
    pred = confidence_ranking(probs_or_logits, 1).indices[:, 0]
    return float(np.mean(pred == labels))


def fit(params, train, test, loss_fn, sgd, seed=0, generation=0, on_epoch=None):
    """Mini-batch SGD over ``train``; tracks the best epoch by test accuracy.

    ``loss_fn(logits, labels, index)`` gets the batch logits, labels and the
    row indices of the batch within ``train``.
    """
    x, y = train.x, train.y
    xt, yt = test.x, test.y
    n = len(train)
    state = SgdState()
    tensors = params.tensors()
    best_acc, best_epoch, best = -1.0, -1, None
    history = []
    for epoch in range(sgd.epochs):
        order = epoch_order(seed, generation, epoch, n)
        total, seen = 0.0, 0
        for start in range(0, n, sgd.batch_size):
            idx = order[start : start + sgd.batch_size]
            with Tape() as tape:
                loss = loss_fn(forward(params, x[idx]), y[idx], idx)
            tape.backward(loss)
            sgd_step(params, [t.grad for t in tensors], state, sgd, epoch)
            total += loss.item() * idx.size
            seen += idx.size
        row = {
            "epoch": epoch,
            "lr": sgd.lr_at(epoch),
            "loss": total / seen,
            "train_acc": accuracy(predict_logits(params, x), y),
            "test_acc": accuracy(predict_logits(params, xt), yt),
        }
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        if row["test_acc"] > best_acc:
            best_acc, best_epoch, best = row["test_acc"], epoch, params.copy()
    return FitResult(best, best_epoch, params, history)


@dataclass
class GenerationRecord:
    m: int
    best_epoch: int
    best_train_acc: float
    best_test_acc: float
    last_train_acc: float
    last_test_acc: float
    train_top1_confidence: float
    best_checkpoint: str = None
    last_checkpoint: str = None
    loss_curve: list = field(default_factory=list)

    def to_dict(self):
        return {
            "m": self.m,
            "best_epoch": self.best_epoch,
            "best_train_acc": self.best_train_acc,
            "best_test_acc": self.best_test_acc,
            "last_train_acc": self.last_train_acc,
            "last_test_acc": self.last_test_acc,
            "train_top1_confidence": self.train_top1_confidence,
            "best_checkpoint": self.best_checkpoint,
            "last_checkpoint": self.last_checkpoint,
            "loss_curve": list(self.loss_curve),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ProcessRecord:
    config: ProcessConfig
    generations: list
    ensemble_test_acc: list

    def to_dict(self):
        return {
            "format_version": PROCESS_FORMAT_VERSION,
            "config": self.config.to_dict(),
            "generations": [g.to_dict() for g in self.generations],
            "ensemble_test_acc": list(self.ensemble_test_acc),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            ProcessConfig.from_dict(d["config"]),
            [GenerationRecord.from_dict(g) for g in d["generations"]],
            list(d["ensemble_test_acc"]),
        )


def _record_from_fit(m, res, train, out_dir=None):
    best_row = res.history[res.best_epoch]
    last_row = res.history[-1]
    conf = confidence_ranking(no_grad_softmax(predict_logits(res.last_params, train.x)), 1).values
    rec = GenerationRecord(
        m=m,
        best_epoch=res.best_epoch,
        best_train_acc=best_row["train_acc"],
        best_test_acc=best_row["test_acc"],
        last_train_acc=last_row["train_acc"],
        last_test_acc=last_row["test_acc"],
        train_top1_confidence=float(conf.mean()),
        loss_curve=[row["loss"] for row in res.history],
    )
    if out_dir is not None:
        # paths are stored relative to the process directory (parent of out_dir)
        os.makedirs(out_dir, exist_ok=True)
        name = os.path.basename(os.path.normpath(out_dir))
        rec.best_checkpoint = f"{name}/best.ckpt"
        rec.last_checkpoint = f"{name}/last.ckpt"
        save_checkpoint(os.path.join(out_dir, "best.ckpt"), res.best_params, m, res.best_epoch, "best")
        save_checkpoint(os.path.join(out_dir, "last.ckpt"), res.last_params, m, len(res.history) - 1, "last")
        with open(os.path.join(out_dir, "epochs.jsonl"), "w") as f:
            for row in res.history:
                f.write(json.dumps({k: row[k] for k in EPOCH_FIELDS}) + "\n")
        with open(os.path.join(out_dir, "record.json"), "w") as f:
            json.dump(rec.to_dict(), f, indent=1)
    return rec


def train_patriarch(cfg, train, test, out_dir=None, return_fit=False):
    """Generation 0, supervised by the labels through the patriarch loss."""
    params = init_params(cfg.model_spec(train.dim, train.num_classes, 0))
    loss_cfg = cfg.patriarch_loss()
    res = fit(params, train, test, lambda z, y, idx: loss_cfg(z, y), cfg.sgd, cfg.seed, 0)
    rec = _record_from_fit(0, res, train, out_dir)
    return (rec, res) if return_fit else rec


def train_generation(m, teacher, cfg, train, test, out_dir=None, return_fit=False):
    """Generation ``m >= 1``: fresh student distilled from a frozen teacher.

    ``teacher`` is a checkpoint path or :class:`ModelParams`; its outputs are
    recomputed per batch unless ``cfg.cache_teacher`` is set.
    """
    if m < 1:
        raise ValueError("student generations start at m = 1")
    teacher = as_params(teacher)
    params = init_params(cfg.model_spec(train.dim, train.num_classes, m))
    x = train.x
    cached = no_grad_softmax(predict_logits(teacher, x)) if cfg.cache_teacher else None
    lam = cfg.lam

    def loss_fn(z, y, idx):
        t = cached[idx] if cached is not None else no_grad_softmax(predict_logits(teacher, x[idx]))
        return student_loss(z, y, t, lam)

    res = fit(params, train, test, loss_fn, cfg.sgd, cfg.seed, m)
    rec = _record_from_fit(m, res, train, out_dir)
    return (rec, res) if return_fit else rec


def as_params(ckpt):
    if isinstance(ckpt, (str, os.PathLike)):
        if not os.path.exists(ckpt):
            raise FileNotFoundError(f"checkpoint not found: {ckpt}")
        return load_checkpoint(ckpt)[0]
    return ckpt


def ensemble_predict(checkpoints, x):
    """Arithmetic mean of each model's softmax, accumulated in list order."""
    models = [as_params(c) for c in checkpoints]
    if not models:
        raise ValueError("ensemble needs at least one checkpoint")
    spec0 = models[0].spec
    for mdl in models[1:]:
        if (mdl.spec.input_dim, mdl.spec.hidden_dims, mdl.spec.num_classes) != (
            spec0.input_dim,
            spec0.hidden_dims,
            spec0.num_classes,
        ):
            raise ValueError(f"spec mismatch in ensemble: {mdl.spec} vs {spec0}")
    total = None
    for mdl in models:
        p = no_grad_softmax(predict_logits(mdl, x))
        total = p if total is None else total + p
    return total / len(models)


def evaluate(checkpoints, data, ks=(1, 5)):
    """Top-k accuracies of one model, an ensemble, or a probability matrix."""
    if isinstance(checkpoints, np.ndarray):
        probs = checkpoints
    else:
        if not isinstance(checkpoints, (list, tuple)):
            checkpoints = [checkpoints]
        probs = ensemble_predict(checkpoints, data.x)
    return topk_accuracy(probs, data.y, ks)


def topk_accuracy(probs, labels, ks=(1, 5)):
    c = probs.shape[1]
    kmax = min(max(ks), c)
    ranked = confidence_ranking(probs, kmax).indices
    hits = ranked == np.asarray(labels)[:, None]
    return {f"top{k}": float(np.mean(hits[:, : min(k, c)].any(axis=1))) for k in ks}


def data_fingerprint(train, test):
    return zlib.crc32(data_mod._pack(test), zlib.crc32(data_mod._pack(train)))


def _gen_dir(out_dir, m):
    return os.path.join(out_dir, f"gen_{m:02d}")


def _write_json(path, obj):
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(obj, f, indent=1)
    os.replace(tmp, path)


def run_process(cfg, train, test, out_dir, resume=False):
    """Patriarch plus ``cfg.generations`` students, persisted under ``out_dir``.

    With ``resume=True`` completed generations are loaded from disk and never
    retrained. Returns the :class:`ProcessRecord`.
    """
    manifest_path = os.path.join(out_dir, "manifest.json")
    config_path = os.path.join(out_dir, "config.json")
    snapshot = {"config": cfg.to_dict(), "data_fingerprint": data_fingerprint(train, test)}
    completed = []
    if os.path.exists(manifest_path):
        if not resume:
            raise ProcessStateError(f"{out_dir} already holds a process; pass resume=True")
        with open(config_path) as f:
            if json.load(f) != snapshot:
                raise ProcessStateError(f"{out_dir}: config or data differ from the stored run")
        with open(manifest_path) as f:
            completed = json.load(f)["completed"]
    elif os.path.isdir(out_dir) and os.listdir(out_dir) and not resume:
        raise ProcessStateError(f"{out_dir} exists and is not empty")
    os.makedirs(out_dir, exist_ok=True)
    _write_json(config_path, snapshot)

    records = []
    for m in range(cfg.generations + 1):
        gdir = _gen_dir(out_dir, m)
        if m in completed:
            with open(os.path.join(gdir, "record.json")) as f:
                records.append(GenerationRecord.from_dict(json.load(f)))
            continue
        log.info("training generation %d of %d", m, cfg.generations)
        if m == 0:
            rec = train_patriarch(cfg, train, test, gdir)
        else:
            prev = records[m - 1]
            rel = prev.last_checkpoint if cfg.teacher_checkpoint == "last" else prev.best_checkpoint
            teacher = os.path.join(out_dir, rel)
            rec = train_generation(m, teacher, cfg, train, test, gdir)
        records.append(rec)
        completed.append(m)
        _write_json(manifest_path, {"format_version": PROCESS_FORMAT_VERSION, "completed": completed})

    first = 0 if cfg.include_patriarch_in_ensemble else 1
    members = [os.path.join(out_dir, r.last_checkpoint) for r in records[first:]]
    ens = prefix_ensemble_accuracy(members, test)
    record = ProcessRecord(cfg, records, ens)
    _write_json(os.path.join(out_dir, "process.json"), record.to_dict())
    return record


def prefix_ensemble_accuracy(checkpoints, data):
    """Top-1 accuracy of the ensembles of the first 1, 2, ... checkpoints."""
    out, total = [], None
    for i, c in enumerate(checkpoints):
        p = no_grad_softmax(predict_logits(as_params(c), data.x))
        total = p if total is None else total + p
        out.append(accuracy(total / (i + 1), data.y))
    return out


def load_process(out_dir):
    with open(os.path.join(out_dir, "process.json")) as f:
        return ProcessRecord.from_dict(json.load(f))
