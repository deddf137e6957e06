"""Joint training for the standard model and alternating adversarial training."""

from __future__ import annotations

import copy
import json
import logging
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .corpus import Corpus
from .model import (AdversarialModel, LossWeights, StandardModel, batches, encode_corpus,
                    language_loss, loss_task1)
from .nn import Adam, NonFiniteError, noam_lr, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    K: int = 60
    batch_size: int = 16
    noam_scale: float = 0.1
    noam_warmup: int = 400
    weights: LossWeights | None = None  # None: chosen from the number of languages
    patience: int = 10
    seed: int = 0
    eval_every: int = 1
    eval_batch_size: int = 128
    parity_mode: bool = False
    update_all_weights: bool = False
    check_gating: bool = False
    # "slu": dev L_2 without the -beta_d L_d term; "full": the literal dev L_2
    selection: str = "slu"

    def __post_init__(self):
        if self.K < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("K, batch_size and patience must all be >= 1")
        if self.selection not in ("slu", "full"):
            raise ValueError(f"selection must be 'slu' or 'full', got {self.selection!r}")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)

    @classmethod
    def reference_defaults(cls, n_languages: int, **kw) -> "TrainConfig":
        """Full-size settings: batch 32, 180 epochs, weights by language count."""
        kw.setdefault("weights", LossWeights.for_languages(n_languages))
        return cls(K=180, batch_size=32, parity_mode=True, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


@dataclass
class TaskCounters:
    epochs_task1: int = 0
    epochs_task2: int = 0
    global_step: int = 0


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def append(self, rec: dict):
        for k, v in rec.items():
            if isinstance(v, float) and not np.isfinite(v):
                raise NonFiniteError(f"non-finite {k} in epoch record {rec.get('epoch')}")
        self.records.append(rec)

    def task2(self) -> list[dict]:
        return [r for r in self.records if r["task"] == 2]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path):
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")


def select_checkpoint(log: TrainLog, key: str = "dev_loss") -> int:
    """Epoch index (1-based within Task 2) of the minimal ``key``; ties go to the earliest."""
    recs = log.task2()
    if not recs:
        raise ValueError("no Task-2 epochs recorded")
    losses = [r[key] for r in recs]
    return int(np.argmin(losses)) + 1


def pick_task(rng: random.Random, counters: TaskCounters, K: int) -> int:
    exhausted = {1: counters.epochs_task1 >= K, 2: counters.epochs_task2 >= K}
    if exhausted[1] and exhausted[2]:
        raise ValueError("both tasks have reached the epoch cap")
    task = 1 if rng.random() < 0.5 else 2
    return (3 - task) if exhausted[task] else task


def _finite(loss: torch.Tensor, what: str, epoch: int) -> float:
    value = float(loss.detach())
    if not np.isfinite(value):
        raise NonFiniteError(f"non-finite {what} at epoch {epoch}")
    return value


def _snapshot(model):
    return {n: p.detach().clone() for n, p in model.named_parameters()}


def _changed(model, before) -> set[str]:
    return {n for n, p in model.named_parameters() if not torch.equal(p.detach(), before[n])}


class _Stream:
    """Task-private shuffled pass over the training items."""

    def __init__(self, items, seed):
        self.items = items
        self.rng = np.random.default_rng(seed)

    def epoch(self, batch_size):
        order = self.rng.permutation(len(self.items))
        return batches([self.items[i] for i in order], batch_size)


def _dev_loss(model, dev_items, cfg: TrainConfig, weights=None) -> float:
    model.eval()
    total, n = 0.0, 0
    with torch.no_grad():
        for batch in batches(dev_items, cfg.eval_batch_size):
            if isinstance(model, AdversarialModel):
                loss = model.loss(batch, weights, train=False)
            else:
                loss = model.loss(batch, train=False)
            total += loss.item() * len(batch)
            n += len(batch)
    return total / n


def _save(model, out_dir, cfg, step, name="model.ckpt"):
    if out_dir is None:
        return
    save_checkpoint(Path(out_dir) / name, model.param_groups(), cfg.seed, step,
                    {**model.describe(), "train_config": cfg.to_dict()})


def train_standard(model: StandardModel, train: Corpus, dev: Corpus, cfg: TrainConfig, out_dir=None):
    """Minimise ``L_i + L_s`` with Adam and the Noam schedule; keep the best dev epoch."""
    if len(train) == 0:
        raise ValueError("empty training corpus")
    if len(dev) == 0:
        raise ValueError("empty dev corpus")
    torch.manual_seed(cfg.seed)
    train_items = encode_corpus(train, model.vocab)
    dev_items = encode_corpus(dev, model.vocab)
    stream = _Stream(train_items, [cfg.seed, 1])
    opt = Adam(model.named_parameters())
    d_model = model.config.d_model
    log_ = TrainLog()
    best, best_state, bad, step = float("inf"), None, 0, 0

    for epoch in range(1, cfg.K + 1):
        model.train()
        sums, n = {"L": 0.0, "L_i": 0.0, "L_s": 0.0}, 0
        for batch in stream.epoch(cfg.batch_size):
            step += 1
            lr = noam_lr(step, d_model, cfg.noam_warmup, cfg.noam_scale)
            opt.zero_grad()
            loss, parts = model.loss(batch, train=True, parts=True)
            _finite(loss, "training loss", epoch)
            loss.backward()
            opt.step(lr)
            sums["L"] += loss.item() * len(batch)
            sums["L_i"] += parts["L_i"].item() * len(batch)
            sums["L_s"] += parts["L_s"].item() * len(batch)
            n += len(batch)
        dev_loss = _dev_loss(model, dev_items, cfg)
        log_.append({"epoch": epoch, "task": 2, "global_step": step, "lr": lr,
                     "dev_loss": dev_loss, "dev_select": dev_loss,
                     **{f"train_{k}": v / n for k, v in sums.items()}})
        if dev_loss < best:
            best, bad = dev_loss, 0
            best_state = copy.deepcopy(model.state_dict())
            _save(model, out_dir, cfg, step)
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    return model, log_


def train_adversarial(model: AdversarialModel, train: Corpus, dev: Corpus, cfg: TrainConfig, out_dir=None):
    """Alternate between discriminator epochs (Task 1) and model epochs (Task 2).

    Task 1 moves only the discriminator head against ``alpha_d L_d``; Task 2
    moves everything else against ``L_2``. The returned model is the Task-2
    epoch with the lowest dev ``L_2``.
    """
    if len(train.languages) < 2:
        raise ValueError("adversarial training needs at least two languages in the training corpus")
    if len(dev) == 0:
        raise ValueError("empty dev corpus")
    weights = cfg.weights or LossWeights.for_languages(len(model.vocab.language_to_id))
    torch.manual_seed(cfg.seed)
    train_items = encode_corpus(train, model.vocab)
    dev_items = encode_corpus(dev, model.vocab)
    streams = {1: _Stream(train_items, [cfg.seed, 1]), 2: _Stream(train_items, [cfg.seed, 2])}
    task_rng = random.Random(cfg.seed)
    opt = Adam(model.named_parameters())
    disc = model.discriminator_params()
    gate = {
        1: (lambda name: True) if cfg.update_all_weights else (lambda name: name in disc),
        2: (lambda name: True) if cfg.update_all_weights else (lambda name: name not in disc),
    }
    d_model = model.config.d_model
    counters = TaskCounters()
    log_ = TrainLog()
    best, best_state, bad = float("inf"), None, 0

    while counters.epochs_task1 < cfg.K or counters.epochs_task2 < cfg.K:
        task = pick_task(task_rng, counters, cfg.K)
        before = _snapshot(model) if cfg.check_gating else None
        model.train()
        sums, n = {}, 0
        for batch in streams[task].epoch(cfg.batch_size):
            counters.global_step += 1
            lr = noam_lr(counters.global_step, d_model, cfg.noam_warmup, cfg.noam_scale)
            opt.zero_grad()
            if task == 1 and not cfg.update_all_weights:
                logits = model.discriminator_forward(batch, train=True)
                loss, parts = weights.alpha_d * language_loss(logits, batch), {}
            elif task == 1:
                loss, parts = loss_task1(model(batch, train=True), batch.languages, weights), {}
            else:
                loss, parts = model.loss(batch, weights, train=True, parts=True)
            epoch_no = counters.epochs_task1 + counters.epochs_task2 + 1
            _finite(loss, f"L_{task}", epoch_no)
            loss.backward()
            opt.step(lr, gate[task])
            sums[f"L_{task}"] = sums.get(f"L_{task}", 0.0) + loss.item() * len(batch)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v.item() * len(batch)
            n += len(batch)

        if task == 1:
            counters.epochs_task1 += 1
        else:
            counters.epochs_task2 += 1
        rec = {"epoch": counters.epochs_task1 + counters.epochs_task2, "task": task,
               "task_epoch": counters.epochs_task1 if task == 1 else counters.epochs_task2,
               "global_step": counters.global_step, "lr": lr,
               **{f"train_{k}": v / n for k, v in sums.items()}}
        if before is not None:
            changed = _changed(model, before)
            expected = disc if task == 1 else set(before) - disc
            if not cfg.update_all_weights and changed != expected:
                raise AssertionError(f"task {task} gating violated: unexpected={sorted(changed - expected)[:5]} "
                                     f"untouched={sorted(expected - changed)[:5]}")
            rec["changed_groups"] = sorted({model.group_of(nm) for nm in changed})

        stop = False
        if task == 2:
            dev_loss, dev_parts = _dev_parts(model, dev_items, cfg, weights)
            rec["dev_loss"] = dev_loss
            rec.update({f"dev_{k}": v for k, v in dev_parts.items()})
            # L_d is unbounded above, so the literal L_2 rewards fooled discriminators
            score = dev_loss if cfg.selection == "full" else dev_loss + weights.beta_d * dev_parts["L_d"]
            rec["dev_select"] = score
            if score < best:
                best, bad = score, 0
                best_state = copy.deepcopy(model.state_dict())
                _save(model, out_dir, cfg, counters.global_step)
            else:
                bad += 1
                stop = bad >= cfg.patience
        log_.append(rec)
        if stop:
            break

    if best_state is None:
        raise RuntimeError("no Task-2 epoch was run")
    model.load_state_dict(best_state)
    model.eval()
    return model, log_


def _dev_parts(model, dev_items, cfg, weights):
    model.eval()
    sums, n = {}, 0
    with torch.no_grad():
        for batch in batches(dev_items, cfg.eval_batch_size):
            total, parts = model.loss(batch, weights, train=False, parts=True)
            for k, v in {"L_2": total, **parts}.items():
                sums[k] = sums.get(k, 0.0) + v.item() * len(batch)
            n += len(batch)
    means = {k: v / n for k, v in sums.items()}
    return means.pop("L_2"), means


def train_model(model, train: Corpus, dev: Corpus, cfg: TrainConfig, out_dir=None):
    if isinstance(model, AdversarialModel):
        return train_adversarial(model, train, dev, cfg, out_dir)
    return train_standard(model, train, dev, cfg, out_dir)
