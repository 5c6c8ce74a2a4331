"""Bilevel training loop: Shapley selection, inner BPR updates, policy updates."""

from __future__ import annotations

import copy
import dataclasses
import itertools
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import adapter, metrics
from . import valuator as val
from .data import make_batch
from .exceptions import ConfigError, DVRError, NumericError
from .recmodel import AdamState, apply_selected_update, init_model, init_optimizer, triplet_losses

_logger = logging.getLogger(__name__)

TRACE_FIELDS = (
    "epoch", "iteration", "train_loss", "mse_loss", "reward", "cost", "delta",
    "mean_w", "selected_frac", "val_recall", "val_ndcg", "wall_ms",
)
COSINE_FIELDS = ("epoch", "cosine", "batches")


@dataclass
class TrainConfig:
    seed: int = 0
    d: int = 64
    backbone: str = "mf"
    layers: int = 2
    lr: float | list = 1e-3
    weight_decay: float | list = 1e-5
    valuator_lr: float = 1e-3
    outer_batch: int = 256
    inner_batch: int = 256
    inner_iters: int = 1
    baseline_window: int = 20
    epochs: int = 10
    outer_iterations: int | None = None
    pretrain_epochs: int = 0
    k: int = 20
    metric: str = "ndcg"
    valuator: bool = True
    n_blocks: int = 2
    widths: list | None = None
    tau: int | list | None = None
    epsilon: float = 0.05
    shapley_sign: int = 1
    patience: int = 5
    eval_every: int = 1
    reward_users: int = 256
    negatives_exclude: str = "train"
    cosine_every: int = 2
    max_batch: int = 4096
    deterministic: bool = True

    def __post_init__(self):
        self.validate()

    @property
    def direction(self):
        return adapter.direction_of(self.metric)

    def validate(self):
        positive = ("d", "outer_batch", "inner_batch", "inner_iters", "baseline_window", "k",
                    "n_blocks", "patience", "eval_every", "reward_users", "cosine_every", "max_batch")
        for name in positive:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("epochs", "pretrain_epochs"):
            if int(getattr(self, name)) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.outer_iterations is not None and self.outer_iterations < 0:
            raise ConfigError("outer_iterations must be non-negative")
        if self.inner_batch > self.outer_batch:
            raise ConfigError("inner_batch must not exceed outer_batch")
        if self.outer_batch > self.max_batch:
            raise ConfigError(f"outer_batch exceeds the hard cap of {self.max_batch}")
        adapter.direction_of(self.metric)
        if self.backbone not in ("mf", "lightgcn"):
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.negatives_exclude not in ("train", "all"):
            raise ConfigError("negatives_exclude must be 'train' or 'all'")
        if self.shapley_sign not in (1, -1):
            raise ConfigError("shapley_sign must be +1 or -1")
        if not 0 < self.epsilon < 0.5:
            raise ConfigError("epsilon must lie in (0, 0.5)")
        for name in ("lr", "weight_decay"):
            vals = getattr(self, name)
            vals = vals if isinstance(vals, (list, tuple)) else [vals]
            if not vals or any(float(v) < 0 for v in vals):
                raise ConfigError(f"{name} must be non-negative")
        if float(self.valuator_lr) <= 0:
            raise ConfigError("valuator_lr must be positive")

    @classmethod
    def from_dict(cls, raw):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self):
        return dataclasses.asdict(self)

    def grid(self):
        """Expand list-valued lr / weight_decay into one config per combination."""
        lrs = self.lr if isinstance(self.lr, (list, tuple)) else [self.lr]
        wds = self.weight_decay if isinstance(self.weight_decay, (list, tuple)) else [self.weight_decay]
        for lr, wd in itertools.product(lrs, wds):
            yield dataclasses.replace(self, lr=float(lr), weight_decay=float(wd))


def rng_streams(seed):
    """Independent generators for init, data sampling, selection and evaluation."""
    init, data, select, evaluation = np.random.SeedSequence(seed).spawn(4)
    return {
        "init": np.random.default_rng(init),
        "data": np.random.default_rng(data),
        "select": np.random.default_rng(select),
        "eval": np.random.default_rng(evaluation),
    }


@dataclass
class RunState:
    epoch: int = 0
    iteration: int = 0
    pretrain_epochs_done: int = 0
    best_metric: float | None = None
    best_epoch: int | None = None
    patience_count: int = 0
    stopped: bool = False
    cosine_sum: float = 0.0
    cosine_count: int = 0


@dataclass
class TrainResult:
    theta: object
    valuator: object
    trace: list
    cosine: list
    pretrain_losses: list
    best_metric: float | None
    best_epoch: int | None
    state: RunState
    noise_stats: dict = field(default_factory=dict)


class TrainingAborted(DVRError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


def _cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


class Trainer:
    """Stateful driver for pretraining and the bilevel loop.

    ``corruptor`` is an optional callable ``(batch, rng) -> batch`` applied to
    each sampled batch before valuation; it may set ``batch.corrupted`` so the
    trainer can track selection probabilities for clean and corrupted triplets.
    """

    def __init__(self, config, dataset, corruptor=None, clock=time.perf_counter):
        config.validate()
        if isinstance(config.lr, (list, tuple)) or isinstance(config.weight_decay, (list, tuple)):
            raise ConfigError("expand lr / weight_decay grids with TrainConfig.grid() first")
        self.config = config
        self.dataset = dataset
        self.corruptor = corruptor
        self.clock = clock
        self.rngs = rng_streams(config.seed)
        c = config
        self.theta = init_model(
            dataset.n_users, dataset.n_items, d=c.d, backbone=c.backbone, layers=c.layers,
            train_pairs=dataset.train_pairs, rng=self.rngs["init"],
        )
        self.opt = init_optimizer(self.theta, lr=c.lr, weight_decay=c.weight_decay)
        self.valuator = None
        self.mse_opt = self.policy_opt = None
        if c.valuator:
            self.valuator = val.init_valuator(
                c.outer_batch, d=c.d, n_blocks=c.n_blocks, widths=c.widths, tau=c.tau, rng=self.rngs["init"]
            )
            self.mse_opt = AdamState.like(self.valuator.arrays(), lr=c.valuator_lr)
            self.policy_opt = AdamState.like(self.valuator.arrays(), lr=c.valuator_lr)
        self.baseline = adapter.RewardBaseline(0.0, c.baseline_window, c.direction)
        val_users = np.flatnonzero([len(t) > 0 for t in dataset.val_pos])
        if c.reward_users < len(val_users):
            self.reward_users = np.sort(self.rngs["eval"].choice(val_users, size=c.reward_users, replace=False))
        else:
            self.reward_users = val_users
        self.state = RunState()
        self.trace = []
        self.cosine = []
        self.pretrain_losses = []
        self.best = None
        self.noise_w = {"clean_sum": 0.0, "clean_n": 0, "corrupt_sum": 0.0, "corrupt_n": 0}
        self._test_reads = dataset.split_reads["test"]

    # -- bookkeeping -----------------------------------------------------

    @property
    def iters_per_epoch(self):
        return max(1, math.ceil(len(self.dataset.train_pairs) / self.config.outer_batch))

    @property
    def total_iterations(self):
        if self.config.outer_iterations is not None:
            return self.config.outer_iterations
        return self.config.epochs * self.iters_per_epoch

    def _guard_test(self):
        if self.dataset.split_reads["test"] != self._test_reads:
            raise DVRError("test split was read during training")

    # -- pretraining -----------------------------------------------------

    def pretrain(self, epochs=None):
        """Plain BPR epochs (every triplet selected, no valuator)."""
        c = self.config
        epochs = c.pretrain_epochs if epochs is None else epochs
        steps = max(1, math.ceil(len(self.dataset.train_pairs) / c.inner_batch))
        ones = np.ones(c.inner_batch)
        for _ in range(epochs):
            total = 0.0
            for _ in range(steps):
                batch = make_batch(self.dataset, c.inner_batch, self.rngs["data"], c.negatives_exclude, c.max_batch)
                loss = apply_selected_update(self.theta, self.opt, batch, ones, c.inner_batch)
                if not math.isfinite(loss):
                    raise NumericError("pretraining loss diverged")
                total += loss
            self.pretrain_losses.append(total / steps)
            self.state.pretrain_epochs_done += 1
        smooth = np.convolve(self.pretrain_losses, np.ones(10) / 10, mode="valid") if len(self.pretrain_losses) >= 10 else np.array([])
        if len(smooth) > 1 and np.any(np.diff(smooth) > 0):
            _logger.warning("smoothed pretraining loss increased at some point; consider a lower learning rate")
        self._guard_test()
        return self.theta

    # -- one outer iteration ----------------------------------------------

    def _reward(self):
        return self._reward_subset(self.config.metric)

    def _reward_subset(self, metric):
        c = self.config
        ds = self.dataset
        if metric == "loss":
            value = metrics.validation_bpr_loss(self.theta, ds, "val", seed=c.seed, users=self.reward_users)
            return metrics.MetricReport({"loss": value}, split="val", k=c.k)
        lists = metrics.rank_all(self.theta, ds.train_pos, self.reward_users, c.k)
        targets = ds.positives("val")
        cats = ds.catalog.categories
        if metric == "gini":
            exposure = np.zeros(ds.n_items)
            for lst in lists:
                exposure[lst] += 1
            value = metrics.gini_index(exposure)
        else:
            f = {
                "recall": lambda lst, u: metrics.recall_at_k(lst, targets[u]),
                "ndcg": lambda lst, u: metrics.ndcg_at_k(lst, targets[u], c.k),
                "cc": lambda lst, u: metrics.category_coverage(lst, cats, ds.catalog.num_categories),
                "ild": lambda lst, u: metrics.intra_list_distance(lst, cats),
            }[metric]
            vals = [f(lst, u) for lst, u in zip(lists, self.reward_users)]
            vals = [v for v in vals if v is not None]
            value = float(np.mean(vals)) if vals else 0.0
        return metrics.MetricReport({metric: value}, split="val", k=c.k)

    def step(self):
        """Run one outer iteration and return its trace row."""
        c = self.config
        t0 = self.clock()
        batch = make_batch(self.dataset, c.outer_batch, self.rngs["data"], c.negatives_exclude, c.max_batch)
        if self.corruptor is not None:
            batch = self.corruptor(batch, self.rngs["data"])
        row = dict.fromkeys(TRACE_FIELDS, "")
        row["epoch"] = self.state.iteration // self.iters_per_epoch
        row["iteration"] = self.state.iteration

        if self.valuator is not None:
            V = self.valuator
            rf = val.receptive_fields(V)
            trace = val.forward(V, self.theta, batch)
            phi, w_hat = adapter.selection_policy(V, trace, rf, c.epsilon, c.shapley_sign)
            s = adapter.draw_selection(w_hat, self.rngs["select"])
            policy_grads = adapter.grad_log_prob(V, trace, s, rf, c.epsilon, c.shapley_sign)
            losses = triplet_losses(self.theta, batch.users, batch.pos, batch.neg)
            target = float(np.sum(losses))
            mse = val.mse_loss(trace.y_hat, target)
            grads = val.mse_backward(V, trace, target)
            grads.pop("z0")
            self.mse_opt.apply(V.arrays(), grads)
            self.state.cosine_sum += _cosine(phi, -losses)
            self.state.cosine_count += 1
            if batch.corrupted is not None:
                bad = batch.corrupted.astype(bool)
                self.noise_w["clean_sum"] += float(w_hat[~bad].sum())
                self.noise_w["clean_n"] += int((~bad).sum())
                self.noise_w["corrupt_sum"] += float(w_hat[bad].sum())
                self.noise_w["corrupt_n"] += int(bad.sum())
            row.update(mse_loss=mse, mean_w=float(w_hat.mean()), selected_frac=float(s.mean()))
        else:
            s = np.ones(len(batch))

        inner_losses = []
        for _ in range(c.inner_iters):
            if c.inner_batch >= c.outer_batch:
                idx = np.arange(c.outer_batch)
            else:
                idx = self.rngs["data"].choice(c.outer_batch, size=c.inner_batch, replace=False)
            loss = apply_selected_update(self.theta, self.opt, batch.subset(idx), s[idx], c.inner_batch)
            if math.isfinite(loss):
                inner_losses.append(loss)
        row["train_loss"] = float(np.mean(inner_losses)) if inner_losses else ""

        if self.valuator is not None:
            value = self._reward()[c.metric]
            if not math.isfinite(value):
                raise NumericError(f"non-finite reward {value}")
            cost = adapter.to_cost(value, c.direction)
            adapter.reinforce_update(V.arrays(), self.policy_opt, cost, self.baseline, policy_grads)
            adapter.update_baseline(self.baseline, cost)
            for name, arr in V.arrays().items():
                if not np.all(np.isfinite(arr)):
                    raise NumericError(f"valuator parameter {name} diverged")
            row.update(reward=value, cost=cost, delta=self.baseline.delta)

        self.state.iteration += 1
        row["wall_ms"] = 0 if c.deterministic else round(1000 * (self.clock() - t0), 3)
        self.trace.append(row)
        return row

    # -- epoch boundary --------------------------------------------------

    def _end_epoch(self, row):
        c = self.config
        self.state.epoch += 1
        epoch = self.state.epoch
        if epoch % c.eval_every == 0:
            wanted = tuple(dict.fromkeys(("recall", "ndcg", c.metric)))
            report = metrics.evaluate(self.theta, self.dataset, "val", c.k, wanted, seed=c.seed, epoch=epoch,
                                      threads=1 if c.deterministic else None)
            row["val_recall"] = report["recall"]
            row["val_ndcg"] = report["ndcg"]
            value = report[c.metric]
            better = (
                self.state.best_metric is None
                or (value > self.state.best_metric if c.direction == "maximize" else value < self.state.best_metric)
            )
            if better:
                self.state.best_metric = float(value)
                self.state.best_epoch = epoch
                self.state.patience_count = 0
                self.best = (self.theta.copy(), None if self.valuator is None else self.valuator.copy())
            else:
                self.state.patience_count += 1
                if self.state.patience_count >= c.patience:
                    _logger.info("early stopping at epoch %d (best %s at epoch %s)", epoch,
                                 self.state.best_metric, self.state.best_epoch)
                    self.state.stopped = True
        if self.valuator is not None and epoch % c.cosine_every == 0 and self.state.cosine_count:
            self.cosine.append({
                "epoch": epoch,
                "cosine": self.state.cosine_sum / self.state.cosine_count,
                "batches": self.state.cosine_count,
            })
            self.state.cosine_sum = 0.0
            self.state.cosine_count = 0

    def run(self, callback=None, max_iterations=None):
        """Run outer iterations until the budget, early stop, or ``max_iterations``.

        ``callback(trainer, row)`` is invoked after every outer iteration.
        """
        done = 0
        try:
            while not self.state.stopped and self.state.iteration < self.total_iterations:
                if max_iterations is not None and done >= max_iterations:
                    break
                row = self.step()
                done += 1
                if self.state.iteration % self.iters_per_epoch == 0:
                    self._end_epoch(row)
                if callback is not None:
                    callback(self, row)
        except NumericError as exc:
            result = self.result(restore_best=True)
            raise TrainingAborted(f"training aborted: {exc}", result) from exc
        self._guard_test()
        return self.result(restore_best=False)

    def result(self, restore_best=True):
        theta, valuator = self.theta, self.valuator
        if restore_best and self.best is not None:
            theta, valuator = self.best
        stats = {}
        if self.noise_w["clean_n"] and self.noise_w["corrupt_n"]:
            stats = {
                "mean_w_clean": self.noise_w["clean_sum"] / self.noise_w["clean_n"],
                "mean_w_corrupted": self.noise_w["corrupt_sum"] / self.noise_w["corrupt_n"],
            }
        return TrainResult(theta, valuator, self.trace, self.cosine, self.pretrain_losses,
                           self.state.best_metric, self.state.best_epoch, copy.copy(self.state), stats)

    def selection_probe(self, n_batches=20, seed=None):
        """Mean selection probability of clean vs corrupted triplets on fresh batches.

        Uses its own generator so the training streams are not disturbed.
        """
        if self.valuator is None or self.corruptor is None:
            raise DVRError("selection probe needs a valuator and a corruptor")
        c = self.config
        rng = np.random.default_rng(c.seed + 7919 if seed is None else seed)
        clean, bad = [], []
        for _ in range(n_batches):
            batch = self.corruptor(make_batch(self.dataset, c.outer_batch, rng, c.negatives_exclude, c.max_batch), rng)
            trace = val.forward(self.valuator, self.theta, batch)
            _, w_hat = adapter.selection_policy(self.valuator, trace, None, c.epsilon, c.shapley_sign)
            mask = batch.corrupted.astype(bool)
            clean.append(w_hat[~mask])
            bad.append(w_hat[mask])
        return float(np.concatenate(clean).mean()), float(np.concatenate(bad).mean())

    def best_model(self):
        """Best-validation recommender (current one if no evaluation happened yet)."""
        return self.theta if self.best is None else self.best[0]


def pretrain(config, dataset):
    trainer = Trainer(dataclasses.replace(config, valuator=False), dataset)
    return trainer.pretrain()


def run(config, dataset, corruptor=None, callback=None):
    """Pretrain then train; returns the :class:`TrainResult` with best weights."""
    trainer = Trainer(config, dataset, corruptor=corruptor)
    trainer.pretrain()
    trainer.run(callback=callback)
    return trainer.result(restore_best=True)
