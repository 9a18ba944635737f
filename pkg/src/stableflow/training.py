"""Maximum-likelihood behavioral cloning over transition datasets.

The dataset likelihood factorizes over per-trajectory initial states and
consecutive transitions, each with an exact conditional density, so training
is plain minibatch SGD (Adam) on the mean negative log likelihood per term.
Minibatches are drawn over pooled transitions, which the factorization makes
unbiased. Stability is never touched by training: it is structural in the
model, so every checkpoint along the way remains globally stable.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, adam_step, recording
from .datasets import TrajectoryDataset
from .errors import TrainingError, ValidationError
from .flow import ConditionedFlow
from .latent import latent_from_json
from .policy import StablePolicyModel, Standardization

__all__ = ["TrainConfig", "TrainReport", "dataset_nll", "train", "evaluate"]


@dataclass
class TrainConfig:
    """Everything a training run needs; JSON-mirrorable."""

    epochs: int = 500
    batch_size: int = 256
    learning_rate: float = 1e-3
    seed: int = 0
    test_fraction: float = 0.2
    include_initial_term: bool = True
    patience: int = 50
    grad_clip: float = 100.0
    n_layers: int = 6
    hidden: tuple = (64, 64)
    clamp: float = 3.0
    activation: str = "tanh"
    latent: dict = field(default_factory=lambda: {"kind": "attractor", "alpha": 2.0,
                                                  "sigma": 0.2, "dt": 0.05})

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ValidationError("test_fraction must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValidationError("batch_size must be >= 1 and epochs >= 0")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be > 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValidationError("grad_clip must be > 0 or None")
        self.hidden = tuple(int(h) for h in self.hidden)

    def to_json(self) -> dict:
        return {
            "epochs": self.epochs, "batch_size": self.batch_size,
            "learning_rate": self.learning_rate, "seed": self.seed,
            "test_fraction": self.test_fraction,
            "include_initial_term": self.include_initial_term,
            "patience": self.patience, "grad_clip": self.grad_clip,
            "n_layers": self.n_layers,
            "hidden": list(self.hidden), "clamp": self.clamp,
            "activation": self.activation, "latent": dict(self.latent),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class TrainReport:
    """Per-epoch likelihood history plus run metadata."""

    train_ll: list
    test_ll: list
    best_epoch: int
    wall_clock_s: float
    param_checksum: str

    def to_json(self) -> dict:
        return {
            "train_ll": self.train_ll, "test_ll": self.test_ll,
            "best_epoch": self.best_epoch, "wall_clock_s": self.wall_clock_s,
            "param_checksum": self.param_checksum,
        }

    def to_csv(self) -> str:
        lines = ["epoch,train_ll,test_ll"]
        for i, (tr, te) in enumerate(zip(self.train_ll, self.test_ll)):
            lines.append(f"{i},{tr!r},{te!r}")
        return "\n".join(lines) + "\n"


def _batch_nll(model: StablePolicyModel, yp, yn, c, y0=None, c0=None):
    """Mean NLL node over one batch of transitions (plus optional initial terms)."""
    terms = []
    counts = []
    if len(yp):
        lp = model.log_cond_density(yp, yn, c if model.context_dim else None)
        terms.append(ad.asum(lp))
        counts.append(len(yp))
    if y0 is not None and len(y0):
        l0 = model.log_initial_density(y0, c0 if model.context_dim else None)
        terms.append(ad.asum(l0))
        counts.append(len(y0))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, -1.0 / sum(counts))


def dataset_nll(model: StablePolicyModel, dataset: TrajectoryDataset,
                include_initial_term: bool = False):
    """Mean negative log likelihood per summed term over the whole dataset.

    Sums log p(y_t | y_{t-1}, c_{t-1}) over all consecutive pairs, plus the
    static log p(y_0 | c_0) per trajectory when the flag is on, and negates
    the mean. Errors carry the offending trajectory and step.
    """
    if not dataset.trajectories:
        raise ValidationError("dataset has no trajectories")
    if dataset.dim_y != model.dim or dataset.dim_c != model.context_dim:
        raise ValidationError("dataset dims do not match the model")
    total = 0.0
    count = 0
    for i, traj in enumerate(dataset.trajectories):
        try:
            lp = model.log_cond_density(
                traj.states[:-1], traj.states[1:],
                traj.contexts[:-1] if model.context_dim else None)
            vals = ad.value_of(lp)
            if not np.all(np.isfinite(vals)):
                bad = int(np.flatnonzero(~np.isfinite(vals))[0])
                raise TrainingError(f"non-finite likelihood: trajectory {i}, step {bad}")
            total = ad.add(total, ad.asum(lp)) if count else ad.asum(lp)
            count += len(vals)
            if include_initial_term:
                l0 = model.log_initial_density(
                    traj.states[0], traj.contexts[0] if model.context_dim else None)
                total = ad.add(total, l0)
                count += 1
        except TrainingError:
            raise
        except Exception as exc:
            raise type(exc)(f"trajectory {i}: {exc}") from exc
    return ad.mul(total, -1.0 / count)


def evaluate(model: StablePolicyModel, dataset: TrajectoryDataset,
             include_initial_term: bool = False) -> dict:
    """Per-trajectory and pooled mean log likelihood per term (read-only)."""
    if not dataset.trajectories:
        raise ValidationError("dataset has no trajectories")
    per_traj = []
    for i in range(len(dataset.trajectories)):
        sub = dataset.subset([i])
        val = -float(ad.value_of(dataset_nll(model, sub, include_initial_term)))
        per_traj.append(val)
    pooled = -float(ad.value_of(dataset_nll(model, dataset, include_initial_term)))
    return {"per_trajectory": per_traj, "mean": pooled}


def build_model(config: TrainConfig, dataset: TrajectoryDataset,
                standardization: Standardization | None = None) -> StablePolicyModel:
    """Identity-initialized model sized for the dataset; latent dt follows the data."""
    latent_cfg = dict(config.latent)
    latent_cfg.setdefault("dim", dataset.dim_y)
    latent_cfg["dt"] = dataset.dt
    latent = latent_from_json(latent_cfg)
    flow = ConditionedFlow.build(
        dataset.dim_y, dataset.dim_c, n_layers=config.n_layers,
        hidden=config.hidden, clamp=config.clamp, activation=config.activation,
        rng=np.random.default_rng(config.seed))
    if standardization is None:
        standardization = Standardization.identity(dataset.dim_y, dataset.dim_c)
    return StablePolicyModel(flow, latent, standardization)


def _stratified_split(dataset: TrajectoryDataset, test_fraction: float,
                      rng: np.random.Generator):
    """Trajectory-level split stratified by (constant) context, so held-out
    metrics see every demonstrated condition."""
    groups: dict = {}
    for i, traj in enumerate(dataset.trajectories):
        groups.setdefault(tuple(np.round(traj.contexts[0], 12)), []).append(i)
    train_idx: list = []
    test_idx: list = []
    for key in sorted(groups):
        members = np.asarray(groups[key])
        members = members[rng.permutation(len(members))]
        n_test = min(int(round(test_fraction * len(members))), len(members) - 1)
        test_idx.extend(members[:n_test].tolist())
        train_idx.extend(members[n_test:].tolist())
    if not train_idx:  # all singleton groups fully sent to test
        train_idx, test_idx = test_idx, train_idx
    return sorted(train_idx), sorted(test_idx)


def _clip(grad: np.ndarray, limit) -> np.ndarray:
    if limit is None:
        return grad
    norm = float(np.linalg.norm(grad))
    return grad * (limit / norm) if norm > limit else grad


def train(config: TrainConfig, dataset: TrajectoryDataset):
    """Fit by minibatch Adam on the exact NLL; returns (model, report).

    Deterministic given the config seed. Standardization is fitted on the
    train split. Early stopping tracks test NLL with the configured patience
    and the best-test checkpoint is returned. With too few trajectories for
    a test split, test metrics fall back to the train split.
    """
    if not dataset.trajectories:
        raise ValidationError("dataset has no trajectories")
    t_start = time.perf_counter()
    rng = np.random.default_rng(config.seed)

    train_idx, test_idx = _stratified_split(dataset, config.test_fraction, rng)
    train_set = dataset.subset(train_idx)
    test_set = dataset.subset(test_idx) if len(test_idx) > 0 else train_set

    yp_all, yn_all, c_all = train_set.transition_arrays()
    y0_all, c0_all = train_set.initial_arrays()
    std = Standardization.fit(
        np.concatenate([t.states for t in train_set.trajectories]),
        np.concatenate([t.contexts for t in train_set.trajectories]))
    model = build_model(config, dataset, standardization=std)
    params = model.parameters()
    state = AdamState.init(len(params), lr=config.learning_rate)

    n_tr = len(yp_all)
    train_ll_hist: list = []
    test_ll_hist: list = []
    best_vec = params.to_array()
    best_ll = -float(ad.value_of(dataset_nll(model, test_set, config.include_initial_term)))
    best_epoch = -1
    stale = 0

    for epoch in range(config.epochs):
        perm = rng.permutation(n_tr)
        epoch_sum = 0.0
        epoch_terms = 0
        for lo in range(0, n_tr, config.batch_size):
            sel = perm[lo:lo + config.batch_size]
            with recording():
                loss = _batch_nll(model, yp_all[sel], yn_all[sel], c_all[sel])
            loss_v = float(ad.value_of(loss))
            if not np.isfinite(loss_v):
                raise TrainingError(f"training diverged (non-finite NLL) at epoch {epoch}")
            grad = _clip(params.gradient(loss), config.grad_clip)
            new_vec, state = adam_step(state, params.to_array(), grad)
            params.assign(new_vec)
            epoch_sum += loss_v * len(sel)
            epoch_terms += len(sel)
        if config.include_initial_term and len(y0_all):
            with recording():
                loss = _batch_nll(model, yp_all[:0], yn_all[:0], c_all[:0],
                                  y0=y0_all, c0=c0_all)
            loss_v = float(ad.value_of(loss))
            if not np.isfinite(loss_v):
                raise TrainingError(f"training diverged (non-finite NLL) at epoch {epoch}")
            grad = _clip(params.gradient(loss), config.grad_clip)
            new_vec, state = adam_step(state, params.to_array(), grad)
            params.assign(new_vec)
            epoch_sum += loss_v * len(y0_all)
            epoch_terms += len(y0_all)

        train_ll_hist.append(-epoch_sum / max(epoch_terms, 1))
        test_ll = -float(ad.value_of(dataset_nll(model, test_set, config.include_initial_term)))
        test_ll_hist.append(test_ll)
        if test_ll > best_ll:
            best_ll = test_ll
            best_vec = params.to_array()
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale > config.patience:
                break

    params.assign(best_vec)
    checksum = hashlib.sha256(best_vec.tobytes()).hexdigest()
    report = TrainReport(
        train_ll=train_ll_hist, test_ll=test_ll_hist, best_epoch=best_epoch,
        wall_clock_s=time.perf_counter() - t_start, param_checksum=checksum)
    return model, report
