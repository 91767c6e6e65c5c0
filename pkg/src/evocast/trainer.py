"""Two-phase training of a candidate network.

Phase one learns network weights jointly with a soft per-feature gate: the
input is multiplied by sigmoid(w) and the loss carries an L1-style penalty
on the gate activations, pushing useless features toward zero.  The gate is
then frozen into a hard 0/1 mask (positive raw weight keeps the feature)
and phase two retrains the weights alone under a cosine-restart learning
rate, collecting snapshots at the end of each cycle.  The best snapshots by
validation error form the final forecast ensemble.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import fit_scaler
from .genotype import Network
from .layers import StructuralError
from .tensor import ContractError, Tensor


@dataclass
class TrainConfig:
    epochs_joint: int = 10  # gate + weights
    epochs_weights: int = 10  # weights only, cyclic schedule
    lr: float = 1e-3
    epsilon: float = 1e-3  # gate penalty strength
    cycles: int = 5
    max_snapshots: int = 5
    batch_size: int = 128
    seed: int = 0
    time_budget: float = None  # seconds, None disables


class FeatureMask:
    """Soft sigmoid gate over input features."""

    def __init__(self, n_features):
        self.w_raw = T.parameter(np.zeros(n_features))

    def soft(self):
        return T.sigmoid(self.w_raw)

    def hard(self):
        """Freeze into a boolean keep-vector; never drops everything."""
        keep = self.w_raw.data > 0
        if not keep.any():
            keep = np.zeros_like(keep)
            keep[int(np.argmax(self.w_raw.data))] = True
        return keep


def cyclic_lr(epoch, alpha0, cycle_len):
    """Cosine-restart rate for a 1-based epoch index."""
    if cycle_len < 1:
        raise ContractError(f"cycle length must be >= 1, got {cycle_len}")
    phase = ((epoch - 1) % cycle_len) / cycle_len
    return (alpha0 / 2.0) * (math.cos(math.pi * phase) + 1.0)


def compute_metrics(y_true, y_pred):
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape:
        raise ContractError(f"shape mismatch {y_true.shape} vs {y_pred.shape}")
    if np.any(y_true == 0):
        raise ContractError("relative error is undefined for zero targets")
    err = y_pred - y_true
    return {
        "mape": float(np.mean(np.abs(err) / np.abs(y_true))),
        "mse": float(np.mean(err**2)),
        "rmse": float(math.sqrt(np.mean(err**2))),
    }


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo : lo + batch_size]


def _forward_loss(net, x, y, gate=None, hard_mask=None, epsilon=0.0, mode="train"):
    xt = Tensor(x)
    if gate is not None:
        xt = T.mul(xt, gate.soft())
    elif hard_mask is not None:
        xt = T.mul(xt, Tensor(hard_mask.astype(np.float64)))
    pred = net.forward(xt, mode=mode)
    err = T.sub(pred, Tensor(y))
    loss = T.tmean(T.mul(err, err))
    if gate is not None and epsilon > 0.0:
        loss = T.add(loss, T.scale(T.tsum(gate.soft()), epsilon))
    return loss


def _predict(net, x, hard_mask, batch_size=256):
    out = []
    for lo in range(0, x.shape[0], batch_size):
        xb = x[lo : lo + batch_size] * hard_mask
        out.append(net.forward(Tensor(xb), mode="eval").data)
    return np.concatenate(out, axis=0)


class _Clock:
    def __init__(self, budget):
        self.start = time.monotonic()
        self.budget = budget

    def expired(self):
        return self.budget is not None and time.monotonic() - self.start > self.budget


def phase1_train(net, mask, x, y, config, rng, clock=None):
    """Joint gate and weight optimization; returns per-epoch mean loss and
    whether the time budget cut training short."""
    params = net.parameters() + [mask.w_raw]
    state = T.AdamState(params)
    history = []
    truncated = False
    for _ in range(config.epochs_joint):
        if clock is not None and clock.expired():
            truncated = True
            break
        losses = []
        for idx in _batches(x.shape[0], config.batch_size, rng):
            T.zero_grads(params)
            with T.Tape() as tape:
                loss = _forward_loss(
                    net, x[idx], y[idx], gate=mask, epsilon=config.epsilon
                )
                tape.backward(loss)
            if not T.adam_step(state, config.lr):
                raise FloatingPointError("non-finite gradient in joint phase")
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
    return history, truncated


@dataclass
class Snapshot:
    valid_mse: float
    weights: dict


@dataclass
class SnapshotEnsemble:
    members: list = field(default_factory=list)

    def consider(self, snapshot, cap):
        self.members.append(snapshot)
        self.members.sort(key=lambda s: s.valid_mse)
        del self.members[cap:]

    def predict(self, net, x, hard_mask):
        if not self.members:
            raise ContractError("empty ensemble")
        preds = [
            _predict(_load(net, s.weights), x, hard_mask) for s in self.members
        ]
        return np.mean(preds, axis=0), preds


def _load(net, weights):
    net.load_checkpoint(weights)
    return net


def phase2_train(net, hard_mask, x, y, x_valid, y_valid, config, rng, clock=None):
    """Weight-only refinement under a cosine-restart schedule; snapshots at
    every cycle boundary, keeping the best by validation error."""
    params = net.parameters()
    state = T.AdamState(params)
    cycle_len = max(1, math.ceil(config.epochs_weights / config.cycles))
    ensemble = SnapshotEnsemble()
    maskf = hard_mask.astype(np.float64)
    truncated = False
    for epoch in range(1, config.epochs_weights + 1):
        if clock is not None and clock.expired():
            truncated = True
            break
        lr = cyclic_lr(epoch, config.lr, cycle_len)
        for idx in _batches(x.shape[0], config.batch_size, rng):
            T.zero_grads(params)
            with T.Tape() as tape:
                loss = _forward_loss(net, x[idx], y[idx], hard_mask=hard_mask)
                tape.backward(loss)
            if not T.adam_step(state, lr):
                raise FloatingPointError("non-finite gradient in refinement phase")
        at_cycle_end = epoch % cycle_len == 0 or epoch == config.epochs_weights
        if at_cycle_end:
            mse = float(np.mean((_predict(net, x_valid, maskf) - y_valid) ** 2))
            ensemble.consider(Snapshot(mse, net.checkpoint()), config.max_snapshots)
    if not ensemble.members:
        mse = float(np.mean((_predict(net, x_valid, maskf) - y_valid) ** 2))
        ensemble.consider(Snapshot(mse, net.checkpoint()), config.max_snapshots)
    return ensemble, truncated


@dataclass
class EvalResult:
    fitness: float  # validation relative error, +inf on failure
    selected: np.ndarray = None  # boolean keep-vector over features
    valid_metrics: dict = None
    test_metrics: dict = None
    test_forecast: np.ndarray = None
    n_snapshots: int = 0
    truncated: bool = False
    error: str = ""
    loss_history: list = None


def evaluate_candidate(genotype, train, valid, test, config, with_test=False):
    """Train one genotype end to end and score it on the validation block.

    Any structural or numerical failure yields an infinite fitness instead
    of propagating, so a search loop can treat the candidate as simply bad.
    """
    clock = _Clock(config.time_budget)
    try:
        scaler = fit_scaler(train)
        xt = scaler.transform_x(train.x)
        yt = scaler.transform_y(train.y)
        xv = scaler.transform_x(valid.x)
        yv = scaler.transform_y(valid.y)

        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 17]))
        net = Network(genotype, f=train.n_features, seed=config.seed)
        mask = FeatureMask(train.n_features)
        history, trunc1 = phase1_train(net, mask, xt, yt, config, rng, clock)
        keep = mask.hard()
        ensemble, trunc2 = phase2_train(
            net, keep, xt, yt, xv, yv, config, rng, clock
        )
        maskf = keep.astype(np.float64)
        valid_pred_z, _ = ensemble.predict(net, xv, maskf)
        valid_pred = scaler.inverse_y(valid_pred_z)
        valid_metrics = compute_metrics(valid.y, valid_pred)
        result = EvalResult(
            fitness=valid_metrics["mape"],
            selected=keep,
            valid_metrics=valid_metrics,
            n_snapshots=len(ensemble.members),
            truncated=trunc1 or trunc2,
            loss_history=history,
        )
        if with_test:
            xtest = scaler.transform_x(test.x)
            test_pred_z, _ = ensemble.predict(net, xtest, maskf)
            result.test_forecast = scaler.inverse_y(test_pred_z)
            result.test_metrics = compute_metrics(test.y, result.test_forecast)
        if not math.isfinite(result.fitness):
            raise FloatingPointError("non-finite validation score")
        return result
    except (StructuralError, ContractError, FloatingPointError, T.ShapeError) as exc:
        return EvalResult(fitness=float("inf"), error=f"{type(exc).__name__}: {exc}")


def mean_profile_baseline(train, target):
    """Forecast every day with the train-block mean daily profile."""
    profile = train.y.mean(axis=0)
    pred = np.tile(profile, (target.days, 1))
    return pred, compute_metrics(target.y, pred)
