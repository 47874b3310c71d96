"""Learned distance-distribution evaluator over supports {1..T-1, overflow}.

The evaluator models the first-hit-time distribution of a target from a
(state, action) pair as a histogram. Training uses an off-policy backup with
three branches: a matching successor pins the distribution at one step, a
terminal non-matching successor pins it at overflow, and otherwise the
successor's histogram shifts up by one bin (mass falling off the end folds
into overflow). Integer supports make the shift exact, no projection needed.

Histograms are plain numpy arrays of length T: index i < T-1 holds
p(D = i+1) and index T-1 is the overflow bin.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .envs import N_ACTIONS, StateEncoding, Target

DEFAULT_T = 16


class NonFiniteLoss(RuntimeError):
    """Training loss went non-finite; aborts the run with diagnostics."""


_UNIFORM_RO: dict[int, np.ndarray] = {}
_CLIP_VALUES: dict[int, np.ndarray] = {}


def _uniform_ro(T: int) -> np.ndarray:
    h = _UNIFORM_RO.get(T)
    if h is None:
        h = np.full(T, 1.0 / T)
        h.flags.writeable = False
        _UNIFORM_RO[T] = h
    return h


def uniform_hist(T: int) -> np.ndarray:
    return _uniform_ro(T).copy()


def delta_at_distance(T: int, distance: int) -> np.ndarray:
    if not 1 <= distance <= T - 1:
        raise ValueError(f"distance must be in [1, {T - 1}]")
    h = np.zeros(T)
    h[distance - 1] = 1.0
    return h


def delta_overflow(T: int) -> np.ndarray:
    h = np.zeros(T)
    h[-1] = 1.0
    return h


def assert_histogram(h: np.ndarray, atol: float = 1e-9) -> None:
    if h.min() < -atol or abs(h.sum() - 1.0) > atol:
        raise ValueError(f"invalid histogram (sum={h.sum()!r}, min={h.min()!r})")


def shift_hist(h: np.ndarray) -> np.ndarray:
    """Shift one step later; mass at the last finite bin joins overflow."""
    T = h.shape[0]
    out = np.zeros(T)
    out[1 : T - 1] = h[: T - 2]
    out[T - 1] = h[T - 2] + h[T - 1]
    return out


def tau_feasibility(h: np.ndarray, tau: int) -> float:
    if not 1 <= tau <= h.shape[0] - 1:
        raise ValueError(f"tau must be in [1, {h.shape[0] - 1}]")
    return float(h[:tau].sum())


def expected_discount(h: np.ndarray, gamma: float, tau: int) -> float:
    """Cumulative-discount read-out: supports swap to gamma^min(t, tau)."""
    T = h.shape[0]
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must be in (0, 1]")
    if not 1 <= tau <= T - 1:
        raise ValueError(f"tau must be in [1, {T - 1}]")
    supports = gamma ** np.minimum(np.arange(1, T + 1), tau)
    supports[T - 1] = gamma ** tau  # overflow commits to the full horizon
    return float(h @ supports)


def expected_clipped_distance(h: np.ndarray) -> float:
    """E[D] with the overflow bin valued at T (the clipping value)."""
    T = h.shape[0]
    values = _CLIP_VALUES.get(T)
    if values is None:
        values = np.arange(1, T + 1, dtype=float)
        values.flags.writeable = False
        _CLIP_VALUES[T] = values
    return float(h @ values)


def reject(h: np.ndarray, tau: int, threshold: float) -> bool:
    """Advisory rejection: strictly below-threshold feasibility within tau steps."""
    if not 0.0 <= threshold < 1.0:
        raise ValueError("threshold must be in [0, 1)")
    return tau_feasibility(h, tau) < threshold


def build_backup_target(sample, target_model) -> np.ndarray:
    """Backup distribution for one relabeled sample under the frozen model."""
    T = target_model.T
    if sample.h_flag:
        return delta_at_distance(T, 1)
    if sample.terminal:
        return delta_overflow(T)
    return shift_hist(target_model.predict(sample.s_next, None, sample.target))


def _cross_entropy(pred: np.ndarray, backup: np.ndarray) -> float:
    return float(-(backup * np.log(pred + 1e-12)).sum())


class _FrozenTabular:
    """Read-only view over a cell dict, used as the backup's target model."""

    def __init__(self, owner: "TabularEvaluator", cells: dict, exp: dict):
        self._owner = owner
        self._cells = cells
        self._exp = exp
        self.T = owner.T

    def predict(self, state, action, target: Target) -> np.ndarray:
        return self._owner._predict_from(self._cells, self._exp, state, action, target)


class TabularEvaluator:
    """Exact-testable backend: one histogram per (task, state, action, target) cell.

    Cells start at the uniform prior and move toward the backup by the
    learning rate; 1.0 (plain assignment) is exact for deterministic tasks.
    `backup_form` picks the continuation: "control" bootstraps through the
    greedy minimum-expected-distance action, "evaluation" averages actions
    under `policy_probs` (policy-evaluation form, matches the oracle tables).
    """

    backend = "tabular"

    def __init__(
        self,
        T: int = DEFAULT_T,
        learning_rate: float = 1.0,
        sync_period: int = 1,
        backup_form: str = "control",
        policy_probs: np.ndarray | None = None,
    ):
        if backup_form not in ("control", "evaluation"):
            raise ValueError(f"unknown backup form {backup_form!r}")
        self.T = T
        self.learning_rate = learning_rate
        self.sync_period = sync_period
        self.backup_form = backup_form
        self.policy_probs = (
            np.full(N_ACTIONS, 1.0 / N_ACTIONS) if policy_probs is None else np.asarray(policy_probs, dtype=float)
        )
        self.cells: dict[tuple, np.ndarray] = {}
        self._exp: dict[tuple, float] = {}  # cached expected clipped distance per cell
        self._target_cells: dict[tuple, np.ndarray] | None = None
        self._target_exp: dict[tuple, float] | None = None
        self.step = 0

    @staticmethod
    def _key(state, action: int, target: Target) -> tuple:
        return (state.task_id, state.embedding, action, target.key)

    def _cell(self, cells: dict, state, action: int, target: Target) -> np.ndarray:
        cell = cells.get((state.task_id, state.embedding, action, target.key))
        return cell if cell is not None else _uniform_ro(self.T)

    def _predict_from(self, cells: dict, exp: dict, state, action, target: Target) -> np.ndarray:
        if action is not None:
            return self._cell(cells, state, action, target).copy()
        if self.backup_form == "control":
            uniform_d = (self.T + 1) / 2.0  # E[D] of the uniform prior
            best, best_d = 0, np.inf
            for a in range(N_ACTIONS):
                d = exp.get((state.task_id, state.embedding, a, target.key), uniform_d)
                if d < best_d:
                    best, best_d = a, d
            return self._cell(cells, state, best, target).copy()
        hists = [self._cell(cells, state, a, target) for a in range(N_ACTIONS)]
        out = self.policy_probs[0] * hists[0]
        for a in range(1, N_ACTIONS):
            out = out + self.policy_probs[a] * hists[a]
        return out

    def predict(self, state, action, target: Target) -> np.ndarray:
        return self._predict_from(self.cells, self._exp, state, action, target)

    def target_model(self) -> _FrozenTabular:
        if self.sync_period == 1 or self._target_cells is None:
            # two-phase batch writes make the live dict equal to a per-batch sync
            return _FrozenTabular(self, self.cells, self._exp)
        return _FrozenTabular(self, self._target_cells, self._target_exp)

    def train_batch(self, samples) -> float:
        if not samples:
            raise ValueError("empty batch")
        frozen = self.target_model()
        updates = []
        loss = 0.0
        for sample in samples:
            backup = build_backup_target(sample, frozen)
            key = self._key(sample.s, sample.a, sample.target)
            pred = self.cells.get(key)
            loss += _cross_entropy(_uniform_ro(self.T) if pred is None else pred, backup)
            updates.append((key, backup))
        alpha = self.learning_rate
        for key, backup in updates:
            cur = self.cells.get(key)
            if cur is None:
                cur = uniform_hist(self.T)
            new = backup if alpha == 1.0 else (1.0 - alpha) * cur + alpha * backup
            self.cells[key] = new
            self._exp[key] = expected_clipped_distance(new)
        self.step += 1
        if self.sync_period > 1 and self.step % self.sync_period == 0:
            self._target_cells = {k: v.copy() for k, v in self.cells.items()}
            self._target_exp = dict(self._exp)
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"tabular loss became {loss} at step {self.step}")
        return loss / len(samples)


@dataclass
class _MLPParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "_MLPParams":
        return _MLPParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


class _FrozenMLP:
    def __init__(self, owner: "FeedforwardEvaluator", params: _MLPParams):
        self._owner = owner
        self._params = params
        self.T = owner.T

    def predict(self, state, action, target: Target) -> np.ndarray:
        return self._owner._predict_from(self._params, state, action, target)


class FeedforwardEvaluator:
    """MLP backend: ReLU hidden stack with a softmax histogram head.

    Input features concatenate the normalized source embedding, the
    normalized target embedding and a one-hot action.
    """

    backend = "feedforward"
    N_FEATURES = 8 + N_ACTIONS

    def __init__(
        self,
        width: int,
        height: int,
        T: int = DEFAULT_T,
        hidden: int = 128,
        n_hidden_layers: int = 3,
        learning_rate: float = 1e-3,
        sync_period: int = 1000,
        backup_form: str = "control",
        policy_probs: np.ndarray | None = None,
        seed: int = 0,
    ):
        if backup_form not in ("control", "evaluation"):
            raise ValueError(f"unknown backup form {backup_form!r}")
        self.width, self.height = width, height
        self.T = T
        self.hidden = hidden
        self.n_hidden_layers = n_hidden_layers
        self.learning_rate = learning_rate
        self.sync_period = sync_period
        self.backup_form = backup_form
        self.policy_probs = (
            np.full(N_ACTIONS, 1.0 / N_ACTIONS) if policy_probs is None else np.asarray(policy_probs, dtype=float)
        )
        self.seed = seed
        rng = np.random.default_rng(seed)
        sizes = [self.N_FEATURES] + [hidden] * n_hidden_layers + [T]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes, sizes[1:]):
            scale = np.sqrt(2.0 / fan_in)
            weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        self.params = _MLPParams(weights, biases)
        self.target_params = self.params.copy()
        self.step = 0
        self._adam_m = [np.zeros_like(p) for p in self._flat_params()]
        self._adam_v = [np.zeros_like(p) for p in self._flat_params()]

    def _flat_params(self) -> list[np.ndarray]:
        return [*self.params.weights, *self.params.biases]

    def features(self, src_emb: tuple, action: int, tgt_emb: tuple) -> np.ndarray:
        wx, hy = max(self.width - 1, 1), max(self.height - 1, 1)
        x = np.zeros(self.N_FEATURES)
        x[0] = src_emb[0] / wx
        x[1] = src_emb[1] / hy
        x[2] = src_emb[2]
        x[3] = src_emb[3]
        x[4] = tgt_emb[0] / wx
        x[5] = tgt_emb[1] / hy
        x[6] = tgt_emb[2]
        x[7] = tgt_emb[3]
        x[8 + action] = 1.0
        return x

    @staticmethod
    def _forward(params: _MLPParams, X: np.ndarray):
        acts = [X]
        h = X
        n_layers = len(params.weights)
        for i in range(n_layers - 1):
            h = np.maximum(h @ params.weights[i] + params.biases[i], 0.0)
            acts.append(h)
        logits = h @ params.weights[-1] + params.biases[-1]
        shifted = logits - logits.max(axis=1, keepdims=True)
        expd = np.exp(shifted)
        probs = expd / expd.sum(axis=1, keepdims=True)
        return probs, acts

    def _predict_from(self, params: _MLPParams, state, action, target: Target) -> np.ndarray:
        src = state.embedding if hasattr(state, "embedding") else tuple(state)
        if action is not None:
            X = self.features(src, action, target.embedding)[None, :]
            return self._forward(params, X)[0][0]
        X = np.stack([self.features(src, a, target.embedding) for a in range(N_ACTIONS)])
        probs = self._forward(params, X)[0]
        if self.backup_form == "control":
            dists = [expected_clipped_distance(probs[a]) for a in range(N_ACTIONS)]
            best = min(range(N_ACTIONS), key=lambda a: (dists[a], a))
            return probs[best]
        return self.policy_probs @ probs

    def predict(self, state, action, target: Target) -> np.ndarray:
        return self._predict_from(self.params, state, action, target)

    def target_model(self) -> _FrozenMLP:
        return _FrozenMLP(self, self.target_params)

    def batch_arrays(self, samples) -> tuple[np.ndarray, np.ndarray]:
        """Feature matrix and backup matrix for a batch (uses the target net)."""
        frozen = self.target_model()
        X = np.stack([self.features(s.s.embedding, s.a, s.target.embedding) for s in samples])
        Y = np.stack([build_backup_target(s, frozen) for s in samples])
        return X, Y

    def loss_and_grads(self, params: _MLPParams, X: np.ndarray, Y: np.ndarray):
        """Mean cross-entropy and its gradients (analytic softmax-CE backprop)."""
        B = X.shape[0]
        probs, acts = self._forward(params, X)
        loss = float(-(Y * np.log(np.clip(probs, 1e-300, None))).sum() / B)
        dlogits = (probs - Y) / B
        gW = [None] * len(params.weights)
        gB = [None] * len(params.biases)
        delta = dlogits
        for i in range(len(params.weights) - 1, -1, -1):
            gW[i] = acts[i].T @ delta
            gB[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ params.weights[i].T) * (acts[i] > 0)
        return loss, gW, gB

    def train_batch(self, samples) -> float:
        if not samples:
            raise ValueError("empty batch")
        X, Y = self.batch_arrays(samples)
        loss, gW, gB = self.loss_and_grads(self.params, X, Y)
        if not np.isfinite(loss):
            raise NonFiniteLoss(
                f"feedforward loss became {loss} at step {self.step} "
                f"(|logits| may have overflowed; check the learning rate)"
            )
        self.step += 1
        grads = [*gW, *gB]
        flat = self._flat_params()
        b1, b2, eps = 0.9, 0.999, 1e-8
        for i, (p, g) in enumerate(zip(flat, grads)):
            self._adam_m[i] = b1 * self._adam_m[i] + (1 - b1) * g
            self._adam_v[i] = b2 * self._adam_v[i] + (1 - b2) * g * g
            mhat = self._adam_m[i] / (1 - b1 ** self.step)
            vhat = self._adam_v[i] / (1 - b2 ** self.step)
            p -= self.learning_rate * mhat / (np.sqrt(vhat) + eps)
        if self.step % self.sync_period == 0:
            self.target_params = self.params.copy()
        return loss


def save_model(model, path) -> None:
    path = str(path)
    if model.backend == "tabular":
        cells = []
        for key in sorted(model.cells.keys()):
            task_id, emb, action, tkey = key
            cells.append([task_id, list(emb), action, list(tkey),
                          [v.hex() for v in model.cells[key]]])
        payload = {
            "format": "goalsift-evaluator",
            "version": 1,
            "backend": "tabular",
            "T": model.T,
            "learning_rate": model.learning_rate,
            "sync_period": model.sync_period,
            "backup_form": model.backup_form,
            "policy_probs": [v.hex() for v in model.policy_probs],
            "step": model.step,
            "cells": cells,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)
        return
    meta = {
        "format": "goalsift-evaluator",
        "version": 1,
        "backend": "feedforward",
        "T": model.T,
        "width": model.width,
        "height": model.height,
        "hidden": model.hidden,
        "n_hidden_layers": model.n_hidden_layers,
        "learning_rate": model.learning_rate,
        "sync_period": model.sync_period,
        "backup_form": model.backup_form,
        "seed": model.seed,
        "step": model.step,
    }
    arrays = {"policy_probs": model.policy_probs}
    for i, w in enumerate(model.params.weights):
        arrays[f"W{i}"] = w
        arrays[f"tW{i}"] = model.target_params.weights[i]
    for i, b in enumerate(model.params.biases):
        arrays[f"b{i}"] = b
        arrays[f"tb{i}"] = model.target_params.biases[i]
    np.savez(path, meta=json.dumps(meta), **arrays)


def load_model(path):
    path = str(path)
    if path.endswith(".npz"):
        data = np.load(path, allow_pickle=False)
        meta = json.loads(str(data["meta"]))
        model = FeedforwardEvaluator(
            width=meta["width"], height=meta["height"], T=meta["T"],
            hidden=meta["hidden"], n_hidden_layers=meta["n_hidden_layers"],
            learning_rate=meta["learning_rate"], sync_period=meta["sync_period"],
            backup_form=meta["backup_form"], policy_probs=data["policy_probs"],
            seed=meta["seed"],
        )
        n = meta["n_hidden_layers"] + 1
        model.params = _MLPParams([data[f"W{i}"] for i in range(n)], [data[f"b{i}"] for i in range(n)])
        model.target_params = _MLPParams([data[f"tW{i}"] for i in range(n)], [data[f"tb{i}"] for i in range(n)])
        model.step = meta["step"]
        return model
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != "goalsift-evaluator":
        raise ValueError(f"{path}: not an evaluator checkpoint")
    model = TabularEvaluator(
        T=payload["T"],
        learning_rate=payload["learning_rate"],
        sync_period=payload["sync_period"],
        backup_form=payload["backup_form"],
        policy_probs=np.array([float.fromhex(v) for v in payload["policy_probs"]]),
    )
    model.step = payload["step"]
    for task_id, emb, action, tkey, bins in payload["cells"]:
        key = (task_id, tuple(emb), action, tuple(tkey))
        model.cells[key] = np.array([float.fromhex(v) for v in bins])
    return model
