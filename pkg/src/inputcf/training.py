"""Losses, optimizers, training schedules, and checkpointing.

Three schedules cover every experiment:

* ``train_joint``: network weights and (when the variant allows) input
  values updated together, epoch by epoch, with optional early stopping on
  validation RMSE and best-weights restore.
* ``train_alternating``: rounds of a network-only phase followed by an
  inputs-only phase. A guard evaluates the full training loss at every phase
  boundary and rolls the phase back if the loss went up, so the boundary
  sequence is non-increasing by construction.
* ``train_post_input``: the network is frozen and only the input values move,
  recording full-train RMSE and validation RMSE after every epoch.

Determinism rules: every shuffle comes from an epoch-indexed stream, every
negative-sampling pass from another, so a run is a pure function of (data,
config, seed) and a resumed run replays the exact epochs an uninterrupted
run would have executed. Input-value parameters get lazily updated sparse
optimizer state: a step touches only the positions the batch gathered, and
moment estimates and per-position step counts advance only for touched
positions. Weight decay never applies to input values.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import InteractionMatrix, SplitBundle, sample_negatives_per_positive
from .model import CfModel, GradientSet, backward_pairs, forward_pairs
from .rng import STREAM_NEGATIVES, STREAM_SHUFFLE, stream


class NumericalError(RuntimeError):
    """Raised when training produces a non-finite loss."""


BCE_EPS = 1e-7


def loss_mse(preds, targets):
    """Per-sample squared error and its gradient wrt the prediction."""
    preds = np.asarray(preds)
    targets = np.asarray(targets, dtype=preds.dtype)
    diff = targets - preds
    return diff * diff, -2.0 * diff


def loss_bce(preds, targets):
    """Per-sample binary cross-entropy with clamped predictions.

    Predictions are clamped to [BCE_EPS, 1 - BCE_EPS] before the logarithms;
    the gradient is computed at the clamped value.
    """
    preds = np.asarray(preds)
    targets = np.asarray(targets, dtype=preds.dtype)
    p = np.clip(preds, BCE_EPS, 1.0 - BCE_EPS)
    loss = -(targets * np.log(p) + (1.0 - targets) * np.log1p(-p))
    grad = (p - targets) / (p * (1.0 - p))
    return loss, grad


LOSSES = {"mse": loss_mse, "bce": loss_bce}

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
RMSPROP_RHO = 0.9
RMSPROP_EPS = 1e-8

OPTIMIZER_KINDS = ("sgd", "adam", "rmsprop")


class Optimizer:
    """SGD / Adam / RMSprop over named tensors, with sparse lazy updates.

    ``step_dense`` updates whole tensors; ``step_sparse`` updates a value
    array only at the given positions, keeping per-position state (including
    per-position Adam step counts) so untouched positions are left exactly
    as they were. ``l2`` is only ever applied by ``step_dense``.
    """

    def __init__(self, kind: str, lr: float, l2: float = 0.0):
        if kind not in OPTIMIZER_KINDS:
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.lr = lr
        self.l2 = l2
        self.slots: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}

    def _slot(self, key: str, like: np.ndarray, dtype=None) -> np.ndarray:
        arr = self.slots.get(key)
        if arr is None:
            arr = np.zeros(like.shape, dtype=dtype or like.dtype)
            self.slots[key] = arr
        return arr

    def step_dense(self, name: str, param: np.ndarray, grad: np.ndarray) -> None:
        if self.l2:
            grad = grad + self.l2 * param
        if self.kind == "sgd":
            param -= self.lr * grad
            return
        if self.kind == "rmsprop":
            acc = self._slot(f"{name}.acc", param)
            acc *= RMSPROP_RHO
            acc += (1.0 - RMSPROP_RHO) * grad * grad
            param -= self.lr * grad / (np.sqrt(acc) + RMSPROP_EPS)
            return
        m = self._slot(f"{name}.m", param)
        v = self._slot(f"{name}.v", param)
        t = self.steps.get(name, 0) + 1
        self.steps[name] = t
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * grad
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * grad * grad
        m_hat = m / (1.0 - ADAM_BETA1 ** t)
        v_hat = v / (1.0 - ADAM_BETA2 ** t)
        param -= self.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)

    def step_sparse(self, name: str, values: np.ndarray, grad: np.ndarray,
                    touched: np.ndarray) -> None:
        if touched.size == 0:
            return
        g = grad[touched]
        if self.kind == "sgd":
            values[touched] -= self.lr * g
            return
        if self.kind == "rmsprop":
            acc = self._slot(f"{name}.acc", values)
            a = RMSPROP_RHO * acc[touched] + (1.0 - RMSPROP_RHO) * g * g
            acc[touched] = a
            values[touched] -= self.lr * g / (np.sqrt(a) + RMSPROP_EPS)
            return
        m = self._slot(f"{name}.m", values)
        v = self._slot(f"{name}.v", values)
        counts = self._slot(f"{name}.t", values, dtype=np.uint32)
        t = counts[touched].astype(np.float64) + 1.0
        counts[touched] = t.astype(np.uint32)
        mi = ADAM_BETA1 * m[touched] + (1.0 - ADAM_BETA1) * g
        vi = ADAM_BETA2 * v[touched] + (1.0 - ADAM_BETA2) * g * g
        m[touched] = mi
        v[touched] = vi
        m_hat = mi / (1.0 - ADAM_BETA1 ** t)
        v_hat = vi / (1.0 - ADAM_BETA2 ** t)
        values[touched] -= self.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)

    # -- checkpoint support -------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        return dict(self.slots)

    def state_meta(self) -> dict:
        return {"steps": dict(self.steps)}

    def load_state(self, tensors: dict[str, np.ndarray], meta: dict) -> None:
        self.slots = {k: v.copy() for k, v in tensors.items()}
        self.steps = {k: int(v) for k, v in meta.get("steps", {}).items()}

    def snapshot(self):
        return ({k: v.copy() for k, v in self.slots.items()}, dict(self.steps))

    def restore(self, snap) -> None:
        tensors, steps = snap
        self.slots = {k: v.copy() for k, v in tensors.items()}
        self.steps = dict(steps)


@dataclass(frozen=True)
class TrainPlan:
    """Everything a schedule needs beyond the model and the split."""

    epochs: int = 30
    batch_size: int = 256
    optimizer: str = "rmsprop"
    lr: float = 0.001
    l2: float = 0.0
    loss: str = "mse"
    seed: int = 0
    patience: int = 5            # early-stop patience on val RMSE; <= 0 disables
    restore_best: bool = True    # restore best-validation weights at the end
    train_inputs: bool | None = None   # None: follow the variant
    shuffle: bool = True
    negatives_per_positive: int = 0    # implicit task: 0/1 targets with sampling
    input_optimizer: str | None = None  # default: same kind as the network
    input_lr: float | None = None       # default: same rate as the network
    rounds: int = 3              # alternating only: (network, inputs) rounds
    guard: bool = True           # alternating only: phase rollback on loss increase

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.optimizer not in OPTIMIZER_KINDS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.input_optimizer is not None and self.input_optimizer not in OPTIMIZER_KINDS:
            raise ValueError(f"unknown optimizer {self.input_optimizer!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.negatives_per_positive < 0:
            raise ValueError("negatives_per_positive must be >= 0")


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_rmse: float | None


@dataclass
class PhaseRow:
    round: int
    phase: str               # "network" or "inputs"
    epochs: int
    loss_before: float
    loss_after: float        # as measured, before any rollback
    rolled_back: bool
    loss_effective: float    # boundary value after the guard's verdict


@dataclass
class TrainResult:
    history: list[HistoryRow]
    final_train_loss: float
    best_epoch: int | None = None
    stopped_early: bool = False
    paused: bool = False
    phases: list[PhaseRow] = field(default_factory=list)


@dataclass
class PostInputRow:
    epoch: int
    train_rmse: float
    val_rmse: float | None


@dataclass
class PostInputResult:
    rows: list[PostInputRow]   # epoch 0 is the pre-optimization baseline


def predict_pairs(model: CfModel, users, items, batch_size: int = 8192) -> np.ndarray:
    """Scores for pair arrays, batched; no gradients retained."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    out = np.empty(users.size, dtype=np.float64)
    for lo in range(0, users.size, batch_size):
        hi = min(lo + batch_size, users.size)
        scores, _ = forward_pairs(model, users[lo:hi], items[lo:hi])
        out[lo:hi] = scores
    return out


def dataset_rmse(model: CfModel, matrix: InteractionMatrix,
                 batch_size: int = 8192) -> float:
    preds = predict_pairs(model, matrix.users, matrix.items, batch_size)
    diff = matrix.values - preds
    return float(np.sqrt(np.mean(diff * diff)))


def dataset_loss(model: CfModel, matrix: InteractionMatrix, loss: str = "mse",
                 batch_size: int = 8192) -> float:
    """Mean per-sample loss over every observed interaction."""
    preds = predict_pairs(model, matrix.users, matrix.items, batch_size)
    per, _ = LOSSES[loss](preds, matrix.values)
    return float(np.mean(per))


def _epoch_arrays(matrix: InteractionMatrix, plan: TrainPlan, epoch_index: int,
                  dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """The epoch's (users, items, targets), negatives sampled and shuffled.

    Both streams are keyed by the epoch index, never by call order, so any
    schedule that replays epoch e sees exactly the same arrays.
    """
    users, items = matrix.users, matrix.items
    targets = matrix.values.astype(dtype)
    if plan.negatives_per_positive > 0:
        gen = stream(plan.seed, STREAM_NEGATIVES, epoch_index)
        negs = sample_negatives_per_positive(matrix, users,
                                             plan.negatives_per_positive, gen)
        users = np.concatenate([users, np.repeat(users, plan.negatives_per_positive)])
        items = np.concatenate([items, negs.ravel()])
        targets = np.concatenate([np.ones(matrix.nnz, dtype=dtype),
                                  np.zeros(negs.size, dtype=dtype)])
    if plan.shuffle:
        order = stream(plan.seed, STREAM_SHUFFLE, epoch_index).permutation(users.size)
        users, items, targets = users[order], items[order], targets[order]
    return users, items, targets


def _apply_gradients(model: CfModel, grads: GradientSet, net_opt: Optimizer,
                     input_opt: Optimizer, update_network: bool,
                     update_inputs: bool) -> None:
    if update_network:
        params = model.parameters()
        for name, g in grads.network.items():
            net_opt.step_dense(name, params[name], g)
    if update_inputs and grads.input_u_grad is not None:
        input_opt.step_sparse("inputs.user", model.inputs.u_values,
                              grads.input_u_grad, grads.input_u_touched)
        input_opt.step_sparse("inputs.item", model.inputs.v_values,
                              grads.input_v_grad, grads.input_v_touched)


def _run_epoch(model: CfModel, matrix: InteractionMatrix, plan: TrainPlan,
               epoch_index: int, net_opt: Optimizer, input_opt: Optimizer,
               update_network: bool, update_inputs: bool) -> float:
    """One pass over the (shuffled) epoch arrays; returns mean sample loss."""
    users, items, targets = _epoch_arrays(matrix, plan, epoch_index, model.dtype)
    loss_fn = LOSSES[plan.loss]
    total = 0.0
    seen = 0
    for lo in range(0, users.size, plan.batch_size):
        hi = min(lo + plan.batch_size, users.size)
        scores, tape = forward_pairs(model, users[lo:hi], items[lo:hi])
        per, dpred = loss_fn(scores, targets[lo:hi])
        batch_loss = float(per.sum())
        if not np.isfinite(batch_loss):
            raise NumericalError(
                f"non-finite loss in epoch {epoch_index + 1} at sample {lo}")
        total += batch_loss
        seen += hi - lo
        grads = backward_pairs(model, tape, dpred / (hi - lo),
                               want_input_grads=update_inputs)
        _apply_gradients(model, grads, net_opt, input_opt,
                         update_network, update_inputs)
    return total / max(seen, 1)


def _make_optimizers(plan: TrainPlan) -> tuple[Optimizer, Optimizer]:
    net_opt = Optimizer(plan.optimizer, plan.lr, plan.l2)
    input_opt = Optimizer(plan.input_optimizer or plan.optimizer,
                          plan.input_lr if plan.input_lr is not None else plan.lr,
                          l2=0.0)
    return net_opt, input_opt


def _snapshot_weights(model: CfModel) -> dict[str, np.ndarray]:
    snap = {f"param!{k}": v.copy() for k, v in model.parameters().items()}
    snap["inputs!user"] = model.inputs.u_values.copy()
    snap["inputs!item"] = model.inputs.v_values.copy()
    return snap


def _restore_weights(model: CfModel, snap: dict[str, np.ndarray]) -> None:
    params = model.parameters()
    for key, arr in snap.items():
        if key.startswith("param!"):
            params[key[len("param!"):]][...] = arr
        elif key == "inputs!user":
            model.inputs.u_values[...] = arr
        elif key == "inputs!item":
            model.inputs.v_values[...] = arr
        else:
            raise ValueError(f"unknown snapshot key {key!r}")


def _val_score(model: CfModel, split: SplitBundle, plan: TrainPlan) -> float | None:
    """Validation score: RMSE for squared error, mean loss for cross-entropy."""
    if split.validation.nnz == 0:
        return None
    if plan.loss == "mse":
        return dataset_rmse(model, split.validation)
    return dataset_loss(model, split.validation, plan.loss)


@dataclass
class _JointState:
    """Mutable cross-epoch state; exactly what a checkpoint must capture."""

    next_epoch: int = 0
    history: list[HistoryRow] = field(default_factory=list)
    best_val: float | None = None
    best_epoch: int | None = None
    bad_epochs: int = 0
    stopped_early: bool = False
    best_weights: dict[str, np.ndarray] | None = None


def train_joint(model: CfModel, split: SplitBundle, plan: TrainPlan, *,
                checkpoint_path=None, checkpoint_every: int = 0,
                resume_from=None, stop_after: int | None = None,
                archive_path=None, epoch_offset: int = 0,
                manifest_extra: dict | None = None) -> TrainResult:
    """Train network and inputs together with early stopping on val score.

    Empty validation disables both early stopping and best-weight restore,
    which makes "final training loss" well defined for equivalence checks.

    ``checkpoint_path`` receives a resumable snapshot of the live state
    (current weights, optimizer state, early-stop bookkeeping) every
    ``checkpoint_every`` epochs; ``stop_after`` pauses the run at that epoch
    boundary after saving one, so a later call with ``resume_from`` replays
    the remaining epochs exactly as an uninterrupted run would have.
    ``archive_path``, in contrast, is written once at the very end, after any
    best-weight restore: it is the deployable model, not a resume point.
    ``epoch_offset`` shifts the shuffle/negative stream indices, letting a
    caller chain schedules without replaying earlier epochs' orderings.
    """
    update_inputs = model.inputs_trainable if plan.train_inputs is None \
        else plan.train_inputs
    if stop_after is not None and checkpoint_path is None:
        raise ValueError("stop_after needs a checkpoint_path to pause into")
    net_opt, input_opt = _make_optimizers(plan)
    state = _JointState()
    if resume_from is not None:
        _checkpoint_restore(resume_from, model, net_opt, input_opt, state, split, plan)

    has_val = split.validation.nnz > 0
    paused = False
    while not state.stopped_early and state.next_epoch < plan.epochs:
        epoch = state.next_epoch
        train_loss = _run_epoch(model, split.train, plan, epoch + epoch_offset,
                                net_opt, input_opt, True, update_inputs)
        val = _val_score(model, split, plan)
        state.history.append(HistoryRow(epoch + 1, train_loss, val))
        state.next_epoch = epoch + 1
        if has_val:
            if state.best_val is None or val < state.best_val:
                state.best_val = val
                state.best_epoch = epoch + 1
                state.bad_epochs = 0
                if plan.restore_best:
                    state.best_weights = _snapshot_weights(model)
            else:
                state.bad_epochs += 1
            if plan.patience > 0 and state.bad_epochs >= plan.patience:
                state.stopped_early = True
        if checkpoint_path is not None and checkpoint_every > 0 \
                and state.next_epoch % checkpoint_every == 0:
            checkpoint_save(checkpoint_path, model, net_opt, input_opt,
                            state, split, plan, extra=manifest_extra)
        if stop_after is not None and state.next_epoch >= stop_after \
                and not state.stopped_early and state.next_epoch < plan.epochs:
            checkpoint_save(checkpoint_path, model, net_opt, input_opt,
                            state, split, plan, extra=manifest_extra)
            paused = True
            break

    if not paused:
        if checkpoint_path is not None:
            checkpoint_save(checkpoint_path, model, net_opt, input_opt,
                            state, split, plan, extra=manifest_extra)
        if has_val and plan.restore_best and state.best_weights is not None:
            _restore_weights(model, state.best_weights)
        if archive_path is not None:
            checkpoint_save(archive_path, model, net_opt, input_opt,
                            state, split, plan, extra=manifest_extra)
    final = dataset_loss(model, split.train, plan.loss)
    return TrainResult(history=state.history, final_train_loss=final,
                       best_epoch=state.best_epoch,
                       stopped_early=state.stopped_early, paused=paused)


def train_alternating(model: CfModel, split: SplitBundle, plan: TrainPlan) -> TrainResult:
    """Alternate network-only and inputs-only phases with a loss guard.

    Each phase runs ``plan.epochs`` epochs. Epoch stream indices advance
    globally across phases, so the first network phase consumes exactly the
    same shuffles as a joint run with the same seed: the two runs are
    step-identical until the first phase boundary. With the guard on, a
    phase whose full-train loss went up is rolled back (weights and
    optimizer state), so boundary losses never increase.
    """
    if not model.inputs_trainable and plan.train_inputs is not True:
        raise ValueError("alternating schedule needs trainable input values")
    if plan.negatives_per_positive > 0:
        raise ValueError("alternating schedule supports the explicit task only")
    net_opt, input_opt = _make_optimizers(plan)
    history: list[HistoryRow] = []
    phases: list[PhaseRow] = []
    global_epoch = 0
    boundary = dataset_loss(model, split.train, plan.loss)
    for rnd in range(1, plan.rounds + 1):
        for phase_name in ("network", "inputs"):
            loss_before = boundary
            weights_snap = _snapshot_weights(model)
            opt_snaps = (net_opt.snapshot(), input_opt.snapshot())
            update_network = phase_name == "network"
            for _ in range(plan.epochs):
                train_loss = _run_epoch(model, split.train, plan, global_epoch,
                                        net_opt, input_opt,
                                        update_network, not update_network)
                global_epoch += 1
                history.append(HistoryRow(global_epoch, train_loss,
                                          _val_score(model, split, plan)))
            loss_after = dataset_loss(model, split.train, plan.loss)
            rolled_back = bool(plan.guard and loss_after > loss_before)
            if rolled_back:
                _restore_weights(model, weights_snap)
                net_opt.restore(opt_snaps[0])
                input_opt.restore(opt_snaps[1])
            boundary = loss_before if rolled_back else loss_after
            phases.append(PhaseRow(round=rnd, phase=phase_name, epochs=plan.epochs,
                                   loss_before=loss_before, loss_after=loss_after,
                                   rolled_back=rolled_back, loss_effective=boundary))
    return TrainResult(history=history, final_train_loss=boundary, phases=phases)


def train_post_input(model: CfModel, split: SplitBundle, plan: TrainPlan, *,
                     epoch_offset: int = 0) -> PostInputResult:
    """Freeze the network and fine-tune only the input values.

    Records full-train RMSE and validation RMSE before optimization (row 0)
    and after every epoch. The loss is squared error regardless of
    ``plan.loss``; this schedule belongs to the rating task.
    """
    if not model.inputs.pattern.nnz:
        raise ValueError("no interactions to fine-tune on")
    if not model.inputs_trainable and plan.train_inputs is not True:
        raise ValueError("post-input fine-tuning needs trainable input values")
    input_opt = Optimizer(plan.optimizer, plan.lr, l2=0.0)
    net_opt = Optimizer("sgd", 0.0)  # placeholder; the network never moves
    rating_plan = plan if plan.loss == "mse" and plan.negatives_per_positive == 0 \
        else None
    if rating_plan is None:
        raise ValueError("post-input fine-tuning supports the explicit task only")
    rows = [PostInputRow(0, dataset_rmse(model, split.train),
                         _val_score(model, split, plan))]
    for epoch in range(plan.epochs):
        _run_epoch(model, split.train, plan, epoch + epoch_offset,
                   net_opt, input_opt, False, True)
        rows.append(PostInputRow(epoch + 1, dataset_rmse(model, split.train),
                                 _val_score(model, split, plan)))
    return PostInputResult(rows=rows)


# -- checkpointing -----------------------------------------------------------
#
# Layout: 8-byte little-endian unsigned manifest length, then the UTF-8 JSON
# manifest, then a payload of raw little-endian tensor bytes. Each manifest
# tensor entry carries name, dtype (f32/f64/u32), shape, and its offset and
# length relative to the payload start. The manifest also records the format
# version, a config hash binding the file to its run, the next epoch to
# execute, seed bookkeeping, the history so far, early-stop state, and
# optimizer step counts. Round-trips are bit-exact because tensor bytes are
# stored raw.

CHECKPOINT_FORMAT_VERSION = 1

_DTYPE_TO_TAG = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64",
                 np.dtype(np.uint32): "u32"}
_TAG_TO_DTYPE = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"),
                 "u32": np.dtype("<u4")}


def run_fingerprint(model: CfModel, split: SplitBundle, plan: TrainPlan) -> str:
    """Hash binding a checkpoint to its model shape, data split, and plan."""
    config = model.config
    payload = {
        "variant": config.variant,
        "user_layers": list(config.user_layers),
        "item_layers": list(config.item_layers),
        "fusion_layers": list(config.fusion_layers),
        "activation": config.activation,
        "output_activation": config.output_activation,
        "input_init": config.input_init,
        "value_max": config.value_max,
        "first_layer_activation": config.first_layer_activation,
        "use_biases": config.use_biases,
        "embed_dim": config.embed_dim,
        "cfnet_embed_dim": config.cfnet_embed_dim,
        "cfnet_h_layers": list(config.cfnet_h_layers),
        "precision": config.precision,
        "split": [split.protocol, split.seed, split.train.nnz,
                  split.validation.nnz, split.test.nnz],
        "ids": split.train.id_map_hash(),
        "plan": {k: getattr(plan, k) for k in (
            "epochs", "batch_size", "optimizer", "lr", "l2", "loss", "seed",
            "patience", "restore_best", "train_inputs", "shuffle",
            "negatives_per_positive", "input_optimizer", "input_lr")},
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _collect_tensors(model, net_opt, input_opt, state) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    for name, arr in model.parameters().items():
        tensors[f"param!{name}"] = arr
    tensors["inputs!user"] = model.inputs.u_values
    tensors["inputs!item"] = model.inputs.v_values
    for key, arr in net_opt.state_tensors().items():
        tensors[f"opt_net!{key}"] = arr
    for key, arr in input_opt.state_tensors().items():
        tensors[f"opt_in!{key}"] = arr
    if state.best_weights is not None:
        for key, arr in state.best_weights.items():
            tensors[f"best!{key}"] = arr
    return tensors


def checkpoint_save(path, model: CfModel, net_opt: Optimizer,
                    input_opt: Optimizer, state: _JointState,
                    split: SplitBundle, plan: TrainPlan,
                    extra: dict | None = None) -> None:
    tensors = _collect_tensors(model, net_opt, input_opt, state)
    entries = []
    offset = 0
    blobs = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        tag = _DTYPE_TO_TAG.get(arr.dtype)
        if tag is None:
            raise ValueError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        blob = arr.astype(_TAG_TO_DTYPE[tag], copy=False).tobytes()
        entries.append({"name": name, "dtype": tag, "shape": list(arr.shape),
                        "offset": offset, "length": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = dict(extra or {})
    manifest.update({
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config_hash": run_fingerprint(model, split, plan),
        "epoch": state.next_epoch,
        "rng": {"seed": plan.seed},
        "histories": {
            "train": [[r.epoch, r.train_loss, r.val_rmse] for r in state.history],
        },
        "early_stop": {
            "best_val": state.best_val,
            "best_epoch": state.best_epoch,
            "bad_epochs": state.bad_epochs,
            "stopped": state.stopped_early,
            "has_best_weights": state.best_weights is not None,
        },
        "optimizer_steps": {"network": net_opt.state_meta()["steps"],
                            "inputs": input_opt.state_meta()["steps"]},
        "tensors": entries,
    })
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for chunk in blobs:
            fh.write(chunk)


def checkpoint_read(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint into (manifest, tensors); tensors are writable."""
    with open(path, "rb") as fh:
        header = fh.read(8)
        if len(header) != 8:
            raise ValueError("truncated checkpoint header")
        (mlen,) = struct.unpack("<Q", header)
        blob = fh.read(mlen)
        if len(blob) != mlen:
            raise ValueError("truncated checkpoint manifest")
        manifest = json.loads(blob.decode("utf-8"))
        if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(
                f"unsupported checkpoint format {manifest.get('format_version')!r}")
        payload = fh.read()
    tensors = {}
    for entry in manifest["tensors"]:
        lo, ln = entry["offset"], entry["length"]
        if lo + ln > len(payload):
            raise ValueError(f"tensor {entry['name']!r} exceeds payload")
        arr = np.frombuffer(payload[lo:lo + ln], dtype=_TAG_TO_DTYPE[entry["dtype"]])
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return manifest, tensors


def _checkpoint_restore(path, model: CfModel, net_opt: Optimizer,
                        input_opt: Optimizer, state: _JointState,
                        split: SplitBundle, plan: TrainPlan) -> None:
    manifest, tensors = checkpoint_read(path)
    expect = run_fingerprint(model, split, plan)
    if manifest["config_hash"] != expect:
        raise ValueError("checkpoint was produced by a different configuration")
    params = model.parameters()
    for name, arr in params.items():
        arr[...] = tensors[f"param!{name}"]
    model.inputs.u_values[...] = tensors["inputs!user"]
    model.inputs.v_values[...] = tensors["inputs!item"]
    net_opt.load_state(
        {k[len("opt_net!"):]: v for k, v in tensors.items()
         if k.startswith("opt_net!")},
        {"steps": manifest["optimizer_steps"]["network"]})
    input_opt.load_state(
        {k[len("opt_in!"):]: v for k, v in tensors.items()
         if k.startswith("opt_in!")},
        {"steps": manifest["optimizer_steps"]["inputs"]})
    state.next_epoch = manifest["epoch"]
    state.history = [HistoryRow(int(e), float(tl), None if vr is None else float(vr))
                     for e, tl, vr in manifest["histories"]["train"]]
    es = manifest["early_stop"]
    state.best_val = es["best_val"]
    state.best_epoch = es["best_epoch"]
    state.bad_epochs = es["bad_epochs"]
    state.stopped_early = bool(es.get("stopped", False))
    if es["has_best_weights"]:
        state.best_weights = {k[len("best!"):]: v for k, v in tensors.items()
                              if k.startswith("best!")}


def save_model_archive(path, model: CfModel, split: SplitBundle, plan: TrainPlan,
                       history=None, extra: dict | None = None) -> None:
    """Write a deployable archive of the current weights.

    The archive is a regular checkpoint whose optimizer state is empty and
    whose stop flag is set, so it loads for evaluation but never continues
    training. Schedules that manage their own optimizers (alternating,
    post-input) archive through this.
    """
    rows = list(history or [])
    state = _JointState(next_epoch=len(rows), history=rows, stopped_early=True)
    checkpoint_save(path, model, Optimizer("sgd", 0.0), Optimizer("sgd", 0.0),
                    state, split, plan, extra=extra)


def apply_checkpoint_tensors(model: CfModel, tensors: dict[str, np.ndarray]) -> None:
    """Copy a checkpoint's weight and input tensors into a rebuilt model."""
    params = model.parameters()
    for name, arr in params.items():
        stored = tensors.get(f"param!{name}")
        if stored is None:
            raise ValueError(f"checkpoint is missing tensor {name!r}")
        if stored.shape != arr.shape:
            raise ValueError(f"tensor {name!r} shape {stored.shape} != {arr.shape}")
        arr[...] = stored.astype(arr.dtype, copy=False)
    model.inputs.u_values[...] = tensors["inputs!user"]
    model.inputs.v_values[...] = tensors["inputs!item"]
