"""Training loop, optimizers, evaluation, and the variant comparison harness.

Runs are deterministic end to end: batch order comes from a per-epoch
counter-derived stream, so identical (config, seed) produce identical
loss curves and checkpoints.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .dataset import split_leave_one_subject_out
from .geometry import angular_distance_deg, pitchyaw_to_vector
from .model import (VARIANT_KINDS, GazeEstimator, LossWeights, build_variant,
                    canet_loss)
from .tensor import Tape, Tensor


class NumericError(RuntimeError):
    """Training hit a non-finite value; message names the offending tensor."""


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 0.001
    optimizer: str = "adam"        # "adam" | "sgd"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    alpha: float = 1.0             # basic-gaze loss weight
    beta: float = 2.0              # final-gaze loss weight
    width_scale: float = 1.0
    seed: int = 0
    variant: str = "canet"
    gate_activation: str = "relu"

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.variant not in VARIANT_KINDS:
            raise ValueError(f"unknown variant {self.variant!r}")
        LossWeights(self.alpha, self.beta)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta)


class Sgd:
    def __init__(self, params, lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self):
        for _, p in self.params:
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()


class Adam:
    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1 - b1 ** self.t
        bc2 = 1 - b2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * (g * g)
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()


def make_optimizer(model: GazeEstimator, cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return Sgd(model.named_params(), cfg.learning_rate)
    return Adam(model.named_params(), cfg.learning_rate,
                cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)


# ---------------------------------------------------------------------------
# batching


def records_to_arrays(records):
    """Stack records into float32 model inputs in [0, 1] plus unit labels."""
    face = np.stack([r.face for r in records]).astype(np.float32) / 255.0
    face = face.transpose(0, 3, 1, 2)
    left = np.stack([r.left_eye for r in records]).astype(np.float32)[:, None] / 255.0
    right = np.stack([r.right_eye for r in records]).astype(np.float32)[:, None] / 255.0
    gaze = np.stack([r.gaze for r in records]).astype(np.float32)
    return face, left, right, gaze


def _first_nonfinite_name(model: GazeEstimator) -> str:
    for name, p in model.named_params():
        if not np.isfinite(p.data).all():
            return name
        if p.grad is not None and not np.isfinite(p.grad).all():
            return f"{name}.grad"
    return "loss"


@dataclass
class TrainResult:
    model: GazeEstimator
    loss_curve: list = field(default_factory=list)  # per-epoch mean training loss


def train(model: GazeEstimator, records, cfg: TrainConfig) -> TrainResult:
    """Optimize the two-term angular loss over the record list.

    Shuffling uses a fresh counter-derived stream per epoch; a non-finite
    loss aborts with the first non-finite tensor named.
    """
    cfg.validate()
    records = list(records)
    if not records:
        raise ValueError("cannot train on an empty record list")
    optimizer = make_optimizer(model, cfg)
    weights = cfg.loss_weights()
    curve = []
    n = len(records)
    for epoch in range(cfg.epochs):
        perm = np.random.default_rng([cfg.seed, 101, epoch]).permutation(n)
        total = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs >= 2 rows
            face, left, right, gaze = records_to_arrays([records[i] for i in idx])
            with Tape():
                out = model.forward(Tensor(face), Tensor(left), Tensor(right), train=True)
                loss = canet_loss(out.g_b, out.g, gaze, weights)
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch}; first bad tensor: "
                        f"{_first_nonfinite_name(model)}")
                loss.backward()
            optimizer.step()
            optimizer.zero_grad()
            total += value
            batches += 1
        curve.append(total / max(batches, 1))
    return TrainResult(model, curve)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class SubjectStats:
    count: int
    mean_error_deg: float
    basic_error_deg: float


@dataclass
class EvalReport:
    mean_error_deg: float
    basic_error_deg: float
    per_subject: dict           # subject_id -> SubjectStats
    w_l_mean: float
    w_l_std: float
    count: int


def evaluate(model: GazeEstimator, records, batch_size: int = 64) -> EvalReport:
    """Mean angular error (degrees) of the final and basic outputs.

    Pure: eval-mode forward, no tape, no parameter or statistic mutation.
    """
    records = list(records)
    if not records:
        raise ValueError("cannot evaluate an empty record list")
    errors = []
    basics = []
    weights = []
    subjects = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        face, left, right, gaze = records_to_arrays(chunk)
        out = model.forward(Tensor(face), Tensor(left), Tensor(right), train=False)
        errors.append(angular_distance_deg(out.g.data, gaze))
        basics.append(angular_distance_deg(out.g_b.data, gaze))
        if "w_l" in out.diagnostics:
            weights.append(out.diagnostics["w_l"])
        subjects.extend(r.subject_id for r in chunk)
    errors = np.concatenate(errors)
    basics = np.concatenate(basics)
    subjects = np.asarray(subjects)
    per_subject = {}
    for sid in sorted(set(subjects.tolist())):
        mask = subjects == sid
        per_subject[sid] = SubjectStats(int(mask.sum()),
                                        float(errors[mask].mean()),
                                        float(basics[mask].mean()))
    if weights:
        w_all = np.concatenate(weights)
        w_l_mean, w_l_std = float(w_all.mean()), float(w_all.std())
    else:
        w_l_mean = w_l_std = float("nan")  # variant has no eye fusion
    return EvalReport(
        mean_error_deg=float(errors.mean()),
        basic_error_deg=float(basics.mean()),
        per_subject=per_subject,
        w_l_mean=w_l_mean,
        w_l_std=w_l_std,
        count=len(records),
    )


def constant_predictor_error_deg(pitch_range_deg, yaw_range_deg,
                                 direction=(0.0, 0.0, -1.0),
                                 n: int = 200_000, seed: int = 0) -> float:
    """Monte-Carlo mean angular error of a constant predictor against labels
    uniform in the given pitch/yaw box (the no-skill baseline)."""
    rng = np.random.default_rng(seed)
    pitch = rng.uniform(*np.radians(pitch_range_deg), size=n)
    yaw = rng.uniform(*np.radians(yaw_range_deg), size=n)
    labels = pitchyaw_to_vector(pitch, yaw)
    d = np.asarray(direction, dtype=np.float64)
    return float(np.mean(angular_distance_deg(labels, d[None, :])))


# ---------------------------------------------------------------------------
# variant comparison harness


def run_ablation_suite(dataset, cfg: TrainConfig, held_out: int | None = None,
                       kinds=VARIANT_KINDS) -> dict:
    """Train every variant under an identical seed/budget and evaluate on the
    held-out subject. Returns {kind: EvalReport} in VARIANT_KINDS order."""
    records = list(dataset)
    if held_out is None:
        held_out = min(r.subject_id for r in records)
    train_recs, test_recs = split_leave_one_subject_out(records, held_out)
    table = {}
    for kind in kinds:
        variant_cfg = TrainConfig(**{**cfg.__dict__, "variant": kind})
        model = build_variant(kind, cfg.width_scale, seed=cfg.seed,
                              gate_activation=cfg.gate_activation)
        train(model, train_recs, variant_cfg)
        table[kind] = evaluate(model, test_recs)
    return table


# ---------------------------------------------------------------------------
# CSV output


def write_loss_curve(path, curve):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss"])
        for i, v in enumerate(curve):
            writer.writerow([i, f"{v:.8f}"])


def write_eval_report(path, report: EvalReport):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject", "count", "mean_error_deg", "basic_error_deg"])
        for sid, st in sorted(report.per_subject.items()):
            writer.writerow([sid, st.count, f"{st.mean_error_deg:.6f}",
                             f"{st.basic_error_deg:.6f}"])
        writer.writerow(["overall", report.count, f"{report.mean_error_deg:.6f}",
                         f"{report.basic_error_deg:.6f}"])


def write_ablation_table(path, table: dict):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "basic_error_deg", "refined_error_deg",
                         "w_l_mean", "w_l_std"])
        for kind, report in table.items():
            writer.writerow([kind, f"{report.basic_error_deg:.6f}",
                             f"{report.mean_error_deg:.6f}",
                             f"{report.w_l_mean:.6f}", f"{report.w_l_std:.6f}"])
