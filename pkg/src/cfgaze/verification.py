"""Finite-difference verification suites for the gradcheck command.

Everything runs in float64 with fixed seeds. Op inputs are kept away from
ReLU/max/clamp kinks, where central differences are mathematically invalid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from . import model as M
from . import tensor as T
from .gradcheck import finite_difference_check
from .tensor import Tensor


@dataclass
class CheckOutcome:
    name: str
    worst_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.worst_rel_err <= self.tol


def _t(rng, shape, shift=0.0):
    return Tensor(rng.normal(size=shape) + shift, requires_grad=True)


def _weighted_sum(t, seed=99):
    w = Tensor(np.random.default_rng(seed).normal(size=t.shape).astype(np.float64))
    return T.tensor_sum(T.mul(t, w))


def _kink_free(rng, shape, margin=5e-3):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, x + np.sign(x + 0.5) * 2 * margin, x)


def op_checks(tol: float = 1e-5, h: float = 1e-5):
    """Yield (name, callable) pairs; each callable returns a GradCheckReport."""
    rng = np.random.default_rng(2024)

    def binary(op, shift=0.0):
        a = Tensor(_kink_free(rng, 6), requires_grad=True)
        b = Tensor(_kink_free(rng, 6) + shift, requires_grad=True)
        return finite_difference_check(
            lambda: _weighted_sum(op(a, b)), [("a", a), ("b", b)], h=h, tol=tol)

    def unary(op, data=None):
        x = Tensor(_kink_free(rng, 6) if data is None else data, requires_grad=True)
        return finite_difference_check(
            lambda: _weighted_sum(op(x)), [("x", x)], h=h, tol=tol)

    yield "add", lambda: binary(T.add)
    yield "sub", lambda: binary(T.sub)
    yield "mul", lambda: binary(T.mul)
    yield "div", lambda: binary(T.div, shift=4.0)
    yield "relu", lambda: unary(T.relu)
    yield "tanh", lambda: unary(T.tanh)
    yield "sigmoid", lambda: unary(T.sigmoid)
    yield "softmax", lambda: unary(T.softmax)
    yield "sqrt", lambda: unary(T.sqrt, data=rng.uniform(0.5, 3, size=6))
    yield "clamp", lambda: unary(lambda t: T.clamp(t, -1.0, 1.0),
                                 data=_kink_free(rng, 6, margin=2e-3) * 1.5)
    yield "acos", lambda: unary(T.acos, data=rng.uniform(-0.8, 0.8, size=6))

    def matmul_check():
        a = _t(rng, (4, 3))
        b = _t(rng, (3, 5))
        return finite_difference_check(
            lambda: _weighted_sum(T.matmul(a, b)), [("a", a), ("b", b)], h=h, tol=tol)

    yield "matmul", matmul_check

    def concat_check():
        a = _t(rng, (2, 3))
        b = _t(rng, (2, 4))
        return finite_difference_check(
            lambda: _weighted_sum(T.concat(a, b, axis=1)), [("a", a), ("b", b)],
            h=h, tol=tol)

    yield "concat", concat_check

    def conv_check(stride):
        conv = L.Conv2d(2, 3, np.random.default_rng(7), stride=stride, dtype=np.float64)
        x = _t(rng, (2, 2, 6, 6))
        return finite_difference_check(
            lambda: _weighted_sum(L.global_avg_pool(conv.forward(x))),
            [("weight", conv.weight), ("bias", conv.bias), ("x", x)], h=h, tol=tol)

    yield "conv2d", lambda: conv_check(1)
    yield "conv2d_stride2", lambda: conv_check(2)

    def bn_check(train):
        bn = L.BatchNorm2d(3, dtype=np.float64)
        bn.running_mean[:] = rng.normal(size=3)
        bn.running_var[:] = rng.uniform(0.5, 2.0, size=3)
        x = _t(rng, (3, 3, 4, 4))
        return finite_difference_check(
            lambda: _weighted_sum(bn.forward(x, train=train)),
            [("gamma", bn.gamma), ("beta", bn.beta), ("x", x)], h=h, tol=tol)

    yield "batchnorm_train", lambda: bn_check(True)
    yield "batchnorm_eval", lambda: bn_check(False)

    def pool_check():
        # well-separated integers: no window ties within h of each other
        x = Tensor(np.random.default_rng(3).permutation(64).astype(np.float64)
                   .reshape(1, 1, 8, 8), requires_grad=True)
        return finite_difference_check(
            lambda: _weighted_sum(L.maxpool2x2(x)), [("x", x)], h=h, tol=tol)

    yield "maxpool2x2", pool_check

    def gap_check():
        x = _t(rng, (2, 3, 4, 5))
        return finite_difference_check(
            lambda: _weighted_sum(L.global_avg_pool(x)), [("x", x)], h=h, tol=tol)

    yield "global_avg_pool", gap_check

    def linear_check():
        lin = L.Linear(4, 3, np.random.default_rng(11), dtype=np.float64)
        x = _t(rng, (3, 4))
        return finite_difference_check(
            lambda: _weighted_sum(lin.forward(x)),
            [("weight", lin.weight), ("bias", lin.bias), ("x", x)], h=h, tol=tol)

    yield "linear", linear_check

    def attention_check():
        params = M.AttentionParams(4, 4, 4, np.random.default_rng(13), dtype=np.float64)
        q = _t(rng, (2, 4))
        fl = _t(rng, (2, 4))
        fr = _t(rng, (2, 4))

        def f():
            out = M.attention_fuse(q, fl, fr, params)
            return _weighted_sum(out.f_e)

        return finite_difference_check(
            f, params.params("att") + [("q", q), ("fl", fl), ("fr", fr)], h=h, tol=tol)

    yield "attention_fuse", attention_check

    def gate_check():
        params = M.GateParams(4, 4, np.random.default_rng(17), dtype=np.float64)
        hs = _t(rng, (2, 4))
        f = _t(rng, (2, 4))
        return finite_difference_check(
            lambda: _weighted_sum(M.gate_step(hs, f, params).h),
            params.params("gate") + [("h", hs), ("f", f)], h=h, tol=tol)

    yield "gate_step", gate_check

    def loss_check():
        rng2 = np.random.default_rng(19)
        g_star = rng2.normal(size=(3, 3))
        g_star /= np.linalg.norm(g_star, axis=1, keepdims=True)
        g_b = Tensor(rng2.normal(size=(3, 3)) * 0.8, requires_grad=True)
        g_r = Tensor(rng2.normal(size=(3, 3)) * 0.3, requires_grad=True)
        return finite_difference_check(
            lambda: M.canet_loss(g_b, T.add(g_b, g_r), g_star),
            [("g_b", g_b), ("g_r", g_r)], h=h, tol=tol)

    yield "angular_loss", loss_check


def run_op_suite(tol: float = 1e-5, h: float = 1e-5):
    """Run every op-level check; returns a list of CheckOutcome."""
    outcomes = []
    for name, runner in op_checks(tol=tol, h=h):
        report = runner()
        outcomes.append(CheckOutcome(name, float(report.worst.max_rel_err), tol))
    return outcomes


def run_model_suite(tol: float = 1e-4, h: float = 1e-5,
                    entries_per_param: int = 3) -> CheckOutcome:
    """Whole-model check: full forward + two-term loss at 1/16 width on
    8x8 face / 6x10 eye inputs, sampled parameter entries.

    Uses the eval-mode forward: with a batch of 2 at this width, train-mode
    batch norm has near-zero channel variances whose 1/sqrt(var) curvature
    swamps central differences. Train-mode batch norm gradients are covered
    by the op-level check; this one verifies the full composition.
    """
    model = M.build_variant("canet", 1 / 16, seed=5, dtype=np.float64)
    rng = np.random.default_rng(23)
    # non-trivial running stats so the eval-mode affine path is exercised
    for bb in (model.face_bb, model.eye_l_bb, model.eye_r_bb):
        for bn in bb.bns:
            bn.running_mean[:] = rng.normal(scale=0.2, size=bn.channels)
            bn.running_var[:] = rng.uniform(0.5, 1.5, size=bn.channels)
    face = Tensor(rng.uniform(0, 1, size=(2, 3, 8, 8)))
    left = Tensor(rng.uniform(0, 1, size=(2, 1, 6, 10)))
    right = Tensor(rng.uniform(0, 1, size=(2, 1, 6, 10)))
    g_star = rng.normal(size=(2, 3))
    g_star /= np.linalg.norm(g_star, axis=1, keepdims=True)

    def f():
        out = model.forward(face, left, right, train=False)
        return M.canet_loss(out.g_b, out.g, g_star)

    report = finite_difference_check(
        f, model.named_params(), h=h, tol=tol,
        max_entries_per_param=entries_per_param, rng=np.random.default_rng(31))
    return CheckOutcome("model_loss", float(report.worst.max_rel_err), tol)
