"""Coarse-to-fine gaze model assembly and its ablation variants.

The full model predicts a basic gaze direction from the face image, then a
residual from the two eye images, and outputs their vector sum. A gated
state update couples the two stages: the state produced while estimating
the basic direction both queries the eye-feature attention and seeds the
residual stage. Attention scores each eye with a shared additive scorer
and softmax-normalizes the pair, so the fused eye feature is always a
convex combination of the two eye features.

Gate update, per step (f is the incoming feature, h the previous state):

    z = sigmoid(Wz [h, f])
    r = sigmoid(Wr [h, f])
    h~ = ReLU(Wh [r * h, f])
    h' = (1 - z) * h + z * h~

The candidate activation is ReLU by design (a tanh switch exists for
comparison runs).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import (EYE_SPEC, FACE_SPEC, Backbone, Linear, build_backbone,
                     load_weights, save_weights)
from .tensor import ShapeError, Tensor

VARIANT_KINDS = (
    "canet",
    "face_net",
    "eye_net",
    "joint_net",
    "gate_ablation",
    "attention_ablation",
    "one_gram",
    "fine_to_coarse",
    "face_attention",
    "eye_attention",
)


# ---------------------------------------------------------------------------
# attention


class AttentionParams:
    """Additive two-eye scorer: m = v^T tanh(W1^T q + W2^T f), shared v/W1/W2."""

    def __init__(self, query_dim: int, feat_dim: int, proj_dim: int, rng, dtype=np.float32):
        self.w1 = Tensor(rng.normal(0, math.sqrt(2 / query_dim),
                                    size=(query_dim, proj_dim)).astype(dtype),
                         requires_grad=True)
        self.w2 = Tensor(rng.normal(0, math.sqrt(2 / feat_dim),
                                    size=(feat_dim, proj_dim)).astype(dtype),
                         requires_grad=True)
        self.v = Tensor(rng.normal(0, math.sqrt(2 / proj_dim),
                                   size=(proj_dim, 1)).astype(dtype),
                        requires_grad=True)

    def scores(self, query, f_l, f_r):
        q1 = T.matmul(query, self.w1)
        ml = T.matmul(T.tanh(T.add(q1, T.matmul(f_l, self.w2))), self.v)
        mr = T.matmul(T.tanh(T.add(q1, T.matmul(f_r, self.w2))), self.v)
        return ml, mr

    def params(self, prefix):
        return [(f"{prefix}.w1", self.w1), (f"{prefix}.w2", self.w2),
                (f"{prefix}.v", self.v)]


class QueryOnlyAttention:
    """Scores from the query feature alone; needs one score vector per eye
    since a shared scorer would tie the two scores together."""

    def __init__(self, query_dim: int, proj_dim: int, rng, dtype=np.float32):
        self.w1 = Tensor(rng.normal(0, math.sqrt(2 / query_dim),
                                    size=(query_dim, proj_dim)).astype(dtype),
                         requires_grad=True)
        self.v_left = Tensor(rng.normal(0, math.sqrt(2 / proj_dim),
                                        size=(proj_dim, 1)).astype(dtype),
                             requires_grad=True)
        self.v_right = Tensor(rng.normal(0, math.sqrt(2 / proj_dim),
                                         size=(proj_dim, 1)).astype(dtype),
                              requires_grad=True)

    def scores(self, query, f_l, f_r):
        hidden = T.tanh(T.matmul(query, self.w1))
        return T.matmul(hidden, self.v_left), T.matmul(hidden, self.v_right)

    def params(self, prefix):
        return [(f"{prefix}.w1", self.w1), (f"{prefix}.v_left", self.v_left),
                (f"{prefix}.v_right", self.v_right)]


class EyesOnlyAttention:
    """Scores from each eye's own feature; the query is ignored."""

    def __init__(self, feat_dim: int, proj_dim: int, rng, dtype=np.float32):
        self.w2 = Tensor(rng.normal(0, math.sqrt(2 / feat_dim),
                                    size=(feat_dim, proj_dim)).astype(dtype),
                         requires_grad=True)
        self.v = Tensor(rng.normal(0, math.sqrt(2 / proj_dim),
                                   size=(proj_dim, 1)).astype(dtype),
                        requires_grad=True)

    def scores(self, query, f_l, f_r):
        ml = T.matmul(T.tanh(T.matmul(f_l, self.w2)), self.v)
        mr = T.matmul(T.tanh(T.matmul(f_r, self.w2)), self.v)
        return ml, mr

    def params(self, prefix):
        return [(f"{prefix}.w2", self.w2), (f"{prefix}.v", self.v)]


@dataclass
class AttentionOutput:
    m_l: Tensor | None
    m_r: Tensor | None
    w_l: Tensor
    w_r: Tensor
    f_e: Tensor


def attention_fuse(query, f_l, f_r, params) -> AttentionOutput:
    """Score both eyes, softmax the pair, and mix the eye features.

    With params None the weights are fixed at 0.5/0.5 (attention ablation).
    """
    if f_l.shape != f_r.shape:
        raise ShapeError(f"eye features differ: {tuple(f_l.shape)} vs {tuple(f_r.shape)}")
    n, d = f_l.shape
    if params is None:
        half = Tensor(np.full((n, 1), 0.5, dtype=f_l.dtype))
        f_e = T.add(T.scale(f_l, 0.5), T.scale(f_r, 0.5))
        return AttentionOutput(None, None, half, half, f_e)
    ml, mr = params.scores(query, f_l, f_r)
    w = T.softmax(T.concat(ml, mr, axis=1), axis=1)
    wl = T.column(w, 0)
    wr = T.column(w, 1)
    f_e = T.add(T.mul(T.expand1(wl, d), f_l), T.mul(T.expand1(wr, d), f_r))
    return AttentionOutput(ml, mr, wl, wr, f_e)


# ---------------------------------------------------------------------------
# gated state update


class GateParams:
    """Three affine maps [h, f] -> state, with the z-gate bias started at 1
    so early updates flow."""

    def __init__(self, feat_dim: int, state_dim: int, rng, dtype=np.float32):
        self.feat_dim = feat_dim
        self.state_dim = state_dim
        full = state_dim + feat_dim
        self.wz = Linear(full, state_dim, rng, dtype=dtype)
        self.wz.bias.data[:] = 1.0
        self.wr = Linear(full, state_dim, rng, dtype=dtype)
        self.wh = Linear(full, state_dim, rng, dtype=dtype)

    def params(self, prefix):
        return (self.wz.params(f"{prefix}.wz") + self.wr.params(f"{prefix}.wr")
                + self.wh.params(f"{prefix}.wh"))


@dataclass
class GateStep:
    h: Tensor
    z: Tensor
    r: Tensor
    h_tilde: Tensor


def gate_step(h: Tensor, f: Tensor, params: GateParams,
              activation: str = "relu") -> GateStep:
    """One gated update; see the module docstring for the equations."""
    if h.shape[1] != params.state_dim or f.shape[1] != params.feat_dim:
        raise ShapeError(
            f"gate_step dims: state {tuple(h.shape)}, feature {tuple(f.shape)}, "
            f"expected state {params.state_dim} and feature {params.feat_dim}")
    hf = T.concat(h, f, axis=1)
    z = T.sigmoid(params.wz.forward(hf))
    r = T.sigmoid(params.wr.forward(hf))
    candidate_in = T.concat(T.mul(r, h), f, axis=1)
    pre = params.wh.forward(candidate_in)
    h_tilde = T.relu(pre) if activation == "relu" else T.tanh(pre)
    ones = Tensor(np.ones(z.shape, dtype=z.dtype))
    h_new = T.add(T.mul(T.sub(ones, z), h), T.mul(z, h_tilde))
    return GateStep(h_new, z, r, h_tilde)


# ---------------------------------------------------------------------------
# loss


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 2.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


def angular_loss_rows(pred: Tensor, target: np.ndarray) -> Tensor:
    """Per-row angle (radians) between predictions (N,3) and unit targets."""
    norm_sq = T.tensor_sum(T.mul(pred, pred), axis=1)
    if np.any(norm_sq.data < 1e-12):
        raise ValueError("zero-norm gaze prediction (dead network?)")
    tgt = Tensor(np.asarray(target, dtype=pred.dtype))
    dot = T.tensor_sum(T.mul(pred, tgt), axis=1)
    ratio = T.div(dot, T.sqrt(norm_sq))
    return T.acos_clamped(ratio)


def canet_loss(g_b: Tensor, g: Tensor, g_star: np.ndarray,
               weights: LossWeights | None = None) -> Tensor:
    """Batch mean of alpha * angle(g_b, g*) + beta * angle(g, g*)."""
    w = weights or LossWeights()
    g_star = np.asarray(g_star)
    norms = np.linalg.norm(g_star, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-4):
        raise ValueError("ground-truth gaze rows must be unit-norm")
    basic = T.mean(angular_loss_rows(g_b, g_star))
    refined = T.mean(angular_loss_rows(g, g_star))
    return T.add(T.scale(basic, w.alpha), T.scale(refined, w.beta))


# ---------------------------------------------------------------------------
# model assembly


@dataclass
class ForwardResult:
    g_b: Tensor
    g_r: Tensor
    g: Tensor
    diagnostics: dict = field(default_factory=dict)


class GazeEstimator:
    """One of the VARIANT_KINDS networks; built through build_variant."""

    def __init__(self, kind: str, width_scale: float, seed: int,
                 dtype=np.float32, gate_activation: str = "relu"):
        if kind not in VARIANT_KINDS:
            raise ValueError(f"unknown variant kind {kind!r}; expected one of {VARIANT_KINDS}")
        self.kind = kind
        self.width_scale = width_scale
        self.dtype = dtype
        self.gate_activation = gate_activation
        rng = np.random.default_rng(seed)

        face_spec = FACE_SPEC.scaled(width_scale)
        eye_spec = EYE_SPEC.scaled(width_scale)
        s = face_spec.feature_dim
        self.feature_dim = s

        def seeded_backbone(spec):
            return build_backbone(spec, seed=int(rng.integers(0, 2**31)), dtype=dtype)

        self.face_bb: Backbone | None = None
        self.eye_l_bb: Backbone | None = None
        self.eye_r_bb: Backbone | None = None
        self.gate1: GateParams | None = None
        self.gate2: GateParams | None = None
        self.attention = None
        self.head_b: Linear | None = None
        self.head_r: Linear | None = None

        uses_face = kind != "eye_net"
        uses_eyes = kind != "face_net"
        if uses_face:
            self.face_bb = seeded_backbone(face_spec)
        if uses_eyes:
            self.eye_l_bb = seeded_backbone(eye_spec)
            self.eye_r_bb = seeded_backbone(eye_spec)

        if kind in ("canet", "attention_ablation", "one_gram", "fine_to_coarse",
                    "face_attention", "eye_attention"):
            self.gate1 = GateParams(s, s, rng, dtype=dtype)
            self.gate2 = GateParams(s, s, rng, dtype=dtype)
            self.head_b = Linear(s, 3, rng, dtype=dtype)
            self.head_r = Linear(s, 3, rng, dtype=dtype)
        elif kind == "face_net":
            self.gate1 = GateParams(s, s, rng, dtype=dtype)
            self.head_b = Linear(s, 3, rng, dtype=dtype)
        elif kind == "eye_net":
            self.gate1 = GateParams(2 * s, s, rng, dtype=dtype)
            self.head_b = Linear(s, 3, rng, dtype=dtype)
        elif kind == "joint_net":
            self.head_b = Linear(3 * s, 3, rng, dtype=dtype)
        elif kind == "gate_ablation":
            self.head_b = Linear(s, 3, rng, dtype=dtype)
            self.head_r = Linear(2 * s, 3, rng, dtype=dtype)

        if kind in ("canet", "one_gram", "fine_to_coarse", "gate_ablation"):
            self.attention = AttentionParams(s, s, s, rng, dtype=dtype)
        elif kind == "face_attention":
            self.attention = QueryOnlyAttention(s, s, rng, dtype=dtype)
        elif kind == "eye_attention":
            self.attention = EyesOnlyAttention(s, s, rng, dtype=dtype)
        # attention_ablation / face_net / eye_net / joint_net: no attention params

    # -- plumbing

    def _zero_state(self, n: int) -> Tensor:
        return Tensor(np.zeros((n, self.feature_dim), dtype=self.dtype))

    def _check_inputs(self, face, left, right):
        uses_face = self.face_bb is not None
        uses_eyes = self.eye_l_bb is not None
        if uses_face and (face is None or face.data.ndim != 4 or face.shape[1] != 3):
            raise ShapeError("face input must be (N, 3, H, W)")
        if uses_eyes:
            for name, img in (("left", left), ("right", right)):
                if img is None or img.data.ndim != 4 or img.shape[1] != 1:
                    raise ShapeError(f"{name} eye input must be (N, 1, H, W)")

    def forward(self, face, left, right, train: bool = False) -> ForwardResult:
        self._check_inputs(face, left, right)
        kind = self.kind
        act = self.gate_activation

        if kind == "face_net":
            n = face.shape[0]
            f_f = self.face_bb.forward(face, train)
            step = gate_step(self._zero_state(n), f_f, self.gate1, act)
            g = self.head_b.forward(step.h)
            return self._single_output(g, {"h1": step.h.data})

        if kind == "eye_net":
            n = left.shape[0]
            f_l = self.eye_l_bb.forward(left, train)
            f_r = self.eye_r_bb.forward(right, train)
            step = gate_step(self._zero_state(n), T.concat(f_l, f_r, axis=1),
                             self.gate1, act)
            g = self.head_b.forward(step.h)
            return self._single_output(g, {"h1": step.h.data})

        if kind == "joint_net":
            f_f = self.face_bb.forward(face, train)
            f_l = self.eye_l_bb.forward(left, train)
            f_r = self.eye_r_bb.forward(right, train)
            g = self.head_b.forward(T.concat(T.concat(f_f, f_l, axis=1), f_r, axis=1))
            return self._single_output(g, {})

        if kind == "gate_ablation":
            f_f = self.face_bb.forward(face, train)
            f_l = self.eye_l_bb.forward(left, train)
            f_r = self.eye_r_bb.forward(right, train)
            g_b = self.head_b.forward(f_f)
            att = attention_fuse(f_f, f_l, f_r, self.attention)
            g_r = self.head_r.forward(T.concat(f_f, att.f_e, axis=1))
            g = T.add(g_b, g_r)
            return ForwardResult(g_b, g_r, g, self._diag(att, None, None))

        if kind == "fine_to_coarse":
            n = left.shape[0]
            f_f = self.face_bb.forward(face, train)
            f_l = self.eye_l_bb.forward(left, train)
            f_r = self.eye_r_bb.forward(right, train)
            att = attention_fuse(self._zero_state(n), f_l, f_r, self.attention)
            step1 = gate_step(self._zero_state(n), att.f_e, self.gate1, act)
            g_b = self.head_b.forward(step1.h)
            step2 = gate_step(step1.h, f_f, self.gate2, act)
            g_r = self.head_r.forward(step2.h)
            g = T.add(g_b, g_r)
            return ForwardResult(g_b, g_r, g, self._diag(att, step1, step2))

        # canet / attention_ablation / one_gram / face_attention / eye_attention
        n = face.shape[0]
        f_f = self.face_bb.forward(face, train)
        step1 = gate_step(self._zero_state(n), f_f, self.gate1, act)
        g_b = self.head_b.forward(step1.h)
        f_l = self.eye_l_bb.forward(left, train)
        f_r = self.eye_r_bb.forward(right, train)
        att = attention_fuse(step1.h, f_l, f_r, self.attention)
        residual_state = self._zero_state(n) if kind == "one_gram" else step1.h
        step2 = gate_step(residual_state, att.f_e, self.gate2, act)
        g_r = self.head_r.forward(step2.h)
        g = T.add(g_b, g_r)
        diag = self._diag(att, step1, step2)
        diag["residual_state_input"] = residual_state.data
        return ForwardResult(g_b, g_r, g, diag)

    @staticmethod
    def _diag(att, step1, step2):
        diag = {"w_l": att.w_l.data[:, 0].copy(), "w_r": att.w_r.data[:, 0].copy()}
        if step1 is not None:
            diag["h1"] = step1.h.data
        if step2 is not None:
            diag["h2"] = step2.h.data
        return diag

    def _single_output(self, g: Tensor, diag: dict) -> ForwardResult:
        zero = Tensor(np.zeros(g.shape, dtype=g.dtype))
        return ForwardResult(g, zero, g, diag)

    # -- parameter access

    def named_params(self):
        out = []
        if self.face_bb is not None:
            out += self.face_bb.params("face")
        if self.eye_l_bb is not None:
            out += self.eye_l_bb.params("eye_l")
            out += self.eye_r_bb.params("eye_r")
        if self.gate1 is not None:
            out += self.gate1.params("gate1")
        if self.gate2 is not None:
            out += self.gate2.params("gate2")
        if self.attention is not None:
            out += self.attention.params("attention")
        if self.head_b is not None:
            out += self.head_b.params("head_b")
        if self.head_r is not None:
            out += self.head_r.params("head_r")
        return out

    def named_state(self):
        """Parameters plus batch-norm running statistics (checkpoint content)."""
        out = []
        if self.face_bb is not None:
            out += self.face_bb.state("face")
        if self.eye_l_bb is not None:
            out += self.eye_l_bb.state("eye_l")
            out += self.eye_r_bb.state("eye_r")
        if self.gate1 is not None:
            out += self.gate1.params("gate1")
        if self.gate2 is not None:
            out += self.gate2.params("gate2")
        if self.attention is not None:
            out += self.attention.params("attention")
        if self.head_b is not None:
            out += self.head_b.params("head_b")
        if self.head_r is not None:
            out += self.head_r.params("head_r")
        return out

    def param_count(self) -> int:
        return sum(p.size for _, p in self.named_params())

    def zero_grads(self):
        for _, p in self.named_params():
            p.zero_grad()


def build_variant(kind: str, width_scale: float = 1.0, seed: int = 0,
                  dtype=np.float32, gate_activation: str = "relu") -> GazeEstimator:
    return GazeEstimator(kind, width_scale, seed, dtype=dtype,
                         gate_activation=gate_activation)


# ---------------------------------------------------------------------------
# checkpoints: layers weight file plus meta entries describing the variant


def save_checkpoint(model: GazeEstimator, path):
    meta = [
        ("meta.variant", np.array([VARIANT_KINDS.index(model.kind)], dtype=np.float32)),
        ("meta.width_scale", np.array([model.width_scale], dtype=np.float32)),
        ("meta.gate_activation",
         np.array([0.0 if model.gate_activation == "relu" else 1.0], dtype=np.float32)),
    ]
    save_weights(path, meta + model.named_state())


def load_checkpoint(path) -> GazeEstimator:
    blobs = load_weights(path)
    try:
        kind = VARIANT_KINDS[int(blobs.pop("meta.variant")[0])]
        width_scale = float(blobs.pop("meta.width_scale")[0])
        gate_activation = "relu" if blobs.pop("meta.gate_activation")[0] == 0 else "tanh"
    except (KeyError, IndexError) as exc:
        raise ValueError(f"checkpoint {path} lacks variant metadata") from exc
    model = build_variant(kind, width_scale, seed=0, gate_activation=gate_activation)
    expected = model.named_state()
    names = [n for n, _ in expected]
    if set(names) != set(blobs):
        missing = set(names) - set(blobs)
        extra = set(blobs) - set(names)
        raise ValueError(f"checkpoint mismatch: missing {sorted(missing)[:3]}, "
                         f"unexpected {sorted(extra)[:3]}")
    for name, holder in expected:
        arr = blobs[name]
        if isinstance(holder, Tensor):
            if holder.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {holder.shape} vs {arr.shape}")
            holder.data = arr.astype(holder.dtype)
        else:
            holder[...] = arr.astype(holder.dtype)
    return model
