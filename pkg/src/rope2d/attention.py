"""Scaled dot-product attention with pluggable position-embedding modes.

A mode is one of: no position handling, a relative bias added to the
logits (or, behind an explicit flag, literally added to the probabilities
after softmax), rotary rotation of queries and keys, or rotation plus
bias. APE is not a mode here: it is added to token features upstream.
"""

import math
from dataclasses import dataclass

import numpy as np

from .rope import RotationTable, apply_rope
from .serialize import matrix_header, matrix_rows, write_csv

PLACEMENTS = ("pre_softmax", "post_softmax")


@dataclass(eq=False)
class PeMode:
    """Position-embedding recipe for one head.

    `bias` is an expanded (N, N) matrix (see `posembed.expand_rpb`);
    `placement` only matters when a bias is present. The post-softmax
    placement reproduces a literal bias-after-softmax reading and leaves
    rows unnormalized; it is never the default.
    """

    kind: str
    rotation: RotationTable | None = None
    bias: np.ndarray | None = None
    placement: str = "pre_softmax"

    @classmethod
    def none(cls) -> "PeMode":
        return cls("none")

    @classmethod
    def rope(cls, rotation: RotationTable) -> "PeMode":
        return cls("rope", rotation=rotation)

    @classmethod
    def rpb(cls, bias: np.ndarray, placement: str = "pre_softmax") -> "PeMode":
        return cls("rpb", bias=np.asarray(bias, dtype=float), placement=placement)

    @classmethod
    def rope_plus_rpb(cls, rotation: RotationTable, bias: np.ndarray,
                      placement: str = "pre_softmax") -> "PeMode":
        return cls("rope+rpb", rotation=rotation,
                   bias=np.asarray(bias, dtype=float), placement=placement)


@dataclass(eq=False)
class AttentionResult:
    """One head's attention: probabilities plus the pre-softmax values.

    For the quarantined post-softmax bias placement, `probs` holds the
    literal softmax-plus-bias values (rows need not sum to 1) and `logits`
    the scaled similarities without the bias.
    """

    probs: np.ndarray  # (N, N)
    logits: np.ndarray | None  # (N, N), input to softmax
    d_head: int
    head_index: int | None = None
    mode_label: str | None = None

    @property
    def n_tokens(self) -> int:
        return self.probs.shape[0]

    def to_csv(self, path) -> None:
        write_csv(path, matrix_header(self.n_tokens), matrix_rows(self.probs))

    def to_json_dict(self, grid=None) -> dict:
        payload = {"mode": self.mode_label, "head_index": self.head_index,
                   "d_head": self.d_head,
                   "probs": [[float(p) for p in row] for row in self.probs]}
        if self.logits is not None:
            payload["logits"] = [[float(v) for v in row] for row in self.logits]
        if grid is not None:
            payload["grid"] = grid.to_json_dict()
        return payload


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row softmax with max subtraction for stability."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def attend(q: np.ndarray, k: np.ndarray, mode: PeMode | None = None) -> AttentionResult:
    """Single-head attention over (N, d_head) queries and keys.

    The 1/sqrt(d_head) scaling is applied in every mode, including the
    rotary ones.
    """
    mode = mode or PeMode.none()
    q = np.asarray(q, dtype=float)
    k = np.asarray(k, dtype=float)
    if q.ndim != 2 or q.shape != k.shape:
        raise ValueError(f"q and k must share an (N, d_head) shape, "
                         f"got {q.shape} and {k.shape}")
    if not (np.isfinite(q).all() and np.isfinite(k).all()):
        raise FloatingPointError("non-finite values in q or k")
    n, d_head = q.shape
    if mode.placement not in PLACEMENTS:
        raise ValueError(f"unknown bias placement {mode.placement!r}")
    if mode.rotation is not None:
        q = apply_rope(q, mode.rotation)
        k = apply_rope(k, mode.rotation)
    logits = (q @ k.T) / math.sqrt(d_head)
    if mode.bias is not None:
        if mode.bias.shape != (n, n):
            raise ValueError(f"bias shape {mode.bias.shape} != ({n}, {n})")
        if not np.isfinite(mode.bias).all():
            raise FloatingPointError("non-finite values in bias")
        if mode.placement == "pre_softmax":
            logits = logits + mode.bias
    probs = softmax_rows(logits)
    if mode.bias is not None and mode.placement == "post_softmax":
        probs = probs + mode.bias
    return AttentionResult(probs, logits, d_head, mode_label=mode.kind)


@dataclass(eq=False)
class AttentionWeights:
    """Per-head projection triplets plus the shared output projection."""

    w_q: np.ndarray  # (heads, d, d_head)
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray  # (heads * d_head, d)

    def __post_init__(self):
        for name in ("w_q", "w_k", "w_v"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim != 3:
                raise ValueError(f"{name} must be (heads, d, d_head)")
            setattr(self, name, arr)
        self.w_o = np.asarray(self.w_o, dtype=float)
        if self.w_q.shape != self.w_k.shape or self.w_q.shape != self.w_v.shape:
            raise ValueError("w_q, w_k, w_v must share a shape")

    @property
    def head_count(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_head(self) -> int:
        return self.w_q.shape[2]

    @classmethod
    def identity(cls, head_count: int, d: int) -> "AttentionWeights":
        """Each head projects a contiguous slice of the model width."""
        d_head = d // head_count
        w = np.zeros((head_count, d, d_head))
        for h in range(head_count):
            w[h, h * d_head:(h + 1) * d_head] = np.eye(d_head)
        return cls(w.copy(), w.copy(), w.copy(), np.eye(d))


def multi_head_attend(x: np.ndarray, weights: AttentionWeights,
                      modes=None) -> tuple:
    """Standard multi-head composition with a position mode per head.

    Returns the (N, d) output and the per-head AttentionResults in head
    order. `modes` may be None (no position handling anywhere), a single
    PeMode applied to every head, or a list with one entry per head.
    """
    x = np.asarray(x, dtype=float)
    h, d, d_head = weights.w_q.shape
    if x.ndim != 2 or x.shape[1] != d:
        raise ValueError(f"tokens must be (N, {d}), got {x.shape}")
    if d != h * d_head:
        raise ValueError(f"model width {d} != head_count {h} x d_head {d_head}")
    if modes is None or isinstance(modes, PeMode):
        modes = [modes or PeMode.none()] * h
    if len(modes) != h:
        raise ValueError(f"need one mode per head, got {len(modes)} for {h} heads")
    results = []
    head_outs = []
    for i in range(h):
        q = x @ weights.w_q[i]
        k = x @ weights.w_k[i]
        v = x @ weights.w_v[i]
        res = attend(q, k, modes[i])
        res.head_index = i
        results.append(res)
        head_outs.append(res.probs @ v)
    out = np.concatenate(head_outs, axis=1) @ weights.w_o
    return out, results


def _pair_rotation_matrix(d_head: int, phi: float) -> np.ndarray:
    """Right-multiplication matrix rotating every channel pair by phi.

    A row vector (a, b) per pair maps to (a cos - b sin, a sin + b cos),
    the paired-real image of multiplying a+bi by e^(i phi).
    """
    mat = np.zeros((d_head, d_head))
    c, s = math.cos(phi), math.sin(phi)
    for t in range(d_head // 2):
        mat[2 * t, 2 * t] = c
        mat[2 * t, 2 * t + 1] = s
        mat[2 * t + 1, 2 * t] = -s
        mat[2 * t + 1, 2 * t + 1] = c
    return mat


def phase_shift_check(x: np.ndarray, w_q: np.ndarray, w_k: np.ndarray,
                      phi: float, table: RotationTable) -> float:
    """Numeric check that a uniform query-side phase folds into the projection.

    Computes attention twice: (a) with the rotation angles offset by phi on
    the query side only, and (b) with the original angles but the query
    projection right-multiplied by the paired-real rotation of phi. Returns
    the largest absolute difference across the two logit and probability
    matrices; algebraically the two computations are identical.
    """
    x = np.asarray(x, dtype=float)
    d_head = table.n_channels * 2
    q = x @ w_q
    k_rot = apply_rope(x @ w_k, table)
    scale = 1.0 / math.sqrt(d_head)

    logits_a = (apply_rope(q, table.shifted(phi)) @ k_rot.T) * scale
    logits_b = (apply_rope(x @ (w_q @ _pair_rotation_matrix(d_head, phi)), table)
                @ k_rot.T) * scale
    diff_logits = np.abs(logits_a - logits_b).max()
    diff_probs = np.abs(softmax_rows(logits_a) - softmax_rows(logits_b)).max()
    return float(max(diff_logits, diff_probs))
