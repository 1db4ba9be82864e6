"""Desk-scale transformer encoder with hand-written analytic gradients.

Wires grids, APE, RPB and the rotary tables into pre-norm blocks
(norm -> multi-head attention -> residual -> norm -> MLP -> residual).
Linear layers are bias-free and layer norm carries no affine parameters,
so the learnable surface is exactly: projection matrices, MLP weights,
the APE table, RPB tables, and rotary frequency pairs. Every gradient is
derived by hand and verified against central finite differences in
`grad_check`.

Intended scale is small (grids up to 8x8, widths up to 64, one or two
layers); nothing enforces that, but the gradient checks and the frequency
recovery loop are only exercised there.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from . import posembed, rope
from .attention import AttentionResult, softmax_rows
from .posembed import PositionGrid, RpbTable, expand_rpb, make_grid, relative_offsets
from .rope import FrequencySet, freqs_axial, freqs_mixed_init
from .serialize import format_float, write_csv

ATTENTION_MODES = ("none", "rpb", "rope_axial", "rope_mixed", "rope_axial_learnable",
                   "rope_axial+rpb", "rope_mixed+rpb", "rope_axial_learnable+rpb")
APE_POLICIES = ("off", "learnable", "sinusoidal")
_LN_EPS = 1e-6


@dataclass
class ModelConfig:
    """Shape and position-embedding policy of the toy encoder."""

    width: int
    height: int
    d: int
    head_count: int
    layer_count: int
    attention: list = field(default_factory=list)
    ape: str = "off"
    class_token: bool = False
    mlp_ratio: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.attention, str):
            self.attention = [self.attention] * self.layer_count
        if self.layer_count < 0:
            raise ValueError("layer_count must be >= 0")
        if len(self.attention) != self.layer_count:
            raise ValueError(f"need one attention mode per layer, got "
                             f"{len(self.attention)} for {self.layer_count} layers")
        for entry in self.attention:
            if entry not in ATTENTION_MODES:
                raise ValueError(f"unknown attention mode {entry!r}")
        if self.ape not in APE_POLICIES:
            raise ValueError(f"unknown APE policy {self.ape!r}")
        if self.d % self.head_count != 0:
            raise ValueError(f"d={self.d} not divisible by head_count={self.head_count}")
        if self.d_head % 2 != 0:
            raise ValueError(f"d_head={self.d_head} must be even")
        if any("rope_axial" in e for e in self.attention) and self.d_head % 4 != 0:
            raise ValueError(f"axial rotation needs d_head divisible by 4, got {self.d_head}")
        if self.ape == "sinusoidal" and self.d % 4 != 0:
            raise ValueError(f"sinusoidal APE needs d divisible by 4, got {self.d}")
        if self.mlp_ratio <= 0:
            raise ValueError("mlp_ratio must be positive")

    @property
    def d_head(self) -> int:
        return self.d // self.head_count

    @property
    def hidden(self) -> int:
        return int(round(self.mlp_ratio * self.d))

    def grid(self) -> PositionGrid:
        return make_grid(self.width, self.height, self.class_token)

    def parsed_modes(self) -> list:
        """Per layer: (rope_kind or None, use_rpb)."""
        out = []
        for entry in self.attention:
            parts = entry.split("+")
            use_rpb = "rpb" in parts
            kinds = [p for p in parts if p != "rpb"]
            kind = None
            if kinds and kinds[0] != "none":
                kind = kinds[0].removeprefix("rope_")
            out.append((kind, use_rpb))
        return out

    def to_json_dict(self) -> dict:
        return {"grid": {"width": self.width, "height": self.height,
                         "class_token": self.class_token},
                "d": self.d, "head_count": self.head_count,
                "layer_count": self.layer_count, "attention": list(self.attention),
                "ape": self.ape, "mlp_ratio": self.mlp_ratio, "seed": self.seed}

    @classmethod
    def from_json_dict(cls, payload: dict) -> "ModelConfig":
        grid = payload.get("grid", {})
        return cls(width=int(grid["width"]), height=int(grid["height"]),
                   class_token=bool(grid.get("class_token", False)),
                   d=int(payload["d"]), head_count=int(payload["head_count"]),
                   layer_count=int(payload["layer_count"]),
                   attention=payload.get("attention", "none"),
                   ape=payload.get("ape", "off"),
                   mlp_ratio=float(payload.get("mlp_ratio", 4.0)),
                   seed=int(payload.get("seed", 0)))

    @classmethod
    def from_json_file(cls, path) -> "ModelConfig":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


def init_params(cfg: ModelConfig) -> dict:
    """Seed-deterministic parameter dictionary.

    Frequency pairs start on the axial layout and draw nothing from the
    RNG, so configs that differ only in rotary mode share every other
    parameter for a given seed.
    """
    rng = np.random.default_rng(cfg.seed)
    d, dh, h = cfg.d, cfg.d_head, cfg.head_count
    grid = cfg.grid()
    params = {}
    if cfg.ape == "learnable":
        params["ape"] = rng.normal(0.0, 0.02, (grid.n_tokens, d))
    elif cfg.ape == "sinusoidal":
        params["ape"] = posembed.sinusoidal_ape(grid, d).values
    for i, (kind, use_rpb) in enumerate(cfg.parsed_modes()):
        p = f"layers.{i}."
        params[p + "w_q"] = rng.normal(0.0, d ** -0.5, (h, d, dh))
        params[p + "w_k"] = rng.normal(0.0, d ** -0.5, (h, d, dh))
        params[p + "w_v"] = rng.normal(0.0, d ** -0.5, (h, d, dh))
        params[p + "w_o"] = rng.normal(0.0, d ** -0.5, (h * dh, d))
        params[p + "w1"] = rng.normal(0.0, d ** -0.5, (d, cfg.hidden))
        params[p + "w2"] = rng.normal(0.0, cfg.hidden ** -0.5, (cfg.hidden, d))
        if use_rpb:
            params[p + "rpb"] = rng.normal(
                0.0, 0.02, (h, 2 * cfg.width + 1, 2 * cfg.height + 1))
            if cfg.class_token:
                params[p + "rpb_cls"] = rng.normal(0.0, 0.02, (h,))
        if kind in ("mixed", "axial_learnable"):
            init = freqs_mixed_init(dh, rng_seed=cfg.seed).values
            params[p + "freqs"] = np.tile(init, (h, 1, 1))
    return params


def learnable_param_names(cfg: ModelConfig) -> list:
    """Names of trainable tensors, in a stable order."""
    names = ["ape"] if cfg.ape == "learnable" else []
    for i, (kind, use_rpb) in enumerate(cfg.parsed_modes()):
        p = f"layers.{i}."
        names += [p + "w_q", p + "w_k", p + "w_v", p + "w_o", p + "w1", p + "w2"]
        if use_rpb:
            names.append(p + "rpb")
            if cfg.class_token:
                names.append(p + "rpb_cls")
        if kind in ("mixed", "axial_learnable"):
            names.append(p + "freqs")
    return names


def _freqset(cfg: ModelConfig, params: dict, layer: int, head: int) -> FrequencySet | None:
    kind = cfg.parsed_modes()[layer][0]
    if kind is None:
        return None
    if kind == "axial":
        return freqs_axial(cfg.d_head)
    return FrequencySet("mixed", cfg.d_head, params[f"layers.{layer}.freqs"][head],
                        learnable=True, axial_constrained=(kind == "axial_learnable"))


def _layernorm(x):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    std = np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + _LN_EPS)
    y = xc / std
    return y, std


def _layernorm_backward(dy, y, std):
    # y = (x - mu)/std with std treated per row; no affine terms
    return (dy - dy.mean(axis=-1, keepdims=True)
            - y * (dy * y).mean(axis=-1, keepdims=True)) / std


def _gelu(z):
    return 0.5 * z * (1.0 + erf(z / math.sqrt(2.0)))


def _gelu_grad(z):
    cdf = 0.5 * (1.0 + erf(z / math.sqrt(2.0)))
    return cdf + z * np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def forward(cfg: ModelConfig, params: dict, tokens: np.ndarray,
            grid: PositionGrid | None = None, want_cache: bool = False):
    """Run the encoder.

    Returns (output, attention results as [layer][head]) and, with
    `want_cache`, the intermediate tensors `backward` needs. `grid`
    defaults to the config's row-major grid; translated or permuted
    variants can be passed for the equivariance checks.
    """
    grid = grid or cfg.grid()
    tokens = np.asarray(tokens, dtype=float)
    if tokens.shape != (grid.n_tokens, cfg.d):
        raise ValueError(f"tokens must be ({grid.n_tokens}, {cfg.d}), got {tokens.shape}")
    x = tokens + params["ape"] if cfg.ape != "off" else tokens.copy()
    scale = 1.0 / math.sqrt(cfg.d_head)
    s = int(grid.has_class_token)
    results = []
    cache = {"grid": grid, "x0_tokens": tokens, "layers": []}
    for i, (kind, use_rpb) in enumerate(cfg.parsed_modes()):
        p = f"layers.{i}."
        lc = {"x_in": x}
        h1, std1 = _layernorm(x)
        lc.update(h1=h1, std1=std1)
        biases = None
        if use_rpb:
            cls = params.get(p + "rpb_cls", np.zeros(cfg.head_count))
            biases = [expand_rpb(RpbTable(cfg.width, cfg.height,
                                          params[p + "rpb"][h], float(cls[h])), grid)
                      for h in range(cfg.head_count)]
        lc.update(biases=biases, heads=[])
        layer_results = []
        head_outs = []
        for h in range(cfg.head_count):
            hc = {}
            q = h1 @ params[p + "w_q"][h]
            k = h1 @ params[p + "w_k"][h]
            v = h1 @ params[p + "w_v"][h]
            fs = _freqset(cfg, params, i, h)
            rot = rope.rotation_for(fs, grid) if fs is not None else None
            qr = rope.apply_rope(q, rot) if rot is not None else q
            kr = rope.apply_rope(k, rot) if rot is not None else k
            logits = (qr @ kr.T) * scale
            if biases is not None:
                logits = logits + biases[h]
            probs = softmax_rows(logits)
            head_outs.append(probs @ v)
            hc.update(q=q, k=k, v=v, qr=qr, kr=kr, fs=fs, rot=rot, probs=probs)
            lc["heads"].append(hc)
            layer_results.append(AttentionResult(probs, logits, cfg.d_head,
                                                 head_index=h,
                                                 mode_label=cfg.attention[i]))
        concat = np.concatenate(head_outs, axis=1)
        attn_out = concat @ params[p + "w_o"]
        x_mid = x + attn_out
        h2, std2 = _layernorm(x_mid)
        z1 = h2 @ params[p + "w1"]
        a1 = _gelu(z1)
        x = x_mid + a1 @ params[p + "w2"]
        lc.update(concat=concat, x_mid=x_mid, h2=h2, std2=std2, z1=z1, a1=a1)
        cache["layers"].append(lc)
        results.append(layer_results)
    if want_cache:
        return x, results, cache
    return x, results


def backward(cfg: ModelConfig, params: dict, cache: dict, d_out: np.ndarray,
             d_probs=None) -> tuple:
    """Backpropagate through a cached forward pass.

    `d_out` is dLoss/dOutput; `d_probs`, when given, injects extra
    sensitivities directly at each layer's attention probabilities as a
    [layer] list of (heads, N, N) arrays (used by the frequency-fitting
    loop, whose loss reads the attention matrices). Returns (gradient
    dict over the learnable tensors, dLoss/dTokens).
    """
    grid = cache["grid"]
    s = int(grid.has_class_token)
    scale = 1.0 / math.sqrt(cfg.d_head)
    grads = {name: np.zeros_like(params[name]) for name in learnable_param_names(cfg)}
    ox, oy = relative_offsets(grid)
    d_x = np.asarray(d_out, dtype=float).copy()
    for i in reversed(range(cfg.layer_count)):
        p = f"layers.{i}."
        lc = cache["layers"][i]
        # MLP branch: x = x_mid + gelu(h2 @ w1) @ w2
        grads[p + "w2"] += lc["a1"].T @ d_x
        d_a1 = d_x @ params[p + "w2"].T
        d_z1 = d_a1 * _gelu_grad(lc["z1"])
        grads[p + "w1"] += lc["h2"].T @ d_z1
        d_x_mid = d_x + _layernorm_backward(d_z1 @ params[p + "w1"].T,
                                            lc["h2"], lc["std2"])
        # attention branch: x_mid = x_in + concat @ w_o
        grads[p + "w_o"] += lc["concat"].T @ d_x_mid
        d_concat = d_x_mid @ params[p + "w_o"].T
        d_h1 = np.zeros_like(lc["h1"])
        for h in range(cfg.head_count):
            hc = lc["heads"][h]
            dh = cfg.d_head
            d_head_out = d_concat[:, h * dh:(h + 1) * dh]
            dp = d_head_out @ hc["v"].T
            if d_probs is not None and d_probs[i] is not None:
                dp = dp + d_probs[i][h]
            d_v = hc["probs"].T @ d_head_out
            probs = hc["probs"]
            d_logits = probs * (dp - (dp * probs).sum(axis=1, keepdims=True))
            if lc["biases"] is not None:
                np.add.at(grads[p + "rpb"][h],
                          (ox + cfg.width, oy + cfg.height), d_logits[s:, s:])
                if s:
                    grads[p + "rpb_cls"][h] += (d_logits[0, :].sum()
                                                + d_logits[:, 0].sum() - d_logits[0, 0])
            d_qr = (d_logits @ hc["kr"]) * scale
            d_kr = (d_logits.T @ hc["qr"]) * scale
            if hc["rot"] is not None:
                conj = hc["rot"].entries.conj()
                uq = rope.to_complex_pairs(d_qr)
                uk = rope.to_complex_pairs(d_kr)
                d_q = rope.from_complex_pairs(uq * conj)
                d_k = rope.from_complex_pairs(uk * conj)
                if hc["fs"].learnable:
                    u_table = (uq * rope.to_complex_pairs(hc["q"]).conj()
                               + uk * rope.to_complex_pairs(hc["k"]).conj())
                    grads[p + "freqs"][h] += rope.freq_gradient(
                        hc["fs"], grid, u_table, table=hc["rot"])
            else:
                d_q, d_k = d_qr, d_kr
            h1 = lc["h1"]
            grads[p + "w_q"][h] += h1.T @ d_q
            grads[p + "w_k"][h] += h1.T @ d_k
            grads[p + "w_v"][h] += h1.T @ d_v
            d_h1 += (d_q @ params[p + "w_q"][h].T + d_k @ params[p + "w_k"][h].T
                     + d_v @ params[p + "w_v"][h].T)
        d_x = d_x_mid + _layernorm_backward(d_h1, lc["h1"], lc["std1"])
    if cfg.ape == "learnable":
        grads["ape"] += d_x
    return grads, d_x


def _sum_squares_loss(cfg, params, tokens, grid=None) -> float:
    out, _ = forward(cfg, params, tokens, grid=grid)
    return float((out * out).sum())


@dataclass(eq=False)
class GradReport:
    """Analytic-vs-finite-difference comparison for one parameter tensor."""

    name: str
    analytic: np.ndarray
    finite_difference: np.ndarray
    relative_error: float
    step: float


def _relative_error(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    return float(np.linalg.norm(a - b)) / max(na, nb, 1e-12)


def grad_check(cfg: ModelConfig, params: dict, tokens: np.ndarray,
               select=None, step: float = 1e-6) -> list:
    """Central-difference check of every analytic gradient.

    The scalar loss is the sum of squared outputs, the simplest choice
    that touches every parameter. `select` narrows the checked tensors to
    the named ones; frequency tensors are checked in full, every (x, y)
    pair of every head.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    tokens = np.asarray(tokens, dtype=float)
    out, _, cache = forward(cfg, params, tokens, want_cache=True)
    loss = float((out * out).sum())
    if not math.isfinite(loss):
        raise FloatingPointError("loss is not finite")
    analytic, _ = backward(cfg, params, cache, 2.0 * out)
    names = list(select) if select is not None else learnable_param_names(cfg)
    reports = []
    for name in names:
        if name not in analytic:
            raise ValueError(f"unknown or non-learnable parameter {name!r}")
        values = params[name]
        fd = np.zeros_like(values)
        flat = values.reshape(-1)
        fd_flat = fd.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = _sum_squares_loss(cfg, params, tokens)
            flat[j] = orig - step
            lo = _sum_squares_loss(cfg, params, tokens)
            flat[j] = orig
            fd_flat[j] = (hi - lo) / (2.0 * step)
        reports.append(GradReport(name, analytic[name].copy(), fd,
                                  _relative_error(analytic[name], fd), step))
    return reports


@dataclass(eq=False)
class TrainTrace:
    """Recorded descent: loss and frequency snapshots per step."""

    steps: list
    losses: list
    frequencies: list  # one (layers, heads, d_head/2, 2) array per step
    lr: float
    seed: int
    diverged: bool = False

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    @property
    def final_frequencies(self) -> np.ndarray:
        return self.frequencies[-1]

    def freq_columns(self) -> list:
        layers, heads, channels, _ = self.frequencies[0].shape
        return [f"l{i}.h{h}.t{t}.{axis}"
                for i in range(layers) for h in range(heads)
                for t in range(channels) for axis in ("x", "y")]

    def to_csv(self, path) -> None:
        rows = []
        for step, loss, freqs in zip(self.steps, self.losses, self.frequencies):
            rows.append([str(step), format_float(loss)]
                        + [format_float(v) for v in freqs.ravel()])
        write_csv(path, ["step", "loss"] + self.freq_columns(), rows)


def fit_frequencies(teacher_freqs: FrequencySet, cfg: ModelConfig, steps: int,
                    lr: float, seed: int = 0, n_samples: int = 2) -> TrainTrace:
    """Recover a teacher's mixed frequencies by plain gradient descent.

    Teacher and student share every parameter except the frequency pairs:
    the teacher uses `teacher_freqs` (broadcast to every layer and head),
    the student starts from the axial layout. The loss is the mean squared
    difference between their attention matrices over a fixed seeded batch
    of random inputs, so the trace is deterministic. Row k of the trace
    holds the loss and frequencies *before* update k; the trace ends early
    (flagged `diverged`) if the loss leaves the finite range.
    """
    if teacher_freqs.mode != "mixed":
        raise ValueError("teacher must be a mixed frequency set")
    if teacher_freqs.d_head != cfg.d_head:
        raise ValueError(f"teacher d_head {teacher_freqs.d_head} != config "
                         f"d_head {cfg.d_head}")
    if steps < 0 or lr < 0:
        raise ValueError("steps and lr must be non-negative")
    freq_keys = [f"layers.{i}.freqs" for i, (kind, _) in enumerate(cfg.parsed_modes())
                 if kind in ("mixed", "axial_learnable")]
    if len(freq_keys) != cfg.layer_count or not freq_keys:
        raise ValueError("every layer needs a learnable rotary mode to fit frequencies")

    student = init_params(cfg)
    teacher = {k: v.copy() for k, v in student.items()}
    for key in freq_keys:
        teacher[key] = np.tile(teacher_freqs.values, (cfg.head_count, 1, 1))

    grid = cfg.grid()
    rng = np.random.default_rng(seed)
    xs = [rng.normal(size=(grid.n_tokens, cfg.d)) for _ in range(n_samples)]
    target = [[ [r.probs for r in layer] for layer in forward(cfg, teacher, x)[1]]
              for x in xs]
    n = grid.n_tokens
    m_total = n_samples * cfg.layer_count * cfg.head_count * n * n

    trace = TrainTrace([], [], [], lr, seed)
    for step_idx in range(steps + 1):
        loss = 0.0
        caches = []
        diffs = []
        for sample, x in enumerate(xs):
            _, results, cache = forward(cfg, student, x, want_cache=True)
            d = [np.stack([results[i][h].probs - target[sample][i][h]
                           for h in range(cfg.head_count)])
                 for i in range(cfg.layer_count)]
            loss += sum(float((layer * layer).sum()) for layer in d)
            caches.append(cache)
            diffs.append(d)
        loss /= m_total
        if not math.isfinite(loss):
            trace.diverged = True
            break
        trace.steps.append(step_idx)
        trace.losses.append(loss)
        trace.frequencies.append(
            np.stack([student[key] for key in freq_keys]).copy())
        if step_idx == steps:
            break
        total = {key: np.zeros_like(student[key]) for key in freq_keys}
        zero_out = np.zeros((n, cfg.d))
        for cache, d in zip(caches, diffs):
            d_probs = [2.0 * layer / m_total for layer in d]
            grads, _ = backward(cfg, student, cache, zero_out, d_probs=d_probs)
            for key in freq_keys:
                total[key] += grads[key]
        for key in freq_keys:
            student[key] = student[key] - lr * total[key]
    return trace
