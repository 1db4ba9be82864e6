"""Rotary embeddings: frequency sets, rotation tables, channel rotation.

A real (N, d_head) query/key block is viewed as (N, d_head/2) complex
channels: dim 2t is the real part and dim 2t+1 the imaginary part of
channel t. A rotation table holds one unit complex multiplier per token
per channel; multiplying queries and keys by it makes their products
depend on token positions only through pairwise differences.

Three layouts are supported:
  1d     - channel t rotates by theta_t * n for a 1D token index n.
  axial  - even channels rotate by theta_t * x, odd channels by theta_t * y.
  mixed  - channel t rotates by theta_x_t * x + theta_y_t * y, with the
           frequency pairs learnable per head.
"""

import math
from dataclasses import dataclass

import numpy as np

from .posembed import PositionGrid
from .serialize import format_float, write_csv

MODES = ("1d", "axial", "mixed")


@dataclass(eq=False)
class FrequencySet:
    """Rotation frequencies for one head.

    `values` is (d_head/2,) for 1d, (d_head/4,) for axial (each frequency
    serves an x and a y channel), and (d_head/2, 2) columns (theta_x,
    theta_y) for mixed. `axial_constrained` pins the cross-axis entries of
    a mixed set at zero by masking their gradients, which keeps a learnable
    set on the axial layout.
    """

    mode: str
    d_head: int
    values: np.ndarray
    learnable: bool = False
    axial_constrained: bool = False
    seed: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown frequency mode {self.mode!r}")
        if self.d_head < 2 or self.d_head % 2 != 0:
            raise ValueError(f"d_head must be a positive even number, got {self.d_head}")
        if self.mode == "axial" and self.d_head % 4 != 0:
            raise ValueError(f"axial layout needs d_head divisible by 4, got {self.d_head}")
        self.values = np.asarray(self.values, dtype=float)
        expected = {"1d": (self.d_head // 2,),
                    "axial": (self.d_head // 4,),
                    "mixed": (self.d_head // 2, 2)}[self.mode]
        if self.values.shape != expected:
            raise ValueError(f"{self.mode} frequencies must have shape {expected}, "
                             f"got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError("frequencies must be finite")

    @property
    def n_channels(self) -> int:
        return self.d_head // 2

    def copy(self) -> "FrequencySet":
        return FrequencySet(self.mode, self.d_head, self.values.copy(),
                            self.learnable, self.axial_constrained, self.seed)

    def to_json_dict(self) -> dict:
        # mixed flattens row-major: x0, y0, x1, y1, ...
        return {"mode": self.mode, "d_head": self.d_head,
                "learnable": self.learnable,
                "axial_constrained": self.axial_constrained,
                "seed": self.seed,
                "frequencies": [float(v) for v in self.values.ravel()]}

    @classmethod
    def from_json_dict(cls, payload: dict) -> "FrequencySet":
        mode = payload["mode"]
        d_head = int(payload["d_head"])
        values = np.asarray(payload["frequencies"], dtype=float)
        if mode == "mixed":
            values = values.reshape(d_head // 2, 2)
        return cls(mode, d_head, values,
                   bool(payload.get("learnable", False)),
                   bool(payload.get("axial_constrained", False)),
                   payload.get("seed"))


def freqs_1d(d_head: int, base: float = 10000.0) -> FrequencySet:
    """Geometric 1D frequencies theta_t = base^(-t / (d_head/2))."""
    if d_head % 2 != 0:
        raise ValueError(f"d_head must be even, got {d_head}")
    if base <= 0:
        raise ValueError(f"base must be positive, got {base}")
    theta = base ** (-np.arange(d_head // 2) / (d_head / 2))
    return FrequencySet("1d", d_head, theta)


def freqs_axial(d_head: int, base: float = 100.0) -> FrequencySet:
    """Axial frequencies theta_t = base^(-t / (d_head/4)), shared by both axes.

    The default base is the square root of the 1D default: 2D coordinates
    cover a square-root-smaller range per axis, so frequencies shrink by
    the same factor.
    """
    if d_head % 4 != 0:
        raise ValueError(f"axial layout needs d_head divisible by 4, got {d_head}")
    if base <= 0:
        raise ValueError(f"base must be positive, got {base}")
    theta = base ** (-np.arange(d_head // 4) / (d_head / 4))
    return FrequencySet("axial", d_head, theta)


def freqs_mixed_init(d_head: int, rng_seed: int = 0) -> FrequencySet:
    """Learnable mixed frequencies, initialized on the axial layout.

    Even channels start at (theta_t, 0) and odd channels at (0, theta_t),
    so the initial rotation table is identical to the axial one; training
    then moves the pairs off the axes. Initialization is deterministic;
    the seed is only recorded for bookkeeping.
    """
    if d_head % 2 != 0:
        raise ValueError(f"d_head must be even, got {d_head}")
    channels = d_head // 2
    # same expression as freqs_axial so the degenerate case is bit-identical
    theta = 100.0 ** (-np.arange((channels + 1) // 2) / (d_head / 4))
    values = np.zeros((channels, 2))
    values[0::2, 0] = theta[: (channels + 1) // 2]
    values[1::2, 1] = theta[: channels // 2]
    return FrequencySet("mixed", d_head, values, learnable=True, seed=rng_seed)


@dataclass(eq=False)
class RotationTable:
    """Precomputed unit complex multipliers, one per token per channel.

    `entries[n, t] = cos(angles[n, t]) + i sin(angles[n, t])`. The class
    token row, when the grid has one, is the identity rotation 1+0i.
    """

    entries: np.ndarray  # (n_tokens, d_head/2) complex
    angles: np.ndarray  # (n_tokens, d_head/2) radians
    source: FrequencySet | None = None
    grid: PositionGrid | None = None

    @property
    def n_tokens(self) -> int:
        return self.entries.shape[0]

    @property
    def n_channels(self) -> int:
        return self.entries.shape[1]

    @classmethod
    def identity(cls, n_tokens: int, d_head: int) -> "RotationTable":
        angles = np.zeros((n_tokens, d_head // 2))
        return cls(np.ones_like(angles, dtype=complex), angles)

    def conjugate(self) -> "RotationTable":
        return RotationTable(self.entries.conj(), -self.angles, self.source, self.grid)

    def shifted(self, phi: float) -> "RotationTable":
        """All angles offset by a constant phase."""
        rot = complex(math.cos(phi), math.sin(phi))
        return RotationTable(self.entries * rot, self.angles + phi, self.source, self.grid)

    def permuted(self, perm) -> "RotationTable":
        perm = np.asarray(perm)
        return RotationTable(self.entries[perm], self.angles[perm], self.source)

    def to_json_dict(self) -> dict:
        payload = {"d_head": 2 * self.n_channels, "n_tokens": self.n_tokens,
                   "angles": [[float(a) for a in row] for row in self.angles]}
        if self.source is not None:
            payload["mode"] = self.source.mode
            payload["frequencies"] = [float(v) for v in self.source.values.ravel()]
        if self.grid is not None:
            payload["grid"] = self.grid.to_json_dict()
        return payload

    def to_csv(self, path) -> None:
        header = ["token", "x", "y"]
        for t in range(self.n_channels):
            header += [f"angle{t}", f"cos{t}", f"sin{t}"]
        rows = []
        cls_rows = int(self.grid.has_class_token) if self.grid is not None else 0
        for n in range(self.n_tokens):
            if self.grid is None:
                row = [str(n), "", ""]
            elif cls_rows and n == 0:
                row = ["0", "", ""]
            else:
                x, y = self.grid.positions[n - cls_rows]
                row = [str(n), str(int(x)), str(int(y))]
            for t in range(self.n_channels):
                row += [format_float(self.angles[n, t]),
                        format_float(self.entries[n, t].real),
                        format_float(self.entries[n, t].imag)]
            rows.append(row)
        write_csv(path, header, rows)


def _table_from_angles(angles_spatial, freqs, grid) -> RotationTable:
    if grid is not None and grid.has_class_token:
        pad = np.zeros((1, angles_spatial.shape[1]))
        angles = np.concatenate([pad, angles_spatial], axis=0)
    else:
        angles = angles_spatial
    entries = np.cos(angles) + 1j * np.sin(angles)
    return RotationTable(entries, angles, freqs, grid)


def rotation_1d(freqs: FrequencySet, n_tokens: int) -> RotationTable:
    """Table for a 1D token sequence: entry (n, t) has angle theta_t * n."""
    if freqs.mode != "1d":
        raise ValueError(f"expected a 1d frequency set, got {freqs.mode!r}")
    if n_tokens < 1:
        raise ValueError(f"n_tokens must be >= 1, got {n_tokens}")
    angles = np.arange(n_tokens)[:, None] * freqs.values[None, :]
    return _table_from_angles(angles, freqs, None)


def rotation_axial(freqs: FrequencySet, grid: PositionGrid) -> RotationTable:
    """Axial 2D table: even channels rotate with x, odd channels with y."""
    if freqs.mode != "axial":
        raise ValueError(f"expected an axial frequency set, got {freqs.mode!r}")
    angles = np.empty((grid.n_spatial, freqs.n_channels))
    angles[:, 0::2] = grid.px[:, None] * freqs.values[None, :]
    angles[:, 1::2] = grid.py[:, None] * freqs.values[None, :]
    return _table_from_angles(angles, freqs, grid)


def rotation_mixed(freqs: FrequencySet, grid: PositionGrid) -> RotationTable:
    """Mixed 2D table: entry (n, t) has angle theta_x_t * x_n + theta_y_t * y_n."""
    if freqs.mode != "mixed":
        raise ValueError(f"expected a mixed frequency set, got {freqs.mode!r}")
    angles = (grid.px[:, None] * freqs.values[None, :, 0]
              + grid.py[:, None] * freqs.values[None, :, 1])
    return _table_from_angles(angles, freqs, grid)


def rotation_for(freqs: FrequencySet, grid: PositionGrid) -> RotationTable:
    """Dispatch on the set's layout (1d sets need `rotation_1d`)."""
    if freqs.mode == "axial":
        return rotation_axial(freqs, grid)
    if freqs.mode == "mixed":
        return rotation_mixed(freqs, grid)
    raise ValueError(f"no grid-based table for mode {freqs.mode!r}")


def to_complex_pairs(v: np.ndarray) -> np.ndarray:
    """View paired channels as complex: dim 2t real, dim 2t+1 imaginary."""
    v = np.asarray(v)
    if v.shape[-1] % 2 != 0:
        raise ValueError(f"last dimension must be even, got {v.shape[-1]}")
    return v[..., 0::2] + 1j * v[..., 1::2]


def from_complex_pairs(c: np.ndarray) -> np.ndarray:
    """Inverse of `to_complex_pairs`; the round trip is bit-exact."""
    c = np.asarray(c, dtype=complex)
    out = np.empty(c.shape[:-1] + (2 * c.shape[-1],))
    out[..., 0::2] = c.real
    out[..., 1::2] = c.imag
    return out


def apply_rope(v: np.ndarray, table: RotationTable) -> np.ndarray:
    """Rotate paired channels of a (N, d_head) block by the table.

    Unit-modulus multipliers preserve each token's vector norm; a class
    token row is multiplied by 1.
    """
    v = np.asarray(v, dtype=float)
    expected = (table.n_tokens, 2 * table.n_channels)
    if v.shape != expected:
        raise ValueError(f"expected shape {expected}, got {v.shape}")
    return from_complex_pairs(to_complex_pairs(v) * table.entries)


def freq_gradient(freqs: FrequencySet, grid: PositionGrid, upstream: np.ndarray,
                  table: RotationTable | None = None) -> np.ndarray:
    """Analytic gradients of a scalar loss w.r.t. mixed frequency pairs.

    `upstream[n, t]` carries dL/dRe(R[n, t]) + i * dL/dIm(R[n, t]). Since
    dR/dangle = i * R, the per-entry angle sensitivity is
    Im(upstream * conj(R)), and the chain rule through
    angle = theta_x * x + theta_y * y sums it against the coordinates.

    Returns an array of shape (d_head/2, 2) with columns (d_theta_x,
    d_theta_y). Cross-axis components are zeroed for axial-constrained sets.
    """
    if freqs.mode != "mixed":
        raise ValueError(f"frequency gradients need a mixed set, got {freqs.mode!r}")
    if not freqs.learnable:
        raise RuntimeError("frequency set is not learnable")
    if table is None:
        table = rotation_mixed(freqs, grid)
    upstream = np.asarray(upstream, dtype=complex)
    if upstream.shape != table.entries.shape:
        raise ValueError(f"upstream shape {upstream.shape} != table shape "
                         f"{table.entries.shape}")
    s = int(grid.has_class_token)  # class row does not depend on frequencies
    angle_sens = np.imag(upstream[s:] * np.conj(table.entries[s:]))  # (n_spatial, C)
    grad = np.stack([grid.px.astype(float) @ angle_sens,
                     grid.py.astype(float) @ angle_sens], axis=1)
    if freqs.axial_constrained:
        grad[0::2, 1] = 0.0
        grad[1::2, 0] = 0.0
    return grad
