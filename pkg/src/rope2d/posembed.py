"""Position grids and the two conventional embeddings: APE and RPB.

A grid enumerates 2D token coordinates in row-major order, optionally with
a leading class token that has no spatial coordinate. APE tables are added
to token features at the stem; RPB tables are looked up by relative offset
and added to attention logits per head.
"""

from dataclasses import dataclass

import numpy as np

from .serialize import format_float, matrix_header, matrix_rows, write_csv

APE_KINDS = ("sinusoidal", "learnable")


@dataclass(eq=False)
class PositionGrid:
    """2D token coordinates for a width x height patch grid.

    `positions` holds the spatial (x, y) pairs as an (width*height, 2) int
    array. `make_grid` produces them in row-major order (token k sits at
    (k mod width, k div width)); `translated` and `permuted` derive grids
    for the invariance checks that need shifted or reordered coordinates.
    A class token, when present, occupies token index 0 and has no entry
    in `positions`.
    """

    width: int
    height: int
    has_class_token: bool
    positions: np.ndarray

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"grid extents must be >= 1, got {self.width}x{self.height}")
        self.positions = np.asarray(self.positions, dtype=np.int64)
        if self.positions.shape != (self.width * self.height, 2):
            raise ValueError(
                f"expected {self.width * self.height} spatial positions, "
                f"got array of shape {self.positions.shape}")
        if len({(int(x), int(y)) for x, y in self.positions}) != len(self.positions):
            raise ValueError("grid positions must be distinct")

    @property
    def n_spatial(self) -> int:
        return self.width * self.height

    @property
    def n_tokens(self) -> int:
        return self.n_spatial + int(self.has_class_token)

    @property
    def px(self) -> np.ndarray:
        return self.positions[:, 0]

    @property
    def py(self) -> np.ndarray:
        return self.positions[:, 1]

    def translated(self, dx: int, dy: int) -> "PositionGrid":
        """Same grid with every coordinate shifted by a constant offset."""
        return PositionGrid(self.width, self.height, self.has_class_token,
                            self.positions + np.array([dx, dy]))

    def permuted(self, perm) -> "PositionGrid":
        """Same grid with spatial tokens reordered by `perm`."""
        return PositionGrid(self.width, self.height, self.has_class_token,
                            self.positions[np.asarray(perm)])

    def to_json_dict(self) -> dict:
        return {"width": self.width, "height": self.height,
                "class_token": self.has_class_token}


def make_grid(width: int, height: int, class_token: bool = False) -> PositionGrid:
    """Row-major position grid, optionally with a leading class token."""
    if width < 1 or height < 1:
        raise ValueError(f"grid extents must be >= 1, got {width}x{height}")
    k = np.arange(width * height)
    positions = np.stack([k % width, k // width], axis=1)
    return PositionGrid(width, height, bool(class_token), positions)


@dataclass(eq=False)
class ApeTable:
    """Absolute positional embedding: one d-vector per token, added at the stem."""

    kind: str
    values: np.ndarray  # (n_tokens, d)

    def __post_init__(self):
        if self.kind not in APE_KINDS:
            raise ValueError(f"unknown APE kind {self.kind!r}")
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError("APE values must be a (tokens, d) matrix")

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def to_json_dict(self) -> dict:
        return {"kind": self.kind, "shape": list(self.values.shape),
                "values": [float(v) for v in self.values.ravel()]}

    def to_csv(self, path) -> None:
        write_csv(path, ["token"] + matrix_header(self.d, "dim"),
                  [[str(i)] + row for i, row in enumerate(matrix_rows(self.values))])


def sinusoidal_ape(grid: PositionGrid, d: int) -> ApeTable:
    """Sinusoidal APE over a 2D grid.

    Token at (x, y) gets, for t in [0, d/4): dim 4t = sin(x / 10^(4t/(d/4))),
    4t+1 = cos(x / ...), 4t+2 = sin(y / ...), 4t+3 = cos(y / ...). The class
    token row, when present, is all zeros.
    """
    if d % 4 != 0:
        raise ValueError(f"sinusoidal APE needs d divisible by 4, got {d}")
    quarter = d // 4
    divisor = 10.0 ** (4.0 * np.arange(quarter) / quarter)  # (d/4,)
    ax = grid.px[:, None] / divisor[None, :]
    ay = grid.py[:, None] / divisor[None, :]
    values = np.zeros((grid.n_tokens, d))
    s = int(grid.has_class_token)
    values[s:, 0::4] = np.sin(ax)
    values[s:, 1::4] = np.cos(ax)
    values[s:, 2::4] = np.sin(ay)
    values[s:, 3::4] = np.cos(ay)
    return ApeTable("sinusoidal", values)


def learnable_ape(grid: PositionGrid, d: int, seed: int = 0, scale: float = 0.02) -> ApeTable:
    """Randomly initialized APE table; the class-token row is trainable too."""
    rng = np.random.default_rng(seed)
    return ApeTable("learnable", rng.normal(0.0, scale, (grid.n_tokens, d)))


def add_ape(tokens: np.ndarray, ape: ApeTable) -> np.ndarray:
    """Element-wise sum of token features and the embedding table."""
    tokens = np.asarray(tokens, dtype=float)
    if tokens.shape != ape.values.shape:
        raise ValueError(f"token shape {tokens.shape} != APE shape {ape.values.shape}")
    return tokens + ape.values


def resize_ape(ape: ApeTable, old_grid: PositionGrid, new_grid: PositionGrid) -> ApeTable:
    """Adapt an APE table to a new grid size.

    Learnable tables are resampled with corner-aligned bilinear interpolation
    over their 2D layout; sinusoidal tables are regenerated analytically. The
    class-token row, when present, is copied unchanged.
    """
    if ape.values.shape[0] != old_grid.n_tokens:
        raise ValueError(f"APE has {ape.values.shape[0]} rows but grid has "
                         f"{old_grid.n_tokens} tokens")
    if old_grid.has_class_token != new_grid.has_class_token:
        raise ValueError("grids must agree on class-token presence")
    if ape.kind == "sinusoidal":
        return sinusoidal_ape(new_grid, ape.d)
    s = int(old_grid.has_class_token)
    image = ape.values[s:].reshape(old_grid.height, old_grid.width, ape.d)
    resized = _bilinear_resize(image, new_grid.height, new_grid.width)
    values = resized.reshape(new_grid.n_spatial, ape.d)
    if s:
        values = np.concatenate([ape.values[:1], values], axis=0)
    return ApeTable(ape.kind, values)


def _bilinear_resize(image: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Corner-aligned bilinear resampling of an (h, w, c) array.

    A single output row/column maps to the source center.
    """
    h, w = image.shape[:2]
    ys = np.arange(new_h) * ((h - 1) / (new_h - 1)) if new_h > 1 else np.array([(h - 1) / 2.0])
    xs = np.arange(new_w) * ((w - 1) / (new_w - 1)) if new_w > 1 else np.array([(w - 1) / 2.0])
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bottom = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


@dataclass(eq=False)
class RpbTable:
    """Relative position bias for one head.

    `biases[ox + W, oy + H]` is the bias for relative offset (ox, oy) with
    ox in [-W, W] and oy in [-H, H]. Class-token interactions use the single
    dedicated `class_token_bias` scalar.
    """

    width_extent: int
    height_extent: int
    biases: np.ndarray  # (2W+1, 2H+1)
    class_token_bias: float = 0.0

    def __post_init__(self):
        self.biases = np.asarray(self.biases, dtype=float)
        expected = (2 * self.width_extent + 1, 2 * self.height_extent + 1)
        if self.biases.shape != expected:
            raise ValueError(f"bias table shape {self.biases.shape} != {expected} "
                             f"for extents ({self.width_extent}, {self.height_extent})")

    @classmethod
    def zeros(cls, width_extent: int, height_extent: int) -> "RpbTable":
        return cls(width_extent, height_extent,
                   np.zeros((2 * width_extent + 1, 2 * height_extent + 1)))

    @classmethod
    def random(cls, width_extent: int, height_extent: int, seed: int = 0,
               scale: float = 0.02) -> "RpbTable":
        rng = np.random.default_rng(seed)
        return cls(width_extent, height_extent,
                   rng.normal(0.0, scale, (2 * width_extent + 1, 2 * height_extent + 1)),
                   float(rng.normal(0.0, scale)))

    def lookup(self, ox: int, oy: int) -> float:
        if abs(ox) > self.width_extent or abs(oy) > self.height_extent:
            raise IndexError(f"offset ({ox}, {oy}) outside table extent "
                             f"±({self.width_extent}, {self.height_extent})")
        return float(self.biases[ox + self.width_extent, oy + self.height_extent])

    def to_json_dict(self) -> dict:
        return {"kind": "rpb", "shape": list(self.biases.shape),
                "width_extent": self.width_extent, "height_extent": self.height_extent,
                "class_token_bias": float(self.class_token_bias),
                "values": [float(v) for v in self.biases.ravel()]}

    def to_csv(self, path) -> None:
        rows = []
        for ox in range(-self.width_extent, self.width_extent + 1):
            for oy in range(-self.height_extent, self.height_extent + 1):
                rows.append([str(ox), str(oy), format_float(self.lookup(ox, oy))])
        write_csv(path, ["offset_x", "offset_y", "bias"], rows)


def relative_offsets(grid: PositionGrid) -> tuple:
    """Pairwise (x_n - x_m, y_n - y_m) offsets, each (n_spatial, n_spatial)."""
    ox = grid.px[:, None] - grid.px[None, :]
    oy = grid.py[:, None] - grid.py[None, :]
    return ox, oy


def expand_rpb(table: RpbTable, grid: PositionGrid, extend: bool = False) -> np.ndarray:
    """Expand an offset-indexed bias table to the full token-pair matrix.

    Entry (n, m) is the table bias at offset (x_n - x_m, y_n - y_m); rows and
    columns of a class token carry the table's dedicated scalar. Offsets
    outside the declared extent raise IndexError unless `extend` is set, in
    which case they contribute exactly 0 (zero-padded extension).
    """
    ox, oy = relative_offsets(grid)
    W, H = table.width_extent, table.height_extent
    inside = (np.abs(ox) <= W) & (np.abs(oy) <= H)
    if not extend and not inside.all():
        n, m = np.argwhere(~inside)[0]
        raise IndexError(f"offset ({ox[n, m]}, {oy[n, m]}) outside table extent "
                         f"±({W}, {H}); pass extend=True or extend_rpb first")
    ix = np.clip(ox + W, 0, 2 * W)
    iy = np.clip(oy + H, 0, 2 * H)
    spatial = np.where(inside, table.biases[ix, iy], 0.0)
    if not grid.has_class_token:
        return spatial
    full = np.full((grid.n_tokens, grid.n_tokens), table.class_token_bias)
    full[1:, 1:] = spatial
    return full


def extend_rpb(table: RpbTable, new_width_extent: int, new_height_extent: int) -> RpbTable:
    """Zero-pad a bias table to larger offset extents.

    Existing offsets keep their biases exactly; new ones are 0.
    """
    if new_width_extent < table.width_extent or new_height_extent < table.height_extent:
        raise ValueError("RPB extents can only grow; shrinking would drop learned biases")
    dw = new_width_extent - table.width_extent
    dh = new_height_extent - table.height_extent
    return RpbTable(new_width_extent, new_height_extent,
                    np.pad(table.biases, ((dw, dw), (dh, dh))),
                    table.class_token_bias)
