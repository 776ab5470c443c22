"""Products of butterfly-arranged Givens rotations.

A :class:`ButterflyProduct` of dimension ``n = 2**L`` is ``Q = Q_1 Q_2 ... Q_L``
where layer ``Q_i`` applies ``n/2`` independent 2x2 blocks to the coordinate
pairs returned by :func:`pairing`.  Each block holds four free entries
``(a, b, c, d)`` so that a gradient step can leave the rotation manifold;
:meth:`ButterflyProduct.project` maps every block back to its nearest rotation.

Layer ``i`` pairs ``(2pk + j, 2pk + p + j)`` with ``p = n / 2**i``.  Viewing a
vector as an array of shape ``(2**(i-1), 2, p)`` puts the low member of each
pair at ``[:, 0, :]`` and the high member at ``[:, 1, :]``, with blocks in
pairing order, which is how the kernels below avoid fancy indexing.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ButterflyLayer",
    "ButterflyProduct",
    "DegenerateBlockError",
    "GivensBlock",
    "from_angles",
    "log2_exact",
    "pairing",
]

# Relative threshold on eta below which a block has no well-defined rotation.
DEGENERACY_RTOL = 1e-12

_MAGIC = b"BFLY"


class DegenerateBlockError(ValueError):
    """A relaxed block has ``a + d == b - c == 0`` (up to tolerance) and cannot be projected."""

    def __init__(self, layer: int, pair: tuple[int, int], eta: float):
        self.layer = layer
        self.pair = pair
        self.eta = eta
        super().__init__(f"degenerate Givens block in layer {layer} on pair {pair} (eta={eta:.3e})")


def log2_exact(n: int) -> int:
    """Return ``L`` with ``n == 2**L``, ``L >= 1``; raise ``ValueError`` otherwise."""
    if not isinstance(n, (int, np.integer)) or n < 2 or (n & (n - 1)) != 0:
        raise ValueError(f"dimension must be a power of two >= 2, got {n!r}")
    return int(n).bit_length() - 1


def pairing(n: int, i: int) -> list[tuple[int, int]]:
    """Coordinate pairs rotated by layer ``i`` (1-based) of an ``n``-dimensional butterfly.

    >>> pairing(8, 1)
    [(0, 4), (1, 5), (2, 6), (3, 7)]
    >>> pairing(8, 3)
    [(0, 1), (2, 3), (4, 5), (6, 7)]
    """
    L = log2_exact(n)
    if not 1 <= i <= L:
        raise ValueError(f"layer index must be in 1..{L}, got {i}")
    p = n >> i
    return [(2 * p * k + j, 2 * p * k + p + j) for k in range(1 << (i - 1)) for j in range(p)]


@dataclass
class GivensBlock:
    """One 2x2 block ``[[a, b], [c, d]]`` acting on coordinates ``pair = (lo, hi)``."""

    a: float
    b: float
    c: float
    d: float
    pair: tuple[int, int]

    def matrix(self) -> np.ndarray:
        return np.array([[self.a, self.b], [self.c, self.d]])

    @property
    def is_rotation(self) -> bool:
        return (
            abs(self.a - self.d) <= 1e-12
            and abs(self.b + self.c) <= 1e-12
            and abs(self.a**2 + self.b**2 - 1.0) <= 1e-12
        )

    def projected(self) -> GivensBlock:
        s = self.a + self.d
        t = self.b - self.c
        eta = np.hypot(s, t)
        if eta <= DEGENERACY_RTOL * max(1.0, abs(self.a), abs(self.b), abs(self.c), abs(self.d)):
            raise DegenerateBlockError(0, self.pair, eta)
        return GivensBlock(s / eta, t / eta, -t / eta, s / eta, self.pair)


@dataclass
class ButterflyLayer:
    """Read-only view of one layer: its 1-based index and its ``n/2`` blocks."""

    layer_index: int
    blocks: list[GivensBlock]


class ButterflyProduct:
    """``Q = Q_1 Q_2 ... Q_L`` with relaxed 2x2 blocks stored layer-major.

    Parameters
    ----------
    n : int
        Dimension, a power of two.
    a, b, c, d : array_like, optional
        Block entries of shape ``(L, n // 2)``; row ``i - 1`` holds layer ``i``
        in pairing order.  Defaults to the identity.

    Attributes
    ----------
    mul_add_counter : int or None
        When not ``None``, every product with a vector adds the number of
        multiply-adds it performed (four per block per layer per vector).
    """

    def __init__(self, n: int, a=None, b=None, c=None, d=None):
        self.n = int(n)
        self.L = log2_exact(self.n)
        shape = (self.L, self.n // 2)
        if a is None:
            a, b, c, d = np.ones(shape), np.zeros(shape), np.zeros(shape), np.ones(shape)
        self.a = np.array(a, dtype=np.float64).reshape(shape)
        self.b = np.array(b, dtype=np.float64).reshape(shape)
        self.c = np.array(c, dtype=np.float64).reshape(shape)
        self.d = np.array(d, dtype=np.float64).reshape(shape)
        self.mul_add_counter: int | None = None

    # -- construction -----------------------------------------------------

    @classmethod
    def identity(cls, n: int) -> ButterflyProduct:
        return cls(n)

    @classmethod
    def random(cls, n: int, rng: np.random.Generator | int | None = None) -> ButterflyProduct:
        """Rotation product with angles drawn uniformly in ``[-pi, pi)``."""
        rng = np.random.default_rng(rng)
        L = log2_exact(n)
        return from_angles(n, rng.uniform(-np.pi, np.pi, size=L * n // 2))

    def copy(self) -> ButterflyProduct:
        return ButterflyProduct(self.n, self.a.copy(), self.b.copy(), self.c.copy(), self.d.copy())

    @property
    def num_params(self) -> int:
        """Number of relaxed parameters, ``2 n lg(n)``."""
        return 4 * self.a.size

    def params(self) -> np.ndarray:
        """Relaxed parameters as one flat vector in serialization order."""
        return np.stack([self.a, self.b, self.c, self.d], axis=-1).ravel()

    def set_params(self, theta: np.ndarray) -> None:
        blocks = np.asarray(theta, dtype=np.float64).reshape(self.L, self.n // 2, 4)
        self.a, self.b, self.c, self.d = (blocks[..., k].copy() for k in range(4))

    def angles(self) -> np.ndarray:
        """Rotation angles in layer-major order; meaningful only for projected products."""
        return np.arctan2(self.c, self.a).ravel()

    def layer(self, i: int) -> ButterflyLayer:
        pairs = pairing(self.n, i)
        r = i - 1
        blocks = [
            GivensBlock(float(self.a[r, k]), float(self.b[r, k]), float(self.c[r, k]), float(self.d[r, k]), pairs[k])
            for k in range(len(pairs))
        ]
        return ButterflyLayer(i, blocks)

    @property
    def layers(self) -> list[ButterflyLayer]:
        return [self.layer(i) for i in range(1, self.L + 1)]

    # -- products ---------------------------------------------------------

    def _count(self, x: np.ndarray, layers: int) -> None:
        if self.mul_add_counter is not None:
            nvec = 1 if x.ndim == 1 else int(np.prod(x.shape[:-1]))
            self.mul_add_counter += 2 * self.n * layers * nvec

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 0 or x.shape[-1] != self.n:
            raise ValueError(f"expected trailing dimension {self.n}, got shape {x.shape}")
        return x

    def apply_layer(self, i: int, x: np.ndarray, transpose: bool = False) -> np.ndarray:
        """Apply ``Q_i`` (or ``Q_i^T``) to ``x`` of shape ``(..., n)``."""
        x = self._check(x)
        self._count(x, 1)
        return _layer(x, self.a[i - 1], self.b[i - 1], self.c[i - 1], self.d[i - 1], i, transpose)

    def apply(self, x) -> np.ndarray:
        """``Q_1 (Q_2 (... (Q_L x)))`` for ``x`` of shape ``(n,)`` or ``(batch, n)``."""
        x = self._check(x)
        self._count(x, self.L)
        for i in range(self.L, 0, -1):
            x = _layer(x, self.a[i - 1], self.b[i - 1], self.c[i - 1], self.d[i - 1], i, False)
        return x

    def apply_transpose(self, x) -> np.ndarray:
        """``Q_L^T (... (Q_1^T x))``; the inverse of :meth:`apply` once projected."""
        x = self._check(x)
        self._count(x, self.L)
        for i in range(1, self.L + 1):
            x = _layer(x, self.a[i - 1], self.b[i - 1], self.c[i - 1], self.d[i - 1], i, True)
        return x

    def to_dense(self) -> np.ndarray:
        counter, self.mul_add_counter = self.mul_add_counter, None
        try:
            # Row r of apply(I) is Q e_r, i.e. column r of Q.
            return self.apply(np.eye(self.n)).T
        finally:
            self.mul_add_counter = counter

    # -- projection -------------------------------------------------------

    def project(self, on_degenerate: str = "raise") -> ButterflyProduct:
        """Replace every block by its nearest rotation, in place.

        ``[[a, b], [c, d]] -> [[a+d, b-c], [c-b, a+d]] / eta`` with
        ``eta = hypot(a+d, b-c)``.  Blocks with ``eta`` below
        ``1e-12 * max(1, |block|_max)`` raise :class:`DegenerateBlockError`
        unless ``on_degenerate="reset"``, which sets them to the identity.
        Returns ``self`` and leaves the number of reset blocks in
        ``self.last_reset_count``.
        """
        s = self.a + self.d
        t = self.b - self.c
        eta = np.hypot(s, t)
        scale = np.maximum.reduce([np.ones_like(s), np.abs(self.a), np.abs(self.b), np.abs(self.c), np.abs(self.d)])
        bad = ~(eta > DEGENERACY_RTOL * scale)
        if bad.any():
            if on_degenerate != "reset":
                r, k = map(int, np.argwhere(bad)[0])
                raise DegenerateBlockError(r + 1, pairing(self.n, r + 1)[k], float(eta[r, k]))
            s = np.where(bad, 1.0, s)
            t = np.where(bad, 0.0, t)
            eta = np.where(bad, 1.0, eta)
        self.last_reset_count = int(bad.sum())
        self.a = s / eta
        self.b = t / eta
        self.c = -self.b
        self.d = self.a.copy()
        return self

    # -- serialization ----------------------------------------------------

    def to_bytes(self, relaxed: bool = True) -> bytes:
        """Binary record: ``b"BFLY"``, then ``n, L, relaxed`` as little-endian
        int64, then ``(a, b, c, d)`` per block as little-endian float64,
        layer 1 first, blocks in pairing order."""
        header = _MAGIC + struct.pack("<qqq", self.n, self.L, int(relaxed))
        return header + self.params().astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> ButterflyProduct:
        Q, _ = cls._read_bytes(data)
        return Q

    @classmethod
    def _read_bytes(cls, data: bytes) -> tuple[ButterflyProduct, int]:
        if data[:4] != _MAGIC:
            raise ValueError("not a butterfly record (bad magic)")
        n, L, _relaxed = struct.unpack_from("<qqq", data, 4)
        if log2_exact(n) != L:
            raise ValueError(f"inconsistent header: n={n}, L={L}")
        count = 2 * n * L
        start = 4 + 24
        end = start + 8 * count
        if len(data) < end:
            raise ValueError("truncated butterfly record")
        Q = cls(n)
        Q.set_params(np.frombuffer(data[start:end], dtype="<f8"))
        return Q, end

    def to_text(self, relaxed: bool = True) -> str:
        lines = [f"{self.n} {self.L} {int(relaxed)}"]
        for row in self.params().reshape(-1, 4):
            lines.append(" ".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> ButterflyProduct:
        rows = text.split("\n")
        n, L, _relaxed = (int(v) for v in rows[0].split())
        if log2_exact(n) != L:
            raise ValueError(f"inconsistent header: n={n}, L={L}")
        values = [float(v) for line in rows[1 : 1 + L * n // 2] for v in line.split()]
        if len(values) != 2 * n * L:
            raise ValueError("truncated butterfly text record")
        Q = cls(n)
        Q.set_params(np.array(values))
        return Q

    def __repr__(self) -> str:
        return f"ButterflyProduct(n={self.n}, layers={self.L})"


def from_angles(n: int, angles) -> ButterflyProduct:
    """Rotation product with block ``(cos t, -sin t, sin t, cos t)`` per angle.

    Angles are consumed layer-major (layer 1 first), in pairing order within a layer.
    """
    L = log2_exact(n)
    angles = np.asarray(angles, dtype=np.float64).ravel()
    if angles.size != L * n // 2:
        raise ValueError(f"expected {L * n // 2} angles for n={n}, got {angles.size}")
    cos, sin = np.cos(angles), np.sin(angles)
    return ButterflyProduct(n, cos, -sin, sin, cos)


def _layer(x, a, b, c, d, i, transpose):
    n = x.shape[-1]
    p = n >> i
    v = x.reshape(x.shape[:-1] + (n // (2 * p), 2, p))
    lo, hi = v[..., 0, :], v[..., 1, :]
    shape = (n // (2 * p), p)
    a, b, c, d = a.reshape(shape), b.reshape(shape), c.reshape(shape), d.reshape(shape)
    if transpose:
        b, c = c, b
    out = np.empty_like(v)
    out[..., 0, :] = a * lo + b * hi
    out[..., 1, :] = c * lo + d * hi
    return out.reshape(x.shape)
