"""Seeded stand-in for the vision-language model's embedding side.

Produces image-token embeddings from patch statistics, picks the hidden state
of the segmentation token out of a generated sequence, and applies the
two-layer projection head that maps that state into the image-token space.
"""

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidInputError, NoSegTokenError
from .validation import check_image, check_matrix, check_vector, frozen

#: Number of per-patch statistics fed to the encoder's linear map.
N_PATCH_STATS = 4

_NONLINEARITIES = {
    "relu": lambda z: np.maximum(z, 0.0),
    "tanh": np.tanh,
}


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Image-token embeddings, one row per patch (row-major patch order)."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values",
                           frozen(check_matrix(self.values, name="embeddings")))

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]

    def to_bytes(self):
        """Little-endian float32 payload behind an ``(n, d)`` uint32 header."""
        header = struct.pack("<II", self.rows, self.dim)
        return header + self.values.astype("<f4").tobytes(order="C")

    @classmethod
    def from_bytes(cls, data):
        if len(data) < 8:
            raise InvalidInputError("embedding blob shorter than its header")
        n, d = struct.unpack_from("<II", data, 0)
        expected = 8 + 4 * n * d
        if len(data) != expected:
            raise InvalidInputError(
                f"embedding blob has {len(data)} bytes, header implies {expected}")
        values = np.frombuffer(data, dtype="<f4", offset=8).reshape(n, d)
        return cls(values.astype(np.float64))

    def to_csv(self):
        buf = io.StringIO()
        np.savetxt(buf, self.values, delimiter=",", fmt="%.17g")
        return buf.getvalue()


@dataclass(frozen=True)
class SegTokenRaw:
    """Last-layer hidden state at the segmentation token."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values",
                           frozen(check_vector(self.values, name="seg token")))

    @property
    def dim(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class SegEmbedding:
    """Projected segmentation embedding living in the image-token space."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values",
                           frozen(check_vector(self.values, name="seg embedding")))

    @property
    def dim(self):
        return self.values.shape[0]

    def scaled(self, factor):
        return SegEmbedding(self.values * factor)


@dataclass(frozen=True)
class ProjectionHead:
    """Two affine layers with a pointwise nonlinearity in between.

    Weights are drawn from ``seed`` unless passed explicitly, so a head is
    fully determined by ``(widths, nonlinearity, seed)``.
    """

    in_dim: int = 32
    mid_dim: int = 64
    out_dim: int = 16
    nonlinearity: str = "relu"
    seed: int = 0
    w1: np.ndarray = field(default=None, repr=False, compare=False)
    b1: np.ndarray = field(default=None, repr=False, compare=False)
    w2: np.ndarray = field(default=None, repr=False, compare=False)
    b2: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.nonlinearity not in _NONLINEARITIES:
            raise InvalidInputError(
                f"nonlinearity must be one of {sorted(_NONLINEARITIES)}")
        if min(self.in_dim, self.mid_dim, self.out_dim) < 1:
            raise InvalidInputError("layer widths must be >= 1")
        given = [w is not None for w in (self.w1, self.b1, self.w2, self.b2)]
        if any(given) and not all(given):
            raise InvalidInputError("pass all of w1, b1, w2, b2 or none")
        if not any(given):
            rng = np.random.default_rng(self.seed)
            w1 = rng.normal(0.0, 1.0 / np.sqrt(self.in_dim), (self.mid_dim, self.in_dim))
            b1 = rng.uniform(-0.1, 0.1, self.mid_dim)
            w2 = rng.normal(0.0, 1.0 / np.sqrt(self.mid_dim), (self.out_dim, self.mid_dim))
            b2 = rng.uniform(-0.1, 0.1, self.out_dim)
        else:
            w1, b1, w2, b2 = (np.asarray(a, dtype=np.float64)
                              for a in (self.w1, self.b1, self.w2, self.b2))
            if (w1.shape != (self.mid_dim, self.in_dim) or b1.shape != (self.mid_dim,)
                    or w2.shape != (self.out_dim, self.mid_dim)
                    or b2.shape != (self.out_dim,)):
                raise InvalidInputError("weight shapes do not match layer widths")
        for name, arr in (("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)):
            object.__setattr__(self, name, frozen(arr))

    @classmethod
    def from_weights(cls, w1, b1, w2, b2, nonlinearity="relu"):
        w1 = np.asarray(w1, dtype=np.float64)
        w2 = np.asarray(w2, dtype=np.float64)
        return cls(in_dim=w1.shape[1], mid_dim=w1.shape[0], out_dim=w2.shape[0],
                   nonlinearity=nonlinearity, w1=w1, b1=b1, w2=w2, b2=b2)

    def activation(self, z):
        return _NONLINEARITIES[self.nonlinearity](z)

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        return self.w2 @ self.activation(self.w1 @ x + self.b1) + self.b2

    def lipschitz_bound(self):
        """Upper bound on the head's Lipschitz constant (both nonlinearities are 1-Lipschitz)."""
        return float(np.linalg.norm(self.w2, 2) * np.linalg.norm(self.w1, 2))


def _encoder_map(dim, seed):
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, 1.0, (dim, N_PATCH_STATS))


def patch_statistics(image, patch):
    """Per-patch ``(mean, variance, centroid_dy, centroid_dx)`` in row-major patch order.

    Centroid offsets are the intensity-weighted centroid relative to the patch
    centre, in units of the patch side; a patch with zero total intensity has
    zero offsets.
    """
    img = check_image(image)
    if patch < 1:
        raise InvalidInputError("patch side must be >= 1")
    h, w = img.shape
    if h < patch or w < patch:
        raise InvalidInputError(f"image {img.shape} is smaller than one {patch}x{patch} patch")
    ph, pw = h // patch, w // patch
    patches = (img[:ph * patch, :pw * patch]
               .reshape(ph, patch, pw, patch)
               .transpose(0, 2, 1, 3)
               .reshape(ph * pw, patch, patch))
    mean = patches.mean(axis=(1, 2))
    var = patches.var(axis=(1, 2))
    coords = (np.arange(patch) + 0.5) - patch / 2.0
    total = patches.sum(axis=(1, 2))
    safe = np.where(total != 0.0, total, 1.0)
    dy = np.where(total != 0.0, (patches.sum(axis=2) @ coords) / safe, 0.0) / patch
    dx = np.where(total != 0.0, (patches.sum(axis=1) @ coords) / safe, 0.0) / patch
    return np.stack([mean, var, dy, dx], axis=1)


def toy_encode(image, patch=2, dim=16, seed=0):
    """Embed each ``patch x patch`` tile of ``image`` with a seeded linear map of its statistics."""
    if dim < 1:
        raise InvalidInputError("embedding dim must be >= 1")
    stats = patch_statistics(image, patch)
    return EmbeddingMatrix(stats @ _encoder_map(dim, seed).T)


def extract_seg_token(hidden_states, token_ids, seg_id):
    """Hidden state at the last occurrence of ``seg_id`` in ``token_ids``."""
    token_ids = list(token_ids)
    if len(token_ids) != len(hidden_states):
        raise InvalidInputError("hidden_states and token_ids differ in length")
    for pos in range(len(token_ids) - 1, -1, -1):
        if token_ids[pos] == seg_id:
            return SegTokenRaw(hidden_states[pos])
    raise NoSegTokenError(f"token {seg_id!r} not present in the generated sequence")


def project(raw, head):
    if raw.dim != head.in_dim:
        raise InvalidInputError(
            f"seg token has dim {raw.dim}, projection head expects {head.in_dim}")
    return SegEmbedding(head(raw.values))
