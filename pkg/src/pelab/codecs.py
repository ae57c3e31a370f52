"""Scalar quantiser codecs standing in for learned and traditional base codecs.

Three kinds share one index geometry per coordinate:

* ``uniform-mse``: ``k = floor((x - offset) / delta)``, decoded to the cell midpoint.
* ``deadzone-opaque``: the zero bin is widened to ``[-delta, delta)`` around
  ``offset``; decoded to the zero-bin centre or the outer-cell midpoints. It is
  marked non-differentiable and offers no soft quantiser.
* ``cell-sampler-perceptual``: uniform-mse indices, decoded to a uniform random
  point inside the cell (an imperfect perceptual decoder).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import ndtr

from . import rng
from .gmm import GmmModel

KINDS = ("uniform-mse", "deadzone-opaque", "cell-sampler-perceptual")
_KIND_BYTE = {k: i for i, k in enumerate(KINDS)}
BITSTREAM_MAGIC = b"PELB1"
SAMPLES_MAGIC = b"PELS1"
SOFT_TAU = 10.0
SOFT_WINDOW = 2  # cells on each side of the hard index


@dataclass(frozen=True, eq=False)
class Bitstream:
    """Integer quantisation indices of shape ``(n, d)`` tagged with the producing codec."""

    symbols: np.ndarray
    codec_id: str

    def __post_init__(self):
        sym = np.asarray(self.symbols, dtype=np.int64)
        if sym.ndim != 2:
            raise ValueError("symbols must be an (n, d) array")
        sym = sym.copy()
        sym.flags.writeable = False
        object.__setattr__(self, "symbols", sym)

    @property
    def n(self) -> int:
        return self.symbols.shape[0]

    @property
    def d(self) -> int:
        return self.symbols.shape[1]

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256(self.codec_id.encode())
        h.update(np.ascontiguousarray(self.symbols).tobytes())
        return h.hexdigest()


class ForeignBitstreamError(ValueError):
    pass


class _ScalarQuantizer:
    kind = ""
    differentiable = True

    def __init__(self, delta: float, offset: float = 0.0):
        if not np.isfinite(delta) or delta <= 0:
            raise ValueError("delta must be positive")
        if not np.isfinite(offset):
            raise ValueError("offset must be finite")
        self.delta = float(delta)
        self.offset = float(offset)

    @property
    def codec_id(self) -> str:
        return f"{self.kind}:{self.delta!r}:{self.offset!r}"

    def spec(self) -> dict:
        return {"kind": self.kind, "delta": self.delta, "offset": self.offset}

    def __repr__(self):
        return f"{type(self).__name__}(delta={self.delta}, offset={self.offset})"

    def _check(self, y: Bitstream):
        if not isinstance(y, Bitstream) or y.codec_id != self.codec_id:
            got = getattr(y, "codec_id", type(y).__name__)
            raise ForeignBitstreamError(f"bitstream from {got!r} cannot be decoded by {self.codec_id!r}")

    # geometry shared by the uniform kinds
    def _index(self, x: np.ndarray) -> np.ndarray:
        return np.floor((x - self.offset) / self.delta).astype(np.int64)

    def cell_bounds(self, k: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        k = np.asarray(k, dtype=float)
        lo = self.offset + k * self.delta
        return lo, lo + self.delta

    def reconstruction(self, k: np.ndarray) -> np.ndarray:
        return self.offset + (np.asarray(k, dtype=float) + 0.5) * self.delta

    def encode(self, x) -> Bitstream:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if not np.all(np.isfinite(x)):
            raise ValueError("cannot encode non-finite samples")
        return Bitstream(self._index(x), self.codec_id)

    def decode(self, y: Bitstream, seed=None, offset: int = 0) -> np.ndarray:
        self._check(y)
        return self.reconstruction(y.symbols)

    def soft_index(self, x, derivative: bool = False):
        """Differentiable index surrogate ``sum_k k * softmax(-tau * ((x - c_k) / delta)^2)``.

        The window holds the hard cell and two neighbours on each side; ``tau``
        is ``SOFT_TAU``.
        """
        x = np.asarray(x, dtype=float)
        k0 = np.floor((x - self.offset) / self.delta)
        ks = k0[..., None] + np.arange(-SOFT_WINDOW, SOFT_WINDOW + 1)
        u = (x[..., None] - (self.offset + (ks + 0.5) * self.delta)) / self.delta
        logits = -SOFT_TAU * u**2
        logits -= logits.max(axis=-1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=-1, keepdims=True)
        soft = np.sum(p * ks, axis=-1)
        if not derivative:
            return soft
        dlogit = -2.0 * SOFT_TAU * u / self.delta
        dsoft = np.sum(p * ks * dlogit, axis=-1) - soft * np.sum(p * dlogit, axis=-1)
        return soft, dsoft


class UniformMSECodec(_ScalarQuantizer):
    kind = "uniform-mse"


class CellSamplerCodec(_ScalarQuantizer):
    """Decodes to a uniform draw within the cell, using its own ``"codec"`` stream."""

    kind = "cell-sampler-perceptual"

    def decode(self, y: Bitstream, seed=None, offset: int = 0) -> np.ndarray:
        self._check(y)
        lo, _ = self.cell_bounds(y.symbols)
        u = rng.stream(seed, "codec", y.n, offset).uniform(0, y.d)
        return lo + self.delta * (1.0 - u)  # 1 - u lies in [0, 1)


class DeadzoneOpaqueCodec(_ScalarQuantizer):
    """Dead-zone quantiser treated as a black box by the pipeline.

    Indices: 0 on ``[-delta, delta)``, ``floor(u)`` above, ``floor(u) + 1`` below,
    with ``u = (x - offset) / delta``.
    """

    kind = "deadzone-opaque"
    differentiable = False

    def _index(self, x):
        u = (x - self.offset) / self.delta
        k = np.floor(u)
        k = np.where(u >= 1.0, k, np.where(u < -1.0, k + 1.0, 0.0))
        return k.astype(np.int64)

    def cell_bounds(self, k):
        k = np.asarray(k, dtype=float)
        lo = np.where(k > 0, k, np.where(k < 0, k - 1.0, -1.0))
        hi = np.where(k > 0, k + 1.0, np.where(k < 0, k, 1.0))
        return self.offset + lo * self.delta, self.offset + hi * self.delta

    def reconstruction(self, k):
        k = np.asarray(k, dtype=float)
        mid = np.where(k > 0, k + 0.5, np.where(k < 0, k - 0.5, 0.0))
        return self.offset + mid * self.delta

    def soft_index(self, x, derivative=False):
        raise TypeError("deadzone-opaque codec has no differentiable surrogate")


_CLASSES = {c.kind: c for c in (UniformMSECodec, DeadzoneOpaqueCodec, CellSamplerCodec)}


def make_codec(kind: str, delta: float, offset: float = 0.0):
    if kind not in _CLASSES:
        raise ValueError(f"unknown codec kind {kind!r}; expected one of {KINDS}")
    return _CLASSES[kind](delta, offset)


def codec_from_dict(spec: dict):
    if not isinstance(spec, dict):
        raise ValueError("codec spec must be a mapping")
    extra = set(spec) - {"kind", "delta", "offset"}
    if extra:
        raise ValueError(f"unknown codec keys: {sorted(extra)}")
    if "kind" not in spec or "delta" not in spec:
        raise ValueError("codec spec needs 'kind' and 'delta'")
    return make_codec(spec["kind"], float(spec["delta"]), float(spec.get("offset", 0.0)))


def rate_bits(codec, y: Bitstream) -> float:
    """Empirical entropy of the per-coordinate symbol histograms, in bits per sample-coordinate."""
    total = 0.0
    for c in range(y.d):
        _, counts = np.unique(y.symbols[:, c], return_counts=True)
        p = counts / counts.sum()
        total += float(-np.sum(p * np.log2(p)))
    return total / y.d


def cell_posterior_mean(model: GmmModel, codec, y: Bitstream) -> np.ndarray:
    """``E[X | X in cell(y)]`` under ``model`` by adaptive quadrature (1-D only)."""
    if model.d != 1:
        raise NotImplementedError("cell_posterior_mean supports d = 1 only")
    codec._check(y)
    from .gmm import log_density

    def dens(x):
        return np.exp(log_density(model, 0.0, np.array([x])))

    uniq, inverse = np.unique(y.symbols[:, 0], return_inverse=True)
    lo, hi = codec.cell_bounds(uniq)
    means = np.empty(len(uniq))
    for j, (a, b) in enumerate(zip(lo, hi)):
        pts = [float(m) for m in model.means[:, 0] if a < m < b] or None
        mass = integrate.quad(dens, a, b, points=pts, epsabs=0, epsrel=1e-12, limit=200)[0]
        first = integrate.quad(lambda x: x * dens(x), a, b, points=pts, epsabs=1e-15, epsrel=1e-12, limit=200)[0]
        means[j] = first / mass if mass > 0 else 0.5 * (a + b)
    return means[inverse].reshape(-1, 1)


def cell_masses(model: GmmModel, codec, lo: float, hi: float, dim: int = 0):
    """Per-component probabilities of every cell meeting ``[lo, hi]`` along ``dim``.

    Returns ``(indices, masses)`` with ``masses`` of shape ``(K, n_cells)``.
    """
    k_lo = int(codec._index(np.array([lo]))[0])
    k_hi = int(codec._index(np.array([hi]))[0])
    ks = np.arange(k_lo, k_hi + 1)
    a, b = codec.cell_bounds(ks)
    mu = model.means[:, dim][:, None]
    sd = np.sqrt(model.variances[:, dim])[:, None]
    return ks, ndtr((b - mu) / sd) - ndtr((a - mu) / sd)


def write_bitstream(y: Bitstream, codec, fh) -> None:
    """Binary container: magic, kind byte, delta, offset (f64), n, d (i64), zig-zag varints."""
    if y.codec_id != codec.codec_id:
        raise ForeignBitstreamError("bitstream does not belong to this codec")
    fh.write(BITSTREAM_MAGIC)
    fh.write(struct.pack("<Bddqq", _KIND_BYTE[codec.kind], codec.delta, codec.offset, y.n, y.d))
    fh.write(_varints(y.symbols.ravel()))


def read_bitstream(fh):
    """Inverse of :func:`write_bitstream`; returns ``(bitstream, codec)``."""
    if fh.read(5) != BITSTREAM_MAGIC:
        raise ValueError("not a PELB1 bitstream")
    kind_b, delta, offset, n, d = struct.unpack("<Bddqq", fh.read(struct.calcsize("<Bddqq")))
    codec = make_codec(KINDS[kind_b], delta, offset)
    symbols = _read_varints(fh.read(), n * d).reshape(n, d)
    return Bitstream(symbols, codec.codec_id), codec


def _varints(values: np.ndarray) -> bytes:
    out = bytearray()
    for v in values.tolist():
        z = (v << 1) ^ (v >> 63)
        z &= (1 << 64) - 1
        while z >= 0x80:
            out.append((z & 0x7F) | 0x80)
            z >>= 7
        out.append(z)
    return bytes(out)


def _read_varints(buf: bytes, count: int) -> np.ndarray:
    vals = np.empty(count, dtype=np.int64)
    pos = 0
    for i in range(count):
        z = shift = 0
        while True:
            if pos >= len(buf):
                raise ValueError("truncated varint stream")
            b = buf[pos]
            pos += 1
            z |= (b & 0x7F) << shift
            shift += 7
            if b < 0x80:
                break
        vals[i] = (z >> 1) ^ -(z & 1)
    if pos != len(buf):
        raise ValueError("trailing bytes after symbol stream")
    return vals


def write_samples(x: np.ndarray, fh) -> None:
    """Sample dump: magic ``PELS1``, n, d (i64) and row-major little-endian f64 values."""
    x = np.asarray(x, dtype="<f8")
    fh.write(SAMPLES_MAGIC)
    fh.write(struct.pack("<qq", *x.shape))
    fh.write(np.ascontiguousarray(x).tobytes())


def read_samples(fh) -> np.ndarray:
    if fh.read(5) != SAMPLES_MAGIC:
        raise ValueError("not a PELS1 sample file")
    n, d = struct.unpack("<qq", fh.read(16))
    return np.frombuffer(fh.read(), dtype="<f8").reshape(n, d).copy()


def bitstream_bytes(y: Bitstream, codec) -> bytes:
    buf = io.BytesIO()
    write_bitstream(y, codec, buf)
    return buf.getvalue()


def decoded_log_density(model: GmmModel, codec, sigma: float, pad: float = 12.0):
    """Log density of ``decode(encode(X0)) + N(0, sigma^2 I)`` for ``X0 ~ model``.

    Quantisation acts per coordinate and every component is diagonal, so each
    component factorises into 1-D cell mixtures. Deterministic decoders place a
    Gaussian at each reconstruction point; the cell sampler contributes a
    uniform-cell-convolved-Gaussian. Needs ``sigma > 0``.
    """
    from scipy.special import logsumexp

    if sigma <= 0:
        raise ValueError("decoded marginal has no density at sigma = 0")
    sd_max = float(np.sqrt(model.variances.max()))
    factors = []
    for c in range(model.d):
        lo = float(model.means[:, c].min()) - pad * sd_max
        hi = float(model.means[:, c].max()) + pad * sd_max
        ks, mass = cell_masses(model, codec, lo, hi, dim=c)
        a, b = codec.cell_bounds(ks)
        factors.append((mass, a, b, codec.reconstruction(ks)))
    uniform_cells = isinstance(codec, CellSamplerCodec)

    def logpdf(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.tile(np.log(model.weights)[:, None], (1, x.shape[0]))  # (K, n)
        for c, (mass, a, b, r) in enumerate(factors):
            xc = x[:, c][:, None]
            if uniform_cells:
                kern = (ndtr((xc - a) / sigma) - ndtr((xc - b) / sigma)) / (b - a)
            else:
                kern = np.exp(-0.5 * ((xc - r) / sigma) ** 2) / (sigma * np.sqrt(2 * np.pi))
            with np.errstate(divide="ignore"):
                out += np.log(kern @ mass.T).T
        return logsumexp(out, axis=0)

    return logpdf
