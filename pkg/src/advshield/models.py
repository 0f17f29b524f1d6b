"""Seeded, frozen toy networks: projector, cross-attention block, proposal
detector, identity embedder.

All four are deterministic functions of (seed, input). Weights are drawn
once from a PCG64 stream, never trained, and round-trip bit-exactly
through the binary weight file (magic "ADVSHLD1").
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, box_resize, conv2d, matmul, pool_avg, reshape, select, softmax, sqrt, tsum, square, tanh, transpose

MAGIC = b"ADVSHLD1"
FORMAT_VERSION = 1

DEFAULT_SEQ = 4
DEFAULT_DIM = 16
DEFAULT_RES = 16
EMBED_DIM = 128


def _draw(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    s = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape)


def _check_square_image(x: Tensor, min_side: int, who: str):
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"{who}: expected a 3xHxW image, got shape {x.shape}")
    _, h, w = x.shape
    if h != w:
        raise ValueError(f"{who}: expected a square image, got {h}x{w}")
    if h < min_side:
        raise ValueError(f"{who}: image side {h} below minimum {min_side}")


class _Conv:
    """Frozen conv layer; weights live as plain arrays."""

    def __init__(self, weight, bias, stride, padding):
        self.weight = weight
        self.bias = bias
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class FaceProjector:
    """Maps a square image to conditioning tokens of shape [seq, d]."""

    def __init__(self, conv1: _Conv, conv2: _Conv, fc_w, fc_b, seq: int, d: int):
        self.conv1 = conv1
        self.conv2 = conv2
        self.fc_w = fc_w
        self.fc_b = fc_b
        self.seq = seq
        self.d = d

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        _check_square_image(x, 8, "projector")
        f = tanh(self.conv1(x))
        f = tanh(self.conv2(f))
        pooled = f.mean(axis=(1, 2))  # global average over space -> [channels]
        row = reshape(pooled, (1, pooled.shape[0]))
        tokens = matmul(row, self.fc_w) + self.fc_b
        return reshape(tokens, (self.seq, self.d))


class CrossAttentionBlock:
    """Single-head cross attention; only the attention map is exposed.

    The query comes from a conv encoder over the image, pooled onto a
    fixed grid so the number of query positions is size-independent. Keys
    come from external tokens. The value product is never formed because
    no consumer needs it.
    """

    def __init__(self, conv1: _Conv, conv2: _Conv, w_q, w_k, res: int, d: int):
        self.conv1 = conv1
        self.conv2 = conv2
        self.w_q = w_q
        self.w_k = w_k
        self.res = res
        self.d = d
        g = int(round(math.sqrt(res)))
        if g * g != res:
            raise ValueError(f"attention block: res {res} must be a perfect square")
        self.grid = g

    def query(self, x) -> Tensor:
        x = as_tensor(x)
        _check_square_image(x, 8, "attention query encoder")
        f = tanh(self.conv1(x))
        f = tanh(self.conv2(f))
        pooled = box_resize(f, (self.grid, self.grid))  # [c, g, g]
        c = pooled.shape[0]
        flat = reshape(pooled, (c, self.res))
        positions = transpose(flat)  # [res, c]
        return matmul(positions, self.w_q)  # [res, d]


def attention_forward(block: CrossAttentionBlock, x_query, tokens) -> Tensor:
    """Attention map softmax(Q K^T / sqrt(d)) of shape [1, res, seq]."""
    q = block.query(x_query)
    k = matmul(as_tensor(tokens), block.w_k)  # [seq, d]
    scores = matmul(q, transpose(k)) * (1.0 / math.sqrt(block.d))
    a_map = softmax(scores, dim=-1)
    return reshape(a_map, (1,) + a_map.shape)


class PNetToy:
    """Fully convolutional face/non-face scorer, 12x12 receptive field, stride 2.

    Output grid is [2, ceil((h-10)/2), ceil((w-10)/2)]; channel 0 holds the
    non-face probability, channel 1 the face probability, and the pair sums
    to one per cell.
    """

    def __init__(self, conv1: _Conv, conv2: _Conv, conv3: _Conv, head: _Conv):
        self.conv1 = conv1
        self.conv2 = conv2
        self.conv3 = conv3
        self.head = head

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if x.ndim != 3 or x.shape[0] != 3:
            raise ValueError(f"detector: expected a 3xHxW image, got shape {x.shape}")
        if min(x.shape[1], x.shape[2]) < 12:
            raise ValueError(f"detector: input {x.shape[1]}x{x.shape[2]} below 12x12 receptive field")
        f = tanh(self.conv1(x))
        f = pool_avg(f, 2, 2, ceil_mode=True)
        f = tanh(self.conv2(f))
        f = tanh(self.conv3(f))
        logits = self.head(f)  # [2, h', w']
        return softmax(logits, dim=0)


def pnet_forward(net: PNetToy, x):
    """Per-cell probabilities (P_F, P_T), each of shape [h', w']."""
    probs = net(x)
    return select(probs, 0, 0), select(probs, 0, 1)


class IdentityEmbedder:
    """Unit-norm 128-d identity embedding.

    The per-channel spatial mean is removed before the linear head, so the
    embedding responds to spatial structure rather than global brightness.
    """

    def __init__(self, conv1: _Conv, conv2: _Conv, fc_w, fc_b, grid: int = 4):
        self.conv1 = conv1
        self.conv2 = conv2
        self.fc_w = fc_w
        self.fc_b = fc_b
        self.grid = grid

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        _check_square_image(x, 8, "identity embedder")
        f = tanh(self.conv1(x))
        f = tanh(self.conv2(f))
        pooled = box_resize(f, (self.grid, self.grid))
        centered = pooled - pooled.mean(axis=(1, 2), keepdims=True)
        flat = reshape(centered, (1, centered.size))
        e = matmul(flat, self.fc_w) + self.fc_b
        norm = sqrt(tsum(square(e)) + 1e-24)
        unit = e / norm
        return reshape(unit, (unit.size,))


def project_condition(projector: FaceProjector, x) -> Tensor:
    return projector(x)


def embed_identity(embedder: IdentityEmbedder, x) -> Tensor:
    return embedder(x)


@dataclass
class ToyModelBundle:
    """The four frozen models plus the seed that generated them."""

    seed: int
    seq: int
    d: int
    res: int
    projector: FaceProjector
    attention: CrossAttentionBlock
    pnet: PNetToy
    embedder: IdentityEmbedder
    version: int = FORMAT_VERSION

    def parameters(self):
        """(name, array) pairs in declaration order; the file layout."""
        p, a, t, e = self.projector, self.attention, self.pnet, self.embedder
        return [
            ("projector.conv1.weight", p.conv1.weight),
            ("projector.conv1.bias", p.conv1.bias),
            ("projector.conv2.weight", p.conv2.weight),
            ("projector.conv2.bias", p.conv2.bias),
            ("projector.fc.weight", p.fc_w),
            ("projector.fc.bias", p.fc_b),
            ("attention.conv1.weight", a.conv1.weight),
            ("attention.conv1.bias", a.conv1.bias),
            ("attention.conv2.weight", a.conv2.weight),
            ("attention.conv2.bias", a.conv2.bias),
            ("attention.w_q", a.w_q),
            ("attention.w_k", a.w_k),
            ("pnet.conv1.weight", t.conv1.weight),
            ("pnet.conv1.bias", t.conv1.bias),
            ("pnet.conv2.weight", t.conv2.weight),
            ("pnet.conv2.bias", t.conv2.bias),
            ("pnet.conv3.weight", t.conv3.weight),
            ("pnet.conv3.bias", t.conv3.bias),
            ("pnet.head.weight", t.head.weight),
            ("pnet.head.bias", t.head.bias),
            ("embedder.conv1.weight", e.conv1.weight),
            ("embedder.conv1.bias", e.conv1.bias),
            ("embedder.conv2.weight", e.conv2.weight),
            ("embedder.conv2.bias", e.conv2.bias),
            ("embedder.fc.weight", e.fc_w),
            ("embedder.fc.bias", e.fc_b),
        ]

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(serialize_bundle(self))

    @classmethod
    def load(cls, path) -> "ToyModelBundle":
        with open(path, "rb") as fh:
            return deserialize_bundle(fh.read())


def _param_shapes(seq: int, d: int, res: int):
    """Shapes and fan-ins in declaration order; shared by init and load."""
    token_dim = d
    return [
        ("projector.conv1.weight", (8, 3, 3, 3), 27),
        ("projector.conv1.bias", (8,), 27),
        ("projector.conv2.weight", (16, 8, 3, 3), 72),
        ("projector.conv2.bias", (16,), 72),
        ("projector.fc.weight", (16, seq * d), 16),
        ("projector.fc.bias", (seq * d,), 16),
        ("attention.conv1.weight", (8, 3, 3, 3), 27),
        ("attention.conv1.bias", (8,), 27),
        ("attention.conv2.weight", (16, 8, 3, 3), 72),
        ("attention.conv2.bias", (16,), 72),
        ("attention.w_q", (16, d), 16),
        ("attention.w_k", (token_dim, d), token_dim),
        ("pnet.conv1.weight", (8, 3, 3, 3), 27),
        ("pnet.conv1.bias", (8,), 27),
        ("pnet.conv2.weight", (16, 8, 3, 3), 72),
        ("pnet.conv2.bias", (16,), 72),
        ("pnet.conv3.weight", (16, 16, 3, 3), 144),
        ("pnet.conv3.bias", (16,), 144),
        ("pnet.head.weight", (2, 16, 1, 1), 16),
        ("pnet.head.bias", (2,), 16),
        ("embedder.conv1.weight", (8, 3, 3, 3), 27),
        ("embedder.conv1.bias", (8,), 27),
        ("embedder.conv2.weight", (16, 8, 3, 3), 72),
        ("embedder.conv2.bias", (16,), 72),
        ("embedder.fc.weight", (16 * 4 * 4, EMBED_DIM), 16 * 4 * 4),
        ("embedder.fc.bias", (EMBED_DIM,), 16 * 4 * 4),
    ]


def _assemble(seed: int, seq: int, d: int, res: int, params: dict) -> ToyModelBundle:
    def conv(prefix, stride, padding):
        return _Conv(params[prefix + ".weight"], params[prefix + ".bias"], stride, padding)

    projector = FaceProjector(
        conv("projector.conv1", 2, 1),
        conv("projector.conv2", 2, 1),
        params["projector.fc.weight"],
        params["projector.fc.bias"],
        seq,
        d,
    )
    attention = CrossAttentionBlock(
        conv("attention.conv1", 2, 1),
        conv("attention.conv2", 2, 1),
        params["attention.w_q"],
        params["attention.w_k"],
        res,
        d,
    )
    pnet = PNetToy(
        conv("pnet.conv1", 1, 0),
        conv("pnet.conv2", 1, 0),
        conv("pnet.conv3", 1, 0),
        conv("pnet.head", 1, 0),
    )
    embedder = IdentityEmbedder(
        conv("embedder.conv1", 2, 1),
        conv("embedder.conv2", 2, 1),
        params["embedder.fc.weight"],
        params["embedder.fc.bias"],
    )
    return ToyModelBundle(seed, seq, d, res, projector, attention, pnet, embedder)


def init_models(seed: int, seq: int = DEFAULT_SEQ, d: int = DEFAULT_DIM, res: int = DEFAULT_RES) -> ToyModelBundle:
    """Generate the frozen bundle from a seed.

    Weights are uniform in [-s, s] with s = 1/sqrt(fan_in), drawn from a
    PCG64 stream in declaration order, so the result is bit-identical
    across runs for a given seed.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    params = {}
    for name, shape, fan_in in _param_shapes(seq, d, res):
        params[name] = _draw(rng, shape, fan_in)
    return _assemble(seed, seq, d, res, params)


def serialize_bundle(bundle: ToyModelBundle) -> bytes:
    """Little-endian container: header, per-parameter table, raw float64 data."""
    parts = [MAGIC]
    parts.append(struct.pack("<Iq", FORMAT_VERSION, bundle.seed))
    parts.append(struct.pack("<III", bundle.seq, bundle.d, bundle.res))
    entries = bundle.parameters()
    parts.append(struct.pack("<I", len(entries)))
    for name, arr in entries:
        encoded = name.encode("ascii")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for _, arr in entries:
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def deserialize_bundle(blob: bytes) -> ToyModelBundle:
    if blob[:8] != MAGIC:
        raise ValueError("weight file: bad magic, not an ADVSHLD1 container")
    off = 8
    version, seed = struct.unpack_from("<Iq", blob, off)
    off += 12
    if version != FORMAT_VERSION:
        raise ValueError(f"weight file: unsupported format version {version}")
    seq, d, res = struct.unpack_from("<III", blob, off)
    off += 12
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    table = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("ascii")
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        table.append((name, shape))
    params = {}
    for name, shape in table:
        n = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
        params[name] = arr
    if off != len(blob):
        raise ValueError(f"weight file: {len(blob) - off} trailing bytes")
    expected = [name for name, _, _ in _param_shapes(seq, d, res)]
    if [name for name, _ in table] != expected:
        raise ValueError("weight file: parameter table does not match the bundle layout")
    return _assemble(seed, seq, d, res, params)


def weight_digest(path) -> str:
    """SHA-256 of the weight file, the reproducibility fingerprint."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()
