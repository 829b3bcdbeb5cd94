"""Weight-free propagation over the decomposed graphs and the bilinear rating decoder."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import DecomposedGraphs, SparseBipartiteGraph

AGGREGATIONS = ("mean", "sum")


class ModelError(ValueError):
    pass


@dataclass
class ModelParams:
    """Shared layer-0 embeddings and one ``d x d`` decoder matrix per rating.

    ``bilinear[k]`` is the matrix for ``ratings[k]``.
    """

    base: np.ndarray
    bilinear: np.ndarray
    ratings: tuple[int, ...]

    @property
    def dim(self) -> int:
        return self.base.shape[1]

    @property
    def num_nodes(self) -> int:
        return self.base.shape[0]

    def Q(self, r: int) -> np.ndarray:
        return self.bilinear[self.ratings.index(r)]

    def copy(self) -> "ModelParams":
        return ModelParams(self.base.copy(), self.bilinear.copy(), self.ratings)


def init_params(num_nodes: int, dim: int, ratings: Sequence[int], rng: np.random.Generator,
                dtype=np.float64) -> ModelParams:
    """Gaussian embeddings (std 0.1) and decoder matrices near the identity (noise std 0.01)."""
    if dim < 1:
        raise ModelError(f"embedding dimension must be >= 1, got {dim}")
    ratings = tuple(int(r) for r in ratings)
    base = rng.normal(0.0, 0.1, size=(num_nodes, dim))
    bilinear = np.eye(dim)[None] + rng.normal(0.0, 0.01, size=(len(ratings), dim, dim))
    return ModelParams(base.astype(dtype), bilinear.astype(dtype), ratings)


def propagate(graph: SparseBipartiteGraph, base: np.ndarray, num_layers: int) -> list[np.ndarray]:
    """Layer outputs ``[e0, A e0, A^2 e0, ...]`` with ``A`` the normalized adjacency."""
    if num_layers < 0:
        raise ModelError(f"layer count must be >= 0, got {num_layers}")
    adj = graph.adjacency
    if adj.dtype != base.dtype:
        adj = adj.astype(base.dtype)
    layers = [base]
    for _ in range(num_layers):
        nxt = adj @ layers[-1]
        if not np.isfinite(nxt).all():
            raise ModelError("non-finite values during propagation")
        layers.append(nxt)
    return layers


def aggregate_layers(layers: Sequence[np.ndarray], how: str = "mean") -> np.ndarray:
    if not layers:
        raise ModelError("need at least one layer to aggregate")
    total = layers[0].copy()
    for layer in layers[1:]:
        total += layer
    if how == "mean":
        total /= len(layers)
    elif how != "sum":
        raise ModelError(f"unknown aggregation {how!r}")
    return total


def smooth(graph: SparseBipartiteGraph, x: np.ndarray, num_layers: int, how: str = "mean") -> np.ndarray:
    """Propagate then aggregate: the linear map taking layer-0 input to ``h_x``.

    The map is symmetric (powers of a symmetric matrix), so it is also its
    own adjoint for backpropagation.
    """
    return aggregate_layers(propagate(graph, x, num_layers), how)


@dataclass
class ForwardCache:
    """Aggregated representations plus what backprop needs to pull gradients back."""

    levels: dict[int, np.ndarray]
    interest: np.ndarray
    h: np.ndarray
    graphs: DecomposedGraphs
    num_layers: int
    how: str


def forward(graphs: DecomposedGraphs, params: ModelParams, num_layers: int = 2,
            how: str = "mean") -> ForwardCache:
    if graphs.num_nodes != params.num_nodes:
        raise ModelError(f"graph has {graphs.num_nodes} nodes but embeddings have {params.num_nodes}")
    levels = {t: smooth(g, params.base, num_layers, how) for t, g in graphs.levels.items()}
    interest = smooth(graphs.interest, params.base, num_layers, how)
    h = np.zeros_like(params.base)
    for t in graphs.T:
        h += levels[t]
    return ForwardCache(levels, interest, h, graphs, num_layers, how)


def decode_logits(h_u: np.ndarray, h_v: np.ndarray, bilinear: np.ndarray) -> np.ndarray:
    """Bilinear scores ``h_u^T Q_r h_v``.

    Accepts single vectors (returns shape ``(R,)``) or row-aligned batches
    ``(P, d)`` (returns ``(P, R)``).
    """
    h_u = np.asarray(h_u)
    h_v = np.asarray(h_v)
    single = h_u.ndim == 1
    h_u, h_v = np.atleast_2d(h_u), np.atleast_2d(h_v)
    out = np.empty((h_u.shape[0], bilinear.shape[0]), dtype=np.result_type(h_u, bilinear))
    for k, q in enumerate(bilinear):
        out[:, k] = np.einsum("pd,pd->p", h_u @ q, h_v)
    return out[0] if single else out


def predict_distribution(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_rating(p: np.ndarray, ratings: Sequence[int]) -> np.ndarray:
    """Expected rating under ``p``; clipped to guard against round-off at the ends."""
    r = np.asarray(ratings, dtype=np.float64)
    return np.clip(np.asarray(p) @ r, r[0], r[-1])


def predict_pairs(params: ModelParams, cache: ForwardCache, users: np.ndarray,
                  items: np.ndarray, num_users: int) -> np.ndarray:
    h_u = cache.h[np.asarray(users)]
    h_v = cache.h[np.asarray(items) + num_users]
    return predict_rating(predict_distribution(decode_logits(h_u, h_v, params.bilinear)),
                          params.ratings)


# -- checkpoints --------------------------------------------------------------
# Layout: magic, u64 header length, JSON header, then little-endian float32
# base (N*d) followed by each Q_r in rating order.

_MAGIC = b"ROGMC1\n"


def save_checkpoint(path, params: ModelParams, *, T: Sequence[int], mode: str, seed: int,
                    extra: dict | None = None) -> None:
    header = {
        "N": params.num_nodes,
        "d": params.dim,
        "num_ratings": len(params.ratings),
        "ratings": list(params.ratings),
        "T": [int(t) for t in T],
        "mode": mode,
        "seed": int(seed),
    }
    header.update(extra or {})
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(params.base.astype("<f4").tobytes())
        fh.write(params.bilinear.astype("<f4").tobytes())


def load_checkpoint(path, expect: dict | None = None) -> tuple[ModelParams, dict]:
    """Read a checkpoint; ``expect`` maps header fields to required values."""
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ModelError(f"{path}: not a checkpoint (bad magic)")
    off = len(_MAGIC)
    (hlen,) = struct.unpack_from("<Q", data, off)
    off += 8
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen
    for key, want in (expect or {}).items():
        if key not in header:
            raise ModelError(f"{path}: header is missing field {key!r}")
        if header[key] != want:
            raise ModelError(f"{path}: header field {key!r} is {header[key]!r}, expected {want!r}")
    n, d, nr = header["N"], header["d"], header["num_ratings"]
    want_bytes = 4 * (n * d + nr * d * d)
    if len(data) - off != want_bytes:
        raise ModelError(f"{path}: payload is {len(data) - off} bytes, header field 'N'/'d' implies {want_bytes}")
    arr = np.frombuffer(data, dtype="<f4", offset=off).astype(np.float64)
    base = arr[:n * d].reshape(n, d)
    bilinear = arr[n * d:].reshape(nr, d, d)
    return ModelParams(base, bilinear, tuple(header["ratings"])), header
