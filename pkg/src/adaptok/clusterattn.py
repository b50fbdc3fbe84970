"""Local attention over sparse mixed-resolution tokens.

Tokens sit in canonical (Morton) order, so chopping that order into
contiguous runs yields spatially compact clusters. Each token attends to
its own cluster plus the neighboring run on either side, which lets fine
tokens see nearby coarse context and vice versa. The assignment is a pure
function of (canonical order, cluster_size) and is recomputed whenever the
allocation changes. Rows not assigned to any cluster (batch padding) pass
through on the residual path with a zero attention update.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor
from .errors import ContractError
from .geometry import MixedResolutionTokenSet
from .params import ParamStore
from .tensor import Tensor


@dataclass
class ClusterAssignment:
    n_tokens: int
    cluster_size: int
    clusters: list[np.ndarray]

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    def cluster_of(self, row: int) -> int:
        return row // self.cluster_size

    def neighborhood(self, c: int) -> np.ndarray:
        lo = max(c - 1, 0)
        hi = min(c + 1, self.n_clusters - 1)
        return np.concatenate(self.clusters[lo : hi + 1])

    def groups(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(query rows, key/value rows) per cluster."""
        out = []
        for c, own in enumerate(self.clusters):
            nb = self.neighborhood(c)
            if nb.size == 0:
                raise ContractError("empty attention neighborhood")
            out.append((own, nb))
        return out


def cluster(token_set: MixedResolutionTokenSet, cluster_size: int) -> ClusterAssignment:
    if cluster_size < 1:
        raise ValueError("cluster_size must be >= 1")
    n = token_set.n_valid
    runs = [np.arange(s, min(s + cluster_size, n)) for s in range(0, n, cluster_size)]
    return ClusterAssignment(n_tokens=n, cluster_size=cluster_size, clusters=runs)


def _attention(x: Tensor, store: ParamStore, prefix: str, heads: int, groups, key_levels):
    n, d = x.data.shape
    if d % heads:
        raise ValueError(f"dim {d} not divisible by {heads} heads")
    hd = d // heads
    h = tensor.layer_norm(x, store[f"{prefix}.ln1.g"], store[f"{prefix}.ln1.b"])
    q = tensor.add(tensor.matmul(h, store[f"{prefix}.q.w"]), store[f"{prefix}.q.b"])
    k = tensor.add(tensor.matmul(h, store[f"{prefix}.k.w"]), store[f"{prefix}.k.b"])
    v = tensor.add(tensor.matmul(h, store[f"{prefix}.v.w"]), store[f"{prefix}.v.b"])
    if key_levels is not None:
        # scale-aware keys: coarse and fine tokens in one neighborhood stay
        # distinguishable to the attention logits
        k = tensor.add(k, tensor.gather_rows(store[f"{prefix}.key_scale"], key_levels))
    parts = []
    src = np.full(n, -1, dtype=np.intp)
    at = 0
    for q_rows, kv_rows in groups:
        qg = tensor.gather_rows(q, q_rows)
        kg = tensor.gather_rows(k, kv_rows)
        vg = tensor.gather_rows(v, kv_rows)
        mask = np.ones((len(q_rows), len(kv_rows)), dtype=bool)
        if heads == 1:
            parts.append(tensor.softmax_attention(qg, kg, vg, mask))
        else:
            outs = [
                tensor.softmax_attention(
                    tensor.slice_cols(qg, i * hd, (i + 1) * hd),
                    tensor.slice_cols(kg, i * hd, (i + 1) * hd),
                    tensor.slice_cols(vg, i * hd, (i + 1) * hd),
                    mask,
                )
                for i in range(heads)
            ]
            parts.append(tensor.concat(outs, axis=1))
        src[q_rows] = np.arange(at, at + len(q_rows))
        at += len(q_rows)
    stacked = tensor.concat(parts + [tensor.constant(np.zeros((1, d)))], axis=0)
    attn = tensor.gather_rows(stacked, np.where(src >= 0, src, at))
    return tensor.add(tensor.matmul(attn, store[f"{prefix}.o.w"]), store[f"{prefix}.o.b"])


def _mlp(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    h = tensor.add(tensor.matmul(x, store[f"{prefix}.mlp1.w"]), store[f"{prefix}.mlp1.b"])
    h = tensor.gelu(h)
    return tensor.add(tensor.matmul(h, store[f"{prefix}.mlp2.w"]), store[f"{prefix}.mlp2.b"])


def _block(x, store, prefix, heads, groups, key_levels) -> Tensor:
    x = tensor.add(x, _attention(x, store, prefix, heads, groups, key_levels))
    h = tensor.layer_norm(x, store[f"{prefix}.ln2.g"], store[f"{prefix}.ln2.b"])
    return tensor.add(x, _mlp(h, store, prefix))


def cluster_attention_block(
    x: Tensor,
    token_set: MixedResolutionTokenSet,
    assignment: ClusterAssignment,
    store: ParamStore,
    prefix: str,
    heads: int,
) -> Tensor:
    """Pre-norm block with attention restricted to cluster neighborhoods."""
    if assignment.n_tokens != token_set.n_valid:
        raise ContractError("cluster assignment is stale for this token set")
    return _block(x, store, prefix, heads, assignment.groups(), token_set.row_levels())


def vit_block(x: Tensor, valid_rows: np.ndarray, store: ParamStore, prefix: str, heads: int) -> Tensor:
    """Plain pre-norm ViT block: full self-attention over the valid rows."""
    valid_rows = np.asarray(valid_rows, dtype=np.intp)
    return _block(x, store, prefix, heads, [(valid_rows, valid_rows)], None)
