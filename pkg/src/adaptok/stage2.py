"""Top-down mixed-resolution refinement.

Starting from the full Stage-1 token set, each refinement round fuses the
matching Stage-1 lateral snapshot (rounds 2-4), mixes tokens with cluster
attention (full ViT attention in the last, coarse-only round), then emits
the round's scale: emitted tokens leave the live set and are never touched
again. `densify_finest` expands the emitted maps into a dense quarter-
resolution feature grid by replicating, per cell, the finest token that
covers it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import clusterattn, flops, geometry, tensor
from .config import EncoderConfig
from .errors import ContractError
from .geometry import MixedResolutionTokenSet, TokenKey
from .params import ParamStore
from .stage1 import Lateral, Stage1Output
from .tensor import Tensor

_LATERAL_FOR_ROUND = {2: "alloc2", 3: "alloc1", 4: "pre"}


@dataclass
class EmittedMap:
    level: int
    keys: tuple[TokenKey, ...]
    feats: Tensor  # rows: valid keys first, then padded rows
    pad_count: int

    def valid_feats(self) -> Tensor:
        if self.pad_count == 0:
            return self.feats
        return tensor.gather_rows(self.feats, np.arange(len(self.keys)))


@dataclass
class Stage2Output:
    emitted: dict[int, EmittedMap]
    blocks_applied: list[int]
    align_prefix: str = "dens"


def lateral_fuse(current: Tensor, current_set: MixedResolutionTokenSet, lateral: Lateral, store: ParamStore, prefix: str) -> Tensor:
    """Concat the same-scale Stage-1 snapshot and project back to the round
    width. Token correspondence must be exact, padding included."""
    if lateral.token_set.keys != current_set.keys:
        raise ContractError("lateral snapshot does not match the live token set")
    if lateral.token_set.pad_levels != current_set.pad_levels:
        raise ContractError("lateral snapshot padding does not match the live set")
    cat = tensor.concat([current, lateral.feats], axis=1)
    return tensor.add(tensor.matmul(cat, store[f"{prefix}.w"]), store[f"{prefix}.b"])


def _emit(token_set: MixedResolutionTokenSet, feats: Tensor, level: int):
    keep_keys, keep_rows, emit_rows = [], [], []
    for i, k in enumerate(token_set.keys):
        (emit_rows if k.level == level else keep_rows).append(i)
        if k.level != level:
            keep_keys.append(k)
    emitted_keys = tuple(k for k in token_set.keys if k.level == level)
    keep_pads, emit_pads = [], []
    for j, lvl in enumerate(token_set.pad_levels):
        (emit_pads if lvl == level else keep_pads).append(token_set.n_valid + j)
    em_feats = tensor.gather_rows(feats, np.array(emit_rows + emit_pads, dtype=np.intp))
    keep_feats = tensor.gather_rows(feats, np.array(keep_rows + keep_pads, dtype=np.intp))
    carried = MixedResolutionTokenSet(
        height=token_set.height,
        width=token_set.width,
        keys=tuple(keep_keys),
        frontier=(),
        pad_levels=tuple(lvl for lvl in token_set.pad_levels if lvl != level),
    )
    emitted = EmittedMap(level=level, keys=emitted_keys, feats=em_feats, pad_count=len(emit_pads))
    return carried, keep_feats, emitted


def run_stage2(s1out: Stage1Output, store: ParamStore, cfg: EncoderConfig) -> Stage2Output:
    token_set, feats = s1out.token_set, s1out.feats
    emitted: dict[int, EmittedMap] = {}
    blocks_applied = []
    for k in (1, 2, 3, 4):
        d = cfg.stage2_dims[k - 1]
        with flops.section(f"stage2.r{k}"):
            if k >= 2:
                feats = tensor.add(
                    tensor.matmul(feats, store[f"s2.r{k}.proj.w"]), store[f"s2.r{k}.proj.b"]
                )
                feats = lateral_fuse(
                    feats, token_set, s1out.laterals[_LATERAL_FOR_ROUND[k]], store, f"s2.r{k}.fuse"
                )
            n_blocks = cfg.stage2_blocks[k - 1]
            heads = cfg.heads_for(d)
            if k <= 3:
                assignment = clusterattn.cluster(token_set, cfg.cluster_size)
                for i in range(n_blocks):
                    feats = clusterattn.cluster_attention_block(
                        feats, token_set, assignment, store, f"s2.r{k}.blk{i}", heads
                    )
            else:
                rows = np.arange(token_set.n_valid)
                for i in range(n_blocks):
                    feats = clusterattn.vit_block(feats, rows, store, f"s2.r{k}.blk{i}", heads)
            blocks_applied.append(n_blocks)
            token_set, feats, emitted[4 - k] = _emit(token_set, feats, 4 - k)
    return Stage2Output(emitted=emitted, blocks_applied=blocks_applied, align_prefix="dens")


def run_stage1_only_refine(s1out: Stage1Output, store: ParamStore, cfg: EncoderConfig) -> Stage2Output:
    """Ablation path: no Stage 2; one extra cluster-attention block over the
    final mixed set, then per-level maps are emitted as-is."""
    token_set, feats = s1out.token_set, s1out.feats
    with flops.section("stage1x"):
        assignment = clusterattn.cluster(token_set, cfg.cluster_size)
        heads = cfg.heads_for(cfg.stage1_dims[3])
        feats = clusterattn.cluster_attention_block(feats, token_set, assignment, store, "s1x.blk", heads)
        emitted: dict[int, EmittedMap] = {}
        for level in (3, 2, 1, 0):
            token_set, feats, emitted[level] = _emit(token_set, feats, level)
    return Stage2Output(emitted=emitted, blocks_applied=[1], align_prefix="s1x")


def densify_finest(
    union_set: MixedResolutionTokenSet,
    s2out: Stage2Output,
    store: ParamStore,
    cfg: EncoderConfig,
) -> tuple[Tensor, np.ndarray]:
    """Dense (H/4 * W/4, d) grid: per cell, the finest covering token's
    feature (aligned to the finest emission width) plus a learned per-cell
    position embedding. Also returns the per-cell token index into
    union_set.keys."""
    if sum(len(m.keys) for m in s2out.emitted.values()) != union_set.n_valid:
        raise ContractError("emitted maps do not partition the token set")
    with flops.section("densify"):
        cover = geometry.finest_cover(union_set)
        # token rectangles are unions of 4x4 cells, so the cover is constant
        # within each cell; sampling the corner pixel is exact
        cell_token = cover[::4, ::4].reshape(-1)
        parts, row_of_key, offset = [], {}, 0
        for level in (3, 2, 1, 0):
            em = s2out.emitted[level]
            feats = em.valid_feats()
            if level != 3:
                pfx = f"{s2out.align_prefix}.align{level}"
                feats = tensor.add(tensor.matmul(feats, store[f"{pfx}.w"]), store[f"{pfx}.b"])
            parts.append(feats)
            for j, key in enumerate(em.keys):
                row_of_key[key] = offset + j
            offset += len(em.keys)
        big = tensor.concat(parts, axis=0)
        cell_src = np.array([row_of_key[union_set.keys[i]] for i in cell_token], dtype=np.intp)
        dense = tensor.gather_rows(big, cell_src)
        dense = tensor.add(dense, store["dens.pos"])
    return dense, cell_token


def head_logits(dense: Tensor, store: ParamStore) -> Tensor:
    with flops.section("head"):
        return tensor.add(tensor.matmul(dense, store["head.w"]), store["head.b"])
