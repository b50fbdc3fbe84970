"""Model parameters: named f64 arrays, seeded deterministic init, and a
little-endian binary container keyed to the config digest.

Every parameter's init stream is derived from (seed, name) through a
counter-style hash, so adding or reordering parameters never shifts the
values of existing ones.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .config import EncoderConfig
from .tensor import Tensor

MAGIC = b"ADTKPAR1"
VERSION = 1
MLP_RATIO = 4
EMB_SCALE = 0.02
SCORER_BIAS_INIT = -3.0  # targets are rare small fractions; start scores low


def rng_for(seed: int, *tags) -> np.random.Generator:
    h = hashlib.sha256(str(int(seed)).encode())
    for t in tags:
        h.update(b"/")
        h.update(str(t).encode())
    words = [int(w) for w in np.frombuffer(h.digest()[:16], dtype=np.uint32)]
    return np.random.default_rng(np.random.SeedSequence(words))


class ParamStore:
    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name}")
        t = Tensor(array, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    @property
    def n_scalars(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None


def _linear(store, seed, name, d_in, d_out):
    rng = rng_for(seed, name, "w")
    store.add(f"{name}.w", rng.standard_normal((d_in, d_out)) / np.sqrt(d_in))
    store.add(f"{name}.b", np.zeros(d_out))


def _layer_norm(store, name, d):
    store.add(f"{name}.g", np.ones(d))
    store.add(f"{name}.b", np.zeros(d))


def _embedding(store, seed, name, shape):
    store.add(name, rng_for(seed, name).standard_normal(shape) * EMB_SCALE)


def _block(store, seed, prefix, d, key_scale: bool):
    _layer_norm(store, f"{prefix}.ln1", d)
    for nm in ("q", "k", "v", "o"):
        _linear(store, seed, f"{prefix}.{nm}", d, d)
    if key_scale:
        _embedding(store, seed, f"{prefix}.key_scale", (4, d))
    _layer_norm(store, f"{prefix}.ln2", d)
    _linear(store, seed, f"{prefix}.mlp1", d, MLP_RATIO * d)
    _linear(store, seed, f"{prefix}.mlp2", MLP_RATIO * d, d)


def init_coarse_embed(store: ParamStore, cfg: EncoderConfig, seed: int):
    d0 = cfg.stage1_dims[0]
    _linear(store, seed, "s1.embed", 32 * 32 * cfg.channels, d0)
    _embedding(store, seed, "s1.embed.pos", (cfg.coarse_tokens, d0))


def init_params(cfg: EncoderConfig, seed: int) -> ParamStore:
    store = ParamStore()
    init_coarse_embed(store, cfg, seed)
    d0 = cfg.stage1_dims[0]
    for i in range(cfg.stage1_blocks[0]):
        _block(store, seed, f"s1.pre.{i}", d0, key_scale=False)
    for r in (1, 2, 3):
        d = cfg.stage1_dims[r]
        side = 32 >> r
        _linear(store, seed, f"s1.r{r}.proj", cfg.stage1_dims[r - 1], d)
        hid = cfg.scorer_hidden(r)
        _linear(store, seed, f"s1.r{r}.score1", d, hid)
        _linear(store, seed, f"s1.r{r}.score2", hid, 1)
        store[f"s1.r{r}.score2.b"].data[:] = SCORER_BIAS_INIT
        if not cfg.no_aux_image:
            _linear(store, seed, f"s1.r{r}.child.pix", side * side * cfg.channels, d)
            _linear(store, seed, f"s1.r{r}.child.mlp1", d, d)
            _linear(store, seed, f"s1.r{r}.child.mlp2", d, d)
        _embedding(store, seed, f"s1.r{r}.scale_emb", (d,))
        _embedding(store, seed, f"s1.r{r}.slot_emb", (4, d))
        for i in range(cfg.stage1_blocks[r]):
            _block(store, seed, f"s1.r{r}.blk{i}", d, key_scale=True)
    head_dim = cfg.stage2_dims[0]
    if cfg.stage1_only:
        _block(store, seed, "s1x.blk", cfg.stage1_dims[3], key_scale=True)
        for lvl in (2, 1, 0):
            _linear(store, seed, f"s1x.align{lvl}", cfg.stage1_dims[3], cfg.stage1_dims[3])
    else:
        for k in (1, 2, 3, 4):
            d = cfg.stage2_dims[k - 1]
            if k >= 2:
                _linear(store, seed, f"s2.r{k}.proj", cfg.stage2_dims[k - 2], d)
                _linear(store, seed, f"s2.r{k}.fuse", 2 * d, d)
            for i in range(cfg.stage2_blocks[k - 1]):
                _block(store, seed, f"s2.r{k}.blk{i}", d, key_scale=k < 4)
        for lvl in (2, 1, 0):
            _linear(store, seed, f"dens.align{lvl}", cfg.stage2_dims[3 - lvl], head_dim)
    _embedding(store, seed, "dens.pos", (cfg.head_cells, head_dim))
    _linear(store, seed, "head", head_dim, cfg.n_classes)
    return store


def save_params(path, store: ParamStore, cfg: EncoderConfig):
    digest = bytes.fromhex(cfg.digest())
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(digest)
        names = sorted(store.names())
        f.write(struct.pack("<I", len(names)))
        for name in names:
            arr = store[name].data
            enc = name.encode()
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(arr.astype("<f8").tobytes())


def load_params(path, cfg: EncoderConfig | None = None) -> ParamStore:
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise ValueError("not a parameter container")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise ValueError(f"unsupported container version {version}")
        digest = f.read(32)
        if cfg is not None and digest != bytes.fromhex(cfg.digest()):
            raise ValueError("parameter container was built for a different config")
        (count,) = struct.unpack("<I", f.read(4))
        store = ParamStore()
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode()
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape)
            store.add(name, arr.copy())
    return store
