"""Attention-based correlation predictor over neighbor sequences.

Pipeline: multi-block fusion -> transformer encoder -> memory
initialization -> memory refinement -> reconstruction -> per-neighbor
sigmoid scores. Sequences carry the probe at position 0 and its nearest
neighbors after it, sorted by distance; there is no positional encoding,
so the probe is distinguished only structurally (memory queries come from
position 0, refinement reads the first k2 rows).

Inputs may be single sequences (k1, dim) or stacks (batch, k1, dim). The
fusion and memory batch-norms flatten every leading axis, treating each
sequence row as one batch sample; eval mode uses running statistics and is
a pure per-row function, so batched and one-at-a-time scoring agree there.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DegenerateBatchError, FormatError

_log = logging.getLogger(__name__)

CKPT_MAGIC = b"ACPC"
CKPT_VERSION = 1

_MU_FLOOR = 1e-3


@dataclass
class ACPConfig:
    block_dims: tuple
    d: int = 256
    n_layers: int = 2
    h: int = 16
    d_ffn: int = 0  # 0 resolves to 2*d
    n_mem: int = 8
    d_m: int = 0  # 0 resolves to d // 2
    p_d: float = 0.1
    p_attn: float = 0.1
    share_slot_kv: bool = False
    use_refinement: bool = True

    def __post_init__(self):
        self.block_dims = tuple(int(b) for b in self.block_dims)
        if not self.block_dims:
            raise ConfigError("need at least one feature block")
        if self.d_ffn == 0:
            self.d_ffn = 2 * self.d
        if self.d_m == 0:
            self.d_m = self.d // 2
        if self.d % self.h != 0:
            raise ConfigError(f"d={self.d} must be divisible by h={self.h}")
        if not 0 < self.d_m < self.d:
            raise ConfigError(f"d_m={self.d_m} must be in (0, d={self.d})")
        if self.n_mem < 1:
            raise ConfigError("n_mem must be >= 1")
        for p in (self.p_d, self.p_attn):
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"dropout rate {p} outside [0, 1)")

    @property
    def d_concat(self):
        return sum(self.block_dims)


class ACPModel:
    """Holds all learnable parameters and runs the scoring pipeline."""

    def __init__(self, config: ACPConfig, dtype=np.float32, seed=0):
        self.config = config
        self.dtype = dtype
        self.params: dict[str, T.Parameter] = {}
        self.bn = {"fuse": T.BatchNormState(config.d, dtype),
                   "mem": T.BatchNormState(config.d, dtype)}
        self.trained = False
        self._build(np.random.default_rng(seed))

    # -- construction --------------------------------------------------

    def _param(self, name, value, decay=False):
        p = T.Parameter(np.asarray(value, dtype=self.dtype), name=name, decay=decay)
        self.params[name] = p
        return p

    def _affine(self, name, fan_in, shape_w, shape_b, rng):
        self._param(f"{name}_w", T.uniform_fan_in(rng, fan_in, shape_w, self.dtype),
                    decay=True)
        self._param(f"{name}_b", T.uniform_fan_in(rng, fan_in, shape_b, self.dtype))

    def _mha_params(self, prefix, d_model, rng):
        for piece in ("wq", "wk", "wv", "wo"):
            self._param(f"{prefix}.{piece}",
                        T.uniform_fan_in(rng, d_model, (d_model, d_model), self.dtype),
                        decay=True)
            self._param(f"{prefix}.{piece[-1]}b",
                        T.uniform_fan_in(rng, d_model, (d_model,), self.dtype))

    def _build(self, rng):
        cfg = self.config
        for b, dim in enumerate(cfg.block_dims):
            self._param(f"fuse.gamma{b}", np.ones(dim))
        self._affine("fuse.fc", cfg.d_concat, (cfg.d_concat, cfg.d), (cfg.d,), rng)
        self._param("fuse.bn_gain", np.ones(cfg.d))
        self._param("fuse.bn_bias", np.zeros(cfg.d))

        for layer in range(cfg.n_layers):
            pre = f"enc{layer}"
            self._mha_params(pre, cfg.d, rng)
            self._param(f"{pre}.ln1_gain", np.ones(cfg.d))
            self._param(f"{pre}.ln1_bias", np.zeros(cfg.d))
            self._affine(f"{pre}.ffn1", cfg.d, (cfg.d, cfg.d_ffn), (cfg.d_ffn,), rng)
            self._affine(f"{pre}.ffn2", cfg.d_ffn, (cfg.d_ffn, cfg.d), (cfg.d,), rng)
            self._param(f"{pre}.ln2_gain", np.ones(cfg.d))
            self._param(f"{pre}.ln2_bias", np.zeros(cfg.d))

        if cfg.share_slot_kv:
            self._param("mem.shared.wk",
                        T.uniform_fan_in(rng, cfg.d, (cfg.d, cfg.d_m), self.dtype),
                        decay=True)
            self._param("mem.shared.wv",
                        T.uniform_fan_in(rng, cfg.d, (cfg.d, cfg.d_m), self.dtype),
                        decay=True)
        for i in range(cfg.n_mem):
            self._param(f"mem.slot{i}.wq",
                        T.uniform_fan_in(rng, cfg.d, (cfg.d, cfg.d_m), self.dtype),
                        decay=True)
            if not cfg.share_slot_kv:
                self._param(f"mem.slot{i}.wk",
                            T.uniform_fan_in(rng, cfg.d, (cfg.d, cfg.d_m), self.dtype),
                            decay=True)
                self._param(f"mem.slot{i}.wv",
                            T.uniform_fan_in(rng, cfg.d, (cfg.d, cfg.d_m), self.dtype),
                            decay=True)
            self._param(f"mem.slot{i}.mu", np.array([math.sqrt(cfg.d_m)]))
        self._affine("mem.fc", cfg.d_m, (cfg.d_m, cfg.d), (cfg.d,), rng)
        self._param("mem.bn_gain", np.ones(cfg.d))
        self._param("mem.bn_bias", np.zeros(cfg.d))

        self._mha_params("refine", cfg.d, rng)
        self._param("refine.ln_gain", np.ones(cfg.d))
        self._param("refine.ln_bias", np.zeros(cfg.d))
        self._mha_params("recon", cfg.d, rng)

        self._affine("cls", cfg.d, (cfg.d, 1), (1,), rng)

    def parameters(self):
        return self.params

    def n_parameters(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    # -- forward stages -------------------------------------------------

    def fuse_blocks(self, blocks, mode="eval", rng=None):
        """Normalize, scale, concatenate and project the per-block features,
        then batch-norm over the sequence axis."""
        cfg = self.config
        if len(blocks) != len(cfg.block_dims):
            raise ConfigError(f"expected {len(cfg.block_dims)} blocks, got {len(blocks)}")
        parts = []
        for b, dim in enumerate(cfg.block_dims):
            xb = blocks[b] if isinstance(blocks[b], T.Tensor) else T.Tensor(
                np.asarray(blocks[b], dtype=self.dtype))
            if xb.shape[-1] != dim:
                raise ConfigError(f"block {b} has dim {xb.shape[-1]}, expected {dim}")
            parts.append(T.mul(T.l2_normalize(xb), self.params[f"fuse.gamma{b}"]))
        if mode == "train" and parts[0].shape[-2] < 2:
            raise DegenerateBatchError("fusion in train mode needs sequences of >= 2 rows")
        x = T.concat_last(parts)
        if mode == "train" and cfg.p_d > 0:
            x = T.dropout(x, cfg.p_d, mode, rng)
        x = T.add(T.matmul(x, self.params["fuse.fc_w"]), self.params["fuse.fc_b"])
        return T.batch_norm(x, self.params["fuse.bn_gain"], self.params["fuse.bn_bias"],
                            self.bn["fuse"], mode)

    def _mha(self, prefix, q_in, kv_in, mode="eval", rng=None, p_drop=0.0, trace=None):
        cfg = self.config
        h, ds = cfg.h, cfg.d // cfg.h
        p = self.params
        q = T.add(T.matmul(q_in, p[f"{prefix}.wq"]), p[f"{prefix}.qb"])
        k = T.add(T.matmul(kv_in, p[f"{prefix}.wk"]), p[f"{prefix}.kb"])
        v = T.add(T.matmul(kv_in, p[f"{prefix}.wv"]), p[f"{prefix}.vb"])

        def heads(x):
            x = T.reshape(x, x.shape[:-1] + (h, ds))
            return T.swapaxes(x, -3, -2)

        qh, kh, vh = heads(q), heads(k), heads(v)
        scores = T.matmul(qh, T.swapaxes(kh, -1, -2))
        attn = T.softmax_last(scores, scale=math.sqrt(ds))
        if trace is not None:
            trace[f"{prefix}.attn"] = attn.data
        ctx = T.swapaxes(T.matmul(attn, vh), -3, -2)
        ctx = T.reshape(ctx, ctx.shape[:-2] + (cfg.d,))
        out = T.add(T.matmul(ctx, p[f"{prefix}.wo"]), p[f"{prefix}.ob"])
        if mode == "train" and p_drop > 0:
            out = T.dropout(out, p_drop, mode, rng)
        return out

    def base_encode(self, x, mode="eval", rng=None, trace=None):
        """Stacked self-attention encoder over the neighbor sequence."""
        cfg = self.config
        p = self.params
        for layer in range(cfg.n_layers):
            pre = f"enc{layer}"
            att = self._mha(pre, x, x, mode, rng, cfg.p_attn, trace)
            y = T.layer_norm(T.add(x, att), p[f"{pre}.ln1_gain"], p[f"{pre}.ln1_bias"])
            ffn = T.add(T.matmul(T.relu(
                T.add(T.matmul(y, p[f"{pre}.ffn1_w"]), p[f"{pre}.ffn1_b"])),
                p[f"{pre}.ffn2_w"]), p[f"{pre}.ffn2_b"])
            if mode == "train" and cfg.p_attn > 0:
                ffn = T.dropout(ffn, cfg.p_attn, mode, rng)
            x = T.layer_norm(T.add(y, ffn), p[f"{pre}.ln2_gain"], p[f"{pre}.ln2_bias"])
        return x

    def init_memory(self, z, mode="eval", trace=None):
        """Distill probe-specific context into the memory slots: the probe
        row queries the sequence once per slot, each slot with its own
        projections and softmax scale."""
        cfg = self.config
        p = self.params
        z1 = T.take_rows(z, 0, 1)
        slots = []
        for i in range(cfg.n_mem):
            wk = p["mem.shared.wk" if cfg.share_slot_kv else f"mem.slot{i}.wk"]
            wv = p["mem.shared.wv" if cfg.share_slot_kv else f"mem.slot{i}.wv"]
            mu = p[f"mem.slot{i}.mu"]
            if float(mu.value[0]) <= _MU_FLOOR:
                _log.warning("memory slot %d scale %.2e clamped to %.0e",
                             i, float(mu.value[0]), _MU_FLOOR)
            q = T.matmul(z1, p[f"mem.slot{i}.wq"])
            keys = T.matmul(z, wk)
            vals = T.matmul(z, wv)
            scores = T.matmul(q, T.swapaxes(keys, -1, -2))
            attn = T.softmax_last(scores, scale=T.clamp(mu, lo=_MU_FLOOR))
            if trace is not None:
                trace[f"mem.slot{i}.attn"] = attn.data
            slots.append(T.matmul(attn, vals))
        mp = T.concat_rows(slots)
        m = T.add(T.matmul(mp, p["mem.fc_w"]), p["mem.fc_b"])
        m = T.batch_norm(m, p["mem.bn_gain"], p["mem.bn_bias"], self.bn["mem"], mode)
        return T.relu(m)

    def refine_memory(self, m, z, k2, mode="eval", trace=None):
        """Update each slot from the first k2 (most confident) sequence rows,
        residually with layer norm."""
        if k2 < 1:
            raise ConfigError(f"k2 must be >= 1, got {k2}")
        if k2 > z.shape[-2]:
            raise ConfigError(f"k2={k2} exceeds sequence length {z.shape[-2]}")
        r = T.take_rows(z, 0, k2)
        att = self._mha("refine", m, r, mode, trace=trace)
        p = self.params
        return T.layer_norm(T.add(m, att), p["refine.ln_gain"], p["refine.ln_bias"])

    def reconstruct(self, z, memory, trace=None):
        """Rebuild each sequence row from the memory slots. The attention
        output is the reconstruction; no residual back to the sequence."""
        return self._mha("recon", z, memory, trace=trace)

    def predict_correlations(self, blocks, k2, mode="eval", rng=None, trace=None):
        """Score each sequence element's probability of sharing the probe's
        identity. Returns a (k1,) or (batch, k1) Tensor in (0, 1)."""
        if mode == "train" and rng is None and (self.config.p_d > 0 or self.config.p_attn > 0):
            raise ConfigError("train mode with dropout needs an rng")
        x = self.fuse_blocks(blocks, mode, rng)
        z = self.base_encode(x, mode, rng, trace)
        m = self.init_memory(z, mode, trace)
        if self.config.use_refinement:
            m = self.refine_memory(m, z, k2, mode, trace)
        zr = self.reconstruct(z, m, trace)
        logits = T.add(T.matmul(zr, self.params["cls_w"]), self.params["cls_b"])
        return T.sigmoid(T.reshape(logits, logits.shape[:-1]))

    def fuse_matrix(self, block_mats) -> np.ndarray:
        """Eval-mode fusion of independent items (one row each); used to
        build the pool-wide expansion space."""
        out = self.fuse_blocks([np.asarray(m, dtype=self.dtype) for m in block_mats],
                               mode="eval")
        return out.data

    # -- persistence -----------------------------------------------------

    def _state_arrays(self):
        arrays = [(name, p.value) for name, p in sorted(self.params.items())]
        for key, state in sorted(self.bn.items()):
            arrays.append((f"bn.{key}.running_mean", state.running_mean))
            arrays.append((f"bn.{key}.running_var", state.running_var))
        return arrays

    def save(self, path):
        meta = dataclasses.asdict(self.config)
        meta["block_dims"] = list(meta["block_dims"])
        meta["trained"] = bool(self.trained)
        blob = json.dumps(meta).encode("utf-8")
        arrays = self._state_arrays()
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<I", len(arrays)))
            for name, arr in arrays:
                nb = name.encode("utf-8")
                fh.write(struct.pack("<I", len(nb)))
                fh.write(nb)
                fh.write(struct.pack("<I", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "ACPModel":
        with open(path, "rb") as fh:
            buf = fh.read()
        off = 0

        def need(n, what):
            nonlocal off
            if off + n > len(buf):
                raise FormatError(f"truncated checkpoint: expected {what}", offset=off)
            piece = buf[off:off + n]
            off += n
            return piece

        if need(4, "magic") != CKPT_MAGIC:
            raise FormatError(f"bad checkpoint magic, expected {CKPT_MAGIC!r}", offset=0)
        version, blob_len = struct.unpack("<II", need(8, "header"))
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", offset=4)
        try:
            meta = json.loads(need(blob_len, "config").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"unreadable checkpoint config: {exc}", offset=12) from exc
        trained = bool(meta.pop("trained", False))
        try:
            config = ACPConfig(**meta)
        except (TypeError, ConfigError) as exc:
            raise FormatError(f"invalid checkpoint config: {exc}", offset=12) from exc

        model = cls(config, dtype=np.float32)
        n_arrays, = struct.unpack("<I", need(4, "array count"))
        expected = {name: arr for name, arr in model._state_arrays()}
        seen = set()
        for _ in range(n_arrays):
            name_len, = struct.unpack("<I", need(4, "name length"))
            name = need(name_len, "name").decode("utf-8", errors="replace")
            ndim, = struct.unpack("<I", need(4, "ndim"))
            if ndim > 8:
                raise FormatError(f"implausible ndim {ndim} for {name}", offset=off - 4)
            shape = struct.unpack(f"<{ndim}I", need(4 * ndim, "shape"))
            count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            raw = need(4 * count, f"data for {name}")
            if name not in expected:
                raise FormatError(f"unknown array {name!r} in checkpoint", offset=off)
            target = expected[name]
            if tuple(shape) != target.shape:
                raise FormatError(
                    f"shape mismatch for {name}: file has {tuple(shape)}, "
                    f"model needs {target.shape}", offset=off)
            target[...] = np.frombuffer(raw, dtype="<f4").reshape(shape)
            seen.add(name)
        if off != len(buf):
            raise FormatError("trailing data after checkpoint arrays", offset=off)
        missing = set(expected) - seen
        if missing:
            raise FormatError(f"checkpoint missing arrays: {sorted(missing)[:3]}...",
                              offset=off)
        model.trained = trained
        return model
