"""Embedding-set persistence and the synthetic multi-block generator.

File layout (little-endian): magic ``ACPE``, version u32, record count u32,
block count u32, block dims u32 each, role u8; then per record item_id u64,
identity u32, camera u32, and the block vectors as float32. An optional
JSON-lines manifest mirrors the labels for quick inspection.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError

MAGIC = b"ACPE"
VERSION = 1

# How tightly identity centers pack around the shared anchor; tuned so the
# default noise level leaves the plain ranking imperfect but workable.
_CENTER_SPREAD = 0.3

ROLES = ("train", "query", "gallery")
_ROLE_CODE = {name: i for i, name in enumerate(ROLES)}


@dataclass
class EmbeddingRecord:
    item_id: int
    identity: int
    camera: int
    blocks: list  # one float32 vector per backbone block


@dataclass
class EmbeddingSet:
    records: list = field(default_factory=list)
    role: str = "train"
    block_dims: tuple = ()

    def __len__(self):
        return len(self.records)

    def identities(self) -> np.ndarray:
        return np.array([r.identity for r in self.records], dtype=np.int64)

    def cameras(self) -> np.ndarray:
        return np.array([r.camera for r in self.records], dtype=np.int64)

    def item_ids(self) -> np.ndarray:
        return np.array([r.item_id for r in self.records], dtype=np.int64)

    def block_matrix(self, b: int) -> np.ndarray:
        """All records' block b stacked into an (n, dim_b) float32 matrix."""
        return np.stack([r.blocks[b] for r in self.records]).astype(np.float32)

    def concat_normalized(self) -> np.ndarray:
        """Per-record concatenation of L2-normalized blocks (float32).

        This is the engine's raw baseline embedding: block scale carries no
        information, cross-block balance is uniform.
        """
        parts = []
        for b in range(len(self.block_dims)):
            m = self.block_matrix(b)
            norms = np.linalg.norm(m, axis=1, keepdims=True)
            norms[norms < 1e-12] = 1.0
            parts.append(m / norms)
        return np.concatenate(parts, axis=1)

    def validate(self):
        ids = self.item_ids()
        if len(np.unique(ids)) != len(ids):
            raise ConfigError("item_ids must be unique within a set")
        for r in self.records:
            if len(r.blocks) != len(self.block_dims):
                raise ConfigError(f"record {r.item_id} has {len(r.blocks)} blocks, "
                                  f"expected {len(self.block_dims)}")
            for b, vec in enumerate(r.blocks):
                if vec.shape != (self.block_dims[b],):
                    raise ConfigError(f"record {r.item_id} block {b} has shape "
                                      f"{vec.shape}, expected ({self.block_dims[b]},)")
                if not np.all(np.isfinite(vec)):
                    raise ConfigError(f"record {r.item_id} block {b} is non-finite")


def save_set(eset: EmbeddingSet, path):
    eset.validate()
    if eset.role not in _ROLE_CODE:
        raise ConfigError(f"unknown role {eset.role!r}, expected one of {ROLES}")
    dims = tuple(int(d) for d in eset.block_dims)
    head = MAGIC + struct.pack("<III", VERSION, len(eset.records), len(dims))
    head += struct.pack(f"<{len(dims)}I", *dims) if dims else b""
    head += struct.pack("<B", _ROLE_CODE[eset.role])
    with open(path, "wb") as fh:
        fh.write(head)
        for r in eset.records:
            fh.write(struct.pack("<QII", r.item_id, r.identity, r.camera))
            for b, vec in enumerate(r.blocks):
                fh.write(np.ascontiguousarray(vec, dtype="<f4").tobytes())


def load_set(path) -> EmbeddingSet:
    with open(path, "rb") as fh:
        buf = fh.read()
    return parse_set(buf)


def parse_set(buf: bytes) -> EmbeddingSet:
    """Parse the binary embedding format, reporting byte offsets on failure."""
    off = 0

    def need(n, what):
        nonlocal off
        if off + n > len(buf):
            raise FormatError(f"truncated file: expected {what}", offset=off)
        piece = buf[off:off + n]
        off += n
        return piece

    if need(4, "magic") != MAGIC:
        raise FormatError(f"bad magic, expected {MAGIC!r}", offset=0)
    version, = struct.unpack("<I", need(4, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    count, = struct.unpack("<I", need(4, "record count"))
    n_blocks, = struct.unpack("<I", need(4, "block count"))
    if n_blocks == 0 or n_blocks > 64:
        raise FormatError(f"implausible block count {n_blocks}", offset=12)
    dims = struct.unpack(f"<{n_blocks}I", need(4 * n_blocks, "block dims"))
    if any(d == 0 or d > 1_000_000 for d in dims):
        raise FormatError(f"implausible block dims {dims}", offset=16)
    role_code, = struct.unpack("<B", need(1, "role"))
    if role_code >= len(ROLES):
        raise FormatError(f"unknown role code {role_code}", offset=off - 1)

    rec_bytes = 16 + 4 * sum(dims)
    expected = off + count * rec_bytes
    if expected != len(buf):
        raise FormatError(
            f"size mismatch: {count} records of {rec_bytes} bytes each "
            f"needs {expected} bytes total, file has {len(buf)}",
            offset=min(expected, len(buf)))

    records = []
    for _ in range(count):
        item_id, identity, camera = struct.unpack("<QII", need(16, "record header"))
        blocks = []
        for d in dims:
            raw = need(4 * d, "block data")
            vec = np.frombuffer(raw, dtype="<f4").copy()
            if not np.all(np.isfinite(vec)):
                raise FormatError(f"non-finite block values in record {item_id}",
                                  offset=off - 4 * d)
            blocks.append(vec)
        records.append(EmbeddingRecord(item_id, identity, camera, blocks))
    return EmbeddingSet(records=records, role=ROLES[role_code], block_dims=tuple(dims))


def write_manifest(eset: EmbeddingSet, path):
    with open(path, "w", encoding="utf-8") as fh:
        for r in eset.records:
            fh.write(json.dumps({"item_id": int(r.item_id),
                                 "identity": int(r.identity),
                                 "camera": int(r.camera)}) + "\n")


def generate_synthetic(n_train_ids, n_test_ids, imgs_per_id, n_cameras,
                       block_dims=(32, 64, 128), intra_noise=0.35,
                       distractor_rate=0.0, seed=0):
    """Build train/query/gallery sets standing in for a backbone extractor.

    Each identity gets a random unit-norm center per block, drawn around a
    shared per-block anchor so identities are mutually confusable the way
    real embedding spaces are. Images add Gaussian noise with expected norm
    ``intra_noise`` plus a fixed per-camera bias vector of norm
    ``0.5 * intra_noise`` (the camera acts as an appearance confounder,
    which is what makes cross-camera retrieval nontrivial). Train identities
    are disjoint from test identities; every query keeps at least one
    cross-camera match in the gallery; distractors with fresh unseen
    identities are appended to the gallery.
    """
    if n_train_ids < 2 or n_test_ids < 2:
        raise ConfigError("need at least 2 train and 2 test identities")
    if imgs_per_id < 2:
        raise ConfigError("need at least 2 images per identity")
    if intra_noise < 0:
        raise ConfigError("intra_noise must be nonnegative")
    if n_cameras < 2:
        raise ConfigError("need at least 2 cameras for cross-camera retrieval")
    if not 0.0 <= distractor_rate <= 1.0:
        raise ConfigError("distractor_rate must be in [0, 1]")
    block_dims = tuple(int(d) for d in block_dims)

    rng = np.random.default_rng(seed)
    sigma = float(intra_noise)

    def unit(dim):
        v = rng.normal(size=dim)
        return (v / np.linalg.norm(v)).astype(np.float32)

    anchors = [unit(d) for d in block_dims]
    cam_bias = [[unit(d) * (0.5 * sigma) for d in block_dims] for _ in range(n_cameras)]

    def make_centers():
        out = []
        for b, d in enumerate(block_dims):
            v = anchors[b] + _CENTER_SPREAD * unit(d)
            out.append((v / np.linalg.norm(v)).astype(np.float32))
        return out

    next_item = 0

    def make_image(centers, camera):
        nonlocal next_item
        blocks = []
        for b, d in enumerate(block_dims):
            noise = rng.normal(0.0, sigma / np.sqrt(d), size=d).astype(np.float32)
            blocks.append((centers[b] + noise + cam_bias[camera][b]).astype(np.float32))
        item = next_item
        next_item += 1
        return item, blocks

    def assign_cameras(n):
        cams = rng.integers(0, n_cameras, size=n)
        if len(set(cams.tolist())) < 2:
            cams[0] = (cams[1] + 1) % n_cameras
        return cams.tolist()

    train_records = []
    for identity in range(n_train_ids):
        centers = make_centers()
        for cam in assign_cameras(imgs_per_id):
            item, blocks = make_image(centers, cam)
            train_records.append(EmbeddingRecord(item, identity, cam, blocks))

    query_records, gallery_records = [], []
    for k in range(n_test_ids):
        identity = n_train_ids + k
        centers = make_centers()
        cams = assign_cameras(imgs_per_id)
        imgs = []
        for cam in cams:
            item, blocks = make_image(centers, cam)
            imgs.append((cam, item, blocks))
        # Pin two differing-camera images into the gallery so that any query
        # camera always leaves a cross-camera gallery match.
        order = list(rng.permutation(len(imgs)))
        gal_idx = [order[0]]
        for j in order[1:]:
            if imgs[j][0] != imgs[order[0]][0]:
                gal_idx.append(j)
                break
        rest = [j for j in order if j not in gal_idx]
        if rest:
            n_query = min(max(1, imgs_per_id // 3), len(rest))
            q_idx, g_idx = rest[:n_query], gal_idx + rest[n_query:]
        else:
            # Two images: one query, one gallery, cameras differ by pinning.
            q_idx, g_idx = [gal_idx.pop()], gal_idx
        for j in q_idx:
            cam, item, blocks = imgs[j]
            query_records.append(EmbeddingRecord(item, identity, cam, blocks))
        for j in g_idx:
            cam, item, blocks = imgs[j]
            gallery_records.append(EmbeddingRecord(item, identity, cam, blocks))

    n_distract = int(round(distractor_rate * len(gallery_records)))
    distractor_id = n_train_ids + n_test_ids
    for _ in range(n_distract):
        centers = make_centers()
        cam = int(rng.integers(0, n_cameras))
        item, blocks = make_image(centers, cam)
        gallery_records.append(EmbeddingRecord(item, distractor_id, cam, blocks))
        distractor_id += 1

    train = EmbeddingSet(train_records, "train", block_dims)
    query = EmbeddingSet(query_records, "query", block_dims)
    gallery = EmbeddingSet(gallery_records, "gallery", block_dims)
    for s in (train, query, gallery):
        s.validate()
    return train, query, gallery
