"""Volume container, z-axis index, balanced sampler, preprocessing and the
synthetic multi-modality generator.

Container format ("QSEG", little-endian, version 1):

    magic   4s  = b"QSEG"
    version u16
    count   u32                      number of volumes
    per volume:
        modality   u8 length + utf-8 bytes
        kind       u8                0 = grayscale 3D stack, 1 = RGB 2D image
        d, h, w    u32 x 3           (d == 1 for 2D)
        nboxes     u16
        boxes      nboxes x 6 i32    x1, y1, x2, y2, z1, z2 (half-open x/y,
                                     inclusive z; z1 == z2 == 0 for 2D)
        image offsets  (d+1) x u64   absolute file offsets of DEFLATE chunks
        label offsets  (d+1) x u64
    payload: concatenated zlib chunks, one per slice

Every slice (image and label) is an independently decompressible chunk, so
random access never decompresses anything else. Offsets are strictly
increasing. A JSON sidecar (path + ".json") lists modalities and counts.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, FormatError
from .tensor import bilinear_resize_array, nearest_resize_array

MAGIC = b"QSEG"
VERSION = 1
KIND_GRAY3D = 0
KIND_RGB2D = 1
IMAGE_SIZE = 256
COMPRESS_LEVEL = 6


# --------------------------------------------------------------- container


@dataclass
class VolumeRecord:
    """In-memory volume prior to serialization."""

    modality: str
    kind: int
    image: np.ndarray  # (d,h,w) u8 for gray3d, (h,w,3) u8 for rgb2d
    label: np.ndarray  # (d,h,w) u8 / (h,w) u8; values are 1-based box ids
    boxes: list  # [(x1,y1,x2,y2,z1,z2), ...]

    @property
    def z_extent(self) -> int:
        return self.image.shape[0] if self.kind == KIND_GRAY3D else 1


def _slice_bytes(rec: VolumeRecord, z: int, label: bool) -> bytes:
    if rec.kind == KIND_GRAY3D:
        return (rec.label[z] if label else rec.image[z]).tobytes()
    return (rec.label if label else rec.image).tobytes()


def write_store(path, volumes: list[VolumeRecord], sidecar: bool = True) -> str:
    path = str(path)
    chunks, tables = [], []
    for rec in volumes:
        img_lens = []
        lbl_lens = []
        for z in range(rec.z_extent):
            c = zlib.compress(_slice_bytes(rec, z, False), COMPRESS_LEVEL)
            chunks.append(c)
            img_lens.append(len(c))
        for z in range(rec.z_extent):
            c = zlib.compress(_slice_bytes(rec, z, True), COMPRESS_LEVEL)
            chunks.append(c)
            lbl_lens.append(len(c))
        tables.append((img_lens, lbl_lens))

    header = bytearray()
    header += struct.pack("<4sHI", MAGIC, VERSION, len(volumes))
    dir_parts = []
    for rec, (img_lens, lbl_lens) in zip(volumes, tables):
        mod = rec.modality.encode()
        d = rec.z_extent
        if rec.kind == KIND_GRAY3D:
            _, h, w = rec.image.shape
        else:
            h, w, _ = rec.image.shape
        part = struct.pack("<B", len(mod)) + mod
        part += struct.pack("<BIII", rec.kind, d, h, w)
        part += struct.pack("<H", len(rec.boxes))
        for b in rec.boxes:
            part += struct.pack("<6i", *b)
        dir_parts.append((part, d))
    dir_size = sum(len(p) + 2 * (d + 1) * 8 for p, d in dir_parts)
    offset = len(header) + dir_size

    ci = iter(chunks)
    for (part, d), (img_lens, lbl_lens) in zip(dir_parts, tables):
        header += part
        for lens in (img_lens, lbl_lens):
            offs = [offset]
            for ln in lens:
                offset += ln
                offs.append(offset)
            header += struct.pack(f"<{d + 1}Q", *offs)
    del ci

    with open(path, "wb") as f:
        f.write(bytes(header))
        for c in chunks:
            f.write(c)

    if sidecar:
        counts = {}
        for rec in volumes:
            counts[rec.modality] = counts.get(rec.modality, 0) + rec.z_extent
        with open(path + ".json", "w") as f:
            json.dump({"volumes": len(volumes), "modalities": counts},
                      f, indent=2, sort_keys=True)
    return path


@dataclass
class _VolumeEntry:
    modality: str
    kind: int
    d: int
    h: int
    w: int
    boxes: list
    img_offsets: np.ndarray
    lbl_offsets: np.ndarray


class VolumeStore:
    """Random-access reader. With ``account=True`` every raw file read is
    appended to ``read_log`` as (offset, length)."""

    def __init__(self, path, account: bool = False):
        self.path = str(path)
        self.account = account
        self.read_log: list[tuple[int, int]] = []
        self._f = open(self.path, "rb")
        head = self._f.read(10)
        if len(head) < 10 or head[:4] != MAGIC:
            raise FormatError(f"{self.path}: not a QSEG container")
        version, count = struct.unpack("<HI", head[4:])
        if version != VERSION:
            raise FormatError(f"{self.path}: unsupported version {version}")
        self.entries: list[_VolumeEntry] = []
        for _ in range(count):
            mlen = struct.unpack("<B", self._f.read(1))[0]
            modality = self._f.read(mlen).decode()
            kind, d, h, w = struct.unpack("<BIII", self._f.read(13))
            nboxes = struct.unpack("<H", self._f.read(2))[0]
            boxes = [struct.unpack("<6i", self._f.read(24)) for _ in range(nboxes)]
            img = np.frombuffer(self._f.read((d + 1) * 8), dtype="<u8")
            lbl = np.frombuffer(self._f.read((d + 1) * 8), dtype="<u8")
            self.entries.append(_VolumeEntry(modality, kind, d, h, w, boxes, img, lbl))

    def close(self):
        self._f.close()

    def __len__(self):
        return len(self.entries)

    def _read_chunk(self, offsets, z: int) -> bytes:
        start, end = int(offsets[z]), int(offsets[z + 1])
        self._f.seek(start)
        raw = self._f.read(end - start)
        if self.account:
            self.read_log.append((start, end - start))
        return zlib.decompress(raw)

    def read_slice(self, v: int, z: int) -> np.ndarray:
        e = self.entries[v]
        if not 0 <= z < e.d:
            raise IndexError(f"slice {z} out of range for volume {v}")
        buf = np.frombuffer(self._read_chunk(e.img_offsets, z), dtype=np.uint8)
        if e.kind == KIND_GRAY3D:
            return buf.reshape(e.h, e.w)
        return buf.reshape(e.h, e.w, 3)

    def read_label(self, v: int, z: int) -> np.ndarray:
        e = self.entries[v]
        if not 0 <= z < e.d:
            raise IndexError(f"slice {z} out of range for volume {v}")
        buf = np.frombuffer(self._read_chunk(e.lbl_offsets, z), dtype=np.uint8)
        return buf.reshape(e.h, e.w)

    def chunk_span(self, v: int) -> tuple[int, int]:
        """Byte range [start, end) holding volume v's chunks."""
        e = self.entries[v]
        return int(e.img_offsets[0]), int(e.lbl_offsets[-1])


# -------------------------------------------------------------------- index


@dataclass
class ModalityIndex:
    """Cumulative z-extent prefix for one modality."""

    modality: str
    entries: list  # [(volume_id, z_extent), ...]
    prefix: np.ndarray = field(init=False)
    total: int = field(init=False)

    def __post_init__(self):
        extents = np.array([e[1] for e in self.entries], dtype=np.int64)
        self.prefix = np.concatenate([[0], np.cumsum(extents)[:-1]]).astype(np.int64)
        self.total = int(extents.sum())


def build_index(store: VolumeStore) -> dict[str, ModalityIndex]:
    per_mod: dict[str, list] = {}
    for v, e in enumerate(store.entries):
        per_mod.setdefault(e.modality, []).append((v, e.d))
    return {m: ModalityIndex(m, entries) for m, entries in per_mod.items()}


def locate_slice_probed(index: ModalityIndex, global_id: int):
    """Binary search over the prefix array; returns ((volume_id, z), probes)."""
    if not 0 <= global_id < index.total:
        raise IndexError(f"slice id {global_id} out of range [0, {index.total})")
    lo, hi, probes = 0, len(index.entries) - 1, 0
    while lo < hi:
        mid = (lo + hi + 1) // 2
        probes += 1
        if index.prefix[mid] <= global_id:
            lo = mid
        else:
            hi = mid - 1
    volume_id, _ = index.entries[lo]
    return (volume_id, global_id - int(index.prefix[lo])), probes


def locate_slice(index: ModalityIndex, global_id: int):
    return locate_slice_probed(index, global_id)[0]


def split_ids(index: ModalityIndex):
    """Deterministic 1/10 split: every 10th slice goes to evaluation."""
    gids = np.arange(index.total, dtype=np.int64)
    ev = gids % 10 == 9
    return gids[~ev], gids[ev]


# ------------------------------------------------------------------ sampler

STRATEGIES = ("proposed", "ablation", "proportional")


@dataclass
class SamplerConfig:
    strategy: str = "proposed"
    flip_prob: float = 0.5

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown sampling strategy {self.strategy!r}")
        return self


def ns_per_modality(strategy: str, sizes: dict[str, int]) -> dict[str, int]:
    """Per-modality sample count for one epoch.

    proposed:     N_s(m) = min_i N_m(i)
    ablation:     N_s(m) = max(N_m(m) // 10, min_i N_m(i))
    proportional: size-proportional split of the proposed total budget
                  (baseline emulation for balance experiments)
    """
    if not sizes or any(n <= 0 for n in sizes.values()):
        raise ConfigurationError("every modality must be non-empty")
    floor = min(sizes.values())
    if strategy == "proposed":
        return {m: floor for m in sizes}
    if strategy == "ablation":
        return {m: max(n // 10, floor) for m, n in sizes.items()}
    if strategy == "proportional":
        budget = floor * len(sizes)
        total = sum(sizes.values())
        return {m: max(1, round(budget * n / total)) for m, n in sizes.items()}
    raise ConfigurationError(f"unknown sampling strategy {strategy!r}")


def sample_epoch(config: SamplerConfig, index: dict[str, ModalityIndex],
                 rng: np.random.Generator, allowed: dict[str, np.ndarray] | None = None):
    """Draw one epoch of (modality, volume_id, z) samples.

    `allowed` optionally restricts each modality to a subset of global slice
    ids (the training split). Within a modality the draw is without
    replacement whenever N_s(m) <= pool size.
    """
    config.validate()
    pools = {}
    for m in sorted(index):
        pools[m] = allowed[m] if allowed is not None else np.arange(index[m].total)
    sizes = {m: len(p) for m, p in pools.items()}
    ns = ns_per_modality(config.strategy, sizes)
    samples = []
    for m in sorted(pools):
        pool = pools[m]
        pick = rng.choice(pool, size=ns[m], replace=ns[m] > len(pool))
        for gid in pick:
            v, z = locate_slice(index[m], int(gid))
            samples.append((m, v, z))
    order = rng.permutation(len(samples))
    return [samples[i] for i in order]


# -------------------------------------------------------------- preprocessing


@dataclass
class TransformRecord:
    """Geometry of preprocess() for mapping boxes and undoing padding."""

    orig_h: int
    orig_w: int
    new_h: int
    new_w: int
    size: int = IMAGE_SIZE


def preprocess(image: np.ndarray):
    """Raw 2D clip -> ((3, 256, 256) float32, TransformRecord).

    Grayscale is duplicated across RGB; the longest side is resized to 256
    (bilinear, half-pixel centers, short side rounded half up, floored at 1);
    the result is min-max normalized over the unpadded region and padded
    with zeros (the normalized minimum) on the right/bottom.
    """
    img = np.asarray(image)
    if img.ndim == 2:
        img = np.stack([img] * 3, axis=-1)
    h, w = img.shape[:2]
    if h < 1 or w < 1:
        raise ConfigurationError("empty image")
    scale = IMAGE_SIZE / max(h, w)
    new_h = max(1, int(np.floor(h * scale + 0.5))) if h < w else IMAGE_SIZE
    new_w = max(1, int(np.floor(w * scale + 0.5))) if w < h else IMAGE_SIZE
    if h == w:
        new_h = new_w = IMAGE_SIZE
    # resize per channel plane: a (H, W, 3) image with H <= 4 would trip the
    # channels-first heuristic inside bilinear_resize_array
    img = img.astype(np.float32)
    resized = np.stack([bilinear_resize_array(img[..., c], new_h, new_w)
                        for c in range(img.shape[-1])], axis=-1)
    lo, hi = float(resized.min()), float(resized.max())
    if hi > lo:
        resized = (resized - lo) / (hi - lo)
    else:
        resized = np.zeros_like(resized)
    out = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float32)
    out[:new_h, :new_w] = resized
    return out.transpose(2, 0, 1).copy(), TransformRecord(h, w, new_h, new_w)


def preprocess_mask(mask: np.ndarray, rec: TransformRecord) -> np.ndarray:
    """Ground-truth counterpart of preprocess: nearest resize plus zero pad."""
    resized = nearest_resize_array(np.asarray(mask), rec.new_h, rec.new_w)
    out = np.zeros((rec.size, rec.size), dtype=mask.dtype)
    out[:rec.new_h, :rec.new_w] = resized
    return out


def transform_box(box, rec: TransformRecord):
    """Map (x1,y1,x2,y2) from original pixels into preprocessed coordinates."""
    x1, y1, x2, y2 = box
    sx = rec.new_w / rec.orig_w
    sy = rec.new_h / rec.orig_h
    return (x1 * sx, y1 * sy, x2 * sx, y2 * sy)


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
            flip_prob: float = 0.5):
    """Independent horizontal/vertical flips applied jointly to image
    ((...,H,W)) and mask ((H,W))."""
    if image.shape[-2:] != mask.shape[-2:]:
        raise ConfigurationError("image/mask spatial shapes differ")
    if rng.random() < flip_prob:
        image = image[..., ::-1]
        mask = mask[..., ::-1]
    if rng.random() < flip_prob:
        image = np.flip(image, axis=-2)
        mask = np.flip(mask, axis=-2)
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def flip_box(box, size: int, horizontal: bool, vertical: bool):
    x1, y1, x2, y2 = box
    if horizontal:
        x1, x2 = size - x2, size - x1
    if vertical:
        y1, y2 = size - y2, size - y1
    return (x1, y1, x2, y2)


# ---------------------------------------------------------------- generator


@dataclass
class ModalitySpec:
    name: str
    slices: int
    is_3d: bool = False
    depth: int = 10  # slices per 3D volume
    shape: str = "ellipse"  # ellipse | rect | blob
    dark: bool = False  # dark objects on bright background
    noise: float = 6.0
    hw_range: tuple = (128, 224)

    def validate(self):
        if self.slices < 1:
            raise ConfigurationError(f"{self.name}: slices must be positive")
        if self.shape not in ("ellipse", "rect", "blob"):
            raise ConfigurationError(f"{self.name}: unknown shape {self.shape!r}")
        if self.is_3d and self.depth < 2:
            raise ConfigurationError(f"{self.name}: 3D depth must be >= 2")
        return self


def default_dataset_spec() -> list[ModalitySpec]:
    """Six imbalanced pseudo-modalities at desk scale."""
    return [
        ModalitySpec("ct-like", 300, is_3d=True, depth=10, shape="ellipse"),
        ModalitySpec("mr-like", 150, is_3d=True, depth=10, shape="rect"),
        ModalitySpec("xray-like", 100, shape="rect"),
        ModalitySpec("endo-like", 80, shape="ellipse"),
        ModalitySpec("derm-like", 60, shape="blob"),
        ModalitySpec("micro-like", 50, shape="ellipse", dark=True),
    ]


def imbalanced_dataset_spec(ratio: int = 50, minority: int = 20) -> list[ModalitySpec]:
    """Two-modality 50:1 set; the minority modality is visually inverted so
    undersampling it actually costs accuracy."""
    return [
        ModalitySpec("major", minority * ratio, shape="ellipse"),
        ModalitySpec("minor", minority, shape="rect", dark=True),
    ]


def _shape_mask(h, w, cy, cx, ry, rx, shape, phase=0.0):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    dy, dx = yy - cy, xx - cx
    if shape == "rect":
        return (np.abs(dy) <= ry) & (np.abs(dx) <= rx)
    if shape == "ellipse":
        return (dy / ry) ** 2 + (dx / rx) ** 2 <= 1.0
    theta = np.arctan2(dy, dx)
    wobble = 1.0 + 0.25 * np.sin(3.0 * theta + phase)
    return (dy / ry) ** 2 + (dx / rx) ** 2 <= wobble ** 2


def _render(mask, dark, noise, rng, rgb):
    h, w = mask.shape
    bg, fg = (210.0, 45.0) if dark else (40.0, 205.0)
    img = np.full((h, w), bg, dtype=np.float32)
    img[mask > 0] = fg
    img += rng.normal(0.0, noise, (h, w)).astype(np.float32)
    img = np.clip(img, 0, 255).astype(np.uint8)
    if not rgb:
        return img
    tint = rng.integers(-20, 21, size=3)
    chans = [np.clip(img.astype(np.int16) + t, 0, 255).astype(np.uint8) for t in tint]
    return np.stack(chans, axis=-1)


def _tight_box(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def _jitter_box(box, h, w, rng, jitter):
    # outward-only jitter keeps the object inside the emitted box
    x1, y1, x2, y2 = box
    x1 = max(0, x1 - int(rng.integers(0, jitter + 1)))
    y1 = max(0, y1 - int(rng.integers(0, jitter + 1)))
    x2 = min(w, x2 + int(rng.integers(0, jitter + 1)))
    y2 = min(h, y2 + int(rng.integers(0, jitter + 1)))
    return x1, y1, x2, y2


def _sample_object(h, w, rng):
    ry = rng.uniform(0.15, 0.32) * h
    rx = rng.uniform(0.15, 0.32) * w
    cy = rng.uniform(ry + 2, h - ry - 2)
    cx = rng.uniform(rx + 2, w - rx - 2)
    return cy, cx, ry, rx


def _make_2d_volume(spec: ModalitySpec, rng, jitter) -> VolumeRecord:
    h = int(rng.integers(spec.hw_range[0], spec.hw_range[1] + 1))
    w = int(rng.integers(spec.hw_range[0], spec.hw_range[1] + 1))
    cy, cx, ry, rx = _sample_object(h, w, rng)
    mask = _shape_mask(h, w, cy, cx, ry, rx, spec.shape, phase=rng.uniform(0, 2 * np.pi))
    img = _render(mask, spec.dark, spec.noise, rng, rgb=True)
    label = mask.astype(np.uint8)
    x1, y1, x2, y2 = _jitter_box(_tight_box(mask), h, w, rng, jitter)
    return VolumeRecord(spec.name, KIND_RGB2D, img, label,
                        [(x1, y1, x2, y2, 0, 0)])


def _make_3d_volume(spec: ModalitySpec, depth, rng, jitter) -> VolumeRecord:
    h = w = int(rng.integers(spec.hw_range[0], spec.hw_range[1] + 1))
    cy, cx, ry, rx = _sample_object(h, w, rng)
    img = np.empty((depth, h, w), dtype=np.uint8)
    label = np.empty((depth, h, w), dtype=np.uint8)
    boxes2d = []
    for z in range(depth):
        f = 0.75 + 0.25 * np.sin(np.pi * (z + 0.5) / depth)
        mask = _shape_mask(h, w, cy, cx, max(2.0, f * ry), max(2.0, f * rx),
                           spec.shape)
        img[z] = _render(mask, spec.dark, spec.noise, rng, rgb=False)
        label[z] = mask.astype(np.uint8)
        boxes2d.append(_tight_box(mask))
    bx = np.array(boxes2d)
    tight = (int(bx[:, 0].min()), int(bx[:, 1].min()),
             int(bx[:, 2].max()), int(bx[:, 3].max()))
    x1, y1, x2, y2 = _jitter_box(tight, h, w, rng, jitter)
    return VolumeRecord(spec.name, KIND_GRAY3D, img, label,
                        [(x1, y1, x2, y2, 0, depth - 1)])


def generate_synthetic(specs: list[ModalitySpec], path, seed: int = 0,
                       jitter: int = 5) -> str:
    """Write a synthetic QSEG container; byte-identical for a fixed seed."""
    rng = np.random.default_rng(seed)
    volumes = []
    for spec in specs:
        spec.validate()
        if spec.is_3d:
            remaining = spec.slices
            while remaining > 0:
                d = min(spec.depth, remaining)
                if d < 2:  # fold a leftover slice into the last volume
                    d = remaining
                if d < 2:
                    raise ConfigurationError(
                        f"{spec.name}: cannot form a 3D volume from {d} slice(s)")
                volumes.append(_make_3d_volume(spec, d, rng, jitter))
                remaining -= d
        else:
            for _ in range(spec.slices):
                volumes.append(_make_2d_volume(spec, rng, jitter))
    return write_store(path, volumes)


def overlapping_boxes_volume(n_boxes: int = 6, depth: int = 50,
                             hw: int = 140, seed: int = 0) -> VolumeRecord:
    """One 3D volume where every box spans the full z range (shared slices)."""
    rng = np.random.default_rng(seed)
    img = np.empty((depth, hw, hw), dtype=np.uint8)
    label = np.zeros((depth, hw, hw), dtype=np.uint8)
    cols = int(np.ceil(np.sqrt(n_boxes)))
    cell = hw // cols
    centers = []
    for i in range(n_boxes):
        r, c = divmod(i, cols)
        centers.append((r * cell + cell / 2, c * cell + cell / 2, cell * 0.3))
    for z in range(depth):
        frame = np.zeros((hw, hw), dtype=bool)
        f = 0.8 + 0.2 * np.sin(np.pi * (z + 0.5) / depth)
        for i, (cy, cx, r) in enumerate(centers):
            m = _shape_mask(hw, hw, cy, cx, f * r, f * r, "ellipse")
            label[z][m & ~frame] = i + 1
            frame |= m
        img[z] = _render(frame, False, 5.0, rng, rgb=False)
    boxes = []
    for i in range(n_boxes):
        ys, xs, _ = np.nonzero(np.moveaxis(label == i + 1, 0, -1))
        boxes.append((int(xs.min()), int(ys.min()), int(xs.max()) + 1,
                      int(ys.max()) + 1, 0, depth - 1))
    return VolumeRecord("overlap", KIND_GRAY3D, img, label, boxes)


def many_box_image(n_boxes: int = 255, seed: int = 0) -> VolumeRecord:
    """A single 2D image packed with n_boxes small rectangular objects."""
    rng = np.random.default_rng(seed)
    cols = int(np.ceil(np.sqrt(n_boxes)))
    rows = int(np.ceil(n_boxes / cols))
    cell = 18
    h, w = rows * cell + 8, cols * cell + 8
    label = np.zeros((h, w), dtype=np.uint8)
    boxes = []
    if n_boxes > 255:
        raise ConfigurationError("label ids are u8; at most 255 boxes per volume")
    for i in range(n_boxes):
        r, c = divmod(i, cols)
        y0, x0 = 4 + r * cell + 3, 4 + c * cell + 3
        label[y0:y0 + cell - 6, x0:x0 + cell - 6] = i + 1
        boxes.append((x0, y0, x0 + cell - 6, y0 + cell - 6, 0, 0))
    img = _render(label > 0, False, 4.0, rng, rgb=True)
    return VolumeRecord("manybox", KIND_RGB2D, img, label, boxes)
