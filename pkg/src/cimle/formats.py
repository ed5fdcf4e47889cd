"""Binary PPM/PGM images and "CIML" generator checkpoints.

Every parser works on ``bytes`` and raises :class:`FormatError` (carrying the
byte offset of the problem) for anything malformed; no other exception type
escapes for bad input. Layouts are documented in ``FORMATS.md``.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .autodiff import DTYPE, Tensor
from .generators import ConditionalGenerator, from_descriptor

MAGIC = b"CIML"
VERSION = 1
MAX_RANK = 8


class FormatError(ValueError):
    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (at byte {offset})")
        self.offset = offset


class CheckpointVersionError(FormatError):
    pass


# -- netpbm ------------------------------------------------------------------------

_WS = b" \t\n\r\x0b\x0c"


def _header_tokens(data: bytes, count: int):
    """First ``count`` header tokens after the magic, and the raster offset."""
    pos = 2
    tokens = []
    while len(tokens) < count:
        start = pos
        while pos < len(data) and (data[pos] in _WS or data[pos] == ord("#")):
            if data[pos] == ord("#"):
                while pos < len(data) and data[pos] not in b"\r\n":
                    pos += 1
            else:
                pos += 1
        if pos >= len(data):
            raise FormatError("truncated header", pos)
        if pos == start:
            raise FormatError("expected whitespace in header", pos)
        tok_start = pos
        while pos < len(data) and data[pos] not in _WS and data[pos] != ord("#"):
            pos += 1
        tok = data[tok_start:pos]
        if not tok.isdigit() or len(tok) > 9:
            raise FormatError(f"bad header field {tok[:16]!r}", tok_start)
        tokens.append((int(tok), tok_start))
    if pos >= len(data) or data[pos] not in _WS:
        raise FormatError("missing whitespace before raster", pos)
    return tokens, pos + 1


def parse_netpbm(data: bytes):
    """``(array, maxval)``; array is ``(H, W, 3)`` for P6 and ``(H, W)`` for P5, integer-valued."""
    if len(data) < 2 or data[:2] not in (b"P5", b"P6"):
        raise FormatError("not a binary PGM/PPM file (expected P5 or P6)", 0)
    channels = 3 if data[:2] == b"P6" else 1
    ((w, ow), (h, oh), (maxval, om)), raster = _header_tokens(data, 3)
    if w < 1 or h < 1:
        raise FormatError(f"image size must be positive, got {w}x{h}", ow if w < 1 else oh)
    if not 1 <= maxval <= 65535:
        raise FormatError(f"maxval {maxval} outside 1..65535", om)
    width = 1 if maxval < 256 else 2
    need = w * h * channels * width
    have = len(data) - raster
    if have < need:
        raise FormatError(f"truncated raster: need {need} bytes, have {have}", len(data))
    if have > need:
        raise FormatError(f"{have - need} trailing bytes after raster", raster + need)
    dt = np.uint8 if width == 1 else np.dtype(">u2")
    arr = np.frombuffer(data, dtype=dt, count=w * h * channels, offset=raster)
    if arr.max(initial=0) > maxval:
        raise FormatError(f"sample value exceeds maxval {maxval}", raster)
    arr = arr.reshape((h, w, 3) if channels == 3 else (h, w)).astype(np.int64)
    return arr, maxval


def encode_ppm(image) -> bytes:
    """P6 bytes for a ``(3, H, W)`` image in [0, 1] (round half up)."""
    img = np.asarray(image, np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"save_image: expected (3, H, W), got {img.shape}")
    q = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)
    _, h, w = q.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(q.transpose(1, 2, 0)).tobytes()


def encode_pgm(labels) -> bytes:
    lab = np.asarray(labels)
    if lab.ndim != 2:
        raise ValueError(f"save_label_map: expected (H, W), got {lab.shape}")
    if lab.min(initial=0) < 0 or lab.max(initial=0) > 255:
        raise ValueError("save_label_map: class ids must lie in 0..255")
    h, w = lab.shape
    return b"P5\n%d %d\n255\n" % (w, h) + lab.astype(np.uint8).tobytes()


def decode_image(data: bytes) -> np.ndarray:
    arr, maxval = parse_netpbm(data)
    if arr.ndim == 3:
        return (arr.transpose(2, 0, 1) / maxval).astype(DTYPE)
    return (arr / maxval).astype(DTYPE)


def decode_label_map(data: bytes) -> np.ndarray:
    arr, _ = parse_netpbm(data)
    if arr.ndim != 2:
        raise FormatError("label maps must be P5 graymaps", 0)
    return arr


def _read(path):
    with open(path, "rb") as f:
        return f.read()


def _write(path, data):
    with open(path, "wb") as f:
        f.write(data)


def load_image(path) -> np.ndarray:
    """Float image in [0, 1]: ``(3, H, W)`` from P6, ``(H, W)`` from P5."""
    return decode_image(_read(path))


def save_image(path, image):
    _write(path, encode_ppm(image))


def load_label_map(path) -> np.ndarray:
    return decode_label_map(_read(path))


def save_label_map(path, labels):
    _write(path, encode_pgm(labels))


# -- checkpoints -------------------------------------------------------------------


def checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def checkpoint_bytes(gen: ConditionalGenerator) -> bytes:
    desc = json.dumps(gen.descriptor, sort_keys=True).encode()
    out = [MAGIC, struct.pack("<II", VERSION, len(desc)), desc, struct.pack("<I", len(gen.params))]
    for name in sorted(gen.params):
        arr = np.ascontiguousarray(gen.params[name].data, dtype="<f4")
        nb = name.encode()
        out.append(struct.pack("<I", len(nb)) + nb)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    body = b"".join(out)
    return body + checksum(body)


class _Reader:
    def __init__(self, data, end):
        self.data, self.pos, self.end = data, 0, end

    def take(self, n, what):
        if n < 0 or self.pos + n > self.end:
            raise FormatError(f"truncated {what}: need {n} bytes, {self.end - self.pos} left", self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def parse_checkpoint(data: bytes) -> ConditionalGenerator:
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError("bad magic, not a CIML checkpoint", 0)
    if len(data) < 16:
        raise FormatError("truncated checkpoint header", len(data))
    version = struct.unpack("<I", data[4:8])[0]
    if version != VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version} is not supported (this build reads version {VERSION}); "
            "re-export it with a matching release", 4)
    end = len(data) - 8
    if checksum(data[:end]) != data[end:]:
        raise FormatError("checksum mismatch", end)
    r = _Reader(data, end)
    r.pos = 8
    n_desc = r.u32("descriptor length")
    at = r.pos
    try:
        desc = json.loads(r.take(n_desc, "descriptor").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"descriptor is not valid JSON: {e}", at) from None
    try:
        gen = from_descriptor(desc)
    except (KeyError, TypeError, ValueError, AttributeError, OverflowError, MemoryError) as e:
        raise FormatError(f"invalid architecture descriptor: {e}", at) from None
    count = r.u32("tensor count")
    if count != len(gen.params):
        raise FormatError(f"{count} tensors stored, architecture has {len(gen.params)}", r.pos - 4)
    seen = set()
    for _ in range(count):
        at = r.pos
        try:
            name = r.take(r.u32("name length"), "tensor name").decode()
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", at) from None
        if name not in gen.params or name in seen:
            raise FormatError(f"unexpected tensor {name!r}", at)
        seen.add(name)
        rank = r.u32("rank")
        if rank > MAX_RANK:
            raise FormatError(f"rank {rank} exceeds {MAX_RANK}", r.pos - 4)
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "dims"))
        expect = gen.params[name].shape
        if dims != expect:
            raise FormatError(f"tensor {name!r} has shape {dims}, architecture expects {expect}", at)
        payload = r.take(4 * int(np.prod(dims, dtype=np.int64)), f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(DTYPE)
        gen.params[name] = Tensor(arr, requires_grad=True, name=name)
    if r.pos != end:
        raise FormatError(f"{end - r.pos} unexpected bytes before checksum", r.pos)
    return ConditionalGenerator(gen.descriptor, gen.params)


def save_checkpoint(path, gen: ConditionalGenerator):
    _write(path, checkpoint_bytes(gen))


def load_checkpoint(path, gen: ConditionalGenerator | None = None) -> ConditionalGenerator:
    """Load a checkpoint; with ``gen`` given, its parameters are replaced in place."""
    loaded = parse_checkpoint(_read(path))
    if gen is None:
        return loaded
    if loaded.descriptor["arch"] != gen.arch or set(loaded.params) != set(gen.params):
        raise FormatError("checkpoint architecture does not match the target generator", 8)
    for name, t in loaded.params.items():
        gen.params[name].data = t.data
    gen.descriptor.update(loaded.descriptor)
    return gen


# -- dataset directories -----------------------------------------------------------


def save_dataset(directory, ds):
    """Manifest, per-pair mode ids, and the pairs (TSV for vectors, PPM/PGM for images)."""
    man = dict(ds.manifest, has_labels=int(ds.labels is not None))
    with open(f"{directory}/manifest.txt", "w") as f:
        for k, v in man.items():
            f.write(f"{k} = {' '.join(map(str, v)) if isinstance(v, list) else v}\n")
    with open(f"{directory}/modes.tsv", "w") as f:
        f.write("index\tmode\n" + "".join(f"{i}\t{int(m)}\n" for i, m in enumerate(ds.mode)))
    if ds.x.ndim == 2:
        dx, dy = ds.x.shape[1], ds.y.shape[1]
        with open(f"{directory}/pairs.tsv", "w") as f:
            f.write("\t".join([f"x{i}" for i in range(dx)] + [f"y{i}" for i in range(dy)]) + "\n")
            for x, y in zip(ds.x, ds.y):
                f.write("\t".join(f"{float(v):.9g}" for v in np.concatenate([x, y])) + "\n")
        return
    for k in range(len(ds)):
        if ds.labels is not None:
            save_label_map(f"{directory}/x_{k:05d}.pgm", ds.labels[k])
        else:
            save_image(f"{directory}/x_{k:05d}.ppm", ds.x[k])
        save_image(f"{directory}/y_{k:05d}.ppm", ds.y[k])


def load_dataset(directory):
    """Inverse of :func:`save_dataset` (images come back quantized to 1/255)."""
    from .tasks import Dataset, one_hot

    man = {}
    with open(f"{directory}/manifest.txt") as f:
        for n, line in enumerate(f, 1):
            if "=" not in line:
                raise FormatError(f"manifest line {n} is not key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            man[k] = v
    try:
        n = int(man["n"])
        cond = [int(v) for v in man["cond_shape"].split()]
        target = [int(v) for v in man["target_shape"].split()]
        has_labels = bool(int(man.get("has_labels", 0)))
        modes = np.loadtxt(f"{directory}/modes.tsv", skiprows=1, dtype=np.int64, ndmin=2)[:, 1]
    except (KeyError, ValueError, IndexError) as e:
        raise FormatError(f"bad dataset manifest: {e}") from None
    labels = None
    if len(cond) == 1:
        try:
            arr = np.loadtxt(f"{directory}/pairs.tsv", skiprows=1, dtype=np.float32, ndmin=2)
        except ValueError as e:
            raise FormatError(f"bad pairs.tsv: {e}") from None
        if arr.shape != (n, cond[0] + target[0]):
            raise FormatError(f"pairs.tsv has shape {arr.shape}, manifest says {n} x {cond[0] + target[0]}")
        x, y = arr[:, : cond[0]], arr[:, cond[0] :]
    elif has_labels:
        labels = np.stack([load_label_map(f"{directory}/x_{k:05d}.pgm") for k in range(n)])
        x = one_hot(labels, cond[0])
        y = np.stack([load_image(f"{directory}/y_{k:05d}.ppm") for k in range(n)])
    else:
        x = np.stack([load_image(f"{directory}/x_{k:05d}.ppm") for k in range(n)])
        y = np.stack([load_image(f"{directory}/y_{k:05d}.ppm") for k in range(n)])
    manifest = {"kind": man.get("kind", "unknown"), "n": n, "seed": int(man.get("seed", 0)),
                "modes": int(man.get("modes", 0)), "cond_shape": cond, "target_shape": target}
    try:
        return Dataset(x, y, modes, labels, manifest)
    except ValueError as e:
        raise FormatError(str(e)) from None
