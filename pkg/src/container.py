"""
Dataset container: a directory holding a line-oriented ``manifest`` and one
binary record file per sample.

Record layout (little-endian):

    magic        4 bytes  b"VCU1"
    task_tag     u16 length + UTF-8 (e.g. "MV2V", "Composite(R2V+MV2V)")
    task         u16 length + UTF-8 (generator task name)
    seed         u64
    l, n, h, w   4 x u32
    prompt       u32 length + UTF-8
    frames       (l+n)*h*w*3 u8, value = round((x + 1) * 127.5)
    target       n*h*w*3 u8
    masks        packed bits of the (l+n)*h*w mask values, row-major, most significant bit first
"""
import hashlib
import logging
import os
import struct

import numpy as np

from src.datagen import TrainSample
from src.errors import ContainerParseError
from src.vcu import TaskTag, Vcu, from_u8, to_u8

logger = logging.getLogger(__name__)

MAGIC = b"VCU1"
VERSION = 1
MANIFEST = "manifest"


def _record_name(index):
    return f"sample_{index:06d}.vcu"


def encode_record(sample):
    vcu = sample.vcu
    l, n, h, w = vcu.ref_count, vcu.video_len, vcu.height, vcu.width
    tag, task, prompt = (str(v).encode("utf-8") for v in (vcu.task_tag, sample.task, vcu.prompt))
    parts = [
        MAGIC,
        struct.pack("<H", len(tag)), tag,
        struct.pack("<H", len(task)), task,
        struct.pack("<Q", int(sample.seed)),
        struct.pack("<4I", l, n, h, w),
        struct.pack("<I", len(prompt)), prompt,
        to_u8(vcu.frames).tobytes(),
        to_u8(sample.target).tobytes(),
        np.packbits(np.asarray(vcu.masks).reshape(-1) > 0).tobytes(),
    ]
    return b"".join(parts)


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, size, what):
        if self.offset + size > len(self.data):
            raise ContainerParseError(self.path, self.offset,
                                      f"truncated while reading {what}: need {size} bytes, {len(self.data) - self.offset} left")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def text(self, length_fmt, what):
        (length,) = self.unpack(length_fmt, f"{what} length")
        start = self.offset
        try:
            return self.take(length, what).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ContainerParseError(self.path, start, f"{what} is not valid UTF-8: {e}") from e


def decode_record(data, path="<memory>"):
    reader = _Reader(data, path)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise ContainerParseError(path, 0, f"bad magic {magic!r}, expected {MAGIC!r}")
    tag_offset = reader.offset
    tag_text = reader.text("<H", "task tag")
    try:
        tag = TaskTag.parse(tag_text)
    except ValueError as e:
        raise ContainerParseError(path, tag_offset, f"bad task tag {tag_text!r}: {e}") from e
    task = reader.text("<H", "task name")
    (seed,) = reader.unpack("<Q", "seed")
    dims_offset = reader.offset
    l, n, h, w = reader.unpack("<4I", "dimensions")
    if n < 1 or h < 1 or w < 1:
        raise ContainerParseError(path, dims_offset, f"invalid dimensions l={l} n={n} h={h} w={w}")
    prompt = reader.text("<I", "prompt")
    count = l + n
    frames = from_u8(np.frombuffer(reader.take(count * h * w * 3, "frames"), dtype=np.uint8).reshape(count, h, w, 3))
    target = from_u8(np.frombuffer(reader.take(n * h * w * 3, "target"), dtype=np.uint8).reshape(n, h, w, 3))
    bits = count * h * w
    packed = np.frombuffer(reader.take((bits + 7) // 8, "masks"), dtype=np.uint8)
    masks = np.unpackbits(packed)[:bits].reshape(count, h, w).astype(np.float32)
    if reader.offset != len(data):
        raise ContainerParseError(path, reader.offset, f"{len(data) - reader.offset} trailing bytes")
    vcu = Vcu(prompt, frames, masks, int(l), int(n), tag)
    return TrainSample(vcu=vcu, target=target, task=task, seed=int(seed))


def _geometry_line(samples):
    shapes = {(s.vcu.video_len, s.vcu.height, s.vcu.width) for s in samples}
    if not shapes:
        return "geometry none"
    if len(shapes) > 1:
        return "geometry mixed"
    n, h, w = shapes.pop()
    return f"geometry {n} {h} {w}"


def write_dataset(samples, path):
    """Write samples as a container directory; any existing records in it are replaced."""
    os.makedirs(path, exist_ok=True)
    for name in os.listdir(path):
        if name.endswith(".vcu"):
            os.remove(os.path.join(path, name))
    for i, sample in enumerate(samples):
        with open(os.path.join(path, _record_name(i)), "wb") as f:
            f.write(encode_record(sample))
    with open(os.path.join(path, MANIFEST), "w") as f:
        f.write(f"format {MAGIC.decode()}\nversion {VERSION}\ncount {len(samples)}\n{_geometry_line(samples)}\n")
    logger.info(f"Wrote {len(samples)} samples to {path}")


def _read_manifest(path):
    manifest = os.path.join(path, MANIFEST)
    try:
        with open(manifest, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise ContainerParseError(manifest, 0, f"cannot read manifest: {e}") from e
    fields, offset = {}, 0
    for line in raw.split(b"\n"):
        if line.strip():
            key, _, value = line.decode("utf-8", errors="replace").partition(" ")
            fields[key] = (value.strip(), offset)
        offset += len(line) + 1
    for key in ("format", "version", "count"):
        if key not in fields:
            raise ContainerParseError(manifest, len(raw), f"manifest is missing {key!r}")
    if fields["format"][0] != MAGIC.decode():
        raise ContainerParseError(manifest, fields["format"][1], f"unknown format {fields['format'][0]!r}")
    if fields["version"][0] != str(VERSION):
        raise ContainerParseError(manifest, fields["version"][1], f"unsupported version {fields['version'][0]!r}")
    try:
        count = int(fields["count"][0])
    except ValueError:
        raise ContainerParseError(manifest, fields["count"][1], f"bad count {fields['count'][0]!r}") from None
    return count


def read_dataset(path):
    count = _read_manifest(path)
    samples = []
    for i in range(count):
        record = os.path.join(path, _record_name(i))
        try:
            with open(record, "rb") as f:
                data = f.read()
        except OSError as e:
            raise ContainerParseError(record, 0, f"cannot read record: {e}") from e
        samples.append(decode_record(data, record))
    logger.info(f"Read {len(samples)} samples from {path}")
    return samples


def write_video(vcu, video, path, task="sample", seed=0):
    """Store a generated video as a one-sample container (the unit is kept as its conditioning)."""
    write_dataset([TrainSample(vcu=vcu, target=np.asarray(video, dtype=np.float32), task=task, seed=int(seed))], path)


def dataset_digest(samples):
    """SHA-256 over the encoded records, in order; equal digests mean byte-identical data streams."""
    digest = hashlib.sha256()
    for sample in samples:
        record = encode_record(sample)
        digest.update(struct.pack("<Q", len(record)))
        digest.update(record)
    return digest.hexdigest()
