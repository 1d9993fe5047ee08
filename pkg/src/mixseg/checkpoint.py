"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MSEG1"                      magic
    u32 version                   currently 1
    u32 num_classes, u32 input_size, 4 x u32 channel widths, u32 decoder width
    u32 entry count
    entries:  u16 name length, name (utf-8), u8 dtype tag (0 = f32),
              u8 rank, rank x u32 dims, f32 payload
    u8 optimizer flag
    if 1:     u64 step, 4 x f64 (lr, beta1, beta2, epsilon),
              u32 entry count, entries as above (names "m/<p>" and "v/<p>")

Parameters and batch-norm running statistics are both stored as entries.
"""

import struct
from collections import OrderedDict

import numpy as np

from .errors import CheckpointCorruptError, CheckpointFormatError, ConfigError
from .model import ModelConfig, build_model
from .optim import AdamState

MAGIC = b"MSEG1"
VERSION = 1
DTYPE_F32 = 0


def _pack_entries(entries):
    chunks = [struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def encode_checkpoint(model, optimizer_state=None):
    cfg = model.config
    parts = [MAGIC, struct.pack("<I", VERSION)]
    parts.append(struct.pack("<6I", cfg.num_classes, cfg.input_size, *cfg.channel_widths))
    parts.append(struct.pack("<I", cfg.decoder_width))
    parts.append(_pack_entries(model.state_dict()))
    if optimizer_state is None:
        parts.append(struct.pack("<B", 0))
    else:
        st = optimizer_state
        parts.append(struct.pack("<B", 1))
        parts.append(struct.pack("<Q4d", st.step_count, st.lr, st.beta1, st.beta2, st.epsilon))
        moments = OrderedDict()
        for name in st.m:
            moments[f"m/{name}"] = st.m[name]
            moments[f"v/{name}"] = st.v[name]
        parts.append(_pack_entries(moments))
    return b"".join(parts)


def save_checkpoint(model, path, optimizer_state=None):
    """Write ``model`` (and optionally Adam state) to ``path``."""
    data = encode_checkpoint(model, optimizer_state)
    with open(path, "wb") as fh:
        fh.write(data)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointCorruptError(f"checkpoint truncated at byte {len(self.buf)} (needed {self.pos + n})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def entries(self):
        (count,) = self.unpack("<I")
        out = OrderedDict()
        for _ in range(count):
            (nlen,) = self.unpack("<H")
            try:
                name = self.take(nlen).decode("utf-8")
            except UnicodeDecodeError as exc:
                raise CheckpointCorruptError("entry name is not valid utf-8") from exc
            tag, rank = self.unpack("<BB")
            if tag != DTYPE_F32:
                raise CheckpointCorruptError(f"entry {name!r} has unknown dtype tag {tag}")
            dims = self.unpack(f"<{rank}I") if rank else ()
            count_el = int(np.prod(dims)) if rank else 1
            payload = self.take(4 * count_el)
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        return out


def decode_checkpoint(buf):
    """Parse checkpoint bytes into ``(config_fields, tensors, adam_state_or_None)``."""
    r = _Reader(buf)
    magic = r.take(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    c, size, w0, w1, w2, w3 = r.unpack("<6I")
    (dec,) = r.unpack("<I")
    fields = {"num_classes": c, "input_size": size, "channel_widths": (w0, w1, w2, w3), "decoder_width": dec}
    tensors = r.entries()
    (flag,) = r.unpack("<B")
    state = None
    if flag == 1:
        step, lr, b1, b2, eps = r.unpack("<Q4d")
        moments = r.entries()
        state = AdamState(lr=lr, beta1=b1, beta2=b2, epsilon=eps, step_count=step)
        for key, arr in moments.items():
            kind, name = key.split("/", 1)
            (state.m if kind == "m" else state.v)[name] = arr
    elif flag != 0:
        raise CheckpointCorruptError(f"bad optimizer flag {flag}")
    if r.pos != len(buf):
        raise CheckpointCorruptError(f"{len(buf) - r.pos} trailing bytes after checkpoint")
    return fields, tensors, state


def load_checkpoint(path, expected_config=None, return_optimizer=False):
    """Restore a model; reject it if it does not match ``expected_config``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    fields, tensors, state = decode_checkpoint(buf)
    if expected_config is None:
        expected_config = ModelConfig(**fields)
    for key, val in fields.items():
        if getattr(expected_config, key) != val:
            raise ConfigError(f"checkpoint {key}={val} does not match expected {getattr(expected_config, key)}")
    model = build_model(expected_config)
    expected = model.state_dict()
    if list(expected) != list(tensors):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise ConfigError(f"parameter names differ: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, arr in tensors.items():
        if arr.shape != expected[name].shape:
            raise ConfigError(f"{name}: checkpoint shape {arr.shape} vs expected {expected[name].shape}")
    model.load_state_dict(tensors)
    if return_optimizer:
        return model, state
    return model
