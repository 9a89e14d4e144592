"""Desk-scale classifiers, parameter snapshots and the ``.dira`` checkpoint format."""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, ConfigError, DimensionError, FormatError

ARCHITECTURES = ("mlp", "cnn-small")
FORMAT_VERSION = 1
MODEL_MAGIC = b"DIRA"


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    input_shape: tuple[int, ...]
    num_classes: int
    hidden: tuple[int, ...] = (8,)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(d) for d in self.hidden))

    def validate(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unsupported architecture {self.architecture!r}; choose from {ARCHITECTURES}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if not self.input_shape or any(d <= 0 for d in self.input_shape):
            raise ConfigError(f"input_shape must be nonempty and positive, got {self.input_shape}")
        if any(h <= 0 for h in self.hidden):
            raise ConfigError(f"hidden widths must be positive, got {self.hidden}")
        if self.architecture == "cnn-small":
            if len(self.input_shape) != 3:
                raise ConfigError("cnn-small needs input_shape (channels, height, width)")
            if len(self.hidden) != 2:
                raise ConfigError("cnn-small needs two channel counts in hidden, e.g. (8, 16)")

    def to_text(self) -> str:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["hidden"] = list(self.hidden)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_text(cls, text: str) -> "ModelSpec":
        d = json.loads(text)
        return cls(architecture=d["architecture"], input_shape=tuple(d["input_shape"]),
                   num_classes=int(d["num_classes"]), hidden=tuple(d["hidden"]), seed=int(d["seed"]))


@dataclass
class ParamSet:
    """Ordered, uniquely named parameter arrays. Holds copies, never views."""

    entries: list[tuple[str, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        names = [n for n, _ in self.entries]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate parameter names in {names}")
        self.entries = [(n, np.array(a, copy=True)) for n, a in self.entries]

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.entries]

    @property
    def total_len(self) -> int:
        return sum(a.size for _, a in self.entries)

    def __getitem__(self, name: str) -> np.ndarray:
        for n, a in self.entries:
            if n == name:
                return a
        raise KeyError(name)

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def flatten(self) -> np.ndarray:
        if not self.entries:
            return np.zeros(0, dtype=ad.DEFAULT_DTYPE)
        return np.concatenate([a.reshape(-1) for _, a in self.entries])

    def unflatten(self, flat: np.ndarray) -> "ParamSet":
        flat = np.asarray(flat)
        if flat.size != self.total_len:
            raise DimensionError(f"flat vector has {flat.size} values, ParamSet holds {self.total_len}")
        out, i = [], 0
        for n, a in self.entries:
            out.append((n, flat[i:i + a.size].reshape(a.shape).astype(a.dtype)))
            i += a.size
        return ParamSet(out)

    def equals(self, other: "ParamSet") -> bool:
        return self.names == other.names and all(
            a.shape == b.shape and a.dtype == b.dtype and np.array_equal(a, b)
            for (_, a), (_, b) in zip(self.entries, other.entries))


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    b = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-b, b, size=shape).astype(ad.DEFAULT_DTYPE)


class Model:
    """Container of named trainable tensors plus a forward function."""

    def __init__(self, spec: ModelSpec, params: list[tuple[str, Tensor]]):
        self.spec = spec
        self.params: dict[str, Tensor] = dict(params)

    # -- forward ----------------------------------------------------------
    def forward(self, batch) -> Tensor:
        x = ad.as_tensor(batch)
        expected = self.spec.input_shape
        if x.ndim != len(expected) + 1 or tuple(x.shape[1:]) != expected:
            raise DimensionError(f"batch shape {x.shape} does not match (n,)+{expected}")
        if x.dtype != ad.DEFAULT_DTYPE:
            x = Tensor(x.data.astype(ad.DEFAULT_DTYPE))
        n = x.shape[0]
        if n == 0:
            return Tensor(np.zeros((0, self.spec.num_classes), dtype=ad.DEFAULT_DTYPE))
        p = self.params
        if self.spec.architecture == "mlp":
            h = ad.reshape(x, (n, -1))
            depth = len(self.spec.hidden)
            for i in range(depth):
                h = ad.relu(ad.add(ad.matmul(h, p[f"dense{i}.weight"]), p[f"dense{i}.bias"]))
            return ad.add(ad.matmul(h, p["out.weight"]), p["out.bias"])
        h = ad.relu(ad.add_channel_bias(ad.conv2d(x, p["conv0.weight"], 1, 1), p["conv0.bias"]))
        h = ad.relu(ad.add_channel_bias(ad.conv2d(h, p["conv1.weight"], 1, 1), p["conv1.bias"]))
        h = ad.global_avg_pool(h)
        return ad.add(ad.matmul(h, p["out.weight"]), p["out.bias"])

    __call__ = forward

    def predict(self, batch, chunk: int = 512) -> np.ndarray:
        """Top-1 class per row; ties go to the lowest class index (``np.argmax``)."""
        batch = np.asarray(batch.data if isinstance(batch, Tensor) else batch)
        out = []
        with ad.no_grad():
            for i in range(0, batch.shape[0], chunk):
                out.append(np.argmax(self.forward(batch[i:i + chunk]).data, axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    # -- parameters -------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def snapshot(self) -> ParamSet:
        return ParamSet([(n, t.data) for n, t in self.params.items()])

    def restore(self, ps: ParamSet) -> None:
        _check_alignment(self.snapshot(), ps)
        for n, a in ps:
            self.params[n].data = np.array(a, dtype=ad.DEFAULT_DTYPE, copy=True)
            self.params[n].grad = None

    def copy(self) -> "Model":
        m = Model(self.spec, [(n, Tensor(t.data.copy(), requires_grad=True)) for n, t in self.params.items()])
        return m


def build(spec: ModelSpec) -> Model:
    """Initialise a model with Glorot-uniform weights and zero biases, seeded by ``spec.seed``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    params: list[tuple[str, np.ndarray]] = []
    if spec.architecture == "mlp":
        width = int(np.prod(spec.input_shape))
        for i, h in enumerate(spec.hidden):
            params.append((f"dense{i}.weight", _glorot(rng, (width, h), width, h)))
            params.append((f"dense{i}.bias", np.zeros(h, dtype=ad.DEFAULT_DTYPE)))
            width = h
        params.append(("out.weight", _glorot(rng, (width, spec.num_classes), width, spec.num_classes)))
        params.append(("out.bias", np.zeros(spec.num_classes, dtype=ad.DEFAULT_DTYPE)))
    else:
        c_in = spec.input_shape[0]
        c0, c1 = spec.hidden
        params.append(("conv0.weight", _glorot(rng, (c0, c_in, 3, 3), c_in * 9, c0 * 9)))
        params.append(("conv0.bias", np.zeros(c0, dtype=ad.DEFAULT_DTYPE)))
        params.append(("conv1.weight", _glorot(rng, (c1, c0, 3, 3), c0 * 9, c1 * 9)))
        params.append(("conv1.bias", np.zeros(c1, dtype=ad.DEFAULT_DTYPE)))
        params.append(("out.weight", _glorot(rng, (c1, spec.num_classes), c1, spec.num_classes)))
        params.append(("out.bias", np.zeros(spec.num_classes, dtype=ad.DEFAULT_DTYPE)))
    return Model(spec, [(n, Tensor(a, requires_grad=True)) for n, a in params])


def _check_alignment(ref: ParamSet, other: ParamSet) -> None:
    if len(ref) != len(other):
        missing = [n for n in ref.names if n not in other.names] or [n for n in other.names if n not in ref.names]
        raise CheckpointError(f"parameter count mismatch ({len(ref)} vs {len(other)}); first offending entry {missing[:1]}")
    for (n, a), (m, b) in zip(ref.entries, other.entries):
        if n != m or a.shape != b.shape:
            raise CheckpointError(f"entry mismatch: expected {n}{list(a.shape)}, got {m}{list(b.shape)}")


# -- container format ---------------------------------------------------------
#
# magic[4] | version u16 | meta_len u32 | meta utf-8 | n_entries u32
# per entry: name_len u16 | name | ndim u8 | dims u32[ndim] | offset u64 (into payload)
# payload: little-endian float32, entries back to back

def write_container(magic: bytes, meta: str, entries: list[tuple[str, np.ndarray]]) -> bytes:
    buf = io.BytesIO()
    meta_b = meta.encode("utf-8")
    buf.write(magic)
    buf.write(struct.pack("<HI", FORMAT_VERSION, len(meta_b)))
    buf.write(meta_b)
    buf.write(struct.pack("<I", len(entries)))
    offset = 0
    payload = []
    for name, arr in entries:
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)) + nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(struct.pack("<Q", offset))
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        payload.append(data)
        offset += len(data)
    for p in payload:
        buf.write(p)
    return buf.getvalue()


def read_container(raw: bytes, magic: bytes) -> tuple[str, list[tuple[str, np.ndarray]]]:
    def take(fmt, pos):
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise FormatError(f"truncated file at byte {pos}")
        return struct.unpack_from(fmt, raw, pos), pos + size

    if raw[:4] != magic:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {magic!r}")
    (version, meta_len), pos = take("<HI", 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    if pos + meta_len > len(raw):
        raise FormatError(f"truncated metadata at byte {pos}")
    meta = raw[pos:pos + meta_len].decode("utf-8")
    pos += meta_len
    (count,), pos = take("<I", pos)
    table = []
    for _ in range(count):
        (nlen,), pos = take("<H", pos)
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,), pos = take("<B", pos)
        dims, pos = take(f"<{ndim}I", pos)
        (offset,), pos = take("<Q", pos)
        table.append((name, tuple(dims), offset))
    entries = []
    for name, dims, offset in table:
        n = int(np.prod(dims, dtype=np.int64))
        start = pos + offset
        if start + 4 * n > len(raw):
            raise FormatError(f"payload of {name!r} truncated at byte {start}")
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=start).reshape(dims)
        entries.append((name, arr.astype(np.float32)))
    return meta, entries


def checkpoint_bytes(model: Model) -> bytes:
    return write_container(MODEL_MAGIC, model.spec.to_text(), model.snapshot().entries)


def digest(raw: bytes) -> str:
    """64-bit hex digest used to pair Fisher files with their checkpoint."""
    return hashlib.blake2b(raw, digest_size=8).hexdigest()


def model_digest(model: Model) -> str:
    return digest(checkpoint_bytes(model))


def save(model: Model, path) -> str:
    """Write ``model`` to ``path`` and return the file's digest."""
    raw = checkpoint_bytes(model)
    Path(path).write_bytes(raw)
    return digest(raw)


def load(path) -> Model:
    raw = Path(path).read_bytes()
    meta, entries = read_container(raw, MODEL_MAGIC)
    try:
        spec = ModelSpec.from_text(meta)
    except (ValueError, KeyError) as exc:
        raise FormatError(f"unreadable model spec in {path}: {exc}") from exc
    model = build(spec)
    model.restore(ParamSet(entries))
    return model
