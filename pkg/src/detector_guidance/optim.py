"""AdamW parameter store and binary weight persistence.

Weight files ("DGW1" format) are little-endian: a 4-byte magic, then
one record per array — u32 name length, UTF-8 name, u32 rank, u32
extents, raw float32 payload.  Optimizer moments ride along under
reserved ``opt.`` names so a checkpoint restores training exactly.
Round trips are bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .kernel import KernelError, Tensor

MAGIC = b"DGW1"

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class ParamStore:
    """Named trainable parameters plus AdamW first/second moments."""

    params: dict[str, Tensor] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, data: np.ndarray):
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered")
        if name.startswith("opt."):
            raise ValueError("parameter names starting with 'opt.' are reserved")
        t = Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return sorted(self.params)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def gradients(self) -> dict[str, np.ndarray]:
        """Collect accumulated gradients; missing ones count as zero."""
        out = {}
        for name, t in self.params.items():
            out[name] = np.zeros_like(t.data) if t.grad is None else t.grad
        return out

    def copy(self) -> "ParamStore":
        dup = ParamStore(step=self.step)
        for name, t in self.params.items():
            dup.params[name] = Tensor(t.data.copy(), requires_grad=True)
            dup.m[name] = self.m[name].copy()
            dup.v[name] = self.v[name].copy()
        return dup


def adamw_step(
    store: ParamStore,
    grads: dict[str, np.ndarray],
    lr: float,
    weight_decay: float = 0.0,
) -> ParamStore:
    """One decoupled-weight-decay Adam update; mutates and returns `store`."""
    if set(grads) != set(store.params):
        missing = set(store.params) ^ set(grads)
        raise KernelError(f"adamw_step: gradient names do not match parameters: {sorted(missing)}")
    store.step += 1
    t = store.step
    bc1 = 1.0 - BETA1**t
    bc2 = 1.0 - BETA2**t
    for name, p in store.params.items():
        g = np.asarray(grads[name], dtype=np.float32)
        if g.shape != p.data.shape:
            raise KernelError(f"adamw_step: gradient shape {g.shape} != {p.data.shape} for {name!r}")
        if not np.isfinite(g).all():
            raise KernelError(f"adamw_step: non-finite gradient for {name!r}")
        m = store.m[name]
        v = store.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + EPS)
        if weight_decay:
            update = update + weight_decay * p.data
        p.data = p.data - np.float32(lr) * update.astype(np.float32)
    return store


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    payload = np.ascontiguousarray(arr, dtype="<f4")
    encoded = name.encode("utf-8")
    head = struct.pack("<I", len(encoded)) + encoded
    head += struct.pack("<I", payload.ndim)
    head += struct.pack(f"<{payload.ndim}I", *payload.shape)
    return head + payload.tobytes()


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("weight file truncated")
    return buf


def save_weights(store: ParamStore, path) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name in store.names():
        arrays[name] = store.params[name].data
        arrays[f"opt.m/{name}"] = store.m[name]
        arrays[f"opt.v/{name}"] = store.v[name]
    arrays["opt.step"] = np.array(float(store.step), dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name in sorted(arrays):
            fh.write(_pack_record(name, arrays[name]))


def load_weights(path) -> ParamStore:
    arrays: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise ValueError(f"{path}: not a DGW1 weight file")
        while True:
            head = fh.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
            count = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(shape)
            arrays[name] = data.astype(np.float32)

    store = ParamStore()
    for name, data in arrays.items():
        if name.startswith("opt."):
            continue
        store.params[name] = Tensor(data.copy(), requires_grad=True)
        store.m[name] = arrays.get(f"opt.m/{name}", np.zeros_like(data)).copy()
        store.v[name] = arrays.get(f"opt.v/{name}", np.zeros_like(data)).copy()
    if "opt.step" in arrays:
        store.step = int(arrays["opt.step"])
    return store
