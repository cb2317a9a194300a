"""Architecture registry with parameter flattening and digests.

Canonical descriptor grammar: the first line is ``input,c=<C>,h=<H>,w=<W>``;
each following line is one layer as rendered by :meth:`LayerSpec.describe`
(kind, then ``key=value`` fields, comma-separated, no spaces). Lines are joined
with ``\\n`` and there is no trailing newline. The digest is FNV-1a 64 over the
UTF-8 bytes of that string.

Flattening order: ascending layer index; within a layer, weights before
biases (a residual block is ``W1, b1, W2, b2``); each tensor in C order.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ArchitectureError, IncompatibleArchitectureError

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass(frozen=True)
class Architecture:
    name: str
    input_shape: tuple
    layers: tuple
    descriptor: str = field(init=False, repr=False)
    digest: int = field(init=False)

    def __post_init__(self):
        nn.infer_shapes(self.input_shape, self.layers)
        c, h, w = self.input_shape
        lines = [f"input,c={c},h={h},w={w}"] + [ly.describe() for ly in self.layers]
        desc = "\n".join(lines)
        object.__setattr__(self, "descriptor", desc)
        object.__setattr__(self, "digest", fnv1a64(desc.encode("utf-8")))

    @property
    def param_count(self) -> int:
        return nn.param_count(self.layers)

    def init_params(self, seed: int) -> nn.ParamStore:
        return nn.init_params(self.layers, seed)


@dataclass(eq=False)
class ModelParams:
    """Flat float32 weight vector tagged with its architecture and round version."""

    arch: Architecture
    version: int
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float32)
        if self.weights.ndim != 1:
            raise ArchitectureError("weights must be a flat vector")
        if self.version < 0:
            raise ArchitectureError("version must be >= 0")

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (
            self.arch.digest == other.arch.digest
            and self.version == other.version
            and self.weights.tobytes() == other.weights.tobytes()
        )

    def with_version(self, version: int) -> "ModelParams":
        return ModelParams(self.arch, version, self.weights.copy())


def alexnet_lite() -> Architecture:
    return Architecture(
        "alexnet_lite",
        (3, 32, 32),
        (
            nn.conv2d(3, 16, 5, stride=2, padding=2),
            nn.relu(),
            nn.maxpool2d(2),
            nn.conv2d(16, 32, 3, stride=1, padding=1),
            nn.relu(),
            nn.maxpool2d(2),
            nn.dense(32 * 4 * 4, 64),
            nn.relu(),
            nn.dense(64, 2),
            nn.softmax_xent(),
        ),
    )


def resnet_lite() -> Architecture:
    return Architecture(
        "resnet_lite",
        (3, 32, 32),
        (
            nn.conv2d(3, 16, 3, stride=2, padding=1),
            nn.relu(),
            nn.residual_block(16),
            nn.residual_block(16),
            nn.global_avg_pool(),
            nn.dense(16, 2),
            nn.softmax_xent(),
        ),
    )


_BY_DIGEST: dict[int, Architecture] = {}
_BY_NAME: dict[str, Architecture] = {}


def register(arch: Architecture) -> Architecture:
    """Add an architecture; re-registering the same descriptor is a no-op."""
    prev = _BY_DIGEST.get(arch.digest)
    if prev is not None:
        if prev.descriptor != arch.descriptor:
            raise ArchitectureError(f"digest collision between {prev.name} and {arch.name}")
        return prev
    if arch.name in _BY_NAME:
        raise ArchitectureError(f"architecture name {arch.name!r} already registered")
    _BY_DIGEST[arch.digest] = arch
    _BY_NAME[arch.name] = arch
    return arch


register(alexnet_lite())
register(resnet_lite())

ARCH_NAMES = ("alexnet_lite", "resnet_lite")


def get_arch(name: str) -> Architecture:
    try:
        return _BY_NAME[name]
    except KeyError:
        raise ArchitectureError(f"unknown architecture {name!r}") from None


def arch_by_digest(digest: int) -> Architecture:
    try:
        return _BY_DIGEST[digest]
    except KeyError:
        raise IncompatibleArchitectureError(f"no registered architecture with digest {digest:#018x}") from None


def registered() -> list[Architecture]:
    return list(_BY_DIGEST.values())


def flatten(params: nn.ParamStore, arch: Architecture, version: int = 0) -> ModelParams:
    expected = nn.param_shapes(arch.layers)
    if [k for k, *_ in expected] != list(params.keys()):
        raise ArchitectureError("parameter store slots do not match the architecture")
    parts = []
    for key, shape, _, _ in expected:
        t = params[key]
        if t.shape != shape:
            raise ArchitectureError(f"slot {key}: shape {t.shape} != {shape}")
        parts.append(np.asarray(t, dtype=np.float32).ravel())
    flat = np.concatenate(parts) if parts else np.zeros(0, np.float32)
    if flat.size != arch.param_count:
        raise ArchitectureError("parameter count mismatch")
    return ModelParams(arch, version, flat)


def unflatten(mp: ModelParams) -> nn.ParamStore:
    arch = arch_by_digest(mp.arch.digest)
    if mp.weights.size != arch.param_count:
        raise ArchitectureError(f"weight vector has {mp.weights.size} entries, {arch.name} needs {arch.param_count}")
    out = {}
    off = 0
    for key, shape, _, _ in nn.param_shapes(arch.layers):
        n = int(np.prod(shape))
        out[key] = mp.weights[off : off + n].reshape(shape).copy()
        off += n
    return out


def initial_model(arch: Architecture, seed: int) -> ModelParams:
    return flatten(arch.init_params(seed), arch, 0)
