"""Synthetic blocked/free image environments and their .feds file format.

Every image is a 3x32x32 float32 array in [0, 1]. An image is rendered from a
:class:`Scene`: a striped floor texture (per-environment palette, stripe
frequency and orientation, noise level) plus zero or more obstacle blobs drawn
from the environment's shape family. A scene is *blocked* when its obstacles
cover at least ``BLOCKED_COVERAGE`` of the lower half of the frame.

The ``real`` realm reuses the base environment's scene statistics and adds a
camera transform (gain/bias jitter, colour cast, heavier sensor noise, slight
blur); that transform is the sim-to-real shift.

.feds layout (little-endian)::

    0   4s  magic "FEDS"
    4   u8  version (1)
    5   u8  reserved
    6   u16 reserved
    8   u32 example count N
    12  u32 packed dims: bytes (C, H, W, 0)
    16  N records of: u8 label, C*H*W float32 pixels (C order)
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, FormatError

IMAGE_SHAPE = (3, 32, 32)
FREE, BLOCKED = 0, 1
BLOCKED_COVERAGE = 0.08
DISTRACTOR_COVERAGE = 0.03
SPLITS = ("train", "val")

FEDS_MAGIC = b"FEDS"
FEDS_VERSION = 1
FEDS_HEADER = struct.Struct("<4sBBHII")


# ---------------------------------------------------------------------------
# environments
# ---------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class EnvironmentId:
    realm: str  # "sim" | "real"
    index: int | str  # base environment number or "husky"

    def __post_init__(self):
        if self.realm not in ("sim", "real"):
            raise ConfigError(f"unknown realm {self.realm!r}")
        if self.index not in (0, 1, 2, "husky"):
            raise ConfigError(f"unknown environment index {self.index!r}")

    @property
    def name(self) -> str:
        if self.index == "husky":
            return "HS" if self.realm == "sim" else "HR"
        return ("S" if self.realm == "sim" else "R") + str(self.index)

    @property
    def code(self) -> int:
        base = 3 if self.index == "husky" else self.index
        return base + (0 if self.realm == "sim" else 4)

    def __str__(self):
        return self.name

    @classmethod
    def parse(cls, name: str) -> "EnvironmentId":
        name = name.strip().upper()
        if name == "HS":
            return cls("sim", "husky")
        if name == "HR":
            return cls("real", "husky")
        if len(name) == 2 and name[0] in "SR" and name[1] in "012":
            return cls("sim" if name[0] == "S" else "real", int(name[1]))
        raise ConfigError(f"cannot parse environment name {name!r}")

    @classmethod
    def from_code(cls, code: int) -> "EnvironmentId":
        realm = "sim" if code < 4 else "real"
        base = code % 4
        return cls(realm, "husky" if base == 3 else base)


SIM_ENVS = tuple(EnvironmentId("sim", i) for i in range(3))
REAL_ENVS = tuple(EnvironmentId("real", i) for i in range(3))
HUSKY_SIM = EnvironmentId("sim", "husky")
HUSKY_REAL = EnvironmentId("real", "husky")


@dataclass(frozen=True)
class EnvStyle:
    """Per base environment appearance. Colours are RGB in [0, 1]."""

    floor_a: tuple
    floor_b: tuple
    stripe_freq: float  # cycles per image width
    stripe_angle: float  # radians
    noise: float
    shape: str  # ellipse | rect | triangle | box
    obstacle: tuple
    obstacle_jitter: float = 0.12


STYLES = {
    # hospital: bright, fine diagonal tiles, pale-blue round carts
    0: EnvStyle((0.86, 0.86, 0.82), (0.72, 0.74, 0.74), 6.0, 0.7, 0.02, "ellipse", (0.35, 0.55, 0.75)),
    # office: mid-tone carpet stripes, brown desks
    1: EnvStyle((0.52, 0.50, 0.46), (0.40, 0.42, 0.47), 3.0, 0.0, 0.03, "rect", (0.62, 0.40, 0.22)),
    # warehouse: dark concrete, coarse stripes, yellow pallets/cones
    2: EnvStyle((0.28, 0.28, 0.30), (0.18, 0.19, 0.20), 1.5, 1.4, 0.04, "triangle", (0.85, 0.72, 0.15)),
    # husky playpen: green-grey floor, grey boxes
    "husky": EnvStyle((0.58, 0.70, 0.56), (0.47, 0.58, 0.48), 4.0, 1.9, 0.03, "box", (0.40, 0.40, 0.44)),
}


@dataclass(frozen=True)
class ShiftKnobs:
    """Camera model applied to the real realm."""

    gain: float = 0.82
    bias: float = 0.10
    jitter: float = 0.10  # per-image +-range on gain and bias
    cast: tuple = (0.05, 0.0, -0.05)
    noise: float = 0.08  # added to the environment's own noise level
    blur: float = 0.35  # weight of the 3x3 box blur mixed into the image


DEFAULT_SHIFT = ShiftKnobs()


# ---------------------------------------------------------------------------
# scenes and rendering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Blob:
    shape: str
    cx: float
    cy: float
    rx: float
    ry: float
    color: tuple


@dataclass(frozen=True)
class Scene:
    env: EnvironmentId
    phase: float
    blobs: tuple = ()
    noise_seed: int = 0
    gain: float = 1.0
    bias: float = 0.0
    shift: ShiftKnobs = field(default=DEFAULT_SHIFT, compare=False)


_YY, _XX = np.mgrid[0:32, 0:32].astype(np.float64) + 0.5


def blob_mask(b: Blob) -> np.ndarray:
    dx = (_XX - b.cx) / b.rx
    dy = (_YY - b.cy) / b.ry
    if b.shape == "ellipse":
        return dx * dx + dy * dy <= 1.0
    if b.shape in ("rect", "box"):
        return (np.abs(dx) <= 1.0) & (np.abs(dy) <= 1.0)
    if b.shape == "triangle":
        # apex at the top, base at cy + ry
        t = (dy + 1.0) / 2.0
        return (dy >= -1.0) & (dy <= 1.0) & (np.abs(dx) <= t)
    raise ConfigError(f"unknown blob shape {b.shape!r}")


def obstacle_mask(scene: Scene) -> np.ndarray:
    m = np.zeros((32, 32), dtype=bool)
    for b in scene.blobs:
        m |= blob_mask(b)
    return m


def lower_half_coverage(scene: Scene) -> float:
    return float(obstacle_mask(scene)[16:].mean())


def scene_label(scene: Scene) -> int:
    return BLOCKED if lower_half_coverage(scene) >= BLOCKED_COVERAGE else FREE


def render(scene: Scene) -> np.ndarray:
    """Deterministic 3x32x32 float32 image of ``scene``."""
    st = STYLES[scene.env.index]
    u = (_XX * np.cos(st.stripe_angle) + _YY * np.sin(st.stripe_angle)) / 32.0
    t = 0.5 + 0.5 * np.sin(2 * np.pi * st.stripe_freq * u + scene.phase)
    fa, fb = np.asarray(st.floor_a)[:, None, None], np.asarray(st.floor_b)[:, None, None]
    img = fa * t + fb * (1.0 - t)
    # darker far floor towards the top of the frame
    img = img * (0.75 + 0.25 * (_YY / 32.0))
    for b in scene.blobs:
        m = blob_mask(b)
        shade = 0.85 + 0.15 * np.clip((_YY - (b.cy - b.ry)) / (2 * b.ry), 0, 1)
        col = np.asarray(b.color)[:, None, None] * shade
        img = np.where(m, col, img)
    rng = np.random.default_rng(scene.noise_seed)
    noise = st.noise
    if scene.env.realm == "real":
        sh = scene.shift
        img = scene.gain * img + scene.bias + np.asarray(sh.cast)[:, None, None]
        if sh.blur > 0:
            pad = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
            box = sum(pad[:, i : i + 32, j : j + 32] for i in range(3) for j in range(3)) / 9.0
            img = (1 - sh.blur) * img + sh.blur * box
        noise = noise + sh.noise
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _obstacle_color(st: EnvStyle, rng) -> tuple:
    c = np.clip(np.asarray(st.obstacle) + rng.uniform(-st.obstacle_jitter, st.obstacle_jitter, 3), 0, 1)
    return tuple(float(v) for v in c)


def _realm_params(env: EnvironmentId, shift: ShiftKnobs, rng) -> tuple[float, float]:
    if env.realm == "sim":
        return 1.0, 0.0
    g = shift.gain + rng.uniform(-shift.jitter, shift.jitter)
    b = shift.bias + rng.uniform(-shift.jitter, shift.jitter) * 0.5
    return float(g), float(b)


def sample_scene(env: EnvironmentId, label: int, rng, shift: ShiftKnobs = DEFAULT_SHIFT) -> Scene:
    """Random scene of ``env`` whose :func:`scene_label` equals ``label``."""
    st = STYLES[env.index]
    phase = float(rng.uniform(0, 2 * np.pi))
    gain, bias = _realm_params(env, shift, rng)
    noise_seed = int(rng.integers(0, 2**63 - 1))
    for _ in range(200):
        blobs = []
        if label == BLOCKED:
            for _ in range(int(rng.integers(1, 4))):
                rx, ry = rng.uniform(3.0, 8.5), rng.uniform(3.0, 8.0)
                blobs.append(
                    Blob(st.shape, float(rng.uniform(2, 30)), float(rng.uniform(17, 29)), float(rx), float(ry), _obstacle_color(st, rng))
                )
        elif rng.random() < 0.5:
            r = rng.uniform(1.0, 2.2)
            blobs.append(
                Blob(st.shape, float(rng.uniform(3, 29)), float(rng.uniform(12, 19)), float(r), float(r), _obstacle_color(st, rng))
            )
        scene = Scene(env, phase, tuple(blobs), noise_seed, gain, bias, shift)
        cov = lower_half_coverage(scene)
        if label == BLOCKED and cov >= BLOCKED_COVERAGE:
            return scene
        if label == FREE and cov < DISTRACTOR_COVERAGE:
            return scene
    raise RuntimeError("scene sampler failed to meet its coverage constraint")  # pragma: no cover


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LabeledExample:
    image: np.ndarray
    label: int
    env: EnvironmentId


@dataclass(eq=False)
class EnvironmentDataset:
    """Images ``[N, 3, 32, 32]`` float32, labels ``[N]`` uint8, per-example env codes.

    ``sources`` lists ``(env, count)`` blocks in order; a generated set has a
    single block, a combined set one block per input.
    """

    env: EnvironmentId | tuple
    split: str
    images: np.ndarray
    labels: np.ndarray
    seed: int = 0
    sources: tuple = ()

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ConfigError(f"unknown split {self.split!r}")
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ConfigError("images/labels length mismatch")
        if not self.sources:
            envs = self.env if isinstance(self.env, tuple) else (self.env,)
            if len(envs) != 1:
                raise ConfigError("combined datasets need explicit sources")
            self.sources = ((envs[0], len(self.labels)),)
        if sum(n for _, n in self.sources) != len(self.labels):
            raise ConfigError("sources do not add up to the dataset size")

    def __len__(self):
        return int(self.labels.shape[0])

    def __eq__(self, other):
        if not isinstance(other, EnvironmentDataset):
            return NotImplemented
        return (
            self.env == other.env
            and self.split == other.split
            and self.seed == other.seed
            and tuple(self.sources) == tuple(other.sources)
            and self.images.shape == other.images.shape
            and self.images.tobytes() == other.images.tobytes()
            and self.labels.tobytes() == other.labels.tobytes()
        )

    @property
    def env_codes(self) -> np.ndarray:
        return np.concatenate([np.full(n, e.code, np.uint8) for e, n in self.sources]) if len(self) else np.zeros(0, np.uint8)

    @property
    def name(self) -> str:
        envs = self.env if isinstance(self.env, tuple) else (self.env,)
        return "+".join(e.name for e in envs)

    def example(self, i: int) -> LabeledExample:
        return LabeledExample(self.images[i], int(self.labels[i]), EnvironmentId.from_code(int(self.env_codes[i])))

    def examples(self):
        codes = self.env_codes
        for i in range(len(self)):
            yield LabeledExample(self.images[i], int(self.labels[i]), EnvironmentId.from_code(int(codes[i])))

    def manifest(self) -> dict:
        envs = self.env if isinstance(self.env, tuple) else (self.env,)
        realms = sorted({e.realm for e in envs})
        return {
            "env": "+".join(e.name for e in envs),
            "realm": realms[0] if len(realms) == 1 else "mixed",
            "split": self.split,
            "seed": int(self.seed),
            "count": len(self),
            "shape": list(self.images.shape[1:]),
            "sources": [[e.name, int(n)] for e, n in self.sources],
        }


def scenes(env: EnvironmentId, split: str, size: int, seed: int, shift: ShiftKnobs = DEFAULT_SHIFT) -> list[Scene]:
    """Scene descriptions behind :func:`generate` (same arguments, same scenes)."""
    if size < 2:
        raise ConfigError("dataset size must be >= 2")
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, env.code, SPLITS.index(split)])
    labels = np.zeros(size, dtype=np.int64)
    labels[: size // 2] = BLOCKED
    rng.shuffle(labels)
    return [sample_scene(env, int(lab), rng, shift) for lab in labels]


def generate(env: EnvironmentId, split: str, size: int, seed: int, shift: ShiftKnobs = DEFAULT_SHIFT) -> EnvironmentDataset:
    sc = scenes(env, split, size, seed, shift)
    images = np.stack([render(s) for s in sc])
    labels = np.array([scene_label(s) for s in sc], dtype=np.uint8)
    return EnvironmentDataset(env, split, images, labels, int(seed))


def from_examples(examples, split: str = "train", seed: int = 0) -> EnvironmentDataset:
    """Dataset from LabeledExamples; consecutive equal envs form one source block."""
    examples = list(examples)
    if not examples:
        raise ConfigError("no examples")
    blocks: list[list] = []
    for ex in examples:
        if blocks and blocks[-1][0] == ex.env:
            blocks[-1][1] += 1
        else:
            blocks.append([ex.env, 1])
    sources = tuple((e, n) for e, n in blocks)
    envs = tuple(dict.fromkeys(e for e, _ in sources))
    env = envs[0] if len(envs) == 1 else envs
    images = np.stack([ex.image for ex in examples])
    labels = np.array([ex.label for ex in examples], dtype=np.uint8)
    return EnvironmentDataset(env, split, images, labels, seed, sources if len(envs) > 1 else ())


def combine(sets) -> EnvironmentDataset:
    """Concatenate datasets of one split in the given order."""
    sets = list(sets)
    if not sets:
        raise ConfigError("combine() needs at least one dataset")
    if len(sets) == 1:
        return sets[0]
    splits = {s.split for s in sets}
    if len(splits) != 1:
        raise ConfigError(f"cannot combine mixed splits {sorted(splits)}")
    envs = []
    for s in sets:
        envs.extend(s.env if isinstance(s.env, tuple) else (s.env,))
    sources = tuple(src for s in sets for src in s.sources)
    return EnvironmentDataset(
        tuple(envs),
        sets[0].split,
        np.concatenate([s.images for s in sets]),
        np.concatenate([s.labels for s in sets]),
        sets[0].seed,
        sources,
    )


# ---------------------------------------------------------------------------
# .feds I/O
# ---------------------------------------------------------------------------


def feds_size(count: int, shape=IMAGE_SHAPE) -> int:
    return FEDS_HEADER.size + count * (1 + int(np.prod(shape)) * 4)


def write_feds(ds: EnvironmentDataset) -> bytes:
    n = len(ds)
    c, h, w = ds.images.shape[1:]
    if max(c, h, w) > 255:
        raise ConfigError("image dimensions must fit in one byte each")
    dims = c | (h << 8) | (w << 16)
    header = FEDS_HEADER.pack(FEDS_MAGIC, FEDS_VERSION, 0, 0, n, dims)
    rec = np.empty((n, 1 + c * h * w * 4), dtype=np.uint8)
    rec[:, 0] = ds.labels
    rec[:, 1:] = ds.images.astype("<f4").reshape(n, -1).view(np.uint8)
    return header + rec.tobytes()


def read_feds(data: bytes, manifest: dict | None = None) -> EnvironmentDataset:
    """Parse .feds bytes. Metadata (env, split, seed, sources) comes from ``manifest``."""
    data = bytes(data)
    if len(data) < 4 or data[:4] != FEDS_MAGIC:
        raise FormatError("bad magic", 0)
    if len(data) < FEDS_HEADER.size:
        raise FormatError("truncated header", len(data))
    _, version, res8, res16, n, dims = FEDS_HEADER.unpack_from(data)
    if version != FEDS_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if res8 or res16:
        raise FormatError("reserved header bytes must be zero", 5 if res8 else 6)
    c, h, w = dims & 0xFF, (dims >> 8) & 0xFF, (dims >> 16) & 0xFF
    if dims >> 24 or min(c, h, w) == 0:
        raise FormatError("bad image dimensions", 12)
    rec_len = 1 + c * h * w * 4
    need = FEDS_HEADER.size + n * rec_len
    if len(data) < need:
        raise FormatError(f"truncated: {n} records need {need} bytes, have {len(data)}", len(data))
    if len(data) > need:
        raise FormatError("trailing bytes after last record", need)
    rec = np.frombuffer(data, dtype=np.uint8, offset=FEDS_HEADER.size).reshape(n, rec_len)
    labels = rec[:, 0].copy()
    bad = np.flatnonzero(labels > 1)
    if bad.size:
        raise FormatError(f"invalid label {labels[bad[0]]}", FEDS_HEADER.size + int(bad[0]) * rec_len)
    images = rec[:, 1:].copy().view("<f4").astype(np.float32).reshape(n, c, h, w)
    if manifest is None:
        env, split, seed, sources = EnvironmentId("sim", 0), "train", 0, ()
    else:
        try:
            sources = tuple((EnvironmentId.parse(e), int(k)) for e, k in manifest.get("sources", []))
            envs = tuple(EnvironmentId.parse(e) for e in manifest["env"].split("+"))
            split, seed = manifest["split"], int(manifest["seed"])
            count = int(manifest.get("count", n))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed manifest: {exc}") from exc
        if count != n:
            raise FormatError("manifest count disagrees with file", 8)
        env = envs[0] if len(envs) == 1 else envs
        if len(envs) == 1 and len(sources) <= 1:
            sources = ()
    return EnvironmentDataset(env, split, images, labels, seed, sources)


def save(ds: EnvironmentDataset, path) -> None:
    """Write ``<path>`` (.feds) and ``<path>.json`` (manifest)."""
    from pathlib import Path

    path = Path(path)
    path.write_bytes(write_feds(ds))
    Path(str(path) + ".json").write_text(json.dumps(ds.manifest(), indent=2))


def load(path) -> EnvironmentDataset:
    from pathlib import Path

    path = Path(path)
    mpath = Path(str(path) + ".json")
    manifest = json.loads(mpath.read_text()) if mpath.exists() else None
    return read_feds(path.read_bytes(), manifest)


def with_split(ds: EnvironmentDataset, split: str) -> EnvironmentDataset:
    return replace(ds, split=split)
