"""Procedural lane scenes, dataset persistence and labeled/unlabeled splits.

A scene has up to four lane slots ordered left to right. Lanes are straight
(optionally slightly bowed) strokes converging toward a vanishing point
above the top image row, so channel ``c`` always means "the c-th slot from
the left" and existence flags need not be a prefix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .model import K
from .pgm import read_pgm, to_u8, write_pgm

ROAD_LEVEL = 0.25
LANE_LEVEL = 0.9
# nominal bottom-row x of each slot, as a fraction of the width
SLOT_X = (0.12, 0.38, 0.62, 0.88)


@dataclass(frozen=True)
class SceneConfig:
    width: int = 160
    height: int = 64
    lanes_min: int = 1
    lanes_max: int = 4
    lane_width_px: tuple = (2.0, 4.0)
    noise_sigma: tuple = (0.0, 0.15)
    brightness: tuple = (0.4, 1.0)
    occlusion_prob: float = 0.3
    max_sagitta: float = 3.0
    slot_jitter: float = 5.0
    vanish_x_jitter: float = 12.0
    vanish_y: tuple = (-60.0, -25.0)

    def __post_init__(self):
        if not 1 <= self.lanes_min <= self.lanes_max <= K:
            raise ConfigError(f"need 1 <= lanes_min <= lanes_max <= {K}")
        for name in ("lane_width_px", "noise_sigma", "brightness", "vanish_y"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name}: empty range ({lo}, {hi})")
        if not 0 <= self.occlusion_prob <= 1:
            raise ConfigError("occlusion_prob must lie in [0, 1]")


@dataclass
class Sample:
    image: np.ndarray  # [1,H,W] float32, multiples of 1/255
    mask: np.ndarray  # [H,W] uint8, 0 = background, c = lane c
    exist: np.ndarray  # [K] uint8
    labeled: bool = True
    id: int = 0
    # per-lane (bottom_x, vanish_x, vanish_y, sagitta); generation metadata, not persisted
    geometry: dict = field(default_factory=dict, compare=False, repr=False)

    def __eq__(self, other):
        return (isinstance(other, Sample) and self.id == other.id
                and self.labeled == other.labeled
                and np.array_equal(self.image, other.image)
                and self.image.dtype == other.image.dtype
                and np.array_equal(self.mask, other.mask)
                and np.array_equal(self.exist, other.exist))


def lane_center_x(y, bottom_x, vx, vy, height, sagitta=0.0):
    """Horizontal lane-axis position at row ``y``."""
    bottom = height - 1
    t = (bottom - y) / (bottom - vy)
    bow = sagitta * 4 * (y / bottom) * (1 - y / bottom)
    return bottom_x + (vx - bottom_x) * t + bow


def gen_sample(seed: int, cfg: SceneConfig = SceneConfig(), id: int = 0,
               curve: bool = True) -> Sample:
    """Render one scene; fully determined by ``seed`` and ``cfg``."""
    rng = np.random.default_rng(seed)
    H, W = cfg.height, cfg.width
    n_lanes = int(rng.integers(cfg.lanes_min, cfg.lanes_max + 1))
    slots = np.sort(rng.choice(K, size=n_lanes, replace=False))
    vx = W / 2 + rng.uniform(-cfg.vanish_x_jitter, cfg.vanish_x_jitter)
    vy = rng.uniform(*cfg.vanish_y)
    lane_w = rng.uniform(*cfg.lane_width_px)
    sigma = rng.uniform(*cfg.noise_sigma)
    bright = rng.uniform(*cfg.brightness)

    mask = np.zeros((H, W), dtype=np.uint8)
    exist = np.zeros(K, dtype=np.uint8)
    ys = np.arange(H, dtype=np.float64)[:, None]
    xs = np.arange(W, dtype=np.float64)[None, :]
    geometry = {}
    for s in slots:
        bx = SLOT_X[s] * W + rng.uniform(-cfg.slot_jitter, cfg.slot_jitter)
        sag = rng.uniform(-cfg.max_sagitta, cfg.max_sagitta) if curve else 0.0
        cx = lane_center_x(ys, bx, vx, vy, H, sag)
        mask[np.abs(xs - cx) <= lane_w / 2] = s + 1
        exist[s] = 1
        geometry[int(s) + 1] = (bx, vx, vy, sag)

    image = np.where(mask > 0, LANE_LEVEL, ROAD_LEVEL) * bright
    noise = rng.standard_normal((H, W))
    if sigma > 0:
        image = np.clip(image + sigma * noise, 0.0, 1.0)
    if rng.random() < cfg.occlusion_prob:
        oh = int(rng.integers(H // 8, H // 3 + 1))
        ow = int(rng.integers(W // 10, W // 3 + 1))
        oy = int(rng.integers(0, H - oh + 1))
        ox = int(rng.integers(0, W - ow + 1))
        image[oy:oy + oh, ox:ox + ow] = 0.0
    image = (to_u8(image).astype(np.float32) / np.float32(255))[None]
    return Sample(image, mask, exist, True, id, geometry)


def lane_axis_hough(geom, height, width, pool=4):
    """Analytic (theta, rho) of a straight lane's axis in pooled, centered
    coordinates, with theta in [0, pi)."""
    bx, vx, vy, _ = geom
    bottom = height - 1
    # two points on the axis in full-resolution pixel coordinates
    p0 = np.array([bx, bottom], dtype=np.float64)
    p1 = np.array([vx, vy], dtype=np.float64)

    def to_pooled(p):
        x, y = (p + 0.5) / pool - 0.5
        return np.array([x - (width / pool - 1) / 2, y - (height / pool - 1) / 2])

    a, b = to_pooled(p0), to_pooled(p1)
    d = b - a
    normal = np.array([-d[1], d[0]])
    normal /= np.hypot(*normal)
    theta = math.atan2(normal[1], normal[0])
    rho = float(normal @ a)
    if theta < 0:
        theta += math.pi
        rho = -rho
    if theta >= math.pi:
        theta -= math.pi
        rho = -rho
    return theta, rho


def sample_seed(base_seed: int, i: int) -> int:
    """Independent per-sample seed derived from a dataset seed and an id."""
    return int(np.random.SeedSequence([base_seed, i]).generate_state(1, np.uint64)[0])


@dataclass
class Dataset:
    samples: list
    k: int = K

    def __len__(self):
        return len(self.samples)

    def __eq__(self, other):
        return isinstance(other, Dataset) and self.k == other.k and self.samples == other.samples

    def by_id(self):
        return {s.id: s for s in self.samples}


def generate_dataset(n: int, seed: int, cfg: SceneConfig = SceneConfig(), start_id=0) -> Dataset:
    return Dataset([gen_sample(sample_seed(seed, i), cfg, id=i)
                    for i in range(start_id, start_id + n)])


def split_dataset(n: int, labeled_fraction: float, seed: int):
    """Shuffle ids ``0..n-1`` and label the first ``round(n*fraction)``."""
    if not 0 < labeled_fraction <= 1:
        raise ConfigError(f"labeled fraction must lie in (0, 1], got {labeled_fraction}")
    perm = np.random.default_rng(seed).permutation(n)
    n_lab = int(math.floor(n * labeled_fraction + 0.5))
    return sorted(perm[:n_lab].tolist()), sorted(perm[n_lab:].tolist())


def save_dataset(ds: Dataset, out_dir):
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    lines = [str(len(ds)), str(ds.k)]
    for s in ds.samples:
        write_pgm(out / "images" / f"{s.id}.pgm", to_u8(s.image[0]))
        write_pgm(out / "masks" / f"{s.id}.pgm", s.mask.astype(np.uint8))
        bits = "".join(str(int(b)) for b in s.exist)
        lines.append(f"{s.id},{int(s.labeled)},{bits}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_dataset(in_dir) -> Dataset:
    root = Path(in_dir)
    manifest = root / "manifest.txt"
    try:
        lines = manifest.read_text().split()
    except OSError as e:
        raise FileNotFoundError(f"{manifest}: {e.strerror}") from None
    try:
        count, k = int(lines[0]), int(lines[1])
    except (IndexError, ValueError):
        raise FormatError(f"{manifest}: header must be two integers (count, K)") from None
    rows = lines[2:]
    if len(rows) != count:
        raise FormatError(f"{manifest}: header says {count} samples, lists {len(rows)}")
    for sub in ("images", "masks"):
        found = len(list((root / sub).glob("*.pgm"))) if (root / sub).is_dir() else 0
        if found != count:
            raise FormatError(f"{root / sub}: manifest lists {count} samples, found {found} files")
    samples = []
    for row in rows:
        try:
            sid, lab, bits = row.split(",")
            sid, lab = int(sid), int(lab)
        except ValueError:
            raise FormatError(f"{manifest}: malformed row {row!r}") from None
        if len(bits) != k or set(bits) - {"0", "1"}:
            raise FormatError(f"{manifest}: bad existence bits {bits!r} for id {sid}")
        img = read_pgm(root / "images" / f"{sid}.pgm")
        mask = read_pgm(root / "masks" / f"{sid}.pgm")
        if img.shape != mask.shape:
            raise FormatError(f"{root}: image/mask size mismatch for id {sid}")
        if mask.max() > k:
            raise FormatError(f"{root / 'masks' / f'{sid}.pgm'}: label above K={k}")
        image = (img.astype(np.float32) / np.float32(255))[None]
        exist = np.array([int(b) for b in bits], dtype=np.uint8)
        samples.append(Sample(image, mask, exist, bool(lab), sid))
    return Dataset(samples, k)
