"""Two-phase semi-supervised training loop, checkpoints and metrics CSV.

Phase 1 trains on labeled samples only. Phase 2 (every mode except
``supervised``) continues on batches that are half labeled, half
unlabeled; unlabeled samples contribute the Hough max-bin loss (``ht``),
a cross-entropy against pseudo-labels made once at the start of phase 2
(``pseudo``), or both (``pseudo_ht``).
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import losses, model
from . import tensor as T
from .errors import ConfigError, DataError, FormatError
from .hough import build_vote_table, preset
from .metrics import MetricAccumulator, Metrics

log = logging.getLogger(__name__)

MODES = ("supervised", "ht", "pseudo", "pseudo_ht")
CSV_HEADER = ["epoch", "phase", "split", "l_seg", "l_lane", "l_ht", "l_total",
              "lane_f1", "pixel_f1", "exist_acc", "lr"]

MAGIC = b"HTLN"
VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "supervised"
    epochs_phase1: int = 12
    epochs_phase2: int = 6
    batch_size: int = 8
    lr0: float = 1e-2
    decay_power: float = 0.9
    momentum: float = 0.9
    seed: int = 0
    loss: losses.LossConfig = field(default_factory=losses.LossConfig)
    hough: str = "desk"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {', '.join(MODES)}")
        if self.epochs_phase1 < 1 or self.epochs_phase2 < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        preset(self.hough)

    @property
    def uses_ht(self):
        return self.mode in ("ht", "pseudo_ht")

    @property
    def uses_pseudo(self):
        return self.mode in ("pseudo", "pseudo_ht")

    @property
    def total_epochs(self):
        if self.mode == "supervised":
            return self.epochs_phase1
        return self.epochs_phase1 + self.epochs_phase2

    def flat(self):
        d = asdict(self)
        d.update({f"loss.{k}": v for k, v in d.pop("loss").items()})
        return d


def lr_at(t: int, T_total: int, cfg: TrainConfig) -> float:
    """Polynomial decay ``lr0 * (1 - t/T)**power``."""
    if T_total < 1 or not 0 <= t <= T_total:
        raise ConfigError(f"lr_at: need 0 <= t <= T and T >= 1, got t={t}, T={T_total}")
    return cfg.lr0 * (1 - t / T_total) ** cfg.decay_power


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict
    epoch: int
    rng_state: tuple  # 4 x u64: state hi/lo, increment hi/lo
    config: TrainConfig | None = None

    def __eq__(self, other):
        return (isinstance(other, Checkpoint) and self.epoch == other.epoch
                and tuple(self.rng_state) == tuple(other.rng_state)
                and list(self.params) == list(other.params)
                and all(self.params[k].shape == other.params[k].shape
                        and self.params[k].tobytes() == other.params[k].tobytes()
                        for k in self.params))


def rng_state_words(rng: np.random.Generator):
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise TypeError("checkpoints store PCG64 state only")
    mask = (1 << 64) - 1
    s, inc = st["state"]["state"], st["state"]["inc"]
    return (s >> 64, s & mask, inc >> 64, inc & mask)


def rng_from_words(words):
    bg = np.random.PCG64()
    st = bg.state
    st["state"] = {"state": (words[0] << 64) | words[1], "inc": (words[2] << 64) | words[3]}
    st["has_uint32"] = 0
    st["uinteger"] = 0
    bg.state = st
    return np.random.Generator(bg)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(ckpt.params)))
    for name, arr in ckpt.params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    buf.write(struct.pack("<I", ckpt.epoch))
    buf.write(struct.pack("<4Q", *ckpt.rng_state))
    return buf.getvalue()


def parse_checkpoint(data: bytes, source="checkpoint") -> Checkpoint:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"{source}: truncated at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise FormatError(f"{source}: bad magic")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version} (expected {VERSION})")
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
        params[name] = arr
    (epoch,) = struct.unpack("<I", take(4))
    words = struct.unpack("<4Q", take(32))
    if pos != len(view):
        raise FormatError(f"{source}: {len(view) - pos} trailing bytes")
    return Checkpoint(params, epoch, words)


def _config_text(cfg: TrainConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in cfg.flat().items())


def save_checkpoint(path, ckpt: Checkpoint):
    """Atomically write the binary checkpoint, plus a ``.cfg`` echo of the
    training config next to it when one is attached."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    os.replace(tmp, path)
    if ckpt.config is not None:
        side = path.with_name(path.name + ".cfg")
        side.write_text(_config_text(ckpt.config))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise FileNotFoundError(f"{path}: {e.strerror}") from None
    ckpt = parse_checkpoint(data, str(path))
    side = path.with_name(path.name + ".cfg")
    if side.exists():
        from .config import train_config_from_pairs, parse_pairs
        ckpt.config = train_config_from_pairs(parse_pairs(side.read_text(), str(side)))
    return ckpt


# ---------------------------------------------------------------------------
# Per-sample and per-batch work
# ---------------------------------------------------------------------------

@dataclass
class Item:
    sample: object
    kind: str  # "labeled" | "unlabeled"
    target: tuple | None = None  # (mask, exist) for labeled or pseudo-labeled


def sample_loss(params, table, item: Item, cfg: TrainConfig, use_ht: bool):
    """Forward, losses and backward for one sample."""
    out, cache = model.forward(params, item.sample.image, table)
    lcfg = cfg.loss
    seg = lane = ht = None
    if item.target is not None:
        mask, exist = item.target
        seg = losses.seg_loss(out.seg_probs, mask, lcfg)
        if item.kind == "labeled":
            lane = losses.lane_loss(out.exist_p, exist, lcfg)
    if use_ht and (item.kind == "unlabeled" or lcfg.ht_on_labeled):
        ht = losses.ht_loss(out.seg_probs, out.exist_p, table, lcfg)
    if seg is None and ht is None:
        return out, None, None
    bundle = losses.total_loss(seg, lane, ht, lcfg, item.kind)
    g_exist = bundle.g_exist if bundle.g_exist is not None else np.zeros_like(out.exist_p)
    grads, _ = model.backward(params, table, out, cache, bundle.g_logits, g_exist)
    return out, bundle, grads


def _workers():
    try:
        return max(1, int(os.environ.get("HTLANE_THREADS", "1")))
    except ValueError:
        return 1


def batch_step(params, table, items, cfg: TrainConfig, lr: float, use_ht: bool,
               velocity=None):
    """One SGD step on a batch; gradients are averaged over ``items``.

    Per-sample results are reduced in batch order, so the update does not
    depend on the worker count.
    """
    n = _workers()
    if n > 1 and len(items) > 1:
        with ThreadPoolExecutor(n) as pool:
            results = list(pool.map(lambda it: sample_loss(params, table, it, cfg, use_ht), items))
    else:
        results = [sample_loss(params, table, it, cfg, use_ht) for it in items]
    total = {k: np.zeros_like(v) for k, v in params.items()}
    for _, bundle, grads in results:
        if grads is None:
            continue
        for k in total:
            total[k] += grads[k]
    scale = np.float32(1.0 / len(items))
    for k in params:
        v = None if velocity is None else velocity[k]
        T.sgd_update(params[k], total[k] * scale, lr, v, cfg.momentum)
    return results


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class _EpochLog:
    def __init__(self):
        self.sums = {"l_seg": 0.0, "l_lane": 0.0, "l_ht": 0.0, "l_total": 0.0}
        self.n = 0
        self.acc = MetricAccumulator()

    def add(self, item, out, bundle):
        if bundle is not None:
            for k in self.sums:
                self.sums[k] += getattr(bundle, k)
        self.n += 1
        s = item.sample
        self.acc.add(out.seg_probs, out.exist_p, s.mask, s.exist)

    def row(self, epoch, phase, split, lr):
        m = self.acc.result()
        means = {k: v / self.n if self.n else 0.0 for k, v in self.sums.items()}
        return {"epoch": epoch, "phase": phase, "split": split, **means,
                "lane_f1": m.lane_f1, "pixel_f1": m.pixel_f1, "exist_acc": m.exist_acc, "lr": lr}


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list


def _split(dataset):
    lab = [s for s in dataset.samples if s.labeled]
    unl = [s for s in dataset.samples if not s.labeled]
    return lab, unl


def make_table(cfg: TrainConfig):
    hc = preset(cfg.hough)
    if (hc.H, hc.W) != model.FEATURE_SHAPE[1:]:
        raise ConfigError(
            f"Hough preset {cfg.hough!r} is {hc.H}x{hc.W} but the network's feature map is "
            f"{model.FEATURE_SHAPE[1]}x{model.FEATURE_SHAPE[2]}; only 'desk' can train")
    return build_vote_table(hc)


def pseudo_label_all(params, table, samples, lcfg):
    labels = {}
    for s in samples:
        out, _ = model.forward(params, s.image, table)
        pl = losses.make_pseudo_labels(out, lcfg)
        if pl is not None:
            labels[s.id] = pl
    return labels


def train(dataset, cfg: TrainConfig, params=None) -> TrainResult:
    """Run both phases on ``dataset`` (samples carry their ``labeled`` flag)."""
    lab, unl = _split(dataset)
    if not lab:
        raise DataError("training needs at least one labeled sample")
    if cfg.mode != "supervised" and not unl:
        raise DataError(f"{cfg.mode} mode requires unlabeled data")
    table = make_table(cfg)
    params = model.init_params(cfg.seed) if params is None else {k: v.copy() for k, v in params.items()}
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 1])))
    velocity = {k: np.zeros_like(v) for k, v in params.items()} if cfg.momentum else None
    T_total = cfg.total_epochs
    history = []
    batch_id = 0

    def run_batch(items, lr, use_ht, logs):
        nonlocal batch_id
        results = batch_step(params, table, items, cfg, lr, use_ht, velocity)
        for item, (out, bundle, _) in zip(items, results):
            if bundle is not None and not math.isfinite(bundle.l_total):
                raise TrainingError(f"non-finite loss in batch {batch_id} (sample {item.sample.id})")
            logs[item.kind].add(item, out, bundle)
        batch_id += 1

    log.info("phase 1: %d labeled samples, %d epochs", len(lab), cfg.epochs_phase1)
    for e in range(cfg.epochs_phase1):
        lr = lr_at(e, T_total, cfg)
        logs = {"labeled": _EpochLog()}
        order = rng.permutation(len(lab))
        for i in range(0, len(order), cfg.batch_size):
            items = [Item(lab[j], "labeled", (lab[j].mask, lab[j].exist))
                     for j in order[i:i + cfg.batch_size]]
            run_batch(items, lr, False, logs)
        history.append(logs["labeled"].row(e + 1, 1, "labeled", lr))
        log.info("epoch %d lr %.5f %s", e + 1, lr, _brief(history[-1]))

    if cfg.mode != "supervised":
        pseudo = pseudo_label_all(params, table, unl, cfg.loss) if cfg.uses_pseudo else {}
        if cfg.uses_pseudo:
            log.info("pseudo-labels for %d of %d unlabeled samples", len(pseudo), len(unl))
        n_unl = cfg.batch_size // 2
        n_lab = cfg.batch_size - n_unl
        unl_order, cursor = rng.permutation(len(unl)), 0
        for e in range(cfg.epochs_phase2):
            t = cfg.epochs_phase1 + e
            lr = lr_at(t, T_total, cfg)
            logs = {"labeled": _EpochLog(), "unlabeled": _EpochLog()}
            order = rng.permutation(len(lab))
            for i in range(0, len(order), n_lab):
                items = [Item(lab[j], "labeled", (lab[j].mask, lab[j].exist))
                         for j in order[i:i + n_lab]]
                for _ in range(n_unl):
                    if cursor == len(unl_order):
                        unl_order, cursor = rng.permutation(len(unl)), 0
                    s = unl[unl_order[cursor]]
                    cursor += 1
                    items.append(Item(s, "unlabeled", pseudo.get(s.id)))
                run_batch(items, lr, cfg.uses_ht, logs)
            for split in ("labeled", "unlabeled"):
                history.append(logs[split].row(t + 1, 2, split, lr))
            log.info("epoch %d lr %.5f %s", t + 1, lr, _brief(history[-2]))

    ckpt = Checkpoint(params, T_total, rng_state_words(rng), cfg)
    return TrainResult(ckpt, history)


def _brief(row):
    return " ".join(f"{k}={row[k]:.4f}" for k in ("l_seg", "l_lane", "l_ht", "lane_f1"))


def evaluate(ckpt: Checkpoint, dataset, cfg: TrainConfig | None = None):
    """Forward every sample (labels always used for scoring); returns
    ``(Metrics, mean_losses)``. Parameters are not modified."""
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    cfg = cfg or ckpt.config or TrainConfig()
    table = make_table(cfg)
    expected = model.param_shapes()
    for name, shape in expected.items():
        if name not in ckpt.params or ckpt.params[name].shape != tuple(shape):
            raise ConfigError(f"checkpoint tensor {name!r} missing or mis-shaped for this model")
    acc = MetricAccumulator()
    sums = {"l_seg": 0.0, "l_lane": 0.0, "l_ht": 0.0, "l_total": 0.0}
    for s in dataset.samples:
        out, _ = model.forward(ckpt.params, s.image, table)
        seg = losses.seg_loss(out.seg_probs, s.mask, cfg.loss)
        lane = losses.lane_loss(out.exist_p, s.exist, cfg.loss)
        ht = losses.ht_loss(out.seg_probs, out.exist_p, table, cfg.loss)
        b = losses.total_loss(seg, lane, ht, cfg.loss, "labeled")
        for k in sums:
            sums[k] += getattr(b, k)
        acc.add(out.seg_probs, out.exist_p, s.mask, s.exist)
    n = len(dataset)
    return acc.result(), {k: v / n for k, v in sums.items()}


def format_rows(rows):
    buf = io.StringIO()
    w = csv.DictWriter(buf, CSV_HEADER, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def write_metrics_csv(path, rows):
    Path(path).write_text(format_rows(rows))


def eval_row(epoch, metrics: Metrics, mean_losses, lr=0.0, split="eval"):
    return {"epoch": epoch, "phase": "eval", "split": split, **mean_losses,
            "lane_f1": metrics.lane_f1, "pixel_f1": metrics.pixel_f1,
            "exist_acc": metrics.exist_acc, "lr": lr}
