import hashlib
import math
import struct

import numpy as np
import pytest

from htlane import losses, model, synth, trainer
from htlane.errors import ConfigError, DataError, FormatError
from htlane.losses import LossConfig
from htlane.trainer import Checkpoint, Item, TrainConfig

# sha256 of the checkpoint from supervised training on 16 samples for one
# epoch (seed 0); recorded once, then enforced
GOLDEN_DIGEST = "2b673298d340d03d3b76436ba942f6892aedc0666c7676902a07d820da121a80"


def _dataset(n, seed=0, frac=1.0):
    ds = synth.generate_dataset(n, seed)
    lab, _ = synth.split_dataset(n, frac, seed)
    lab = set(lab)
    for s in ds.samples:
        s.labeled = s.id in lab
    return ds


@pytest.fixture(scope="module")
def semi():
    return _dataset(12, seed=5, frac=0.5)


# --- schedule ------------------------------------------------------------------

def test_lr_examples():
    cfg = TrainConfig()
    assert trainer.lr_at(0, 36, cfg) == 1e-2
    assert trainer.lr_at(18, 36, cfg) == pytest.approx(5.359e-3, abs=1e-6)
    assert trainer.lr_at(18, 36, cfg) == 1e-2 * 0.5 ** 0.9
    assert trainer.lr_at(36, 36, cfg) == 0.0
    for t, T in ((37, 36), (-1, 36), (0, 0)):
        with pytest.raises(ConfigError):
            trainer.lr_at(t, T, cfg)


@pytest.mark.parametrize("kw", [dict(mode="semi"), dict(epochs_phase1=0), dict(batch_size=0),
                                dict(lr0=0.0), dict(hough="huge"), dict(momentum=1.0)])
def test_config_invariants(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_total_epochs():
    assert TrainConfig(mode="supervised").total_epochs == 12
    assert TrainConfig(mode="ht").total_epochs == 18


def test_paper_preset_cannot_train():
    with pytest.raises(ConfigError, match="paper"):
        trainer.make_table(TrainConfig(hough="paper"))


# --- checkpoints ---------------------------------------------------------------

def _ckpt():
    rng = np.random.Generator(np.random.PCG64(7))
    rng.random(3)
    return Checkpoint(model.init_params(2), 5, trainer.rng_state_words(rng), TrainConfig(seed=2))


def test_checkpoint_roundtrip(tmp_path):
    ck = _ckpt()
    path = tmp_path / "m.ckpt"
    trainer.save_checkpoint(path, ck)
    back = trainer.load_checkpoint(path)
    assert back == ck and back.config == ck.config
    assert trainer.checkpoint_bytes(back) == path.read_bytes()
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_layout():
    data = trainer.checkpoint_bytes(_ckpt())
    assert data[:4] == b"HTLN"
    assert struct.unpack("<II", data[4:12]) == (1, len(model.param_shapes()))
    (nlen,) = struct.unpack("<H", data[12:14])
    assert data[14:14 + nlen] == b"enc1.w"
    assert data[14 + nlen] == 4
    assert struct.unpack("<4I", data[15 + nlen:31 + nlen]) == (16, 1, 3, 3)
    assert struct.unpack("<I", data[-36:-32]) == (5,)


def test_rng_state_resumes_stream():
    rng = np.random.Generator(np.random.PCG64(99))
    rng.random(5)
    clone = trainer.rng_from_words(trainer.rng_state_words(rng))
    assert np.array_equal(rng.random(10), clone.random(10))


@pytest.mark.parametrize("mutate, msg", [
    (lambda d: d[:-1], "truncated"),
    (lambda d: d + b"\0", "trailing"),
    (lambda d: b"XXXX" + d[4:], "magic"),
    (lambda d: d[:4] + struct.pack("<I", 2) + d[8:], "version"),
])
def test_checkpoint_corruption(mutate, msg):
    data = trainer.checkpoint_bytes(_ckpt())
    with pytest.raises(FormatError, match=msg):
        trainer.parse_checkpoint(mutate(data))


# --- training ------------------------------------------------------------------

def _digest(ckpt):
    return hashlib.sha256(trainer.checkpoint_bytes(ckpt)).hexdigest()


def test_golden_checkpoint_digest():
    cfg = TrainConfig(epochs_phase1=1, seed=0)
    result = trainer.train(_dataset(16), cfg)
    assert _digest(result.checkpoint) == GOLDEN_DIGEST


def test_training_is_deterministic(semi):
    cfg = TrainConfig(mode="pseudo_ht", epochs_phase1=1, epochs_phase2=1, batch_size=4,
                      loss=LossConfig(pseudo_threshold=0.4, tau=0.4))
    a = trainer.train(semi, cfg)
    b = trainer.train(semi, cfg)
    assert _digest(a.checkpoint) == _digest(b.checkpoint)
    assert trainer.format_rows(a.history) == trainer.format_rows(b.history)


def test_thread_count_does_not_change_result(semi, monkeypatch):
    cfg = TrainConfig(mode="ht", epochs_phase1=1, epochs_phase2=1, batch_size=4,
                      loss=LossConfig(tau=0.4))
    one = trainer.train(semi, cfg)
    monkeypatch.setenv("HTLANE_THREADS", "3")
    three = trainer.train(semi, cfg)
    assert _digest(one.checkpoint) == _digest(three.checkpoint)


def test_beta_zero_matches_silent_unlabeled(semi):
    # ht with beta=0 against a run whose unlabeled samples never get a
    # pseudo-label: same batches, no unlabeled contribution
    ht = TrainConfig(mode="ht", epochs_phase1=1, epochs_phase2=2, batch_size=4,
                     loss=LossConfig(beta=0.0, tau=0.01))
    silent = TrainConfig(mode="pseudo", epochs_phase1=1, epochs_phase2=2, batch_size=4,
                         loss=LossConfig(pseudo_threshold=1 - 1e-12))
    a = trainer.train(semi, ht).checkpoint
    b = trainer.train(semi, silent).checkpoint
    assert a == b


def test_gate_closed_batch_equals_labeled_only(semi):
    lab = [s for s in semi.samples if s.labeled][:2]
    unl = [s for s in semi.samples if not s.labeled][:2]
    cfg = TrainConfig(mode="ht")
    table = trainer.make_table(cfg)
    items = [Item(s, "labeled", (s.mask, s.exist)) for s in lab] + [Item(s, "unlabeled") for s in unl]
    p0 = model.init_params(3)
    for s in unl:
        assert np.all(model.forward(p0, s.image, table)[0].exist_p <= cfg.loss.tau)
    with_ht = {k: v.copy() for k, v in p0.items()}
    without = {k: v.copy() for k, v in p0.items()}
    trainer.batch_step(with_ht, table, items, cfg, 0.01, True)
    trainer.batch_step(without, table, items, cfg, 0.01, False)
    assert all(with_ht[k].tobytes() == without[k].tobytes() for k in p0)
    assert any(with_ht[k].tobytes() != p0[k].tobytes() for k in p0)


def test_gate_open_changes_update(semi):
    lab = [s for s in semi.samples if s.labeled][:1]
    unl = [s for s in semi.samples if not s.labeled][:1]
    cfg = TrainConfig(mode="ht", loss=LossConfig(tau=0.4, beta=1.0))
    table = trainer.make_table(cfg)
    items = [Item(lab[0], "labeled", (lab[0].mask, lab[0].exist)), Item(unl[0], "unlabeled")]
    p0 = model.init_params(3)
    a = {k: v.copy() for k, v in p0.items()}
    b = {k: v.copy() for k, v in p0.items()}
    res = trainer.batch_step(a, table, items, cfg, 0.01, True)
    trainer.batch_step(b, table, items, cfg, 0.01, False)
    assert res[1][1].l_ht > 0
    assert any(a[k].tobytes() != b[k].tobytes() for k in p0)


def test_phase1_loss_decreases_and_schedule_recorded():
    cfg = TrainConfig(epochs_phase1=4, seed=1)
    result = trainer.train(_dataset(64, seed=2), cfg)
    rows = result.history
    assert [r["epoch"] for r in rows] == [1, 2, 3, 4]
    assert all(math.isfinite(r["l_total"]) for r in rows)
    assert rows[-1]["l_total"] < rows[0]["l_total"]
    assert [r["lr"] for r in rows] == [trainer.lr_at(t, 4, cfg) for t in range(4)]


def test_history_rows_per_split(semi):
    cfg = TrainConfig(mode="ht", epochs_phase1=2, epochs_phase2=2, batch_size=4)
    rows = trainer.train(semi, cfg).history
    assert [(r["epoch"], r["phase"], r["split"]) for r in rows] == [
        (1, 1, "labeled"), (2, 1, "labeled"), (3, 2, "labeled"), (3, 2, "unlabeled"),
        (4, 2, "labeled"), (4, 2, "unlabeled")]
    assert [r["lr"] for r in rows] == [trainer.lr_at(t, 4, cfg) for t in (0, 1, 2, 2, 3, 3)]
    text = trainer.format_rows(rows)
    assert text.splitlines()[0] == ",".join(trainer.CSV_HEADER)
    assert len(text.splitlines()) == 7


def test_train_errors(semi):
    unl_only = synth.Dataset([s for s in semi.samples if not s.labeled])
    with pytest.raises(DataError, match="labeled"):
        trainer.train(unl_only, TrainConfig())
    lab_only = synth.Dataset([s for s in semi.samples if s.labeled])
    with pytest.raises(DataError, match="ht mode requires unlabeled data"):
        trainer.train(lab_only, TrainConfig(mode="ht"))


def test_non_finite_loss_aborts_with_batch_id(semi, monkeypatch):
    real = losses.seg_loss
    calls = {"n": 0}

    def poisoned(probs, target, cfg=LossConfig()):
        calls["n"] += 1
        loss, g = real(probs, target, cfg)
        # 6 labeled samples in batches of 4 and 2: call 7 opens global batch 2
        return (float("nan") if calls["n"] > 6 else loss), g

    monkeypatch.setattr(losses, "seg_loss", poisoned)
    with pytest.raises(trainer.TrainingError, match="batch 2 "):
        trainer.train(semi, TrainConfig(epochs_phase1=2, batch_size=4))


# --- evaluation ----------------------------------------------------------------

def test_evaluate_repeatable_and_pure(semi):
    ck = trainer.train(semi, TrainConfig(epochs_phase1=1, batch_size=4)).checkpoint
    before = trainer.checkpoint_bytes(ck)
    m1, l1 = trainer.evaluate(ck, semi)
    m2, l2 = trainer.evaluate(ck, semi)
    assert m1 == m2 and l1 == l2
    assert trainer.checkpoint_bytes(ck) == before


def test_evaluate_perfect_oracle(semi, monkeypatch):
    by_image = {s.image.tobytes(): s for s in semi.samples}

    def oracle(params, image, table):
        s = by_image[image.tobytes()]
        probs = np.stack([(s.mask == c).astype(np.float32) for c in range(5)])
        return model.ModelOutput(probs, probs, s.exist.astype(np.float32), None), None

    monkeypatch.setattr(model, "forward", oracle)
    metrics, _ = trainer.evaluate(_ckpt(), semi, TrainConfig())
    assert metrics.lane_f1 == 1.0 and metrics.pixel_f1 == 1.0 and metrics.exist_acc == 1.0


def test_evaluate_errors(semi):
    with pytest.raises(DataError, match="empty"):
        trainer.evaluate(_ckpt(), synth.Dataset([]))
    ck = _ckpt()
    del ck.params["head.w"]
    with pytest.raises(ConfigError, match="head.w"):
        trainer.evaluate(ck, semi)
