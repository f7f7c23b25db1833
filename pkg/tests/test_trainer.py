import numpy as np
import pytest

from mafrec.config import TrainConfig
from mafrec.data import leave_one_out
from mafrec.model import init_params
from mafrec.synthetic import SynthSpec, generate
from mafrec.trainer import (CheckpointError, checkpoint_bytes, evaluate_checkpoint, grid_points,
                            grid_search, load_checkpoint, parse_checkpoint, save_checkpoint, train,
                            validation_recall)

from helpers import make_corpus

SMALL = TrainConfig(n=6, d=16, d_prime=8, blocks=1, heads=2, epochs=2, batch_size=16)


def small_data(seed=0, users=12, items=10):
    rng = np.random.default_rng(seed)
    seqs = {f"u{k:02d}": list(rng.integers(1, items + 1, size=int(rng.integers(4, 9)))) for k in range(users)}
    c = make_corpus(seqs, items)
    return c, leave_one_out(c.log)


def test_zero_learning_rate_changes_nothing():
    c, split = small_data()
    cfg = SMALL.replace(lr=0.0, epochs=1, batch_size=1000)
    result = train(cfg, c, split)
    init = init_params(cfg, c.num_items, c.dims, np.random.default_rng(cfg.seed))
    assert all(np.array_equal(result.final.params[k], init[k]) for k in init)
    assert result.log[0].val_recall10 == validation_recall(init, cfg, c, split)


def test_overfits_small_corpus():
    rng = np.random.default_rng(0)
    firsts = rng.permutation(12)[:8] + 1
    # distinct first items, so no two training windows share a history
    seqs = {f"u{k}": [int(firsts[k])] + list(rng.integers(1, 13, size=9)) for k in range(8)}
    c = make_corpus(seqs, 12)
    cfg = TrainConfig(n=10, d=32, d_prime=16, blocks=1, heads=2, epochs=300, dropout=0.0, lam=0.0, lr=3e-3)
    result = train(cfg, c, leave_one_out(c.log))
    assert result.log[-1].loss_id < 0.05


def test_identical_seeds_give_identical_checkpoints(tmp_path):
    c, split = small_data()
    a = train(SMALL, c, split, out_dir=tmp_path / "a")
    b = train(SMALL, c, split, out_dir=tmp_path / "b")
    assert checkpoint_bytes(a.final) == checkpoint_bytes(b.final)
    for name in ("best.ckpt", "final.ckpt", "train_log.tsv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    other = train(SMALL.replace(seed=1), c, split)
    assert checkpoint_bytes(other.final) != checkpoint_bytes(a.final)


def test_log_has_one_line_per_epoch(tmp_path):
    c, split = small_data()
    result = train(SMALL.replace(epochs=3), c, split, out_dir=tmp_path)
    lines = (tmp_path / "train_log.tsv").read_text().splitlines()
    assert len(lines) == 3 == len(result.log)
    assert [int(l.split("\t")[0]) for l in lines] == [1, 2, 3]
    assert result.best.best_metric == max(e.val_recall10 for e in result.log)


def test_resume_continues_the_same_trajectory():
    c, split = small_data()
    full = train(SMALL.replace(epochs=4), c, split)
    half = train(SMALL.replace(epochs=2), c, split)
    rest = train(SMALL.replace(epochs=2), c, split, resume=half.final)
    assert rest.final.epoch == 4
    assert all(np.array_equal(full.final.params[k], rest.final.params[k]) for k in full.final.params)


def test_checkpoint_round_trip_bytes(tmp_path):
    c, split = small_data()
    ckpt = train(SMALL, c, split).final
    save_checkpoint(ckpt, tmp_path / "a.ckpt")
    save_checkpoint(load_checkpoint(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_truncated_or_corrupt_checkpoint(tmp_path):
    c, split = small_data()
    blob = checkpoint_bytes(train(SMALL, c, split).final)
    for bad in (blob[:-1], blob[: len(blob) // 2], blob[:5], b"garbage"):
        with pytest.raises(CheckpointError):
            parse_checkpoint(bad)
    flipped = bytearray(blob)
    flipped[100] ^= 1
    with pytest.raises(CheckpointError, match="digest"):
        parse_checkpoint(bytes(flipped))


def test_loaded_checkpoint_reproduces_recall(tmp_path):
    c, split = small_data()
    ckpt = train(SMALL, c, split).best
    before = evaluate_checkpoint(ckpt, c, split)
    save_checkpoint(ckpt, tmp_path / "m.ckpt")
    after = evaluate_checkpoint(load_checkpoint(tmp_path / "m.ckpt"), c, split)
    assert after.recall == before.recall and after.ndcg == before.ndcg


def test_grid_single_point():
    c, split = small_data()
    result = grid_search(SMALL, {"fusion": ["gate"]}, c, split)
    assert result.best_config == SMALL.replace(fusion="gate")
    assert len(result.rows) == 1


def test_grid_rejects_capacity_zero_point():
    sc = generate(SynthSpec(num_items=20, num_users=60))
    c = sc.to_corpus()
    split = leave_one_out(c.log)
    base = TrainConfig(d=16, d_prime=8, heads=2, blocks=1, epochs=10, lr=1e-2)
    points = [{"d_prime": 1, "lam": 1e4}, {"d_prime": 8, "lam": 10.0}]
    result = grid_search(base, points, c, split)
    assert result.best_config == base.replace(d_prime=8, lam=10.0)
    assert len(result.rows) == 2
    lines = result.lines()
    assert lines[0].split("\t") == ["d_prime", "lam", "val_recall10"]
    assert len(lines) == 3


def test_grid_points_product():
    pts = grid_points({"lam": [0, 10], "fusion": ["sum", "gate"]})
    assert pts == [{"lam": 0, "fusion": "sum"}, {"lam": 0, "fusion": "gate"},
                   {"lam": 10, "fusion": "sum"}, {"lam": 10, "fusion": "gate"}]
    with pytest.raises(ValueError):
        grid_points({"lam": []})
