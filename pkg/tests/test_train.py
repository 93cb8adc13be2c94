"""Training loop determinism, resume, checkpoints, and evaluation paths."""

import numpy as np
import pytest

from modecast.checkpoint import load_checkpoint
from modecast.config import RunConfig
from modecast.data import Dataset, generate_dataset
from modecast.scenario import GenConfig
from modecast.train import (Trainer, cv_report, ensemble_evaluate, evaluate,
                            format_epoch_line, load_model, spawn_rngs)

GEN = GenConfig(min_lanes=4, max_lanes=4, min_agents=2, max_agents=3,
                history_steps=8, future_steps=10)


def run_config(seed=0, epochs=4, lr=0.01, dropout=0.0, use_aux=True):
    return RunConfig.from_dict({
        "model": {"dim": 16, "num_heads": 2, "modes": 3, "future_steps": 10,
                  "query_steps": 5, "agent_depth": 1, "fusion_depth": 1,
                  "state_attn_depth": 1, "state_scan_depth": 1, "mode_depth": 1,
                  "grid_attn_depth": 1, "grid_scan_depth": 1, "state_dim": 4,
                  "dropout": dropout},
        "train": {"lr": lr, "epochs": epochs,
                  "warmup_epochs": min(2, epochs), "batch_size": 4,
                  "seed": seed, "use_aux": use_aux},
    })


@pytest.fixture(scope="module")
def datasets(tmp_path_factory):
    root = tmp_path_factory.mktemp("trainds")
    manifest = generate_dataset(str(root), 10, seed=21, config=GEN)
    return (Dataset.from_manifest(manifest, "train"),
            Dataset.from_manifest(manifest, "val"))


class TestRngs:
    def test_streams_differ_and_reproduce(self):
        a1, b1, c1 = spawn_rngs(3)
        a2, b2, c2 = spawn_rngs(3)
        assert a1.uniform() == a2.uniform()
        assert b1.uniform() == b2.uniform()
        draws = {np.random.default_rng(s).uniform()
                 for s in [None]} | {a2.uniform(), b2.uniform(), c1.uniform()}
        assert len(draws) == 4


class TestTraining:
    def test_loss_moves_and_logs_format(self, datasets, tmp_path):
        train_ds, val_ds = datasets
        trainer = Trainer(run_config(), train_ds, val_ds, str(tmp_path / "run"))
        result = trainer.train()
        assert result.epochs_run == 4
        losses = []
        for line in result.log_lines:
            parts = line.split()
            assert parts[0] == "epoch" and parts[2] == "lr"
            losses.append(float(parts[5]))
        assert min(losses[1:]) < losses[0]

    def test_same_seed_identical_logs(self, datasets, tmp_path):
        train_ds, val_ds = datasets
        a = Trainer(run_config(seed=1, epochs=2, dropout=0.1), train_ds, val_ds,
                    str(tmp_path / "a")).train()
        b = Trainer(run_config(seed=1, epochs=2, dropout=0.1), train_ds, val_ds,
                    str(tmp_path / "b")).train()
        assert a.log_lines == b.log_lines

    def test_different_seed_differs(self, datasets, tmp_path):
        train_ds, val_ds = datasets
        a = Trainer(run_config(seed=1, epochs=1), train_ds, val_ds,
                    str(tmp_path / "a")).train()
        b = Trainer(run_config(seed=2, epochs=1), train_ds, val_ds,
                    str(tmp_path / "b")).train()
        assert a.log_lines != b.log_lines

    def test_lr_zero_leaves_params_unchanged(self, datasets, tmp_path):
        train_ds, val_ds = datasets
        trainer = Trainer(run_config(lr=0.0, epochs=1), train_ds, val_ds,
                          str(tmp_path / "run"))
        before = {k: v.copy() for k, v in trainer.model.state_dict().items()}
        trainer.train()
        after = trainer.model.state_dict()
        assert all(np.array_equal(before[k], after[k]) for k in before)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_abort_names_batch(self, datasets, tmp_path):
        # Poisoning a weight with inf makes numpy warn before the abort fires.
        train_ds, val_ds = datasets
        trainer = Trainer(run_config(), train_ds, val_ds, str(tmp_path / "run"))
        first = trainer.opt.params[0]
        first.data[...] = np.inf
        with pytest.raises(FloatingPointError, match="epoch 1 batch 0"):
            trainer.train()

    def test_resume_continues_exact_trajectory(self, datasets, tmp_path):
        train_ds, val_ds = datasets
        cfg = run_config(seed=3, epochs=4, dropout=0.1)
        full = Trainer(cfg, train_ds, val_ds, str(tmp_path / "full")).train()

        part = Trainer(run_config(seed=3, epochs=4, dropout=0.1), train_ds,
                       val_ds, str(tmp_path / "part"))
        part.train(until_epoch=2)
        resumed = Trainer(run_config(seed=3, epochs=4, dropout=0.1), train_ds,
                          val_ds, str(tmp_path / "part2"))
        resumed.resume(part.last_path)
        assert resumed.start_epoch == 3
        tail = resumed.train()
        assert tail.log_lines == full.log_lines[2:]


class TestCheckpoints:
    def test_checkpoint_eval_round_trip(self, datasets, tmp_path):
        train_ds, val_ds = datasets
        trainer = Trainer(run_config(epochs=2), train_ds, val_ds,
                          str(tmp_path / "run"))
        result = trainer.train()
        direct = evaluate(trainer.model, val_ds, ks=(1, 3), split="val")
        reloaded = evaluate(load_model(result.last_path), val_ds, ks=(1, 3),
                            split="val")
        assert direct.rows == reloaded.rows

    def test_best_checkpoint_tracks_best_val(self, datasets, tmp_path):
        train_ds, val_ds = datasets
        result = Trainer(run_config(epochs=3), train_ds, val_ds,
                         str(tmp_path / "run")).train()
        logged = [float(line.split()[7]) for line in result.log_lines]
        _, meta = load_checkpoint(result.best_path)
        # Log lines round to 6 decimals; the checkpoint keeps full precision.
        assert meta["val_minade6"] == pytest.approx(min(logged), abs=1e-6)
        assert result.best_val == pytest.approx(min(logged), abs=1e-6)


class TestEvaluation:
    def test_cv_report_finite(self, datasets):
        _, val_ds = datasets
        report = cv_report(val_ds, split="val")
        assert np.isfinite(report.get("min_ade", 1))
        assert np.isfinite(report.get("min_fde", 1))

    def test_ensemble_evaluate_runs(self, datasets, tmp_path):
        train_ds, val_ds = datasets
        models = []
        for seed in (5, 6):
            t = Trainer(run_config(seed=seed, epochs=1), train_ds, val_ds,
                        str(tmp_path / f"m{seed}"))
            t.train()
            models.append(t.model)
        report = ensemble_evaluate(models, val_ds, ks=(1, 3), split="val",
                                   n_clusters=3, seed=9)
        assert np.isfinite(report.get("min_ade", 3))
        again = ensemble_evaluate(models, val_ds, ks=(1, 3), split="val",
                                  n_clusters=3, seed=9)
        assert report.rows == again.rows

    def test_epoch_line_format_stable(self):
        line = format_epoch_line(7, 0.0015, 1.25, 0.5, 1.0)
        assert line == ("epoch 007 lr 0.00150000 loss 1.250000 "
                        "val_minade6 0.500000 val_minfde6 1.000000")
