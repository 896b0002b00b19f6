"""Active-learning loop: budget discipline, reproducibility, mode semantics."""

import numpy as np
import pytest

from ralab import data, errors, learner, models
from ralab.learner import ExperimentConfig, TrainSettings
from ralab.util import read_csv, seeded

FAST_ATTACK = {"family": "pgd", "epsilon": 0.1, "alpha": 0.02, "iters": 4}
FAST_SQUARE = {"family": "square", "epsilon": 0.1, "iters": 20}


def blob_config(**kw):
    base = dict(
        seed=0,
        acquisition="random",
        mode="standard",
        budget=120,
        initial=40,
        per_stage=40,
        dataset={"kind": "blobs", "classes": 4, "per_class": 100, "dim": 16,
                 "spread": 0.08, "test_fraction": 0.3},
        model={"kind": "mlp", "hidden": [32], "dropout": 0.1},
        train=TrainSettings(epochs_per_stage=4, initial_epochs=4),
        train_attack=FAST_ATTACK,
        eval_pgd=FAST_ATTACK,
        eval_square=FAST_SQUARE,
    )
    base.update(kw)
    return ExperimentConfig(**base)


class TestTraining:
    def setup_method(self):
        self.ds = data.synth_blobs(3, 40, 8, 0.06, seed=0)
        self.spec = models.ModelSpec("mlp", (8,), classes=3, hidden=(16,), dropout=0.1, seed=0)

    def test_zero_epochs_keeps_parameters(self):
        m = models.build(self.spec)
        before = m.state()
        learner.train_standard(m, self.ds.images, self.ds.labels, 0, TrainSettings(), seeded(0, "t"))
        for k, v in m.state().items():
            np.testing.assert_array_equal(v, before[k])

    def test_memorizes_fifty_samples(self):
        m = models.build(self.spec)
        sub = self.ds.subset(np.arange(50))
        learner.train_standard(
            m, sub.images, sub.labels, 80, TrainSettings(lr=0.3), seeded(0, "t")
        )
        assert (m.predict_proba(sub.images).argmax(1) == sub.labels).mean() == 1.0

    def test_fixed_seed_identical_parameters(self):
        runs = []
        for _ in range(2):
            m = models.build(self.spec)
            learner.train_standard(
                m, self.ds.images, self.ds.labels, 3, TrainSettings(), seeded(5, "t")
            )
            runs.append(m.state())
        for k in runs[0]:
            np.testing.assert_array_equal(runs[0][k], runs[1][k])

    def test_empty_pool_rejected(self):
        m = models.build(self.spec)
        with pytest.raises(errors.EmptyPool):
            learner.train_standard(m, self.ds.images[:0], self.ds.labels[:0], 1,
                                   TrainSettings(), seeded(0, "t"))

    def test_epsilon_zero_adversarial_equals_standard(self):
        degenerate = {"family": "pgd", "epsilon": 0.0, "alpha": 0.01, "iters": 5}
        val, _ = data.split_val_test(self.ds.subset(np.arange(80, 120)), seed=1)
        m1 = models.build(self.spec)
        learner.train_standard(
            m1, self.ds.images[:60], self.ds.labels[:60], 4, TrainSettings(), seeded(2, "t"), val=val
        )
        m2 = models.build(self.spec)
        learner.train_adversarial(
            m2, self.ds.images[:60], self.ds.labels[:60], 4, TrainSettings(), degenerate,
            seeded(2, "t"), seeded(2, "a"), val=val
        )
        for k in m1.state():
            np.testing.assert_array_equal(m1.state()[k], m2.state()[k])

    def test_adversarial_training_runs(self):
        m = models.build(self.spec)
        learner.train_adversarial(
            m, self.ds.images[:40], self.ds.labels[:40], 2, TrainSettings(), FAST_ATTACK,
            seeded(3, "t"), seeded(3, "a")
        )


class TestStageArithmetic:
    def test_paper_scale_stage_counts(self):
        assert ExperimentConfig(seed=0, budget=5000, initial=200, per_stage=200).stage_count() == 24
        assert ExperimentConfig(seed=0, budget=6000, initial=200, per_stage=200).stage_count() == 29

    def test_desk_scale(self):
        assert ExperimentConfig(seed=0, budget=1000, initial=100, per_stage=100).stage_count() == 9

    def test_invalid_configs(self):
        with pytest.raises(errors.ConfigInvalid):
            ExperimentConfig(seed=0, budget=10, initial=20, per_stage=5).validate()
        with pytest.raises(errors.ConfigInvalid):
            ExperimentConfig(seed=0, acquisition="zzz").validate()
        with pytest.raises(errors.ConfigInvalid):
            ExperimentConfig(seed=0, mode="hybrid").validate()


class TestLoop:
    def test_budget_discipline_and_monotone_pool(self):
        records = learner.run_active_learning(blob_config())
        labeled = [r.labeled for r in records]
        assert labeled == sorted(labeled)
        assert labeled[-1] <= 120
        assert labeled == [40, 80, 120]
        assert all(0.0 <= r.accuracy <= 1.0 for r in records)

    def test_records_are_reproducible(self):
        a = learner.run_active_learning(blob_config(mode="robust"))
        b = learner.run_active_learning(blob_config(mode="robust"))
        assert [r.csv_row() for r in a] == [r.csv_row() for r in b]

    def test_stage_zero_shared_across_acquisitions(self):
        a = learner.run_active_learning(blob_config(acquisition="maxentropy"))[0]
        b = learner.run_active_learning(blob_config(acquisition="coreset"))[0]
        assert (a.labeled, a.accuracy, a.rob_pgd, a.rob_square) == (
            b.labeled, b.accuracy, b.rob_pgd, b.rob_square
        )

    def test_pool_exhaustion_ends_run(self):
        cfg = blob_config(
            dataset={"kind": "blobs", "classes": 3, "per_class": 40, "dim": 8,
                     "spread": 0.08, "test_fraction": 0.25},
            budget=200, initial=30, per_stage=40,
        )
        records = learner.run_active_learning(cfg)
        assert records[-1].labeled == 90  # dataset only has 90 train items
        assert len(records) < 1 + cfg.stage_count()

    def test_mode_isolation_stage_one_selection(self, tmp_path):
        # same seed: standard and robust pick the same stage-1 data
        sets = {}
        for mode in ("standard", "robust"):
            out = tmp_path / mode
            learner.run_active_learning(blob_config(mode=mode), out_dir=str(out))
            header, rows = read_csv(out / "scores" / "stage_001.csv")
            sel = header.index("selected")
            idx = header.index("index")
            sets[mode] = {r[idx] for r in rows if r[sel] == "1"}
        assert sets["standard"] == sets["robust"]

    def test_untrained_model_is_at_chance(self):
        accs = []
        for seed in range(3):
            cfg = blob_config(
                seed=seed,
                dataset={"kind": "synth-digits", "train_size": 300, "test_size": 400, "seed": 3},
                train=TrainSettings(epochs_per_stage=0, initial_epochs=0),
                budget=60, initial=30, per_stage=30,
                model={"kind": "mlp", "hidden": [32], "dropout": 0.1},
            )
            accs.append(learner.run_active_learning(cfg)[0].accuracy)
        assert abs(np.mean(accs) - 0.10) <= 0.03

    def test_outputs_written(self, tmp_path):
        out = tmp_path / "run"
        records = learner.run_active_learning(blob_config(), out_dir=str(out))
        header, rows = read_csv(out / "stages.csv")
        assert header == learner.STAGES_HEADER
        assert len(rows) == len(records)
        assert (out / "scores" / "stage_001.csv").exists()
        assert (out / "model" / "manifest.json").exists()

    def test_retrain_from_scratch_flag(self):
        cfg = blob_config(train=TrainSettings(epochs_per_stage=2, initial_epochs=2,
                                              retrain_from_scratch=True))
        records = learner.run_active_learning(cfg)
        assert len(records) == 3
