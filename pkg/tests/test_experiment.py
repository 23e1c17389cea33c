import numpy as np
import pytest

from splitattack import experiment
from splitattack.config import RunConfig, preset


def test_window_means():
    assert experiment.window_means([1.0, 3.0, 5.0], window=2) == [2.0, 5.0]
    assert experiment.window_means([], window=5) == []


def test_metrics_roundtrip(tmp_path):
    experiment.write_metrics(tmp_path / "m.csv", [0.5, 0.25], [1.5])
    rows = experiment.read_metrics(tmp_path / "m.csv")
    assert rows == [{"round": "0", "task_loss": "0.5", "sim_loss": "1.5"},
                    {"round": "1", "task_loss": "0.25", "sim_loss": ""}]


def test_metrics_rejects_unknown_header(tmp_path):
    (tmp_path / "m.csv").write_text("round,task_loss\n0,1\n")
    with pytest.raises(ValueError):
        experiment.read_metrics(tmp_path / "m.csv")


def test_format_table_shape():
    summary = [{"value": 0.0, "accuracy_drop": 1.0}, {"value": 1.0, "accuracy_drop": None}]
    lines = experiment.format_table(summary, ["accuracy_drop"]).splitlines()
    assert len(lines) == 3 and "accuracy_drop" in lines[0] and lines[2].rstrip().endswith("-")


def test_data_is_seeded_and_disjoint_from_test():
    cfg = preset("tiny")
    a, b = experiment.build_data(cfg), experiment.build_data(cfg)
    assert np.array_equal(a.test.images, b.test.images)
    assert np.array_equal(a.pool.images, b.pool.images)
    train_keys = {r.tobytes() for s in a.shards for r in s.images.reshape(len(s), -1)}
    assert not train_keys & {r.tobytes() for r in a.test.images.reshape(len(a.test), -1)}


def test_evaluate_run_row_fields():
    row = experiment.evaluate_run(preset("tiny"))
    for key in ("clean_accuracy", "accuracy_drop", "random_noise_drop", "d_hat", "alignment_cos", "sign_fraction"):
        assert np.isfinite(row[key])


@pytest.mark.slow
def test_long_shadow_run_lowers_similarity_loss():
    cfg = RunConfig().replace(**{"training.rounds": 3000, "probes.enabled": False})
    result = experiment.train(cfg)
    sim = result.sim_losses
    assert len(sim) == 3000
    assert np.mean(sim[-100:]) < sim[0]
