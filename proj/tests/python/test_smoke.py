import json
import os

import numpy as np
import pytest

import mshubert


def test_layer_schedule_and_assignment():
    assert mshubert.layer_schedule(12, 3, 8) == [12, 10, 8]
    assert mshubert.assignment("desk") == "4:16, 3:8, 1:4; drop = 1"


def test_parameter_counts():
    sizes = [1000, 500, 250, 125, 50, 25]
    total = mshubert.count_parameters("paper_base", sizes)
    assert abs(total - 96.01e6) / 96.01e6 < 0.01
    assert sum(n for _, n in mshubert.parameter_table("paper_base", sizes)) == total
    with pytest.raises(mshubert.ValidationError):
        mshubert.count_parameters("huge")


def test_cca_and_pwcca():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((300, 5))
    assert np.allclose(mshubert.cca(x, x, 1e-12), 1.0, atol=1e-10)
    assert abs(mshubert.pwcca(x, x) - 1.0) < 1e-6
    m = rng.standard_normal((5, 5)) + 3 * np.eye(5)
    y = rng.standard_normal((300, 5)) + x[:, ::-1]
    assert np.allclose(mshubert.cca(x, y, 1e-10), mshubert.cca(x, y @ m, 1e-10), atol=1e-8)
    with pytest.raises(mshubert.DimensionError):
        mshubert.cca(x, x[:10])


def test_one_hot_auc_and_report():
    assert mshubert.one_hot([0, 1, 0], 2).tolist() == [[1, 0], [0, 1], [1, 0]]
    assert mshubert.layer_auc([0.42]) == 0.42
    report = {"checkpoint": "c", "target": "states", "scores": [0.2, 0.4], "auc": 0.3}
    mshubert.validate_report(json.dumps(report))
    report["auc"] = 0.9
    with pytest.raises(mshubert.ValidationError):
        mshubert.validate_report(json.dumps(report))


def test_swap_views():
    hm = np.arange(6.0).reshape(6, 1)
    hc = -hm
    om, oc = mshubert.swap_views(hm, hc, [1, 2])
    assert om[:, 0].tolist() == [0, -1, -2, 3, 4, 5]
    back_m, back_c = mshubert.swap_views(om, oc, [1, 2])
    assert np.array_equal(back_m, hm) and np.array_equal(back_c, hc)


def test_cli_pipeline(tmp_path):
    corpus = str(tmp_path / "corpus")
    code, out, err = mshubert.run_cli(["synth-data", "--out", corpus, "--utts", "8", "--seed", "4"])
    assert code == 0, err
    cfg = os.path.join(corpus, "run.cfg")
    assert mshubert.run_cli(["label", "--config", cfg])[0] == 0
    code, out, err = mshubert.run_cli(
        ["pretrain", "--config", cfg, "--set", "optimizer.total_steps=5", "--set", "data.batch_seconds=0.3"])
    assert code == 0, err
    labels = mshubert.read_label_file(os.path.join(corpus, "labels", "labels_0.txt"))
    assert len(labels) == 8
    assert mshubert.label_disagreement(labels, labels) == 0.0
    assert mshubert.run_cli(["pretrain", "--config", cfg, "--mode", "s_hubert"])[0] == 2
    assert mshubert.run_cli(["bogus"])[0] != 0
