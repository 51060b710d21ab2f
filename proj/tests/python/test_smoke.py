import json
import math

import pytest
import torch

import blto


def test_infonce_uniform_logits():
    # Identical rows: every logit ties, so the loss is log(2B - 1).
    v = torch.ones(3, 4)
    assert blto.infonce_loss(v, v, 0.5).item() == pytest.approx(math.log(5), abs=1e-5)


def test_simsiam_minimum():
    x = torch.randn(6, 8, dtype=torch.float64)
    assert blto.simsiam_loss(x, x, x, x).item() == pytest.approx(-2.0, abs=1e-9)


def test_alignment_and_uniformity():
    u = torch.nn.functional.normalize(torch.randn(10, 5, dtype=torch.float64), dim=1)
    assert blto.alignment_loss(u, u).item() == pytest.approx(0.0, abs=1e-12)
    assert blto.uniformity_loss(u).item() < 0.0


def test_knn_picks_nearest_class():
    memory = torch.eye(4, dtype=torch.float32)
    labels = torch.tensor([0, 1, 2, 3])
    query = torch.tensor([[0.1, 0.9, 0.0, 0.0]])
    assert blto.knn_predict(memory, labels, query, 4, k=1).tolist() == [1]


def test_projection_bound():
    x = torch.rand(2, 3, 8, 8)
    y = blto.project_linf(x, x + torch.randn_like(x), 8 / 255)
    assert (y - x).abs().max().item() <= 8 / 255 + 1e-6
    assert y.min().item() >= 0.0 and y.max().item() <= 1.0


def test_synthetic_set_on_grid():
    images, labels = blto.make_synthetic_set(3, 4, 16, 1)
    assert images.shape == (12, 3, 16, 16)
    assert torch.equal(blto.quantize_8bit(images), images)
    assert sorted(set(labels.tolist())) == [0, 1, 2]


def test_config_errors_and_hash():
    with pytest.raises(blto.ConfigError):
        blto.Config.from_json(json.dumps({"bogus": 1})).validate()
    a = blto.Config.from_json(json.dumps({"seed": 3}))
    assert len(a.hash()) == 40
    assert blto.config_dict(a)["seed"] == 3


def test_pipeline_end_to_end(tmp_path):
    doc = {
        "output_dir": str(tmp_path),
        "dataset": {"num_classes": 4, "per_class": 8, "test_per_class": 4, "image_size": 16},
        "attack": {
            "target_class": 1,
            "poisoning_rate": 0.125,
            "blto": {"N": 2, "K": 1, "J": 1, "batch_size": 8, "embed_dim": 8,
                     "generator": {"base_channels": 2, "residual_blocks": 0}},
        },
        "victim": {"embed_dim": 8, "epochs": 1, "batch_size": 8},
        "evaluation": {"knn_k": 5, "triggered_train_count": 8},
    }
    cfg = blto.Config.from_json(json.dumps(doc))
    cfg.validate()
    exp = blto.Experiment(cfg)
    dirs = exp.pretrain()
    assert len(dirs) == 1
    result = blto.evaluate(exp, 0)
    assert result["matches_ledger"] is True
    runs, missing, files = blto.write_report([str(tmp_path)], str(tmp_path / "report"))
    assert len(runs) == 1 and missing == [] and files
