import json

import pytest

from crossmetric import config
from crossmetric.config import ConfigError, PipelineConfig


def test_defaults():
    cfg = PipelineConfig()
    for stage in (cfg.pretrain, cfg.finetune, cfg.metric):
        assert (stage.learning_rate, stage.weight_decay, stage.batch_size) == (0.001, 0.004, 64)
    assert (cfg.margins.lam, cfg.margins.alpha, cfg.margins.beta) == (1.0, 1.0, 1.0)
    assert not (cfg.skip_pretrain or cfg.use_intra_refine or cfg.baseline_only)


def test_round_trip(tmp_path):
    cfg = PipelineConfig(seed=7, skip_pretrain=True, pair_count=123)
    cfg.margins.lam = 2.5
    cfg.dataset.synthetic.classes = 4
    cfg.finetune.max_iterations = 11
    path = tmp_path / "c.json"
    config.save(path, cfg)
    assert config.load(path) == cfg


def test_lambda_spelled_out_on_disk():
    data = json.loads(config.dumps(PipelineConfig()))
    assert "lambda" in data["margins"] and "lam" not in data["margins"]
    cfg = config.loads('{"margins": {"lambda": 0.5}}')
    assert cfg.margins.lam == 0.5


@pytest.mark.parametrize("doc, match", [
    ('{"seeed": 1}', "unknown key 'seeed'"),
    ('{"pretrain": {"lr": 0.1}}', r"config\.pretrain: unknown key"),
    ('{"dataset": {"synthetic": {"classes": 1}}}', "at least 2 classes"),
    ('{"margins": {"alpha": -1}}', "margins"),
    ('{"finetune": {"batch_size": 0}}', "finetune"),
    ('{"output_activation": "tanh"}', "unknown activation"),
    ('{"pair_count": 1}', "pair_count"),
    ("{not json", "not valid JSON"),
])
def test_rejections(doc, match):
    with pytest.raises(ConfigError, match=match):
        config.loads(doc)
