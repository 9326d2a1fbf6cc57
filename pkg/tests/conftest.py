import pytest

from calign.harness import DataConfig, ExperimentConfig, OptimConfig, train
from calign.loss import CalConfig
from calign.model import ModelConfig


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(vocab_size=120, d_model=16, n_layers=1, n_heads=2,
                max_seq_len=32, prefix_len=4, feature_dim=26)
    base.update(overrides)
    return ModelConfig(**base)


def small_experiment(**overrides) -> ExperimentConfig:
    cfg = ExperimentConfig(
        model=ModelConfig(d_model=32, n_layers=1, n_heads=2,
                          prefix_len=4, feature_dim=26),
        cal=CalConfig(),
        data=DataConfig(corpus_size=128, eval_size=64),
        optim=OptimConfig(steps=40, batch_size=8, seed=0, eval_every=20),
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


@pytest.fixture(scope="session")
def trained_small():
    """A small model trained long enough to condition on the prefix."""
    cfg = ExperimentConfig(
        model=ModelConfig(d_model=32, n_layers=1, n_heads=2,
                          prefix_len=4, feature_dim=26),
        cal=CalConfig(enabled=False),
        data=DataConfig(corpus_size=400, eval_size=120),
        optim=OptimConfig(steps=250, batch_size=16, seed=0, eval_every=250),
    )
    params, records = train(cfg)
    return cfg, params, records
