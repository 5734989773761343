"""Dynamic Parameter Memory for long spoken dialogues."""

import json

from . import _core
from ._core import (
    CheckpointError,
    DialogueSample,
    Model as _Model,
    Vocabulary,
    WindowExceeded,
    WindowViolation,
    cost_counter,
    inference_stream,
    load_model,
    metrics,
    one_shot_infer,
    read_corpus,
    run_cli,
    window_check,
)

__all__ = [
    "CheckpointError",
    "DialogueSample",
    "Model",
    "Vocabulary",
    "WindowExceeded",
    "WindowViolation",
    "ablation_preset",
    "context_preset",
    "cost_counter",
    "default_dpm_config",
    "default_generator_config",
    "dpm_infer",
    "generate_corpus",
    "inference_stream",
    "load_model",
    "metrics",
    "one_shot_infer",
    "read_corpus",
    "run_cli",
    "run_complexity_bench",
    "window_check",
]


def _merged(defaults, overrides):
    cfg = json.loads(defaults)
    cfg.update(overrides or {})
    return json.dumps(cfg)


def default_generator_config():
    return json.loads(_core._default_generator_config())


def default_dpm_config():
    return json.loads(_core._default_dpm_config())


def generate_corpus(config=None, **overrides):
    cfg = dict(config or {})
    cfg.update(overrides)
    return _core._generate_corpus(_merged(_core._default_generator_config(), cfg))


def Model(config):
    return _Model(json.dumps(config))


def model_config(model):
    return json.loads(model._config())


def dpm_infer(model, dialogue, config=None, **overrides):
    cfg = dict(config or {})
    cfg.update(overrides)
    return _core._dpm_infer(model, dialogue, _merged(_core._default_dpm_config(), cfg))


def run_complexity_bench(**config):
    return json.loads(_core._run_complexity_bench(json.dumps(config)))


def ablation_preset():
    return json.loads(_core._ablation_preset())


def context_preset():
    return json.loads(_core._context_preset())
