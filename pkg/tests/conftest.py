import dataclasses
import functools

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from toss import synthetic
from toss.config import PipelineConfig
from toss.pipeline import evaluate_run, run_sequence

settings.register_profile("toss", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("toss")


@functools.lru_cache(maxsize=None)
def scene_sequence(name: str, **kwargs):
    return synthetic.generate(synthetic.scene(name, **kwargs))


@functools.lru_cache(maxsize=None)
def scene_run(name: str, refine: bool = True, mode: str = "online", associator: str | None = None):
    """Pipeline result and evaluation for a canonical scene, shared across test modules."""
    seq = scene_sequence(name)
    cfg = PipelineConfig().with_overrides(refine=refine, associator=associator)
    cfg = dataclasses.replace(cfg, refine=dataclasses.replace(cfg.refine, mode=mode))
    res = run_sequence(seq, cfg)
    return seq, res, evaluate_run(res, seq)


def point_errors(res, seq):
    """(false-dynamic, false-static) point counts against generator truth."""
    fp = fn = 0
    for lab, gt in zip(res.labels, seq.labels):
        dyn = (gt & 0xFFFF) >= 251
        fp += int(((lab == 2) & ~dyn).sum())
        fn += int(((lab == 1) & dyn).sum())
    return fp, fn


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
