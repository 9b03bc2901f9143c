"""One seed of the source-only vs. adapted comparison.

A single pretrained detector is shared by every arm; each arm then runs the
adaptation phase with its own loss switches and is scored on the held-out
target test split.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

from .config import RunConfig
from .domains import make_domains
from .evaluation import error_analysis, evaluate, per_class_a_distance
from .trainer import adapt, pretrain, state_from_tensors, state_to_tensors

ARMS = {
    "source_only": dict(lambda1=0.0, lambda2=0.0),
    "full": {},
    "no_psa": dict(lambda2=0.0),
    "3dc": dict(use_attention=False),
}


@dataclass
class ArmResult:
    name: str
    mAP: float
    ap: dict
    correct: float
    d_a: dict
    d_a_pooled: float
    seconds: float


def seeded(config: RunConfig, seed: int) -> RunConfig:
    """The same configuration with both the data and the training seed set to ``seed``."""
    return dataclasses.replace(
        config,
        data=dataclasses.replace(config.data, seed=seed),
        train=dataclasses.replace(config.train, seed=seed),
    )


def build_domains(config: RunConfig):
    d = config.data
    return make_domains(d.seed, config.scene, config.shift, d.n_source, d.n_target, d.n_test)


def score(name: str, model, domains, seconds: float) -> ArmResult:
    test = domains["target_test"]
    report, detections = evaluate(model, test)
    profile = error_analysis(detections, [s.annotations for s in test], model.config.num_classes)
    d_a, pooled = per_class_a_distance(model, domains["source_train"], test)
    return ArmResult(name, report.mAP, report.ap, profile.correct, d_a, pooled, seconds)


def run_comparison(config: RunConfig, seed: int, arms=None) -> dict[str, ArmResult]:
    """Pretrain once, adapt each arm from the same weights, score every arm.

    ``seconds`` on each result covers data generation, pretraining, that arm's
    adaptation and its evaluation, i.e. one complete pipeline.
    """
    arms = ARMS if arms is None else arms
    config = seeded(config, seed)
    t0 = time.perf_counter()
    domains = build_domains(config)
    pre = pretrain(config, domains["source_train"], n_target=len(domains["target_train"]))
    snapshot = state_to_tensors(pre)
    shared = time.perf_counter() - t0
    results = {}
    for name, changes in arms.items():
        t1 = time.perf_counter()
        arm_config = config.with_train(**changes)
        state = adapt(arm_config, state_from_tensors(snapshot, arm_config),
                      domains["source_train"], domains["target_train"])
        results[name] = score(name, state.model, domains, shared + time.perf_counter() - t1)
    return results
