"""Run configuration: a TOML file with sections mirroring the runtime knobs."""

from __future__ import annotations

import sys
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .compute import (
    AffineContraction,
    GaussianNoise,
    MiniBatchSGDClassifier,
    QuadraticGradientDescent,
)
from .protocol import RandomizedConfig, ToleranceSchedule, ValidationConfig

__all__ = ["ComputationConfig", "RunConfig", "load_config", "config_from_dict",
           "SCENARIOS"]

SCENARIOS = ("base", "coarse_compression", "large_frames", "custom")


@dataclass(frozen=True)
class ComputationConfig:
    kind: str
    dimension: int = 0
    spectrum: tuple = ()
    offset: tuple = ()
    curvature: tuple = ()
    rate: float = 0.1
    sigma: float = 1.0
    learning_rate: float = 0.08
    batch_size: int = 10
    n_train: int = 2000
    n_test: int = 500
    separation: float = 1.2
    noise: float = 1.0
    data_seed: int = 0
    hidden_units: int = 0
    dataset_path: str = ""

    def build(self):
        if self.kind == "affine_contraction":
            offset = np.array(self.offset) if self.offset else None
            return AffineContraction.from_spectrum(np.array(self.spectrum), offset=offset)
        if self.kind == "quadratic_descent":
            return QuadraticGradientDescent(curvature=np.array(self.curvature),
                                            rate=self.rate)
        if self.kind == "gaussian_noise":
            return GaussianNoise(dimension=self.dimension, sigma=self.sigma)
        if self.kind == "sgd_classifier":
            return MiniBatchSGDClassifier(
                learning_rate=self.learning_rate, batch_size=self.batch_size,
                n_train=self.n_train, n_test=self.n_test,
                separation=self.separation, noise=self.noise,
                data_seed=self.data_seed, hidden_units=self.hidden_units,
                dataset_path=self.dataset_path or None)
        raise ValueError(f"unknown computation kind {self.kind!r}")

    def with_batch_size(self, batch_size: int) -> "ComputationConfig":
        return replace(self, batch_size=batch_size)


@dataclass(frozen=True)
class RunConfig:
    computation: ComputationConfig
    iterations: int = 400
    seed: int = 0
    mode: str = "batch"
    scenario: str = "base"
    initial_state: tuple = ()

    schedule: str = "log"
    tolerance: float = 0.2
    verification_tolerance: Optional[float] = None
    quant_error: float = 1e-6
    coarse_quant_error: float = 0.1
    clamp_radius: float = 4.0
    frame_cap: int = 0  # 0 derives the cap from the scenario
    strict_soundness: bool = False

    endorsers: int = 5
    outlier_budget: float = 0.05
    covariance_max_eig: Optional[float] = None
    deterministic_endorsers: int = 1

    meta_bits: int = 256
    state_bound: float = 1000.0
    comp_bit_rate: float = 0.0

    period_cap: int = 50
    subsample_rule: str = "bound"

    recompute_rounds_cap: int = 8
    light_rounds_cap: int = 120
    max_refinement_level: int = 6

    tolerances: tuple = (0.025, 0.05, 0.1, 0.2, 0.4, 0.8, 1.6)
    n_seeds: int = 10
    baseline_batch_sizes: tuple = (10, 30, 50)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}")
        if self.subsample_rule not in ("bound", "ratio"):
            raise ValueError("subsample_rule must be 'bound' or 'ratio'")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")

    def scenario_frame_cap(self, scenario: Optional[str] = None) -> int:
        scenario = scenario or self.scenario
        if scenario == "large_frames":
            return max(1, round(0.20 * self.iterations))
        if scenario == "custom" and self.frame_cap > 0:
            return self.frame_cap
        return max(1, round(0.10 * self.iterations))

    def scenario_quant_error(self, tolerance: Optional[float] = None,
                             scenario: Optional[str] = None) -> float:
        """Quantizer error the scenario uses at one sweep point.

        The coarse-compression scenario keeps a fixed, deliberately large
        error so that it meets or exceeds the schedule scale over the
        stricter part of a sweep; the others stay below the scale.
        """
        scenario = scenario or self.scenario
        tolerance = self.tolerance if tolerance is None else tolerance
        if scenario == "coarse_compression":
            return max(self.quant_error, self.coarse_quant_error)
        if scenario == "custom":
            return self.quant_error
        return min(self.quant_error, tolerance)

    def validation_config(self, tolerance: Optional[float] = None,
                          scenario: Optional[str] = None) -> ValidationConfig:
        tolerance = self.tolerance if tolerance is None else tolerance
        sched = (ToleranceSchedule.log(tolerance) if self.schedule == "log"
                 else ToleranceSchedule.constant(tolerance))
        quant_error = self.scenario_quant_error(tolerance, scenario)
        ver = self.verification_tolerance
        if ver is None:
            ver = min(tolerance, max(2.1 * quant_error, tolerance / 2))
        op = self.computation.build()
        lip = op.lipschitz if op.lipschitz is not None else 1.0
        return ValidationConfig(
            tolerance=sched,
            verification_tolerance=ver,
            clamp_radius=max(self.clamp_radius, 1.05 * quant_error),
            quant_error=quant_error,
            frame_cap=self.scenario_frame_cap(scenario),
            lipschitz=lip,
            mode=self.mode,
            strict_soundness=self.strict_soundness,
        )

    def randomized_config(self, tolerance: Optional[float] = None) -> RandomizedConfig:
        tolerance = self.tolerance if tolerance is None else tolerance
        return RandomizedConfig(endorsers=self.endorsers,
                                outlier_budget=self.outlier_budget,
                                margin=tolerance,
                                covariance_max_eig=self.covariance_max_eig)

    def initial_state_vector(self, op) -> np.ndarray:
        if self.initial_state:
            x0 = np.array(self.initial_state, dtype=np.float64)
            if x0.shape != (op.dimension,):
                raise ValueError("initial_state length does not match the computation")
            return x0
        if hasattr(op, "default_initial_state"):
            return op.default_initial_state()
        return np.zeros(op.dimension)


def config_from_dict(data: dict) -> RunConfig:
    comp = data.get("computation")
    if not comp or "kind" not in comp:
        raise ValueError("config needs a [computation] section with a kind")
    known = set(ComputationConfig.__dataclass_fields__)
    extra = set(comp) - known
    if extra:
        raise ValueError(f"unknown computation keys: {sorted(extra)}")
    comp_cfg = ComputationConfig(**{k: tuple(v) if isinstance(v, list) else v
                                    for k, v in comp.items()})

    flat = {}
    for section in ("run", "validation", "randomized", "costs", "ledger",
                    "repair", "experiment"):
        flat.update(data.get(section, {}))
    known = set(RunConfig.__dataclass_fields__) - {"computation"}
    extra = set(flat) - known
    if extra:
        raise ValueError(f"unknown config keys: {sorted(extra)}")
    flat = {k: tuple(v) if isinstance(v, list) else v for k, v in flat.items()}
    return RunConfig(computation=comp_cfg, **flat)


def load_config(path) -> RunConfig:
    with open(path, "rb") as fh:
        return config_from_dict(tomllib.load(fh))
