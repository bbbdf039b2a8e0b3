import json
import logging
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import yaml

logger = logging.getLogger(__name__)

STAGES = ("exact", "mc", "bounds", "stein", "divergence")
OUTPUT_DIR_ENV = "TD_LSYS_OUTPUT_DIR"
FLOAT_FORMAT = "%.17g"


@dataclass
class RandomMdpSpec:
    n_states: int
    n_actions: int
    gamma: float
    seed: int
    reward_scale: float = 1.0
    concentration: float = 1.0
    max_attempts: int = 100

    def __post_init__(self):
        if self.n_states < 1 or self.n_actions < 1:
            raise ValueError(f"n_states and n_actions must be positive, got {self.n_states}, {self.n_actions}")
        if not 0.0 < self.reward_scale <= 1.0:
            raise ValueError(f"reward_scale must lie in (0, 1], got {self.reward_scale}")
        if self.concentration <= 0:
            raise ValueError(f"concentration must be positive, got {self.concentration}")
        if self.max_attempts < 1:
            raise ValueError(f"max_attempts must be >= 1, got {self.max_attempts}")


@dataclass
class DivergenceConfig:
    epsilon: float = 0.5
    n_runs: int = 100_000
    horizon: int = 20
    streak_lengths: List[int] = field(default_factory=lambda: [1, 2, 3])
    eps_grid: List[float] = field(default_factory=lambda: [0.01, 0.05, 0.09, 0.11, 0.2, 0.5, 0.9])
    contrast_horizon: int = 200
    contrast_runs: int = 1000


@dataclass
class ExperimentConfig:
    name: str
    alpha: float
    horizon: int
    record_ks: List[int]
    n_runs: int
    seed: int
    mdp_file: Optional[str] = None
    random_mdp: Optional[RandomMdpSpec] = None
    v0: Optional[List[float]] = None
    epsilons: List[float] = field(default_factory=list)
    schedule_horizons: List[int] = field(default_factory=list)
    schedule_runs: int = 10_000
    stein_trials: int = 100
    block_size: int = 10_000
    n_workers: int = 1
    progress: bool = False
    divergence: Optional[DivergenceConfig] = None
    stages: List[str] = field(default_factory=lambda: list(STAGES))
    output_dir: str = "output"

    def __post_init__(self):
        if (self.mdp_file is None) == (self.random_mdp is None):
            raise ValueError("exactly one of mdp_file and random_mdp must be given")
        if self.horizon < 0 or self.n_runs < 0:
            raise ValueError(f"horizon and n_runs must be nonnegative, got {self.horizon}, {self.n_runs}")
        self.record_ks = sorted(set(int(k) for k in self.record_ks))
        if any(k < 0 or k > self.horizon for k in self.record_ks):
            raise ValueError(f"probe steps {self.record_ks} must lie in [0, {self.horizon}]")
        unknown = [s for s in self.stages if s not in STAGES]
        if unknown:
            raise ValueError(f"unknown stages {unknown}; expected a subset of {list(STAGES)}")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def initial_value(self, n_states: int) -> np.ndarray:
        if self.v0 is None:
            return np.zeros(n_states)
        v0 = np.array(self.v0, dtype=float)
        if v0.shape != (n_states,):
            raise ValueError(f"v0 must have {n_states} entries, got {v0.shape}")
        return v0

    def to_dict(self) -> Dict:
        return asdict(self)


class ConfigManager:
    def load_experiment_config(self, path: str) -> ExperimentConfig:
        """Load a YAML (or JSON) experiment config; mdp_file is resolved relative to the config file"""
        try:
            with open(path, "r") as f:
                doc = yaml.safe_load(f)
        except FileNotFoundError:
            logger.error(f"Config file {path} not found")
            raise
        except yaml.YAMLError as e:
            logger.error(f"Error parsing config file {path}: {str(e)}")
            raise

        if not isinstance(doc, dict):
            raise ValueError(f"Config file {path} must contain a mapping")
        required_fields = ["name", "alpha", "horizon", "record_ks", "n_runs", "seed"]
        missing_fields = [f for f in required_fields if f not in doc]
        if missing_fields:
            raise ValueError(f"Missing required fields in {path}: {missing_fields}")

        doc = dict(doc)
        if doc.get("random_mdp") is not None:
            doc["random_mdp"] = RandomMdpSpec(**doc["random_mdp"])
        if doc.get("divergence") is not None:
            doc["divergence"] = DivergenceConfig(**doc["divergence"])
        if doc.get("mdp_file") and not os.path.isabs(doc["mdp_file"]):
            doc["mdp_file"] = os.path.join(os.path.dirname(os.path.abspath(path)), doc["mdp_file"])

        env_output = os.getenv(OUTPUT_DIR_ENV)
        if env_output:
            logger.info(f"Output directory overridden by {OUTPUT_DIR_ENV}={env_output}")
            doc["output_dir"] = env_output

        try:
            config = ExperimentConfig(**doc)
        except TypeError as e:
            logger.error(f"Error in config {path}: {str(e)}")
            raise ValueError(f"invalid config {path}: {e}") from e
        logger.info(f"Loaded experiment config '{config.name}' from {path}")
        return config

    def save_experiment_config(self, config: ExperimentConfig, out_dir: str) -> str:
        """Snapshot of the resolved config next to the results"""
        os.makedirs(out_dir, exist_ok=True)
        config_file = os.path.join(out_dir, "config_resolved.yaml")
        document = {
            "metadata": {"created_at": datetime.now().isoformat()},
            "experiment": config.to_dict(),
        }
        with open(config_file, "w") as f:
            yaml.dump(document, f, default_flow_style=False, sort_keys=False)
        return config_file

    @staticmethod
    def write_frame(frame: pd.DataFrame, path: str) -> str:
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
        logger.info(f"Wrote {len(frame)} rows to {path}")
        return path

    @staticmethod
    def write_json(document: Dict, path: str) -> str:
        with open(path, "w") as f:
            json.dump(document, f, indent=2, sort_keys=True)
        logger.info(f"Wrote {path}")
        return path

    @staticmethod
    def read_json(path: str) -> Dict:
        try:
            with open(path, "r") as f:
                return json.load(f)
        except FileNotFoundError:
            logger.error(f"{path} not found")
            raise
