"""
Settings for the POMDP Model Induction Toolkit
Environment variables, per-family hyperparameter defaults and config files
"""

import logging
import os
from dataclasses import dataclass
from pathlib import Path

from dotenv import dotenv_values, load_dotenv

load_dotenv()

CACHE_DIR = Path(os.path.expanduser(os.getenv("POMDP_CACHE_DIR", "cache")))
LOG_LEVEL = os.getenv("POMDP_LOG_LEVEL", "INFO")

PROPOSER_BACKEND = os.getenv("POMDP_PROPOSER_BACKEND", "http")
PROPOSER_URL = os.getenv("POMDP_PROPOSER_URL", "https://api.openai.com/v1")
PROPOSER_MODEL = os.getenv("POMDP_PROPOSER_MODEL", "gpt-4-turbo")
PROPOSER_API_KEY_ENV = os.getenv("POMDP_PROPOSER_API_KEY_ENV", "POMDP_PROPOSER_API_KEY")
PROPOSER_TEMPERATURE = float(os.getenv("POMDP_PROPOSER_TEMPERATURE", "1.0"))
PROPOSER_TIMEOUT = float(os.getenv("POMDP_PROPOSER_TIMEOUT", "60"))
PROPOSER_MAX_RETRIES = int(os.getenv("POMDP_PROPOSER_MAX_RETRIES", "2"))

VERTEX_PROJECT = os.getenv("VERTEX_PROJECT", "")
VERTEX_LOCATION = os.getenv("VERTEX_LOCATION", "europe-west1")
VERTEX_MODEL_NAME = os.getenv("VERTEX_MODEL_NAME", "gemini-2.0-flash-lite")

DEFAULT_GAMMA = 0.98
DEFAULT_DEMO_EPISODES = 10
DEFAULT_TEST_FRACTION = 0.3


@dataclass(frozen=True)
class FamilyDefaults:
    action_cost: float
    alpha: float
    lam: float
    rollouts: int
    horizon: int
    n_particles: int
    max_rejuvenation: int
    max_steps: int


# Hyperparameters by domain family
FAMILY_DEFAULTS = {
    "classical": FamilyDefaults(
        action_cost=0.01, alpha=0.0, lam=0.1, rollouts=5, horizon=50,
        n_particles=50, max_rejuvenation=250_000, max_steps=30,
    ),
    "grid": FamilyDefaults(
        action_cost=0.01, alpha=0.0, lam=0.1, rollouts=1, horizon=5000,
        n_particles=10, max_rejuvenation=500_000, max_steps=100,
    ),
}

LEARN_DEFAULTS = {
    "max_refinements": 25,
    "smoothing": 25.0,
    "k_cov": 100,
    "nd": 5,
    "nc": 5,
    "ns": 5,
    "max_sites": 16,
}


def family_for(env_id: str) -> str:
    """`tiger` and `rocksample-*` are classical; `minigrid-*` are grid."""
    if env_id.startswith("minigrid"):
        return "grid"
    return "classical"


def defaults_for(env_id: str) -> FamilyDefaults:
    return FAMILY_DEFAULTS[family_for(env_id)]


def load_config_file(path) -> dict:
    """Flat KEY=value experiment config; keys are lower-cased field names."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    values = dotenv_values(path)
    return {k.lower(): v for k, v in values.items() if v is not None}


def configure_logging(level: str | None = None) -> None:
    logging.basicConfig(
        level=getattr(logging, (level or LOG_LEVEL).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
