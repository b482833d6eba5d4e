"""
Configuration management for metapu.

This module centralizes the environment-level settings and the constants
shared by the dataset, training, evaluation and CLI layers. Typed,
per-component configuration records (NetConfig, TrainConfig, ...) live next
to the code that consumes them; this class only holds what is global.
"""
import dataclasses
import os
from pathlib import Path
from dotenv import load_dotenv

from .errors import ConfigError

# Load environment variables from .env file
load_dotenv()


class Config:
    """Application configuration."""

    # ========================================================================
    # Paths
    # ========================================================================
    PROJECT_ROOT = Path(__file__).parent.parent.parent
    DATA_DIR = Path(os.environ.get('METAPU_DATA_DIR', str(PROJECT_ROOT / 'data')))

    # ========================================================================
    # Runtime
    # ========================================================================
    LOG_LEVEL = os.environ.get('METAPU_LOG_LEVEL', 'INFO').upper()
    DEFAULT_SEED = int(os.environ.get('METAPU_SEED', '0'))

    # Network profile used when no config file is given: 'tiny' or 'full'
    PROFILE = os.environ.get('METAPU_PROFILE', 'tiny')

    # ========================================================================
    # Profiles
    # ========================================================================
    # Only the fields that differ from the NetConfig defaults (which are the
    # full-size values) are listed.
    PROFILES = {
        'full': {},
        'tiny': {
            'k': 8,
            'c': 32,
            'n_blocks': 4,
            'meta_block_index': 2,
            'r_max': 4,
            'c_hidden': 32,
        },
    }

    # ========================================================================
    # Test-time input sizes
    # ========================================================================
    # Whole-model evaluation uses fewer input points for larger scales:
    # (upper bound on R, number of input points). Checked in order.
    TEST_INPUT_SIZES = [
        (4.0, 5000),
        (6.0, 4000),
        (12.0, 3000),
        (float('inf'), 2500),
    ]

    # ========================================================================
    # Dataset protocol
    # ========================================================================
    PATCHES_PER_MODEL = 100
    N_MAX = 4096
    # Dense points per patch, as a multiple of n_max (make_training_pair
    # needs at least 2x)
    PATCH_DENSE_FACTOR = 4
    # Dense uniform samples per blue-noise target point
    BLUE_NOISE_DENSE_FACTOR = 30
    # Dense points written per whole test model (enough for R=16 at 2500)
    TEST_DENSE_POINTS = 80000
    # Share of models held out for testing when several models are given
    TEST_MODEL_FRACTION = 1.0 / 3.0
    # Share of patches held out when only one model is available
    TEST_PATCH_FRACTION = 0.25

    # ========================================================================
    # Metrics
    # ========================================================================
    FSCORE_TAU_FRACTION = 0.01      # of the ground-truth bbox diagonal
    NUC_PERCENTAGES = [0.002, 0.004, 0.006, 0.008, 0.010]
    NUC_SEEDS = 100
    NUC_MESH_TOLERANCE = 0.02       # of the mesh bbox diagonal
    EMD_EXACT_MAX_POINTS = 512

    # ========================================================================
    # Checkpoints
    # ========================================================================
    CHECKPOINT_MAGIC = b'MPU1'
    CHECKPOINT_VERSION = 1

    # ========================================================================
    # Exit codes
    # ========================================================================
    EXIT_OK = 0
    EXIT_USAGE = 2
    EXIT_DATA = 3
    EXIT_NUMERIC = 4

    # ========================================================================
    # Helper Methods
    # ========================================================================

    @classmethod
    def test_input_size(cls, scale: float) -> int:
        """
        Number of input points used at test time for a scale factor.

        Args:
            scale: Upsampling factor R

        Returns:
            5000 for R<=4, 4000 for R<=6, 3000 for R<=12, else 2500

        Example:
            >>> Config.test_input_size(2.5)
            5000
            >>> Config.test_input_size(16)
            2500
        """
        for upper, size in cls.TEST_INPUT_SIZES:
            if scale <= upper:
                return size
        return cls.TEST_INPUT_SIZES[-1][1]

    @classmethod
    def profile_overrides(cls, name: str) -> dict:
        """
        NetConfig field overrides for a named profile.

        Raises:
            ConfigError: if the profile is unknown
        """
        if name not in cls.PROFILES:
            raise ConfigError(
                f"Unknown profile: {name}. Use one of {sorted(cls.PROFILES)}"
            )
        return dict(cls.PROFILES[name])

    @classmethod
    def nuc_key(cls, percentage: float) -> str:
        """Report key for a NUC disk size, e.g. 0.008 -> 'nuc_p008'."""
        return f"nuc_p{int(round(percentage * 1000)):03d}"


class ConfigRecord:
    """
    Mixin for the typed configuration dataclasses.

    ``to_dict`` gives a JSON-ready echo; ``from_dict`` rejects keys the
    dataclass does not declare so typos in config files fail loudly.
    """

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"{cls.__name__}: unknown keys {unknown}")
        return cls(**data)

    def replace(self, **changes):
        """Copy with some fields changed (validated again)."""
        return self.from_dict({**self.to_dict(), **changes})
