"""
MAM-FSD Lab Base
Position-as-seed determinism, profile management and the learnable-block base class
"""

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Iterator, List, Tuple

import numpy as np
import xxhash

# ============================================================================
# CONSTANTS
# ============================================================================

PROFILES_DIR = Path(__file__).parent.parent / "profiles"

# ============================================================================
# ERRORS
# ============================================================================


class MamFsdError(Exception):
    """Root of every error the lab raises on purpose."""


class ShapeError(MamFsdError, ValueError):
    """Operand dims do not satisfy an op's contract."""


class GraphError(MamFsdError):
    """Misuse of the reverse-mode graph (non-scalar root, double backward)."""


class NonFiniteError(MamFsdError, ArithmeticError):
    """A forward value or loss left the finite reals."""


class InfeasibleLabelError(MamFsdError, ValueError):
    """A label cannot be aligned to the available number of steps."""


class ConfigError(MamFsdError):
    """Bad configuration file, key or value."""


class DataError(MamFsdError):
    """Dataset missing, malformed or incompatible with the configuration."""


class FormatError(MamFsdError):
    """Binary file does not follow the MFT1 / MFCK layout."""


# ============================================================================
# CORE HASH FUNCTIONS (Position-as-Seed Methodology)
# ============================================================================

def sample_hash(seed: int, *coords: int) -> int:
    """
    Pure O(1) hash from seed + arbitrary coordinate tuple.
    Uses xxhash32 for speed and cross-platform determinism.

    The coordinate system gives every random stream in the lab its own address:
    - seed: run or dataset seed
    - coords: (split, sample_idx), (epoch, sample_idx), (param_idx,), ...

    Returns: Deterministic 32-bit integer
    """
    h = xxhash.xxh32(seed=seed & 0xFFFFFFFF)
    h.update(struct.pack('<' + 'i' * len(coords), *coords))
    return h.intdigest()


def hash_to_index(h: int, pool_size: int) -> int:
    """Map hash to valid index in any pool."""
    return h % pool_size


def name_hash(name: str) -> int:
    """Stable 32-bit hash of a string (parameter names, split names)."""
    return xxhash.xxh32(name.encode('utf-8')).intdigest()


def derive_rng(seed: int, *coords: int) -> np.random.Generator:
    """Independent numpy generator addressed by (seed, *coords)."""
    return np.random.default_rng(sample_hash(seed, *coords))


# ============================================================================
# PROFILE MANAGEMENT
# ============================================================================

def get_profiles_dir() -> Path:
    """Get the profiles directory path."""
    return PROFILES_DIR


def discover_profiles(prefix: str = "") -> List[str]:
    """
    Discover all available JSON profiles, optionally filtered by prefix.

    Args:
        prefix: Optional prefix to filter profiles (e.g., "synth_")

    Returns:
        List of profile filenames (without path), default first
    """
    profiles_dir = get_profiles_dir()
    if not profiles_dir.exists():
        return []

    pattern = f"{prefix}*.json" if prefix else "*.json"
    profiles = sorted(f.name for f in profiles_dir.glob(pattern) if f.is_file())

    default_name = f"{prefix}default.json" if prefix else "default.json"
    if default_name in profiles:
        profiles.remove(default_name)
        profiles.insert(0, default_name)
    return profiles


def load_profile(profile: str, required: Tuple[str, ...] = ()) -> Dict:
    """
    Load and validate a JSON profile.

    Args:
        profile: Bare filename looked up in the profiles directory, or a path
        required: Top-level fields the profile must carry

    Returns:
        Validated profile dictionary

    Raises:
        FileNotFoundError: If profile doesn't exist
        ValueError: If profile is missing required fields
    """
    path = Path(profile)
    if not path.exists():
        path = get_profiles_dir() / profile
    if not path.exists():
        raise FileNotFoundError(f"Profile not found: {profile}")

    with open(path, 'r', encoding='utf-8') as f:
        data = json.load(f)

    for field in required:
        if field not in data:
            raise ValueError(f"Profile {profile} missing '{field}' field")
    return data


# ============================================================================
# BASE MODULE CLASS
# ============================================================================

class LabModule:
    """
    Base class for every learnable block.

    Parameters are registered in construction order under dotted names, which
    are also the checkpoint tensor names. Child blocks are mounted under their
    own names, so their parameters read ``child.param``.
    """

    DISPLAY_NAME = "Lab Module"

    def __init__(self):
        self._params: "OrderedDict[str, object]" = OrderedDict()
        self._children: "OrderedDict[str, LabModule]" = OrderedDict()

    def register(self, name: str, tensor):
        tensor.name = name
        self._params[name] = tensor
        return tensor

    def mount(self, name: str, child: "LabModule") -> "LabModule":
        self._children[name] = child
        return child

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, object]]:
        for name, tensor in self._params.items():
            yield prefix + name, tensor
        for child_name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{child_name}.")

    def parameters(self) -> List:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, t.data.copy()) for n, t in self.named_parameters())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise FormatError(f"checkpoint mismatch: missing={missing} unexpected={unexpected}")
        for name, tensor in own.items():
            value = state[name]
            if tuple(value.shape) != tensor.shape:
                raise FormatError(f"{name}: checkpoint dims {value.shape} != model dims {tensor.shape}")
            tensor.data = value.astype(tensor.data.dtype, copy=True)

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def __repr__(self) -> str:
        count = sum(t.data.size for t in self.parameters())
        return f"{self.DISPLAY_NAME}({count:,} params)"
