"""
Named architecture presets.
"""

from dataclasses import dataclass
from typing import Dict


@dataclass(frozen=True)
class ArchitecturePreset:
    channels: int
    n_layers: int
    d_z: int
    description: str = ""


PRESETS: Dict[str, ArchitecturePreset] = {
    "tiny": ArchitecturePreset(channels=4, n_layers=2, d_z=3, description="gradient checks and unit tests"),
    # CPU-sized version of the full configuration
    "desk": ArchitecturePreset(channels=64, n_layers=4, d_z=32, description="desk-scale runs"),
    "full": ArchitecturePreset(channels=100, n_layers=6, d_z=100, description="full-scale heat configuration"),
}


def get_preset(key: str) -> ArchitecturePreset:
    """Get a preset by key, defaulting to desk if not found."""
    return PRESETS.get(key, PRESETS["desk"])
