import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def tiny_model():
    """A five-stage backbone small enough for per-test forward passes:
    32x32 inputs map to a 1x1 location grid with 16 channels."""
    from ghostvlad.ghostnet import BottleneckEntry, GhostCNN, GhostCNNConfig

    config = GhostCNNConfig(
        stem_channels=4,
        stages=[
            [BottleneckEntry(4, 8, 6, stride=2)],
            [BottleneckEntry(6, 12, 8, stride=2)],
            [BottleneckEntry(8, 16, 8, stride=2)],
            [BottleneckEntry(8, 16, 8, stride=2, se=True)],
            [BottleneckEntry(8, 16, 8, stride=1)],
        ],
        final_channels=16,
    )
    return GhostCNN(config, seed=42)
