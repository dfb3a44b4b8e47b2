import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from decworker.task import ToyTaskConfig

REPO_ROOT = Path(__file__).resolve().parents[2]
SHARED_FIXTURES = REPO_ROOT / "tests" / "fixtures"

SMALL_TASK = ToyTaskConfig(feature_channels=(8, 12, 16), image_hw=(32, 32),
                           fpn_width=8, head_width=8, num_classes=4,
                           train_size=4, val_size=2)


def engine_param_count(genome: dict, cfg: ToyTaskConfig, tmp_path) -> int:
    """Total parameter count from the search engine's cost CLI, the
    only coupling point between the two packages."""
    path = tmp_path / "genome.json"
    path.write_text(json.dumps(genome))
    image = f"{cfg.image_hw[0]}x{cfg.image_hw[1]}"
    channels = ",".join(str(c) for c in cfg.feature_channels)
    out = subprocess.run(
        [sys.executable, "-m", "decnas.cli", "cost", "--genome", str(path),
         "--fpn-width", str(cfg.fpn_width), "--head-width", str(cfg.head_width),
         "--image-size", image, "--backbone-channels", channels,
         "--classes", str(cfg.num_classes), "--json"],
        capture_output=True, text=True, check=True)
    return json.loads(out.stdout)["params"]


@pytest.fixture
def rng():
    return np.random.default_rng(20240812)
