import dataclasses
from pathlib import Path

import pytest

from videograph import cli as cli_mod
from videograph import data as data_mod

REPO = Path(__file__).resolve().parent.parent
SYNTH_CONFIG = REPO / "configs" / "synthetic.cfg"


class _Args:
    """Bare namespace mimicking parsed CLI flags for build_configs."""

    config = str(SYNTH_CONFIG)
    mode = None
    seed = None
    iterations = None
    objects = None
    words = None
    query_mode = None
    budget = None
    aggregation = None
    epochs = None

    def __init__(self, **over):
        for key, value in over.items():
            setattr(self, key, value)


def experiment_configs(**over):
    """ModelConfig/TrainConfig/LossWeights of the canonical synthetic run."""
    return cli_mod.build_configs(_Args(**over))


@pytest.fixture(scope="session")
def synth_dataset(tmp_path_factory):
    """The acceptance dataset: 8 videos, T=64, N=6, 4 events, seed 7."""
    root = tmp_path_factory.mktemp("synth")
    specs = [
        dataclasses.replace(data_mod.SyntheticSpec(seed=7), video_index=i)
        for i in range(8)
    ]
    videos = []
    for spec in specs:
        fs = data_mod.generate_synthetic(spec)
        data_mod.write_features(fs, root / f"{fs.video_id}.vgf")
        videos.append(fs)
    split = data_mod.SplitConfig(
        train=[v.video_id for v in videos[:5]],
        val=[videos[5].video_id],
        test=[v.video_id for v in videos[6:]],
    )
    data_mod.write_split(split, root / "split.txt")
    return {"dir": root, "videos": videos, "split": split, "specs": specs}
