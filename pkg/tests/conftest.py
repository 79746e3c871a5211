import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mixpipe.core import DatasetManifest, SampleRecord, Source, Split  # noqa: E402
from mixpipe.synth import SynthSpec, generate  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def clean_data():
    spec = SynthSpec(num_multicam_pids=12, num_singlecam_pids=30, images_per_pid=8,
                     dim_raw=32, intra_noise_sigma=0.03, seed=11)
    return spec, *generate(spec)


@pytest.fixture(scope="session")
def noisy_data():
    spec = SynthSpec(num_multicam_pids=12, num_singlecam_pids=50, images_per_pid=12,
                     dim_raw=64, intra_noise_sigma=0.03, frag_rate=0.1,
                     mislabel_rate=0.01, junk_rate=0.015, seed=7)
    return spec, *generate(spec)


def make_manifest(rows):
    """rows: (sample_id, pid, 'M'|'S', context, split?)"""
    recs = []
    for row in rows:
        sid, pid, src, ctx = row[:4]
        split = Split(row[4]) if len(row) > 4 else Split.TRAIN
        recs.append(SampleRecord(sid, pid, Source(src), ctx, split))
    return DatasetManifest(tuple(recs))


def pytest_terminal_summary(terminalreporter):
    from report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
