import dataclasses

import pytest
import torch

from ssae.data import PRESETS, make_synthetic_texture_set

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """32x32 stripes: 10 train images (1 held out for validation), 4 test images."""
    spec = dataclasses.replace(PRESETS["stripes"], side=32, period=(5.0, 7.0), defect_size=(0.2, 0.35))
    root = tmp_path_factory.mktemp("tiny")
    return make_synthetic_texture_set(spec, 10, 4, root, seed=3)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[key])
