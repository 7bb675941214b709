import pytest
import torch

from adnnperf.adnn import build_model, reference_spec
from adnnperf.flops import CONDITIONAL_SKIPPING, EARLY_TERMINATION

torch.set_num_threads(1)

TINY = dict(num_blocks=4, channels=4, input_shape=(3, 8, 8), num_classes=3)


def tiny_model(mechanism=CONDITIONAL_SKIPPING, seed=0, threshold=0.5):
    return build_model(reference_spec(mechanism, threshold=threshold, **TINY), seed)


@pytest.fixture(params=[CONDITIONAL_SKIPPING, EARLY_TERMINATION])
def any_model(request):
    threshold = 0.5 if request.param == CONDITIONAL_SKIPPING else 0.34
    return tiny_model(request.param, threshold=threshold)


@pytest.fixture
def skip_model():
    return tiny_model()


@pytest.fixture
def inputs():
    return torch.rand(16, 3, 8, 8, generator=torch.Generator().manual_seed(3))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
