import numpy as np
import pytest

from aedetect.autoencoder import AutoencoderConfig, train_wae
from aedetect.data import synth_dataset
from aedetect.target import build_small_convnet, tap_activations, tap_shapes, train_classifier


@pytest.fixture(scope="session")
def tiny_data():
    ds = synth_dataset(4, 60, (1, 12, 12), sigma=0.1, seed=3)
    return ds.subset(slice(0, 180)), ds.subset(slice(180, 240))


@pytest.fixture(scope="session")
def tiny_net(tiny_data):
    train, _ = tiny_data
    cfg = build_small_convnet((1, 12, 12), 4)
    return train_classifier(cfg, train, epochs=4, lr=3e-3, batch=32, seed=0)


@pytest.fixture(scope="session")
def tiny_bank(tiny_net, tiny_data):
    train, _ = tiny_data
    _, acts = tap_activations(tiny_net, train.images)
    bank = {}
    for tap, shape in tap_shapes(tiny_net.config).items():
        cfg = AutoencoderConfig.for_tap(tap, shape, latent_dim=4 if len(shape) == 3 else 3, conv_filters=8,
                                        epochs=3, seed=1)
        bank[tap] = train_wae(acts[tap], cfg)
    return bank


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        verdict, detail = RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {detail}")
