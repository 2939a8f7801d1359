import numpy as np
import pytest

from aedetect import autodiff as ad
from aedetect.autodiff import Tensor
from aedetect.data import LabeledSet, synth_dataset
from aedetect.target import (NetworkConfig, TrainedNetwork, accuracy, build_small_convnet, forward,
                             forward_with_taps, init_params, load_network, param_shapes, predict, save_network,
                             tap_shapes, train_classifier)


def test_reference_architecture_taps():
    cfg = build_small_convnet((1, 28, 28), 10)
    shapes = tap_shapes(cfg)
    assert list(shapes) == ["tap1", "tap2", "tap3", "tap4"]
    assert shapes == {"tap1": (16, 28, 28), "tap2": (32, 14, 14), "tap3": (64, 7, 7), "tap4": (10,)}
    big = tap_shapes(build_small_convnet((3, 32, 32), 10))
    assert len(big) == 4 and big["tap1"] == (16, 32, 32) and big["tap3"] == (64, 8, 8)
    with pytest.raises(ValueError):
        build_small_convnet((1, 6, 6), 3)


def _closed_form_params(c, h, w, k):
    # conv 3x3 -> stride-2 kernels chosen by extent parity -> dense
    count = 16 * c * 9 + 16
    chans, ext = 16, (h, w)
    for f in (32, 64):
        kh, kw = (4 if ext[0] % 2 == 0 else 3), (4 if ext[1] % 2 == 0 else 3)
        count += f * chans * kh * kw + f
        ext = ((ext[0] + 2 - kh) // 2 + 1, (ext[1] + 2 - kw) // 2 + 1)
        chans = f
    return count + chans * ext[0] * ext[1] * k + k


@pytest.mark.parametrize("shape,k", [((1, 28, 28), 10), ((3, 32, 32), 10), ((1, 9, 13), 3)])
def test_parameter_count_closed_form(shape, k):
    cfg = build_small_convnet(shape, k)
    total = sum(int(np.prod(s)) for s in param_shapes(cfg).values())
    assert total == _closed_form_params(*shape, k)


def test_config_validation():
    cfg = build_small_convnet((1, 12, 12), 3)
    with pytest.raises(ValueError):
        NetworkConfig(cfg.input_shape, cfg.layers, {"a": 3, "b": 1}, 3)
    with pytest.raises(ValueError):
        NetworkConfig(cfg.input_shape, cfg.layers, cfg.taps, 5)
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg


def test_forward_with_taps_is_pure(tiny_net, tiny_data):
    _, test = tiny_data
    x = Tensor(test.images[:7])
    logits, taps = forward_with_taps(tiny_net, x)
    assert logits.data.tobytes() == forward(tiny_net, x).data.tobytes()
    assert taps["tap4"].data.tobytes() == logits.data.tobytes()
    assert set(taps) == set(tiny_net.config.taps)
    for name, shape in tap_shapes(tiny_net.config).items():
        assert taps[name].shape[1:] == shape
    with pytest.raises(ad.DimensionError):
        forward(tiny_net, Tensor(np.zeros((1, 1, 10, 10))))


def test_predict_tie_break_and_accuracy():
    class Fixed:
        def __call__(self, x):
            return Tensor(np.array([[0.1, 0.9], [0.5, 0.5]])[: len(x.data)])

    assert predict(Fixed(), np.zeros((2, 1, 1, 1), np.float32)).tolist() == [1, 0]
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((10, 4))
    labels = rng.integers(0, 4, 10)

    class Table:
        def __call__(self, x):
            return Tensor(logits[x.data[:, 0, 0, 0].astype(int)])

    data = LabeledSet(np.arange(10, dtype=np.float32).reshape(10, 1, 1, 1), labels)
    brute = sum(1 for i in range(10) if max(range(4), key=lambda j: (logits[i, j], -j)) == labels[i]) / 10
    assert accuracy(Table(), data) == brute


def test_training_learns_separable_blobs():
    ds = synth_dataset(2, 60, (1, 10, 10), sigma=0.08, seed=4)
    net = train_classifier(build_small_convnet((1, 10, 10), 2), ds, epochs=5, lr=3e-3, batch=16, seed=0)
    assert net.metadata["val_accuracy"] >= 0.99


def test_training_is_deterministic_and_validates(tiny_data):
    train, _ = tiny_data
    cfg = build_small_convnet((1, 12, 12), 4)
    a = train_classifier(cfg, train.subset(slice(0, 64)), epochs=1, batch=32, seed=9)
    b = train_classifier(cfg, train.subset(slice(0, 64)), epochs=1, batch=32, seed=9)
    assert a.checksum() == b.checksum()
    with pytest.raises(ValueError):
        train_classifier(cfg, train, epochs=0)
    with pytest.raises(ValueError):
        train_classifier(cfg, LabeledSet(train.images[:2], np.array([0, 7])))


def test_parameters_are_frozen(tiny_net):
    before = tiny_net.checksum()
    with pytest.raises(ValueError):
        tiny_net.params["layer0.w"].data[...] = 0
    assert tiny_net.checksum() == before


def test_save_load_round_trip(tmp_path, tiny_net, tiny_data):
    save_network(tiny_net, tmp_path / "net")
    back = load_network(tmp_path / "net")
    assert back.checksum() == tiny_net.checksum()
    assert back.config == tiny_net.config
    x = tiny_data[1].images
    assert np.array_equal(predict(back, x), predict(tiny_net, x))


def test_divergence_is_reported(tiny_data):
    train, _ = tiny_data
    cfg = build_small_convnet((1, 12, 12), 4)
    from aedetect.target import TrainingError
    with pytest.raises(TrainingError, match="diverged"):
        train_classifier(cfg, train, epochs=2, lr=1e30, seed=0)


def test_init_params_shapes():
    cfg = build_small_convnet((1, 12, 12), 4)
    params = init_params(cfg, np.random.default_rng(0))
    assert {k: v.shape for k, v in params.items()} == param_shapes(cfg)
    TrainedNetwork(cfg, params)
