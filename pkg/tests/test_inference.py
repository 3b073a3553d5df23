import numpy as np
import torch

from crossres.inference import predict_image, probabilities_to_target, tiled_probabilities, window_starts
from crossres.label_space import default_table


def test_window_starts():
    assert window_starts(64, 64, 32) == [0]
    assert window_starts(96, 64, 32) == [0, 32]
    assert window_starts(100, 64, 32) == [0, 32, 36]
    assert window_starts(10, 64, 32) == [0]


def position_model(C=3):
    """Probabilities that depend on the pixel's value, so window placement matters."""
    def fn(x):
        logits = torch.stack([x[:, 0] * (k + 1) for k in range(C)], 1)
        return torch.softmax(logits, 1)
    return fn


def test_single_window_is_exact():
    rng = np.random.default_rng(0)
    image = rng.random((64, 64, 3)).astype(np.float32)
    fn = position_model()
    probs = tiled_probabilities(fn, image, 64)
    direct = fn(torch.from_numpy(image).permute(2, 0, 1)[None] * 2 - 1)[0].double().numpy()
    np.testing.assert_allclose(probs, direct, atol=1e-7)


def test_two_window_strip_matches_reference_composer():
    rng = np.random.default_rng(1)
    image = rng.random((32, 48, 3)).astype(np.float32)
    counter = {"calls": 0}

    def fn(x):
        counter["calls"] += x.shape[0]
        # window-dependent output: mix pixel value with the window mean
        v = x[:, :1] + x[:, :1].mean((2, 3), keepdim=True)
        return torch.softmax(torch.cat([v, -v], 1), 1)

    probs = tiled_probabilities(fn, image, 32)
    assert counter["calls"] == 2
    x = torch.from_numpy(image).permute(2, 0, 1).float() * 2 - 1
    left, right = fn(x[None, :, :, 0:32])[0].double(), fn(x[None, :, :, 16:48])[0].double()
    ref = torch.zeros(2, 32, 48, dtype=torch.float64)
    ref[:, :, :16] = left[:, :, :16]
    ref[:, :, 16:32] = (left[:, :, 16:] + right[:, :, :16]) / 2
    ref[:, :, 32:] = right[:, :, 16:]
    np.testing.assert_allclose(probs, ref.numpy(), atol=1e-7)


def test_small_input_padded_and_cropped():
    image = np.random.default_rng(2).random((20, 30, 3)).astype(np.float32)
    seen = []

    def fn(x):
        seen.append(tuple(x.shape))
        return torch.full((x.shape[0], 2, *x.shape[2:]), 0.5)

    probs = tiled_probabilities(fn, image, 64)
    assert seen == [(1, 3, 64, 64)] and probs.shape == (2, 20, 30)


def test_constant_model_gives_constant_raster():
    table = default_table()
    C = table.source.num_classes

    def fn(x):
        p = torch.full((x.shape[0], C, *x.shape[2:]), 0.5 / (C - 1))
        p[:, 6] = 0.5  # 7th source class
        return p

    image = np.random.default_rng(3).random((100, 70, 3)).astype(np.float32)
    out = predict_image(fn, image, 64, table)
    expected = table.mapping[table.source.class_ids[6]]
    assert out.shape == (100, 70) and (out == expected).all()


def test_probabilities_to_target_argmax_then_unify():
    table = default_table()
    probs = np.zeros((table.source.num_classes, 1, 2))
    probs[0, 0, 0] = 1
    probs[-1, 0, 1] = 1
    out = probabilities_to_target(probs, table)
    ids = table.source.class_ids
    assert out.tolist() == [[table.mapping[ids[0]], table.mapping[ids[-1]]]]
