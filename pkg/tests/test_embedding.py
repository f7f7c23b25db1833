import numpy as np
import pytest

from mafrec import autodiff as ad
from mafrec.autodiff import GradTape, ShapeError
from mafrec.embedding import ablate_modalities, embed_ids, fuse_modalities

rng = np.random.default_rng(0)


def tables(n=4, dims=(5, 3, 2), dp=3):
    inputs = {m: rng.normal(size=(n, k)) for m, k in zip(("image", "text", "category"), dims)}
    proj = {m: ad.parameter(rng.normal(size=(k, dp))) for m, k in zip(("image", "text", "category"), dims)}
    return inputs, proj


def test_all_padding_is_zero_matrix():
    table = ad.parameter(rng.normal(size=(5, 4)))
    assert np.array_equal(embed_ids([0, 0, 0], table).numpy(), np.zeros((3, 4)))


def test_padding_row_ignored_even_if_nonzero():
    table = ad.parameter(np.ones((3, 2)))
    assert np.array_equal(embed_ids([0, 2], table).numpy(), [[0.0, 0.0], [1.0, 1.0]])


def test_repeated_ids_give_identical_rows():
    table = ad.parameter(rng.normal(size=(5, 4)))
    out = embed_ids([3, 3], table).numpy()
    assert np.array_equal(out[0], out[1])
    assert np.array_equal(out[0], table.data[3])


def test_gradient_accumulates_per_occurrence():
    data = rng.normal(size=(5, 3))
    w = rng.normal(size=(4, 3))
    ids = np.array([3, 1, 3, 3])

    def f(t):
        return float((t[ids] * w).sum())

    table = ad.parameter(data.copy())
    with GradTape() as tape:
        loss = ad.sum(embed_ids(ids, table) * w)
    (g,) = ad.backward(tape, loss, [table])
    assert np.allclose(g[3], w[0] + w[2] + w[3])
    assert np.allclose(g[1], w[1])
    assert np.array_equal(g[[0, 2, 4]], np.zeros((3, 3)))
    # central differences agree
    h = 1e-6
    for idx in [(3, 0), (3, 2), (1, 1)]:
        up, down = data.copy(), data.copy()
        up[idx] += h
        down[idx] -= h
        assert abs((f(up) - f(down)) / (2 * h) - g[idx]) < 1e-8


def test_out_of_range_id():
    with pytest.raises(IndexError):
        embed_ids([5], ad.parameter(np.zeros((5, 2))))


def test_zero_modalities_give_zero():
    inputs, proj = tables()
    zeros = {m: np.zeros_like(v) for m, v in inputs.items()}
    assert np.array_equal(fuse_modalities(zeros, proj).numpy(), np.zeros((4, 3)))


def test_image_only_inputs():
    inputs, proj = tables()
    inputs["text"][:] = 0
    inputs["category"][:] = 0
    assert np.array_equal(fuse_modalities(inputs, proj).numpy(), inputs["image"] @ proj["image"].data)


def test_componentwise_oracle():
    inputs, proj = tables()
    ref = sum(inputs[m] @ proj[m].data for m in ("image", "text", "category"))
    assert np.abs(fuse_modalities(inputs, proj).numpy() - ref).max() < 1e-12


def test_selector_image_only():
    inputs, proj = tables()
    assert np.array_equal(fuse_modalities(inputs, proj, ["image"]).numpy(), inputs["image"] @ proj["image"].data)


def test_selector_all_equals_default():
    inputs, proj = tables()
    assert np.array_equal(fuse_modalities(inputs, proj, ["category", "image", "text"]).numpy(),
                          fuse_modalities(inputs, proj).numpy())


def test_selector_empty_is_zero():
    inputs, proj = tables()
    assert np.array_equal(fuse_modalities(inputs, proj, []).numpy(), np.zeros((4, 3)))


def test_ablate_modalities_normalises_and_validates():
    assert ablate_modalities(["text", "image"]) == ("image", "text")
    assert ablate_modalities(None) == ("image", "text", "category")
    assert ablate_modalities([]) == ()
    with pytest.raises(ValueError, match="audio"):
        ablate_modalities(["audio"])


def test_projection_width_mismatch():
    inputs, proj = tables()
    proj["text"] = ad.parameter(np.zeros((3, 7)))
    with pytest.raises(ShapeError):
        fuse_modalities(inputs, proj)
