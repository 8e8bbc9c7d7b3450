import numpy as np
import pytest

from htlane import model, synth
from htlane.errors import ShapeError
from oracles import kink_free, numeric_grad, rel_err


def _image(seed, dtype=np.float32):
    return np.random.default_rng(seed).random(model.IMAGE_SHAPE).astype(dtype)


def test_init_deterministic_and_seeded():
    a, b, c = model.init_params(3), model.init_params(3), model.init_params(4)
    assert list(a) == list(model.param_shapes())
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert any(a[k].tobytes() != c[k].tobytes() for k in a if k.endswith(".w"))
    assert all(not v.any() for k, v in a.items() if k.endswith(".b"))
    assert all(v.dtype == np.float32 for v in a.values())


def test_output_shapes_and_ranges(desk_table):
    out, _ = model.forward(model.init_params(0), _image(0), desk_table)
    assert out.seg_logits.shape == (5, 64, 160)
    assert out.seg_probs.shape == (5, 64, 160)
    assert out.exist_p.shape == (4,)
    assert out.features.shape == model.FEATURE_SHAPE
    np.testing.assert_allclose(out.seg_probs.sum(axis=0), 1, atol=1e-6)
    assert np.all((out.exist_p > 0) & (out.exist_p < 1))


def test_shape_errors(desk_table, small_table):
    p = model.init_params(0)
    with pytest.raises(ShapeError):
        model.forward(p, np.zeros((1, 64, 159), np.float32), desk_table)
    with pytest.raises(ShapeError, match="vote table"):
        model.forward(p, _image(0), small_table)
    out, cache = model.forward(p, _image(0), desk_table)
    with pytest.raises(ShapeError):
        model.backward(p, desk_table, out, cache, np.zeros((5, 64, 160), np.float32),
                       np.zeros(3, np.float32))


def test_strip_pool_adjoint():
    rng = np.random.default_rng(0)
    y = rng.standard_normal(model.FEATURE_SHAPE)
    g = rng.standard_normal(model.EXIST_IN)
    lhs = model.strip_pool(y) @ g
    rhs = np.sum(y * model.strip_pool_backward(g, y.shape))
    assert abs(lhs - rhs) < 1e-10 * max(1, abs(lhs))


def test_zero_upstream_and_repeatability(desk_table):
    p = model.init_params(1)
    out, cache = model.forward(p, _image(1), desk_table)
    zl, ze = np.zeros_like(out.seg_logits), np.zeros_like(out.exist_p)
    grads, g_img = model.backward(p, desk_table, out, cache, zl, ze)
    assert not g_img.any() and all(not g.any() for g in grads.values())
    rng = np.random.default_rng(2)
    ul = rng.standard_normal(out.seg_logits.shape).astype(np.float32)
    ue = rng.standard_normal(4).astype(np.float32)
    g1, _ = model.backward(p, desk_table, out, cache, ul, ue)
    out2, cache2 = model.forward(p, _image(1), desk_table)
    g2, _ = model.backward(p, desk_table, out2, cache2, ul, ue)
    assert all(g1[k].tobytes() == g2[k].tobytes() for k in p)
    assert out.seg_logits.tobytes() == out2.seg_logits.tobytes()


def _pattern(p, table, image):
    out, cache = model.forward(p, image, table)
    acts = [v for k, v in cache.acts.items() if k.endswith(".pre") and not k.startswith("head")]
    bc = cache.block_cache
    acts += [bc.g_pre, bc.h1_pre, bc.h2_pre, bc.out_pre]
    return np.concatenate([(a > 0).ravel() for a in acts])


def _scene(seed):
    # piecewise-constant input: few distinct pre-activation values, so +-step
    # perturbations rarely straddle a ReLU kink
    cfg = synth.SceneConfig(noise_sigma=(0.0, 0.0), occlusion_prob=0.0)
    return synth.gen_sample(seed, cfg).image.astype(np.float64)


def stable_coords(p, table, image, rng, n, max_tries=100):
    """Random (name, index) pairs whose +-1e-3 perturbation leaves every
    ReLU on the same side of its kink."""
    names, picks = list(p), []
    for _ in range(max_tries):
        name = names[rng.integers(len(names))]
        i = int(rng.integers(p[name].size))
        if kink_free(lambda: _pattern(p, table, image), p[name], [i]).size:
            picks.append((name, i))
            if len(picks) == n:
                break
    return picks


@pytest.mark.parametrize("seed", range(10))
def test_model_gradients_finite_differences(desk_table, seed):
    rng = np.random.default_rng(seed)
    p = model.init_params(seed, dtype=np.float64)
    for k in p:
        if k.endswith(".b"):
            p[k] = rng.uniform(-0.1, 0.1, p[k].shape)
    image = _scene(seed)
    ul = rng.standard_normal((5, 64, 160))
    ue = rng.standard_normal(4)

    def fn():
        out, _ = model.forward(p, image, desk_table)
        return float(np.sum(out.seg_logits * ul) + out.exist_p @ ue)

    out, cache = model.forward(p, image, desk_table)
    grads, _ = model.backward(p, desk_table, out, cache, ul, ue)
    picks = stable_coords(p, desk_table, image, rng, 10)
    assert len(picks) == 10
    ana = [grads[name].reshape(-1)[i] for name, i in picks]
    num = [numeric_grad(fn, p[name], [i])[0] for name, i in picks]
    assert rel_err(ana, num) < 1e-2


def test_enc1_bias_gradient_of_logit_sum(desk_table):
    p = model.init_params(7, dtype=np.float64)
    image = _scene(1)

    def fn():
        return float(model.forward(p, image, desk_table)[0].seg_logits.sum())

    out, cache = model.forward(p, image, desk_table)
    grads, _ = model.backward(p, desk_table, out, cache, np.ones_like(out.seg_logits),
                              np.zeros(4))
    idx = kink_free(lambda: _pattern(p, desk_table, image), p["enc1.b"], range(16))
    assert idx.size >= 2
    assert rel_err(grads["enc1.b"][idx], numeric_grad(fn, p["enc1.b"], idx)) < 1e-2


def test_float32_path_tracks_float64(desk_table):
    p32 = model.init_params(5)
    p64 = {k: v.astype(np.float64) for k, v in p32.items()}
    img = _image(5)
    o32, _ = model.forward(p32, img, desk_table)
    o64, _ = model.forward(p64, img.astype(np.float64), desk_table)
    assert o32.seg_probs.dtype == np.float32
    np.testing.assert_allclose(o32.seg_probs, o64.seg_probs, atol=1e-5)
    np.testing.assert_allclose(o32.exist_p, o64.exist_p, atol=1e-5)
