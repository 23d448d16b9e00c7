"""Network builders, forward shape contracts, prediction helpers, and
spectral norms against dense linear-algebra oracles."""

import numpy as np
import pytest

from segan.networks import (
    ConvOperator,
    DiscSpec,
    ModelBundle,
    NetParams,
    SegNetSpec,
    StyleGenSpec,
    add_param_inputs,
    build_discriminator,
    build_segnet,
    build_style_generator,
    disc_forward,
    materialize,
    multi_scale_predict,
    param_feeds,
    predict_segmentation,
    resize_nearest,
    segnet_forward,
    spec_from_dict,
    spec_to_dict,
    spectral_norm,
    stylegen_forward,
)
from segan.tensor import Graph, forward


def _zeroed(net: NetParams) -> NetParams:
    out = net.copy()
    for v in out.values.values():
        v[...] = 0.0
    return out


# ---------------------------------------------------------------------------
# builders


def test_segnet_default_parameter_count_by_hand():
    # conv0 3*3*3*16+16=448, conv1 3*3*16*32+32=4640,
    # conv2 3*3*32*32+32=9248, head 1*1*32*4+4=132
    net = build_segnet(SegNetSpec(), seed=0)
    assert net.param_count() == 448 + 4640 + 9248 + 132 == 14468


def test_same_seed_same_weights_different_seed_differs():
    a = build_segnet(SegNetSpec(), seed=5)
    b = build_segnet(SegNetSpec(), seed=5)
    c = build_segnet(SegNetSpec(), seed=6)
    for name in a.values:
        assert np.array_equal(a.values[name], b.values[name])
    assert any(not np.array_equal(a.values[n], c.values[n]) for n in a.values)


def test_spec_validation():
    with pytest.raises(ValueError):
        SegNetSpec(class_count=1)
    with pytest.raises(ValueError):
        SegNetSpec(widths=())
    with pytest.raises(ValueError):
        SegNetSpec(widths=(8,), downsample=2)
    with pytest.raises(ValueError):
        DiscSpec(widths=(8, 16, 1))
    with pytest.raises(ValueError):
        DiscSpec(widths=(8, 16, 32, 64, 2))
    with pytest.raises(ValueError):
        StyleGenSpec(widths=(0,))


def test_spec_dict_round_trip():
    for spec in (SegNetSpec(), DiscSpec(), StyleGenSpec(residual=False)):
        back = spec_from_dict(spec_to_dict(spec))
        assert back == spec


# ---------------------------------------------------------------------------
# segmenter


def test_segnet_logits_keep_input_resolution():
    spec = SegNetSpec()
    net = build_segnet(spec, seed=1)
    probs, labels = predict_segmentation(net, np.zeros((2, 64, 64, 3), dtype=np.float32))
    assert probs.shape == (2, 64, 64, 4)
    assert labels.shape == (2, 64, 64)
    assert labels.dtype == np.uint8


def test_segnet_rejects_indivisible_size():
    net = build_segnet(SegNetSpec(), seed=1)
    with pytest.raises(ValueError, match="divisible"):
        predict_segmentation(net, np.zeros((30, 30, 3), dtype=np.float32))


def test_zero_parameter_net_predicts_uniform():
    net = _zeroed(build_segnet(SegNetSpec(), seed=1))
    probs, _ = predict_segmentation(net, np.random.default_rng(0).random((8, 8, 3)))
    np.testing.assert_allclose(probs, 0.25, atol=1e-7)


def test_bias_only_head_reproduces_hand_softmax():
    spec = SegNetSpec(widths=(4,), downsample=0)
    net = _zeroed(build_segnet(spec, seed=1))
    bias = np.array([0.2, 0.4, 0.6, 0.8], dtype=np.float32)
    net.values["head/b"] = bias.copy()
    probs, labels = predict_segmentation(net, np.full((8, 8, 3), 0.3, dtype=np.float32))
    e = np.exp(bias - bias.max())
    np.testing.assert_allclose(probs[0, 0], e / e.sum(), rtol=1e-6)
    assert (labels == 3).all()


def test_argmax_labels_consistent_with_probs():
    net = build_segnet(SegNetSpec(), seed=2)
    probs, labels = predict_segmentation(
        net, np.random.default_rng(1).random((2, 32, 32, 3)).astype(np.float32)
    )
    assert np.array_equal(labels, probs.argmax(axis=-1))


def test_features_node_is_downsampled_body_output():
    spec = SegNetSpec()
    net = build_segnet(spec, seed=3)
    g = Graph()
    x = g.input("x", (1, 64, 64, 3))
    pn = add_param_inputs(g, "seg", net)
    nodes = segnet_forward(g, spec, pn, x)
    assert g.shape(nodes["features"]) == (1, 16, 16, 32)
    assert g.shape(nodes["logits"]) == (1, 64, 64, 4)


# ---------------------------------------------------------------------------
# discriminator


def test_disc_score_map_shape_and_min_input():
    spec = DiscSpec()
    assert spec.min_input == 32
    net = build_discriminator(spec, seed=4)
    g = Graph()
    x = g.input("x", (2, 64, 64, 4))
    pn = add_param_inputs(g, "disc", net)
    out = disc_forward(g, spec, pn, x)
    assert g.shape(out) == (2, 2, 2, 1)

    g2 = Graph()
    x2 = g2.input("x", (1, 16, 16, 4))
    pn2 = add_param_inputs(g2, "disc", net)
    with pytest.raises(ValueError, match="smaller than minimum"):
        disc_forward(g2, spec, pn2, x2)


def test_disc_last_layer_has_no_activation():
    # zero weights and a negative last bias must come through unsquashed;
    # a trailing leaky-relu would shrink it to slope*bias
    spec = DiscSpec()
    net = _zeroed(build_discriminator(spec, seed=4))
    net.values["conv4/b"][...] = -5.0
    g = Graph()
    x = g.input("x", (1, 32, 32, 4))
    pn = add_param_inputs(g, "disc", net)
    out = disc_forward(g, spec, pn, x)
    feeds = {x: np.zeros((1, 32, 32, 4), dtype=np.float32), **param_feeds(pn, net)}
    score = forward(g, feeds)[out]
    np.testing.assert_allclose(score, -5.0, rtol=0)


# ---------------------------------------------------------------------------
# style generator


def test_residual_generator_starts_as_identity():
    spec = StyleGenSpec(residual=True)
    net = build_style_generator(spec, seed=5)
    img = np.random.default_rng(2).random((1, 16, 16, 3)).astype(np.float32)
    g = Graph()
    x = g.input("x", img.shape)
    pn = add_param_inputs(g, "gen", net)
    out = stylegen_forward(g, spec, pn, x)
    got = forward(g, {x: img, **param_feeds(pn, net)})[out]
    assert np.array_equal(got, img)


@pytest.mark.parametrize("residual", [True, False])
def test_generator_output_stays_in_unit_range(residual):
    spec = StyleGenSpec(residual=residual)
    net = build_style_generator(spec, seed=6)
    for v in net.values.values():
        v[...] += 0.3  # push away from the identity start
    img = np.random.default_rng(3).random((1, 16, 16, 3)).astype(np.float32)
    g = Graph()
    x = g.input("x", img.shape)
    pn = add_param_inputs(g, "gen", net)
    out = stylegen_forward(g, spec, pn, x)
    got = forward(g, {x: img, **param_feeds(pn, net)})[out]
    assert got.min() >= 0.0 and got.max() <= 1.0


# ---------------------------------------------------------------------------
# multi-scale prediction


def test_multi_scale_single_and_repeated_scale_are_identity():
    net = build_segnet(SegNetSpec(), seed=7)
    img = np.random.default_rng(4).random((64, 64, 3)).astype(np.float32)
    p_ref, l_ref = predict_segmentation(net, img)
    p1, l1 = multi_scale_predict(net, img, [1.0])
    assert np.array_equal(p1, p_ref) and np.array_equal(l1, l_ref)
    p2, l2 = multi_scale_predict(net, img, [1.0, 1.0])
    assert np.array_equal(p2, p_ref) and np.array_equal(l2, l_ref)


def test_multi_scale_constant_image():
    # padding-free case (uniform output) is exactly constant under resampling
    net = _zeroed(build_segnet(SegNetSpec(), seed=8))
    img = np.full((64, 64, 3), 0.4, dtype=np.float32)
    p_ms, _ = multi_scale_predict(net, img, [0.5, 1.0])
    np.testing.assert_allclose(p_ms, 0.25, atol=1e-7)

    # with nonzero weights the zero-padding halo scales with the input, so
    # probabilities agree only approximately; labels can only flip where the
    # single-scale margin is smaller than the probability deviation
    net = build_segnet(SegNetSpec(), seed=8)
    p_ref, l_ref = predict_segmentation(net, img)
    p_ms, l_ms = multi_scale_predict(net, img, [0.5, 1.0])
    dev = float(np.abs(p_ms - p_ref).max())
    assert dev < 0.05
    top2 = np.sort(p_ref, axis=-1)[..., -2:]
    margin = top2[..., 1] - top2[..., 0]
    assert np.array_equal(l_ms[margin > 2 * dev], l_ref[margin > 2 * dev])


def test_multi_scale_rejects_bad_scales():
    net = build_segnet(SegNetSpec(), seed=7)
    img = np.zeros((16, 16, 3), dtype=np.float32)
    with pytest.raises(ValueError):
        multi_scale_predict(net, img, [])
    with pytest.raises(ValueError):
        multi_scale_predict(net, img, [0.5, -1.0])


def test_resize_nearest_identity_and_block_structure():
    arr = np.arange(2 * 4 * 4 * 3, dtype=np.float64).reshape(2, 4, 4, 3)
    assert np.array_equal(resize_nearest(arr, 4, 4), arr)
    up = resize_nearest(arr, 8, 8)
    assert np.array_equal(up[:, ::2, ::2, :], arr)
    assert np.array_equal(up[:, 1::2, 1::2, :], arr)


# ---------------------------------------------------------------------------
# spectral norm


def test_spectral_norm_identity_and_diagonal():
    assert spectral_norm(np.eye(4)) == pytest.approx(1.0, rel=1e-12)
    assert spectral_norm(np.diag([3.0, 1.0])) == pytest.approx(3.0, rel=1e-12)
    assert spectral_norm(np.zeros((3, 3))) == 0.0


def test_spectral_norm_matches_svd_on_random_matrix():
    rng = np.random.default_rng(9)
    mat = rng.standard_normal((8, 8))
    want = np.linalg.svd(mat, compute_uv=False)[0]
    assert spectral_norm(mat) == pytest.approx(want, abs=1e-6)


def test_spectral_norm_scales_linearly():
    rng = np.random.default_rng(10)
    mat = rng.standard_normal((6, 4))
    base = spectral_norm(mat)
    np.testing.assert_allclose(spectral_norm(-2.5 * mat), 2.5 * base, rtol=1e-9)


def test_conv_operator_matches_dense_svd():
    rng = np.random.default_rng(11)
    w = rng.standard_normal((3, 3, 2, 3))
    op = ConvOperator(w, in_hw=(8, 8), stride=2, pad=1)
    dense = materialize(op)
    assert dense.shape == (op.out_dim, op.in_dim)
    want = np.linalg.svd(dense, compute_uv=False)[0]
    assert spectral_norm(op) == pytest.approx(want, abs=1e-5)


def test_conv_operator_adjoint_consistency():
    rng = np.random.default_rng(12)
    w = rng.standard_normal((3, 3, 2, 2))
    op = ConvOperator(w, in_hw=(6, 6), stride=1, pad=1)
    v = rng.standard_normal(op.in_dim)
    u = rng.standard_normal(op.out_dim)
    np.testing.assert_allclose(
        float(u @ op.matvec(v)), float(op.rmatvec(u) @ v), rtol=1e-10
    )


# ---------------------------------------------------------------------------
# bundles


def test_bundle_teacher_mirrors_student_shapes():
    student = build_segnet(SegNetSpec(), seed=13)
    bundle = ModelBundle(student=student, teacher=student.copy())
    for name, arr in bundle.student.values.items():
        assert bundle.teacher.values[name].shape == arr.shape
    frozen = student.frozen()
    assert not frozen.trainable and frozen.values is student.values
