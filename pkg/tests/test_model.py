import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bidistill.gradcheck import TOY_DIMS, jitter
from bidistill.model import (
    BDModel,
    EmptyBagError,
    ModelDims,
    UnroutableSampleError,
    attention_pool,
    build_multimodal,
    build_singlemodal,
    build_wsi_missing_variant,
    export_features,
    route_inference,
)
from bidistill.numcore import MLP, ConfigError, DimensionError, ParamStore, RngStream, softmax_temp

from conftest import make_sample


def model(role="clinical", seed=0):
    m = BDModel(TOY_DIMS, RngStream(seed, "m"), role)
    jitter(m.params, RngStream(seed, "j"))
    return m


def test_attention_pool_singleton():
    head = MLP(ParamStore(), "h", [3, 2, 1], RngStream(0, "h"))
    f = np.array([[1.0, -2.0, 0.5]])
    pooled, w = attention_pool(f, head)
    assert w.tolist() == [1.0]
    assert np.array_equal(pooled, f[0])


def test_attention_pool_equal_patches():
    head = MLP(ParamStore(), "h", [3, 2, 1], RngStream(0, "h"))
    f = np.tile([0.25, 1.0, -3.0], (3, 1))
    pooled, w = attention_pool(f, head)
    assert np.allclose(w, 1 / 3) and np.allclose(pooled, f[0])


def test_attention_pool_hand_softmax():
    # linear head whose logits are (ln 3, 0) for the two patches
    ps = ParamStore()
    head = MLP(ps, "h", [2, 1], None)
    ps["h.0.w"].value[:] = [[np.log(3.0)], [0.0]]
    f = np.array([[1.0, 0.0], [0.0, 1.0]])
    pooled, w = attention_pool(f, head)
    assert np.allclose(w, [0.75, 0.25], atol=1e-15)
    assert np.allclose(pooled, 0.75 * f[0] + 0.25 * f[1])


def test_attention_pool_empty():
    head = MLP(ParamStore(), "h", [3, 1], None)
    with pytest.raises(EmptyBagError):
        attention_pool(np.zeros((0, 3)), head)


@given(st.integers(1, 9), st.integers(0, 500))
def test_attention_weights_are_a_distribution(t, seed):
    m = model(seed=seed % 7)
    bag = RngStream(seed, "b").normal(0, 3, size=(t, TOY_DIMS.d_w))
    _, (cache, att) = m.multi.paths[0].forward(bag)
    assert np.all(att >= 0) and abs(att.sum() - 1) < 1e-12 and att.shape == (t,)


@given(st.integers(2, 8), st.integers(0, 500))
def test_outputs_invariant_under_patch_permutation(t, seed):
    m = model(seed=seed % 5)
    rng = RngStream(seed, "p")
    s = make_sample(rng, t=t)
    perm = rng.permutation(t)
    s2 = dataclasses.replace(s, bag=s.bag[perm])
    for branch in (m.multi, m.single):
        a, b = branch.forward(s.bag, s.clinical), branch.forward(s2.bag, s2.clinical)
        assert np.allclose(a.fused, b.fused, rtol=1e-12, atol=1e-13)
        assert np.allclose(a.probs, b.probs, rtol=1e-12, atol=1e-14)


def test_all_zero_parameters_give_uniform_output(toy_samples):
    m = BDModel(TOY_DIMS, None, "clinical")
    for s in toy_samples[:3]:
        assert np.array_equal(m.multi.forward(s.bag, s.clinical).logits, [0.0, 0.0])
        assert np.array_equal(m.multi.forward(s.bag, s.clinical).probs, [0.5, 0.5])
        assert np.array_equal(m.single.forward(s.bag).probs, [0.5, 0.5])


def test_multimodal_forward_matches_hand_computation():
    dims = ModelDims(d_w=2, d_c=2, d_h=2, expansion=1, att_hidden=2, proj_dim=2, prompt_length=2,
                     prompt_hidden=(2, 2))
    br = build_multimodal(dims, RngStream(3, "hand"), "clinical")
    jitter(br.params, RngStream(4, "j"), 0.3)
    P = {n: p.value for n, p in br.params.items()}
    bag = np.array([[0.5, -1.0], [1.5, 0.25]])
    cli = np.array([0.3, -0.7])
    relu = lambda v: np.maximum(v, 0)
    h = relu(bag @ P["mul.img.adapter.w"] + P["mul.img.adapter.b"])
    a1 = relu(h @ P["mul.img.att.0.w"] + P["mul.img.att.0.b"])
    a2 = relu(a1 @ P["mul.img.att.1.w"] + P["mul.img.att.1.b"])
    s = (a2 @ P["mul.img.att.2.w"])[:, 0] + P["mul.img.att.2.b"][0]
    w = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
    f_img = w @ h
    f_cli = relu(cli @ P["mul.cli.fc.w"] + P["mul.cli.fc.b"])
    z = np.concatenate([f_img, f_cli]) @ P["mul.cls.w"] + P["mul.cls.b"]
    out = br.forward(bag, cli)
    assert np.allclose(out.fused, np.concatenate([f_img, f_cli]), rtol=1e-13)
    assert np.allclose(out.logits, z, rtol=1e-13)
    assert abs(out.probs.sum() - 1) < 1e-15


def test_shapes_and_prompt_mapper_layout():
    dims = ModelDims()
    sgl = build_singlemodal(dims, RngStream(0, "s"), "clinical")
    prompt = sgl.paths[1]
    sizes = [(lay.n_in, lay.n_out) for lay in prompt.mapper.layers]
    assert sizes == [(50, 100), (100, 50), (50, dims.d_cf)] and dims.d_cf == 100
    mul = build_multimodal(dims, RngStream(0, "m"), "clinical")
    assert mul.paths[1].out_dim == prompt.out_dim
    assert mul.proj.n_in == dims.d_h and mul.proj.n_out == 64
    assert mul.cls.n_in == dims.d_h + dims.d_cf and mul.cls.n_out == 2
    att = [(lay.n_in, lay.n_out) for lay in mul.paths[0].att.layers]
    assert att == [(128, 64), (64, 64), (64, 1)]


def test_fused_length_is_sum_of_parts(toy_samples):
    m = model()
    s = toy_samples[0]
    for out in (m.multi.forward(s.bag, s.clinical), m.single.forward(s.bag)):
        assert len(out.fused) == len(out.feats[0]) + len(out.feats[1])


def test_prompt_feature_is_sample_independent(toy_samples):
    m = model()
    feats = [m.single.forward(s.bag).feats[1] for s in toy_samples]
    assert all(np.array_equal(feats[0], f) for f in feats)


def test_branch_parameters_disjoint():
    m = model()
    assert not set(m.multi.params.names()) & set(m.single.params.names())
    assert not {id(p) for _, p in m.multi.params.items()} & {id(p) for _, p in m.single.params.items()}


def test_mutating_one_branch_leaves_the_other(toy_samples):
    m = model()
    s = toy_samples[1]
    before = m.multi.forward(s.bag, s.clinical).probs.copy()
    for _, p in m.single.params.items():
        p.value += 1.0
    assert np.array_equal(m.multi.forward(s.bag, s.clinical).probs, before)


def test_dimension_errors(toy_samples):
    m = model()
    s = toy_samples[0]
    with pytest.raises(DimensionError):
        m.multi.forward(s.bag, np.zeros(TOY_DIMS.d_c + 1))
    with pytest.raises(DimensionError):
        m.multi.forward(np.zeros((2, TOY_DIMS.d_w + 1)), s.clinical)
    with pytest.raises(EmptyBagError):
        m.single.forward(np.zeros((0, TOY_DIMS.d_w)))


def test_routing_clinical_role(toy_samples):
    m = model()
    s = toy_samples[2]
    assert np.array_equal(m.predict(s), m.multi.forward(s.bag, s.clinical).probs)
    absent = dataclasses.replace(s, clinical_present=False)
    assert np.array_equal(m.predict(absent), m.single.forward(s.bag).probs)
    assert m.route(s) == "multi" and m.route(absent) == "single"
    with pytest.raises(UnroutableSampleError):
        m.predict(dataclasses.replace(absent, image_present=False))


def test_routing_image_role(toy_samples):
    m = model("image")
    s = toy_samples[2]
    assert np.array_equal(m.predict(s), m.multi.forward(s.bag, s.clinical).probs)
    absent = dataclasses.replace(s, image_present=False)
    assert np.array_equal(route_inference(absent, m.multi, m.single, "image"),
                          m.single.forward(None, s.clinical).probs)
    with pytest.raises(UnroutableSampleError):
        m.predict(dataclasses.replace(s, clinical_present=False))


def test_wsi_missing_variant():
    br = build_wsi_missing_variant(TOY_DIMS, RngStream(0, "w"), "image")
    assert [p.kind for p in br.paths] == ["prompt", "clinical"]
    assert br.paths[0].out_dim == TOY_DIMS.d_h
    with pytest.raises(ConfigError):
        build_wsi_missing_variant(TOY_DIMS, None, "clinical")
    with pytest.raises(ConfigError):
        BDModel(TOY_DIMS, None, "genomics")
    default = build_singlemodal(TOY_DIMS, None, "clinical")
    assert [p.kind for p in default.paths] == ["image", "prompt"]


def test_export_features(tmp_path, toy_samples):
    m = model()
    path = tmp_path / "f.csv"
    export_features(m.multi, toy_samples[:3], path)
    lines = path.read_text().splitlines()
    assert len(lines) == 4
    assert lines[0].split(",")[:3] == ["sample_id", "label", "f0"]
    row = lines[1].split(",")
    pooled = m.multi.forward(toy_samples[0].bag, toy_samples[0].clinical).feats[0]
    assert np.array_equal(np.array([float(v) for v in row[2:]]), pooled)
    first = path.read_bytes()
    export_features(m.multi, toy_samples[:3], path)
    assert path.read_bytes() == first


def test_softmax_of_branch_logits():
    m = model()
    s = make_sample(RngStream(1, "s"))
    out = m.single.forward(s.bag)
    assert np.array_equal(out.probs, softmax_temp(out.logits))
