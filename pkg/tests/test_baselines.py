import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bidistill.baselines import (
    AeModel,
    EnsembleModel,
    FillingModel,
    SequencingError,
    SingleModalityModel,
    fuse,
    train_ae,
    train_ae_stage2,
)
from bidistill.data import apply_missingness
from bidistill.gradcheck import TOY_DIMS, jitter, toy_sample
from bidistill.model import UnroutableSampleError, build_image_only
from bidistill.numcore import ConfigError, RngStream
from bidistill.train import TrainConfig

TINY = dict(d_h=8, expansion=2, prompt_length=3, lr=1e-2, max_epochs=2, patience=1)


def _filling(role="clinical"):
    m = FillingModel(TOY_DIMS, RngStream(1, "fill"), role)
    jitter(m.params, RngStream(1, "j"))
    return m


def test_filling_absent_equals_explicit_zeros(toy_samples):
    m = _filling()
    for s in toy_samples:
        masked = dataclasses.replace(s, clinical_present=False)
        zeroed = dataclasses.replace(s, clinical=np.zeros(TOY_DIMS.d_c))
        assert np.array_equal(m.predict(masked), m.predict(zeroed))


def test_filling_image_role_zero_patch(toy_samples):
    m = _filling("image")
    s = toy_samples[0]
    masked = dataclasses.replace(s, image_present=False)
    zeroed = dataclasses.replace(s, bag=np.zeros((1, TOY_DIMS.d_w)))
    assert np.array_equal(m.predict(masked), m.predict(zeroed))
    with pytest.raises(UnroutableSampleError):
        m.predict(dataclasses.replace(s, clinical_present=False))


def test_filling_rate_one_is_whole_set_zero_fill(toy_samples):
    m = _filling()
    masked = apply_missingness(toy_samples, 1.0, "clinical", 3)
    zeroed = [dataclasses.replace(s, clinical=np.zeros(TOY_DIMS.d_c)) for s in toy_samples]
    assert np.array_equal(np.array([m.predict(s) for s in masked]), np.array([m.predict(s) for s in zeroed]))


def test_ae_needs_stage1():
    m = AeModel(TOY_DIMS, RngStream(0, "ae"))
    with pytest.raises(SequencingError):
        m.predict(toy_sample(RngStream(0, "s")))
    with pytest.raises(SequencingError):
        train_ae_stage2(m, [], [], TrainConfig())


def test_ae_learns_linear_dependence():
    rng = RngStream(0, "ae")
    m = AeModel(TOY_DIMS, rng.substream("m"), "clinical", hidden=32)
    m.set_stage1(FillingModel(TOY_DIMS, rng.substream("f"), "clinical"))
    samples = [toy_sample(rng.substream(str(i)), sid=f"s{i}") for i in range(40)]
    A = rng.substream("A").normal(0, 0.5, size=(6, 10))
    feats = {}
    for s in samples:
        k = rng.substream("k" + s.sample_id).normal(size=6)
        feats[s.sample_id] = (k, k @ A)
    m.stage1_features = lambda s: feats[s.sample_id]
    cfg = TrainConfig(lr=0.02, momentum=0.9, weight_decay=0.0, max_epochs=300, patience=300)
    log = train_ae_stage2(m, samples, samples, cfg)
    assert -log.best_metric < 1e-3


def test_ae_training_leaves_stage1_untouched(small_data):
    tr, va, _ = small_data
    m, log = train_ae(tr, va, TrainConfig(**TINY), 8)
    assert m.stage1.params.digest() == m.stage1_digest
    assert set(log.stages) == {"stage1", "stage2"}
    s = apply_missingness(tr[:3], 1.0)[0]
    p = m.predict(s)
    assert p.shape == (2,) and abs(p.sum() - 1) < 1e-12


def test_ensemble_fusion_examples():
    assert np.allclose(fuse([0.8, 0.2], [0.6, 0.4], 0.5), [0.7, 0.3])
    assert np.allclose(fuse([0.8, 0.2], [0.6, 0.4], 1.0), [0.8, 0.2])
    with pytest.raises(ConfigError):
        EnsembleModel(TOY_DIMS, None, 1.5)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_ensemble_fusion_is_distribution(a, b, alpha):
    p = fuse([a, 1 - a], [b, 1 - b], alpha)
    assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-12


def test_ensemble_routes_by_presence(toy_samples):
    m = EnsembleModel(TOY_DIMS, RngStream(0, "ens"), 0.5)
    s = toy_samples[1]
    no_cli = dataclasses.replace(s, clinical_present=False)
    no_img = dataclasses.replace(s, image_present=False)
    assert np.array_equal(m.predict(no_cli), m.p_img(s))
    assert np.array_equal(m.predict(no_img), m.p_cli(s))
    assert np.allclose(m.predict(s), 0.5 * (m.p_img(s) + m.p_cli(s)))
    with pytest.raises(UnroutableSampleError):
        m.predict(dataclasses.replace(s, clinical_present=False, image_present=False))


def test_single_modality_uniform_when_missing(toy_samples):
    m = SingleModalityModel(build_image_only(TOY_DIMS, RngStream(0, "i")), "image")
    s = toy_samples[0]
    assert np.array_equal(m.predict(dataclasses.replace(s, image_present=False)), [0.5, 0.5])
    assert np.array_equal(m.predict(dataclasses.replace(s, clinical_present=False)), m.predict(s))
