import pytest
from hypothesis import HealthCheck, settings

from bidistill.data import Sample, SynthConfig, Standardizer, split_dataset, synth_generate
from bidistill.gradcheck import TOY_DIMS
from bidistill.numcore import RngStream

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def dims():
    return TOY_DIMS


def make_sample(rng, dims=TOY_DIMS, t=3, label=1, sid="x", split="test"):
    return Sample(sid, label, rng.normal(size=(t, dims.d_w)), rng.normal(size=dims.d_c), True, True, split, True)


@pytest.fixture
def toy_samples(dims):
    rng = RngStream(7, "fixture")
    return [make_sample(rng.substream(str(i)), dims, t=1 + i % 4, label=i % 2, sid=f"t{i}") for i in range(12)]


@pytest.fixture(scope="session")
def small_data():
    """Standardized (train, val, test) of a 120-sample synthetic set with d_w = 8."""
    cfg = SynthConfig(n=120, d_w=8, t_min=2, t_max=6, seed=5)
    tr, va, te = split_dataset(synth_generate(cfg), seed=5)
    st = Standardizer.fit(tr)
    return st.apply(tr), st.apply(va), st.apply(te)
