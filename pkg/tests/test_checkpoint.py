import numpy as np
import pytest

from bidistill import checkpoint as ck
from bidistill.baselines import AeModel, EnsembleModel, FillingModel, SingleModalityModel
from bidistill.data import Standardizer, apply_missingness
from bidistill.gradcheck import TOY_DIMS, jitter
from bidistill.model import BDModel, build_clinical_only, build_image_only
from bidistill.numcore import RngStream


def _models():
    r = RngStream(3, "ck")
    ae = AeModel(TOY_DIMS, r.substream("ae"), "image", hidden=7)
    ae.set_stage1(FillingModel(TOY_DIMS, r.substream("f1"), "image"))
    return [
        BDModel(TOY_DIMS, r.substream("bd"), "clinical"),
        BDModel(TOY_DIMS, r.substream("bd2"), "image"),
        FillingModel(TOY_DIMS, r.substream("f"), "clinical"),
        ae,
        EnsembleModel(TOY_DIMS, r.substream("e"), 0.3),
        SingleModalityModel(build_image_only(TOY_DIMS, r.substream("i")), "image"),
        SingleModalityModel(build_clinical_only(TOY_DIMS, r.substream("c")), "clinical"),
    ]


@pytest.mark.parametrize("idx", range(7))
def test_round_trip_preserves_predictions(idx, toy_samples, tmp_path):
    model = _models()[idx]
    params = ck.model_params(ck.method_of(model), model)
    jitter(params, RngStream(idx, "j"))
    st = Standardizer([1.0, 2.0], [3.0, 4.0])
    path = ck.save(tmp_path / "m.bdck", model, {"lr": 0.01}, st)
    back = ck.load(path)
    assert back.method == ck.method_of(model) and back.config == {"lr": 0.01}
    assert back.standardizer.to_dict() == st.to_dict()
    assert ck.to_bytes(back.model, {"lr": 0.01}, st) == (tmp_path / "m.bdck").read_bytes()
    role = getattr(model, "role", "clinical")
    for s in toy_samples[:4] + apply_missingness(toy_samples[4:8], 1.0, role, 0):
        assert np.array_equal(back.model.predict(s), model.predict(s))


def test_rejects_corrupt_files(tmp_path):
    data = ck.to_bytes(_models()[0])
    with pytest.raises(ck.CheckpointError, match="magic"):
        ck.from_bytes(b"XXXXX" + data[5:])
    with pytest.raises(ck.CheckpointError, match="payload"):
        ck.from_bytes(data[:-8])
    with pytest.raises(ck.CheckpointError):
        ck.load(tmp_path / "none.bdck")
