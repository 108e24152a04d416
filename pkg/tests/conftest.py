import numpy as np
import pytest

from scrapline.mil import MilModel, ModelConfig


def make_toy_model(sigma_ref=2.0):
    """Hand-set model: predicted contamination = mean of 1-dim layer features,
    classification confidently 'p'."""
    cfg = ModelConfig(feature_dim=1, enc_dim=1, attn_dim=1, head_dim=1,
                      class_num=2, class_names=("p", "q"), sigma_ref=sigma_ref)
    model = MilModel(cfg, seed=0)
    st = model.store
    for name in st.names():
        st[name].data[:] = 0.0
    st["enc.w"].data[:] = 1.0
    st["reg.w1"].data[:] = 1.0
    st["reg.w2"].data[:] = 1.0
    st["cls.b2"].data[:] = np.array([[4.0, 0.0]])
    model.finalize_version()
    return model


@pytest.fixture
def toy_model_fixture():
    return make_toy_model()
