import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lrt import datagen

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TINY = dict(n_base_classes=6, n_inc_sessions=2, n_way=2, n_shot=3, samples_per_base_class=12,
            n_test_per_class=4, H=4, W=4, D_raw=6, d_tok=6, D_T=8, vocab_size=24)

# small but complete training config for protocol-level tests
FAST = dict(epochs=3, batch_size=16, prompt_steps=5, d_v=8, align_steps=20, align_classes=8,
            align_per_class=4, align_batch=16)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_dataset():
    return datagen.generate(datagen.GeneratorConfig(seed=3, **TINY))
