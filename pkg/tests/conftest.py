import numpy as np
import pytest

from pgl import diagnostics
from pgl.data import SyntheticConfig, generate_synthetic
from pgl.driver import RunConfig
from pgl.gnn import ModelBundle, ModelConfig


@pytest.fixture(autouse=True)
def _clean_counters():
    diagnostics.reset()
    yield
    diagnostics.reset()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_model(in_dim=5, C=3, hidden=6, depth=1, seed=0, dropout=0.0):
    return ModelBundle(ModelConfig(in_dim=in_dim, n_classes=C, hidden=hidden, depth=depth,
                                   dropout=dropout), seed=seed)


# Shifted synthetic suite shared by the end-to-end tests and the acceptance module.
SUITE_DATA = dict(C_known=3, C_unknown=2, samples_per_class=100, dim=16, separation=4.0,
                  noise=1.0, unknown_radius=0.3, shift=3.0, shift_axis=0)
SUITE_RUN = dict(C=3, alpha=0.1, beta=0.4, hidden=32, batch_size=4, epochs_per_step=4,
                 pretrain_epochs=30, lr_backbone=1e-3, lr_gnn=3e-3, lr_classifier=3e-3,
                 lr_discriminator=3e-3)


def suite_data(seed, **kw):
    return generate_synthetic(SyntheticConfig(**{**SUITE_DATA, **kw, "seed": seed}))


def suite_config(seed=0, **kw):
    return RunConfig(**{**SUITE_RUN, **kw, "seed": seed})


def kink_margin(fn):
    """Smallest distance of any leaky-relu input or nonzero ``|a - b|`` component to its kink
    while evaluating ``fn()``.

    Central differences are only meaningful when no kink lies within the step
    size; exact zeros (identical nodes, the diagonal) stay zero under any
    parameter perturbation and are skipped.
    """
    from pgl import autodiff as ad
    seen = [np.inf]
    orig_relu, orig_abs = ad.leaky_relu, ad.absdiff

    def relu(a, slope=0.01):
        seen[0] = min(seen[0], np.abs(ad.as_tensor(a).data).min())
        return orig_relu(a, slope)

    def absdiff(a, b):
        d = np.abs(ad.as_tensor(a).data - ad.as_tensor(b).data)
        if (d > 0).any():
            seen[0] = min(seen[0], d[d > 0].min())
        return orig_abs(a, b)
    ad.leaky_relu, ad.absdiff = relu, absdiff
    try:
        fn()
    finally:
        ad.leaky_relu, ad.absdiff = orig_relu, orig_abs
    return seen[0]


def episode_graph(seed, C=3, B=2, dim=5, hidden=6, depth=1, margin=1e-3):
    """Random ``B``-episode graph and model whose forward pass keeps every kink at
    least ``margin`` away; redraws from the seed stream until one does."""
    from pgl.data import Dataset, FeatureRecord
    from pgl.episodic import build_batch_initial, episodes_to_batch
    from pgl.gnn import forward_graph
    rng = np.random.default_rng(seed)
    while True:
        src = Dataset(FeatureRecord(f"s{i}", "source", i % C, rng.normal(size=dim)) for i in range(3 * C))
        tgt = Dataset(FeatureRecord(f"t{i}", "target", -1, rng.normal(size=dim)) for i in range(3 * C))
        batch = episodes_to_batch(build_batch_initial(src, tgt, C, B, rng))
        model = small_model(in_dim=dim, C=C, hidden=hidden, depth=depth, seed=int(rng.integers(2**31)))
        for name, t in model.params.items():
            if name.endswith(".b"):
                t.data = rng.normal(scale=0.3, size=t.shape)
        m = kink_margin(lambda: forward_graph(batch, model))
        if m > margin:
            return model, batch
