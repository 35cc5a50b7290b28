import numpy as np
import pytest

from mvhash import data, model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_config(**overrides) -> model.ModelConfig:
    base = dict(view_dims=(12, 8), n_classes=3, d=8, k=4)
    base.update(overrides)
    return model.ModelConfig(**base)


def random_views(rng, view_dims, batch):
    return [rng.standard_normal((batch, dm)) for dm in view_dims]


def random_labels(rng, batch, n_classes, max_per_sample=2):
    labels = np.zeros((batch, n_classes), dtype=np.uint8)
    for i in range(batch):
        count = rng.integers(1, max_per_sample + 1)
        labels[i, rng.choice(n_classes, size=count, replace=False)] = 1
    return labels


def tiny_dataset(seed=0, n=64, dims=(10, 6), n_classes=3,
                 sizes=(40, 16, 8)) -> data.MultiViewDataset:
    cfg = data.SynthConfig(n_samples=n, view_dims=dims, n_classes=n_classes,
                           labels_per_sample=(1, 2), noise_fraction=(0.2, 0.2),
                           seed=seed)
    return data.split(data.synth(cfg), sizes, seed)


def arch_spec(config: model.ModelConfig) -> dict:
    """Architecture switches in the plain-dict form the oracles take."""
    return {
        "views_enabled": config.views_enabled,
        "fusion": config.fusion,
        "use_gate": config.use_gate,
        "use_adaptive": config.use_adaptive,
        "use_dilation": config.use_dilation,
        "shared_gate": config.shared_gate,
    }


def random_model_setup(rng, batch=None):
    """A random architecture with matching params and a random batch."""
    n_views = int(rng.integers(1, 4))
    view_dims = tuple(int(d) for d in rng.integers(3, 14, size=n_views))
    enabled = tuple(sorted(rng.choice(n_views, size=int(rng.integers(1, n_views + 1)),
                                      replace=False).tolist()))
    concat = bool(rng.integers(0, 2)) and len(enabled) > 1
    config = model.ModelConfig(
        view_dims=view_dims,
        n_classes=int(rng.integers(2, 6)),
        d=int(rng.integers(2, 10)),
        k=int(rng.integers(2, 9)),
        use_gate=bool(rng.integers(0, 2)),
        use_adaptive=False if concat else bool(rng.integers(0, 2)),
        use_dilation=bool(rng.integers(0, 2)),
        views_enabled=enabled,
        fusion="concat" if concat else "weighted_sum",
        shared_gate=bool(rng.integers(0, 2)),
    )
    params = model.ModelParams.init(config, seed=int(rng.integers(0, 2**31)))
    # nudge view weights off 1/M so adaptivity is visible
    for m in config.views_enabled:
        name = f"view_weight.{m}"
        if name in params.tensors:
            params.tensors[name].data[:] = rng.uniform(0.2, 1.5)
    batch = batch or int(rng.integers(1, 7))
    views = random_views(rng, view_dims, batch)
    return config, params, views
