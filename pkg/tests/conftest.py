import pytest

from maskrecon.data.toy import ToyConfig, generate_toy_dataset

# Pinned corpus identity for everything deterministic in this suite.
TOY_SEED = 20240501


@pytest.fixture(scope="session")
def toy_small_root(tmp_path_factory):
    """A few-image corpus for loader/pipeline tests (fast to generate)."""
    root = tmp_path_factory.mktemp("toy_small")
    cfg = ToyConfig(
        n_train=12, n_test_normal=6, n_test_anomalous=6, image_size=64, seed=7
    )
    generate_toy_dataset(cfg, root)
    return root


@pytest.fixture(scope="session")
def acceptance_toy_root(tmp_path_factory):
    """The full acceptance corpus: 200 train / 50 normal / 50 anomalous at 128."""
    root = tmp_path_factory.mktemp("toy_acceptance")
    cfg = ToyConfig(
        n_train=200, n_test_normal=50, n_test_anomalous=50,
        image_size=128, seed=TOY_SEED,
    )
    generate_toy_dataset(cfg, root)
    return root


def tiny_run_mapping(root, **overrides):
    """Run-config mapping for the desk-scale model (4 layers, width 192)."""
    mapping = {
        "seed": 0,
        "data": {"root": str(root), "layout": "aebad", "resize_to": 128, "crop_to": 128},
        "masking": {"ratio": 0.4},
        "encoder": {
            "variant": "vit_tiny_scratch", "width": 192, "depth": 4, "heads": 4,
            "include_class_token": False,
        },
        "teacher": {"family": "toy_cnn", "weights": "random"},
        "train": {"epochs": 30, "batch_size": 16},
    }
    for dotted, value in overrides.items():
        node = mapping
        keys = dotted.split(".")
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return mapping
