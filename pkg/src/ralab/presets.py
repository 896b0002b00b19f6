"""Named experiment presets.

mnist / fashion-mnist carry the full-scale configuration (CNN, budget 5k/6k,
200 initial, 200 per stage) and expect the IDX files under RALAB_MNIST_DIR /
RALAB_FASHION_DIR. mnist-desk is the 1/5-scale homothety on a 6,000-item
subset; digits-desk is the same scale on the bundled rendered-digit corpus,
which needs no files on disk.
"""

import os

_FULL_TRAIN = {"lr": 0.01, "momentum": 0.9, "batch_size": 64, "epochs_per_stage": 10, "patience": 5}

_MNIST_ATTACKS = {
    "train_attack": "mnist-train",
    "eval_pgd": "mnist-eval",
    "eval_square": "mnist-square",
}


def _idx_paths(env_var, default_dir):
    root = os.environ.get(env_var, default_dir)
    return {
        "kind": "idx",
        "train_images": os.path.join(root, "train-images-idx3-ubyte"),
        "train_labels": os.path.join(root, "train-labels-idx1-ubyte"),
        "test_images": os.path.join(root, "t10k-images-idx3-ubyte"),
        "test_labels": os.path.join(root, "t10k-labels-idx1-ubyte"),
    }


def experiment_presets():
    return {
        "mnist": {
            "dataset": _idx_paths("RALAB_MNIST_DIR", "data/mnist"),
            "model": {"kind": "cnn", "dropout": 0.1},
            "budget": 5000,
            "initial": 200,
            "per_stage": 200,
            "train": dict(_FULL_TRAIN),
            **_MNIST_ATTACKS,
        },
        "fashion-mnist": {
            "dataset": _idx_paths("RALAB_FASHION_DIR", "data/fashion-mnist"),
            "model": {"kind": "cnn", "dropout": 0.1},
            "budget": 6000,
            "initial": 200,
            "per_stage": 200,
            "train": dict(_FULL_TRAIN),
            **_MNIST_ATTACKS,
        },
        "mnist-desk": {
            "dataset": {**_idx_paths("RALAB_MNIST_DIR", "data/mnist"), "subset": 6000},
            "model": {"kind": "mlp", "hidden": [256, 128], "dropout": 0.1},
            "budget": 1000,
            "initial": 100,
            "per_stage": 100,
            "train": dict(_FULL_TRAIN),
            **_MNIST_ATTACKS,
        },
        "digits-desk": {
            "dataset": {"kind": "synth-digits", "train_size": 6000, "test_size": 2000, "seed": 7},
            "model": {"kind": "mlp", "hidden": [256, 128], "dropout": 0.1},
            "budget": 1000,
            "initial": 100,
            "per_stage": 100,
            "train": dict(_FULL_TRAIN),
            **_MNIST_ATTACKS,
        },
    }
