"""Shared test lab: deterministic corpora and a disk-cached trained zoo.

Everything here is derived from MASTER_SEED, so corpora and models are
bit-reproducible. Trained models are cached under tests/_model_cache keyed
by a digest of (spec, train config, corpus fingerprint); delete the cache
to force retraining.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from dpgd.denoisers import (
    TrainConfig,
    TrainedDenoiser,
    ZOO_SPECS,
    default_train_config,
    load_model,
    save_model,
    train,
)
from dpgd.imagecore import (
    DatasetManifest,
    derive_seed,
    extract_patches,
    make_corpus,
    synth_image,
)

MASTER_SEED = 108
SIGMA = 25.0

TESTS_DIR = Path(__file__).resolve().parent
DATA_CACHE = TESTS_DIR / "_data_cache"
MODEL_CACHE = TESTS_DIR / "_model_cache"

TRAIN_COUNT, TRAIN_SIZE = 64, 180  # 64 patches each at 40/20 -> 4096 total
TEST_COUNT, TEST_SIZE = 12, 128


def _corpus_fingerprint(split: str, count: int, size: int) -> str:
    return f"synth:v1:{split}:{count}x{size}:{MASTER_SEED}"


def train_manifest() -> DatasetManifest:
    root = DATA_CACHE / "train"
    mpath = root / "manifest.json"
    if mpath.exists():
        return DatasetManifest.load(mpath)
    return make_corpus(
        root, TRAIN_COUNT, TRAIN_SIZE, TRAIN_SIZE,
        seed=derive_seed(MASTER_SEED, "corpus/train"),
        split="train", patch_size=40, stride=20,
    )


def heldout_images():
    """12 held-out grayscale 128x128 images, disjoint seeds from training."""
    return [
        synth_image(
            derive_seed(MASTER_SEED, f"corpus/test/{k}"), TEST_SIZE, TEST_SIZE
        ).with_id(f"test-{k:02d}")
        for k in range(TEST_COUNT)
    ]


def _model_key(name: str, spec, cfg: TrainConfig) -> str:
    doc = {
        "name": name,
        "spec": spec.to_json(),
        "cfg": cfg.to_json(),
        "corpus": _corpus_fingerprint("train", TRAIN_COUNT, TRAIN_SIZE),
    }
    digest = hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()
    return f"{name}-{digest[:12]}"


def get_or_train(name: str, verbose: bool = False) -> TrainedDenoiser:
    spec = ZOO_SPECS[name]
    cfg = default_train_config(name, MASTER_SEED)
    MODEL_CACHE.mkdir(exist_ok=True)
    path = MODEL_CACHE / f"{_model_key(name, spec, cfg)}.dpgdmodel"
    if path.exists():
        return load_model(path)
    manifest = train_manifest()
    patches = extract_patches(manifest)
    model = train(
        spec, patches, cfg, model_id=name,
        provenance=_corpus_fingerprint("train", TRAIN_COUNT, TRAIN_SIZE),
        log_every=5 if verbose else 0,
    )
    save_model(model, path)
    return model


if __name__ == "__main__":
    import sys
    import time

    names = sys.argv[1:] or list(ZOO_SPECS)
    for name in names:
        t0 = time.time()
        model = get_or_train(name, verbose=True)
        print(f"{name}: ready in {time.time() - t0:.0f}s "
              f"({model.weights.size} params)", flush=True)
