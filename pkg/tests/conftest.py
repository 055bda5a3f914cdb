"""Session fixtures for the trained pipeline.

Heavy artifacts (dataset, checkpoints, bank) are cached under tests/_build
keyed by their build configuration, so repeated test runs skip training.
"""

import json
import os

import pytest

from conceptdiff.concepts import (ConceptBank, bank_from_retrieval, category_similarity,
                                  retrieve_concepts_procedural, select_valid_concepts)
from conceptdiff.data import build_dataset, default_categories, load_dataset
from conceptdiff.diffusion import DenoiserConfig, make_schedule, train_denoiser
from conceptdiff.embedder import EmbedderConfig, train_embedder
from conceptdiff.guidance import ClassifierConfig, train_guidance_classifier
from conceptdiff.modelio import load_model, save_model

BUILD_DIR = os.path.join(os.path.dirname(__file__), "_build")

# bring-up calibration: denoiser steps set by sample quality, embedder by
# the activation-margin criterion
DATA_N_PER_CLASS = 500
DATA_SEED = 0
DENOISER_CFG = DenoiserConfig(channels=40, steps=6000, batch=48, lr=2e-3)
EMBEDDER_CFG = EmbedderConfig(steps=2400)
CLASSIFIER_CFG = ClassifierConfig(steps=800)
SELECT_K = 5


def _cached(path, build_fn, load_fn):
    os.makedirs(BUILD_DIR, exist_ok=True)
    if not os.path.exists(path):
        build_fn(path)
    return load_fn(path)


@pytest.fixture(scope="session")
def sched():
    return make_schedule(1000)


@pytest.fixture(scope="session")
def dataset():
    path = os.path.join(BUILD_DIR, f"data_{DATA_N_PER_CLASS}_{DATA_SEED}")

    def build(p):
        build_dataset(default_categories(), DATA_N_PER_CLASS, DATA_SEED, p)

    return _cached(path, build, load_dataset)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("tiny") / "data"
    build_dataset(default_categories(), 24, 1, path)
    return load_dataset(path)


@pytest.fixture(scope="session")
def raw_phrases(dataset):
    cats = dataset.categories
    return {
        c.id: [p.text for p in retrieve_concepts_procedural(c, dataset.vocab, cats)]
        for c in cats
    }


@pytest.fixture(scope="session")
def embedder(dataset, raw_phrases, sched):
    path = os.path.join(BUILD_DIR, f"embedder_s{EMBEDDER_CFG.steps}.ckpt")

    def build(p):
        model = train_embedder(dataset, raw_phrases, EMBEDDER_CFG, sched, 0)
        save_model(p, model)

    return _cached(path, build, load_model)


@pytest.fixture(scope="session")
def bank(dataset, raw_phrases, embedder):
    path = os.path.join(BUILD_DIR, f"bank_k{SELECT_K}.json")

    def build(p):
        b = bank_from_retrieval(dataset.categories, raw_phrases)
        images = {c.id: dataset.images_of(c.id, "train")[:64] for c in dataset.categories}
        b = select_valid_concepts(b, embedder, images, k=SELECT_K)
        b.similarity = category_similarity(embedder, dataset.categories)
        b.embedder_checksum = "session"
        b.save(p)

    return _cached(path, build, ConceptBank.load)


@pytest.fixture(scope="session")
def trained_denoiser(dataset, sched):
    path = os.path.join(BUILD_DIR, f"denoiser_s{DENOISER_CFG.steps}_c{DENOISER_CFG.channels}.ckpt")

    def build(p):
        model = train_denoiser(dataset, sched, DENOISER_CFG, 0)
        save_model(p, model)
        with open(p + ".losses.json", "w") as fh:
            json.dump(model.loss_history, fh)

    return _cached(path, build, load_model)


@pytest.fixture(scope="session")
def denoiser_loss_history(trained_denoiser):
    path = os.path.join(
        BUILD_DIR, f"denoiser_s{DENOISER_CFG.steps}_c{DENOISER_CFG.channels}.ckpt.losses.json")
    with open(path) as fh:
        return json.load(fh)


@pytest.fixture(scope="session")
def guidance_classifier(dataset, sched):
    path = os.path.join(BUILD_DIR, f"gcls_s{CLASSIFIER_CFG.steps}.ckpt")

    def build(p):
        model = train_guidance_classifier(dataset, sched, CLASSIFIER_CFG, 0)
        save_model(p, model)

    return _cached(path, build, load_model)


@pytest.fixture(scope="session")
def artifact_paths(dataset, embedder, bank, trained_denoiser, guidance_classifier):
    """Checkpoint file paths for CLI-level tests."""
    return {
        "data": os.path.join(BUILD_DIR, f"data_{DATA_N_PER_CLASS}_{DATA_SEED}"),
        "embedder": os.path.join(BUILD_DIR, f"embedder_s{EMBEDDER_CFG.steps}.ckpt"),
        "bank": os.path.join(BUILD_DIR, f"bank_k{SELECT_K}.json"),
        "ddpm": os.path.join(
            BUILD_DIR, f"denoiser_s{DENOISER_CFG.steps}_c{DENOISER_CFG.channels}.ckpt"),
        "cls": os.path.join(BUILD_DIR, f"gcls_s{CLASSIFIER_CFG.steps}.ckpt"),
    }
