import dataclasses

import numpy as np
import pytest

from conceptdiff import autodiff as ad
from conceptdiff import embedder as E
from conceptdiff.data import AttributeVocab
from conceptdiff.diffusion import q_sample
from conceptdiff.errors import ArgumentError
from conceptdiff.seeds import rng_for


def test_unit_norm_on_random_input(embedder):
    rng = rng_for(0, "unit")
    for _ in range(5):
        img = rng.uniform(-1, 1, (3, 16, 16)).astype(np.float32)
        v = embedder.embed_image(img)
        assert abs(np.linalg.norm(v.astype(np.float64)) - 1.0) <= 1e-5


def test_identical_images_identical_embeddings(embedder):
    img = rng_for(1, "img").uniform(-1, 1, (3, 16, 16)).astype(np.float32)
    np.testing.assert_array_equal(embedder.embed_image(img), embedder.embed_image(img))


def test_embed_image_shape_check(embedder):
    with pytest.raises(ArgumentError):
        embedder.embed_image(np.zeros((3, 8, 8), np.float32))


def test_image_gradient_matches_finite_differences(embedder):
    rng = rng_for(2, "grad")
    v = rng.standard_normal(embedder.dim)
    v = ad.Tensor((v / np.linalg.norm(v)).astype(np.float32))

    def f(x):
        e = embedder.image_tower(ad.reshape(x, (1, 3, 16, 16)))
        return ad.dot(ad.reshape(e, (embedder.dim,)), v)

    x = ad.Tensor(rng.uniform(-1, 1, (3, 16, 16)).astype(np.float32))
    _, g = ad.value_and_grad(f, x)
    g_fd = ad.finite_diff_grad(f, x, 1e-3)
    rel = np.abs(g.data - g_fd.data).max() / np.abs(g_fd.data).max()
    assert rel <= 1e-3


def test_phrase_determinism(embedder):
    p1 = embedder.tokenizer.phrase("vivid red body")
    p2 = embedder.tokenizer.phrase("vivid red body")
    np.testing.assert_array_equal(embedder.embed_concept(p1), embedder.embed_concept(p2))


def test_token_permutation_invariance(embedder):
    a = embedder.tokenizer.phrase("red circle")
    b = embedder.tokenizer.phrase("circle red")
    np.testing.assert_array_equal(embedder.embed_concept(a), embedder.embed_concept(b))


def test_oov_hashes_into_buckets(embedder):
    tok = embedder.tokenizer
    phrase = tok.phrase("zyzzyva contraption")
    assert all(t >= len(tok.words) for t in phrase.tokens)
    assert all(t < tok.n_ids for t in phrase.tokens)
    embedder.embed_concept(phrase)  # no error


def test_empty_phrase_rejected(embedder):
    with pytest.raises(ArgumentError):
        embedder.tokenizer.phrase("...")


def test_activation_score_identity(embedder, dataset):
    imgs = [dataset.train_x[0]]
    phrase = embedder.tokenizer.phrase("vivid red body")
    a = E.activation_score(embedder, imgs, phrase)
    assert -1.0 <= a <= 1.0


def test_activation_permutation_invariant(embedder, dataset):
    imgs = list(dataset.train_x[:6])
    phrase = embedder.tokenizer.phrase("vivid red body")
    a1 = E.activation_score(embedder, imgs, phrase)
    a2 = E.activation_score(embedder, imgs[::-1], phrase)
    assert a1 == pytest.approx(a2, abs=1e-12)


def test_activation_empty_list_rejected(embedder):
    with pytest.raises(ArgumentError):
        E.activation_score(embedder, [], embedder.tokenizer.phrase("red"))


def test_activation_extremes():
    # cosine of identical / orthogonal mean embeddings, via a stub embedder
    class Stub:
        dim = 4

        def embed_images(self, images):
            return np.asarray(images, dtype=np.float32)

        def embed_concept(self, phrase):
            return np.array([1.0, 0, 0, 0], dtype=np.float32)

    same = E.activation_score(Stub(), [np.array([1.0, 0, 0, 0])], "c")
    ortho = E.activation_score(Stub(), [np.array([0.0, 1, 0, 0])], "c")
    assert same == pytest.approx(1.0, abs=1e-7)
    assert ortho == pytest.approx(0.0, abs=1e-7)


def test_trained_margin(embedder, dataset, raw_phrases):
    margin = E.activation_margin(embedder, dataset, raw_phrases, split="test")
    assert margin >= 0.2


def test_noisy_margin(embedder, dataset, raw_phrases, sched):
    # evaluate on held-out images noised to the abar = 0.5 level
    t_half = int(np.argmin(np.abs(sched.alpha_bar - 0.5)))
    rng = rng_for(3, "noisy")
    noised_x = q_sample(dataset.test_x, t_half,
                        rng.standard_normal(dataset.test_x.shape).astype(np.float32),
                        sched).astype(np.float32)
    noised = dataclasses.replace(dataset, test_x=noised_x)
    margin = E.activation_margin(embedder, noised, raw_phrases, split="test")
    assert margin >= 0.1


def test_infonce_init_loss_near_log_batch(dataset, raw_phrases, sched):
    # untrained two-tower loss sits at the uniform-softmax value ln(B)
    cfg = E.EmbedderConfig(steps=0, batch=32)
    model = E.train_embedder(dataset, raw_phrases, cfg, sched, 0)
    rng = rng_for(4, "init")
    idx = rng.integers(0, dataset.train_x.shape[0], size=32)
    imgs = dataset.train_x[idx]
    pools = {c.id: raw_phrases[c.id] for c in dataset.categories}
    token_rows = [model.tokenizer.token_ids(pools[int(y)][0]) for y in dataset.train_y[idx]]
    ei = model.image_tower(ad.Tensor(imgs))
    et = model.concept_tower(token_rows)
    z = ad.scale(ad.matmul(ei, ad.transpose2d(et)), 1.0 / cfg.tau)
    diag = np.arange(32)
    li = ad.sub(ad.logsumexp(z, axis=1), ad.take_rows(z, diag))
    loss = float(ad.mean_all(li).data)
    assert abs(loss - np.log(32)) / np.log(32) <= 0.2


def test_train_embedder_requires_phrases(dataset, sched):
    with pytest.raises(ArgumentError):
        E.train_embedder(dataset, {c.id: [] for c in dataset.categories},
                         E.EmbedderConfig(steps=1), sched, 0)


def test_train_embedder_deterministic(tiny_dataset, sched):
    phrases = {c.id: [c.name] for c in tiny_dataset.categories}
    cfg = E.EmbedderConfig(steps=6, batch=8)
    m1 = E.train_embedder(tiny_dataset, phrases, cfg, sched, 0)
    m2 = E.train_embedder(tiny_dataset, phrases, cfg, sched, 0)
    for k in m1.params:
        np.testing.assert_array_equal(m1.params[k].data, m2.params[k].data)


def test_build_vocabulary_closed_and_ordered():
    vocab = AttributeVocab()
    words = E.build_vocabulary(vocab, ["vivid red body"])
    assert "shape" in words and "circle" in words and "with" in words and "vivid" in words
    assert len(set(words)) == len(words)
