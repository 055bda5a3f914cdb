"""Joint image-concept embedding trained in-repo with symmetric InfoNCE.

Both towers emit L2-normalized vectors in a shared space. The concept
tokenizer is a closed lowercase vocabulary with 16 hashed overflow buckets
for unknown words, so embedding is deterministic and dependency-free.
"""

import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .diffusion import NoiseSchedule, q_sample
from .errors import ArgumentError
from .nn import Adam, conv_param, embedding_param, linear_param, zero_grads, zeros_param
from .seeds import rng_for

N_BUCKETS = 16


@dataclass(frozen=True)
class ConceptPhrase:
    text: str
    tokens: tuple
    category_id: int = -1  # donor category for sampled negatives; -1 if n/a


class Tokenizer:
    def __init__(self, vocabulary):
        self.words = tuple(dict.fromkeys(vocabulary))  # de-dup, keep order
        self.index = {w: i for i, w in enumerate(self.words)}

    @property
    def n_ids(self):
        return len(self.words) + N_BUCKETS

    def token_ids(self, text):
        ids = []
        for word in text.lower().split():
            word = word.strip(".,;:!?\"'")
            if not word:
                continue
            if word in self.index:
                ids.append(self.index[word])
            else:
                ids.append(len(self.words) + zlib.crc32(word.encode("utf-8")) % N_BUCKETS)
        return ids

    def phrase(self, text, category_id=-1) -> ConceptPhrase:
        ids = self.token_ids(text)
        if not ids:
            raise ArgumentError(f"phrase empty after tokenization: {text!r}")
        return ConceptPhrase(text=text, tokens=tuple(ids), category_id=category_id)


def build_vocabulary(vocab, extra_words=()):
    """Closed vocabulary: attribute values, axis names, template words."""
    words = []
    for name, values in vocab.axes:
        words.append(name)
        words.extend(values)
    words.append("with")
    for w in extra_words:
        words.extend(w.lower().split())
    return tuple(dict.fromkeys(words))


@dataclass
class EmbedderConfig:
    dim: int = 32
    tok_dim: int = 24
    hid: int = 64
    steps: int = 2400
    batch: int = 48
    lr: float = 1e-3
    tau: float = 0.07
    noise_prob: float = 0.5
    noise_t_frac: float = 0.6


class JointEmbedder:
    ARCH = "joint-embedder"

    def __init__(self, tokenizer: Tokenizer, dim=32, tok_dim=24, hid=64, hw=16,
                 params=None, rng=None):
        self.tokenizer = tokenizer
        self.dim = dim
        self.tok_dim = tok_dim
        self.hid = hid
        self.hw = hw
        if params is not None:
            self.params = params
            return
        flat = 24 * (hw // 4) * (hw // 4)
        p = {}
        p["c1w"] = conv_param(rng, 12, 3, 3)
        p["c1b"] = zeros_param((12,))
        p["c2w"] = conv_param(rng, 24, 12, 3)
        p["c2b"] = zeros_param((24,))
        p["f1w"] = linear_param(rng, flat, hid)
        p["f1b"] = zeros_param((hid,))
        p["f2w"] = linear_param(rng, hid, dim)
        p["f2b"] = zeros_param((dim,))
        p["tok"] = embedding_param(rng, tokenizer.n_ids, tok_dim)
        p["g1w"] = linear_param(rng, tok_dim, hid)
        p["g1b"] = zeros_param((hid,))
        p["g2w"] = linear_param(rng, hid, dim)
        p["g2b"] = zeros_param((dim,))
        self.params = p

    # -- image tower ---------------------------------------------------

    def image_tower(self, x: ad.Tensor) -> ad.Tensor:
        """(B,3,H,W) -> unit-norm (B,d); differentiable w.r.t. x.

        Pooling sits before each tanh so the conv+pool prefix stays linear,
        which the finite-difference fast path exploits.
        """
        if len(x.shape) != 4 or x.shape[1:] != (3, self.hw, self.hw):
            raise ArgumentError(f"image batch shape {x.shape} != (B,3,{self.hw},{self.hw})")
        p = self.params
        h = ad.tanh(ad.avgpool2(ad.conv2d(x, p["c1w"], p["c1b"])))
        h = ad.tanh(ad.avgpool2(ad.conv2d(h, p["c2w"], p["c2b"])))
        h = ad.reshape(h, (x.shape[0], -1))
        h = ad.tanh(ad.affine(h, p["f1w"], p["f1b"]))
        h = ad.affine(h, p["f2w"], p["f2b"])
        return ad.l2_normalize_rows(h)

    def embed_image(self, image) -> np.ndarray:
        img = image.data if isinstance(image, ad.Tensor) else np.asarray(image)
        if img.shape != (3, self.hw, self.hw):
            raise ArgumentError(f"image shape {img.shape} != (3,{self.hw},{self.hw})")
        batch = ad.Tensor(img.astype(np.float32)[None])
        return self.image_tower(batch).data[0]

    def embed_images(self, images) -> np.ndarray:
        arr = np.asarray(images, dtype=np.float32)
        return self.image_tower(ad.Tensor(arr)).data

    def tower_fd_embeddings(self, base: np.ndarray, h: float) -> np.ndarray:
        """Float64 embeddings of all 2*n one-pixel perturbations of base.

        conv1 and the first pool are linear, so each perturbed activation
        is the broadcast base response plus an h-scaled, pool-projected
        kernel stencil at the perturbed pixel. Equivalent to running
        image_tower on the stacked perturbations; kept as a fast path for
        the finite-difference oracle.
        """
        p = self.params
        hw = self.hw
        hp = hw // 2
        x64 = np.asarray(base, dtype=np.float64)
        if x64.shape != (3, hw, hw):
            raise ArgumentError(f"image shape {x64.shape} != (3,{hw},{hw})")
        w1 = np.asarray(p["c1w"].data, dtype=np.float64)
        c1 = w1.shape[0]
        base_out = _conv_base(x64, w1, np.asarray(p["c1b"].data, dtype=np.float64))
        pooled_base = base_out.reshape(c1, hp, 2, hp, 2).mean(axis=(2, 4))
        n = 3 * hw * hw
        cc, ii, jj = np.unravel_index(np.arange(n), (3, hw, hw))
        cc2 = np.repeat(cc, 2)
        ii2 = np.repeat(ii, 2)
        jj2 = np.repeat(jj, 2)
        sign = np.tile([h, -h], n)
        # conv1 stencil: perturbing pixel (i,j) adds the flipped kernel on
        # output rows i-1..i+1; pooling sends conv row r to pooled row r//2.
        # A one-wide pad ring absorbs out-of-range rows, cropped afterwards.
        buf = np.zeros((2 * n, c1, hp + 2, hp + 2))
        buf[:, :, 1:-1, 1:-1] = pooled_base
        rows = (ii2[:, None, None, None] - 1 + np.arange(3)[None, None, :, None]) // 2 + 1
        cols = (jj2[:, None, None, None] - 1 + np.arange(3)[None, None, None, :]) // 2 + 1
        samp = np.arange(2 * n)[:, None, None, None]
        chan = np.arange(c1)[None, :, None, None]
        stencil = w1[:, cc2, ::-1, ::-1]  # (c1, 2n, 3, 3)
        stencil = (sign[None, :, None, None] / 4.0) * stencil
        np.add.at(buf, (samp, chan, rows, cols), stencil.transpose(1, 0, 2, 3))
        h2 = ad.Tensor(np.ascontiguousarray(np.tanh(buf[:, :, 1:-1, 1:-1])))
        h2 = ad.tanh(ad.avgpool2(ad.conv2d(h2, p["c2w"], p["c2b"])))
        h2 = ad.reshape(h2, (2 * n, -1))
        h2 = ad.tanh(ad.affine(h2, p["f1w"], p["f1b"]))
        h2 = ad.affine(h2, p["f2w"], p["f2b"])
        return ad.l2_normalize_rows(h2).data

    # -- concept tower ---------------------------------------------------

    def concept_tower(self, token_rows) -> ad.Tensor:
        """List of token-id sequences -> unit-norm (n,d)."""
        p = self.params
        pooled = []
        for ids in token_rows:
            emb = ad.gather_rows(p["tok"], np.asarray(ids, dtype=np.int64))
            pooled.append(ad.mean_axis0(emb))
        h = ad.stack0(pooled)
        h = ad.tanh(ad.affine(h, p["g1w"], p["g1b"]))
        h = ad.affine(h, p["g2w"], p["g2b"])
        return ad.l2_normalize_rows(h)

    def embed_concept(self, phrase: ConceptPhrase) -> np.ndarray:
        if not phrase.tokens:
            raise ArgumentError("phrase has no tokens")
        return self.concept_tower([phrase.tokens]).data[0]

    def embed_concepts(self, phrases) -> np.ndarray:
        if not phrases:
            raise ArgumentError("no phrases to embed")
        return self.concept_tower([p.tokens for p in phrases]).data

    # -- persistence -----------------------------------------------------

    def finalize(self):
        self.params = {k: v.detach() for k, v in self.params.items()}
        return self

    def tensors(self):
        return {k: v.data for k, v in self.params.items()}

    def meta(self):
        return {
            "dim": self.dim,
            "tok_dim": self.tok_dim,
            "hid": self.hid,
            "hw": self.hw,
            "vocabulary": list(self.tokenizer.words),
        }

    @classmethod
    def from_checkpoint_payload(cls, meta, tensors):
        return cls(
            tokenizer=Tokenizer(meta["vocabulary"]),
            dim=meta["dim"],
            tok_dim=meta["tok_dim"],
            hid=meta["hid"],
            hw=meta["hw"],
            params={k: ad.Tensor(v) for k, v in tensors.items()},
        )


def _conv_base(x64, w64, b64):
    out, _ = ad._conv2d_fwd(x64[None], w64, b64)
    return out[0]


def activation_score(embedder: JointEmbedder, images, phrase: ConceptPhrase) -> float:
    """Cosine between the mean image embedding and the phrase embedding.

    The mean of unit vectors is not unit-norm; the final cosine
    renormalizes it.
    """
    images = list(images)
    if not images:
        raise ArgumentError("activation_score: empty image list")
    embs = embedder.embed_images(np.stack([np.asarray(im) for im in images]))
    mean = embs.astype(np.float64).mean(axis=0)
    c = embedder.embed_concept(phrase).astype(np.float64)
    denom = np.linalg.norm(mean) * np.linalg.norm(c)
    if denom == 0.0:
        return 0.0
    return float(np.dot(mean, c) / denom)


def category_phrase_pool(category, phrases):
    """Training texts for one category: its name, raw phrases, templated phrases."""
    texts = [category.name]
    texts.extend(phrases)
    texts.extend(f"{category.name} with {p}" for p in phrases)
    return texts


def train_embedder(dataset, phrases_by_category: dict, config: EmbedderConfig,
                   schedule: NoiseSchedule, seed: int) -> JointEmbedder:
    """Symmetric InfoNCE over (image, phrase-of-its-category) batches.

    With probability noise_prob an image is replaced by its forward-noised
    version at a uniform t <= noise_t_frac*T, so the tower stays
    informative on the noisy inputs the guidance objective sees.
    """
    cats = dataset.categories
    for c in cats:
        if not phrases_by_category.get(c.id):
            raise ArgumentError(f"category {c.id} has no phrases")
    vocabulary = build_vocabulary(
        dataset.vocab,
        [t for c in cats for t in category_phrase_pool(c, phrases_by_category[c.id])],
    )
    tokenizer = Tokenizer(vocabulary)
    rng = rng_for(seed, "train-embed")
    model = JointEmbedder(tokenizer, dim=config.dim, tok_dim=config.tok_dim,
                          hid=config.hid, hw=dataset.train_x.shape[-1], rng=rng)
    pools = {c.id: [tokenizer.token_ids(t) for t in
                    category_phrase_pool(c, phrases_by_category[c.id])] for c in cats}

    plist = list(model.params.values())
    opt = Adam(plist, lr=config.lr)
    t_max = max(1, int(config.noise_t_frac * schedule.T))
    n_train = dataset.train_x.shape[0]
    inv_tau = 1.0 / config.tau
    for _ in range(config.steps):
        idx = rng.integers(0, n_train, size=config.batch)
        imgs = dataset.train_x[idx].copy()
        labels = dataset.train_y[idx]
        noised = rng.random(config.batch) < config.noise_prob
        if noised.any():
            t_arr = rng.integers(1, t_max + 1, size=int(noised.sum()))
            eps = rng.standard_normal(imgs[noised].shape).astype(np.float32)
            imgs[noised] = q_sample(imgs[noised], t_arr, eps, schedule)
        token_rows = [pools[int(y)][rng.integers(0, len(pools[int(y)]))] for y in labels]

        ei = model.image_tower(ad.Tensor(imgs))
        et = model.concept_tower(token_rows)
        z = ad.scale(ad.matmul(ei, ad.transpose2d(et)), inv_tau)
        diag_idx = np.arange(config.batch)
        li = ad.sub(ad.logsumexp(z, axis=1), ad.take_rows(z, diag_idx))
        lt = ad.sub(ad.logsumexp(z, axis=0), ad.take_rows(ad.transpose2d(z), diag_idx))
        loss = ad.scale(ad.add(ad.mean_all(li), ad.mean_all(lt)), 0.5)
        zero_grads(plist)
        ad.backward(loss)
        opt.step()
    model.finalize()
    return model


def activation_margin(embedder: JointEmbedder, dataset, phrases_by_category, split="test",
                      max_images=24) -> float:
    """Mean same-category activation minus mean cross-category activation."""
    cats = dataset.categories
    same, cross = [], []
    for c in cats:
        imgs = dataset.images_of(c.id, split)[:max_images]
        for other in cats:
            for text in phrases_by_category[other.id]:
                a = activation_score(embedder, imgs, embedder.tokenizer.phrase(text))
                (same if other.id == c.id else cross).append(a)
    return float(np.mean(same) - np.mean(cross))
