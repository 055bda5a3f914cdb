"""Concept-matching objectives, the informed noise update, the
classifier-guidance baseline, and the guided DDIM generation loop.

Sign convention: the noise update is eps_hat = eps - lam*sqrt(1-abar_t)*g
applied verbatim, with g the guidance *direction*. Matching objectives are
losses to minimize, so their direction is the negative gradient; the
classifier baseline ascends log-probability, so its direction is the
positive gradient of log p. Both reduce to "directions are negative
gradients of a loss" by treating -log p as the classifier loss.
"""

import json
import zlib
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .concepts import ConceptBank, NegativeStrategy, sample_negative_concepts
from .data import Sample
from .diffusion import DenoiserModel, NoiseSchedule, ddim_step, ddim_timesteps, estimate_x0, q_sample
from .embedder import JointEmbedder
from .errors import ArgumentError
from .nn import Adam, conv_param, linear_param, sinusoidal_embedding, zero_grads, zeros_param
from .seeds import rng_for

PROMPT_FORMAT = "{name} with {concept}"

OBJECTIVES = ("none", "cosine", "contrastive", "classifier", "combined")


@dataclass
class GuidanceConfig:
    lam: float = 1.0  # informing weight
    objective: str = "contrastive"
    tau: float = 0.07
    n_neg: int = 10
    strategy: NegativeStrategy = field(default_factory=lambda: NegativeStrategy("weighted"))
    psi_target: str = "noisy"  # "noisy" applies the embedder to x_t, "x0" to the estimate
    cls_weight: float = 0.05
    steps: int = 50
    clamp_x0: bool = True
    grad_clip: float = 0.0  # per-sample L2 clip on the direction; 0 disables
    resample_negatives_each_step: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ArgumentError("lambda must be >= 0")
        if self.tau <= 0:
            raise ArgumentError("tau must be > 0")
        if self.n_neg < 0:
            raise ArgumentError("n_neg must be >= 0")
        if self.objective not in OBJECTIVES:
            raise ArgumentError(f"unknown objective {self.objective!r}")
        if self.psi_target not in ("noisy", "x0"):
            raise ArgumentError(f"unknown psi target {self.psi_target!r}")

    def echo(self):
        d = asdict(self)
        d["strategy"] = str(self.strategy)
        d["lambda"] = d.pop("lam")
        return d


@dataclass
class MatchContext:
    """Frozen positive/negative concept embeddings for one sample."""

    embedder: JointEmbedder
    pos: np.ndarray  # (P, d) unit rows
    neg: np.ndarray  # (N, d) unit rows, possibly N == 0
    tau: float
    category_id: int

    def __post_init__(self):
        for name, arr in (("pos", self.pos), ("neg", self.neg)):
            if arr.size:
                norms = np.linalg.norm(arr.astype(np.float64), axis=1)
                if np.abs(norms - 1.0).max() > 1e-4:
                    raise ArgumentError(f"{name} embeddings must be unit-norm")


def assemble_prompt(name: str, concept: str) -> str:
    return PROMPT_FORMAT.format(name=name, concept=concept)


def build_match_context(embedder: JointEmbedder, bank: ConceptBank, category_id: int,
                        cfg: GuidanceConfig, rng) -> MatchContext:
    cat = bank.category(category_id)
    if not cat.selected:
        raise ArgumentError(f"bank has no selected concepts for category {category_id}")
    tok = embedder.tokenizer
    pos_phr = [tok.phrase(assemble_prompt(cat.name, t), category_id=cat.id)
               for t in cat.selected]
    pos = embedder.embed_concepts(pos_phr)
    if cfg.n_neg > 0:
        raw = sample_negative_concepts(bank, category_id, cfg.n_neg, cfg.strategy, rng, tok)
        neg_phr = [tok.phrase(assemble_prompt(bank.category(p.category_id).name, p.text),
                              category_id=p.category_id) for p in raw]
        neg = embedder.embed_concepts(neg_phr)
    else:
        neg = np.zeros((0, embedder.dim), dtype=np.float32)
    return MatchContext(embedder=embedder, pos=pos, neg=neg, tau=cfg.tau,
                        category_id=category_id)


# ---------------------------------------------------------------------------
# batched objective graphs (shared positives, per-sample negatives)


def _cosine_vec(embs: ad.Tensor, pos: np.ndarray) -> ad.Tensor:
    """(B,d) embeddings -> per-sample negative mean cosine, shape (B,)."""
    n_pos = pos.shape[0]
    scores = ad.matmul(embs, ad.Tensor(pos.T.copy()))  # (B,P)
    mean_w = ad.Tensor(np.full((n_pos, 1), 1.0 / n_pos, dtype=np.float32))
    return ad.scale(ad.reshape(ad.matmul(scores, mean_w), (embs.shape[0],)), -1.0)


def _contrastive_vec(embs: ad.Tensor, pos: np.ndarray, neg_stack: np.ndarray,
                     tau: float) -> ad.Tensor:
    """Per-sample contrastive loss, shape (B,).

    neg_stack is (B, N, d): each sample carries its own drawn negatives.
    Exactly zero (value and gradient) when N == 0.
    """
    B = embs.shape[0]
    n_pos = pos.shape[0]
    n_neg = neg_stack.shape[1]
    s_pos = ad.scale(ad.matmul(embs, ad.Tensor(pos.T.copy())), 1.0 / tau)  # (B,P)
    neg_cols = [
        ad.scale(ad.rows_dot(embs, ad.Tensor(neg_stack[:, j, :].copy())), 1.0 / tau)
        for j in range(n_neg)
    ]
    total = None
    for i in range(n_pos):
        s_i = ad.take_rows(s_pos, np.full(B, i))
        lse = ad.logsumexp(ad.stack0([s_i] + neg_cols), axis=0)
        term = ad.sub(lse, s_i)
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / n_pos)


def _classifier_logprob_vec(classifier, x: ad.Tensor, t_arr, label: int) -> ad.Tensor:
    logits = classifier.forward(x, t_arr)  # (B,K)
    if not 0 <= label < logits.shape[1]:
        raise ArgumentError(f"label {label} out of range 0..{logits.shape[1] - 1}")
    picked = ad.take_rows(logits, np.full(logits.shape[0], label))
    return ad.sub(picked, ad.logsumexp(logits, axis=1))


# ---------------------------------------------------------------------------
# spec-level single-sample objectives


def cosine_loss(ctx: MatchContext, x: ad.Tensor) -> ad.Tensor:
    """Negative mean cosine between psi(x) and the positive concepts."""
    if ctx.pos.shape[0] < 1:
        raise ArgumentError("empty positive set")
    embs = ctx.embedder.image_tower(ad.reshape(x, (1,) + tuple(x.shape)))
    return ad.reshape(_cosine_vec(embs, ctx.pos), ())


def contrastive_loss(ctx: MatchContext, x: ad.Tensor) -> ad.Tensor:
    """Image-text supervised-contrastive loss against the drawn negatives."""
    if ctx.pos.shape[0] < 1:
        raise ArgumentError("empty positive set")
    embs = ctx.embedder.image_tower(ad.reshape(x, (1,) + tuple(x.shape)))
    neg_stack = ctx.neg[None] if ctx.neg.size else np.zeros(
        (1, 0, ctx.pos.shape[1]), dtype=np.float32)
    return ad.reshape(_contrastive_vec(embs, ctx.pos, neg_stack, ctx.tau), ())


def contrastive_from_scores(s_pos, s_neg) -> float:
    """Loss from raw score vectors via the stable log-sum-exp form."""
    s_pos = np.asarray(s_pos, dtype=np.float64)
    s_neg = np.asarray(s_neg, dtype=np.float64)
    total = 0.0
    for si in s_pos:
        row = np.concatenate([[si], s_neg])
        m = row.max()
        total += (m + np.log(np.exp(row - m).sum())) - si
    return total / len(s_pos)


def classifier_log_prob(classifier, x: ad.Tensor, t: int, label: int) -> ad.Tensor:
    """Log-softmax of the label logit; differentiable w.r.t. x."""
    xb = ad.reshape(x, (1,) + tuple(x.shape))
    return ad.reshape(_classifier_logprob_vec(classifier, xb, np.array([int(t)]), label), ())


def informed_epsilon(eps_pred: np.ndarray, grad: np.ndarray, lam: float, t,
                     schedule: NoiseSchedule) -> np.ndarray:
    """eps_hat = eps_pred - lam * sqrt(1 - abar_t) * grad, with grad already
    oriented as the guidance direction."""
    eps_pred = np.asarray(eps_pred)
    grad = np.asarray(grad)
    if eps_pred.shape != grad.shape:
        raise ArgumentError(f"shape mismatch {eps_pred.shape} vs {grad.shape}")
    if lam < 0:
        raise ArgumentError("lambda must be >= 0")
    ab = np.asarray(schedule.alpha_bar_at(t), dtype=np.float64)
    if ab.ndim:
        ab = ab.reshape((eps_pred.shape[0],) + (1,) * (eps_pred.ndim - 1))
    if lam == 0.0 or not np.any(grad):
        return eps_pred
    out = eps_pred.astype(np.float64) - lam * np.sqrt(1.0 - ab) * grad.astype(np.float64)
    return out.astype(eps_pred.dtype)


# ---------------------------------------------------------------------------
# value-only evaluation helpers


def matching_loss_values(contexts, images, kind: str) -> np.ndarray:
    """Per-sample objective values on an image batch (no gradients)."""
    embedder = contexts[0].embedder
    embs = embedder.image_tower(ad.Tensor(np.asarray(images))).data.astype(np.float64)
    out = np.zeros(len(contexts))
    for i, ctx in enumerate(contexts):
        e = embs[i]
        if kind == "cosine":
            out[i] = -float((ctx.pos.astype(np.float64) @ e).mean())
        elif kind == "contrastive":
            s_pos = ctx.pos.astype(np.float64) @ e / ctx.tau
            s_neg = ctx.neg.astype(np.float64) @ e / ctx.tau if ctx.neg.size else np.zeros(0)
            out[i] = contrastive_from_scores(s_pos, s_neg)
        else:
            raise ArgumentError(f"no matching loss for objective {kind!r}")
    return out


class MatchObjective:
    """Single-image objective as a differentiable callable.

    eval_many evaluates value-only on a float64 batch, which
    finite_diff_grad uses as its batched oracle path.
    """

    def __init__(self, ctx: MatchContext, kind: str, classifier=None, t: int = 1,
                 label: int = 0):
        if kind not in ("cosine", "contrastive", "classifier"):
            raise ArgumentError(f"unsupported objective kind {kind!r}")
        self.ctx = ctx
        self.kind = kind
        self.classifier = classifier
        self.t = t
        self.label = label
        if kind == "classifier":
            # no conv-linearity fast path through the time-conditioned net
            self.eval_fd = None

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        if self.kind == "cosine":
            return cosine_loss(self.ctx, x)
        if self.kind == "contrastive":
            return contrastive_loss(self.ctx, x)
        return ad.scale(classifier_log_prob(self.classifier, x, self.t, self.label), -1.0)

    def _values_from_embs(self, embs: np.ndarray) -> np.ndarray:
        pos = self.ctx.pos.astype(np.float64)
        if self.kind == "cosine":
            return -(embs @ pos.T).mean(axis=1)
        s_pos = embs @ pos.T / self.ctx.tau
        neg = self.ctx.neg.astype(np.float64)
        s_neg = embs @ neg.T / self.ctx.tau if neg.size else np.zeros((embs.shape[0], 0))
        acc = np.zeros(embs.shape[0])
        for i in range(s_pos.shape[1]):
            m = np.concatenate([s_pos[:, i : i + 1], s_neg], axis=1)
            mx = m.max(axis=1)
            acc += mx + np.log(np.exp(m - mx[:, None]).sum(axis=1)) - s_pos[:, i]
        return acc / s_pos.shape[1]

    def eval_fd(self, base: np.ndarray, h: float) -> np.ndarray:
        embs = self.ctx.embedder.tower_fd_embeddings(base, h)
        return self._values_from_embs(embs)

    def eval_many(self, arr: np.ndarray) -> np.ndarray:
        out = np.empty(arr.shape[0])
        step = 1536
        for lo in range(0, arr.shape[0], step):
            chunk = np.asarray(arr[lo : lo + step], dtype=np.float64)
            if self.kind == "classifier":
                xb = ad.Tensor(chunk)
                t_arr = np.full(chunk.shape[0], self.t)
                lp = _classifier_logprob_vec(self.classifier, xb, t_arr, self.label)
                out[lo : lo + step] = -lp.data
                continue
            embs = self.ctx.embedder.image_tower(ad.Tensor(chunk)).data
            out[lo : lo + step] = self._values_from_embs(embs)
        return out


# ---------------------------------------------------------------------------
# guidance directions


def _concept_direction(x: np.ndarray, t: int, contexts, kind: str,
                       cfg: GuidanceConfig, eps: np.ndarray,
                       schedule: NoiseSchedule):
    """Direction -grad(loss) per sample, plus the per-sample loss values."""
    if cfg.psi_target == "x0":
        psi_in = estimate_x0(x, t, eps, schedule, clamp=False)
        chain = 1.0 / np.sqrt(float(schedule.alpha_bar_at(t)))
    else:
        psi_in = x
        chain = 1.0
    X = ad.Tensor(np.asarray(psi_in, dtype=np.float32), requires_grad=True)
    embedder = contexts[0].embedder
    embs = embedder.image_tower(X)
    pos = contexts[0].pos
    if kind == "cosine":
        loss_vec = _cosine_vec(embs, pos)
    else:
        neg_stack = np.stack([c.neg for c in contexts]) if contexts[0].neg.size else np.zeros(
            (len(contexts), 0, pos.shape[1]), dtype=np.float32)
        loss_vec = _contrastive_vec(embs, pos, neg_stack, cfg.tau)
    values = loss_vec.data.copy()
    ad.backward(ad.sum_all(loss_vec))
    grad = X.grad if X.grad is not None else np.zeros_like(X.data)
    return -chain * grad.astype(np.float64), values


def _classifier_direction(classifier, x: np.ndarray, t: int, label: int):
    """Direction +grad(log p(label | x_t, t)) per sample."""
    X = ad.Tensor(np.asarray(x, dtype=np.float32), requires_grad=True)
    lp = _classifier_logprob_vec(classifier, X, np.full(x.shape[0], int(t)), label)
    values = -lp.data.copy()
    ad.backward(ad.sum_all(lp))
    grad = X.grad if X.grad is not None else np.zeros_like(X.data)
    return grad.astype(np.float64), values


def _clip_direction(g: np.ndarray, clip: float) -> np.ndarray:
    if clip <= 0:
        return g
    flat = g.reshape(g.shape[0], -1)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    scale_f = np.minimum(1.0, clip / np.maximum(norms, 1e-12))
    return (flat * scale_f).reshape(g.shape)


# ---------------------------------------------------------------------------
# generation


def model_checksum(model) -> str:
    crc = 0
    for name in sorted(model.tensors()):
        crc = zlib.crc32(np.ascontiguousarray(model.tensors()[name], dtype="<f4").tobytes(), crc)
    return f"{crc:08x}"


def generate_informed(denoiser: DenoiserModel, schedule: NoiseSchedule,
                      embedder: JointEmbedder, bank: ConceptBank, cfg: GuidanceConfig,
                      category_id: int, n: int, seed: int, classifier=None,
                      manifest_path=None):
    """Guided DDIM generation of n samples for one category.

    Negatives are drawn once per sample before the trajectory and held
    fixed across timesteps (re-sampling per step is opt-in). The guidance
    path draws from RNG streams separate from the initial-noise streams,
    so objective "none" and lambda 0 are bit-identical.
    """
    cat = bank.category(category_id)
    hw = embedder.hw
    guided = cfg.objective != "none" and cfg.lam > 0.0
    uses_concepts = cfg.objective in ("cosine", "contrastive", "combined")
    uses_classifier = cfg.objective in ("classifier", "combined")
    if guided and uses_classifier and classifier is None:
        raise ArgumentError("classifier objective requires a trained classifier")

    x = np.stack([
        rng_for(seed, "gen-init", category_id, i).standard_normal((3, hw, hw))
        for i in range(n)
    ])
    contexts = None
    if guided and uses_concepts:
        contexts = [
            build_match_context(embedder, bank, category_id, cfg,
                                rng_for(seed, "gen-neg", category_id, i))
            for i in range(n)
        ]

    concept_kind = "cosine" if cfg.objective == "cosine" else "contrastive"
    losses = np.full(n, np.nan)
    for step_i, pair in enumerate(ddim_timesteps(schedule.T, cfg.steps)):
        eps = denoiser.predict(x, pair.t, category_id).astype(np.float64)
        eps_hat = eps
        if guided:
            if uses_concepts:
                if cfg.resample_negatives_each_step and step_i > 0:
                    contexts = [
                        build_match_context(embedder, bank, category_id, cfg,
                                            rng_for(seed, "gen-neg", category_id, i, step_i))
                        for i in range(n)
                    ]
                g, losses = _concept_direction(x, pair.t, contexts, concept_kind, cfg,
                                               eps, schedule)
                g = _clip_direction(g, cfg.grad_clip)
                eps_hat = informed_epsilon(eps_hat, g, cfg.lam, pair.t, schedule)
            if uses_classifier:
                g_cls, cls_losses = _classifier_direction(classifier, x, pair.t, category_id)
                g_cls = _clip_direction(g_cls, cfg.grad_clip)
                eps_hat = informed_epsilon(eps_hat, g_cls, cfg.cls_weight, pair.t, schedule)
                if not uses_concepts:
                    losses = cls_losses
        x = ddim_step(x, pair, eps_hat, schedule, clamp=cfg.clamp_x0)

    images = np.clip(x, -1.0, 1.0).astype(np.float32)
    if contexts is not None:
        losses = matching_loss_values(contexts, images, concept_kind)
    samples = [Sample(image=images[i], label=category_id) for i in range(n)]

    if manifest_path is not None:
        manifest = {
            "seed": seed,
            "category": {"id": cat.id, "name": cat.name},
            "config": cfg.echo(),
            "bank_checksum": bank.checksum(),
            "model_checksums": {
                "denoiser": model_checksum(denoiser),
                "embedder": model_checksum(embedder),
                **({"classifier": model_checksum(classifier)} if classifier else {}),
            },
            "final_losses": [None if np.isnan(v) else float(v) for v in losses],
        }
        with open(manifest_path, "w") as fh:
            json.dump(manifest, fh, indent=1)
    return samples


def descent_pair(denoiser: DenoiserModel, embedder: JointEmbedder, ctx: MatchContext,
                 cfg: GuidanceConfig, schedule: NoiseSchedule, x_t: np.ndarray, t: int,
                 t_prev: int):
    """Contrastive loss on the clean-sample estimate held after one DDIM
    step from a common state, guided vs unguided.

    The compared estimate is the one the sampler carries at the new state
    (re-predicted at t_prev), i.e. the quantity the next step consumes.
    Returns (unguided, guided).
    """
    from .diffusion import StepPair, ddim_step

    xb = x_t[None]
    pair = StepPair(t, t_prev)
    eps = denoiser.predict(xb, t, ctx.category_id).astype(np.float64)
    g, _ = _concept_direction(xb, t, [ctx], "contrastive", cfg, eps, schedule)
    eps_hat = informed_epsilon(eps, g, cfg.lam, t, schedule)
    losses = []
    for e in (eps, eps_hat):
        x_prev = ddim_step(xb, pair, e, schedule, clamp=cfg.clamp_x0)
        eps_next = denoiser.predict(x_prev, t_prev, ctx.category_id).astype(np.float64)
        x0_hat = estimate_x0(x_prev, t_prev, eps_next, schedule, clamp=cfg.clamp_x0)
        losses.append(
            matching_loss_values([ctx], x0_hat.astype(np.float32), "contrastive")[0])
    return float(losses[0]), float(losses[1])


# ---------------------------------------------------------------------------
# noise-aware classifier for the guidance baseline


@dataclass
class ClassifierConfig:
    channels: int = 24
    temb_dim: int = 32
    hid: int = 64
    steps: int = 800
    batch: int = 64
    lr: float = 1.5e-3


class GuidanceClassifier:
    """Small conv classifier p(y | x_t, t) trained on noised inputs."""

    ARCH = "guidance-classifier"

    def __init__(self, n_classes, hw=16, channels=24, temb_dim=32, hid=64,
                 params=None, rng=None):
        self.n_classes = n_classes
        self.hw = hw
        self.channels = channels
        self.temb_dim = temb_dim
        self.hid = hid
        if params is not None:
            self.params = params
            return
        C = channels
        flat = 2 * C * (hw // 4) * (hw // 4)
        p = {}
        p["tw"] = linear_param(rng, temb_dim, C)
        p["tb"] = zeros_param((C,))
        p["c1w"] = conv_param(rng, C, 3, 3)
        p["c1b"] = zeros_param((C,))
        p["c2w"] = conv_param(rng, 2 * C, C, 3)
        p["c2b"] = zeros_param((2 * C,))
        p["f1w"] = linear_param(rng, flat, hid)
        p["f1b"] = zeros_param((hid,))
        p["f2w"] = ad.Tensor(
            (0.1 * linear_param(rng, hid, n_classes).data), requires_grad=True
        )
        p["f2b"] = zeros_param((n_classes,))
        self.params = p

    def forward(self, x: ad.Tensor, t_arr) -> ad.Tensor:
        p = self.params
        tf = ad.Tensor(sinusoidal_embedding(t_arr, self.temb_dim))
        tb = ad.affine(tf, p["tw"], p["tb"])  # (B,C)
        h = ad.tanh(ad.add_chan(ad.conv2d(x, p["c1w"], p["c1b"]), tb))
        h = ad.avgpool2(h)
        h = ad.tanh(ad.conv2d(h, p["c2w"], p["c2b"]))
        h = ad.avgpool2(h)
        h = ad.reshape(h, (x.shape[0], -1))
        h = ad.tanh(ad.affine(h, p["f1w"], p["f1b"]))
        return ad.affine(h, p["f2w"], p["f2b"])

    def finalize(self):
        self.params = {k: v.detach() for k, v in self.params.items()}
        return self

    def tensors(self):
        return {k: v.data for k, v in self.params.items()}

    def meta(self):
        return {
            "n_classes": self.n_classes,
            "hw": self.hw,
            "channels": self.channels,
            "temb_dim": self.temb_dim,
            "hid": self.hid,
        }

    @classmethod
    def from_checkpoint_payload(cls, meta, tensors):
        return cls(
            n_classes=meta["n_classes"], hw=meta["hw"], channels=meta["channels"],
            temb_dim=meta["temb_dim"], hid=meta["hid"],
            params={k: ad.Tensor(v) for k, v in tensors.items()},
        )


def train_guidance_classifier(dataset, schedule: NoiseSchedule, config: ClassifierConfig,
                              seed: int) -> GuidanceClassifier:
    if dataset.train_x.shape[0] == 0:
        raise ArgumentError("empty dataset")
    rng = rng_for(seed, "train-cls")
    n_classes = len(dataset.categories)
    model = GuidanceClassifier(n_classes, hw=dataset.train_x.shape[-1],
                               channels=config.channels, temb_dim=config.temb_dim,
                               hid=config.hid, rng=rng)
    plist = list(model.params.values())
    opt = Adam(plist, lr=config.lr)
    n_train = dataset.train_x.shape[0]
    for _ in range(config.steps):
        idx = rng.integers(0, n_train, size=config.batch)
        x0 = dataset.train_x[idx]
        labels = dataset.train_y[idx].astype(np.int64)
        t_arr = rng.integers(1, schedule.T + 1, size=config.batch)
        eps = rng.standard_normal(x0.shape).astype(np.float32)
        x_t = q_sample(x0, t_arr, eps, schedule).astype(np.float32)
        logits = model.forward(ad.Tensor(x_t), t_arr)
        nll = ad.sub(ad.logsumexp(logits, axis=1), ad.take_rows(logits, labels))
        loss = ad.mean_all(nll)
        zero_grads(plist)
        ad.backward(loss)
        opt.step()
    model.finalize()
    return model


# ---------------------------------------------------------------------------
# gradient oracle suite


def gradcheck_report(seed=0, n_states=20, h=1e-3):
    """Reverse-mode vs central finite differences on the matching objectives
    composed with a randomly initialized image tower. Returns a list of
    (name, max relative error) pairs."""
    from .data import AttributeVocab, default_categories
    from .embedder import Tokenizer, build_vocabulary

    rng = rng_for(seed, "gradcheck")
    tok = Tokenizer(build_vocabulary(AttributeVocab()))
    emb = JointEmbedder(tok, dim=16, tok_dim=12, hid=32, hw=16, rng=rng)
    emb.finalize()
    cats = default_categories()
    cls = GuidanceClassifier(len(cats), hw=16, rng=rng)
    cls.finalize()

    def unit_rows(k, d):
        m = rng.standard_normal((k, d))
        return (m / np.linalg.norm(m, axis=1, keepdims=True)).astype(np.float32)

    report = []
    for kind in ("cosine", "contrastive", "classifier"):
        worst = 0.0
        for state in range(n_states):
            ctx = MatchContext(embedder=emb, pos=unit_rows(5, emb.dim),
                               neg=unit_rows(10, emb.dim), tau=0.07, category_id=0)
            t = int(rng.integers(1, 1001))
            obj = MatchObjective(ctx, kind, classifier=cls, t=t,
                                 label=int(rng.integers(0, len(cats))))
            x = ad.Tensor(rng.uniform(-1, 1, (3, 16, 16)).astype(np.float32))
            _, g = ad.value_and_grad(obj, x)
            g_fd = ad.finite_diff_grad(obj, x, h)
            denom = max(float(np.abs(g_fd.data).max()), 1e-12)
            worst = max(worst, float(np.abs(g.data - g_fd.data).max()) / denom)
        report.append((kind, worst))
    return report
