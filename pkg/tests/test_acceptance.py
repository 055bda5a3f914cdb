"""Acceptance suite: one test per criterion, each printing a PASS line with
the measured quantity (run with -s to see them inline)."""

import os
import time
import zlib

import numpy as np
import pytest

from conceptdiff import autodiff as ad
from conceptdiff import concepts as C
from conceptdiff import diffusion as df
from conceptdiff import evaluate as ev
from conceptdiff import guidance as G
from conceptdiff.data import Sample, build_dataset, default_categories
from conceptdiff.embedder import activation_score
from conceptdiff.modelio import save_model
from conceptdiff.seeds import rng_for


def _report(criterion, detail):
    print(f"\n[acceptance] criterion {criterion}: PASS -- {detail}")


def test_criterion_01_gradient_oracle(embedder, bank):
    t0 = time.time()
    rng = rng_for(101, "oracle")
    worst = 0.0
    states = 0
    for kind in ("cosine", "contrastive"):
        for i in range(10):
            cid = int(rng.integers(0, 8))
            ctx = G.build_match_context(embedder, bank, cid, G.GuidanceConfig(),
                                        rng_for(101, kind, i))
            obj = G.MatchObjective(ctx, kind)
            x = ad.Tensor(rng.uniform(-1, 1, (3, 16, 16)).astype(np.float32))
            _, g = ad.value_and_grad(obj, x)
            g_fd = ad.finite_diff_grad(obj, x, 1e-3)
            rel = np.abs(g.data - g_fd.data).max() / max(np.abs(g_fd.data).max(), 1e-12)
            worst = max(worst, rel)
            states += 1
    elapsed = time.time() - t0
    assert states >= 20
    assert worst <= 1e-3
    assert elapsed < 10.0
    _report(1, f"max rel err {worst:.2e} over {states} states in {elapsed:.1f}s")


def test_criterion_02_marginal_consistency(sched):
    t0 = time.time()
    n = 10_000
    x0 = np.full(n, 0.5)
    worst_mean, worst_ratio = 0.0, 1.0
    for t in (10, 100, 500, 1000):
        chain_rng = rng_for(7, "marginal-chain", t)
        direct_rng = rng_for(7, "marginal-direct", t)
        x = x0.copy()
        for tt in range(1, t + 1):
            x = df.q_step(x, tt, chain_rng.standard_normal(n), sched)
        xd = df.q_sample(x0, t, direct_rng.standard_normal(n), sched)
        mean_dev = abs(x.mean() - xd.mean())
        ratio = x.var(ddof=1) / xd.var(ddof=1)
        assert mean_dev <= 0.02, f"t={t}: mean deviation {mean_dev}"
        assert 0.95 <= ratio <= 1.05, f"t={t}: variance ratio {ratio}"
        worst_mean = max(worst_mean, mean_dev)
        worst_ratio = max(worst_ratio, abs(ratio - 1) + 1)
    elapsed = time.time() - t0
    assert elapsed < 30.0
    _report(2, f"worst mean dev {worst_mean:.4f}, worst var ratio {worst_ratio:.3f}, "
               f"{elapsed:.1f}s")


def test_criterion_03_exact_inversion(sched):
    rng = rng_for(103, "inv")
    worst = 0.0
    for _ in range(100):
        t = int(rng.integers(1, sched.T + 1))
        x0 = rng.uniform(-1, 1, (3, 16, 16))
        eps = rng.standard_normal((3, 16, 16))
        x_t = df.q_sample(x0, t, eps, sched)
        x0_hat = df.estimate_x0(x_t, t, eps, sched)
        worst = max(worst, float(np.abs(x0_hat - x0).max()))
    assert worst <= 1e-5
    _report(3, f"max abs reconstruction error {worst:.2e} over 100 (x0, t)")


@pytest.mark.parametrize("objective", ["cosine", "contrastive", "classifier", "combined"])
def test_criterion_04_zero_lambda_transparency(objective, trained_denoiser, embedder,
                                               bank, sched, guidance_classifier):
    base = G.GuidanceConfig(objective="none", steps=50)
    guided = G.GuidanceConfig(objective=objective, lam=0.0, steps=50)
    a = G.generate_informed(trained_denoiser, sched, embedder, bank, base, 2, 2, seed=17)
    b = G.generate_informed(trained_denoiser, sched, embedder, bank, guided, 2, 2,
                            seed=17, classifier=guidance_classifier)
    for sa, sb in zip(a, b):
        np.testing.assert_array_equal(sa.image, sb.image)
    _report(4, f"objective={objective}: 50-step trajectories bit-identical at lambda=0")


def test_criterion_05_guidance_descent(trained_denoiser, embedder, bank, sched):
    cfg = G.GuidanceConfig(lam=1.0)
    pairs = df.ddim_timesteps(sched.T, cfg.steps)
    nxt = {p.t: p.t_prev for p in pairs}
    lo, hi = sched.T // 3, 2 * sched.T // 3
    states = []
    rng = rng_for(55, "traj-states")
    for traj in range(16):
        cid = int(rng.integers(0, 8))
        x = rng.standard_normal((1, 3, 16, 16))
        for pair in pairs:
            eps = trained_denoiser.predict(x, pair.t, cid)
            if lo <= pair.t <= hi:
                states.append((cid, pair.t, x[0].copy()))
            x = df.ddim_step(x, pair, eps, sched)
    states = states[:120]
    assert len(states) >= 100
    wins = 0
    for i, (cid, t, x_t) in enumerate(states):
        ctx = G.build_match_context(embedder, bank, cid, cfg, rng_for(55, "neg", i))
        lu, lg = G.descent_pair(trained_denoiser, embedder, ctx, cfg, sched, x_t, t,
                                nxt[t])
        wins += lg < lu
    frac = wins / len(states)
    assert frac >= 0.90
    _report(5, f"guided step lowered the contrastive loss in {wins}/{len(states)} "
               f"= {frac:.1%} of mid-trajectory states")


def test_criterion_06_contrastive_identities(embedder):
    rng = rng_for(106, "ids")

    def unit_rows(k):
        m = rng.standard_normal((k, embedder.dim))
        return (m / np.linalg.norm(m, axis=1, keepdims=True)).astype(np.float32)

    # empty negatives: exactly zero
    ctx0 = G.MatchContext(embedder=embedder, pos=unit_rows(5),
                          neg=np.zeros((0, embedder.dim), np.float32), tau=0.07,
                          category_id=0)
    x = ad.Tensor(rng.uniform(-1, 1, (3, 16, 16)).astype(np.float32))
    val, grad = ad.value_and_grad(lambda t: G.contrastive_loss(ctx0, t), x)
    assert val == 0.0 and not np.any(grad.data)

    # one positive vs one equal-scored negative: ln 2
    img = rng.uniform(-1, 1, (3, 16, 16)).astype(np.float32)
    e = embedder.embed_image(img)
    ctx2 = G.MatchContext(embedder=embedder, pos=e[None], neg=e[None], tau=0.07,
                          category_id=0)
    v2 = float(G.contrastive_loss(ctx2, ad.Tensor(img)).data)
    assert abs(v2 - np.log(2)) <= 1e-6

    # stable form vs naive 64-bit summation on 1000 random contexts
    imgs = rng.uniform(-1, 1, (1000, 3, 16, 16)).astype(np.float32)
    embs = embedder.embed_images(imgs).astype(np.float64)
    worst = 0.0
    for i in range(1000):
        pos = unit_rows(5).astype(np.float64)
        neg = unit_rows(10).astype(np.float64)
        s_pos = pos @ embs[i] / 0.07
        s_neg = neg @ embs[i] / 0.07
        stable = G.contrastive_from_scores(s_pos, s_neg)
        naive = -np.mean([np.log(np.exp(si) / (np.exp(si) + np.exp(s_neg).sum()))
                          for si in s_pos])
        worst = max(worst, abs(stable - naive))
    assert worst <= 1e-5
    _report(6, f"empty-neg exact 0, ln2 dev {abs(v2 - np.log(2)):.1e}, "
               f"naive-oracle dev {worst:.1e} over 1000 contexts")


def test_criterion_07_validity_selection_oracle(embedder, dataset, bank):
    rng = rng_for(107, "banks")
    pool = [t for c in bank.categories for t in c.retrieved]
    checked = 0
    for trial in range(100):
        k = int(rng.integers(1, 9))
        cat_ids = rng.choice(8, size=2, replace=False)
        cats = []
        for cid in cat_ids:
            phrases = [pool[int(rng.integers(0, len(pool)))] for _ in range(8)]
            if trial % 3 == 0:  # force ties via duplicated phrases
                phrases[4] = phrases[2]
                phrases[6] = phrases[2]
            cats.append(C.CategoryConcepts(id=int(cid), name=f"cat{cid}",
                                           retrieved=phrases))
        raw = C.ConceptBank(categories=cats)
        images = {int(cid): dataset.images_of(int(cid), "train")[:4] for cid in cat_ids}
        out = C.select_valid_concepts(raw, embedder, images, k=k)
        for cat in out.categories:
            scores = [activation_score(embedder, images[cat.id],
                                       embedder.tokenizer.phrase(t))
                      for t in cat.retrieved]
            order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
            expect = [cat.retrieved[i] for i in order[: min(k, len(scores))]]
            assert cat.selected == expect
            checked += 1
    _report(7, f"selection equals the brute-force rank oracle on {checked} "
               "randomized category banks including tie cases")


def test_criterion_08_weighted_sampling_frequencies():
    tok = C.Tokenizer(C.build_vocabulary(C.AttributeVocab(), ["neg phrase"]))
    rng_w = rng_for(108, "weights")
    worst = 0.0
    for trial in range(3):
        n_donors = int(rng_w.integers(4, 8))
        sims = rng_w.uniform(0.05, 0.95, n_donors)
        cats = [C.CategoryConcepts(id=0, name="t", retrieved=["t"], selected=["t"])]
        for i in range(n_donors):
            cats.append(C.CategoryConcepts(id=i + 1, name=f"d{i}", retrieved=["n"],
                                           selected=[f"neg phrase {i}"]))
        S = np.eye(n_donors + 1)
        S[0, 1:] = sims
        S[1:, 0] = sims
        bank = C.ConceptBank(categories=cats, similarity=S)
        target = np.maximum(sims, C.WEIGHT_FLOOR)
        target = target / target.sum()
        out = C.sample_negative_concepts(bank, 0, 100_000, C.NegativeStrategy("weighted"),
                                         rng_for(108, "draws", trial), tok)
        counts = np.bincount([p.category_id for p in out], minlength=n_donors + 1)[1:]
        l1 = np.abs(counts / counts.sum() - target).sum()
        assert l1 <= 0.01, f"trial {trial}: L1 {l1}"
        worst = max(worst, l1)
    # degenerate uniform case
    cats = [C.CategoryConcepts(id=0, name="t", retrieved=["t"], selected=["t"])]
    for i in range(5):
        cats.append(C.CategoryConcepts(id=i + 1, name=f"d{i}", retrieved=["n"],
                                       selected=[f"neg phrase {i}"]))
    S = np.eye(6)
    S[0, 1:] = 0.4
    S[1:, 0] = 0.4
    bank = C.ConceptBank(categories=cats, similarity=S)
    out = C.sample_negative_concepts(bank, 0, 100_000, C.NegativeStrategy("weighted"),
                                     rng_for(108, "uniform"), tok)
    counts = np.bincount([p.category_id for p in out], minlength=6)[1:]
    l1 = np.abs(counts / counts.sum() - 0.2).sum()
    assert l1 <= 0.01
    worst = max(worst, l1)
    _report(8, f"worst empirical L1 distance {worst:.4f} over 1e5-draw checks")


def test_criterion_09_end_to_end_direction(tmp_path, dataset, sched, trained_denoiser,
                                           embedder, bank):
    t0 = time.time()
    seeds = [0, 1, 2, 3, 4]
    cfg10 = ev.ExperimentConfig(experiment_id="headline", methods=["Unguided", "Contrastive"],
                                ipcs=[10], seeds=seeds, export_grids=True)
    rep10 = ev.run_experiment(cfg10, tmp_path / "ipc10", dataset, sched, trained_denoiser,
                              embedder, bank)
    cfg50 = ev.ExperimentConfig(experiment_id="ipc50", methods=["Cosine", "Contrastive"],
                                ipcs=[50], seeds=seeds, export_grids=False)
    rep50 = ev.run_experiment(cfg50, tmp_path / "ipc50", dataset, sched, trained_denoiser,
                              embedder, bank)
    elapsed = time.time() - t0

    mean_u = rep10.mean_top1(method="Unguided", ipc=10)
    mean_c = rep10.mean_top1(method="Contrastive", ipc=10)
    mean_cos50 = rep50.mean_top1(method="Cosine", ipc=50)
    mean_con50 = rep50.mean_top1(method="Contrastive", ipc=50)
    assert mean_c >= mean_u, f"Contrastive {mean_c:.3f} < Unguided {mean_u:.3f} at IPC=10"
    assert elapsed < 30 * 60
    order50 = ("Contrastive >= Cosine" if mean_con50 >= mean_cos50
               else f"deviation: Cosine ({mean_cos50:.3f}) > Contrastive ({mean_con50:.3f})")
    _report(9, f"IPC=10 mean top-1 over 5 seeds: Contrastive {mean_c:.3f} >= "
               f"Unguided {mean_u:.3f}; IPC=50: Contrastive {mean_con50:.3f} vs "
               f"Cosine {mean_cos50:.3f} ({order50}); runtime {elapsed / 60:.1f} min")


def test_criterion_10_stage_determinism(tmp_path, tiny_dataset, sched):
    # dataset build
    cats = default_categories()
    m1 = build_dataset(cats, 6, 5, tmp_path / "d1")
    m2 = build_dataset(cats, 6, 5, tmp_path / "d2")
    assert m1.checksums == m2.checksums

    # checkpoint training (denoiser, embedder, classifier at reduced budgets)
    def ckpt_crc(model):
        crc = 0
        for name in sorted(model.tensors()):
            crc = zlib.crc32(model.tensors()[name].tobytes(), crc)
        return crc

    dcfg = df.DenoiserConfig(channels=8, steps=10, batch=8)
    assert ckpt_crc(df.train_denoiser(tiny_dataset, sched, dcfg, 3)) == \
        ckpt_crc(df.train_denoiser(tiny_dataset, sched, dcfg, 3))

    from conceptdiff.embedder import EmbedderConfig, train_embedder

    phrases = {c.id: [c.name] for c in tiny_dataset.categories}
    ecfg = EmbedderConfig(steps=6, batch=8)
    assert ckpt_crc(train_embedder(tiny_dataset, phrases, ecfg, sched, 3)) == \
        ckpt_crc(train_embedder(tiny_dataset, phrases, ecfg, sched, 3))

    ccfg = G.ClassifierConfig(steps=6, batch=8)
    assert ckpt_crc(G.train_guidance_classifier(tiny_dataset, sched, ccfg, 3)) == \
        ckpt_crc(G.train_guidance_classifier(tiny_dataset, sched, ccfg, 3))

    # surrogate selection and PPM grids
    s1 = ev.build_surrogate("RandomReal", 2, 9, tiny_dataset)
    s2 = ev.build_surrogate("RandomReal", 2, 9, tiny_dataset)
    assert zlib.crc32(s1.images.tobytes()) == zlib.crc32(s2.images.tobytes())
    samples = [Sample(image=im, label=la) for im, la in zip(s1.images, s1.labels)]
    ev.export_grid(samples, tmp_path / "g1.ppm")
    ev.export_grid(samples, tmp_path / "g2.ppm")
    assert (tmp_path / "g1.ppm").read_bytes() == (tmp_path / "g2.ppm").read_bytes()
    _report(10, "dataset build, three training stages, surrogate selection, and PPM "
                "export rerun bit-identically from (config, seed)")


def test_criterion_11_sweep_axes_fidelity(tmp_path, dataset, sched, trained_denoiser,
                                          embedder, bank):
    runs = [
        ("strategies", dict(methods=["Contrastive"], ipcs=[1], seeds=[0],
                            strategies=["random", "similar:3", "weighted"])),
        ("lambda", dict(methods=["Contrastive"], ipcs=[1], seeds=[0],
                        lambdas=[0.0, 0.5, 1.0, 2.0, 4.0])),
        ("n_neg", dict(methods=["Contrastive"], ipcs=[1], seeds=[0],
                       n_negs=[0, 5, 10, 20])),
    ]
    details = []
    for name, axes in runs:
        cfg = ev.ExperimentConfig(experiment_id=name, steps=8, epochs=2,
                                  export_grids=False, **axes)
        out = tmp_path / name
        report = ev.run_experiment(cfg, out, dataset, sched, trained_denoiser, embedder,
                                   bank)
        expect = set(cfg.cells())
        got = {ev._cell_key(r) for r in report.rows}
        assert got == expect, f"{name}: missing cells {expect - got}"
        details.append(f"{name}:{len(got)} cells")
    _report(11, "complete CSVs with no missing cells (" + ", ".join(details) + ")")
