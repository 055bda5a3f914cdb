import json

import numpy as np
import pytest

from conceptdiff import concepts as C
from conceptdiff.data import AttributeVocab, CategorySpec, default_categories
from conceptdiff.embedder import Tokenizer, build_vocabulary
from conceptdiff.errors import ArgumentError, FormatError, TransportError
from conceptdiff.seeds import rng_for


@pytest.fixture(scope="module")
def vocab():
    return AttributeVocab()


@pytest.fixture(scope="module")
def cats():
    return default_categories()


# -- procedural retrieval ----------------------------------------------------


def test_procedural_mentions_own_attributes(vocab, cats):
    circle_red = cats[0]  # large red circle
    phrases = C.retrieve_concepts_procedural(circle_red, vocab, cats)
    assert len(phrases) == 10
    text = " ".join(p.text for p in phrases)
    assert "circular" in text and "red" in text
    for other_shape_word in ("square", "triangular", "arms"):
        assert other_shape_word not in text


def test_procedural_hue_pair_differs_only_in_hue(vocab):
    a = CategorySpec(0, "a", {"shape": "circle", "hue": "red", "size": "small"})
    b = CategorySpec(1, "b", {"shape": "circle", "hue": "blue", "size": "small"})
    others = [a, b]
    pa = {p.text for p in C.retrieve_concepts_procedural(a, vocab, others)}
    pb = {p.text for p in C.retrieve_concepts_procedural(b, vocab, others)}
    only_a = pa - pb
    only_b = pb - pa
    assert only_a and only_b
    assert all("red" in t for t in only_a)
    assert all("blue" in t for t in only_b)
    assert (pa & pb) == {t for t in pa if "red" not in t}


def test_procedural_deterministic(vocab, cats):
    p1 = [p.text for p in C.retrieve_concepts_procedural(cats[3], vocab, cats)]
    p2 = [p.text for p in C.retrieve_concepts_procedural(cats[3], vocab, cats)]
    assert p1 == p2


def test_procedural_rejects_bad_bundle(vocab, cats):
    bad = CategorySpec(0, "x", {"shape": "blob", "hue": "red", "size": "small"})
    with pytest.raises(ArgumentError):
        C.retrieve_concepts_procedural(bad, vocab, cats)


# -- LLM retrieval -----------------------------------------------------------

CANNED_PHRASES = [f"phrase number {i} about looks" for i in range(10)]


def canned_response(name, phrases=CANNED_PHRASES):
    inner = json.dumps([name, phrases])
    return {"choices": [{"message": {"content": f"ok <answer>{inner}</answer> done"}}]}


def test_prompt_contains_category_and_format(cats):
    prompt = C.build_prompt(cats[0].name)
    assert cats[0].name in prompt
    assert "<answer>" in prompt and "</answer>" in prompt
    assert "10 short descriptions" in prompt


def test_parse_answer_happy_path():
    raw = f'<answer>{json.dumps(["cat", CANNED_PHRASES])}</answer>'
    assert C.parse_answer(raw, 10) == CANNED_PHRASES


def test_parse_answer_missing_wrapper():
    with pytest.raises(FormatError) as exc:
        C.parse_answer("no tags here", 10)
    assert exc.value.raw == "no tags here"


def test_parse_answer_wrong_count():
    raw = f'<answer>{json.dumps(["cat", CANNED_PHRASES[:7]])}</answer>'
    with pytest.raises(FormatError):
        C.parse_answer(raw, 10)


def test_parse_answer_fancy_quotes():
    inner = json.dumps(["cat", CANNED_PHRASES]).replace('"', "“", 1).replace(
        '"', "”", 1)
    # first two quotes curled; parser normalizes them
    assert C.parse_answer(f"<answer>{inner}</answer>", 10) == CANNED_PHRASES


def test_llm_retrieval_with_canned_transport(cats, tmp_path):
    cfg = C.LlmEndpointConfig(base_url="http://example.invalid/v1/chat", model="test-model")
    calls = []

    def transport(url, body, headers, timeout):
        calls.append(body)
        assert body["model"] == "test-model"
        assert body["messages"][0]["role"] == "user"
        return canned_response(cats[0].name)

    phrases = C.retrieve_concepts_llm(cats[0], cfg, cache_dir=tmp_path, transport=transport)
    assert [p.text for p in phrases] == CANNED_PHRASES
    assert len(calls) == 1

    # cached replay must not touch the network at all
    def dead_transport(url, body, headers, timeout):
        raise AssertionError("network touched despite cache")

    replay = C.retrieve_concepts_llm(cats[0], cfg, cache_dir=tmp_path,
                                     transport=dead_transport)
    assert [p.text for p in replay] == CANNED_PHRASES


def test_llm_transport_failure(cats, tmp_path):
    cfg = C.LlmEndpointConfig(base_url="http://example.invalid", model="m", max_retries=2)

    def failing(url, body, headers, timeout):
        raise TransportError("boom")

    with pytest.raises(TransportError):
        C.retrieve_concepts_llm(cats[1], cfg, cache_dir=tmp_path, transport=failing)


def test_llm_format_error_preserves_raw(cats, tmp_path):
    cfg = C.LlmEndpointConfig(base_url="http://example.invalid", model="m")

    def transport(url, body, headers, timeout):
        return {"choices": [{"message": {"content": "<answer>not json</answer>"}}]}

    with pytest.raises(FormatError) as exc:
        C.retrieve_concepts_llm(cats[2], cfg, cache_dir=None, transport=transport)
    assert "not json" in exc.value.raw


def test_retrieve_all_llm_covers_categories(cats, tmp_path):
    cfg = C.LlmEndpointConfig(base_url="http://example.invalid", model="m")

    def transport(url, body, headers, timeout):
        for c in cats:
            if c.name in body["messages"][0]["content"]:
                return canned_response(c.name, [f"{c.name} phrase {i}" for i in range(10)])
        raise AssertionError("unknown category in prompt")

    result = C.retrieve_all_llm(cats, cfg, cache_dir=tmp_path, transport=transport)
    assert set(result) == {c.id for c in cats}
    assert all(len(v) == 10 for v in result.values())


def test_endpoint_config_validation():
    with pytest.raises(ArgumentError):
        C.LlmEndpointConfig(base_url="x", model="m", timeout=0)


# -- validity selection ------------------------------------------------------


def test_select_k_equals_retrieved(bank, embedder, dataset):
    images = {c.id: dataset.images_of(c.id, "train")[:8] for c in dataset.categories}
    raw = C.ConceptBank(categories=[
        C.CategoryConcepts(id=c.id, name=c.name, retrieved=list(c.retrieved))
        for c in bank.categories
    ])
    out = C.select_valid_concepts(raw, embedder, images, k=10)
    for cat in out.categories:
        assert sorted(cat.selected) == sorted(cat.retrieved)
        assert len(cat.scores) == len(cat.retrieved)


def test_select_matches_bruteforce_oracle(bank, embedder, dataset):
    from conceptdiff.embedder import activation_score

    rng = rng_for(0, "oracle")
    for trial in range(6):
        k = int(rng.integers(1, 8))
        cats = []
        for c in dataset.categories[:3]:
            pool = list(bank.category(c.id).retrieved)
            phrases = [pool[int(rng.integers(0, len(pool)))] for _ in range(10)]
            cats.append(C.CategoryConcepts(id=c.id, name=c.name, retrieved=phrases))
        raw = C.ConceptBank(categories=cats)
        images = {c.id: dataset.images_of(c.id, "train")[4:10] for c in dataset.categories}
        out = C.select_valid_concepts(raw, embedder, images, k=k)
        for cat in out.categories:
            scores = [activation_score(embedder, images[cat.id],
                                       embedder.tokenizer.phrase(t))
                      for t in cat.retrieved]
            order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
            expect = [cat.retrieved[i] for i in order[:k]]
            assert cat.selected == expect


def test_select_tie_break_by_retrieval_order(embedder, dataset):
    # identical phrases score identically; ties must keep retrieval order
    images = {0: dataset.images_of(0, "train")[:4]}
    raw = C.ConceptBank(categories=[
        C.CategoryConcepts(id=0, name="large red circle",
                           retrieved=["vivid red body"] * 4)
    ])
    out = C.select_valid_concepts(raw, embedder, images, k=2)
    assert out.categories[0].selected == ["vivid red body", "vivid red body"]
    s = out.categories[0].scores
    assert s[0] == s[1] == s[2] == s[3]


def test_select_rejects_bad_k(bank, embedder, dataset):
    images = {c.id: dataset.images_of(c.id, "train")[:4] for c in dataset.categories}
    with pytest.raises(ArgumentError):
        C.select_valid_concepts(bank, embedder, images, k=0)


# -- similarity --------------------------------------------------------------


def test_similarity_invariants(bank):
    S = bank.similarity
    n = S.shape[0]
    np.testing.assert_array_equal(np.diag(S), np.ones(n))
    np.testing.assert_array_equal(S, S.T)
    assert S.min() >= -1.0 and S.max() <= 1.0


def test_similarity_identical_names(embedder):
    cats = [CategorySpec(0, "same name", {}), CategorySpec(1, "same name", {})]
    S = C.category_similarity(embedder, cats)
    assert S[0, 1] == pytest.approx(1.0, abs=1e-6)


def test_similarity_needs_two(embedder):
    with pytest.raises(ArgumentError):
        C.category_similarity(embedder, [CategorySpec(0, "a", {})])


# -- bank serialization ------------------------------------------------------


def test_bank_round_trip_bit_exact(bank, tmp_path):
    path = tmp_path / "bank.json"
    bank.save(path)
    loaded = C.ConceptBank.load(path)
    assert loaded.to_json() == bank.to_json()
    np.testing.assert_array_equal(loaded.similarity, bank.similarity)
    path2 = tmp_path / "bank2.json"
    loaded.save(path2)
    assert path.read_bytes() == path2.read_bytes()


def test_bank_checksum_stable(bank):
    assert bank.checksum() == bank.checksum()


def test_bank_unknown_category(bank):
    with pytest.raises(ArgumentError):
        bank.category(999)


# -- negative sampling -------------------------------------------------------


def _tok():
    return Tokenizer(build_vocabulary(AttributeVocab(), ["neg phrase"]))


def _synthetic_bank(similarities):
    """target category 0 plus donors 1..n with given similarity to 0."""
    n = len(similarities)
    cats = [C.CategoryConcepts(id=0, name="target", retrieved=["t"], selected=["t"])]
    for i, s in enumerate(similarities):
        cats.append(C.CategoryConcepts(id=i + 1, name=f"donor{i}", retrieved=["n"],
                                       selected=[f"neg phrase {i}", f"neg phrase {i} b"]))
    S = np.eye(n + 1)
    S[0, 1:] = similarities
    S[1:, 0] = similarities
    return C.ConceptBank(categories=cats, similarity=S)


def test_target_never_among_negatives(bank, embedder):
    rng = rng_for(0, "neg")
    for strat in (C.NegativeStrategy("random"), C.NegativeStrategy("similar", 3),
                  C.NegativeStrategy("weighted")):
        out = C.sample_negative_concepts(bank, 2, 50, strat, rng, embedder.tokenizer)
        assert len(out) == 50
        assert all(p.category_id != 2 for p in out)


def test_zero_negatives(bank, embedder):
    out = C.sample_negative_concepts(bank, 0, 0, C.NegativeStrategy("random"),
                                     rng_for(0, "z"), embedder.tokenizer)
    assert out == []


def test_no_eligible_donors_rejected(embedder):
    lonely = C.ConceptBank(categories=[
        C.CategoryConcepts(id=0, name="only", retrieved=["a"], selected=["a"])])
    with pytest.raises(ArgumentError):
        C.sample_negative_concepts(lonely, 0, 3, C.NegativeStrategy("random"),
                                   rng_for(0, "x"), embedder.tokenizer)


def test_weighted_degenerate_uniform_frequencies():
    bank = _synthetic_bank([0.5] * 4)
    rng = rng_for(11, "freq")
    out = C.sample_negative_concepts(bank, 0, 100_000, C.NegativeStrategy("weighted"),
                                     rng, _tok())
    counts = np.bincount([p.category_id for p in out], minlength=5)[1:]
    freqs = counts / counts.sum()
    assert np.abs(freqs - 0.25).max() <= 0.01


def test_weighted_two_donor_frequencies():
    bank = _synthetic_bank([0.9, 0.1])
    rng = rng_for(12, "freq2")
    out = C.sample_negative_concepts(bank, 0, 100_000, C.NegativeStrategy("weighted"),
                                     rng, _tok())
    counts = np.bincount([p.category_id for p in out], minlength=3)[1:]
    freqs = counts / counts.sum()
    assert abs(freqs[0] - 0.9) <= 0.01 and abs(freqs[1] - 0.1) <= 0.01


def test_weighted_floor_keeps_negative_similarity_reachable():
    bank = _synthetic_bank([0.8, -0.5])
    rng = rng_for(13, "floor")
    out = C.sample_negative_concepts(bank, 0, 50_000, C.NegativeStrategy("weighted"),
                                     rng, _tok())
    counts = np.bincount([p.category_id for p in out], minlength=3)[1:]
    assert counts[1] > 0  # floored weight, never starved
    expected = C.WEIGHT_FLOOR / (0.8 + C.WEIGHT_FLOOR)
    assert counts[1] / counts.sum() <= expected * 3 + 0.01


def test_similar_k_restricts_to_top_k():
    bank = _synthetic_bank([0.9, 0.5, 0.1, -0.2])
    rng = rng_for(14, "simk")
    out = C.sample_negative_concepts(bank, 0, 20_000, C.NegativeStrategy("similar", 2),
                                     rng, _tok())
    counts = np.bincount([p.category_id for p in out], minlength=5)[1:]
    assert counts[2] == 0 and counts[3] == 0
    freqs = counts[:2] / counts.sum()
    assert np.abs(freqs - 0.5).max() <= 0.01


def test_similar_k_bounds():
    with pytest.raises(ArgumentError):
        C.NegativeStrategy("similar", 0)
    bank = _synthetic_bank([0.9, 0.5])
    with pytest.raises(ArgumentError):
        C.sample_negative_concepts(bank, 0, 5, C.NegativeStrategy("similar", 5),
                                   rng_for(0, "b"), _tok())


def test_strategy_parse_round_trip():
    for text in ("random", "weighted", "similar:3"):
        assert str(C.NegativeStrategy.parse(text)) == text
    with pytest.raises(ArgumentError):
        C.NegativeStrategy.parse("nearest")
