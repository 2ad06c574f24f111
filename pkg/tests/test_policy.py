import io
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from memact import features as F
from memact.environment import generate_tasks
from memact.memory import IdSource, WorkingMemory, append
from memact.policy import (
    CheckpointMismatch, GradAccumulator, PolicyParams, action_contexts, distribution, grad_logprob, logits,
    logprob, sample_action, score_action,
)
from memact.rollout import ExpertAgent, run_episode
from memact.tokenizer import VOCAB, encode

from conftest import N_FEATURES_SMALL, random_params

V = len(VOCAB)


def _memory(n_search=2, seed=0):
    ids = IdSource(seed)
    mem = WorkingMemory.start("answer question 1 : Kador parent rival ?", ids)
    for _ in range(n_search):
        mem = append(mem, "SEARCH Kador parent", "the Kador parent Bodor . of", ids)
    return mem


def _random_features(rng, n_features=N_FEATURES_SMALL):
    mem = _memory(int(rng.integers(0, 4)), int(rng.integers(1000)))
    toks = mem.token_ids()
    partial = [F.SEARCH] if rng.random() < 0.5 else []
    return F.featurize(toks, partial, n_features=n_features)


# ---- features ---------------------------------------------------------------

def test_featurize_deterministic():
    toks = _memory().token_ids()
    a, b = F.featurize(toks, [F.SEARCH]), F.featurize(toks, [F.SEARCH])
    assert np.array_equal(a.indices, b.indices) and np.array_equal(a.values, b.values)


def test_features_l2_normalised():
    rng = np.random.default_rng(0)
    for _ in range(50):
        assert abs(_random_features(rng).norm - 1.0) < 1e-12


def test_window_ignores_permutations_outside_it():
    toks = _memory(3).token_ids()
    w = 8
    head, tail = toks[:-w], toks[-w:]
    rng = np.random.default_rng(1)
    shuffled = list(rng.permutation(head)) + tail
    a = F.featurize(toks, [], window=w, structural=False)
    b = F.featurize(shuffled, [], window=w, structural=False)
    assert np.array_equal(a.indices, b.indices) and np.allclose(a.values, b.values)


def test_window_sees_partial_action():
    toks = _memory().token_ids()
    a = F.featurize(toks, [], structural=False)
    b = F.featurize(toks, [F.SEARCH], structural=False)
    assert not np.array_equal(a.indices, b.indices)


def test_structural_indicators_track_open_objectives():
    ids = IdSource(0)
    mem = WorkingMemory.start("answer question 1 : Kador parent ?", ids)
    open_view = F.parse_memory(mem.token_ids())
    assert open_view.open_frontiers == [(VOCAB.id_of("Kador"), VOCAB.id_of("parent"))]
    mem = append(mem, "SEARCH Kador parent", "x Kador parent Bodor .", ids)
    done_view = F.parse_memory(mem.token_ids())
    assert done_view.status == [("resolved", VOCAB.id_of("Bodor"))]
    keys_open = F.structural_keys(F.GrammarState(F.START), open_view)
    keys_done = F.structural_keys(F.GrammarState(F.START), done_view)
    assert (F.START, F.K_BIAS, 0) in keys_done and (F.START, F.K_BIAS, 1) in keys_open
    assert (F.START, F.K_UNRES, 0) in keys_done and (F.START, F.K_UNRES, 1) in keys_open


def _dictionary_collision_oracle(keys, n):
    slot_of = {k: F.stable_hash(k) % n for k in keys}
    owners = Counter(slot_of.values())
    return sum(1 for k in keys if owners[slot_of[k]] > 1) / len(keys)


def test_collision_rate_below_five_percent_on_corpus(env, limits):
    tasks = generate_tasks(env.graph, 40, [1, 2, 3, 4], [2, 3], seed=5)
    texts = []
    for i, t in enumerate(tasks):
        tr = run_episode(ExpertAgent(use_memory=i % 2 == 0), env, t, limits, seed=i)
        texts += [encode(s.pre_snapshot) + s.token_ids for s in tr.steps]
    keys = F.corpus_ngram_keys(texts)
    rate = F.collision_rate(keys, F.DEFAULT_N_FEATURES)
    assert rate == pytest.approx(_dictionary_collision_oracle(keys, F.DEFAULT_N_FEATURES), abs=0)
    assert rate < 0.05


def test_collision_oracle_small_table():
    keys = {(1, i) for i in range(40)}
    assert F.collision_rate(keys, 16) == pytest.approx(_dictionary_collision_oracle(keys, 16))
    assert F.collision_rate(keys, 16) > 0.5


# ---- grammar ----------------------------------------------------------------

def test_grammar_start_offers_prune_only_with_records():
    ids = IdSource(0)
    mem = WorkingMemory.start("answer question 1 : Kador parent ?", ids)
    view = F.parse_memory(mem.token_ids())
    assert set(F.legal_tokens(F.GrammarState(F.START), view)) == {F.SEARCH, F.ANSWER}
    mem = append(mem, "SEARCH Kador parent", "x", ids)
    view = F.parse_memory(mem.token_ids())
    assert F.PRUNE in F.legal_tokens(F.GrammarState(F.START), view)
    assert F.PRUNE not in F.legal_tokens(F.GrammarState(F.START), view, allow_memory=False)


def test_prune_ids_never_repeat_or_name_instruction():
    mem = _memory(2)
    view = F.parse_memory(mem.token_ids())
    instr = VOCAB.id_of(mem.records[0].id)
    first = VOCAB.id_of(mem.records[1].id)
    cands = F.prune_candidates(view, [first])
    assert instr not in cands and first not in cands
    assert len(cands) == len(mem) - 2


def test_grammar_masking_is_exactly_zero():
    rng = np.random.default_rng(3)
    params = random_params(rng, scale=2.0)
    toks = _memory().token_ids()
    view = F.parse_memory(toks)
    for partial in ([], [F.SEARCH], [F.ANSWER], [F.PRUNE, F.IDS, F.EQ]):
        state = F.grammar_state(partial)
        legal = F.legal_tokens(state, view)
        f = F.features_from_view(view, toks, partial, state, params.feature_dim, params.window)
        p = distribution(params, f, legal)
        illegal = np.setdiff1d(np.arange(V), legal)
        assert np.all(p[illegal] == 0.0)
        assert abs(p.sum() - 1.0) < 1e-12
        assert logprob(params, f, int(illegal[0]), legal) == float("-inf")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 3.0))
def test_sampled_actions_parse(seed, scale):
    rng = np.random.default_rng(seed)
    params = random_params(rng, scale=scale)
    s = sample_action(params, _memory(2, seed), rng)
    if not s.malformed:
        assert F.grammar_state(s.token_ids).slot == F.DONE
    assert len(s.token_ids) <= params.token_cap


# ---- logprob ----------------------------------------------------------------

def test_zero_weights_uniform():
    params = PolicyParams.zeros(N_FEATURES_SMALL)
    f = _random_features(np.random.default_rng(0))
    for tok in (0, 17, V - 1):
        assert logprob(params, f, tok) == pytest.approx(-np.log(V), abs=1e-12)


def test_probabilities_normalise():
    rng = np.random.default_rng(1)
    for _ in range(20):
        params = random_params(rng, scale=3.0)
        f = _random_features(rng)
        lp = np.array([logprob(params, f, t) for t in range(V)])
        assert abs(np.exp(lp).sum() - 1.0) < 1e-12
        m = lp.max()
        assert abs(m + np.log(np.exp(lp - m).sum())) < 1e-12


def test_logprob_matches_dense_softmax():
    rng = np.random.default_rng(2)
    for _ in range(20):
        params = random_params(rng, scale=1.5, temperature=float(rng.uniform(0.5, 2.0)))
        f = _random_features(rng)
        z = f.dense(params.feature_dim) @ params.weights
        for g, t in zip(f.tied_groups, f.tied_tokens):
            z[t] += params.tied[g]
        z /= params.temperature
        brute = z - np.log(np.sum(np.exp(z)))
        tok = int(rng.integers(V))
        assert logprob(params, f, tok) == pytest.approx(brute[tok], abs=1e-12)


def test_sampling_matches_exact_two_token_distribution():
    """First two tokens of an action from an instruction-only memory: keyword then entity."""
    rng = np.random.default_rng(4)
    params = random_params(rng, scale=4.0)
    ids = IdSource(0)
    mem = WorkingMemory.start("answer question 1 : Kador parent ?", ids)
    toks = mem.token_ids()
    view = F.parse_memory(toks)
    exact: dict[tuple[int, int], float] = {}
    s0 = F.grammar_state([])
    legal0 = F.legal_tokens(s0, view)
    p0 = distribution(params, F.features_from_view(view, toks, [], s0, params.feature_dim, params.window), legal0)
    for kw in legal0:
        s1 = F.grammar_state([kw])
        legal1 = F.legal_tokens(s1, view)
        f1 = F.features_from_view(view, toks, [kw], s1, params.feature_dim, params.window)
        p1 = distribution(params, f1, legal1)
        for t in legal1:
            exact[(int(kw), int(t))] = p0[kw] * p1[t]
    assert sum(exact.values()) == pytest.approx(1.0, abs=1e-12)
    n = 10_000
    srng = np.random.default_rng(5)
    counts = Counter(tuple(sample_action(params, mem, srng).token_ids[:2]) for _ in range(n))
    for cell, p in exact.items():
        sigma = np.sqrt(n * p * (1 - p))
        assert abs(counts.get(cell, 0) - n * p) <= 3 * sigma + 1, cell


def test_recorded_logprobs_replay():
    rng = np.random.default_rng(6)
    params = random_params(rng, scale=1.0)
    mem = _memory(3)
    for _ in range(20):
        s = sample_action(params, mem, rng)
        assert np.allclose(score_action(params, mem.token_ids(), s.token_ids), s.logprobs, atol=1e-12, rtol=0)


def test_forced_tokens_have_zero_logprob():
    params = random_params(np.random.default_rng(7))
    mem = _memory(2)
    act = encode(f"PRUNE ids = {mem.records[1].id} summary = END")
    lps = score_action(params, mem.token_ids(), act)
    assert lps[1] == 0.0 and lps[2] == 0.0  # "ids" and "=" are forced


def test_token_cap_marks_malformed():
    params = PolicyParams.zeros(N_FEATURES_SMALL, token_cap=3)
    rng = np.random.default_rng(0)
    outs = [sample_action(params, _memory(2), rng) for _ in range(30)]
    assert any(o.malformed for o in outs)
    assert all(len(o.token_ids) <= 3 for o in outs)


# ---- gradients --------------------------------------------------------------

def test_grad_rows_sum_to_zero_over_vocab():
    rng = np.random.default_rng(8)
    params = random_params(rng)
    f = _random_features(rng)
    g = grad_logprob(params, f, 5)
    assert np.allclose(g.data.sum(axis=1), 0.0, atol=1e-12)


def test_zero_features_zero_grad():
    params = random_params(np.random.default_rng(9))
    empty = F.ContextFeatures(np.zeros(0, dtype=np.int64), np.zeros(0))
    g = grad_logprob(params, empty, 3)
    assert g.norm() == 0.0


def test_grad_matches_finite_differences_on_100_triples():
    rng = np.random.default_rng(10)
    h = 1e-6
    for _ in range(100):
        params = random_params(rng, n_features=256, scale=float(rng.uniform(0.1, 2.0)),
                               temperature=float(rng.uniform(0.5, 2.0)))
        f = _random_features(rng, n_features=256)
        tok = int(rng.integers(V))
        g = grad_logprob(params, f, tok)
        cols = np.concatenate([[tok], rng.choice(V, size=5, replace=False)])
        rows = f.indices[: min(4, len(f.indices))]
        analytic, numeric = [], []
        for r in rows:
            for c in cols:
                w0 = params.weights[r, c]
                params.weights[r, c] = w0 + h
                up = logprob(params, f, tok)
                params.weights[r, c] = w0 - h
                down = logprob(params, f, tok)
                params.weights[r, c] = w0
                analytic.append(g.get(int(r), int(c)))
                numeric.append((up - down) / (2 * h))
        a, n = np.array(analytic), np.array(numeric)
        assert np.linalg.norm(a - n) / np.linalg.norm(a) < 1e-6


def test_masked_grad_matches_finite_differences():
    rng = np.random.default_rng(11)
    h = 1e-6
    params = random_params(rng, n_features=256)
    toks = _memory().token_ids()
    view = F.parse_memory(toks)
    state = F.grammar_state([F.SEARCH])
    legal = F.legal_tokens(state, view)
    f = F.features_from_view(view, toks, [F.SEARCH], state, 256, params.window)
    tok = int(legal[3])
    g = grad_logprob(params, f, tok, legal)
    for r in f.indices[:3]:
        for c in (tok, int(legal[0]), 0):
            w0 = params.weights[r, c]
            params.weights[r, c] = w0 + h
            up = logprob(params, f, tok, legal)
            params.weights[r, c] = w0 - h
            down = logprob(params, f, tok, legal)
            params.weights[r, c] = w0
            assert g.get(int(r), c) == pytest.approx((up - down) / (2 * h), rel=1e-6, abs=1e-10)


def test_tied_indicators_point_at_targets():
    ids = IdSource(0)
    mem = WorkingMemory.start("answer question 1 : Kador parent ?", ids)
    view = F.parse_memory(mem.token_ids())
    assert F.tied_indicators(F.grammar_state([F.SEARCH]), view) == [(F.T_SUBJ, VOCAB.id_of("Kador"))]
    mem = append(mem, "SEARCH Kador parent", "x Kador parent Bodor .", ids)
    view = F.parse_memory(mem.token_ids())
    assert F.tied_indicators(F.grammar_state([F.ANSWER]), view) == [(F.T_ANS, VOCAB.id_of("Bodor"))]
    raw = [VOCAB.id_of(r.id) for r in mem.records[1:]]
    assert F.tied_indicators(F.grammar_state([F.PRUNE, F.IDS, F.EQ]), view) == [(F.T_RAWID, t) for t in raw]
    assert F.tied_indicators(F.grammar_state([]), view) == []


def test_tied_grad_matches_finite_differences():
    rng = np.random.default_rng(13)
    h = 1e-6
    checked = 0
    for _ in range(30):
        params = random_params(rng, n_features=256, scale=1.0)
        params.tied[:] = rng.normal(size=F.N_TIED)
        f = _random_features(rng, n_features=256)
        if not len(f.tied_groups):
            continue
        tok = int(f.tied_tokens[0]) if rng.random() < 0.5 else int(rng.integers(V))
        g = grad_logprob(params, f, tok)
        for k in range(F.N_TIED):
            t0 = params.tied[k]
            params.tied[k] = t0 + h
            up = logprob(params, f, tok)
            params.tied[k] = t0 - h
            down = logprob(params, f, tok)
            params.tied[k] = t0
            assert g.tied[k] == pytest.approx((up - down) / (2 * h), rel=1e-6, abs=1e-9)
        checked += 1
    assert checked > 5


def test_grad_accumulator_matches_summed_grads_and_skips_forced():
    rng = np.random.default_rng(14)
    params = random_params(rng, scale=1.0)
    acc = GradAccumulator(params)
    ref = None
    total = 0.0
    for _ in range(6):
        f = _random_features(rng)
        tok, coef = int(rng.integers(V)), float(rng.normal())
        total += acc.add_token(f, tok, None, coef)
        g = grad_logprob(params, f, tok) * coef
        ref = g if ref is None else ref + g
    assert acc.add_token(f, 5, np.array([5]), 3.0) == 0.0  # forced token contributes nothing
    out = acc.result()
    assert np.allclose(out.dense(), ref.dense(), atol=1e-12)
    assert np.allclose(out.tied, ref.tied, atol=1e-12)
    assert np.isfinite(total)


def test_sparse_grad_merge_is_associative_and_commutative():
    rng = np.random.default_rng(12)
    params = random_params(rng)
    gs = [grad_logprob(params, _random_features(rng), int(rng.integers(V))) for _ in range(3)]
    a = ((gs[0] + gs[1]) + gs[2]).dense()
    b = (gs[0] + (gs[1] + gs[2])).dense()
    c = (gs[2] + gs[0] + gs[1]).dense()
    assert np.allclose(a, b, atol=1e-15) and np.allclose(a, c, atol=1e-15)
    assert np.allclose(a, sum(g.dense() for g in gs), atol=1e-15)


# ---- checkpoints ------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    params = random_params(np.random.default_rng(13), temperature=0.7)
    params.weights[5:] = 0.0
    path = tmp_path / "p.npz"
    params.save(path, extra={"update": 3})
    loaded, extra = PolicyParams.load(path)
    assert np.array_equal(loaded.weights, params.weights)
    assert loaded.temperature == 0.7 and extra == {"update": 3}


def test_checkpoint_refuses_feature_dim_mismatch(tmp_path):
    path = tmp_path / "p.npz"
    PolicyParams.zeros(64).save(path)
    with pytest.raises(CheckpointMismatch):
        PolicyParams.load(path, expect_feature_dim=128)


def test_checkpoint_refuses_vocab_mismatch(tmp_path):
    import json
    buf = io.BytesIO()
    PolicyParams.zeros(64).save(buf)
    buf.seek(0)
    with np.load(buf) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(str(arrays["meta"]))
    meta["vocab_hash"] = "0" * 64
    arrays["meta"] = np.array(json.dumps(meta))
    path = tmp_path / "bad.npz"
    np.savez(path, **arrays)
    with pytest.raises(CheckpointMismatch):
        PolicyParams.load(path)


def test_params_validation():
    with pytest.raises(ValueError):
        PolicyParams(np.zeros((4, V)), temperature=0.0)
    with pytest.raises(ValueError):
        PolicyParams(np.zeros((4, V + 1)))


def test_logits_scale_with_temperature():
    rng = np.random.default_rng(14)
    p1 = random_params(rng)
    p2 = PolicyParams(p1.weights, temperature=2.0, tied=p1.tied)
    f = _random_features(rng)
    assert np.allclose(logits(p1, f), 2 * logits(p2, f))


def test_action_contexts_full_features_on_forced_tokens():
    params = random_params(np.random.default_rng(15))
    mem = _memory(2)
    act = encode(f"PRUNE ids = {mem.records[1].id} summary = END")
    lean = list(action_contexts(params, mem.token_ids(), act))
    full = list(action_contexts(params, mem.token_ids(), act, full=True))
    assert len(lean[1].features.indices) == 0
    assert len(full[1].features.indices) > 0
