import math

import numpy as np
import pytest

from p4rec import lm
from p4rec import numerics as nx
from p4rec.lm import BcData, Context, ContextBatch, LmConfig, PolicyModel, TrainConfig
from p4rec.vocab import BOS_ID, EOS_ID, Vocabulary


def _cfg(**kw):
    base = dict(vocab_size=12, d_model=16, n_layers=2, n_heads=2, d_ff=24, d_cf=3, adapter_hidden=8,
                max_item_tokens=6, horizon=5, seed=0)
    base.update(kw)
    return LmConfig(**base)


def _ctx(rng, n=4, V=12, d_cf=3):
    return Context(rng.integers(4, V, size=n), rng.normal(size=d_cf), rng.normal(size=d_cf))


def _zero_head(m):
    m.head.weight.data[:] = 0.0
    m.head.bias.data[:] = 0.0


def test_config_validation():
    with pytest.raises(ValueError):
        LmConfig(vocab_size=10, d_model=10, n_heads=4).validate()
    with pytest.raises(ValueError):
        LmConfig(vocab_size=10, dropout=0.1).validate()


# -- encode_context ----------------------------------------------------------------

def test_prefix_length():
    m = PolicyModel(_cfg())
    rng = np.random.default_rng(0)
    for n in (0, 3, 6):
        assert m.encode_context(_ctx(rng, n)).shape == (6 + 2, 16)


def test_zero_cf_vectors_use_bias_pathway():
    m = PolicyModel(_cfg())
    ctx = Context(np.array([5, 6]), np.zeros(3), np.zeros(3))
    a, b = m.encode_context(ctx).data, m.encode_context(ctx).data
    assert np.isfinite(a).all() and np.array_equal(a, b)
    expect = m.adapter_item(nx.tensor(np.zeros((1, 3)))).data[0] + m.pos_emb.weight.data[0]
    np.testing.assert_allclose(a[0], expect, atol=1e-12)


def test_user_change_only_moves_position_one():
    m = PolicyModel(_cfg())
    rng = np.random.default_rng(1)
    c1 = _ctx(rng)
    c2 = Context(c1.item_tokens, c1.i_vec, rng.normal(size=3))
    diff = np.abs(m.encode_context(c1).data - m.encode_context(c2).data).sum(axis=1)
    assert diff[1] > 0 and np.all(diff[np.arange(len(diff)) != 1] == 0)


def test_context_errors():
    m = PolicyModel(_cfg())
    with pytest.raises(ValueError):
        m.encode_context(Context(np.arange(7) + 4, np.zeros(3), np.zeros(3)))
    with pytest.raises(ValueError, match="dimension"):
        m.encode_context(Context(np.array([4]), np.zeros(5), np.zeros(5)))


def test_item_padding_is_masked():
    m = PolicyModel(_cfg())
    rng = np.random.default_rng(2)
    short = _ctx(rng, 2)
    wide = ContextBatch.from_contexts([short, _ctx(rng, 6)], 6)
    alone = ContextBatch.from_contexts([short], 6)
    Y = [[5, 6, EOS_ID], [7, EOS_ID]]
    a = lm.batch_sequence_log_probs(m, wide, Y).data[0]
    b = lm.batch_sequence_log_probs(m, alone, Y[:1]).data[0]
    assert a == pytest.approx(b, abs=1e-12)


# -- sequence_log_prob -------------------------------------------------------------

def test_zero_head_uniform_single_token():
    m = PolicyModel(_cfg())
    _zero_head(m)
    ctx = _ctx(np.random.default_rng(0))
    assert lm.sequence_log_prob(m, ctx, [EOS_ID]).item() == pytest.approx(math.log(1 / 12), abs=1e-12)


def test_chain_rule():
    m = PolicyModel(_cfg())
    ctx = _ctx(np.random.default_rng(3))
    Y = [5, 9, 4, EOS_ID]
    total = lm.sequence_log_prob(m, ctx, Y).item()
    batch = ContextBatch.from_contexts([ctx], 6)
    parts = 0.0
    for n in range(len(Y)):
        inputs = np.array([[BOS_ID] + Y[:n]])
        parts += m.log_probs(batch, inputs).data[0, -1, Y[n]]
    assert total == pytest.approx(parts, abs=1e-10)


def test_sequence_log_prob_contract():
    m = PolicyModel(_cfg())
    ctx = _ctx(np.random.default_rng(4))
    with pytest.raises(ValueError):
        lm.sequence_log_prob(m, ctx, [5, 6])  # no EOS, shorter than N
    with pytest.raises(ValueError):
        lm.sequence_log_prob(m, ctx, [12, EOS_ID])
    lm.sequence_log_prob(m, ctx, [5, 6, 7, 8, 9])  # length N without EOS is allowed


def test_distributions_normalized():
    m = PolicyModel(_cfg())
    ctx = _ctx(np.random.default_rng(5))
    lp = m.token_log_probs(ContextBatch.from_contexts([ctx], 6), np.array([[5, 6, 7, 8, 9]])).data
    np.testing.assert_allclose(np.exp(lp).sum(axis=-1), 1.0, atol=1e-9)


def test_first_token_sampling_matches_probabilities():
    m = PolicyModel(_cfg(vocab_size=6, d_model=8, n_layers=1, max_item_tokens=3))
    ctx = _ctx(np.random.default_rng(6), 3, V=6)
    batch = ContextBatch.from_contexts([ctx], 3)
    p = np.exp(m.log_probs(batch, np.array([[BOS_ID]])).data[0, 0])
    n = 100_000
    big = ContextBatch(np.repeat(batch.item_ids, n, 0), np.repeat(batch.item_mask, n, 0),
                       np.repeat(batch.i_vecs, n, 0), np.repeat(batch.u_vecs, n, 0))
    first = [s.tokens[0] for s in lm.sample_responses(m, big, "temperature", max_len=1, seed=1)]
    freq = np.bincount(first, minlength=6) / n
    assert np.all(np.abs(freq - p) <= 3 * np.sqrt(p * (1 - p) / n) + 1e-12)


def test_two_token_enumeration():
    m = PolicyModel(_cfg(vocab_size=2, d_model=8, n_layers=1, max_item_tokens=2, horizon=2))
    ctx = Context(np.array([1, 0]), np.ones(3), -np.ones(3))
    batch = ContextBatch.from_contexts([ctx], 2)
    exact = {}
    for a in (0, 1):
        for b in (0, 1):
            lp = m.log_probs(batch, np.array([[BOS_ID, a]])).data[0]
            exact[(a, b)] = math.exp(lp[0, a] + lp[1, b])
    n = 20_000
    rep = ContextBatch(np.repeat(batch.item_ids, n, 0), np.repeat(batch.item_mask, n, 0),
                       np.repeat(batch.i_vecs, n, 0), np.repeat(batch.u_vecs, n, 0))
    samples = lm.decode(lambda x: m.logits(rep, x).data[:, -1], n, 2, "temperature", seed=3, eos_id=None)
    counts = {}
    for s in samples:
        counts[tuple(s.tokens)] = counts.get(tuple(s.tokens), 0) + 1
    assert sum(exact.values()) == pytest.approx(1.0, abs=1e-12)
    for seq, p in exact.items():
        assert abs(counts.get(seq, 0) / n - p) <= 3 * math.sqrt(p * (1 - p) / n)


# -- sample_response ---------------------------------------------------------------

def test_greedy_deterministic_and_low_temperature_limit():
    m = PolicyModel(_cfg())
    ctx = _ctx(np.random.default_rng(7))
    g1 = lm.sample_response(m, ctx)
    assert g1 == lm.sample_response(m, ctx)
    assert lm.sample_response(m, ctx, "temperature", temperature=1e-6, seed=5) == g1
    assert len(g1) <= 5


def test_greedy_tie_breaks_to_lowest_id():
    m = PolicyModel(_cfg())
    _zero_head(m)
    assert lm.sample_response(m, _ctx(np.random.default_rng(0))) == [0, 0, 0, 0, 0]


def test_greedy_is_stepwise_optimal():
    m = PolicyModel(_cfg())
    ctx = _ctx(np.random.default_rng(8))
    Y = lm.sample_response(m, ctx)
    lp = m.token_log_probs(ContextBatch.from_contexts([ctx], 6), np.array([Y])).data[0]
    for n, y in enumerate(Y):
        assert lp[n, y] >= lp[n].max() - 1e-12


def test_sample_errors():
    m = PolicyModel(_cfg())
    ctx = _ctx(np.random.default_rng(0))
    with pytest.raises(ValueError):
        lm.sample_response(m, ctx, max_len=0)
    with pytest.raises(ValueError):
        lm.sample_response(m, ctx, "temperature", temperature=0.0)


# -- training ----------------------------------------------------------------------

def test_lcond_gradient_matches_finite_differences():
    m = PolicyModel(_cfg(d_model=16, n_layers=2))
    rng = np.random.default_rng(9)
    batch = ContextBatch.from_contexts([_ctx(rng), _ctx(rng, 6)], 6)
    seqs = [[5, 6, EOS_ID], [7, 8, 9, 10, EOS_ID]]
    fn = lambda: -lm.batch_sequence_log_probs(m, batch, seqs).mean()
    err = nx.gradient_check(fn, m.named_parameters(), max_entries=4, rng=np.random.default_rng(0))
    assert err <= 1e-4


def _data(rng, n, V=12):
    ctxs = [_ctx(rng, V=V) for _ in range(n)]
    resp = [list(rng.integers(4, V, size=int(rng.integers(1, 4)))) + [EOS_ID] for _ in range(n)]
    return BcData(ContextBatch.from_contexts(ctxs, 6), resp)


def test_bc_initial_loss_uniform():
    m = PolicyModel(_cfg())
    _zero_head(m)
    rng = np.random.default_rng(10)
    data = BcData(ContextBatch.from_contexts([_ctx(rng)], 6), [[5, 6, 7, EOS_ID]])
    assert lm.mean_loss(m, data) == pytest.approx(4 * math.log(12), abs=1e-9)


def test_bc_memorizes_single_record():
    m = PolicyModel(_cfg())
    data = _data(np.random.default_rng(11), 1)
    curve = lm.bc_train(m, data, TrainConfig(epochs=300, lr=1e-2, batch_size=1))
    assert curve[-1] <= 0.01


def test_bc_empty_dataset():
    m = PolicyModel(_cfg())
    with pytest.raises(ValueError):
        lm.bc_train(m, BcData(ContextBatch.from_contexts([], 6), []), TrainConfig())


def test_warm_start_contract():
    m = PolicyModel(_cfg())
    data = _data(np.random.default_rng(12), 16)
    res = lm.warm_start(m, data, 4, 2, TrainConfig(lr=5e-3, batch_size=8))
    assert res.transformer_checksum_after_stage1 == res.transformer_checksum_before
    assert res.transformer_checksum_after_stage2 != res.transformer_checksum_after_stage1
    assert all(b <= a + 1e-6 for a, b in zip(res.stage1, res.stage1[1:]))


def test_warm_start_zero_stage2_keeps_stage1_output():
    m = PolicyModel(_cfg())
    data = _data(np.random.default_rng(13), 8)
    res = lm.warm_start(m, data, 2, 0)
    assert res.transformer_checksum_after_stage2 == res.transformer_checksum_after_stage1
    assert res.stage2 == []
    with pytest.raises(ValueError):
        lm.warm_start(m, data, 0, 0)


def test_pretrain_leaves_adapters_alone():
    m = PolicyModel(_cfg())
    before = nx.checksum(m.adapter_parameters())
    lm.pretrain_text(m, _data(np.random.default_rng(14), 8), TrainConfig(epochs=1))
    assert nx.checksum(m.adapter_parameters()) == before


def test_save_load_round_trip(tmp_path):
    vocab = Vocabulary([f"w{k}" for k in range(8)])
    m = PolicyModel(_cfg(vocab_size=len(vocab)))
    m.cf_scale = 2.5
    m.save(tmp_path / "m.p4t", vocab)
    back = PolicyModel.load(tmp_path / "m.p4t", vocab)
    assert nx.checksum(back.named_parameters()) == nx.checksum(m.named_parameters())
    assert back.cf_scale == 2.5
    with pytest.raises(ValueError):
        PolicyModel.load(tmp_path / "m.p4t", Vocabulary(["other"] * 1 + [f"v{k}" for k in range(7)]))
