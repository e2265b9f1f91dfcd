"""Temporal-core contracts: masks, label attention oracles, causality,
equivariances, and checkpoint round-trips."""

from datetime import datetime, timedelta

import numpy as np
import pytest

from lahst import autodiff as ad
from lahst import model as m
from lahst.autodiff import DiffArray, NEG_INF, Tape
from lahst.checkpoint import load_params, save_params
from lahst.data import Chunk, ChunkSequence
from lahst.encoder import encode_chunks

from helpers import check_grads

TS = datetime(2020, 1, 1, 8, 0)


def toy_config(**kw):
    base = dict(
        d_model=8,
        n_layers=1,
        n_heads=1,
        n_label_heads=1,
        vocab_size=30,
        n_labels=3,
        chunk_tokens=8,
    )
    base.update(kw)
    return m.ModelConfig(**base)


def random_seq(rng, n_chunks, vocab=30, min_tokens=2, max_tokens=8):
    chunks = []
    cats = ["Nursing", "Echo", "Radiology", "ECG", "Physician"]
    for i in range(n_chunks):
        toks = rng.integers(0, vocab, size=int(rng.integers(min_tokens, max_tokens + 1)))
        chunks.append(
            Chunk(
                tokens=toks.astype(np.int64),
                note_id=f"n{i}",
                category=cats[int(rng.integers(0, len(cats)))],
                timestamp=TS + timedelta(hours=i),
            )
        )
    return ChunkSequence("s", TS, chunks)


# ---------------------------------------------------------------------------
# time masks
# ---------------------------------------------------------------------------


def test_time_mask_values():
    mask = m.build_time_mask(2, 4)
    assert np.array_equal(mask.values, [0.0, 0.0, NEG_INF, NEG_INF])


def test_time_mask_edges():
    assert np.all(m.build_time_mask(4, 4).values == 0.0)
    first = m.build_time_mask(1, 4)
    assert first.live.tolist() == [True, False, False, False]
    with pytest.raises(ValueError):
        m.build_time_mask(0, 4)
    with pytest.raises(ValueError):
        m.build_time_mask(5, 4)


def test_stacked_masks_match_per_t():
    stacked = m.stacked_time_masks(5)
    assert stacked.values.shape == (5, 1, 5)
    for t in range(1, 6):
        assert np.array_equal(stacked.values[t - 1, 0], m.build_time_mask(t, 5).values)


# ---------------------------------------------------------------------------
# label attention
# ---------------------------------------------------------------------------


def test_label_attend_single_live_slot():
    rng = np.random.default_rng(0)
    cfg = toy_config()
    params = m.init_params(cfg, seed=1)
    h = DiffArray(rng.normal(size=(4, cfg.d_model)))
    d1, _ = m.label_attend(h, params.label_q, 1, params.label_attn)
    # with one live position attention weight is 1 on position 1 for every label
    vh = h.data @ params.label_attn.wv[0].data
    expected = np.repeat(vh[:1], cfg.n_labels, axis=0) @ params.label_attn.wo.data
    np.testing.assert_allclose(d1.data, expected, rtol=0, atol=1e-12)


def test_label_attend_uniform_when_projections_zero():
    cfg = toy_config(n_labels=1)
    params = m.init_params(cfg, seed=2)
    params.label_attn.wq[0].data[:] = 0.0  # zero scores -> uniform weights
    n = 6
    h = DiffArray(np.random.default_rng(1).normal(size=(n, cfg.d_model)))
    _, trace = m.label_attend(h, params.label_q, n, params.label_attn, record_trace=True)
    np.testing.assert_allclose(trace[0], np.full((1, n), 1.0 / n), rtol=0, atol=1e-12)


def loop_label_attention_oracle(h, q, attn):
    """Direct per-position, per-head evaluation of masked label attention."""
    n, d = h.shape
    n_heads = attn.n_heads
    head_dim = d // n_heads
    out = np.zeros((n, q.shape[0], d))
    for t in range(1, n + 1):
        per_head = []
        for i in range(n_heads):
            qh = q @ attn.wq[i].data
            kh = h @ attn.wk[i].data
            vh = h @ attn.wv[i].data
            scores = qh @ kh.T / np.sqrt(head_dim)
            scores = scores[:, :t]
            w = np.exp(scores - scores.max(axis=1, keepdims=True))
            w /= w.sum(axis=1, keepdims=True)
            per_head.append(w @ vh[:t])
        out[t - 1] = np.concatenate(per_head, axis=1) @ attn.wo.data
    return out


@pytest.mark.parametrize("n_label_heads", [1, 2])
def test_label_attend_matches_loop_oracle(n_label_heads):
    rng = np.random.default_rng(10 + n_label_heads)
    cfg = toy_config(d_model=8, n_labels=4, n_label_heads=n_label_heads)
    params = m.init_params(cfg, seed=3)
    h = rng.normal(size=(6, cfg.d_model))
    oracle = loop_label_attention_oracle(h, params.label_q.data, params.label_attn)
    for t in range(1, 7):
        d_t, _ = m.label_attend(DiffArray(h), params.label_q, t, params.label_attn)
        assert np.max(np.abs(d_t.data - oracle[t - 1])) < 1e-10


def test_label_attend_all_equals_per_t_loop_100_instances():
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n_heads = int(rng.integers(1, 3))
        d_model = 8
        n = int(rng.integers(1, 9))
        n_labels = int(rng.integers(1, 6))
        cfg = toy_config(d_model=d_model, n_labels=n_labels, n_label_heads=n_heads)
        params = m.init_params(cfg, seed=seed)
        h = DiffArray(rng.normal(size=(n, d_model)))
        batched, _ = m.label_attend_all(h, params.label_q, params.label_attn)
        for t in range(1, n + 1):
            single, _ = m.label_attend(h, params.label_q, t, params.label_attn)
            worst = max(worst, float(np.max(np.abs(batched.data[t - 1] - single.data))))
    assert worst < 1e-12


def test_label_attend_all_final_slice_equals_unmasked_attention():
    rng = np.random.default_rng(4)
    cfg = toy_config(n_labels=4)
    params = m.init_params(cfg, seed=5)
    h = DiffArray(rng.normal(size=(5, cfg.d_model)))
    batched, _ = m.label_attend_all(h, params.label_q, params.label_attn)

    attn = params.label_attn
    qh = params.label_q.data @ attn.wq[0].data
    kh = h.data @ attn.wk[0].data
    vh = h.data @ attn.wv[0].data
    scores = qh @ kh.T / np.sqrt(cfg.d_model)
    w = np.exp(scores - scores.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    unmasked = (w @ vh) @ attn.wo.data
    np.testing.assert_allclose(batched.data[-1], unmasked, rtol=0, atol=1e-12)


def test_label_attend_all_n1_matches_single():
    cfg = toy_config()
    params = m.init_params(cfg, seed=6)
    h = DiffArray(np.random.default_rng(2).normal(size=(1, cfg.d_model)))
    batched, _ = m.label_attend_all(h, params.label_q, params.label_attn)
    single, _ = m.label_attend(h, params.label_q, 1, params.label_attn)
    np.testing.assert_array_equal(batched.data[0], single.data)


# ---------------------------------------------------------------------------
# output layer
# ---------------------------------------------------------------------------


def test_predict_zero_weights_give_half():
    d = DiffArray(np.random.default_rng(0).normal(size=(4, 3, 8)))
    w = DiffArray(np.zeros((3, 8)))
    b = DiffArray(np.zeros(3))
    out = m.predict(d, w, b)
    assert np.all(out.data == 0.5)


def test_predict_analytic_three_quarters():
    rng = np.random.default_rng(1)
    w_row = rng.normal(size=8)
    w_row *= np.sqrt(np.log(3.0)) / np.linalg.norm(w_row)  # |w|^2 = ln 3
    d = DiffArray(np.tile(w_row, (2, 1, 1)))  # d[t, l] = w_l
    out = m.predict(d, DiffArray(w_row[None, :]), None)
    np.testing.assert_allclose(out.data, 0.75, rtol=0, atol=1e-12)


def test_predict_matches_scalar_loop():
    rng = np.random.default_rng(2)
    d = rng.normal(size=(5, 4, 8))
    w = rng.normal(size=(4, 8))
    b = rng.normal(size=4)
    out = m.predict(DiffArray(d), DiffArray(w), DiffArray(b)).data
    for t in range(5):
        for l in range(4):
            ref = 1.0 / (1.0 + np.exp(-(np.dot(w[l], d[t, l]) + b[l])))
            assert abs(out[t, l] - ref) < 1e-12


# ---------------------------------------------------------------------------
# causal attention
# ---------------------------------------------------------------------------


def test_causal_single_position_uses_only_itself():
    cfg = toy_config()
    params = m.init_params(cfg, seed=7)
    rng = np.random.default_rng(3)
    e1 = DiffArray(rng.normal(size=(1, cfg.d_model)))
    h1 = m.causal_attend(e1, params)
    assert h1.shape == (1, cfg.d_model)


def test_causal_prefix_recomputation_oracle():
    cfg = toy_config(n_layers=2, n_heads=2)
    params = m.init_params(cfg, seed=8)
    rng = np.random.default_rng(4)
    e = rng.normal(size=(6, cfg.d_model))
    full = m.causal_attend(DiffArray(e), params).data
    for i in range(1, 7):
        prefix = m.causal_attend(DiffArray(e[:i]), params).data
        assert np.max(np.abs(full[:i] - prefix)) < 1e-10


def test_causal_insensitive_to_future_perturbation():
    cfg = toy_config()
    params = m.init_params(cfg, seed=9)
    rng = np.random.default_rng(5)
    e = rng.normal(size=(5, cfg.d_model))
    base = m.causal_attend(DiffArray(e), params).data
    e2 = e.copy()
    e2[3:] += rng.normal(size=(2, cfg.d_model))
    bumped = m.causal_attend(DiffArray(e2), params).data
    assert np.max(np.abs(base[:3] - bumped[:3])) < 1e-12


# ---------------------------------------------------------------------------
# composed forward
# ---------------------------------------------------------------------------


def test_forward_shapes():
    cfg = toy_config(d_model=8, n_labels=3)
    params = m.init_params(cfg, seed=10)
    seq = random_seq(np.random.default_rng(6), 5)
    preds, h, _ = m.forward(seq, params)
    assert preds.p.shape == (5, 3)
    assert h.shape == (5, 8)
    assert np.all((preds.p > 0) & (preds.p < 1))


def test_forward_empty_sequence_marker():
    cfg = toy_config()
    params = m.init_params(cfg, seed=11)
    preds, h, _ = m.forward(ChunkSequence("s", TS, []), params)
    assert preds.is_empty
    assert h.shape == (0, cfg.d_model)


def test_forward_causality_end_to_end():
    cfg = toy_config()
    params = m.init_params(cfg, seed=12)
    rng = np.random.default_rng(7)
    seq = random_seq(rng, 5)
    base, _, _ = m.forward(seq, params)

    perturbed = ChunkSequence(seq.stay_id, seq.admission_time, list(seq.chunks))
    old = perturbed.chunks[3]
    perturbed.chunks[3] = Chunk(
        tokens=rng.integers(0, 30, size=6).astype(np.int64),
        note_id=old.note_id,
        category=old.category,
        timestamp=old.timestamp,
    )
    bumped, _, _ = m.forward(perturbed, params)
    assert np.max(np.abs(base.p[:3] - bumped.p[:3])) < 1e-12
    assert np.max(np.abs(base.p[3:] - bumped.p[3:])) > 0


def test_trace_weights_masked_and_normalized():
    cfg = toy_config(n_label_heads=2, n_labels=4)
    params = m.init_params(cfg, seed=13)
    seq = random_seq(np.random.default_rng(8), 6)
    _, _, trace = m.forward(seq, params, record_trace=True)
    w = trace.weights  # (H, N, L, N)
    assert w.shape == (2, 6, 4, 6)
    for t in range(1, 7):
        assert np.all(w[:, t - 1, :, t:] == 0.0)
        np.testing.assert_allclose(w[:, t - 1, :, :t].sum(axis=-1), 1.0, rtol=0, atol=1e-9)


def test_label_permutation_equivariance():
    cfg = toy_config(n_labels=5)
    params = m.init_params(cfg, seed=14)
    seq = random_seq(np.random.default_rng(9), 4)
    base, _, _ = m.forward(seq, params)

    perm = np.array([3, 0, 4, 1, 2])
    permuted = params.copy()
    permuted.label_q.data = params.label_q.data[perm]
    permuted.out_w.data = params.out_w.data[perm]
    permuted.out_b.data = params.out_b.data[perm]
    shuffled, _, _ = m.forward(seq, permuted)
    np.testing.assert_allclose(shuffled.p, base.p[:, perm], rtol=0, atol=1e-12)


def test_head_count_degeneracy_constructed_weights():
    """Two identical half-width heads reproduce a rank-matched single head."""
    rng = np.random.default_rng(15)
    d_model, half = 8, 4
    cfg2 = toy_config(d_model=d_model, n_labels=3, n_label_heads=2)
    p2 = m.init_params(cfg2, seed=16)
    wq = rng.normal(size=(d_model, half))
    wk = rng.normal(size=(d_model, half))
    wv = rng.normal(size=(d_model, half))
    wo = rng.normal(size=(d_model, d_model))
    for i in range(2):
        p2.label_attn.wq[i].data = wq.copy()
        p2.label_attn.wk[i].data = wk.copy()
        p2.label_attn.wv[i].data = wv.copy()
    p2.label_attn.wo.data = wo.copy()

    cfg1 = toy_config(d_model=d_model, n_labels=3, n_label_heads=1)
    p1 = m.init_params(cfg1, seed=16)
    pad = np.zeros((d_model, half))
    p1.label_attn.wq[0].data = np.concatenate([wq, pad], axis=1)
    # score scale is 1/sqrt(D/H): compensate sqrt(D)/sqrt(D/2) = sqrt(2)
    p1.label_attn.wk[0].data = np.concatenate([wk * np.sqrt(2.0), pad], axis=1)
    p1.label_attn.wv[0].data = np.concatenate([wv, wv], axis=1)
    p1.label_attn.wo.data = wo.copy()

    h = DiffArray(rng.normal(size=(5, d_model)))
    q = DiffArray(rng.normal(size=(3, d_model)))
    two, _ = m.label_attend_all(h, q, p2.label_attn)
    one, _ = m.label_attend_all(h, q, p1.label_attn)
    np.testing.assert_allclose(two.data, one.data, rtol=0, atol=1e-12)


@pytest.mark.parametrize("n_label_heads", [1, 2])
def test_full_model_gradients(n_label_heads):
    cfg = toy_config(d_model=8, n_labels=3, n_label_heads=n_label_heads, vocab_size=20)
    params = m.init_params(cfg, seed=17)
    rng = np.random.default_rng(17)
    seq = random_seq(rng, 4, vocab=20)
    y = (rng.uniform(size=(4, 3)) < 0.4).astype(float)

    def loss():
        preds, _, _ = m.forward(seq, params)
        return ad.bce_loss(preds.diff, y)

    with Tape() as tape:
        tape.backward(loss())
    check_grads(lambda: loss().item(), params.named_parameters(), tol=1e-3)


# ---------------------------------------------------------------------------
# checkpoint round trip
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = toy_config(n_layers=2, n_heads=2, n_label_heads=2)
    params = m.init_params(cfg, seed=18)
    params.label_prior = np.random.default_rng(0).uniform(size=cfg.n_labels)
    # denormals and negative zero must survive
    params.out_w.data[0, 0] = 5e-324
    params.out_w.data[0, 1] = -0.0
    path = tmp_path / "model.ckpt"
    save_params(path, params)
    loaded, meta = load_params(path)
    assert meta["model"] == cfg.to_dict()
    for name, arr in params.named_parameters().items():
        other = loaded.named_parameters()[name]
        assert arr.data.tobytes() == other.data.tobytes(), name
    assert loaded.label_prior.tobytes() == params.label_prior.tobytes()

    save_params(tmp_path / "again.ckpt", loaded)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_dim_mismatch_detected(tmp_path):
    cfg = toy_config()
    params = m.init_params(cfg, seed=19)
    path = tmp_path / "model.ckpt"
    save_params(path, params)
    from lahst.checkpoint import CheckpointError, load_tensors, save_tensors

    tensors, meta = load_tensors(path)
    tensors["out_w"] = np.zeros((7, 7))
    save_tensors(path, tensors, meta)
    with pytest.raises(CheckpointError, match="shape"):
        load_params(path)
