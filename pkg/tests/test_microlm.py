import math

import numpy as np
import pytest
from scipy import stats

from firelab.errors import DegenerateRow, InvalidInput, InvalidParameter, TrainingDiverged
from firelab.gradcheck import check_lm_grad
from firelab.kernels import BiasSpec
from firelab.microlm.checkpoint import (
    decode_tensors,
    encode_tensors,
    load_checkpoint,
    save_checkpoint,
)
from firelab.microlm.model import (
    ModelConfig,
    causal_attention,
    forward_lm,
    init_params,
    loss_and_grad,
    lm_loss,
    softmax_causal,
)
from firelab.microlm.positional import AdditivePEConfig, FirePEConfig, NoPEConfig, RopePEConfig
from firelab.microlm.tasks import (
    SEP,
    collate,
    generate_copy_task,
    sample_of_length,
    train_k_range,
)
from firelab.microlm.train import TrainConfig, eval_lengths, train


def tiny(pe, share=False, layers=2, d_model=8, heads=2, vocab=7, train_len=6):
    return ModelConfig(
        num_layers=layers,
        num_heads=heads,
        d_model=d_model,
        ffn_mult=2,
        vocab_size=vocab,
        train_len=train_len,
        pe=pe,
        share_pe_across_layers=share,
    )


PE_VARIANTS = {
    "nope": NoPEConfig(),
    "rope": RopePEConfig(),
    "rope_pi": RopePEConfig(pi_scale=0.5),
    "alibi": AdditivePEConfig([BiasSpec.alibi(0.5)]),
    "kerple_log": AdditivePEConfig([BiasSpec.kerple_log(1.0, 0.5)]),
    "kerple_power": AdditivePEConfig([BiasSpec.kerple_power(0.7, 1.3)]),
    "t5_logbin": AdditivePEConfig([BiasSpec.t5_logbin(8, 5, list(np.linspace(0, 1, 8)))]),
    "sandwich": AdditivePEConfig([BiasSpec.sandwich(1.0, 4)]),
    # thresholds are kept off integers so no query sits on the max() kink
    "fire_log": FirePEConfig(init_L=3.5, hidden=6),
    "fire_identity": FirePEConfig(init_L=2.5, hidden=6, psi="identity"),
    "fire_gelu_nothreshold": FirePEConfig(hidden=6, activation="gelu", use_threshold=False),
}


def batch(seed=1, n=6, vocab=7, B=2):
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, vocab, size=(B, n))
    mask = rng.random((B, n)) < 0.7
    mask[:, 1] = True
    return tokens, mask


# ---------------------------------------------------------------------------
# attention and softmax
# ---------------------------------------------------------------------------


def test_softmax_examples():
    np.testing.assert_allclose(softmax_causal([0.0, 0.0, 0.0], 2), [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(softmax_causal([math.log(2), 0.0], 1), [2 / 3, 1 / 3], atol=1e-15)
    np.testing.assert_array_equal(softmax_causal([5.0, 7.0, 9.0], 0), [1.0, 0.0, 0.0])


def test_softmax_stability_and_errors():
    p = softmax_causal([1000.0, 1001.0, -1e308], 2)
    assert np.isfinite(p).all() and abs(p.sum() - 1.0) <= 1e-12
    with pytest.raises(DegenerateRow):
        softmax_causal([1.0, 2.0], 1, mask=[False, False])
    with pytest.raises(InvalidParameter):
        softmax_causal([1.0], 2)


def test_attention_single_token_ignores_pe():
    rng = np.random.default_rng(0)
    D = 8
    x = rng.normal(size=(1, 1, D))
    w = [rng.normal(size=(D, D)) for _ in range(4)]
    expected = x[0, 0] @ w[2] @ w[3]
    bias = rng.normal(size=(2, 1, 1))
    for kw in ({}, {"bias": bias}):
        out = causal_attention(x, *w, num_heads=2, **kw)
        np.testing.assert_allclose(out[0, 0], expected, rtol=1e-13)


def test_attention_uniform_rows():
    D, n = 4, 5
    x = np.random.default_rng(1).normal(size=(1, n, D))
    zero = np.zeros((D, D))
    eye = np.eye(D)
    # zero queries give constant logits, so row i averages the first i+1 values
    out = causal_attention(x, zero, zero, eye, eye, num_heads=1)
    for i in range(n):
        np.testing.assert_allclose(out[0, i], x[0, : i + 1].mean(axis=0), rtol=1e-13)


def test_attention_probabilities_respect_mask():
    rng = np.random.default_rng(2)
    D, n = 4, 6
    x = rng.normal(size=(2, n, D))
    w = [rng.normal(size=(D, D)) for _ in range(4)]
    bias = rng.normal(size=(2, n, n)) * 10
    _, cache = causal_attention(x, *w, num_heads=2, bias=bias, keep=True)
    P = cache[4]
    assert np.all(P[..., np.triu_indices(n, 1)[0], np.triu_indices(n, 1)[1]] == 0.0)
    np.testing.assert_allclose(P.sum(axis=-1), 1.0, atol=1e-12)
    with pytest.raises(InvalidParameter):
        causal_attention(x, *w, num_heads=2, bias=bias[:, :3, :3])


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def test_zero_unembed_gives_uniform_loss():
    p = init_params(tiny(NoPEConfig(), vocab=11), dtype=np.float64)
    p.tensors["unembed"][:] = 0.0
    tokens, mask = batch(vocab=11)
    assert lm_loss(p, tokens, mask) == pytest.approx(math.log(11), abs=1e-12)


@pytest.mark.parametrize("name", ["nope", "rope", "alibi", "fire_log"])
def test_init_loss_near_uniform(name):
    cfg = ModelConfig(vocab_size=16, pe=PE_VARIANTS[name])
    p = init_params(cfg, seed=3)
    stream = generate_copy_task(1, 15, 16, 0)
    tokens, mask = collate([next(stream) for _ in range(32)])
    assert abs(lm_loss(p, tokens, mask) - math.log(16)) <= 0.5


def test_forward_is_deterministic():
    cfg = tiny(PE_VARIANTS["fire_log"])
    tokens, _ = batch()
    a = forward_lm(tokens, init_params(cfg, seed=5, dtype=np.float64))
    b = forward_lm(tokens, init_params(cfg, seed=5, dtype=np.float64))
    assert a.tobytes() == b.tobytes()


def test_out_of_range_tokens():
    p = init_params(tiny(NoPEConfig()))
    with pytest.raises(InvalidInput):
        forward_lm([0, 7], p)
    with pytest.raises(InvalidInput):
        forward_lm([-1, 2], p)


def test_pe_swap_isolation():
    zero_t5 = AdditivePEConfig([BiasSpec.t5_bucketed([0, 2], [0.0, 0.0])])
    tokens, _ = batch(n=9)
    a = init_params(tiny(NoPEConfig()), seed=4, dtype=np.float64)
    b = init_params(tiny(zero_t5), seed=4, dtype=np.float64)
    for k, v in a.tensors.items():
        b.tensors[k] = v.copy()
    assert forward_lm(tokens, a).tobytes() == forward_lm(tokens, b).tobytes()


def _tied(cfg_shared, cfg_unshared, seed=0):
    """Unshared params whose every PE slot copies the single shared slot."""
    shared = init_params(cfg_shared, seed=seed, dtype=np.float64)
    unshared = init_params(cfg_unshared, seed=seed, dtype=np.float64)
    for k, v in shared.tensors.items():
        if k.startswith("pe0."):
            for slot in range(cfg_unshared.num_layers):
                unshared.tensors[f"pe{slot}." + k[4:]] = v.copy()
        else:
            unshared.tensors[k] = v.copy()
    return shared, unshared


def test_fire_shared_matches_tied_unshared_logits():
    pe = FirePEConfig(init_L=64.0)
    s_cfg = tiny(pe, share=True, layers=4, d_model=16, heads=4, vocab=13, train_len=32)
    u_cfg = tiny(pe, share=False, layers=4, d_model=16, heads=4, vocab=13, train_len=32)
    shared, unshared = _tied(s_cfg, u_cfg)
    tokens, _ = batch(n=32, vocab=13)
    assert forward_lm(tokens, shared).tobytes() == forward_lm(tokens, unshared).tobytes()


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("share", [False, True])
@pytest.mark.parametrize("name", sorted(PE_VARIANTS))
def test_lm_gradcheck(name, share):
    p = init_params(tiny(PE_VARIANTS[name], share=share), seed=0, dtype=np.float64)
    tokens, mask = batch()
    report = check_lm_grad(p, tokens, mask, per_tensor=10)
    worst = max(report.values())
    assert worst < 1e-4, {k: v for k, v in report.items() if v >= 1e-4}
    assert any(k.startswith("pe") for k in report) == (name not in ("nope", "rope", "rope_pi", "alibi", "sandwich"))


def test_lm_gradcheck_single_precision_within_looser_tolerance():
    p = init_params(tiny(PE_VARIANTS["fire_log"]), seed=0, dtype=np.float64)
    tokens, mask = batch()
    _, g64, _ = loss_and_grad(p, tokens, mask)
    _, g32, _ = loss_and_grad(p.astype(np.float32), tokens, mask)
    for k in g64:
        # the final FIRE bias only shifts whole softmax rows: its true gradient is 0
        scale = max(np.abs(g64[k]).max(), 1e-5)
        assert np.abs(g32[k] - g64[k]).max() / scale < 1e-3, k


def test_zero_mask_gives_zero_gradients():
    p = init_params(tiny(PE_VARIANTS["fire_log"]), dtype=np.float64)
    tokens, mask = batch()
    _, grads, _ = loss_and_grad(p, tokens, np.zeros_like(mask))
    assert all(not np.any(g) for g in grads.values())


def test_fire_shared_gradient_is_sum_of_tied_layers():
    pe = FirePEConfig(init_L=3.5, hidden=6)
    shared, unshared = _tied(tiny(pe, share=True, layers=3), tiny(pe, share=False, layers=3))
    tokens, mask = batch()
    _, gs, _ = loss_and_grad(shared, tokens, mask)
    _, gu, _ = loss_and_grad(unshared, tokens, mask)
    for k in shared.tensors:
        if k.startswith("pe0."):
            total = sum(gu[f"pe{s}." + k[4:]] for s in range(3))
            np.testing.assert_allclose(gs[k], total, rtol=1e-10, atol=1e-14)
        else:
            np.testing.assert_allclose(gs[k], gu[k], rtol=1e-12, atol=1e-15)


def test_shared_config_has_one_pe_state():
    p = init_params(tiny(PE_VARIANTS["fire_log"], share=True, layers=4))
    assert {k.split(".")[0] for k in p.tensors if k.startswith("pe")} == {"pe0"}


# ---------------------------------------------------------------------------
# tasks
# ---------------------------------------------------------------------------


def test_copy_sample_shape():
    s = next(generate_copy_task(1, 1, 5, seed=0))
    t = s.tokens
    assert t.shape == (3,) and t[1] == SEP and t[0] == t[2] and t[0] >= 2
    assert s.loss_mask.tolist() == [False, False, True]


def test_copy_stream_structure():
    stream = generate_copy_task(2, 9, 16, seed=11)
    for _ in range(50):
        s = next(stream)
        k = (s.tokens.shape[0] - 1) // 2
        assert 2 <= k <= 9
        assert s.tokens[k] == SEP
        np.testing.assert_array_equal(s.tokens[:k], s.tokens[k + 1 :])
        assert s.loss_mask.sum() == k and s.loss_mask[k + 1 :].all()


def test_shifted_recall_rotates_echo():
    s = next(generate_copy_task(4, 4, 16, seed=2, task="shifted_recall"))
    np.testing.assert_array_equal(s.tokens[5:], np.roll(s.tokens[:4], -1))


def test_stream_reproducible():
    a = generate_copy_task(1, 8, 10, seed=7)
    b = generate_copy_task(1, 8, 10, seed=7)
    for _ in range(5):
        x, y = next(a), next(b)
        assert x.tokens.tolist() == y.tokens.tolist()


def test_token_histogram_uniform():
    stream = generate_copy_task(1, 8, 10, seed=3)
    counts = np.zeros(10, dtype=np.int64)
    lens = np.zeros(9, dtype=np.int64)
    for _ in range(10_000):
        s = next(stream)
        k = (s.tokens.shape[0] - 1) // 2
        lens[k] += 1
        counts += np.bincount(s.tokens[:k], minlength=10)
    assert counts[:2].sum() == 0
    assert stats.chisquare(counts[2:]).pvalue > 0.001
    assert stats.chisquare(lens[1:]).pvalue > 0.001


def test_task_errors():
    with pytest.raises(InvalidParameter):
        next(generate_copy_task(1, 3, 2, seed=0))
    with pytest.raises(InvalidParameter):
        next(generate_copy_task(0, 3, 5, seed=0))
    with pytest.raises(InvalidParameter):
        next(generate_copy_task(4, 3, 5, seed=0))


@pytest.mark.parametrize("length", [3, 4, 31, 32, 64])
def test_sample_of_length(length):
    s = sample_of_length(length, 16, np.random.default_rng(0))
    k = length // 2
    assert s.tokens.shape == (length,) and s.tokens[k] == SEP
    echo = s.tokens[k + 1 :]
    np.testing.assert_array_equal(echo, s.tokens[: echo.shape[0]])
    assert s.loss_mask.sum() == length - k - 1


def test_train_k_range_fits_train_len():
    assert train_k_range(32) == (1, 15)
    assert 2 * train_k_range(32)[1] + 1 <= 32


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------


def small_lm(pe=None):
    return ModelConfig(num_layers=1, num_heads=2, d_model=16, vocab_size=8, train_len=12, pe=pe or NoPEConfig())


def test_zero_steps_leaves_params_unchanged():
    cfg = small_lm()
    p0 = init_params(cfg, seed=9)
    res = train(cfg, TrainConfig(steps=0), seed=9)
    assert res.losses == []
    for k, v in p0.tensors.items():
        assert res.params.tensors[k].tobytes() == v.tobytes()


def test_training_is_deterministic_and_learns():
    cfg = small_lm(FirePEConfig(init_L=3.0, hidden=8))
    tc = TrainConfig(steps=60, batch_size=16, lr=1e-2, warmup=5)
    a = train(cfg, tc, seed=1)
    b = train(cfg, tc, seed=1)
    assert a.losses == b.losses
    assert np.mean(a.losses[-10:]) < np.mean(a.losses[:5])
    assert a.loss_curve_csv() == b.loss_curve_csv()
    assert a.loss_curve_csv().splitlines()[0] == "step,loss,accuracy"


def test_divergence_reports_step():
    cfg = small_lm()
    p = init_params(cfg)
    p.tensors["unembed"][0, 0] = np.nan
    with pytest.raises(TrainingDiverged) as err:
        train(cfg, TrainConfig(steps=3), params=p)
    assert err.value.step == 0


def test_lr_schedule():
    tc = TrainConfig(steps=100, lr=1.0, warmup=10)
    assert tc.lr_at(0) == pytest.approx(0.1)
    assert tc.lr_at(10) == pytest.approx(1.0)
    assert tc.lr_at(99) < 0.01
    assert TrainConfig(steps=5, lr=0.5, warmup=0, schedule="constant").lr_at(4) == 0.5


def test_eval_report_contract():
    p = init_params(small_lm(RopePEConfig()), seed=0)
    rep = eval_lengths(p, [20, 5, 12], samples=4, seed=2, variant="rope")
    assert [r.length for r in rep.rows] == [5, 12, 20]
    assert all(0.0 <= r.accuracy <= 1.0 and r.loss > 0 and r.seed == 2 for r in rep.rows)
    csv_text = rep.to_csv()
    assert csv_text.splitlines()[0] == "variant,length,loss,accuracy,seed"
    assert len(csv_text.splitlines()) == 4
    assert csv_text == eval_lengths(p, [5, 12, 20], samples=4, seed=2, variant="rope").to_csv()
    with pytest.raises(InvalidParameter):
        eval_lengths(p, [2, 8])


def test_eval_sweep_one_report_per_variant():
    rows = []
    for name in ("nope", "rope", "fire_log"):
        p = init_params(small_lm(PE_VARIANTS[name]), seed=0)
        rows += eval_lengths(p, [8, 16], samples=2, seed=0, variant=name).rows
    assert [(r.variant, r.length) for r in rows] == [
        (v, L) for v in ("nope", "rope", "fire_log") for L in (8, 16)
    ]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("name", ["nope", "rope_pi", "kerple_log", "t5_logbin", "fire_log"])
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_checkpoint_round_trip(tmp_path, name, dtype):
    cfg = tiny(PE_VARIANTS[name], share=name == "fire_log")
    p = init_params(cfg, seed=2, dtype=dtype)
    save_checkpoint(p, tmp_path / "ck.json", step=17)
    q, header = load_checkpoint(tmp_path / "ck.json")
    assert header["step"] == 17 and q.config == cfg
    for k, v in p.tensors.items():
        assert q.tensors[k].dtype == v.dtype and q.tensors[k].tobytes() == v.tobytes()
    if name == "fire_log":
        assert len(header["fire_state"]) == 1
    save_checkpoint(q, tmp_path / "again.json", step=17)
    assert (tmp_path / "again.bin").read_bytes() == (tmp_path / "ck.bin").read_bytes()


def test_container_layout():
    blob = encode_tensors({"b": np.arange(3, dtype=np.float32), "a": np.zeros((2, 1))})
    assert blob[:4] == b"FLTC"
    assert int.from_bytes(blob[4:8], "little") == 1 and int.from_bytes(blob[8:12], "little") == 2
    assert blob[14:15] == b"a"  # names are stored sorted
    out = decode_tensors(blob)
    assert out["a"].shape == (2, 1) and out["b"].dtype == np.float32


def test_container_rejects_corruption():
    blob = encode_tensors({"w": np.ones((2, 2))})
    for bad in (b"XXXX" + blob[4:], blob[:-3], blob + b"\0", blob[:4] + (9).to_bytes(4, "little") + blob[8:]):
        with pytest.raises(InvalidInput):
            decode_tensors(bad)


def test_checkpoint_rejects_mismatched_tensors(tmp_path):
    p = init_params(tiny(NoPEConfig()), dtype=np.float64)
    save_checkpoint(p, tmp_path / "ck.json")
    tensors = dict(p.tensors)
    tensors["embed"] = tensors["embed"][:3]
    (tmp_path / "ck.bin").write_bytes(encode_tensors(tensors))
    with pytest.raises(InvalidInput):
        load_checkpoint(tmp_path / "ck.json")
    del tensors["embed"]
    (tmp_path / "ck.bin").write_bytes(encode_tensors(tensors))
    with pytest.raises(InvalidInput):
        load_checkpoint(tmp_path / "ck.json")
