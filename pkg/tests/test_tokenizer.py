import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nextscale import numerics as nx
from nextscale.numerics import RandomStream, Tensor
from nextscale.numerics.gradcheck import check_gradients, numerical_grad, relative_error
from nextscale.tokenizer import (
    MultiScaleTokens,
    MultiScaleVQ,
    Phi,
    ScheduleError,
    TokenizerConfig,
    codebook_health,
    multi_scale_decode,
    multi_scale_encode,
    quantize,
    residual_encode,
    scale_inputs,
    tokenizer_loss,
    validate_schedule,
)

SCHED3 = ((1, 1), (2, 2), (4, 4))


def _codebook(rng, v, c, pin=True):
    book = rng.normal(size=(v, c))
    if pin:
        book[0] = 0
    return book


# -- quantize ------------------------------------------------------------------

def test_quantize_nearest():
    book = np.array([[0.0, 0.0], [1.0, 1.0]])
    assert quantize(np.array([0.9, 0.9]), book)[0] == 1


def test_quantize_tie_goes_to_lowest_index():
    book = np.array([[0.0, 0.0], [1.0, 1.0]])
    idx, vec = quantize(np.array([0.5, 0.5]), book)
    assert idx == 0
    np.testing.assert_array_equal(vec, [0.0, 0.0])


def test_quantize_tie_with_duplicate_codes():
    book = np.array([[2.0, 0.0], [1.0, 1.0], [1.0, 1.0]])
    assert quantize(np.array([1.0, 1.0]), book)[0] == 1


def test_quantize_matches_exhaustive_scan():
    rng = np.random.default_rng(0)
    book = rng.normal(size=(32, 8))
    for x in rng.normal(size=(100, 8)):
        dists = [math.dist(x, v) for v in book]
        assert quantize(x, book)[0] == dists.index(min(dists))


def test_quantize_errors():
    with pytest.raises(ValueError):
        quantize(np.zeros(2), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        quantize(np.array([np.nan, 0.0]), np.zeros((2, 2)))


# -- schedule ------------------------------------------------------------------

@pytest.mark.parametrize("bad", [[], [(2, 2)], [(1, 1), (4, 4), (2, 2)]])
def test_bad_schedules(bad):
    with pytest.raises(ScheduleError):
        validate_schedule(bad)


def test_schedule_must_end_at_feature_size():
    with pytest.raises(ScheduleError):
        multi_scale_encode(np.zeros((4, 8, 8)), SCHED3, np.zeros((2, 4)), None)


def test_encoder_size_must_match_schedule():
    with pytest.raises(ScheduleError):
        TokenizerConfig(image_size=32, schedule=SCHED3)


# -- encode / decode -----------------------------------------------------------

def test_constant_feature_single_code():
    rng = np.random.default_rng(1)
    book = _codebook(rng, 8, 4)
    f = np.broadcast_to(book[5][:, None, None], (4, 1, 1)).copy()
    tokens = multi_scale_encode(f, [(1, 1)], book, None)
    assert tokens.maps[0].tolist() == [[5]]
    np.testing.assert_array_equal(multi_scale_decode(tokens, [(1, 1)], book, None).data, f)


def test_constant_feature_broadcast_lossless():
    rng = np.random.default_rng(2)
    book = _codebook(rng, 8, 4)
    f = np.broadcast_to(book[3][:, None, None], (4, 4, 4)).copy()
    tokens = multi_scale_encode(f, SCHED3, book, None)
    assert tokens.maps[0].tolist() == [[3]]
    assert all(np.all(m == 0) for m in tokens.maps[1:])
    np.testing.assert_array_equal(multi_scale_decode(tokens, SCHED3, book, None).data, f)


def test_zero_feature_maps_to_zero_code():
    book = _codebook(np.random.default_rng(3), 8, 4)
    f = Tensor(np.zeros((1, 4, 4, 4)))
    tokens, f_hat = residual_encode(f, SCHED3, Tensor(book), None)
    assert all(np.all(m == 0) for m in tokens.maps)
    assert np.all(f_hat.data == 0)


def test_decode_all_zero_tokens():
    book = _codebook(np.random.default_rng(4), 8, 4)
    tokens = MultiScaleTokens([np.zeros(hw, dtype=np.int64) for hw in SCHED3])
    assert np.all(multi_scale_decode(tokens, SCHED3, book, None).data == 0)


def test_decode_single_scale_broadcast():
    book = _codebook(np.random.default_rng(5), 8, 4)
    out = multi_scale_decode(MultiScaleTokens([np.array([[6]])]), [(1, 1)], book, None).data
    assert out.shape == (4, 1, 1)
    np.testing.assert_array_equal(out[:, 0, 0], book[6])


def test_decode_rejects_out_of_range_index():
    book = np.zeros((4, 2))
    tokens = MultiScaleTokens([np.array([[4]])])
    with pytest.raises(IndexError):
        multi_scale_decode(tokens, [(1, 1)], book, None)


def _bilinear_ref(n_in, n_out, i):
    # weights of each source pixel for output position i (half-pixel centres)
    src = min(max((i + 0.5) * n_in / n_out - 0.5, 0.0), n_in - 1)
    i0 = int(math.floor(src))
    i1 = min(i0 + 1, n_in - 1)
    t = src - i0
    w = [0.0] * n_in
    w[i0] += 1 - t
    w[i1] += t
    return w


def _straight_line_encode(f, schedule, book):
    c, H, W = f.shape
    residual = f.copy()
    maps = []
    for h, w in schedule:
        bh, bw = H // h, W // w
        idx = np.zeros((h, w), dtype=np.int64)
        for i in range(h):
            for j in range(w):
                d = residual[:, i * bh:(i + 1) * bh, j * bw:(j + 1) * bw].mean(axis=(1, 2))
                best, best_dist = 0, float("inf")
                for v in range(book.shape[0]):
                    dist = float(((book[v] - d) ** 2).sum())
                    if dist < best_dist:
                        best, best_dist = v, dist
                idx[i, j] = best
        maps.append(idx)
        up = np.zeros_like(f)
        for y in range(H):
            wy = _bilinear_ref(h, H, y)
            for x in range(W):
                wx = _bilinear_ref(w, W, x)
                for i in range(h):
                    for j in range(w):
                        up[:, y, x] += wy[i] * wx[j] * book[idx[i, j]]
        residual = residual - up
    return maps


def test_encode_matches_straight_line_reference():
    rng = np.random.default_rng(6)
    for _ in range(5):
        book = _codebook(rng, 16, 4)
        f = rng.normal(size=(4, 4, 4))
        got = multi_scale_encode(f, SCHED3, book, None)
        want = _straight_line_encode(f, SCHED3, book)
        for a, b in zip(got.maps, want):
            np.testing.assert_array_equal(a, b)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_decode_equals_running_approximation(seed, phi_conv):
    rng = np.random.default_rng(seed)
    book = _codebook(rng, 12, 3)
    phi = Phi(3, RandomStream(seed), conv=phi_conv, dtype=np.float64) if phi_conv else None
    f = Tensor(rng.normal(size=(2, 3, 4, 4)))
    tokens, f_hat = residual_encode(f, SCHED3, Tensor(book), phi)
    decoded = multi_scale_decode(tokens, SCHED3, book, phi).data
    np.testing.assert_array_equal(decoded, f_hat.data)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 5.0))
def test_final_step_never_increases_residual(seed, scale):
    rng = np.random.default_rng(seed)
    book = _codebook(rng, 10, 3) * scale
    f = rng.normal(size=(1, 3, 4, 4)) * scale
    coarse = SCHED3[:-1] + ((4, 4),)
    tokens, f_hat = residual_encode(Tensor(f), coarse, Tensor(book), None)
    before = f - multi_scale_decode(MultiScaleTokens(tokens.maps[:-1] + [np.zeros((1, 4, 4), int)]),
                                    coarse, book, None).data
    after = f - f_hat.data
    assert np.all(np.linalg.norm(after, axis=1) <= np.linalg.norm(before, axis=1) + 1e-12)


def test_prefix_stability():
    rng = np.random.default_rng(7)
    book = _codebook(rng, 16, 4)
    f = rng.normal(size=(4, 4, 4))
    base = multi_scale_encode(f, SCHED3, book, None)
    longer = multi_scale_encode(f, SCHED3 + ((4, 4),), book, None)
    inserted = multi_scale_encode(f, ((1, 1), (4, 4)), book, None)
    for a, b in zip(base.maps, longer.maps):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(base.maps[0], inserted.maps[0])


def test_scale_inputs_are_downsampled_prefix_sums():
    rng = np.random.default_rng(8)
    book = _codebook(rng, 8, 2)
    tokens = multi_scale_encode(rng.normal(size=(1, 2, 4, 4)), SCHED3, book, None)
    ins = scale_inputs(tokens, SCHED3, book, None)
    assert [x.shape[-2:] for x in ins] == [(1, 1), (2, 2), (4, 4)]
    assert np.all(ins[0] == 0)
    prefix = multi_scale_decode(MultiScaleTokens(tokens.maps[:2] + [np.zeros((1, 4, 4), int)]),
                                SCHED3, book, None).data
    np.testing.assert_allclose(ins[2], prefix, atol=1e-12)


# -- loss ------------------------------------------------------------------

def test_loss_zero_for_exact_reconstruction():
    img = Tensor(np.random.default_rng(0).random((1, 3, 8, 8)))
    z = Tensor(np.ones((1, 2, 2, 2)))
    assert tokenizer_loss(img, img, z, z).item() == 0.0


def test_loss_constant_offset():
    img = np.random.default_rng(0).random((1, 3, 8, 8))
    z = Tensor(np.ones((1, 2, 2, 2)))
    assert tokenizer_loss(Tensor(img), Tensor(img + 1.0), z, z).item() == pytest.approx(1.0)


def test_loss_terms_by_hand():
    rng = np.random.default_rng(1)
    img, rec = rng.random((1, 3, 4, 4)), rng.random((1, 3, 4, 4))
    ze, zq = rng.normal(size=(1, 2, 2, 2)), rng.normal(size=(1, 2, 2, 2))
    got = tokenizer_loss(Tensor(img), Tensor(rec), Tensor(ze), Tensor(zq), beta_commit=0.25).item()
    vq = ((ze - zq) ** 2).mean()
    assert got == pytest.approx(((img - rec) ** 2).mean() + vq + 0.25 * vq, rel=1e-12)


def test_loss_gradient_routing():
    rng = np.random.default_rng(2)
    img = Tensor(rng.random((1, 3, 4, 4)))
    rec = Tensor(rng.random((1, 3, 4, 4)), requires_grad=True)
    ze = Tensor(rng.normal(size=(1, 2, 2, 2)), requires_grad=True)
    zq = Tensor(rng.normal(size=(1, 2, 2, 2)), requires_grad=True)
    tokenizer_loss(img, rec, ze, zq, beta_commit=0.25).backward()
    n = ze.data.size
    # codebook term moves z_q only; commitment (x0.25) moves z_e only
    np.testing.assert_allclose(zq.grad, 2 * (zq.data - ze.data) / n)
    np.testing.assert_allclose(ze.grad, 0.25 * 2 * (ze.data - zq.data) / n)


def test_loss_with_edge_term_gradcheck():
    rng = np.random.default_rng(3)
    img = Tensor(rng.random((1, 3, 6, 6)))
    rec = Tensor(rng.random((1, 3, 6, 6)), requires_grad=True)
    ze, zq = Tensor(rng.normal(size=(1, 2, 2, 2))), Tensor(rng.normal(size=(1, 2, 2, 2)))
    err = check_gradients(lambda: tokenizer_loss(img, rec, ze, zq, lambda_p=0.5), [rec])
    assert err < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_loss_non_negative(seed):
    rng = np.random.default_rng(seed)
    args = [Tensor(rng.normal(size=s)) for s in [(1, 3, 4, 4)] * 2 + [(1, 2, 2, 2)] * 2]
    assert tokenizer_loss(*args, lambda_p=float(rng.random())).item() >= 0.0


def _tiny_model():
    cfg = TokenizerConfig(vocab_size=6, channels=3, hidden=4, image_size=8,
                          schedule=((1, 1), (2, 2)), init_seed=11)
    return MultiScaleVQ(cfg, dtype=np.float64)


def test_encoder_gradient_matches_finite_differences():
    # The straight-through estimator treats (f_hat - f) as a constant, so the
    # oracle differentiates the loss with that offset frozen at the base point.
    # The codebook term has no encoder gradient by construction; finite
    # differences cannot see stop-gradients, so it is left out of the oracle.
    model = _tiny_model()
    # a small codebook so quantization is non-trivial (all-zero f_hat would put
    # the decoder input, and every ReLU behind it, exactly on a kink)
    model.codebook.data *= 0.1
    x = Tensor(np.random.default_rng(4).random((2, 3, 8, 8)))
    with nx.no_grad():
        f0 = model.encoder(x).data
        f_hat0 = model.decode_features(model.encode(x.data)).data
    assert np.abs(f_hat0).max() > 0

    def surrogate():
        f = model.encoder(x)
        recon = model.decoder(f + Tensor(f_hat0 - f0))
        commit = ((f - Tensor(f_hat0)) ** 2).mean() * model.cfg.beta_commit
        return ((recon - x) ** 2).mean() + commit

    model.zero_grad()
    model.forward(x).loss.backward()
    for name, p in model.encoder.named_parameters():
        num = numerical_grad(surrogate, p, step=1e-5)
        assert relative_error(p.grad, num) < 1e-4, name


def test_codebook_gets_gradient_only_from_used_codes():
    model = _tiny_model()
    x = np.random.default_rng(5).random((2, 3, 8, 8))
    out = model.forward(x)
    model.zero_grad()
    out.loss.backward()
    used = np.unique(np.concatenate([m.ravel() for m in out.tokens.maps]))
    unused = np.setdiff1d(np.arange(6), used)
    assert np.all(model.codebook.grad[unused] == 0)


def test_after_step_keeps_zero_code_and_reseeds_idle_codes():
    model = _tiny_model()
    rng = RandomStream(0)
    targets = [np.full((1, 3), 9.0), np.full((4, 3), 9.0)]
    tokens = MultiScaleTokens([np.zeros((1, 1, 1), int), np.zeros((1, 2, 2), int)])
    model.codebook.data[0] = 1.0
    n = model.after_step(0, tokens, targets, rng)
    assert np.all(model.codebook.data[0] == 0)
    assert n == 5 and np.all(model.codebook.data[1:] == 9.0)
    assert model.after_step(1, tokens, targets, rng) == 0


# -- health ------------------------------------------------------------------

def test_health_single_code():
    assert codebook_health(np.full((4, 4), 3), 8).perplexity == pytest.approx(1.0)


def test_health_uniform():
    assert codebook_health(np.arange(16).reshape(4, 4), 16).perplexity == pytest.approx(16.0)


def test_health_counts_match_tally():
    rng = np.random.default_rng(9)
    maps = [rng.integers(0, 12, (3, h, h)) for h in (1, 2, 4)]
    counts = codebook_health(MultiScaleTokens(maps), 12).counts
    tally = [0] * 12
    for m in maps:
        for v in m.ravel():
            tally[v] += 1
    assert counts.tolist() == tally
