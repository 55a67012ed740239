"""CTC forward algorithm against a brute-force path sum, decoding, PER."""

import math

import numpy as np
import pytest

from sparsespeech import autodiff as ad
from sparsespeech import ctc
from sparsespeech.errors import ContractError


def random_log_probs(rng, m, n_symbols):
    logits = rng.normal(size=(m, n_symbols)) * 2.0
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return np.log(e / e.sum(axis=1, keepdims=True))


def collapse(path):
    out = []
    prev = -1
    for x in path:
        if x != prev and x != ctc.BLANK:
            out.append(int(x))
        prev = x
    return out


def brute_force_ctc(log_probs, labels):
    """-log sum over all frame paths whose collapse equals labels."""
    m, n_symbols = log_probs.shape
    paths = np.indices((n_symbols,) * m).reshape(m, -1).T
    path_lp = log_probs[np.arange(m)[None, :], paths].sum(axis=1)
    base = n_symbols + 1
    h = np.zeros(paths.shape[0], dtype=np.int64)
    prev = np.full(paths.shape[0], -1, dtype=np.int64)
    for t in range(m):
        x = paths[:, t]
        emit = (x != prev) & (x != ctc.BLANK)
        h = np.where(emit, h * base + x, h)
        prev = x
    target = 0
    for l in labels:
        target = target * base + l
    mask = h == target
    if not mask.any():
        return float("inf")
    mx = path_lp[mask].max()
    return float(-(mx + np.log(np.exp(path_lp[mask] - mx).sum())))


def brute_force_map(log_probs):
    """Most probable collapsed labeling by exhaustive path marginalization."""
    m, n_symbols = log_probs.shape
    paths = np.indices((n_symbols,) * m).reshape(m, -1).T
    path_lp = log_probs[np.arange(m)[None, :], paths].sum(axis=1)
    mass = {}
    for row, lp in zip(paths, path_lp):
        key = tuple(collapse(row))
        mass[key] = np.logaddexp(mass[key], lp) if key in mass else lp
    return list(min(mass.items(), key=lambda kv: (-kv[1], kv[0]))[0])


def test_ctc_loss_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(120):
        m = int(rng.integers(1, 7))
        n_symbols = int(rng.integers(2, 5))
        lp = random_log_probs(rng, m, n_symbols)
        length = int(rng.integers(1, 4))
        labels = [int(rng.integers(1, n_symbols)) for _ in range(length)]
        want = brute_force_ctc(lp, labels)
        got = ctc.ctc_loss(lp, labels)
        if math.isinf(want):
            assert math.isinf(got)
        else:
            assert got == pytest.approx(want, abs=1e-10)


def test_ctc_loss_hand_computed():
    # uniform rows over {blank, 1}, two frames, labels [1]:
    # alignments (1,1), (B,1), (1,B) -> probability 3/4.
    lp = np.log(np.full((2, 2), 0.5))
    assert ctc.ctc_loss(lp, [1]) == pytest.approx(-math.log(0.75), abs=1e-12)
    # single frame forces the single-symbol path
    lp1 = np.log(np.array([[0.3, 0.7]]))
    assert ctc.ctc_loss(lp1, [1]) == pytest.approx(-math.log(0.7), abs=1e-12)


def test_infeasible_labelings():
    lp = random_log_probs(np.random.default_rng(1), 2, 3)
    assert math.isinf(ctc.ctc_loss(lp, [1, 1]))  # repeat needs a blank between
    assert math.isinf(ctc.ctc_loss(lp, [1, 2, 1]))
    assert np.isfinite(ctc.ctc_loss(lp, [1, 2]))
    assert ctc.min_frames_needed([1, 1, 2]) == 4
    assert ctc.min_frames_needed([1, 2]) == 2


def test_label_and_input_validation():
    lp = random_log_probs(np.random.default_rng(2), 3, 3)
    with pytest.raises(ContractError):
        ctc.ctc_loss(lp, [0])
    with pytest.raises(ContractError):
        ctc.ctc_loss(lp, [3])
    with pytest.raises(ContractError):
        ctc.ctc_loss(lp, [1.5])
    with pytest.raises(ContractError):
        ctc.ctc_loss(np.zeros((2, 1)), [1])
    with pytest.raises(ContractError):
        ctc.ctc_loss(np.full((2, 3), 0.1), [1])
    with pytest.raises(ContractError):
        ctc.ctc_loss(np.array([0.0, -1.0]), [1])


def test_occupancy_rows_sum_to_one():
    rng = np.random.default_rng(3)
    lp = random_log_probs(rng, 6, 4)
    gamma = ctc.ctc_occupancy(lp, [1, 3, 2])
    assert gamma.shape == lp.shape
    assert np.allclose(gamma.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(gamma >= -1e-12)
    with pytest.raises(ContractError):
        ctc.ctc_occupancy(random_log_probs(rng, 1, 3), [1, 2])


def test_ctc_graph_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    logits = ad.Tensor(rng.normal(size=(5, 3)), requires_grad=True)

    def f():
        return ad.mul(ctc.ctc_loss_graph(ad.log_softmax(logits), [1, 2, 1]), 0.2)

    report = ad.grad_check(f, {"logits": logits})
    assert report.passed, report.per_param


def test_ctc_graph_infeasible_returns_none():
    lp = ad.Tensor(np.log(np.full((2, 3), 1 / 3.0)))
    assert ctc.ctc_loss_graph(lp, [1, 1, 1]) is None
    with pytest.raises(ContractError):
        ctc.ctc_loss_graph(np.zeros((2, 3)), [1])


def test_beam_decode_matches_exhaustive_map():
    rng = np.random.default_rng(5)
    for _ in range(40):
        m = int(rng.integers(1, 6))
        n_symbols = int(rng.integers(2, 4))
        lp = random_log_probs(rng, m, n_symbols)
        assert ctc.beam_decode(lp, 10 ** 6) == brute_force_map(lp)


def test_beam_width_one_is_greedy():
    rng = np.random.default_rng(6)
    for _ in range(40):
        m = int(rng.integers(1, 8))
        lp = random_log_probs(rng, m, 4)
        assert ctc.beam_decode(lp, 1) == collapse(lp.argmax(axis=1))


def test_beam_decode_collapses_repeats_and_blanks():
    # argmax path B 1 1 B 2 2 -> [1, 2]
    rows = np.full((6, 3), -8.0)
    for t, sym in enumerate([0, 1, 1, 0, 2, 2]):
        rows[t, sym] = -0.01
    rows = np.log(np.exp(rows) / np.exp(rows).sum(axis=1, keepdims=True))
    assert ctc.beam_decode(rows, 5) == [1, 2]


def test_beam_decode_contracts():
    lp = random_log_probs(np.random.default_rng(7), 3, 3)
    with pytest.raises(ContractError):
        ctc.beam_decode(lp, 0)
    with pytest.raises(ContractError):
        ctc.beam_decode(np.ones((2, 3)), 5)


def edit_oracle(a, b):
    full = np.zeros((len(a) + 1, len(b) + 1), dtype=int)
    full[:, 0] = np.arange(len(a) + 1)
    full[0, :] = np.arange(len(b) + 1)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            full[i, j] = min(full[i - 1, j] + 1, full[i, j - 1] + 1,
                             full[i - 1, j - 1] + (a[i - 1] != b[j - 1]))
    return int(full[len(a), len(b)])


def test_edit_distance_pinned_and_random():
    assert ctc.edit_distance("kitten", "sitting") == 3
    assert ctc.edit_distance([], [1, 2, 3]) == 3
    assert ctc.edit_distance([1, 2], [1, 2]) == 0
    rng = np.random.default_rng(8)
    for _ in range(200):
        a = list(rng.integers(0, 4, size=rng.integers(0, 9)))
        b = list(rng.integers(0, 4, size=rng.integers(0, 9)))
        d = ctc.edit_distance(a, b)
        assert d == edit_oracle(a, b)
        assert d == ctc.edit_distance(b, a)
        assert abs(len(a) - len(b)) <= d <= max(len(a), len(b))


def test_per_accounting():
    refs = {"u1": [1, 2, 3], "u2": [2, 2]}
    hyps = {"u1": [1, 2, 3], "u2": [2, 1]}
    pct, edits, ref_len = ctc.per(hyps, refs)
    assert (pct, edits, ref_len) == (pytest.approx(20.0), 1, 5)
    with pytest.warns(UserWarning):
        pct, edits, _ = ctc.per({"u1": [1, 2, 3]}, refs)
    assert edits == 2
    with pytest.raises(ContractError):
        ctc.per({}, {})
    with pytest.raises(ContractError):
        ctc.per({}, {"u": []})


def test_probe_config_validation():
    with pytest.raises(ContractError):
        ctc.ProbeConfig(inventory_size=0)
    with pytest.raises(ContractError):
        ctc.ProbeConfig(inventory_size=4, labeled_fraction=0.0)
    with pytest.raises(ContractError):
        ctc.ProbeConfig(inventory_size=4, beam_width=0)
    cfg = ctc.ProbeConfig(inventory_size=8)
    assert cfg.output_symbols == 9
    assert ctc.ProbeConfig(inventory_size=4, epochs=0).epochs == 0


def test_conv_windows_against_na_loop():
    rng = np.random.default_rng(9)
    rep = rng.normal(size=(6, 3))
    k = 4
    got = ctc._conv_windows(rep, k)
    left = (k - 1) // 2
    padded = np.zeros((6 + k - 1, 3))
    padded[left:left + 6] = rep
    for t in range(6):
        want = padded[t:t + k].reshape(-1)
        assert np.array_equal(got[t], want)


def test_probe_forward_shapes_and_normalization():
    cfg = ctc.ProbeConfig(inventory_size=3, recurrent_hidden=12)
    rng = np.random.default_rng(10)
    params = ctc.probe_init(cfg, 5, rng)
    rep = rng.normal(size=(7, 5))
    with ad.no_grad():
        lp = ctc.probe_forward(rep, params, cfg)
    assert lp.data.shape == (7, 4)
    assert np.allclose(np.exp(lp.data).sum(axis=1), 1.0, atol=1e-9)
    with pytest.raises(ContractError):
        ctc.probe_forward(np.zeros((0, 5)), params, cfg)


def tiny_probe_data(rng, n_utts=6, frames=10, dim=4):
    reps = {}
    labels = {}
    protos = rng.normal(size=(3, dim)) * 3.0
    for i in range(n_utts):
        seq = [int(rng.integers(1, 4)) for _ in range(2)]
        rows = []
        for s in seq:
            rows.append(np.tile(protos[s - 1], (frames // 2, 1)))
        reps["u%d" % i] = np.concatenate(rows) + rng.normal(size=(frames, dim)) * 0.1
        labels["u%d" % i] = seq
    return reps, labels


def test_train_probe_descends_and_decodes():
    rng = np.random.default_rng(11)
    reps, labels = tiny_probe_data(rng)
    cfg = ctc.ProbeConfig(inventory_size=3, recurrent_hidden=10, epochs=8,
                          batch_size=3, seed=0)
    params, history, skipped = ctc.train_probe(reps, labels, cfg)
    assert skipped == 0
    assert len(history) == 8 * 2
    assert history[-1][1] < history[0][1]
    hyps = ctc.decode_corpus(reps, params, cfg, sorted(reps))
    assert set(hyps) == set(reps)
    threaded = ctc.decode_corpus(reps, params, cfg, sorted(reps), threads=3)
    assert hyps == threaded


def test_train_probe_zero_epochs():
    rng = np.random.default_rng(12)
    reps, labels = tiny_probe_data(rng, n_utts=3)
    cfg = ctc.ProbeConfig(inventory_size=3, recurrent_hidden=8, epochs=0)
    params, history, skipped = ctc.train_probe(reps, labels, cfg)
    assert history == [] and skipped == 0
    assert "conv.W" in params


def test_train_probe_rejects_all_infeasible_batch():
    rng = np.random.default_rng(13)
    reps = {"u0": rng.normal(size=(2, 4))}
    labels = {"u0": [1, 1, 2]}  # needs 4 frames
    cfg = ctc.ProbeConfig(inventory_size=3, recurrent_hidden=8, epochs=1)
    with pytest.raises(ContractError):
        ctc.train_probe(reps, labels, cfg)
    with pytest.raises(ContractError):
        ctc.train_probe({}, {}, cfg)
    mixed = {"u0": rng.normal(size=(6, 4)), "u1": rng.normal(size=(6, 3))}
    with pytest.raises(ContractError):
        ctc.train_probe(mixed, {"u0": [1], "u1": [2]}, cfg)
