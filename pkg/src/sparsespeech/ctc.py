"""Semi-supervised phoneme probe: CTC loss, beam decoding, PER.

The probe reads frozen frame representations through a 1-D convolution
(kernel 8, same padding), a unidirectional LSTM (hidden 100), and a linear
layer with log-softmax outputs over the phone inventory plus blank (index
0). The CTC loss is the log-space forward algorithm; its gradient is the
exact forward-backward occupancy, installed as a single custom op on the
autodiff graph.

Decoding is a prefix beam search whose beam entries are (prefix, last
emission) states, the blank/non-blank split of the standard prefix
algorithm. Pruning on those states makes beam width 1 coincide with greedy
best-path collapse while unbounded width recovers the most probable
labeling.
"""

import dataclasses
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .errors import ContractError
from .optim import Adam, clip_grad_norm

BLANK = 0
_NEG_INF = -np.inf


@dataclass(frozen=True)
class ProbeConfig:
    inventory_size: int
    kernel_size: int = 8
    recurrent_hidden: int = 100
    beam_width: int = 10
    learning_rate: float = 1e-2
    epochs: int = 100
    batch_size: int = 8
    labeled_fraction: float = 0.1
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.inventory_size < 1:
            raise ContractError("ProbeConfig: inventory_size must be >= 1")
        if self.kernel_size < 1:
            raise ContractError("ProbeConfig: kernel_size must be >= 1")
        if self.recurrent_hidden < 1:
            raise ContractError("ProbeConfig: recurrent_hidden must be >= 1")
        if self.beam_width < 1:
            raise ContractError("ProbeConfig: beam_width must be >= 1")
        if not (0.0 < self.labeled_fraction <= 1.0):
            raise ContractError("ProbeConfig: labeled_fraction must be in (0, 1]")
        if self.learning_rate <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ContractError("ProbeConfig: bad training settings")

    @property
    def output_symbols(self):
        return self.inventory_size + 1

    def to_dict(self):
        return dataclasses.asdict(self)


def _validate_labels(labels, n_symbols):
    labels = list(labels)
    for l in labels:
        if not isinstance(l, (int, np.integer)) or not (1 <= l < n_symbols):
            raise ContractError("ctc: label %r outside [1, %d)" % (l, n_symbols))
    return labels


def min_frames_needed(labels):
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _extended(labels):
    ext = [BLANK]
    for l in labels:
        ext.append(l)
        ext.append(BLANK)
    return np.asarray(ext, dtype=np.int64)


def _ctc_alpha(log_probs, ext):
    m = log_probs.shape[0]
    k = ext.shape[0]
    alpha = np.full((m, k), _NEG_INF)
    alpha[0, 0] = log_probs[0, ext[0]]
    if k > 1:
        alpha[0, 1] = log_probs[0, ext[1]]
    skip = np.zeros(k, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    for t in range(1, m):
        prev = alpha[t - 1]
        stay = prev
        step = np.full(k, _NEG_INF)
        step[1:] = prev[:-1]
        jump = np.full(k, _NEG_INF)
        jump[2:] = np.where(skip[2:], prev[:-2], _NEG_INF)
        alpha[t] = log_probs[t, ext] + np.logaddexp(np.logaddexp(stay, step), jump)
    return alpha, skip


def _ctc_beta(log_probs, ext, skip):
    m = log_probs.shape[0]
    k = ext.shape[0]
    beta = np.full((m, k), _NEG_INF)
    beta[m - 1, k - 1] = log_probs[m - 1, ext[k - 1]]
    if k > 1:
        beta[m - 1, k - 2] = log_probs[m - 1, ext[k - 2]]
    for t in range(m - 2, -1, -1):
        nxt = beta[t + 1]
        stay = nxt
        step = np.full(k, _NEG_INF)
        step[:-1] = nxt[1:]
        jump = np.full(k, _NEG_INF)
        jump[:-2] = np.where(skip[2:], nxt[2:], _NEG_INF)
        beta[t] = log_probs[t, ext] + np.logaddexp(np.logaddexp(stay, step), jump)
    return beta


def _check_log_probs(log_probs):
    log_probs = np.asarray(log_probs, dtype=np.float64)
    if log_probs.ndim != 2 or log_probs.shape[0] < 1 or log_probs.shape[1] < 2:
        raise ContractError("ctc: log_probs must be (m, S) with S >= 2")
    if np.any(np.isnan(log_probs)) or np.any(log_probs > 1e-9):
        raise ContractError("ctc: log_probs must be log probabilities (<= 0)")
    return log_probs


def ctc_loss(log_probs, labels):
    """Negative log probability of the labeling under all CTC alignments.

    Returns +inf when the labeling cannot fit in the available frames.
    """
    log_probs = _check_log_probs(log_probs)
    labels = _validate_labels(labels, log_probs.shape[1])
    if min_frames_needed(labels) > log_probs.shape[0]:
        return float("inf")
    ext = _extended(labels)
    alpha, _ = _ctc_alpha(log_probs, ext)
    if ext.shape[0] > 1:
        ll = np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    else:
        ll = alpha[-1, -1]
    return float(-ll)


def ctc_occupancy(log_probs, labels):
    """State occupancy gamma (m, S): d(-log lik)/d log_probs = -gamma."""
    log_probs = _check_log_probs(log_probs)
    labels = _validate_labels(labels, log_probs.shape[1])
    if min_frames_needed(labels) > log_probs.shape[0]:
        raise ContractError("ctc_occupancy: infeasible labeling")
    ext = _extended(labels)
    alpha, skip = _ctc_alpha(log_probs, ext)
    beta = _ctc_beta(log_probs, ext, skip)
    if ext.shape[0] > 1:
        ll = np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    else:
        ll = alpha[-1, -1]
    # alpha and beta both include the emission at t; divide one copy out.
    post = alpha + beta - log_probs[np.arange(log_probs.shape[0])[:, None], ext] - ll
    gamma = np.zeros_like(log_probs)
    occ = np.exp(post)
    for s, sym in enumerate(ext):
        gamma[:, sym] += occ[:, s]
    return gamma


def ctc_loss_graph(log_probs, labels):
    """CTC loss as a scalar graph node over a (m, S) log-prob Tensor.

    Returns None for infeasible labelings (callers skip and report them).
    """
    if not isinstance(log_probs, ad.Tensor):
        raise ContractError("ctc_loss_graph: expected a Tensor")
    lp = log_probs.data
    labels = _validate_labels(labels, lp.shape[1])
    if min_frames_needed(labels) > lp.shape[0]:
        return None
    loss = ctc_loss(lp, labels)
    gamma = ctc_occupancy(lp, labels)

    def bwd(g):
        return (-float(np.asarray(g).reshape(())) * gamma,)

    return ad.custom("ctc_loss", np.asarray(loss), (log_probs,), bwd)


def beam_decode(log_probs, beam_width):
    """CTC beam decoding; returns the collapsed label sequence (ids).

    Beam entries are (prefix, last emission) states scored in log space;
    states merging to the same prefix are summed at the end and ties break
    toward the lexicographically smaller prefix.
    """
    log_probs = _check_log_probs(log_probs)
    if beam_width < 1:
        raise ContractError("beam_decode: beam_width must be >= 1")
    m, n_symbols = log_probs.shape
    beams = {((), -1): 0.0}
    for t in range(m):
        row = log_probs[t]
        new = {}
        for (prefix, last), lp0 in beams.items():
            for c in range(n_symbols):
                if c == BLANK:
                    key = (prefix, -1)
                elif c == last:
                    key = (prefix, c)
                else:
                    key = (prefix + (c,), c)
                val = lp0 + row[c]
                old = new.get(key)
                new[key] = val if old is None else np.logaddexp(old, val)
        if len(new) > beam_width:
            ranked = sorted(new.items(), key=lambda kv: (-kv[1], kv[0][0], kv[0][1]))
            new = dict(ranked[:beam_width])
        beams = new
    totals = {}
    for (prefix, _), lp0 in beams.items():
        old = totals.get(prefix)
        totals[prefix] = lp0 if old is None else np.logaddexp(old, lp0)
    best = min(totals.items(), key=lambda kv: (-kv[1], kv[0]))
    return list(best[0])


def edit_distance(a, b):
    """Levenshtein distance with unit costs."""
    a = list(a)
    b = list(b)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, cb in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb))
        prev = cur
    return prev[len(b)]


def per(hypotheses, references):
    """Corpus-level phone error rate: 100 * total edits / total ref length.

    Utterances missing from hypotheses count as full deletions (with a
    warning).
    """
    if not references:
        raise ContractError("per: empty reference set")
    edits = 0
    ref_len = 0
    for utt, ref in references.items():
        ref = list(ref)
        ref_len += len(ref)
        hyp = hypotheses.get(utt)
        if hyp is None:
            warnings.warn("per: no hypothesis for %s, counting deletions" % utt)
            edits += len(ref)
        else:
            edits += edit_distance(hyp, ref)
    if ref_len == 0:
        raise ContractError("per: references are all empty")
    return 100.0 * edits / ref_len, edits, ref_len


def probe_init(cfg, input_dim, rng):
    """Fresh probe parameters for representations of width input_dim."""
    n_out = cfg.output_symbols
    params = {}
    params.update(nn.linear_init(rng, cfg.kernel_size * input_dim, n_out, "conv"))
    params.update(nn.lstm_init(rng, n_out, cfg.recurrent_hidden, "rnn"))
    params.update(nn.linear_init(rng, cfg.recurrent_hidden, n_out, "out"))
    return params


def _conv_windows(rep, kernel_size):
    m, r = rep.shape
    left = (kernel_size - 1) // 2
    right = kernel_size // 2
    padded = np.zeros((m + left + right, r))
    padded[left:left + m] = rep
    return np.concatenate([padded[i:i + m] for i in range(kernel_size)], axis=1)


def probe_forward(rep, params, cfg):
    """Log-probability rows (m, S) for one representation matrix."""
    rep = np.asarray(rep, dtype=np.float64)
    if rep.ndim != 2 or rep.shape[0] < 1:
        raise ContractError("probe_forward: representation must be (m, r)")
    windows = ad.Tensor(_conv_windows(rep, cfg.kernel_size))
    conv = nn.linear(windows, params, "conv")
    m = rep.shape[0]
    xs = [conv[t:t + 1, :] for t in range(m)]
    valid = [np.ones((1, 1)) for _ in range(m)]
    hs = nn.lstm_run(xs, valid, params, "rnn", cfg.recurrent_hidden)
    h = ad.concat(hs, axis=0)
    return ad.log_softmax(nn.linear(h, params, "out"))


def train_probe(representations, label_ids, cfg, progress=None):
    """Train the probe on {utt: (m, r)} against {utt: [label ids]}.

    Returns (params, history, skipped) where history rows are (step, mean
    loss) and skipped counts infeasible utterances encountered.
    """
    if not label_ids:
        raise ContractError("train_probe: no labeled utterances")
    dims = {rep.shape[1] for rep in representations.values()}
    if len(dims) != 1:
        raise ContractError("train_probe: mixed representation widths %s" % dims)
    input_dim = dims.pop()
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    params = probe_init(cfg, input_dim, np.random.default_rng(seeds[0]))
    shuffle_rng = np.random.default_rng(seeds[1])
    opt = Adam(params, lr=cfg.learning_rate)
    utts = sorted(label_ids)
    history = []
    skipped = 0
    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(utts))
        for start in range(0, len(utts), cfg.batch_size):
            chunk = [utts[i] for i in order[start:start + cfg.batch_size]]
            losses = []
            for utt in chunk:
                lp = probe_forward(representations[utt], params, cfg)
                node = ctc_loss_graph(lp, label_ids[utt])
                if node is None:
                    skipped += 1
                    continue
                losses.append(ad.mul(node, 1.0 / len(lp.data)))
            if not losses:
                raise ContractError(
                    "train_probe: every labeling in batch %s is infeasible "
                    "(too few frames)" % (chunk,))
            total = losses[0]
            for extra in losses[1:]:
                total = ad.add(total, extra)
            total = ad.mul(total, 1.0 / len(losses))
            leaf_grads = ad.backward(total)
            grads = {name: leaf_grads[t] for name, t in params.items() if t in leaf_grads}
            clip_grad_norm(grads, cfg.clip_norm)
            opt.step(grads)
            history.append((step, total.item()))
            step += 1
        if progress is not None:
            progress(epoch, history[-1] if history else None)
    return params, history, skipped


def decode_corpus(representations, params, cfg, utt_ids, threads=None):
    """Beam-decode a set of utterances into label id sequences."""

    def one(utt):
        with ad.no_grad():
            lp = probe_forward(representations[utt], params, cfg)
        return utt, beam_decode(lp.data, cfg.beam_width)

    utts = sorted(utt_ids)
    if threads and threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return dict(pool.map(one, utts))
    return dict(map(one, utts))
