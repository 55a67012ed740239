"""Memory-augmented recurrent autoencoder with a relaxed discrete bottleneck.

The encoder is a stacked bidirectional LSTM feeding a linear head that emits
one logit row per frame over the memory addresses. Training runs in two
stages: stage 1 is a plain softmax over the head feeding a trainable
address-to-embedding projection and the decoder; stage 2 reuses those
weights as the memory bank, switches the bottleneck to Gumbel-Softmax
sampling under the annealing schedule, drops memory reads for randomly
masked frames, and adds the diversity objective. A per-utterance context
vector (time mean of the final encoder layer) is concatenated to every
decoder input frame so utterance-level information does not have to pass
through the bottleneck.

Batching pads utterances to the bucket maximum; padded frames are excluded
from every loss term and from the context mean, and LSTM states carry
through padding unchanged, so batched and lone forward passes agree.
"""

import dataclasses
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ContractError
from .gumbel import AnnealingSchedule, GumbelConfig, gumbel_softmax, sample_gumbel, tau_at
from .losses import LossWeights
from .optim import Adam, clip_grad_norm

_LOG_GUARD = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 13
    memory_size: int = 16
    embed_dim: int = 16
    encoder_layers: int = 1
    decoder_layers: int = 1
    hidden_width: int = 32
    mask_prob: float = 0.2
    schedule: AnnealingSchedule = field(default_factory=AnnealingSchedule)
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1:
            raise ContractError("ModelConfig: input_dim must be >= 1")
        if self.memory_size < 2:
            raise ContractError("ModelConfig: memory_size must be >= 2")
        if self.embed_dim < 1:
            raise ContractError("ModelConfig: embed_dim must be >= 1")
        if self.encoder_layers < 1 or self.decoder_layers < 1:
            raise ContractError("ModelConfig: layer counts must be >= 1")
        if self.hidden_width < 1:
            raise ContractError("ModelConfig: hidden_width must be >= 1")
        if not (0.0 <= self.mask_prob < 1.0):
            raise ContractError("ModelConfig: mask_prob must be in [0, 1)")

    def to_dict(self):
        return dataclasses.asdict(self)


def model_config_from_dict(d):
    d = dict(d)
    d["schedule"] = AnnealingSchedule(**d["schedule"])
    d["weights"] = LossWeights(**d["weights"])
    return ModelConfig(**d)


@dataclass(frozen=True)
class TrainerConfig:
    stage1_epochs: int = 5
    stage2_epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 1e-3
    clip_norm: float = 5.0
    variant: str = "gumbel"
    omega: float = 1.0
    max_steps: int = 0

    def __post_init__(self):
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ContractError("TrainerConfig: epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ContractError("TrainerConfig: batch_size must be >= 1")
        if self.learning_rate <= 0 or self.clip_norm <= 0:
            raise ContractError("TrainerConfig: learning_rate and clip_norm must be > 0")
        if self.variant not in ("gumbel", "sparsityloss"):
            raise ContractError("TrainerConfig: variant must be 'gumbel' or 'sparsityloss'")
        if self.omega not in (0.0, 1.0):
            raise ContractError("TrainerConfig: omega must be 0.0 or 1.0")
        if self.max_steps < 0:
            raise ContractError("TrainerConfig: max_steps must be >= 0")

    def to_dict(self):
        return dataclasses.asdict(self)


def init_params(cfg, rng):
    """Fresh parameter dict; names are stable and stored in checkpoints."""
    params = {}
    params.update(nn.bilstm_init(rng, cfg.input_dim, cfg.hidden_width,
                                 cfg.encoder_layers, "enc"))
    params.update(nn.linear_init(rng, 2 * cfg.hidden_width, cfg.memory_size, "head"))
    params["mem.M"] = ad.Tensor(
        nn.glorot(rng, cfg.memory_size, cfg.embed_dim, (cfg.memory_size, cfg.embed_dim)),
        requires_grad=True)
    params.update(nn.bilstm_init(rng, cfg.embed_dim + 2 * cfg.hidden_width,
                                 cfg.hidden_width, cfg.decoder_layers, "dec"))
    params.update(nn.linear_init(rng, 2 * cfg.hidden_width, cfg.input_dim, "out"))
    return params


def params_to_tensors(arrays, requires_grad=False):
    return {k: ad.Tensor(v, requires_grad=requires_grad) for k, v in arrays.items()}


def _batch_constants(feats, cfg):
    """Pad a list of (m_u, d) matrices into per-timestep constants."""
    batch = len(feats)
    lengths = [f.shape[0] for f in feats]
    tmax = max(lengths)
    d = cfg.input_dim
    x = np.zeros((tmax, batch, d))
    valid = np.zeros((tmax, batch, 1))
    for u, f in enumerate(feats):
        if f.ndim != 2 or f.shape[0] < 1:
            raise ContractError("forward: every utterance needs at least one frame")
        if f.shape[1] != d:
            raise ContractError("forward: utterance dim %d != model input_dim %d"
                                % (f.shape[1], d))
        x[:lengths[u], u, :] = f
        valid[:lengths[u], u, 0] = 1.0
    return x, valid, np.asarray(lengths), tmax


def forward_batch(params, cfg, feats, stage, variant="gumbel", tau=1.0, omega=1.0,
                  noise_rng=None, mask_rng=None, frozen_noise=None, frozen_mask=None):
    """Build the full training graph for one batch.

    Returns (total_loss Tensor, parts dict with float recon/sparsity/
    diversity). Stage 1 uses a plain softmax bottleneck and the
    reconstruction term only; stage 2 adds the diversity term (plus sparsity
    when its weight is nonzero) and, for the gumbel variant, noisy sampling
    at temperature tau with frame masking. frozen_noise (tmax, B, n) and
    frozen_mask (tmax, B) override the rng draws for gradient checking.
    """
    if stage not in (1, 2):
        raise ContractError("forward_batch: stage must be 1 or 2")
    x, valid, lengths, tmax = _batch_constants(feats, cfg)
    batch = len(feats)
    n = cfg.memory_size
    h2 = 2 * cfg.hidden_width

    xs = [ad.Tensor(x[t]) for t in range(tmax)]
    valid_list = [valid[t] for t in range(tmax)]
    enc = nn.bilstm_stack(xs, valid_list, params, "enc", cfg.hidden_width,
                          cfg.encoder_layers)
    logits = [nn.linear(h, params, "head") for h in enc]

    inv_len = 1.0 / lengths.astype(np.float64)
    ctx = None
    for t in range(tmax):
        w = ad.Tensor(np.broadcast_to(valid[t] * inv_len[:, None], (batch, h2)).copy())
        term = ad.mul(enc[t], w)
        ctx = term if ctx is None else ad.add(ctx, term)

    use_gumbel = stage == 2 and variant == "gumbel"
    if use_gumbel:
        if not (tau > 0.0):
            raise ContractError("forward_batch: tau must be > 0")
        if frozen_noise is not None:
            noise = np.asarray(frozen_noise, dtype=np.float64)
        elif omega != 0.0:
            noise = sample_gumbel(n, noise_rng, draws=tmax * batch).reshape(tmax, batch, n)
        else:
            noise = np.zeros((tmax, batch, n))
        if noise.shape != (tmax, batch, n):
            raise ContractError("forward_batch: frozen_noise shape mismatch")

    sigmas = []
    for t in range(tmax):
        z = logits[t]
        if use_gumbel:
            if omega != 0.0:
                z = ad.add(z, ad.Tensor(omega * noise[t]))
            z = ad.mul(z, 1.0 / tau)
        sigmas.append(ad.softmax(z))

    if stage == 2 and cfg.mask_prob > 0.0:
        if frozen_mask is not None:
            masked = np.asarray(frozen_mask, dtype=bool)
            if masked.shape != (tmax, batch):
                raise ContractError("forward_batch: frozen_mask shape mismatch")
        else:
            masked = mask_rng.random((tmax, batch)) < cfg.mask_prob
    else:
        masked = np.zeros((tmax, batch), dtype=bool)

    reads = []
    for t in range(tmax):
        r = ad.matmul(sigmas[t], params["mem.M"])
        if masked[t].any():
            keep = np.broadcast_to((~masked[t]).astype(np.float64)[:, None],
                                   (batch, cfg.embed_dim)).copy()
            r = ad.mul(r, ad.Tensor(keep))
        reads.append(r)

    dec_in = [ad.concat([reads[t], ctx], axis=1) for t in range(tmax)]
    dec = nn.bilstm_stack(dec_in, valid_list, params, "dec", cfg.hidden_width,
                          cfg.decoder_layers)
    preds = [nn.linear(h, params, "out") for h in dec]

    frame_w = valid[:, :, 0] * inv_len[None, :] / batch
    d = cfg.input_dim
    recon = None
    for t in range(tmax):
        diff = ad.sub(preds[t], xs[t])
        w = ad.Tensor(np.broadcast_to((frame_w[t] / d)[:, None], (batch, d)).copy())
        term = ad.total(ad.mul(ad.mul(diff, diff), w))
        recon = term if recon is None else ad.add(recon, term)

    parts = {}
    weights = cfg.weights
    loss = ad.mul(recon, weights.reconstruction_weight)
    parts["recon"] = recon.item()
    parts["sparsity"] = 0.0
    parts["diversity"] = 0.0

    if stage == 2:
        div = None
        for t in range(tmax):
            w = ad.Tensor(np.broadcast_to(frame_w[t][:, None], (batch, n)).copy())
            plogp = ad.mul(sigmas[t], ad.log(ad.add(sigmas[t], _LOG_GUARD)))
            term = ad.total(ad.mul(plogp, w))
            div = term if div is None else ad.add(div, term)
        div = ad.add(div, float(np.log(n)))
        parts["diversity"] = div.item()
        loss = ad.add(loss, ad.mul(div, weights.diversity_weight))

        if weights.sparsity_weight > 0.0:
            sp = None
            for t in range(tmax):
                w = ad.Tensor(frame_w[t][:, None].copy())
                ones = ad.Tensor(np.ones((batch, 1)))
                term = ad.total(ad.mul(ad.sub(ones, ad.rowmax(sigmas[t])), w))
                sp = term if sp is None else ad.add(sp, term)
            parts["sparsity"] = sp.item()
            loss = ad.add(loss, ad.mul(sp, weights.sparsity_weight))

    parts["total"] = loss.item()
    return loss, parts


def encode(features, params, cfg):
    """Logits (m, n) and context vector (2H,) for one utterance, no grad."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ContractError("encode: features must be a nonempty (m, d) matrix")
    if features.shape[1] != cfg.input_dim:
        raise ContractError("encode: feature dim %d != input_dim %d"
                            % (features.shape[1], cfg.input_dim))
    m = features.shape[0]
    with ad.no_grad():
        xs = [ad.Tensor(features[t:t + 1]) for t in range(m)]
        valid = [np.ones((1, 1)) for _ in range(m)]
        enc = nn.bilstm_stack(xs, valid, params, "enc", cfg.hidden_width,
                              cfg.encoder_layers)
        logits = np.concatenate([nn.linear(h, params, "head").data for h in enc], axis=0)
        ctx = np.mean(np.concatenate([h.data for h in enc], axis=0), axis=0)
    return logits, ctx


def bottleneck(logits, mode, tau, omega, rng=None):
    """Per-frame posteriors from logits.

    mode "train" pairs with omega 1.0 (noisy sampling, rng required); mode
    "generate" pairs with omega 0.0 and is deterministic.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ContractError("bottleneck: logits must be (m, n)")
    if mode == "train":
        if omega != 1.0:
            raise ContractError("bottleneck: train mode requires omega 1.0")
        if rng is None:
            raise ContractError("bottleneck: train mode requires an rng")
    elif mode == "generate":
        if omega != 0.0:
            raise ContractError("bottleneck: generate mode requires omega 0.0")
    else:
        raise ContractError("bottleneck: mode must be 'train' or 'generate'")
    cfg = GumbelConfig(k=logits.shape[1], tau=tau, omega=omega)
    return gumbel_softmax(logits, cfg, rng)


def memory_read(posteriors, bank, mask=None):
    """Convex read rows posteriors @ bank; masked rows come back as zeros."""
    posteriors = np.asarray(posteriors, dtype=np.float64)
    bank = np.asarray(bank, dtype=np.float64)
    if posteriors.ndim != 2 or bank.ndim != 2 or posteriors.shape[1] != bank.shape[0]:
        raise ContractError("memory_read: shapes %s and %s incompatible"
                            % (posteriors.shape, bank.shape))
    out = posteriors @ bank
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (posteriors.shape[0],):
            raise ContractError("memory_read: mask length %s != frame count %d"
                                % (mask.shape, posteriors.shape[0]))
        out[mask] = 0.0
    return out


def decode(reads, ctx, params, cfg):
    """Reconstruction (m, d) from memory reads and a context vector, no grad."""
    reads = np.asarray(reads, dtype=np.float64)
    ctx = np.asarray(ctx, dtype=np.float64)
    if reads.ndim != 2 or ctx.shape != (2 * cfg.hidden_width,):
        raise ContractError("decode: bad read or context shape")
    m = reads.shape[0]
    with ad.no_grad():
        dec_in = [ad.Tensor(np.concatenate([reads[t], ctx])[None, :]) for t in range(m)]
        valid = [np.ones((1, 1)) for _ in range(m)]
        dec = nn.bilstm_stack(dec_in, valid, params, "dec", cfg.hidden_width,
                              cfg.decoder_layers)
        return np.concatenate([nn.linear(h, params, "out").data for h in dec], axis=0)


@dataclass
class TrainResult:
    stage1_path: str
    stage2_path: str
    history: list
    stage1_final_recon: float
    stage2_initial_recon: float


def _buckets(feats_by_utt, utt_ids, batch_size):
    order = sorted(utt_ids, key=lambda u: (feats_by_utt[u].shape[0], u))
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def train(representations, model_cfg, trainer_cfg, out_dir, progress=None):
    """Two-stage training over {utterance_id: (m, d) array}.

    Writes stage1.ckpt / stage2.ckpt (refreshed every epoch) and
    loss_curve.csv under out_dir; returns a TrainResult. The loss curve has
    the columns step,stage,tau,recon,diversity,total; stage-1 rows report
    tau 1.0 (plain softmax).
    """
    if not representations:
        raise ContractError("train: empty corpus")
    os.makedirs(out_dir, exist_ok=True)
    seeds = np.random.SeedSequence(model_cfg.seed).spawn(4)
    init_rng = np.random.default_rng(seeds[0])
    shuffle_rng = np.random.default_rng(seeds[1])
    noise_rng = np.random.default_rng(seeds[2])
    mask_rng = np.random.default_rng(seeds[3])

    params = init_params(model_cfg, init_rng)
    buckets = _buckets(representations, list(representations), trainer_cfg.batch_size)
    history = []
    step_global = 0
    stage1_final_recon = float("nan")
    stage2_initial_recon = float("nan")
    stage1_path = os.path.join(out_dir, "stage1.ckpt")
    stage2_path = os.path.join(out_dir, "stage2.ckpt")

    def echo(stage):
        return {"model": model_cfg.to_dict(), "trainer": trainer_cfg.to_dict(),
                "stage": stage}

    def save(stage, path):
        save_checkpoint(path, echo(stage), {k: v.data for k, v in params.items()})

    for stage, epochs in ((1, trainer_cfg.stage1_epochs), (2, trainer_cfg.stage2_epochs)):
        opt = Adam(params, lr=trainer_cfg.learning_rate)
        stage_step = 0
        done = False
        if stage == 2 and epochs > 0:
            probe_feats = [representations[u] for u in buckets[0]]
            with ad.no_grad():
                _, parts_s1 = forward_batch(params, model_cfg, probe_feats, stage=1)
                _, parts0 = forward_batch(
                    params, model_cfg, probe_feats,
                    stage=2, variant=trainer_cfg.variant,
                    tau=tau_at(model_cfg.schedule, 0), omega=trainer_cfg.omega,
                    noise_rng=np.random.default_rng(seeds[2]),
                    mask_rng=np.random.default_rng(seeds[3]))
            stage1_final_recon = parts_s1["recon"]
            stage2_initial_recon = parts0["recon"]
        for epoch in range(epochs):
            order = shuffle_rng.permutation(len(buckets))
            for bi in order:
                feats = [representations[u] for u in buckets[bi]]
                if stage == 2 and trainer_cfg.variant == "gumbel":
                    tau = tau_at(model_cfg.schedule, stage_step)
                else:
                    tau = 1.0
                loss, parts = forward_batch(
                    params, model_cfg, feats, stage=stage,
                    variant=trainer_cfg.variant, tau=tau, omega=trainer_cfg.omega,
                    noise_rng=noise_rng, mask_rng=mask_rng)
                leaf_grads = ad.backward(loss)
                grads = {name: leaf_grads[t] for name, t in params.items()
                         if t in leaf_grads}
                clip_grad_norm(grads, trainer_cfg.clip_norm)
                opt.step(grads)
                history.append((step_global, stage, tau, parts["recon"],
                                parts["diversity"], parts["total"]))
                if stage == 1:
                    stage1_final_recon = parts["recon"]
                stage_step += 1
                step_global += 1
                if trainer_cfg.max_steps and stage_step >= trainer_cfg.max_steps:
                    done = True
                    break
            save(stage, stage1_path if stage == 1 else stage2_path)
            if progress is not None:
                progress(stage, epoch, history[-1] if history else None)
            if done:
                break
        if epochs > 0:
            save(stage, stage1_path if stage == 1 else stage2_path)

    with open(os.path.join(out_dir, "loss_curve.csv"), "w", encoding="utf-8") as fh:
        fh.write("step,stage,tau,recon,diversity,total\n")
        for row in history:
            fh.write("%d,%d,%r,%r,%r,%r\n" % row)
    return TrainResult(stage1_path=stage1_path, stage2_path=stage2_path,
                       history=history, stage1_final_recon=stage1_final_recon,
                       stage2_initial_recon=stage2_initial_recon)


def generate_from_params(arrays, cfg, representations, tau, threads=None):
    """Posteriorgrams {utterance_id: (m, n)} at generation temperature tau."""
    if not (tau > 0.0):
        raise ContractError("generate: tau must be > 0")
    params = params_to_tensors(arrays)

    def one(item):
        utt, feats = item
        logits, _ = encode(feats, params, cfg)
        post = bottleneck(logits, "generate", tau, 0.0)
        sums = post.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            raise ContractError("generate: posteriorgram rows for %s do not sum to 1" % utt)
        return utt, post

    items = sorted(representations.items())
    if threads and threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return dict(pool.map(one, items))
    return dict(map(one, items))


def generate(checkpoint_path, representations, tau, threads=None):
    """Load a stage-2 checkpoint and produce posteriorgrams."""
    config, arrays = load_checkpoint(checkpoint_path)
    if config.get("stage") != 2:
        raise ContractError("generate: checkpoint %s is not a stage-2 model "
                            "(memory not trained)" % checkpoint_path)
    cfg = model_config_from_dict(config["model"])
    return generate_from_params(arrays, cfg, representations, tau, threads), cfg
