"""Autoencoder forward/backward correctness, training loop, generation."""

import os

import numpy as np
import pytest

from sparsespeech import autodiff as ad
from sparsespeech import model
from sparsespeech.checkpoint import load_checkpoint
from sparsespeech.corpus import SynthSpec, generate_synthetic, load_manifest, \
    load_representations
from sparsespeech.errors import ContractError
from sparsespeech.gumbel import AnnealingSchedule
from sparsespeech.losses import LossWeights

SMALL = model.ModelConfig(input_dim=3, memory_size=4, embed_dim=4,
                          hidden_width=4, seed=0)


def small_params(cfg=SMALL, seed=0):
    return model.init_params(cfg, np.random.default_rng(seed))


def random_feats(rng, lengths, d=3):
    return [rng.normal(size=(m, d)) for m in lengths]


def test_config_validation():
    with pytest.raises(ContractError):
        model.ModelConfig(memory_size=1)
    with pytest.raises(ContractError):
        model.ModelConfig(mask_prob=1.0)
    with pytest.raises(ContractError):
        model.ModelConfig(hidden_width=0)
    with pytest.raises(ContractError):
        model.TrainerConfig(variant="other")
    with pytest.raises(ContractError):
        model.TrainerConfig(omega=0.5)
    with pytest.raises(ContractError):
        model.TrainerConfig(batch_size=0)
    cfg = model.ModelConfig()
    assert model.model_config_from_dict(cfg.to_dict()) == cfg


def test_init_params_names_and_shapes():
    params = small_params()
    assert params["mem.M"].data.shape == (4, 4)
    assert params["head.W"].data.shape == (8, 4)
    assert params["out.W"].data.shape == (8, 3)
    assert all(t.requires_grad for t in params.values())


def test_batched_forward_equals_single_utterance_mean():
    # equal per-utterance weighting: the batch loss must be the mean of the
    # lone-utterance losses despite padding to the bucket maximum
    rng = np.random.default_rng(1)
    feats = random_feats(rng, [5, 2, 3])
    params = small_params()
    with ad.no_grad():
        batch_loss, parts = model.forward_batch(params, SMALL, feats, stage=1)
        singles = [model.forward_batch(params, SMALL, [f], stage=1)[0].item()
                   for f in feats]
    assert batch_loss.item() == pytest.approx(float(np.mean(singles)), abs=1e-12)
    assert parts["total"] == pytest.approx(parts["recon"], abs=1e-15)


def test_stage2_batched_equals_single_with_frozen_draws():
    rng = np.random.default_rng(2)
    feats = random_feats(rng, [4, 2])
    params = small_params()
    tmax = 4
    noise = rng.gumbel(size=(tmax, 2, 4))
    masked = rng.random((tmax, 2)) < 0.4
    with ad.no_grad():
        batch_loss, _ = model.forward_batch(
            params, SMALL, feats, stage=2, tau=1.5, frozen_noise=noise,
            frozen_mask=masked)
        singles = []
        for u, f in enumerate(feats):
            m = f.shape[0]
            loss_u, _ = model.forward_batch(
                params, SMALL, [f], stage=2, tau=1.5,
                frozen_noise=noise[:m, u:u + 1, :], frozen_mask=masked[:m, u:u + 1])
            singles.append(loss_u.item())
    assert batch_loss.item() == pytest.approx(float(np.mean(singles)), abs=1e-10)


def test_forward_contracts():
    params = small_params()
    with pytest.raises(ContractError):
        model.forward_batch(params, SMALL, [np.zeros((0, 3))], stage=1)
    with pytest.raises(ContractError):
        model.forward_batch(params, SMALL, [np.zeros((2, 5))], stage=1)
    with pytest.raises(ContractError):
        model.forward_batch(params, SMALL, [np.zeros((2, 3))], stage=3)
    with pytest.raises(ContractError):
        model.forward_batch(params, SMALL, [np.zeros((2, 3))], stage=2, tau=0.0)


def test_end_to_end_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    feats = random_feats(rng, [3, 2])
    params = small_params()
    tmax = 3
    noise = rng.gumbel(size=(tmax, 2, 4))
    masked = rng.random((tmax, 2)) < 0.3

    def f():
        loss, _ = model.forward_batch(
            params, SMALL, feats, stage=2, tau=2.0,
            frozen_noise=noise, frozen_mask=masked)
        return loss

    report = ad.grad_check(f, params, tolerance=1e-4)
    assert report.passed, "worst %.3g in %s" % (
        report.max_rel_error,
        max(report.per_param, key=report.per_param.get))


def test_sparsity_term_only_in_sparsityloss_weights():
    rng = np.random.default_rng(4)
    feats = random_feats(rng, [3])
    cfg = model.ModelConfig(input_dim=3, memory_size=4, embed_dim=4,
                            hidden_width=4,
                            weights=LossWeights(sparsity_weight=2.0))
    params = model.init_params(cfg, np.random.default_rng(0))
    with ad.no_grad():
        _, parts = model.forward_batch(params, cfg, feats, stage=2,
                                       variant="sparsityloss", omega=0.0,
                                       mask_rng=np.random.default_rng(1))
    assert parts["sparsity"] > 0.0
    assert parts["total"] == pytest.approx(
        parts["recon"] + 2.0 * parts["sparsity"] + 100.0 * parts["diversity"],
        rel=1e-12)


@pytest.fixture(scope="module")
def toy_training_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("train") / "corpus"
    entries = generate_synthetic(SynthSpec(utterances=16, seed=5), str(out))
    reps = load_representations(entries)
    return {e.utterance_id: reps[e.utterance_id] for e in entries}


def run_tiny_training(reps, out_dir, seed=0, variant="gumbel", **kw):
    mcfg = model.ModelConfig(input_dim=13, memory_size=4, embed_dim=4,
                             hidden_width=4, seed=seed)
    tcfg = model.TrainerConfig(stage1_epochs=1, stage2_epochs=1, batch_size=4,
                               variant=variant, **kw)
    return model.train(reps, mcfg, tcfg, out_dir), mcfg, tcfg


def test_training_writes_artifacts(toy_training_corpus, tmp_path):
    res, mcfg, _ = run_tiny_training(toy_training_corpus, str(tmp_path / "run"))
    assert os.path.isfile(res.stage1_path)
    assert os.path.isfile(res.stage2_path)
    curve = os.path.join(str(tmp_path / "run"), "loss_curve.csv")
    with open(curve) as fh:
        lines = fh.read().splitlines()
    assert lines[0] == "step,stage,tau,recon,diversity,total"
    assert len(lines) == 1 + len(res.history)
    stages = [int(line.split(",")[1]) for line in lines[1:]]
    assert stages == sorted(stages)
    assert set(stages) == {1, 2}
    config, arrays = load_checkpoint(res.stage2_path)
    assert config["stage"] == 2
    assert config["model"]["memory_size"] == 4
    assert "mem.M" in arrays
    assert np.isfinite(res.stage1_final_recon)
    assert np.isfinite(res.stage2_initial_recon)


def test_training_is_deterministic(toy_training_corpus, tmp_path):
    res1, _, _ = run_tiny_training(toy_training_corpus, str(tmp_path / "a"))
    res2, _, _ = run_tiny_training(toy_training_corpus, str(tmp_path / "b"))
    with open(res1.stage2_path, "rb") as f1, open(res2.stage2_path, "rb") as f2:
        assert f1.read() == f2.read()
    res3, _, _ = run_tiny_training(toy_training_corpus, str(tmp_path / "c"), seed=1)
    with open(res3.stage2_path, "rb") as f3, open(res1.stage2_path, "rb") as f1:
        assert f3.read() != f1.read()


def test_max_steps_cuts_training(toy_training_corpus, tmp_path):
    res, _, _ = run_tiny_training(toy_training_corpus, str(tmp_path / "run"),
                                  max_steps=2)
    by_stage = {}
    for row in res.history:
        by_stage.setdefault(row[1], []).append(row)
    assert len(by_stage[1]) == 2
    assert len(by_stage[2]) == 2


def test_tau_column_follows_schedule(toy_training_corpus, tmp_path):
    sched = AnnealingSchedule(tau_start=1.0, factor=0.5, cutoff=0.1, interval=1)
    mcfg = model.ModelConfig(input_dim=13, memory_size=4, embed_dim=4,
                             hidden_width=4, schedule=sched)
    tcfg = model.TrainerConfig(stage1_epochs=0, stage2_epochs=1, batch_size=8)
    res = model.train(toy_training_corpus, mcfg, tcfg, str(tmp_path / "run"))
    taus = [row[2] for row in res.history]
    assert taus == [1.0, 0.5]


def test_generate_and_temperature_behavior(toy_training_corpus, tmp_path):
    res, mcfg, _ = run_tiny_training(toy_training_corpus, str(tmp_path / "run"))
    posts_sharp, cfg = model.generate(res.stage2_path, toy_training_corpus, 0.5)
    posts_soft, _ = model.generate(res.stage2_path, toy_training_corpus, 3.0)
    assert cfg.memory_size == 4
    for utt, feats in toy_training_corpus.items():
        a = posts_sharp[utt]
        b = posts_soft[utt]
        assert a.shape == (feats.shape[0], 4)
        assert np.allclose(a.sum(axis=1), 1.0, atol=1e-9)
        assert np.array_equal(a.argmax(axis=1), b.argmax(axis=1))
    mean_sharp = np.mean([p.max(axis=1).mean() for p in posts_sharp.values()])
    mean_soft = np.mean([p.max(axis=1).mean() for p in posts_soft.values()])
    assert mean_sharp > mean_soft
    threaded = model.generate(res.stage2_path, toy_training_corpus, 0.5,
                              threads=3)[0]
    assert all(np.array_equal(threaded[u], posts_sharp[u]) for u in threaded)


def test_generate_rejects_stage1_checkpoint(toy_training_corpus, tmp_path):
    res, _, _ = run_tiny_training(toy_training_corpus, str(tmp_path / "run"))
    with pytest.raises(ContractError) as info:
        model.generate(res.stage1_path, toy_training_corpus, 1.0)
    assert "memory not trained" in str(info.value)
    with pytest.raises(ContractError):
        model.generate(res.stage2_path, toy_training_corpus, 0.0)


def test_train_rejects_empty_corpus(tmp_path):
    with pytest.raises(ContractError):
        model.train({}, model.ModelConfig(), model.TrainerConfig(),
                    str(tmp_path / "run"))


def test_encode_bottleneck_read_decode_units():
    params = small_params()
    rng = np.random.default_rng(6)
    feats = rng.normal(size=(5, 3))
    logits, ctx = model.encode(feats, params, SMALL)
    assert logits.shape == (5, 4)
    assert ctx.shape == (8,)
    post = model.bottleneck(logits, "generate", 1.0, 0.0)
    assert np.allclose(post.sum(axis=1), 1.0, atol=1e-12)
    noisy = model.bottleneck(logits, "train", 1.0, 1.0, np.random.default_rng(0))
    assert noisy.shape == post.shape
    with pytest.raises(ContractError):
        model.bottleneck(logits, "train", 1.0, 1.0)
    with pytest.raises(ContractError):
        model.bottleneck(logits, "generate", 1.0, 1.0)
    with pytest.raises(ContractError):
        model.bottleneck(logits, "sample", 1.0, 0.0)
    bank = params["mem.M"].data
    reads = model.memory_read(post, bank, mask=np.array([True, False, False,
                                                         False, True]))
    assert np.array_equal(reads[0], np.zeros(4))
    assert np.allclose(reads[1], post[1] @ bank)
    with pytest.raises(ContractError):
        model.memory_read(post, bank, mask=np.ones(3, dtype=bool))
    recon = model.decode(reads, ctx, params, SMALL)
    assert recon.shape == (5, 3)
    with pytest.raises(ContractError):
        model.encode(np.zeros((0, 3)), params, SMALL)
    with pytest.raises(ContractError):
        model.decode(reads, ctx[:4], params, SMALL)
