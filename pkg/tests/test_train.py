import json
import math

import numpy as np
import pytest
import torch

from dcucnet.data import CorpusSpec, make_scene
from dcucnet.errors import InvalidInput, ShapeError, TrainingDiverged
from dcucnet.model import DCUCNet, identity_mask_model, micro_config
from dcucnet.train import TrainConfig, evaluate, si_snr, si_snr_batch, si_snr_loss, train

import oracles


def orthogonal_pair(rng, n=4000, ratio=100.0):
    s = rng.standard_normal(n)
    s -= s.mean()
    noise = rng.standard_normal(n)
    noise -= noise.mean()
    noise -= noise @ s / (s @ s) * s
    noise *= math.sqrt((s @ s) / (noise @ noise) / ratio)
    return s, noise


class TestSiSnr:
    def test_perfect_estimate_capped(self, rng):
        s = rng.standard_normal(1000)
        assert si_snr(s, s) == 60.0
        assert si_snr(s, s, "plain_snr") == 60.0

    @pytest.mark.parametrize("ratio", [100.0, 10.0, 0.5])
    def test_orthogonal_noise(self, rng, ratio):
        s, n = orthogonal_pair(rng, ratio=ratio)
        assert abs(si_snr(s + n, s) - 10 * math.log10(ratio)) <= 1e-9

    @pytest.mark.parametrize("alpha", [0.1, 1.0, 3.7])
    def test_scale_invariance(self, rng, alpha):
        s, est = rng.standard_normal(2000), rng.standard_normal(2000)
        est = s + 0.3 * est
        assert abs(si_snr(alpha * est, s) - si_snr(est, s)) <= 1e-9

    def test_mean_removed(self, rng):
        s, est = rng.standard_normal(500), rng.standard_normal(500)
        assert abs(si_snr(est + 3.0, s) - si_snr(est, s)) <= 1e-9

    def test_matches_scalar_oracle(self, rng):
        s, est = rng.standard_normal(300), rng.standard_normal(300)
        for variant in ("scale_invariant", "plain_snr"):
            assert abs(si_snr(est, s, variant) - oracles.si_snr_scalar(est, s, variant)) <= 1e-9

    def test_plain_snr_literal(self, rng):
        s, n = orthogonal_pair(rng, ratio=100.0)
        est = 2.0 * (s + n)
        plain = 10 * math.log10(np.sum(s**2) / np.sum((est - s) ** 2))
        assert abs(si_snr(est, s, "plain_snr") - plain) <= 1e-9
        # the literal variant is not scale invariant
        assert abs(si_snr(est, s, "plain_snr") - si_snr(s + n, s, "plain_snr")) > 1.0

    def test_negated_target(self, rng):
        s = rng.standard_normal(400)
        assert si_snr(-s, s) == 60.0
        assert si_snr(-s, s, "plain_snr") == pytest.approx(10 * math.log10(1 / 4), abs=1e-9)

    def test_zero_estimate_floor(self, rng):
        s = rng.standard_normal(400)
        assert si_snr(np.zeros(400), s) == pytest.approx(-80.0)

    def test_errors(self, rng):
        with pytest.raises(InvalidInput):
            si_snr(rng.standard_normal(10), np.full(10, 2.0))
        with pytest.raises(ShapeError):
            si_snr(np.zeros(10), np.ones(11))
        with pytest.raises(InvalidInput):
            si_snr(np.zeros(10), np.ones(10), "nope")


class TestLoss:
    def test_batch_matches_scalar(self, rng):
        s = rng.standard_normal((3, 200))
        est = s + 0.5 * rng.standard_normal((3, 200))
        got = si_snr_batch(torch.from_numpy(est), torch.from_numpy(s)).numpy()
        ref = [oracles.si_snr_scalar(e, t) for e, t in zip(est, s)]
        # the loss carries 1e-8 guards inside the ratio, worth ~1e-8 dB here
        np.testing.assert_allclose(got, ref, rtol=0, atol=1e-7)
        loss = si_snr_loss(torch.from_numpy(est), torch.from_numpy(s))
        assert float(loss) == pytest.approx(-np.mean(ref), abs=1e-7)

    def test_identical_pairs_finite(self, rng):
        s = torch.from_numpy(rng.standard_normal((2, 100)))
        loss = si_snr_loss(s.clone(), s)
        assert torch.isfinite(loss) and float(loss) < -50

    def test_negated_target_collapses_error(self, rng):
        s = torch.from_numpy(rng.standard_normal((1, 100)))
        val = float(si_snr_batch(-s, s)[0])
        energy = float((s - s.mean()).pow(2).sum())
        assert val == pytest.approx(10 * math.log10(energy / 1e-8 + 1e-8), abs=1e-6)


def tiny_scene(index=0, duration=0.5):
    return make_scene(CorpusSpec(num_scenes=4, duration_s=duration, frame_size=(8, 8), seed=7), index)


def micro(seed=0):
    return DCUCNet(micro_config(fps=25.0, seed=seed))


def test_zero_learning_rate_keeps_parameters():
    model = micro()
    before = {k: v.clone() for k, v in model.state_dict().items() if "running" not in k and "num_batches" not in k}
    train(model, [tiny_scene()], TrainConfig(epochs=3, learning_rate=0.0))
    after = model.state_dict()
    for k, v in before.items():
        assert torch.equal(v, after[k]), k


def test_history_deterministic(tmp_path):
    scenes = [tiny_scene(i) for i in range(3)]
    cfg = TrainConfig(epochs=2, batch_size=2, seed=3, crop_s=0.2)
    _, h1 = train(micro(), scenes, cfg, history_path=tmp_path / "a.jsonl")
    _, h2 = train(micro(), scenes, cfg, history_path=tmp_path / "b.jsonl")
    assert h1 == h2 and len(h1) == 4
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    rec = json.loads((tmp_path / "a.jsonl").read_text().splitlines()[0])
    assert set(rec) == {"step", "epoch", "loss", "grad_norm"}


def test_overfit_single_scene():
    scene = tiny_scene(2)
    model, hist = train(micro(), [scene], TrainConfig(epochs=200, batch_size=1, learning_rate=3e-3))
    losses = [h["loss"] for h in hist]
    assert len(losses) == 200
    # loss is negative SI-SNR, so improvement is a drop in loss
    assert np.mean(losses[:10]) - np.mean(losses[-10:]) >= 3.0


def test_divergence_reported():
    model = micro()
    with torch.no_grad():
        model.fuse_out.bias.fill_(float("nan"))
    with pytest.raises(TrainingDiverged) as info:
        train(model, [tiny_scene()], TrainConfig(epochs=1))
    assert info.value.step == 0


def test_checkpoint_hook_called():
    steps = []
    train(micro(), [tiny_scene(i) for i in range(4)],
          TrainConfig(epochs=1, batch_size=1, eval_every=2, crop_s=0.2),
          on_checkpoint=lambda m, s: steps.append(s))
    assert steps == [2, 4, 4]


def test_empty_corpus():
    with pytest.raises(InvalidInput):
        train(micro(), [], TrainConfig())


@pytest.fixture(scope="module")
def scenes():
    spec = CorpusSpec(num_scenes=3, duration_s=1.0, seed=5)
    return [make_scene(spec, i) for i in range(3)]


class TestEvaluate:
    def test_identity_mask(self, scenes):
        r = evaluate(identity_mask_model().double(), scenes)
        assert abs(r.si_snr_improvement_db) < 1e-4
        assert r.num_utterances == 3

    def test_zero_mask(self, scenes):
        model = identity_mask_model().double()
        with torch.no_grad():
            model.decoder[-1].conv.b_real.zero_()
        r = evaluate(model, scenes)
        assert r.si_snr_db == pytest.approx(-80.0)
        assert r.si_snr_improvement_db < -70

    def test_details_and_lines(self, scenes):
        details = []
        r = evaluate(identity_mask_model().double(), scenes[:1], details=details)
        assert len(details) == 1 and details[0][0] is scenes[0]
        keys = [line.split("=")[0] for line in r.as_lines().splitlines()]
        assert keys == ["si_snr_db", "si_snr_std_db", "si_snr_improvement_db", "noisy_si_snr_db", "num_utterances"]

    def test_empty(self):
        with pytest.raises(InvalidInput):
            evaluate(identity_mask_model(), [])
