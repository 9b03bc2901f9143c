import math

import numpy as np
import pytest

from cffa import checkpoint as ckpt
from cffa.domains import Sample
from cffa.trainer import (
    METRICS_HEADER,
    SampleStream,
    TrainingError,
    adapt,
    init_state,
    load_state,
    pretrain,
    resume,
    run_phase,
    sample_batch,
    save_state,
    state_from_tensors,
    state_to_tensors,
)


class GuardedSample:
    """A target sample that records any read of its annotations."""

    reads = 0

    def __init__(self, sample):
        self.image, self.id, self._annotations = sample.image, sample.id, sample.annotations

    @property
    def annotations(self):
        GuardedSample.reads += 1
        return self._annotations


def model_bytes(state):
    return {k: v.data.tobytes() for k, v in state.model.params.items()}


def pretrained(config, domains, stop_at=None):
    return pretrain(config, domains["source_train"], stop_at, n_target=len(domains["target_train"]))


class TestSampling:
    def test_one_per_domain(self, tiny_config, tiny_domains):
        state = init_state(tiny_config, 5, 4)
        (s,), (t,) = sample_batch(tiny_domains["source_train"], tiny_domains["target_train"], 2, state)
        assert s.annotations is not None
        assert not hasattr(t, "annotations")

    def test_epoch_covers_everything_once(self):
        stream = SampleStream(7, np.random.default_rng(0))
        first, second = [stream.next() for _ in range(7)], [stream.next() for _ in range(7)]
        assert sorted(first) == sorted(second) == list(range(7))
        assert first != second

    def test_reproducible(self):
        a, b = SampleStream(9, np.random.default_rng(4)), SampleStream(9, np.random.default_rng(4))
        assert [a.next() for _ in range(20)] == [b.next() for _ in range(20)]

    def test_empty_rejected(self, tiny_config, tiny_domains):
        state = init_state(tiny_config, 5, 4)
        with pytest.raises(ValueError):
            sample_batch(tiny_domains["source_train"], [], 2, state)
        with pytest.raises(ValueError):
            SampleStream(0, np.random.default_rng(0))

    def test_odd_batch_rejected(self, tiny_config, tiny_domains):
        with pytest.raises(ValueError):
            sample_batch(tiny_domains["source_train"], tiny_domains["target_train"], 3, init_state(tiny_config, 5, 4))


class TestPretrain:
    def test_zero_iterations_is_initialization(self, tiny_config, tiny_domains):
        state = pretrained(tiny_config, tiny_domains, stop_at=0)
        fresh = init_state(tiny_config, 5, 4)
        assert model_bytes(state) == model_bytes(fresh)
        assert state.metrics == []

    def test_metrics_file(self, tiny_config, tiny_domains, tmp_path):
        path = tmp_path / "metrics.csv"
        path.write_text(METRICS_HEADER + "\n")
        pretrain(tiny_config, tiny_domains["source_train"], stop_at=3, metrics_path=path)
        lines = path.read_text().splitlines()
        assert lines[0] == METRICS_HEADER and len(lines) == 4
        row = lines[1].split(",")
        assert row[0] == "0" and row[5] == "" and row[6] == "" and float(row[8]) == 1e-3
        assert b"\r" not in path.read_bytes()

    def test_loss_decreases(self):
        from cffa.config import RunConfig
        from cffa.experiment import build_domains, seeded

        drops = []
        for seed in range(3):
            config = seeded(RunConfig(), seed)
            state = pretrain(config, build_domains(config)["source_train"], stop_at=200)
            drops.append(state.metrics[0]["l_total"] - state.metrics[199]["l_total"])
        assert np.median(drops) > 0

    def test_non_finite_loss_names_the_sample(self, tiny_config):
        bad = Sample(np.full((3, 64, 64), np.nan), [], "broken")
        with pytest.raises(TrainingError, match="broken"):
            pretrain(tiny_config, [bad], stop_at=1)


class TestAdapt:
    def test_metrics_invariants(self, tiny_config, tiny_domains):
        state = adapt(tiny_config, pretrained(tiny_config, tiny_domains),
                      tiny_domains["source_train"], tiny_domains["target_train"])
        t = tiny_config.train
        assert len(state.metrics) == t.adapt_iters
        for row in state.metrics:
            psa = row["l_psa"]
            if row["iter"] < t.psa_start_iter:
                assert psa is None
            else:
                assert psa is not None
            expected = row["l_det"] + t.lambda1 * row["l_art"] + t.lambda2 * (psa or 0.0)
            assert row["l_total"] == pytest.approx(expected, abs=1e-9)
            assert row["l_det"] == pytest.approx(row["l_rpn"] + row["l_reg"] + row["l_cls"], abs=1e-9)
            assert row["lr"] == (t.detector_lr if row["iter"] < t.lr_decay_iter else t.detector_lr_after_decay)

    def test_banks_frozen_before_psa_start(self, tiny_config, tiny_domains):
        t = tiny_config.train
        src, tgt = tiny_domains["source_train"], tiny_domains["target_train"]
        early = adapt(tiny_config, pretrained(tiny_config, tiny_domains), src, tgt, stop_at=0)
        before = (early.source_bank.vectors.copy(), early.target_bank.vectors.copy())
        run_phase(early, src, tgt, stop_at=t.psa_start_iter)
        np.testing.assert_array_equal(early.source_bank.vectors, before[0])
        np.testing.assert_array_equal(early.target_bank.vectors, before[1])
        run_phase(early, src, tgt, stop_at=t.psa_start_iter + 1)
        assert not np.array_equal(early.source_bank.vectors, before[0])

    def test_zero_lambdas_equal_continued_pretraining(self, tiny_config, tiny_domains):
        n = 6
        base = tiny_config.with_train(pretrain_iters=n, lambda1=0.0, lambda2=0.0, lr_decay_iter=100)
        two_phase = adapt(base, pretrained(base, tiny_domains), tiny_domains["source_train"],
                          tiny_domains["target_train"], stop_at=n)
        longer = base.with_train(pretrain_iters=2 * n)
        one_phase = pretrained(longer, tiny_domains)
        assert model_bytes(two_phase) == model_bytes(one_phase)
        for row in two_phase.metrics:
            assert row["l_art"] is None and row["l_psa"] is None

    def test_target_annotations_never_read(self, tiny_config, tiny_domains):
        guarded = [GuardedSample(s) for s in tiny_domains["target_train"]]
        GuardedSample.reads = 0
        adapt(tiny_config, pretrained(tiny_config, tiny_domains), tiny_domains["source_train"], guarded)
        assert GuardedSample.reads == 0
        _ = guarded[0].annotations
        assert GuardedSample.reads == 1

    def test_adapt_rejects_adapted_checkpoint(self, tiny_config, tiny_domains):
        state = adapt(tiny_config, pretrained(tiny_config, tiny_domains),
                      tiny_domains["source_train"], tiny_domains["target_train"], stop_at=1)
        with pytest.raises(TrainingError):
            adapt(tiny_config, state_to_tensors(state), tiny_domains["source_train"], tiny_domains["target_train"])


class TestReproducibility:
    def run(self, config, domains, out):
        src, tgt = domains["source_train"], domains["target_train"]
        pre = pretrain(config, src, metrics_path=out / "pre.csv", n_target=len(tgt))
        state = adapt(config, pre, src, tgt, metrics_path=out / "adapt.csv")
        return save_state(state, out / "final.ckpt")

    def test_identical_runs_identical_bytes(self, tiny_config, tiny_domains, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        a.mkdir(), b.mkdir()
        pa, pb = self.run(tiny_config, tiny_domains, a), self.run(tiny_config, tiny_domains, b)
        assert pa.read_bytes() == pb.read_bytes()
        for name in ("pre.csv", "adapt.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    @pytest.mark.parametrize("phase", ["pretrain", "adapt"])
    def test_split_run_equals_straight_run(self, tiny_config, tiny_domains, tmp_path, phase):
        src, tgt = tiny_domains["source_train"], tiny_domains["target_train"]
        t = tiny_config.train
        end = t.pretrain_iters if phase == "pretrain" else t.adapt_iters
        half = end // 2

        def start(stop):
            if phase == "pretrain":
                return pretrained(tiny_config, tiny_domains, stop_at=stop)
            return adapt(tiny_config, pretrained(tiny_config, tiny_domains), src, tgt, stop_at=stop)

        straight = save_state(start(end), tmp_path / "straight.ckpt")
        save_state(start(half), tmp_path / "half.ckpt")
        resumed = resume(load_state(tmp_path / "half.ckpt"), None, src, tgt)
        split = save_state(resumed, tmp_path / "split.ckpt")
        assert straight.read_bytes() == split.read_bytes()

    def test_resume_with_other_lr_diverges(self, tiny_config, tiny_domains):
        src, tgt = tiny_domains["source_train"], tiny_domains["target_train"]
        half = state_to_tensors(pretrained(tiny_config, tiny_domains, stop_at=4))
        same = resume(state_from_tensors(half), None, src, tgt, stop_at=8)
        faster = resume(state_from_tensors(half), tiny_config.with_train(pretrain_lr=1e-2), src, tgt, stop_at=8)
        assert model_bytes(same) != model_bytes(faster)
        assert all(math.isfinite(r["l_total"]) for r in faster.metrics)

    def test_corrupted_checkpoint_rejected(self, tiny_config, tiny_domains, tmp_path):
        path = save_state(pretrained(tiny_config, tiny_domains, stop_at=2), tmp_path / "a.ckpt")
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(ckpt.CheckpointError):
            load_state(path)

    def test_missing_entry_rejected(self, tiny_config, tiny_domains):
        tensors = state_to_tensors(pretrained(tiny_config, tiny_domains, stop_at=1))
        del tensors["model/roi.fc1.w"]
        with pytest.raises(ckpt.CheckpointError, match="roi.fc1.w"):
            state_from_tensors(tensors)
