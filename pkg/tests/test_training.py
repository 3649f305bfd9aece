import math

import numpy as np
import pytest

from bimors import featio, prompthead, tensor as tc, textenc, training
from bimors.errors import ProtocolError, ValidationError
from bimors.tensor import Tensor

import synth
from oracles import central_diff_grad, max_rel_err, nearest_centroid_accuracy


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    path = tmp_path_factory.mktemp("world") / "ds"
    weights = synth.tiny_weights(0)
    manifest, records = synth.build_dataset(path, weights)
    manifest, reader = featio.read_dataset(path)
    return {"weights": weights, "manifest": manifest, "reader": reader, "records": records}


def logits_for(rec, head, world, class_ids, temperature=0.01, mode="full", override=None):
    token_ids = [world["manifest"].class_token_ids[c] for c in class_ids]
    return training.class_logits(
        rec, head, world["weights"], synth.TINY_ENC, token_ids, temperature,
        mode=mode, context_override=override,
    )


class TestClassLogits:
    def test_equal_embeddings_uniform_softmax(self, world):
        # identical token ids per "class" force identical class embeddings
        rec = world["records"][0]
        head = prompthead.init_head(synth.HEAD_CONFIG, seed=0)
        token_ids = [[9], [9], [9]]
        logits = training.class_logits(
            rec, head, world["weights"], synth.TINY_ENC, token_ids, 0.01
        )
        sm = np.exp(logits.data[0] - logits.data[0].max())
        sm /= sm.sum()
        assert np.allclose(sm, 1.0 / 3.0, atol=1e-5)

    def test_global_embed_scale_invariance(self, world):
        rec = world["records"][3]
        head = prompthead.init_head(synth.HEAD_CONFIG, seed=1)
        base = logits_for(rec, head, world, [0, 1, 2]).data.copy()
        scaled_rec = featio.FeatureRecord(
            rec.image_id, rec.class_id, rec.visual_tokens,
            rec.global_embed * 7.5, rec.caption_text, rec.caption_token_embeds,
        )
        scaled = logits_for(scaled_rec, head, world, [0, 1, 2]).data
        assert np.abs(base - scaled).max() < 1e-4

    def test_two_class_direct_formula(self, world):
        # independent arithmetic: cosine of normalized vectors over temperature
        rec = world["records"][5]
        head = prompthead.init_head(synth.HEAD_CONFIG, seed=2)
        ctx = prompthead.generate_context(rec, head, "full")
        embeds = []
        for cid in (0, 1):
            ids = world["manifest"].class_token_ids[cid]
            p = textenc.assemble_prompt(ids, ctx, world["weights"], synth.TINY_ENC)
            embeds.append(textenc.encode(p, world["weights"], synth.TINY_ENC).data)
        g = rec.global_embed.astype(np.float64)
        expect = np.array(
            [
                float(g @ e / (np.linalg.norm(g) * np.linalg.norm(e))) / 0.01
                for e in np.asarray(embeds, dtype=np.float64)
            ]
        )
        got = logits_for(rec, head, world, [0, 1]).data[0]
        assert np.abs(got - expect).max() < 1e-3

    def test_temperature_divides_but_preserves_argmax(self, world):
        rec = world["records"][9]
        head = prompthead.init_head(synth.HEAD_CONFIG, seed=3)
        l1 = logits_for(rec, head, world, [0, 1, 2], temperature=0.01).data[0]
        l2 = logits_for(rec, head, world, [0, 1, 2], temperature=0.02).data[0]
        assert np.allclose(l1 / 2.0, l2, atol=1e-4)
        assert int(np.argmax(l1)) == int(np.argmax(l2))


class TestLossBatch:
    def test_uniform_logits_ln_c(self, world):
        head = prompthead.init_head(synth.HEAD_CONFIG, seed=4)
        token_ids = [[9]] * 19  # 19 aliased classes -> uniform distribution
        loss = training.loss_batch(
            [world["records"][0]], [7], head, world["weights"], synth.TINY_ENC,
            token_ids, training.TrainConfig(seed=0),
        )
        assert abs(float(loss.data) - math.log(19)) < 1e-4

    def test_batch_of_one_equals_single(self, world):
        head = prompthead.init_head(synth.HEAD_CONFIG, seed=5)
        cfg = training.TrainConfig(seed=0)
        token_ids = [world["manifest"].class_token_ids[c] for c in (0, 1, 2)]
        rec = world["records"][2]
        batch_loss = training.loss_batch(
            [rec], [0], head, world["weights"], synth.TINY_ENC, token_ids, cfg
        )
        single = tc.cross_entropy(
            logits_for(rec, head, world, [0, 1, 2]), [0]
        )
        assert float(batch_loss.data) == pytest.approx(float(single.data), abs=1e-7)

    def test_label_outside_base_set(self, world):
        head = prompthead.init_head(synth.HEAD_CONFIG, seed=6)
        token_ids = [world["manifest"].class_token_ids[c] for c in (0, 1)]
        with pytest.raises(ProtocolError):
            training.loss_batch(
                [world["records"][0]], [2], head, world["weights"], synth.TINY_ENC,
                token_ids, training.TrainConfig(seed=0),
            )

    def test_query_grad_vs_finite_differences(self, world):
        cfg = training.TrainConfig(seed=0)
        token_ids = [world["manifest"].class_token_ids[c] for c in (0, 1, 2)]
        recs = [world["records"][0], world["records"][25]]
        labels = [0, 1]

        def loss_val(qarr):
            head = prompthead.init_head(synth.HEAD_CONFIG, seed=7)
            head.query_tokens.data[:] = qarr.astype(np.float32)
            return training.loss_batch(
                recs, labels, head, world["weights"], synth.TINY_ENC, token_ids, cfg
            )

        head = prompthead.init_head(synth.HEAD_CONFIG, seed=7)
        loss = training.loss_batch(
            recs, labels, head, world["weights"], synth.TINY_ENC, token_ids, cfg
        )
        tc.backward(loss)
        fd = central_diff_grad(
            lambda a: float(loss_val(a).data), head.query_tokens.data.astype(np.float64), h=1e-2
        )
        assert max_rel_err(head.query_tokens.grad, fd) < 1e-2


class TestSgdStep:
    def test_basic_update(self):
        head = prompthead.init_head(synth.HEAD_CONFIG, seed=8)
        head.query_tokens.data[:] = 0.0
        head.query_tokens.data[0, :2] = [1.0, 2.0]
        for _, t in head.trainable():
            t.grad = np.zeros_like(t.data)
        head.query_tokens.grad[0, :2] = [1.0, 1.0]
        training.sgd_step(head, lr=0.5)
        assert head.query_tokens.data[0, 0] == pytest.approx(0.5)
        assert head.query_tokens.data[0, 1] == pytest.approx(1.5)
        assert head.query_tokens.grad is None

    def test_zero_lr_no_change(self):
        head = prompthead.init_head(synth.HEAD_CONFIG, seed=9)
        before = {n: t.data.copy() for n, t in head.trainable()}
        for _, t in head.trainable():
            t.grad = np.ones_like(t.data)
        training.sgd_step(head, lr=0.0)
        for n, t in head.trainable():
            assert np.array_equal(t.data, before[n])

    def test_two_steps_sum_updates(self):
        head_a = prompthead.init_head(synth.HEAD_CONFIG, seed=10)
        head_b = prompthead.init_head(synth.HEAD_CONFIG, seed=10)
        g = {n: np.random.default_rng(0).normal(size=t.shape).astype(np.float32)
             for n, t in head_a.trainable()}
        for _ in range(2):
            for n, t in head_a.trainable():
                t.grad = g[n].copy()
            training.sgd_step(head_a, lr=0.1)
        for n, t in head_b.trainable():
            t.grad = 2.0 * g[n]
        training.sgd_step(head_b, lr=0.1)
        for (n, ta), (_, tb) in zip(head_a.trainable(), head_b.trainable()):
            assert np.allclose(ta.data, tb.data, atol=1e-6)

    def test_missing_grad_rejected(self):
        head = prompthead.init_head(synth.HEAD_CONFIG, seed=11)
        with pytest.raises(ProtocolError):
            training.sgd_step(head, lr=0.1)

    def test_query_tokens_move_after_real_step(self, world):
        # optimizer contract: nonzero grad changes the initialized queries
        head = training.build_head(world["manifest"], world["weights"], synth.HEAD_CONFIG, 0)
        init = head.query_tokens.data.copy()
        token_ids = [world["manifest"].class_token_ids[c] for c in (0, 1, 2)]
        loss = training.loss_batch(
            [world["records"][0]], [0], head, world["weights"], synth.TINY_ENC,
            token_ids, training.TrainConfig(seed=0),
        )
        tc.backward(loss)
        training.sgd_step(head, lr=0.05)
        assert not np.array_equal(init, head.query_tokens.data)


class TestSchedule:
    def test_warmup_value(self):
        cfg = training.TrainConfig()
        assert training.lr_at(0, cfg) == pytest.approx(1e-5)

    def test_first_post_warmup_is_peak(self):
        cfg = training.TrainConfig()
        assert training.lr_at(1, cfg) == pytest.approx(2e-4)

    def test_boundary_epoch_is_zero(self):
        cfg = training.TrainConfig()
        assert training.lr_at(10, cfg) == pytest.approx(0.0, abs=1e-12)

    def test_cosine_midpoint(self):
        cfg = training.TrainConfig(epochs=11)
        # halfway through the 10 decay epochs: cos(pi/2) = 0
        assert training.lr_at(6, cfg) == pytest.approx(cfg.lr * 0.5)

    def test_out_of_range(self):
        with pytest.raises(ValidationError):
            training.lr_at(11, training.TrainConfig())


class TestTrain:
    def test_step_arithmetic(self, tmp_path):
        weights = synth.tiny_weights(0)
        path = tmp_path / "two"
        synth.build_dataset(path, weights, n_classes=2, per_class=16)
        manifest, reader = featio.read_dataset(path)
        split = featio.make_transfer_split(manifest, seed=1, shots=16, mode="CD")
        cfg = synth.train_config(seed=1)
        state = training.train(reader, manifest, split, weights, synth.TINY_ENC, cfg,
                               synth.HEAD_CONFIG)
        # 2 classes x 16 shots, batch 4 -> 8 steps/epoch, 80 total
        assert state.steps == 80
        epochs_seen = sorted(set(e for _, e, _, _ in state.loss_log))
        assert epochs_seen == list(range(10))

    def test_same_seed_bitwise_identical(self, world):
        split = featio.make_b2n_split(world["manifest"], seed=3, shots=4)
        cfg = synth.train_config(seed=3, epochs=2)
        runs = []
        for _ in range(2):
            state = training.train(
                world["reader"], world["manifest"], split, world["weights"],
                synth.TINY_ENC, cfg, synth.HEAD_CONFIG,
            )
            runs.append(state)
        assert runs[0].loss_log == runs[1].loss_log
        for (n, ta), (_, tb) in zip(runs[0].head.trainable(), runs[1].head.trainable()):
            assert np.array_equal(ta.data, tb.data), n

    def test_distinct_seeds_distinct_heads(self, world):
        split = featio.make_b2n_split(world["manifest"], seed=3, shots=4)
        heads = []
        for seed in (1, 2):
            cfg = synth.train_config(seed=seed, epochs=1)
            heads.append(
                training.train(
                    world["reader"], world["manifest"], split, world["weights"],
                    synth.TINY_ENC, cfg, synth.HEAD_CONFIG,
                ).head
            )
        assert not np.array_equal(heads[0].query_tokens.data, heads[1].query_tokens.data)

    def test_losses_finite_and_logged(self, world):
        split = featio.make_b2n_split(world["manifest"], seed=5, shots=4)
        cfg = synth.train_config(seed=5, epochs=2)
        state = training.train(
            world["reader"], world["manifest"], split, world["weights"],
            synth.TINY_ENC, cfg, synth.HEAD_CONFIG,
        )
        assert len(state.loss_log) == state.steps
        assert all(math.isfinite(l) for _, _, _, l in state.loss_log)

    def test_frozen_encoder_untouched(self, world):
        before = {k: v.data.copy() for k, v in world["weights"].tensors.items()}
        split = featio.make_b2n_split(world["manifest"], seed=6, shots=2)
        cfg = synth.train_config(seed=6, epochs=1)
        training.train(
            world["reader"], world["manifest"], split, world["weights"],
            synth.TINY_ENC, cfg, synth.HEAD_CONFIG,
        )
        for k, arr in before.items():
            assert np.array_equal(arr, world["weights"].tensors[k].data), k

    def test_overfits_separable_task(self, world):
        # nearest-centroid oracle first: the construction must be separable
        recs = world["records"]
        feats = np.stack([r.global_embed for r in recs])
        labels = [r.class_id for r in recs]
        oracle = nearest_centroid_accuracy(feats, labels, feats, labels)
        assert oracle >= 95.0

        split = featio.make_transfer_split(world["manifest"], seed=1, shots=16, mode="CD")
        cfg = synth.train_config(seed=1)
        state = training.train(
            world["reader"], world["manifest"], split, world["weights"],
            synth.TINY_ENC, cfg, synth.HEAD_CONFIG,
        )
        pool = featio.sample_shots(world["reader"].class_ids, split)
        class_ids = training.training_class_ids(split)
        position = {c: i for i, c in enumerate(class_ids)}
        correct = 0
        for i in pool:
            rec = world["reader"].record(i)
            logits = logits_for(rec, state.head, world, class_ids)
            correct += int(np.argmax(logits.data[0])) == position[rec.class_id]
        assert 100.0 * correct / len(pool) >= 95.0

    def test_loss_log_text_format(self, world):
        split = featio.make_b2n_split(world["manifest"], seed=7, shots=2)
        cfg = synth.train_config(seed=7, epochs=1)
        state = training.train(
            world["reader"], world["manifest"], split, world["weights"],
            synth.TINY_ENC, cfg, synth.HEAD_CONFIG,
        )
        text = training.loss_log_text(state)
        lines = text.strip().split("\n")
        assert lines[0] == "step\tepoch\tlr\tloss"
        assert len(lines) == state.steps + 1
        assert all(len(line.split("\t")) == 4 for line in lines[1:])
