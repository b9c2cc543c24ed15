import math

import numpy as np
import pytest

from scdr.backbone import EmbeddingConfig
from scdr.errors import BatchError, ConfigError
from scdr.model import (LossBreakdown, LossWeights, TrainConfig, build_model, compute_losses,
                        epoch_batches, evaluate, fuse_predictions, metrics_from_predictions, predict,
                        predict_batch, train, train_step)
from scdr.optim import LrSchedule
from scdr.tensor import Tensor

SMALL = EmbeddingConfig(input_size=(16, 16), stage_channels=(4, 8), num_classes=3, input_scale=6.0)


def batch(seed=0, n_per=2, k=3):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(k), n_per)
    return rng.uniform(0, 1, (len(labels), 16, 16)).astype(np.float32), labels


def test_whole_only_weights_decouple_local_branch():
    model = build_model(SMALL, 0)
    images, labels = batch()
    w = LossWeights(1.0, 0.0, 0.0, 0.0)
    step = compute_losses(model, images, labels, w)
    assert step.losses.total == pytest.approx(step.losses.l_whole, abs=1e-6)
    step.total.backward()
    for name, p in model.named_parameters().items():
        if name.startswith("local.") or name == "votes":
            assert p.grad is None or not np.any(p.grad), name
    assert any(np.any(p.grad) for k, p in model.named_parameters().items() if k.startswith("whole."))


def test_recompose_arithmetic():
    assert LossBreakdown(2.0, 1.0, 0.4, 0.0, 0.0).recompose(LossWeights(1, 0.5, 0.5, 0)) == pytest.approx(2.7)


def test_total_recomposes_from_parts():
    model = build_model(SMALL, 1)
    images, labels = batch(1)
    for w in (LossWeights(), LossWeights(0.3, 1.2, 2.0, 0.7)):
        step = compute_losses(model, images, labels, w)
        assert abs(step.losses.total - step.losses.recompose(w)) < 1e-6
        assert min(step.losses.l_whole, step.losses.l_local, step.losses.l_disc, step.losses.l_fuse) >= 0


def test_negative_loss_weight_rejected():
    with pytest.raises(ConfigError):
        LossWeights(whole=-1.0)


def test_disc_weight_zero_contributes_no_gradient():
    images, labels = batch(2)
    a, b = build_model(SMALL, 2), build_model(SMALL, 2)
    step = compute_losses(a, images, labels, LossWeights(1, 0.5, 0.0, 0.0))
    assert step.outcomes  # mining still ran
    step.total.backward()
    ref = compute_losses(b, images, labels, LossWeights(1, 0.5, 0.0, 0.0),
                         local_images=np.stack([c.local_image for c in step.captures]))
    (ref.total * 1.0).backward()
    for (k, pa), pb in zip(a.named_parameters().items(), b.parameters()):
        if pa.grad is not None:
            np.testing.assert_array_equal(pa.grad, pb.grad, err_msg=k)


def test_fuse_examples():
    rng = np.random.default_rng(3)
    pw, pl = rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(4))
    np.testing.assert_allclose(fuse_predictions(pw, pl, [0.0, 0.0]).data, (pw + pl) / 2, atol=1e-12)
    np.testing.assert_allclose(fuse_predictions(pw, pw, [3.0, -1.0]).data, pw, atol=1e-12)
    np.testing.assert_allclose(fuse_predictions(pw, pl, [math.log(9), 0.0]).data, 0.9 * pw + 0.1 * pl, atol=1e-12)
    np.testing.assert_allclose(fuse_predictions(pw, pl, [60.0, -60.0]).data, pw, atol=1e-12)
    np.testing.assert_allclose(fuse_predictions(pw, pl, [-60.0, 60.0]).data, pl, atol=1e-12)
    assert fuse_predictions(pw, pl, rng.normal(size=2)).data.sum() == pytest.approx(1.0, abs=1e-6)


def test_votes_receive_gradient_when_branches_disagree():
    from scdr.ops import cross_entropy
    v = Tensor(np.zeros(2), requires_grad=True)
    cross_entropy(fuse_predictions([0.7, 0.2, 0.1], [0.1, 0.2, 0.7], v), 0).backward()
    assert np.all(np.abs(v.grad) > 0)


def test_untrained_symmetric_model_predicts_uniform_class_zero():
    model = build_model(SMALL, 0)
    label, prob, cam = predict(model, np.zeros((16, 16)))
    np.testing.assert_allclose(prob, 1 / 3, atol=1e-7)
    assert label == 0
    assert cam.degenerate


def test_degenerate_mask_feeds_whole_input_to_local_branch():
    model = build_model(SMALL, 0)
    # a zero head makes every class activation map identically zero
    model.whole.head.weight.data[:] = 0.0
    img = np.random.default_rng(0).uniform(size=(16, 16)).astype(np.float32)
    _, prob, cam = predict(model, img)
    assert cam.degenerate
    np.testing.assert_array_equal(cam.mask, np.ones((16, 16)))
    np.testing.assert_array_equal(cam.local_image, img)
    assert prob.sum() == pytest.approx(1.0, abs=1e-6)


def test_predict_matches_independent_recombination():
    model = build_model(SMALL, 4)
    model.votes.data = np.array([0.4, -0.2], dtype=np.float32)
    images, _ = batch(4)
    for p in predict_batch(model, images):
        a = np.exp([0.4, -0.2]) / np.exp([0.4, -0.2]).sum()
        fused = a[0] * p.p_whole.astype(np.float64) + a[1] * p.p_local.astype(np.float64)
        assert p.label == int(np.argmax(fused))
        np.testing.assert_allclose(p.prob, fused, atol=1e-6)


def test_train_step_rejects_unbalanced_batch():
    model = build_model(SMALL, 0)
    images, _ = batch()
    with pytest.raises(BatchError):
        train_step(model, images, np.array([0, 1, 2, 0, 1, 2])[[0, 0, 0, 0, 0, 1]], LossWeights(), 0, LrSchedule())


def test_zero_lr_leaves_parameters_unchanged():
    model = build_model(SMALL, 5)
    before = {k: v.data.copy() for k, v in model.named_parameters().items()}
    images, labels = batch(5, n_per=4)
    train(model, images, labels, TrainConfig(epochs=1, schedule=LrSchedule(base_lr=0.0)))
    for k, v in model.named_parameters().items():
        assert np.array_equal(v.data, before[k]), k


def test_training_is_deterministic():
    images, labels = batch(6, n_per=4)
    cfg = TrainConfig(epochs=3, schedule=LrSchedule(base_lr=0.1, warmup_epochs=1), seed=9)
    runs = []
    for _ in range(2):
        m = build_model(SMALL, 6)
        log = train(m, images, labels, cfg)
        runs.append((log, {k: v.data.copy() for k, v in m.named_parameters().items()}))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        assert np.array_equal(runs[0][1][k], runs[1][1][k])


def test_single_class_training_is_config_error():
    images, _ = batch()
    with pytest.raises(ConfigError):
        train(build_model(SMALL, 0), images, np.zeros(len(images), dtype=int), TrainConfig(epochs=1))


def test_epoch_batches_are_balanced_and_replayable():
    labels = np.repeat(np.arange(5), 7)
    a = epoch_batches(labels, 4, 4, seed=3, epoch=2)
    assert len(a) == math.ceil(35 / 16)
    for b in a:
        counts = np.bincount(labels[b], minlength=5)
        assert sorted(counts[counts > 0].tolist()) == [4, 4, 4, 4]
        assert len(set(b.tolist())) == 16
    b = epoch_batches(labels, 4, 4, seed=3, epoch=2)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, epoch_batches(labels, 4, 4, seed=3, epoch=3)))


def test_metrics_examples():
    m = metrics_from_predictions([0, 0, 1, 1], [0, 0, 0, 0], 2)
    assert m.average == 0.5
    m = metrics_from_predictions([0, 1, 2, 2], [0, 1, 2, 2], 3)
    assert m.average == 1.0
    assert np.array_equal(np.array(m.confusion), np.diag([1, 1, 2]))
    m = metrics_from_predictions([0, 0, 2, 2, 2], [0, 2, 2, 1, 2], 3)
    assert m.omitted_classes == [1]
    assert m.average == pytest.approx(np.mean([0.5, 2 / 3]))
    assert [sum(r) for r in m.confusion] == [m.counts[c] for c in range(3)]


def test_evaluate_is_bit_reproducible():
    model = build_model(SMALL, 7)
    images, labels = batch(7, n_per=3)
    masks = (images > 0.8).astype(np.uint8)
    a = evaluate(model, images, labels, masks).to_dict()
    b = evaluate(model, images, labels, masks).to_dict()
    assert a == b
    assert 0 <= a["mask_iou"] <= 1 and 0 <= a["disk_iou"] <= 1


def test_reference_training_halves_the_loss(reference_soundness):
    for run in reference_soundness.runs["scdr"]:
        first, last = run.log[0].total, run.log[-1].total
        assert last <= 0.5 * first, (first, last)
