import numpy as np
import pytest

from uniadapt import tensor as T
from uniadapt.adaptation import build_model
from uniadapt.checkpoint import checksum
from uniadapt.data import generate
from uniadapt.train import (AdamW, DivergenceError, batches, cosine_lr, default_lr, evaluate,
                            frozen_backbone_names, train)

from conftest import tiny_run


def build(cfg, include_decoder=False):
    return build_model(cfg.backbone, cfg.adaptation, seed=cfg.task.seed, include_decoder=include_decoder)


@pytest.mark.parametrize("variant", ["uniadapter", "lora", "sequential_adapter", "linear_probe"])
def test_freeze_integrity_over_200_steps(variant):
    cfg = tiny_run(variant=variant)
    m = build(cfg)
    samples = generate(cfg.world, cfg.task.task, "train")
    frozen = frozen_backbone_names(m.store)
    before = checksum(m.store, frozen)
    seen = []

    def check(step, loss, parts):
        seen.append(all(m.store[n].grad is None for n in frozen))
    losses = train(m, samples, cfg.task.task, cfg, epochs=100, max_steps=200, on_step=check)
    assert len(losses) == 200 and all(seen)
    assert checksum(m.store, frozen) == before
    assert all(not m.store[n].requires_grad for n in frozen)


def test_adapter_training_moves_adapters_and_lowers_loss():
    cfg = tiny_run()
    m = build(cfg)
    samples = generate(cfg.world, "retrieval-image", "train")
    ups = [n for n in m.store.canonical_names() if ".up." in n]
    losses = train(m, samples, "retrieval-image", cfg, epochs=100, max_steps=150)
    assert any(np.any(m.store[n].data) for n in ups)
    assert np.mean(losses[-20:]) < np.mean(losses[:20])


def test_step_zero_eval_equals_frozen_backbone_eval():
    cfg = tiny_run()
    test = generate(cfg.world, "retrieval-image", "test")
    adapted = build(cfg)
    frozen = build_model(cfg.backbone, tiny_run(variant="none").adaptation, seed=cfg.task.seed)
    a, b = evaluate(adapted, test, "retrieval-image"), evaluate(frozen, test, "retrieval-image")
    assert (a.r1, a.r5, a.r10, a.mdr) == (b.r1, b.r5, b.r10, b.mdr)


def test_video_and_vqa_tasks_train():
    for task, dec in (("retrieval-video", False), ("vqa", True)):
        cfg = tiny_run(task=task)
        m = build(cfg, include_decoder=dec)
        samples = generate(cfg.world, task, "train")
        losses = train(m, samples, task, cfg, epochs=1, max_steps=3)
        assert len(losses) == 3 and all(np.isfinite(losses))
        rec = evaluate(m, generate(cfg.world, task, "test"), task)
        assert (rec.acc is not None) if task == "vqa" else (rec.r1 is not None)


def test_training_is_deterministic():
    def run():
        cfg = tiny_run()
        m = build(cfg)
        return train(m, generate(cfg.world, "retrieval-image", "train"), "retrieval-image", cfg, 1, max_steps=5)
    assert run() == run()


def test_divergence_is_reported():
    cfg = tiny_run()
    m = build(cfg)
    m.store["adapter.text.0.up.T"] = np.full((4, 16), np.nan)
    with pytest.raises(DivergenceError, match="step 0"):
        train(m, generate(cfg.world, "retrieval-image", "train"), "retrieval-image", cfg, 1, max_steps=2)


def test_cosine_schedule_shape():
    lrs = [cosine_lr(s, 100, 1.0, 0.1) for s in range(100)]
    assert lrs[0] < lrs[9] <= 1.0 and lrs[-1] < 0.01
    assert max(lrs) == pytest.approx(1.0, abs=1e-2)


def test_default_lrs():
    assert default_lr("uniadapter") > default_lr("full_finetune")
    assert default_lr("uniadapter", pretrain=True) == default_lr("full_finetune", pretrain=True)


def test_adamw_matches_hand_step():
    w = T.Tensor(np.array([[1.0, -1.0]]), requires_grad=True)
    w.grad = np.array([[0.5, -2.0]])
    AdamW([("w", w)], lr=0.1, weight_decay=0.0).step()
    # First bias-corrected Adam step moves each weight by lr * sign(grad).
    np.testing.assert_allclose(w.data, [[0.9, -0.9]], atol=1e-6)


def test_batches_drop_singletons():
    cfg = tiny_run()
    samples = generate(cfg.world, "retrieval-image", "test")[:9]
    sizes = [b.size for b in batches(samples, 4)]
    assert sizes == [4, 4]
    assert [b.size for b in batches(samples, 4, drop_last=False)] == [4, 4, 1]
