import numpy as np
import pytest

from uniadapt import tensor as T
from uniadapt.adaptation import AdaptationConfig, build_model
from uniadapt.backbone import BackboneConfig


def small_backbone(**kw):
    base = dict(d=16, heads=2, visual_depth=2, text_depth=2, fusion_depth=2, decoder_depth=1,
                patches=4, patch_dim=6, vocab=20, max_len=8, ffn_mult=2)
    base.update(kw)
    return BackboneConfig(**base)


def make_model(variant="none", bcfg=None, seed=0, include_decoder=False, dtype=np.float64, **kw):
    bcfg = bcfg or small_backbone()
    with T.default_dtype(dtype):
        return build_model(bcfg, AdaptationConfig.for_variant(variant, **kw), seed=seed,
                           include_decoder=include_decoder)


@pytest.fixture
def f64():
    with T.default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_run(task="retrieval-image", variant="uniadapter", epochs=1, **adapt):
    """RunConfig small enough to train for a few hundred steps in seconds."""
    from uniadapt.config import OptimConfig, RunConfig, TaskConfig
    from uniadapt.data import WorldSpec
    world = WorldSpec(patches=4, patch_dim=8, n_shapes=3, n_colors=3, n_pretrain=32, n_train=32, n_test=16,
                      train_frames=3, infer_frames=4)
    bcfg = small_backbone(patches=4, patch_dim=8, vocab=world.vocab_size, max_len=8)
    return RunConfig(bcfg, AdaptationConfig.for_variant(variant, r=4, **adapt), OptimConfig(),
                     TaskConfig(task=task, batch_size=4, epochs=epochs, pretrain_epochs=epochs), world)


# -- acceptance summary: one PASS/FAIL line per criterion --------------------

_criteria = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1].split("[")[0]
    if "test_acceptance" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        prev = _criteria.get(name, True)
        _criteria[name] = prev and report.passed


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_criteria, key=lambda n: int(n.split("_")[2])):
        parts = name.split("_")
        status = "PASS" if _criteria[name] else "FAIL"
        terminalreporter.write_line(f"criterion {parts[2]}: {status}  {' '.join(parts[3:])}")
