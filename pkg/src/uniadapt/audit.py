"""Full-scale tunable-parameter cells (d=768, 12-layer encoders).

Each cell pairs an adaptation plan with the count printed in the published
tables. ``audit()`` reports the exact count, our half-up rounding, and
whether both the rounding and the published figure agree.
"""
from __future__ import annotations

from dataclasses import dataclass

from .adaptation import AdaptationConfig, build_parameter_plan, count_tunable, format_count
from .backbone import BackboneConfig


def _adapter(mods, r=512):
    return AdaptationConfig.for_variant("parallel_adapter", r=r, modalities=frozenset(mods))


def _uni(sharing="share_down", r=512, layers=None):
    bands = None if layers is None else {m: frozenset(layers) for m in "VTC"}
    return AdaptationConfig(variant="uniadapter", r=r, sharing=sharing, insert_layers=bands)


# (cell id, plan, published figure, exact count we expect)
CELLS = (
    ("modality.V", _adapter("V"), "9.5M", 9_437_184),
    ("modality.T", _adapter("T"), "9.5M", 9_437_184),
    ("modality.VT", _adapter("VT"), "19.0M", 18_874_368),
    ("modality.C", _adapter("C"), "9.5M", 9_437_184),
    ("modality.VTC", _adapter("VTC"), "28.4M", 28_311_552),
    ("ablation.adapter_r128", _adapter("VTC", r=128), "7.1M", 7_077_888),
    ("ablation.uniadapter_r128", _uni(r=128), "4.8M", 4_718_592),
    ("ablation.query_residual_shared",
     AdaptationConfig.for_variant("parallel_adapter", r=512, query_residual=True), "28.4M", 28_311_552),
    ("ablation.uniadapter_r512", _uni(), "19.0M", 18_874_368),
    ("sharing.no_share", _uni("no_share"), "28.4M", 28_311_552),
    ("sharing.share_down", _uni("share_down"), "19.0M", 18_874_368),
    ("sharing.share_up", _uni("share_up"), "19.0M", 18_874_368),
    ("sharing.share_both", _uni("share_both"), "9.5M", 9_437_184),
    ("comparison.sequential_adapter",
     AdaptationConfig.for_variant("sequential_adapter", r=512), "28.4M", 28_311_552),
    ("comparison.parallel_adapter", _adapter("VTC"), "28.4M", 28_311_552),
    ("layers.1-4", _uni(layers=range(1, 5)), "6.3M", 6_291_456),
    ("layers.5-8", _uni(layers=range(5, 9)), "6.3M", 6_291_456),
    ("layers.9-12", _uni(layers=range(9, 13)), "6.3M", 6_291_456),
    ("layers.5-12", _uni(layers=range(5, 13)), "12.7M", 12_582_912),
    ("layers.1-12", _uni(layers=range(1, 13)), "19.0M", 18_874_368),
)


@dataclass(frozen=True)
class CellResult:
    cell: str
    count: int
    expected: int
    rounded: str
    published: str

    @property
    def exact_ok(self):
        return self.count == self.expected

    @property
    def rounding_ok(self):
        return self.rounded == self.published

    def line(self):
        flag = "ok" if self.exact_ok and self.rounding_ok else ("exact-only" if self.exact_ok else "MISMATCH")
        return f"{self.cell:<31} {self.count:>12,d} {self.rounded:>7} published {self.published:>6}  {flag}"


def audit(bcfg: BackboneConfig | None = None):
    bcfg = bcfg or BackboneConfig.full_scale()
    out = []
    for cell, acfg, published, expected in CELLS:
        store = build_parameter_plan(bcfg, acfg, materialize=False)
        n = count_tunable(store).total
        out.append(CellResult(cell, n, expected, format_count(n), published))
    return out
