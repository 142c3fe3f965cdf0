"""Analytic operation counts for the backbone and attention variants.

All counts are exact integers; GFLOP figures are derived at display time.
The default convention (one multiply-accumulate = one FLOP, attention cost =
score/value contractions only, positional-embedding terms at the shared
embedding width) is the calibrated best fit for the published cost column;
``calibrate`` sweeps the convention grid and reports each candidate's errors.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import attention as att
from .errors import ValidationError
from .tensor import Rng

# published cost column used for calibration (GFLOPs)
REFERENCE_COSTS = {
    "baseline": 24.520,
    "nonlocal3d": 17.213,
    "axial": 0.361,
    "axial+sinusoidal": 0.377,
    "axial+relative": 0.424,
    "cfaa2": 0.245,
    "cfaa4": 0.126,
    "nonlocal_total": 41.733,
    "cfaa_net_total": 24.646,
}

VARIANTS = ("nonlocal3d", "axial", "axial+sinusoidal", "axial+relative", "cfaa")

# insertion points for the 256x128 backbone: (channels, H, W, module count)
INSERTIONS = ((512, 32, 16, 2), (1024, 16, 8, 3))
TOTAL_HEADS = 8


@dataclass(frozen=True)
class CountingConvention:
    """Accounting rules for a report; recorded in every FlopReport.

    positional_shared_heads: divisor applied to embedding widths when counting
    q/k/v positional contractions once per pair (None counts them per head at
    full width, matching what the kernels actually execute).
    """

    macs_per_flop: int = 1
    include_softmax_exp: bool = False
    include_bn_relu: bool = False
    include_projections: bool = False
    positional_shared_heads: int | None = TOTAL_HEADS

    def tag(self) -> str:
        ps = "perhead" if self.positional_shared_heads is None else f"shared{self.positional_shared_heads}"
        return (
            f"mac{self.macs_per_flop}"
            f"{'+softmax' if self.include_softmax_exp else ''}"
            f"{'+bnrelu' if self.include_bn_relu else ''}"
            f"{'+proj' if self.include_projections else ''}"
            f"+{ps}"
        )


KERNEL_EXACT = CountingConvention(positional_shared_heads=None)


@dataclass
class LayerSpec:
    kind: str
    name: str
    ops: int  # raw MAC / op count before the macs_per_flop factor

    def __post_init__(self):
        if self.ops < 0:
            raise ValidationError(f"negative op count in layer {self.name}")


@dataclass
class FlopReport:
    name: str
    layers: list[LayerSpec]
    convention: CountingConvention
    baseline_name: str | None = None
    baseline_total: int | None = None

    @property
    def total(self) -> int:
        return sum(l.ops for l in self.layers) * self.convention.macs_per_flop

    @property
    def gflops(self) -> float:
        return self.total / 1e9

    @property
    def delta(self) -> int | None:
        if self.baseline_total is None:
            return None
        return self.total - self.baseline_total

    def lines(self) -> list[str]:
        out = [f"report={self.name}", f"convention={self.convention.tag()}", f"total_flops={self.total}", f"gflops={self.gflops:.6f}"]
        if self.baseline_total is not None:
            out.append(f"baseline={self.baseline_name}")
            out.append(f"delta_flops={self.delta}")
            out.append(f"delta_gflops={self.delta / 1e9:.6f}")
        return out


def _conv(cin, cout, k, ho, wo) -> int:
    return k * k * cin * cout * ho * wo


def backbone_flops(frames: int = 6, height: int = 256, width: int = 128, last_stride: int = 1,
                   convention: CountingConvention = CountingConvention()) -> FlopReport:
    """50-layer residual backbone (bottleneck blocks, stride on the 3x3 conv),
    per-frame 2D convolutions multiplied by the number of frames."""
    if last_stride not in (1, 2):
        raise ValidationError(f"last_stride must be 1 or 2, got {last_stride}")
    layers: list[LayerSpec] = []
    act_elems = 0  # conv output elements, for the bn/relu option

    def add(name, cin, cout, k, ho, wo):
        nonlocal act_elems
        layers.append(LayerSpec("conv", name, frames * _conv(cin, cout, k, ho, wo)))
        act_elems += frames * cout * ho * wo

    h, w = (height + 1) // 2, (width + 1) // 2
    add("conv1", 3, 64, 7, h, w)
    h, w = (h + 1) // 2, (w + 1) // 2  # 3x3/2 max pool
    cin = 64
    stages = [(3, 64, 1, "conv2"), (4, 128, 2, "conv3"), (6, 256, 2, "conv4"), (3, 512, last_stride, "conv5")]
    for blocks, width_s, stride, tag in stages:
        for b in range(blocks):
            s = stride if b == 0 else 1
            ho, wo = h // s, w // s
            add(f"{tag}_{b + 1}.reduce", cin, width_s, 1, h, w)
            add(f"{tag}_{b + 1}.conv3x3", width_s, width_s, 3, ho, wo)
            add(f"{tag}_{b + 1}.expand", width_s, width_s * 4, 1, ho, wo)
            if b == 0:
                add(f"{tag}_{b + 1}.downsample", cin, width_s * 4, 1, ho, wo)
            cin = width_s * 4
            h, w = ho, wo
    if convention.include_bn_relu:
        layers.append(LayerSpec("bn", "bn+relu", 3 * act_elems))
    return FlopReport("backbone", layers, convention)


def _axial_module_ops(c_in, t, h, w, scales, encoding, convention: CountingConvention) -> int:
    """Score/value contraction count of one coarse-to-fine axial module
    (scales=1 gives the single-scale module), plus optional projection cost."""
    heads_per_scale = max(TOTAL_HEADS // scales, 1)
    ops = 0
    for s in range(scales):
        f = 2**s
        hs, ws = -(-h // f), -(-w // f)
        n = t * hs * ws
        lsum = hs + ws + t
        cs = c_in // scales
        cqk, cout = cs // 2, cs
        ops += n * lsum * (cqk + cout)
        shared = convention.positional_shared_heads
        if encoding == "relative":
            if shared is None:
                ops += n * lsum * (2 * cqk + cout)
            else:
                ops += n * lsum * (2 * (cqk // shared) + cout // shared)
        elif encoding == "sinusoidal":
            if shared is not None:
                ops += n * lsum * (cqk // shared)
            # per-head mode: encodings are added to q/k, no extra contraction
        if convention.include_projections:
            # q/k/v for AA^H (from cs) and for AA^W, AA^T (from cout)
            ops += n * (cs + 2 * cout) * (2 * cqk + cout)
        if convention.include_softmax_exp:
            ops += 4 * n * lsum * heads_per_scale
    if convention.include_projections:
        # single projection from the concatenated c_out back to c_in
        ops += (t * h * w) * c_in * c_in
    return ops


def _nonlocal_module_ops(c_in, t, h, w, convention: CountingConvention) -> int:
    n = t * h * w
    cqk, cout = c_in // 2, c_in
    ops = n * n * (cqk + cout)
    if convention.include_projections:
        ops += n * c_in * (2 * cqk + cout) + n * cout * c_in
    if convention.include_softmax_exp:
        ops += 4 * n * n
    return ops


def attention_flops(variant: str, convention: CountingConvention = CountingConvention(),
                    scales: int = 1, frames: int = 6, insertions=INSERTIONS) -> FlopReport:
    """Cost of inserting the given attention variant at the standard points
    (2 modules on the 32x16 stage, 3 on the 16x8 stage for the 256x128 input)."""
    if variant == "cfaa":
        encoding = "relative"
    elif variant == "nonlocal3d":
        encoding, scales = "none", 1
    elif variant == "axial":
        encoding, scales = "none", 1
    elif variant == "axial+sinusoidal":
        encoding, scales = "sinusoidal", 1
    elif variant == "axial+relative":
        encoding, scales = "relative", 1
    else:
        raise ValidationError(f"unknown attention variant {variant!r}")
    layers = []
    for c, h, w, count in insertions:
        if variant == "nonlocal3d":
            ops = _nonlocal_module_ops(c, frames, h, w, convention)
        else:
            ops = _axial_module_ops(c, frames, h, w, scales, encoding, convention)
        layers.append(LayerSpec("attention", f"{variant}@c{c}_{h}x{w}(x{count})", count * ops))
    return FlopReport(variant if variant != "cfaa" else f"cfaa{scales}", layers, convention)


def attention_contraction_count(variant: str, cfg: att.AttentionConfig) -> int:
    """Exact multiply count of the score/value contractions the kernels execute
    for one module at the given config (the analytic side of the kernel check)."""
    t, h, w = cfg.axis_lengths
    n = t * h * w
    if variant == "nonlocal3d":
        return n * n * (cfg.c_qk + cfg.c_out)
    if variant not in ("axial", "axial+sinusoidal", "axial+relative", "cfaa"):
        raise ValidationError(f"unknown attention variant {variant!r}")
    total = 0
    for s in range(cfg.scales):
        ts, hs, ws = cfg.scale_extents(s)
        ns = ts * hs * ws
        lsum = hs + ws + ts
        cqk = cfg.c_qk // cfg.scales
        cout = cfg.c_out // cfg.scales
        per_pair = cfg.c_qk // cfg.scales + cout
        if cfg.encoding == "relative":
            per_pair = 3 * cqk + 2 * cout
        total += ns * lsum * per_pair
    return total


def count_oracle_multiplies(variant: str, cfg: att.AttentionConfig, seed: int = 0) -> int:
    """Execute the attention kernels at the given config with an instrumented
    multiply counter; returns the measured score/value contraction multiplies."""
    rng = Rng(seed)
    x = rng.child(0).normal((cfg.c_in, *cfg.axis_lengths))
    if variant == "nonlocal3d":
        params = att.init_nonlocal_params(cfg, rng.child(1))
        with att.count_multiplies() as counter:
            att.nonlocal_3d_forward(x, params, cfg)
        return counter.total
    params = att.init_cfaa_params(cfg, rng.child(1))
    with att.count_multiplies() as counter:
        att.cfaa_forward(x, params, cfg)
    return counter.total


PRESETS = ("baseline", "nonlocal", "cfaa_net")


def model_table(presets=PRESETS, convention: CountingConvention = CountingConvention(),
                frames: int = 6) -> list[FlopReport]:
    """Full-model totals for the named architecture presets."""
    base = backbone_flops(frames=frames, convention=convention)
    out = []
    for preset in presets:
        if preset == "baseline":
            out.append(FlopReport("baseline", list(base.layers), convention))
        elif preset == "nonlocal":
            extra = attention_flops("nonlocal3d", convention, frames=frames)
            out.append(FlopReport("nonlocal", base.layers + extra.layers, convention,
                                  baseline_name="baseline", baseline_total=base.total))
        elif preset == "cfaa_net":
            extra = attention_flops("cfaa", convention, scales=4, frames=frames)
            out.append(FlopReport("cfaa_net", base.layers + extra.layers, convention,
                                  baseline_name="baseline", baseline_total=base.total))
        else:
            raise ValidationError(f"unknown preset {preset!r}")
    return out


def table_rows(convention: CountingConvention = CountingConvention()) -> dict[str, FlopReport]:
    """The cost-column rows: backbone plus each attention variant's delta."""
    rows = {"baseline": backbone_flops(convention=convention)}
    rows["nonlocal3d"] = attention_flops("nonlocal3d", convention)
    rows["axial"] = attention_flops("axial", convention)
    rows["axial+sinusoidal"] = attention_flops("axial+sinusoidal", convention)
    rows["axial+relative"] = attention_flops("axial+relative", convention)
    rows["cfaa2"] = attention_flops("cfaa", convention, scales=2)
    rows["cfaa4"] = attention_flops("cfaa", convention, scales=4)
    return rows


def row_errors(convention: CountingConvention) -> dict[str, float]:
    """Relative error of every cost row against the reference column."""
    rows = table_rows(convention)
    return {name: rows[name].gflops / REFERENCE_COSTS[name] - 1.0 for name in rows}


def convention_grid() -> list[CountingConvention]:
    grid = []
    for mac in (1, 2):
        for soft in (False, True):
            for bn in (False, True):
                for proj in (False, True):
                    for shared in (TOTAL_HEADS, None):
                        grid.append(CountingConvention(mac, soft, bn, proj, shared))
    return grid


def calibrate() -> list[tuple[CountingConvention, float]]:
    """Sweep the convention grid; returns (convention, worst row error) sorted
    best-first. The best fit is what the default convention should be."""
    scored = []
    for conv in convention_grid():
        errs = row_errors(conv)
        scored.append((conv, max(abs(e) for e in errs.values())))
    scored.sort(key=lambda ce: ce[1])
    return scored
