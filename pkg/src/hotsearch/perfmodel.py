"""Analytical latency/resource model of the tiled convolution accelerator.

One shared engine processes every layer. Per (row, col, out-channel) tile
round the engine runs ceil(N'/Tn) input rounds; each round loads an IFM tile
and a weight tile over their own bandwidth lanes while computing on the
previous round's double-buffered tile, and the output tile is flushed once
per tile round:

    tComp = (K*K - pat) * Tr * Tc                    per round, pipeline II=1
    tI    = ceil(Tn*Tr*Tc*bitI / Ib)                 IFM tile transfer
    tW    = ceil(Tm*Tn*K*K*bitW / Wb)                weight tile transfer
    tO    = ceil(Tm*Tr*Tc*bitO / Ob)                 OFM tile write-back
    Lat1  = max(tComp, tI, tW)
    Lat2  = max(ceil(N'/Tn) * Lat1, tO)
    Lat   = ceil(R/Tr)*ceil(C/Tc)*ceil(M'/Tm) * Lat2 + (tO + Lat1)

with M' = M - cut_out and N' = N - cut_in when channels are pruned.
Depthwise layers run on a dedicated Tm(d)-wide engine with Tn treated as 1;
the communication subsystem and buffers are shared. All quantities are exact
integer cycles; milliseconds are derived display values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .netzoo import DWCONV, NetworkArch

ceil_div = lambda a, b: -(-a // b)  # noqa: E731


class ModelConfigError(ValueError):
    """A stream that is actually used has no bandwidth, or similar misuse."""


class InvalidCompressionError(ValueError):
    """Compression parameters out of range (pattern >= K*K, cut >= channels)."""


class DesignInfeasibleError(ValueError):
    """Design violates an FPGA resource constraint; message names it."""


@dataclass(frozen=True)
class FpgaSpec:
    """Target device resources: DSP count, BRAM blocks (18K-bit each), total
    off-chip bandwidth in bits per cycle, clock."""

    dsp_total: int
    bram_blocks: int
    bw_total_bits_per_cycle: int
    clock_hz: int
    bram_bits_per_block: int = 18 * 1024
    compute_word_bits: int = 16

    def __post_init__(self):
        for f in ("dsp_total", "bram_blocks", "bw_total_bits_per_cycle",
                  "clock_hz", "bram_bits_per_block", "compute_word_bits"):
            if getattr(self, f) <= 0:
                raise ModelConfigError(f"FpgaSpec.{f} must be positive")
        if self.bw_total_bits_per_cycle % self.compute_word_bits != 0:
            raise ModelConfigError("bw_total_bits_per_cycle must be a multiple "
                                   "of compute_word_bits")

    @property
    def total_lanes(self) -> int:
        return self.bw_total_bits_per_cycle // self.compute_word_bits


def zcu102(clock_hz: int = 200_000_000) -> FpgaSpec:
    # 2,520 DSPs; 32.1Mb BRAM as 1,824 18K blocks; 4 HP ports x 128 bits
    return FpgaSpec(dsp_total=2520, bram_blocks=1824,
                    bw_total_bits_per_cycle=512, clock_hz=clock_hz)


@dataclass(frozen=True)
class DataWidths:
    bit_i: int = 16
    bit_w: int = 16
    bit_o: int = 16

    def __post_init__(self):
        for f in ("bit_i", "bit_w", "bit_o"):
            v = getattr(self, f)
            if not 1 <= v <= 32:
                raise ModelConfigError(f"DataWidths.{f} must be in [1, 32]")


@dataclass(frozen=True)
class AcceleratorDesign:
    """Tiling <Tm, Tn, Tr, Tc, Tm(d)> plus bandwidth split <Ib, Ob, Wb> in
    bits per cycle. tm_d = 0 means no depthwise engine."""

    tm: int
    tn: int
    tr: int
    tc: int
    ib_bits: int
    ob_bits: int
    wb_bits: int
    tm_d: int = 0

    def __post_init__(self):
        if min(self.tm, self.tn, self.tr, self.tc) < 1 or self.tm_d < 0:
            raise ModelConfigError("tile parameters must be positive (tm_d >= 0)")
        if min(self.ib_bits, self.ob_bits, self.wb_bits) < 1:
            raise ModelConfigError("bandwidth allocations must be positive")

    def lanes(self, word_bits: int = 16) -> tuple[int, int, int]:
        return (self.ib_bits // word_bits, self.ob_bits // word_bits,
                self.wb_bits // word_bits)


def design_from_lanes(tm: int, tn: int, tr: int, tc: int,
                      i_lanes: int, o_lanes: int, w_lanes: int,
                      word_bits: int = 16, tm_d: int = 0) -> AcceleratorDesign:
    """Convenience constructor: bandwidth given as lane counts of word_bits each."""
    return AcceleratorDesign(tm, tn, tr, tc, i_lanes * word_bits,
                             o_lanes * word_bits, w_lanes * word_bits, tm_d)


@dataclass(frozen=True)
class LayerCompression:
    """Per-layer latency-visible compression effects."""
    pat_zeros: int = 0     # pruned positions per pattern mask
    cut_in: int = 0        # channels cut on the input node
    cut_out: int = 0       # channels cut on the output node
    bit_w: int | None = None   # weight bit-width override (quantization)
    k_expand: int = 0      # filter expansion (even, latency-checked upstream)


NO_COMPRESSION = LayerCompression()


@dataclass(frozen=True)
class LatencyBreakdown:
    t_comp: int
    t_i: int
    t_w: int
    t_o: int
    lat1: int
    lat2: int
    lat_total: int
    trips: int      # ceil(R/Tr)*ceil(C/Tc)*ceil(M'/Tm)
    rounds: int     # ceil(N'/Tn)
    lat_ms: float | None = None

    def ms(self, clock_hz: int) -> float:
        return self.lat_total / clock_hz * 1e3


# ---------------------------------------------------------------------------
# tile-level pieces
# ---------------------------------------------------------------------------

def tile_compute_cycles(k: int, tr: int, tc: int, pat_zeros: int = 0) -> int:
    """Compute cycles to drain one loaded tile; pattern pruning skips the
    masked positions in the outer K*K walk."""
    if not 0 <= pat_zeros < k * k:
        raise InvalidCompressionError(
            f"pattern zeros {pat_zeros} out of range for k={k}")
    return (k * k - pat_zeros) * tr * tc


def buffer_blocks(design: AcceleratorDesign, k: int, widths: DataWidths,
                  block_bits: int = 18 * 1024,
                  depthwise: bool = False) -> tuple[int, int, int, int]:
    """Double-buffered BRAM block counts (bI, bO, bW, total). Channel-parallel
    dims occupy distinct blocks; only the sequential Tr*Tc (or K*K) payload is
    packed into a block."""
    tm, tn = (design.tm_d, 1) if depthwise else (design.tm, design.tn)
    b_i = 2 * tn * ceil_div(design.tr * design.tc * widths.bit_i, block_bits)
    b_o = 2 * tm * ceil_div(design.tr * design.tc * widths.bit_o, block_bits)
    b_w = 2 * tm * tn * ceil_div(k * k * widths.bit_w, block_bits)
    return b_i, b_o, b_w, b_i + b_o + b_w


def tile_transfer_cycles(design: AcceleratorDesign, k: int, widths: DataWidths,
                         depthwise: bool = False) -> tuple[int, int, int]:
    """Cycles to move one IFM tile, one weight tile, one OFM tile over the
    allocated bandwidth split: (t_i, t_w, t_o)."""
    tm, tn = (design.tm_d, 1) if depthwise else (design.tm, design.tn)
    if depthwise and tm < 1:
        raise ModelConfigError("depthwise layer but design has no tm_d engine")
    t_i = ceil_div(tn * design.tr * design.tc * widths.bit_i, design.ib_bits)
    t_w = ceil_div(tm * tn * k * k * widths.bit_w, design.wb_bits)
    t_o = ceil_div(tm * design.tr * design.tc * widths.bit_o, design.ob_bits)
    return t_i, t_w, t_o


# ---------------------------------------------------------------------------
# layer / network latency
# ---------------------------------------------------------------------------

def layer_latency(m: int, n: int, r: int, c: int, k: int,
                  design: AcceleratorDesign, widths: DataWidths = DataWidths(),
                  comp: LayerCompression = NO_COMPRESSION,
                  depthwise: bool = False,
                  clock_hz: int | None = None) -> LatencyBreakdown:
    """Full latency breakdown of one convolution layer on the given design."""
    k_eff = k + comp.k_expand
    if comp.bit_w is not None:
        widths = replace(widths, bit_w=comp.bit_w)
    m_eff = m - comp.cut_out
    n_eff = n - comp.cut_in
    if m_eff < 1 or n_eff < 1:
        raise InvalidCompressionError(
            f"cut leaves non-positive channels (M {m}->{m_eff}, N {n}->{n_eff})")
    tm, tn = (design.tm_d, 1) if depthwise else (design.tm, design.tn)
    if tm < 1:
        raise ModelConfigError("depthwise layer but design has no tm_d engine")
    t_comp = tile_compute_cycles(k_eff, design.tr, design.tc, comp.pat_zeros)
    t_i, t_w, t_o = tile_transfer_cycles(design, k_eff, widths, depthwise)
    lat1 = max(t_comp, t_i, t_w)
    rounds = ceil_div(n_eff, tn)
    lat2 = max(rounds * lat1, t_o)
    trips = ceil_div(r, design.tr) * ceil_div(c, design.tc) * ceil_div(m_eff, tm)
    lat = trips * lat2 + (t_o + lat1)  # one-time pipeline fill/drain tail
    return LatencyBreakdown(t_comp, t_i, t_w, t_o, lat1, lat2, lat,
                            trips, rounds,
                            lat / clock_hz * 1e3 if clock_hz else None)


def validate_design(design: AcceleratorDesign, fpga: FpgaSpec,
                    k_max: int, widths: DataWidths,
                    has_depthwise: bool = False) -> None:
    """Check the DSP, bandwidth, and worst-case-layer buffer constraints;
    raises DesignInfeasibleError naming the binding constraint."""
    if design.tm * design.tn + design.tm_d > fpga.dsp_total:
        raise DesignInfeasibleError(
            f"dsp: tm*tn + tm_d = {design.tm * design.tn + design.tm_d} "
            f"> {fpga.dsp_total}")
    total_bw = design.ib_bits + design.ob_bits + design.wb_bits
    if total_bw > fpga.bw_total_bits_per_cycle:
        raise DesignInfeasibleError(
            f"bandwidth: Ib+Ob+Wb = {total_bw} bits/cycle "
            f"> {fpga.bw_total_bits_per_cycle}")
    *_, total = buffer_blocks(design, k_max, widths, fpga.bram_bits_per_block)
    if has_depthwise and design.tm_d > 0:
        *_, total_dw = buffer_blocks(design, k_max, widths,
                                     fpga.bram_bits_per_block, depthwise=True)
        total = max(total, total_dw)
    if total > fpga.bram_blocks:
        raise DesignInfeasibleError(
            f"bram: {total} blocks > {fpga.bram_blocks}")
    if has_depthwise and design.tm_d < 1:
        raise DesignInfeasibleError("dsp: network has depthwise layers but "
                                    "design allocates no tm_d engine")


def network_latency(net: NetworkArch, design: AcceleratorDesign,
                    widths: DataWidths = DataWidths(),
                    compression: dict[int, LayerCompression] | None = None,
                    fpga: FpgaSpec | None = None,
                    clock_hz: int | None = None,
                    ) -> tuple[LatencyBreakdown, list[tuple[int, LatencyBreakdown]]]:
    """Sum of per-layer latencies under one shared design.

    Pool/linear ops contribute zero cycles unless they carry an explicit
    fixed_latency_cycles. When fpga is given, the design is validated against
    its resources first (buffer check uses the worst-case layer).
    """
    compression = compression or {}
    convs = net.conv_ops()
    if fpga is not None:
        k_max = max((op.k + compression.get(i, NO_COMPRESSION).k_expand
                     for i, op in convs), default=1)
        validate_design(design, fpga, k_max, widths,
                        has_depthwise=any(op.kind == DWCONV for _, op in convs))
        clock_hz = clock_hz or fpga.clock_hz
    per_layer = []
    total = 0
    for i, op in enumerate(net.ops):
        if op.is_conv:
            m, n, r, c, k = net.layer_dims(i)
            bd = layer_latency(m, n, r, c, k, design, widths,
                               compression.get(i, NO_COMPRESSION),
                               depthwise=(op.kind == DWCONV),
                               clock_hz=clock_hz)
        elif op.fixed_latency_cycles:
            fx = int(op.fixed_latency_cycles)
            bd = LatencyBreakdown(0, 0, 0, 0, 0, 0, fx, 0, 0,
                                  fx / clock_hz * 1e3 if clock_hz else None)
        else:
            continue
        per_layer.append((i, bd))
        total += bd.lat_total
    total_bd = LatencyBreakdown(0, 0, 0, 0, 0, 0, total, 0, 0,
                                total / clock_hz * 1e3 if clock_hz else None)
    return total_bd, per_layer


# ---------------------------------------------------------------------------
# cycle-approximate simulator (independent oracle for the closed form)
# ---------------------------------------------------------------------------

def simulate_layer(m: int, n: int, r: int, c: int, k: int,
                   design: AcceleratorDesign, widths: DataWidths = DataWidths(),
                   comp: LayerCompression = NO_COMPRESSION,
                   depthwise: bool = False) -> int:
    """Event-driven walk of the pipeline: IFM/weight streams on their own
    lanes, double-buffered tiles so loads overlap the previous round's
    compute, OFM flushed once per tile round on its own lane with a
    double-buffered output tile. Returns total cycles."""
    k_eff = k + comp.k_expand
    if comp.bit_w is not None:
        widths = replace(widths, bit_w=comp.bit_w)
    m_eff = m - comp.cut_out
    n_eff = n - comp.cut_in
    if m_eff < 1 or n_eff < 1:
        raise InvalidCompressionError("cut leaves non-positive channels")
    tm, tn = (design.tm_d, 1) if depthwise else (design.tm, design.tn)
    if tm < 1:
        raise ModelConfigError("depthwise layer but design has no tm_d engine")
    t_comp = tile_compute_cycles(k_eff, design.tr, design.tc, comp.pat_zeros)
    t_i, t_w, t_o = tile_transfer_cycles(design, k_eff, widths, depthwise)
    trips = ceil_div(r, design.tr) * ceil_div(c, design.tc) * ceil_div(m_eff, tm)
    rounds = ceil_div(n_eff, tn)

    i_port = 0      # time each stream's lane frees up
    w_port = 0
    o_port = 0
    comp_end = [0, 0]       # per ping-pong input buffer: compute that read it
    write_end = [0, 0]      # per ping-pong output buffer: flush that drained it
    last_comp = 0
    g = 0
    for trip in range(trips):
        out_slot = trip % 2
        first_of_trip = True
        for _ in range(rounds):
            slot = g % 2
            # loads for round g reuse the buffer freed by compute g-2
            i_start = max(i_port, comp_end[slot])
            i_port = i_start + t_i
            w_start = max(w_port, comp_end[slot])
            w_port = w_start + t_w
            start = max(last_comp, i_port, w_port)
            if first_of_trip:
                # output tile must have been flushed before accumulating anew
                start = max(start, write_end[out_slot])
                first_of_trip = False
            last_comp = start + t_comp
            comp_end[slot] = last_comp
            g += 1
        flush_start = max(o_port, last_comp)
        o_port = flush_start + t_o
        write_end[out_slot] = o_port
    return o_port


# ---------------------------------------------------------------------------
# design search
# ---------------------------------------------------------------------------

TILE_CANDIDATES = (7, 8, 10, 13, 14, 16, 26, 28, 32, 56, 64)


def _breakpoints(sizes: list[int], cap: int) -> list[int]:
    """Efficient tile sizes for a ceil-div trip count: for every layer size S
    and trip count j, ceil(S/j) is the smallest tile giving j trips. Any value
    between breakpoints has the same trips but larger buffers/transfers."""
    pts = set()
    for s in sizes:
        for j in range(1, s + 1):
            v = ceil_div(s, j)
            if v <= cap:
                pts.add(v)
            if v == 1:
                break
    return sorted(pts)


def spatial_candidates(net: NetworkArch) -> list[int]:
    max_r = max((max(net.layer_dims(i)[2], net.layer_dims(i)[3])
                 for i, _ in net.conv_ops()), default=1)
    cands = [t for t in TILE_CANDIDATES if t <= max_r]
    return cands or [max_r]


def lane_splits(total_lanes: int) -> list[tuple[int, int, int]]:
    """All (i, o, w) lane splits using the full budget, each stream >= 1."""
    out = []
    for i in range(1, total_lanes - 1):
        for o in range(1, total_lanes - i):
            out.append((i, o, total_lanes - i - o))
    return out


def optimize_design(net: NetworkArch, fpga: FpgaSpec,
                    widths: DataWidths = DataWidths(),
                    fixed: AcceleratorDesign | None = None,
                    fix_tiles: bool = False,
                    fix_lanes: bool = False) -> AcceleratorDesign:
    """Exhaustive search (over ceil-equivalence breakpoints) for the design
    minimizing total network latency subject to the DSP, bandwidth, and
    buffer constraints. Ties break lexicographically by (lat, tm, tn).

    `fixed` + fix_tiles/fix_lanes pin parts of a reference design and search
    only the rest (used to pick tr/tc for a published tm/tn/lane split).
    """
    convs = net.conv_ops()
    if not convs:
        raise DesignInfeasibleError("network has no convolution layers")
    word = fpga.compute_word_bits
    ms = [net.layer_dims(i)[0] for i, op in convs if op.kind != DWCONV]
    ns = [net.layer_dims(i)[1] for i, op in convs if op.kind != DWCONV]
    dws = [net.layer_dims(i)[0] for i, op in convs if op.kind == DWCONV]
    k_max = max(op.k for _, op in convs)

    if fix_tiles and fixed is not None:
        tm_cands = [fixed.tm]
        tn_cands = [fixed.tn]
        tmd_cands = [fixed.tm_d]
        tr_cands = [fixed.tr]
        tc_cands = [fixed.tc]
    else:
        tm_cands = _breakpoints(ms, fpga.dsp_total) or [1]
        tn_cands = _breakpoints(ns, fpga.dsp_total) or [1]
        tmd_cands = _breakpoints(dws, fpga.dsp_total) if dws else [0]
        tr_cands = tc_cands = spatial_candidates(net)
    if fix_lanes and fixed is not None:
        splits = [fixed.lanes(word)]
    else:
        splits = lane_splits(fpga.total_lanes)

    best = None
    best_key = None
    binding = set()
    for tm in tm_cands:
        for tn in tn_cands:
            for tm_d in tmd_cands:
                if tm * tn + tm_d > fpga.dsp_total:
                    binding.add("dsp")
                    continue
                for tr in tr_cands:
                    for tc in tc_cands:
                        probe = AcceleratorDesign(tm, tn, tr, tc,
                                                  word, word, word, tm_d)
                        *_, blocks = buffer_blocks(probe, k_max, widths,
                                                   fpga.bram_bits_per_block)
                        if blocks > fpga.bram_blocks:
                            binding.add("bram")
                            continue
                        for (li, lo, lw) in splits:
                            d = design_from_lanes(tm, tn, tr, tc, li, lo, lw,
                                                  word, tm_d)
                            try:
                                total, _ = network_latency(net, d, widths)
                            except (ModelConfigError, InvalidCompressionError):
                                continue
                            key = (total.lat_total, tm, tn, tm_d, tr, tc,
                                   -li, -lo, -lw)
                            if best_key is None or key < best_key:
                                best_key = key
                                best = d
    if best is None:
        raise DesignInfeasibleError(
            "no feasible design; binding constraints: "
            + (", ".join(sorted(binding)) or "dsp/bram too small for any tile"))
    return best
