"""Parameter and FLOP accounting plus a wall-clock head-cost benchmark.

The analytic counter walks the same layer arithmetic the builders use and
reports exact multiply-accumulate counts (bias additions tracked separately).
Normalization, activations, and interpolation are not counted: the
architectures under comparison share them almost one-for-one, and the claim
being measured is about convolution work.

Wall times measure segmenting all m tasks on a single input, per
architecture, as medians over repeated runs after one warm-up pass.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .model import (
    OUT_CHANNELS,
    ModelConfig,
    build_model,
    head_layer_shapes,
    head_param_count,
)
from .tensor import Tensor

ARCHITECTURES = ("dodnet", "multi_head", "cond_input")
CSV_HEADER = "arch,tasks,params,macs,bias_adds,median_seconds,head_backbone_ratio"


@dataclass(frozen=True)
class FlopCount:
    """Exact per-component multiply-accumulate and bias-add counts."""

    macs: Dict[str, int]
    adds: Dict[str, int]

    @property
    def total_macs(self) -> int:
        return sum(self.macs.values())

    @property
    def total_adds(self) -> int:
        return sum(self.adds.values())


def _level_voxels(input_shape: Sequence[int], level: int) -> int:
    return int(np.prod([n // 2**level for n in input_shape]))


def _encoder_flops(
    config: ModelConfig, input_shape: Sequence[int], in_channels: int
) -> Tuple[int, int]:
    schedule = config.channel_schedule()
    macs = 0
    adds = 0
    prev = in_channels
    for level, ch in enumerate(schedule):
        v = _level_voxels(input_shape, level)
        macs += v * ch * prev * 27      # conv1 (carries the stride)
        macs += v * ch * ch * 27        # conv2
        adds += 2 * v * ch
        if prev != ch or level > 0:     # identity projection
            macs += v * ch * prev
            adds += v * ch
        prev = ch
    return macs, adds


def _decoder_flops(
    config: ModelConfig,
    input_shape: Sequence[int],
    out_channels: int,
    width_divisor: int = 1,
) -> Tuple[int, int]:
    schedule = config.channel_schedule()
    macs = 0
    adds = 0
    prev = schedule[-1]
    for step in range(config.num_downsamples):
        level = config.num_downsamples - 1 - step
        skip_ch = schedule[level]
        width = max(1, skip_ch // width_divisor)
        v = _level_voxels(input_shape, level)
        macs += v * width * prev        # 1x1x1 after upsampling
        adds += v * width
        if width != skip_ch:            # skip projection
            macs += v * width * skip_ch
            adds += v * width
        macs += 2 * v * width * width * 27  # residual block convs
        adds += 2 * v * width
        prev = width
    v0 = _level_voxels(input_shape, 0)
    macs += v0 * out_channels * prev
    adds += v0 * out_channels
    return macs, adds


def _head_flops(config: ModelConfig, input_shape: Sequence[int]) -> Tuple[int, int]:
    v0 = _level_voxels(input_shape, 0)
    macs_per_voxel = sum(cin * cout for cin, cout in head_layer_shapes(config))
    adds_per_voxel = sum(cout for _, cout in head_layer_shapes(config))
    return v0 * macs_per_voxel, v0 * adds_per_voxel


def _controller_flops(config: ModelConfig) -> Tuple[int, int]:
    fan_in = config.bottleneck_channels + config.num_tasks
    out = head_param_count(config)
    return fan_in * out, out


def count_flops(
    config: ModelConfig, input_shape: Sequence[int], arch: str, num_tasks: int
) -> FlopCount:
    """MAC counts for segmenting all ``num_tasks`` structures on one input."""
    if any(n % 2**config.num_downsamples for n in input_shape):
        raise ValueError(
            f"input {tuple(input_shape)} not divisible by 2**{config.num_downsamples}"
        )
    if arch == "dodnet":
        enc = _encoder_flops(config, input_shape, config.in_channels)
        dec = _decoder_flops(config, input_shape, config.pre_seg_channels)
        ctrl = _controller_flops(config)
        head = _head_flops(config, input_shape)
        return FlopCount(
            macs={
                "encoder": enc[0],
                "decoder": dec[0],
                "controller": num_tasks * ctrl[0],
                "heads": num_tasks * head[0],
            },
            adds={
                "encoder": enc[1],
                "decoder": dec[1],
                "controller": num_tasks * ctrl[1],
                "heads": num_tasks * head[1],
            },
        )
    if arch == "multi_head":
        enc = _encoder_flops(config, input_shape, config.in_channels)
        dec = _decoder_flops(config, input_shape, OUT_CHANNELS, width_divisor=2)
        return FlopCount(
            macs={"encoder": enc[0], "decoders": num_tasks * dec[0]},
            adds={"encoder": enc[1], "decoders": num_tasks * dec[1]},
        )
    if arch == "cond_input":
        enc = _encoder_flops(config, input_shape, config.in_channels + num_tasks)
        dec = _decoder_flops(config, input_shape, config.pre_seg_channels)
        head = _head_flops(config, input_shape)
        return FlopCount(
            macs={
                "encoder": num_tasks * enc[0],
                "decoder": num_tasks * dec[0],
                "heads": num_tasks * head[0],
            },
            adds={
                "encoder": num_tasks * enc[1],
                "decoder": num_tasks * dec[1],
                "heads": num_tasks * head[1],
            },
        )
    raise ValueError(f"unknown architecture {arch!r}")


def count_params(config: ModelConfig, arch: str) -> int:
    """Exact learnable parameter count, taken from a built instance."""
    return build_model(arch, config).param_count()


def head_backbone_ratio(
    config: ModelConfig, input_shape: Sequence[int], num_tasks: int
) -> float:
    """All m controller+head MACs relative to one encoder-decoder pass."""
    flops = count_flops(config, input_shape, "dodnet", num_tasks)
    backbone = flops.macs["encoder"] + flops.macs["decoder"]
    dynamic = flops.macs["controller"] + flops.macs["heads"]
    return dynamic / backbone


@dataclass
class BenchRow:
    arch: str
    tasks: int
    params: int
    macs: int
    bias_adds: int
    median_seconds: float
    head_backbone_ratio: float


@dataclass
class BenchReport:
    input_shape: Tuple[int, int, int]
    repetitions: int
    parallel: bool
    rows: List[BenchRow]

    def csv_lines(self) -> List[str]:
        lines = [CSV_HEADER]
        for r in self.rows:
            lines.append(
                f"{r.arch},{r.tasks},{r.params},{r.macs},{r.bias_adds},"
                f"{r.median_seconds:.6f},{r.head_backbone_ratio:.6f}"
            )
        return lines

    def table(self) -> str:
        header = (
            f"{'arch':<12}{'params':>12}{'MACs':>16}{'median s':>12}{'head/backbone':>15}"
        )
        rows = [
            f"{r.arch:<12}{r.params:>12}{r.macs:>16}{r.median_seconds:>12.4f}"
            f"{r.head_backbone_ratio:>15.6f}"
            for r in self.rows
        ]
        shape = "x".join(str(n) for n in self.input_shape)
        mode = "parallel" if self.parallel else "single-thread request"
        title = (
            f"segment-all-{self.rows[0].tasks}-tasks on {shape} "
            f"({self.repetitions} reps, {mode})"
        )
        return "\n".join([title, header] + rows)


def run_bench(
    config: ModelConfig,
    num_tasks: int,
    input_shape: Sequence[int],
    repetitions: int = 5,
    parallel: bool = False,
    seed: int = 0,
) -> BenchReport:
    """Time all three architectures segmenting every task on one volume."""
    if repetitions < 1:
        raise ValueError(f"repetitions must be >= 1, got {repetitions}")
    if config.num_tasks != num_tasks:
        raise ValueError(
            f"config builds {config.num_tasks} tasks but the benchmark was asked "
            f"to time {num_tasks}"
        )
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(1, 1) + tuple(input_shape)).astype(np.float32))
    ratio = head_backbone_ratio(config, input_shape, num_tasks)
    rows = []
    for arch in ARCHITECTURES:
        try:
            model = build_model(arch, config, seed=seed)
            model.segment_all_tasks(x)  # warm-up
            times = []
            for _ in range(repetitions):
                t0 = time.perf_counter()
                model.segment_all_tasks(x)
                times.append(time.perf_counter() - t0)
        except MemoryError as exc:
            raise MemoryError(
                f"benchmark ran out of memory building or running {arch!r} "
                f"at input {tuple(input_shape)}"
            ) from exc
        flops = count_flops(config, input_shape, arch, num_tasks)
        rows.append(
            BenchRow(
                arch=arch,
                tasks=num_tasks,
                params=model.param_count(),
                macs=flops.total_macs,
                bias_adds=flops.total_adds,
                median_seconds=float(np.median(times)),
                head_backbone_ratio=ratio if arch == "dodnet" else float("nan"),
            )
        )
    return BenchReport(
        input_shape=tuple(input_shape),
        repetitions=repetitions,
        parallel=parallel,
        rows=rows,
    )
