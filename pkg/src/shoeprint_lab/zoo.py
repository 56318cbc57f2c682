"""Graph builders for ShoeNet and its comparison variants."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .graph import ModelGraph, Node

ARCHS = (
    "shoenet", "lr",
    "fm-early", "fm-in", "fm-late",
    "mm-early", "mm-mid", "mm-late",
    "gender",
)
REGRESSION_ARCHS = tuple(a for a in ARCHS if a != "gender")
FULL_FC = (384, 384, 384)
FULL_GENDER_FC = (512, 384, 256)


@dataclass(frozen=True)
class ArchConfig:
    input_hw: tuple = (64, 64)
    base_filters: int = 8
    blocks: int = 3
    convs_per_block: int = 3
    fc_widths: tuple = (64, 64, 64)
    dropout_rates: tuple = (0.30, 0.40, 0.50)
    scale: int = 1
    bn_momentum: float = 0.9
    eps_bn: float = 1e-5
    se_reduction: int = 4
    mm_noise_sigma: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "input_hw", tuple(int(v) for v in self.input_hw))
        object.__setattr__(self, "fc_widths", tuple(int(v) for v in self.fc_widths))
        object.__setattr__(self, "dropout_rates", tuple(float(v) for v in self.dropout_rates))
        if self.blocks < 2:
            raise ValueError("blocks must be at least 2")
        if len(self.dropout_rates) != len(self.fc_widths):
            raise ValueError("dropout_rates and fc_widths must have equal length")
        if self.scale < 1:
            raise ValueError("scale must be a positive divisor")

    @classmethod
    def full(cls, input_hw=(224, 224)) -> "ArchConfig":
        return cls(input_hw=input_hw, base_filters=32, blocks=5, convs_per_block=3,
                   fc_widths=FULL_FC)

    @classmethod
    def desk(cls, input_hw=(64, 64)) -> "ArchConfig":
        return cls(input_hw=input_hw)

    @classmethod
    def check(cls) -> "ArchConfig":
        """Gradient-check preset: every roster graph stays under 5k parameters."""
        return cls(input_hw=(16, 16), base_filters=2, blocks=3, convs_per_block=2,
                   fc_widths=(8, 8, 8))

    @property
    def filters(self) -> list[int]:
        base = max(1, self.base_filters // self.scale)
        return [base * 2 ** k for k in range(self.blocks)]

    @property
    def widths(self) -> list[int]:
        return [max(1, w // self.scale) for w in self.fc_widths]

    def gender_widths(self) -> tuple:
        """Gender FC widths, shrunk in proportion when the regression FC is desk sized."""
        ratio = self.fc_widths[0] / FULL_FC[0]
        return tuple(max(1, round(w * ratio)) for w in FULL_GENDER_FC)

    def single(self) -> "ArchConfig":
        """Same config for one print: half the pairwise width."""
        h, w = self.input_hw
        return replace(self, input_hw=(h, w // 2))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ArchConfig":
        return cls(**json.loads(text))

    def min_extent(self) -> int:
        return 2 ** self.blocks


def _fingerprint_source(arch: str, cfg: ArchConfig, **extra) -> str:
    return json.dumps({"arch": arch, "cfg": json.loads(cfg.to_json()), **extra}, sort_keys=True)


class _Builder:
    def __init__(self, cfg: ArchConfig, seed: int):
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.nodes: list[Node] = []
        self.params: dict = {}
        self.buffers: dict = {}

    def add(self, name, op, inputs=(), params=None, **attrs) -> str:
        self.nodes.append(Node(name, op, tuple(inputs), params or {}, attrs))
        return name

    def _param(self, key, init):
        if key not in self.params:
            self.params[key] = init()
        return key

    def conv(self, name, src, c_in, c_out, k=3, branch=None, key=None):
        key = key or name
        std = np.sqrt(2.0 / (k * k * c_in))
        w = self._param(f"{key}.W", lambda: self.rng.normal(0.0, std, (k, k, c_in, c_out)))
        return self.add(name, "conv", [src], {"W": w}, spec=T.ConvSpec(c_out, k), branch=branch)

    def bn(self, name, src, c, branch=None):
        g = self._param(f"{name}.gamma", lambda: np.ones(c))
        b = self._param(f"{name}.beta", lambda: np.zeros(c))
        self.buffers[f"{name}.running_mean"] = np.zeros(c)
        self.buffers[f"{name}.running_var"] = np.ones(c)
        return self.add(name, "bn", [src],
                        {"gamma": g, "beta": b, "mean": f"{name}.running_mean", "var": f"{name}.running_var"},
                        momentum=self.cfg.bn_momentum, eps_bn=self.cfg.eps_bn, branch=branch)

    def dense(self, name, src, n_in, n_out, key=None, std=None, branch=None):
        key = key or name
        std = np.sqrt(2.0 / n_in) if std is None else std
        w = self._param(f"{key}.W", lambda: self.rng.normal(0.0, std, (n_in, n_out)))
        b = self._param(f"{key}.b", lambda: np.zeros(n_out))
        return self.add(name, "dense", [src], {"W": w, "b": b}, branch=branch)

    # -- composite pieces --------------------------------------------------

    def stem(self, src, prefix="", branch=None):
        x = self.bn(f"{prefix}stem.bn", src, 1, branch)
        return self.add(f"{prefix}stem.relu", "relu", [x], branch=branch)

    def block(self, k, src, c_in, prefix="", tie=None, branch=None):
        """``convs_per_block`` x [conv -> BN -> ReLU] then 2x2 max-pool."""
        f = self.cfg.filters[k]
        x, c = src, c_in
        for i in range(self.cfg.convs_per_block):
            base = f"b{k}.conv{i}"
            x = self.conv(f"{prefix}{base}", x, c, f, 3, branch,
                          key=f"{tie}{base}" if tie else None)
            x = self.bn(f"{prefix}b{k}.bn{i}", x, f, branch)
            x = self.add(f"{prefix}b{k}.relu{i}", "relu", [x], branch=branch)
            c = f
        return self.add(f"{prefix}b{k}.pool", "maxpool", [x], window=2, stride=2, branch=branch)

    def skip(self, src, c, hops, tag, prefix="", tie=None, branch=None):
        """Pool ``hops`` times, then a channel-preserving 1x1 projection."""
        x = self.add(f"{prefix}{tag}.pool", "maxpool", [src], window=2, stride=2, repeat=hops, branch=branch)
        return self.conv(f"{prefix}{tag}.proj", x, c, c, 1, branch,
                         key=f"{tie}{tag}.proj" if tie else None)

    def block_input(self, k, outs, chans, prefix="", tie=None, branch=None):
        """Previous block output plus projected skips of all earlier ones."""
        if k == 0:
            return None
        parts = [outs[k - 1]]
        total = chans[k - 1]
        for j in range(k - 1):
            parts.append(self.skip(outs[j], chans[j], k - 1 - j, f"skip{j}to{k}", prefix, tie, branch))
            total += chans[j]
        if len(parts) == 1:
            return parts[0], total
        return self.add(f"{prefix}in{k}", "concat", parts, branch=branch), total

    def run_blocks(self, start, stop, src, c_in, outs, chans, prefix="", tie=None, branch=None):
        x, c = src, c_in
        for k in range(start, stop):
            if k > 0:
                x, c = self.block_input(k, outs, chans, prefix, tie, branch)
            outs.append(self.block(k, x, c, prefix, tie, branch))
            chans.append(self.cfg.filters[k])
        return outs, chans

    def final_merge(self, outs, chans):
        last = len(outs) - 1
        parts = [self.skip(outs[j], chans[j], last - j, f"skip{j}toF") for j in range(last)]
        parts.append(outs[last])
        return self.add("merge", "concat", parts), sum(chans)

    def head(self, src, n_feat, widths, rates, n_out):
        x, n = src, n_feat
        for i, (w, r) in enumerate(zip(widths, rates)):
            x = self.dense(f"fc{i}", x, n, w)
            x = self.add(f"fc{i}.relu", "relu", [x])
            x = self.add(f"fc{i}.drop", "dropout", [x], rate=r)
            n = w
        return self.dense("out", x, n, n_out, std=np.sqrt(1.0 / n))

    def graph(self, arch, head, input_keys, output, fp) -> ModelGraph:
        return ModelGraph(arch, self.nodes, self.params, self.buffers, head, input_keys, output, fp)


def _check_extent(cfg: ArchConfig, hw) -> None:
    need = cfg.min_extent()
    if min(hw) < need:
        raise T.ShapeError(
            f"input {tuple(hw)} too small for {cfg.blocks} pooling stages; "
            f"minimum input size is {need}x{need}"
        )


def _flat_features(cfg: ArchConfig, hw, channels) -> int:
    h, w = hw
    for _ in range(cfg.blocks):
        h, w = h // 2, w // 2
    return h * w * channels


def _single_trunk(arch, cfg, seed, widths, n_out, head):
    _check_extent(cfg, cfg.input_hw)
    b = _Builder(cfg, seed)
    x = b.add("input", "input", key="image", hw=cfg.input_hw)
    x = b.stem(x)
    outs, chans = b.run_blocks(0, cfg.blocks, x, 1, [], [])
    merged, c = b.final_merge(outs, chans)
    out = b.head(merged, _flat_features(cfg, cfg.input_hw, c), widths, cfg.dropout_rates, n_out)
    return b.graph(arch, head, ("image",), out, _fingerprint_source(arch, cfg))


def build_shoenet(cfg: ArchConfig, seed: int = 0) -> ModelGraph:
    """Pairwise-print regressor: dense skip blocks, channel merge, three FC layers, one linear output."""
    return _single_trunk("shoenet", cfg, seed, cfg.widths, 1, "regression_1")


def build_lr_cnn(cfg: ArchConfig, seed: int = 0) -> ModelGraph:
    """ShoeNet topology on a single print of extent (H, H/2)."""
    h, w = cfg.input_hw
    if w * 2 != h:
        raise ValueError(f"single-print input must be (H, H/2), got {cfg.input_hw}")
    return _single_trunk("lr", cfg, seed, cfg.widths, 1, "regression_1")


def build_gender_net(cfg: ArchConfig, seed: int = 0) -> ModelGraph:
    """ShoeNet trunk with the gender FC widths and a two-way softmax head."""
    widths = list(cfg.gender_widths())
    if cfg.scale > 1:
        widths = [max(1, w // cfg.scale) for w in widths]
    return _single_trunk("gender", cfg, seed, widths, 2, "softmax_2")


FUSION_POINTS = ("early", "mid", "late")


def fusion_block(cfg: ArchConfig, point: str) -> int:
    """Index of the block after which twin branches merge."""
    if point == "early":
        return 0
    if point in ("mid", "in"):
        return (cfg.blocks - 1) // 2
    if point == "late":
        return cfg.blocks - 1
    raise ValueError(f"unknown fusion point {point!r}")


def mm_block(cfg: ArchConfig, level: str) -> int:
    """Parameter-sharing level: blocks A, B, C (capped at the last block)."""
    try:
        k = {"early": 0, "mid": 1, "late": 2}[level]
    except KeyError:
        raise ValueError(f"unknown sharing level {level!r}") from None
    return min(k, cfg.blocks - 1)


def _twin(arch, cfg, seed, merge_at, tied, recalibrate):
    hw = cfg.input_hw
    _check_extent(cfg, hw)
    b = _Builder(cfg, seed)
    branch_outs = {}
    for side, tag in (("left", "L"), ("right", "R")):
        x = b.add(f"{tag}.input", "input", key=side, hw=hw, branch=tag)
        x = b.stem(x, f"{tag}.", tag)
        tie = "shared." if tied else None
        outs, chans = b.run_blocks(0, merge_at + 1, x, 1, [], [], f"{tag}.", tie, tag)
        branch_outs[tag] = (outs, chans)
    (lo, chans), (ro, _) = branch_outs["L"], branch_outs["R"]
    if recalibrate:
        c = chans[merge_at]
        hidden = max(1, c // cfg.se_reduction)
        gates = {}
        for tag, src in (("L", lo[merge_at]), ("R", ro[merge_at])):
            s = b.add(f"{tag}.se.gap", "gap", [src], branch=tag)
            z = b.dense(f"{tag}.se.squeeze", s, c, hidden, key="se.squeeze", branch=tag)
            z = b.add(f"{tag}.se.noise", "noise", [z], sigma=cfg.mm_noise_sigma, branch=tag)
            z = b.add(f"{tag}.se.relu", "relu", [z], branch=tag)
            z = b.dense(f"{tag}.se.excite", z, hidden, c, key="se.excite", branch=tag)
            gates[tag] = b.add(f"{tag}.se.gate", "sigmoid", [z], branch=tag)
        # each branch's descriptor recalibrates the opposite branch
        lo[merge_at] = b.add("L.recal", "gate", [lo[merge_at], gates["R"]], branch="L")
        ro[merge_at] = b.add("R.recal", "gate", [ro[merge_at], gates["L"]], branch="R")
    outs, merged_chans = [], []
    for j in range(merge_at + 1):
        outs.append(b.add(f"fuse{j}", "concat", [lo[j], ro[j]]))
        merged_chans.append(2 * chans[j])
    outs, merged_chans = b.run_blocks(merge_at + 1, cfg.blocks, None, None, outs, merged_chans)
    merged, c = b.final_merge(outs, merged_chans)
    out = b.head(merged, _flat_features(cfg, hw, c), cfg.widths, cfg.dropout_rates, 1)
    fp = _fingerprint_source(arch, cfg)
    g = b.graph(arch, "regression_1", ("left", "right"), out, fp)
    g.meta["merge_block"] = merge_at
    return g


def build_fusion(cfg: ArchConfig, point: str, seed: int = 0) -> ModelGraph:
    """Twin single-print branches with independent weights, merged channel-wise after a block.

    ``cfg.input_hw`` is the single-print extent.
    """
    name = {"early": "fm-early", "mid": "fm-in", "in": "fm-in", "late": "fm-late"}[point]
    return _twin(name, cfg, seed, fusion_block(cfg, point), tied=False, recalibrate=False)


def build_mm(cfg: ArchConfig, level: str, seed: int = 0) -> ModelGraph:
    """Twin branches with tied conv kernels up to the sharing level.

    At that level each branch's pooled channel descriptor is squeezed
    through a shared bottleneck (plus Gaussian noise while training) into
    sigmoid gates that rescale the *other* branch. The branches are then
    concatenated and continue as one trunk.
    """
    return _twin(f"mm-{level}", cfg, seed, mm_block(cfg, level), tied=True, recalibrate=True)


def build(arch: str, cfg: ArchConfig | None = None, seed: int = 0) -> ModelGraph:
    """Build any roster architecture from a *pairwise* config.

    Single-print and twin architectures use ``cfg.single()`` internally so
    every architecture consumes the same pairwise ``(H, 2W)`` image, except
    ``lr`` which consumes single prints.
    """
    cfg = cfg or ArchConfig.desk()
    if arch == "shoenet":
        g = build_shoenet(cfg, seed)
    elif arch == "gender":
        g = build_gender_net(cfg, seed)
    elif arch == "lr":
        g = build_lr_cnn(cfg.single(), seed)
    elif arch in ("fm-early", "fm-in", "fm-late"):
        g = build_fusion(cfg.single(), arch[3:], seed)
    elif arch in ("mm-early", "mm-mid", "mm-late"):
        g = build_mm(cfg.single(), arch[3:], seed)
    else:
        raise ValueError(f"unknown architecture {arch!r}; choose from {', '.join(ARCHS)}")
    g.meta["config"] = cfg
    return g


def input_kind(arch: str) -> str:
    return "single" if arch == "lr" else "pair"
