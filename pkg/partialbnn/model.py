"""Residual network with uncertainty placed on selected convolution groups."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from enum import StrEnum
from typing import Any

import numpy as np
import numpy.typing as npt

from .bayes_layer import VariationalParams, sample_weights
from .const import IMAGE_SIZE, NUM_CLASSES, NUM_GROUPS, RHO_INIT
from .exceptions import InvalidConfig, InvalidPlacement, ShapeMismatch
from .nn_ops import (
    BatchNormCache,
    BatchNormState,
    ConvSpec,
    Tensor,
    affine_backward,
    affine_forward,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    global_avg_pool,
    global_avg_pool_backward,
    relu,
    relu_backward,
)

_LOGGER = logging.getLogger(__name__)

MIN_CLASSES = 2


class ForwardMode(StrEnum):
    """How variational layers choose their weights."""

    SAMPLED = "sampled"
    MEAN = "mean"
    FROZEN = "frozen"


@dataclass(frozen=True)
class ArchSpec:
    """Network geometry: input (H, W, channels), widths of the five groups."""

    input_size: tuple[int, int, int] = (IMAGE_SIZE, IMAGE_SIZE, 1)
    num_classes: int = NUM_CLASSES
    group_channels: tuple[int, ...] = (16, 16, 32, 64, 128)
    blocks_per_group: int = 2

    def __post_init__(self) -> None:
        """Validate architecture."""
        if len(self.input_size) != 3 or min(self.input_size) < 1:  # noqa: PLR2004
            raise InvalidConfig("input_size", "must be three positive integers")
        if self.num_classes < MIN_CLASSES:
            raise InvalidConfig("num_classes", f"must be at least {MIN_CLASSES}")
        if len(self.group_channels) != NUM_GROUPS:
            raise InvalidConfig(
                "group_channels",
                f"must list {NUM_GROUPS} channel counts",
            )
        if min(self.group_channels) < 1:
            raise InvalidConfig("group_channels", "must be positive")
        if self.blocks_per_group < 1:
            raise InvalidConfig("blocks_per_group", "must be positive")

    @classmethod
    def desk(cls) -> ArchSpec:
        """Reduced-width ResNet18 topology for CPU runs."""
        return cls()

    @classmethod
    def resnet18(cls) -> ArchSpec:
        """Full ResNet18 widths."""
        return cls(group_channels=(64, 64, 128, 256, 512))

    def to_dict(self) -> dict[str, Any]:
        """Serialize to plain types."""
        return {
            "input_size": list(self.input_size),
            "num_classes": self.num_classes,
            "group_channels": list(self.group_channels),
            "blocks_per_group": self.blocks_per_group,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ArchSpec:
        """Deserialize from plain types."""
        h, w, c = data["input_size"]
        return cls(
            input_size=(int(h), int(w), int(c)),
            num_classes=int(data["num_classes"]),
            group_channels=tuple(int(v) for v in data["group_channels"]),
            blocks_per_group=int(data["blocks_per_group"]),
        )


@dataclass(frozen=True)
class PlacementConfig:
    """Convolution groups (1..5) whose weights are variational."""

    bayesian_groups: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        """Validate group indices."""
        invalid = sorted(g for g in self.bayesian_groups if not 1 <= g <= NUM_GROUPS)
        if invalid:
            raise InvalidPlacement(
                f"invalid group index {invalid}, valid groups are 1..{NUM_GROUPS}",
            )

    @classmethod
    def of(cls, *groups: int) -> PlacementConfig:
        """Placement over the given groups."""
        return cls(frozenset(groups))

    @classmethod
    def parse(cls, text: str) -> PlacementConfig:
        """Parse "none", "" or a comma separated list such as "1,5"."""
        text = text.strip().lower()
        if text in ("", "none"):
            return cls()
        try:
            groups = frozenset(int(part) for part in text.split(",") if part.strip())
        except ValueError as e:
            raise InvalidPlacement(f"invalid group list {text!r}") from e
        return cls(groups)

    @property
    def label(self) -> str:
        """Short text form, e.g. "none" or "1,5"."""
        if not self.bayesian_groups:
            return "none"
        return ",".join(str(g) for g in sorted(self.bayesian_groups))

    def __contains__(self, group: object) -> bool:
        """Whether a group is Bayesian."""
        return group in self.bayesian_groups


@dataclass
class Parameter:
    """Named point-valued parameter and its latest gradient."""

    name: str
    value: Tensor
    grad: Tensor | None = None


class _ConvLayer:
    """Bias-free convolution; subclasses choose the weight per forward mode."""

    variational = False

    def __init__(self, name: str, spec: ConvSpec, group: int) -> None:
        """Initialize layer bookkeeping."""
        self.name = name
        self.spec = spec
        self.group = group
        self.depth = 0
        self.grad_weight: Tensor | None = None
        self._input: Tensor | None = None
        self._used_weight: Tensor | None = None

    @property
    def fan_in(self) -> int:
        """Inputs feeding one output unit."""
        return self.spec.in_channels * self.spec.kernel_size * self.spec.kernel_size

    def _weight_for(
        self,
        mode: ForwardMode,
        rng: np.random.Generator | None,
    ) -> Tensor:
        raise NotImplementedError

    def _store_grad(self, grad_weight: Tensor) -> None:
        """Keep the weight gradient."""

    def forward(
        self,
        x: Tensor,
        mode: ForwardMode,
        rng: np.random.Generator | None,
    ) -> Tensor:
        """Convolve with the weight chosen for the mode."""
        weight = self._weight_for(mode, rng)
        self._input = x
        self._used_weight = weight
        return conv2d_forward(x, weight, self.spec)

    def backward(self, grad_output: Tensor) -> Tensor:
        """Store the gradient at the weight actually used, return input gradient."""
        if self._input is None or self._used_weight is None:
            raise ShapeMismatch("cache", "forward before backward", None)
        grad_input, self.grad_weight = conv2d_backward(
            grad_output,
            self._input,
            self._used_weight,
            self.spec,
        )
        self._store_grad(self.grad_weight)
        return grad_input

    def astype(self, dtype: npt.DTypeLike) -> None:
        """Cast stored tensors in place."""
        raise NotImplementedError


class Conv2d(_ConvLayer):
    """Deterministic convolution, part of w1."""

    def __init__(
        self,
        name: str,
        spec: ConvSpec,
        group: int,
        rng: np.random.Generator,
    ) -> None:
        """Initialize with fan-in scaled uniform weights."""
        super().__init__(name, spec, group)
        bound = 1.0 / math.sqrt(self.fan_in)
        self.weight = Parameter(
            f"{name}.weight",
            rng.uniform(-bound, bound, size=spec.weight_shape).astype(np.float32),
        )

    def _weight_for(
        self,
        mode: ForwardMode,  # noqa: ARG002
        rng: np.random.Generator | None,  # noqa: ARG002
    ) -> Tensor:
        return self.weight.value

    def _store_grad(self, grad_weight: Tensor) -> None:
        self.weight.grad = grad_weight

    def astype(self, dtype: npt.DTypeLike) -> None:
        """Cast weights in place."""
        self.weight.value = self.weight.value.astype(dtype)


class VariationalConv2d(_ConvLayer):
    """Convolution whose weight follows q(w | mu, rho), part of w2."""

    variational = True

    def __init__(
        self,
        name: str,
        spec: ConvSpec,
        group: int,
        rng: np.random.Generator,
        rho_init: float = RHO_INIT,
    ) -> None:
        """Initialize mu like a deterministic conv and rho constant."""
        super().__init__(name, spec, group)
        self.params = VariationalParams.initialize(
            spec.weight_shape,
            self.fan_in,
            rng,
            rho_init=rho_init,
        )

    def _weight_for(
        self,
        mode: ForwardMode,
        rng: np.random.Generator | None,
    ) -> Tensor:
        if mode is ForwardMode.MEAN:
            return self.params.mu
        if mode is ForwardMode.FROZEN:
            return sample_weights(self.params, None, epsilon=self.params.last_epsilon)
        return sample_weights(self.params, rng)

    def astype(self, dtype: npt.DTypeLike) -> None:
        """Cast variational tensors in place."""
        self.params = self.params.astype(dtype)


class BatchNorm2d:
    """Batch normalization layer; gamma and beta are always certain."""

    def __init__(self, name: str, channels: int) -> None:
        """Initialize identity normalization."""
        self.name = name
        self.state = BatchNormState.initial(channels)
        self.gamma = Parameter(f"{name}.gamma", self.state.gamma)
        self.beta = Parameter(f"{name}.beta", self.state.beta)
        self._cache: BatchNormCache | None = None

    def forward(self, x: Tensor, training: bool, update_running: bool) -> Tensor:
        """Normalize."""
        out, self._cache = batchnorm_forward(x, self.state, training, update_running)
        return out

    def backward(self, grad_output: Tensor) -> Tensor:
        """Store gamma/beta gradients and return the input gradient."""
        if self._cache is None:
            raise ShapeMismatch("cache", "forward before backward", None)
        grad_input, self.gamma.grad, self.beta.grad = batchnorm_backward(
            grad_output,
            self._cache,
        )
        return grad_input

    def tensors(self) -> dict[str, Tensor]:
        """Parameters and running statistics by name."""
        return {
            f"{self.name}.gamma": self.state.gamma,
            f"{self.name}.beta": self.state.beta,
            f"{self.name}.running_mean": self.state.running_mean,
            f"{self.name}.running_var": self.state.running_var,
        }

    def astype(self, dtype: npt.DTypeLike) -> None:
        """Cast state in place, keeping parameters linked to it."""
        self.state.gamma = self.state.gamma.astype(dtype)
        self.state.beta = self.state.beta.astype(dtype)
        self.state.running_mean = self.state.running_mean.astype(dtype)
        self.state.running_var = self.state.running_var.astype(dtype)
        self.gamma.value = self.state.gamma
        self.beta.value = self.state.beta


def _make_conv(
    name: str,
    spec: ConvSpec,
    group: int,
    placement: PlacementConfig,
    rng: np.random.Generator,
    rho_init: float,
) -> _ConvLayer:
    if group in placement:
        return VariationalConv2d(name, spec, group, rng, rho_init=rho_init)
    return Conv2d(name, spec, group, rng)


class BasicBlock:
    """conv-BN-ReLU-conv-BN plus identity or 1x1 projection shortcut, then ReLU."""

    def __init__(
        self,
        name: str,
        in_channels: int,
        out_channels: int,
        stride: int,
        group: int,
        placement: PlacementConfig,
        rng: np.random.Generator,
        rho_init: float,
    ) -> None:
        """Initialize block."""
        self.name = name
        self.conv1 = _make_conv(
            f"{name}.conv1",
            ConvSpec(in_channels, out_channels, 3, stride=stride, padding=1),
            group,
            placement,
            rng,
            rho_init,
        )
        self.bn1 = BatchNorm2d(f"{name}.bn1", out_channels)
        self.conv2 = _make_conv(
            f"{name}.conv2",
            ConvSpec(out_channels, out_channels, 3, stride=1, padding=1),
            group,
            placement,
            rng,
            rho_init,
        )
        self.bn2 = BatchNorm2d(f"{name}.bn2", out_channels)
        self.shortcut: _ConvLayer | None = None
        self.shortcut_bn: BatchNorm2d | None = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = _make_conv(
                f"{name}.shortcut",
                ConvSpec(in_channels, out_channels, 1, stride=stride),
                group,
                placement,
                rng,
                rho_init,
            )
            self.shortcut_bn = BatchNorm2d(f"{name}.shortcut_bn", out_channels)
        self._mid: Tensor | None = None
        self._pre: Tensor | None = None

    def convs(self) -> list[_ConvLayer]:
        """Convolutions in execution order."""
        convs = [self.conv1, self.conv2]
        if self.shortcut is not None:
            convs.append(self.shortcut)
        return convs

    def norms(self) -> list[BatchNorm2d]:
        """Batch norms in execution order."""
        norms = [self.bn1, self.bn2]
        if self.shortcut_bn is not None:
            norms.append(self.shortcut_bn)
        return norms

    def forward(
        self,
        x: Tensor,
        mode: ForwardMode,
        training: bool,
        rng: np.random.Generator | None,
        update_running: bool,
    ) -> Tensor:
        """Block forward."""
        out = self.conv1.forward(x, mode, rng)
        out = self.bn1.forward(out, training, update_running)
        self._mid = out
        out = self.conv2.forward(relu(out), mode, rng)
        out = self.bn2.forward(out, training, update_running)
        if self.shortcut is not None and self.shortcut_bn is not None:
            residual = self.shortcut_bn.forward(
                self.shortcut.forward(x, mode, rng),
                training,
                update_running,
            )
        else:
            residual = x
        self._pre = out + residual
        return relu(self._pre)

    def backward(self, grad_output: Tensor) -> Tensor:
        """Block backward."""
        if self._pre is None or self._mid is None:
            raise ShapeMismatch("cache", "forward before backward", None)
        grad = relu_backward(grad_output, self._pre)
        grad_main = self.conv2.backward(self.bn2.backward(grad))
        grad_main = relu_backward(grad_main, self._mid)
        grad_main = self.conv1.backward(self.bn1.backward(grad_main))
        if self.shortcut is not None and self.shortcut_bn is not None:
            grad_residual = self.shortcut.backward(self.shortcut_bn.backward(grad))
        else:
            grad_residual = grad
        return grad_main + grad_residual


@dataclass
class ParamPartition:
    """Certain parameters w1 and variational parameters theta."""

    certain: list[Parameter] = field(default_factory=list)
    uncertain: list[tuple[str, VariationalParams]] = field(default_factory=list)

    @property
    def tensor_count(self) -> int:
        """Trainable tensors: one per certain parameter, mu and rho per layer."""
        return len(self.certain) + 2 * len(self.uncertain)


class PartialBayesNet:
    """Stem (group 1), four residual groups (2-5), global pooling, one FC."""

    def __init__(
        self,
        arch: ArchSpec,
        placement: PlacementConfig,
        rng: np.random.Generator,
        rho_init: float = RHO_INIT,
    ) -> None:
        """Build all layers, drawing every initial value from rng."""
        self.arch = arch
        self.placement = placement
        self.rho_init = rho_init
        height, width, channels = arch.input_size
        widths = arch.group_channels

        self.stem = _make_conv(
            "g1.conv",
            ConvSpec(channels, widths[0], 3, stride=1, padding=1),
            1,
            placement,
            rng,
            rho_init,
        )
        self.stem_bn = BatchNorm2d("g1.bn", widths[0])
        self.blocks: list[BasicBlock] = []
        in_channels = widths[0]
        for group in range(2, NUM_GROUPS + 1):
            out_channels = widths[group - 1]
            for index in range(arch.blocks_per_group):
                stride = 2 if group > 2 and index == 0 else 1  # noqa: PLR2004
                self.blocks.append(
                    BasicBlock(
                        f"g{group}.b{index + 1}",
                        in_channels,
                        out_channels,
                        stride,
                        group,
                        placement,
                        rng,
                        rho_init,
                    ),
                )
                in_channels = out_channels

        bound = 1.0 / math.sqrt(in_channels)
        self.fc_weight = Parameter(
            "fc.weight",
            rng.uniform(-bound, bound, size=(in_channels, arch.num_classes)).astype(
                np.float32,
            ),
        )
        self.fc_bias = Parameter(
            "fc.bias",
            np.zeros(arch.num_classes, dtype=np.float32),
        )
        for depth, conv in enumerate(self.conv_layers()):
            conv.depth = depth
        self._input_shape = (channels, height, width)
        self._stem_pre: Tensor | None = None
        self._pooled: Tensor | None = None
        self._features_shape: tuple[int, ...] | None = None
        _LOGGER.debug(
            "[%s] Built network, %s variational convs, %s parameters",
            placement.label,
            len(self.variational_layers()),
            self.parameter_count(),
        )

    def conv_layers(self) -> list[_ConvLayer]:
        """Every convolution in depth order."""
        convs: list[_ConvLayer] = [self.stem]
        for block in self.blocks:
            convs.extend(block.convs())
        return convs

    def norm_layers(self) -> list[BatchNorm2d]:
        """Every batch norm in execution order."""
        norms = [self.stem_bn]
        for block in self.blocks:
            norms.extend(block.norms())
        return norms

    def variational_layers(self) -> list[VariationalConv2d]:
        """Variational convolutions in depth order."""
        return [c for c in self.conv_layers() if isinstance(c, VariationalConv2d)]

    def parameter_count(self) -> int:
        """Number of scalar trainable values (mu and rho both counted)."""
        part = self.partition()
        return sum(p.value.size for p in part.certain) + sum(
            2 * v.mu.size for _, v in part.uncertain
        )

    def trainable_tensor_count(self) -> int:
        """Trainable tensors counted layer by layer."""
        convs = sum(2 if c.variational else 1 for c in self.conv_layers())
        return convs + 2 * len(self.norm_layers()) + 2

    def partition(self) -> ParamPartition:
        """Split parameters into certain and uncertain sets."""
        part = ParamPartition()
        for conv in self.conv_layers():
            if isinstance(conv, VariationalConv2d):
                part.uncertain.append((conv.name, conv.params))
            else:
                part.certain.append(conv.weight)
        for norm in self.norm_layers():
            part.certain.extend([norm.gamma, norm.beta])
        part.certain.extend([self.fc_weight, self.fc_bias])
        return part

    def forward(
        self,
        x: Tensor,
        mode: ForwardMode = ForwardMode.MEAN,
        training: bool = False,
        rng: np.random.Generator | None = None,
        update_running: bool = True,
    ) -> Tensor:
        """Logits for an NCHW batch."""
        if x.ndim != 4 or tuple(x.shape[1:]) != self._input_shape:  # noqa: PLR2004
            raise ShapeMismatch("input", ("N", *self._input_shape), x.shape)
        out = self.stem_bn.forward(
            self.stem.forward(x, mode, rng),
            training,
            update_running,
        )
        self._stem_pre = out
        out = relu(out)
        for block in self.blocks:
            out = block.forward(out, mode, training, rng, update_running)
        self._features_shape = out.shape
        self._pooled = global_avg_pool(out)
        return affine_forward(self._pooled, self.fc_weight.value, self.fc_bias.value)

    def backward(self, grad_logits: Tensor) -> None:
        """Backpropagate, filling every parameter gradient."""
        if (
            self._pooled is None
            or self._features_shape is None
            or self._stem_pre is None
        ):
            raise ShapeMismatch("cache", "forward before backward", None)
        grad_pooled, self.fc_weight.grad, self.fc_bias.grad = affine_backward(
            grad_logits,
            self._pooled,
            self.fc_weight.value,
        )
        grad = global_avg_pool_backward(grad_pooled, self._features_shape)
        for block in reversed(self.blocks):
            grad = block.backward(grad)
        grad = relu_backward(grad, self._stem_pre)
        self.stem.backward(self.stem_bn.backward(grad))

    def named_tensors(self) -> dict[str, Tensor]:
        """Every stored tensor, including running statistics, by name."""
        tensors: dict[str, Tensor] = {}
        for conv in self.conv_layers():
            if isinstance(conv, VariationalConv2d):
                tensors[f"{conv.name}.mu"] = conv.params.mu
                tensors[f"{conv.name}.rho"] = conv.params.rho
            else:
                tensors[conv.weight.name] = conv.weight.value
        for norm in self.norm_layers():
            tensors.update(norm.tensors())
        tensors[self.fc_weight.name] = self.fc_weight.value
        tensors[self.fc_bias.name] = self.fc_bias.value
        return tensors

    def copy(self) -> PartialBayesNet:
        """Deep snapshot."""
        return copy.deepcopy(self)

    def astype(self, dtype: npt.DTypeLike) -> PartialBayesNet:
        """Deep copy with every tensor cast to dtype."""
        other = self.copy()
        for conv in other.conv_layers():
            conv.astype(dtype)
        for norm in other.norm_layers():
            norm.astype(dtype)
        other.fc_weight.value = other.fc_weight.value.astype(dtype)
        other.fc_bias.value = other.fc_bias.value.astype(dtype)
        return other


def build(
    arch: ArchSpec,
    placement: PlacementConfig,
    rng: np.random.Generator,
    rho_init: float = RHO_INIT,
) -> PartialBayesNet:
    """Build a network with the given uncertainty placement."""
    return PartialBayesNet(arch, placement, rng, rho_init=rho_init)


def forward(
    model: PartialBayesNet,
    x: Tensor,
    mode: ForwardMode = ForwardMode.MEAN,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Logits of model on x."""
    return model.forward(x, mode=mode, training=training, rng=rng)


def partition(model: PartialBayesNet) -> ParamPartition:
    """Certain and uncertain parameter sets of model."""
    return model.partition()
