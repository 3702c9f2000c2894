"""Test PBNN checkpoint files."""

import json
from pathlib import Path

import numpy as np
import pytest

from partialbnn.bayes_layer import PriorKind, PriorSpec
from partialbnn.checkpoint import (
    bind_checkpoint,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from partialbnn.exceptions import (
    CheckpointShapeMismatch,
    CheckpointTruncated,
    CheckpointVersionMismatch,
    CheckpointWrongFormat,
)
from partialbnn.gradcheck import mini_arch
from partialbnn.model import ArchSpec, PartialBayesNet, PlacementConfig, build
from partialbnn.trainer import Trainer, TrainConfig

PLACEMENTS = ["none", "1", "2", "3", "4", "5", "1,5", "2,4", "3,4,5", "1,2,3,4,5"]


def mini(placement: str, seed: int = 0) -> PartialBayesNet:
    """Float32 mini network."""
    return build(
        mini_arch(),
        PlacementConfig.parse(placement),
        np.random.default_rng(seed),
    )


class TestRoundTrip:
    """Test save then load."""

    @pytest.mark.parametrize(("seed", "placement"), list(enumerate(PLACEMENTS)))
    def test_forward_identical(
        self,
        tmp_path: Path,
        seed: int,
        placement: str,
    ) -> None:
        """Test the reloaded model computes the same logits."""
        rng = np.random.default_rng(seed)
        model = mini(placement, seed)
        for layer in model.variational_layers():
            layer.params.rho[...] = rng.uniform(-6, 0, size=layer.params.shape)
        for norm in model.norm_layers():
            norm.state.running_mean[...] = rng.normal(size=norm.state.channels)
            norm.state.running_var[...] = rng.uniform(0.5, 2, size=norm.state.channels)
        path = tmp_path / "model.pbnn"
        save_checkpoint(model, path, seed=seed, step=12)
        loaded = load_checkpoint(path)
        x = rng.normal(size=(3, 1, 8, 8)).astype(np.float32)
        assert np.array_equal(model.forward(x), loaded.forward(x))
        original, restored = model.named_tensors(), loaded.named_tensors()
        assert original.keys() == restored.keys()
        assert all(np.array_equal(original[k], restored[k]) for k in original)
        assert loaded.placement == model.placement

    def test_after_training(self, rng: np.random.Generator) -> None:
        """Test trained running statistics survive."""
        model = mini("5")
        trainer = Trainer(model, TrainConfig(seed=1))
        trainer.train_step(
            rng.normal(size=(4, 1, 8, 8)).astype(np.float32),
            rng.integers(0, 3, size=4),
        )
        loaded = bind_checkpoint(decode_checkpoint(encode_checkpoint(model)))
        assert np.array_equal(
            loaded.stem_bn.state.running_mean,
            model.stem_bn.state.running_mean,
        )

    def test_last_group(self) -> None:
        """Test a group-5 desk checkpoint keeps its variational convs."""
        model = build(ArchSpec.desk(), PlacementConfig.of(5), np.random.default_rng(0))
        loaded = bind_checkpoint(decode_checkpoint(encode_checkpoint(model)))
        kernels = [layer.spec.kernel_size for layer in loaded.variational_layers()]
        assert kernels.count(3) == 4
        assert len(loaded.partition().uncertain) == 5

    def test_metadata(self, tmp_path: Path) -> None:
        """Test provenance fields."""
        path = tmp_path / "m.pbnn"
        save_checkpoint(mini("2"), path, seed=77, step=5, prior=PriorSpec.scaled(0.5))
        data = read_checkpoint(path)
        assert data.metadata["seed"] == 77
        assert data.metadata["step"] == 5
        assert data.arch == mini_arch()
        assert data.placement == PlacementConfig.of(2)
        assert data.prior.kind is PriorKind.SCALED_GAUSSIAN
        assert data.prior.sigma_p == 0.5

    def test_deterministic_bytes(self) -> None:
        """Test encoding the same model twice."""
        model = mini("3")
        assert encode_checkpoint(model) == encode_checkpoint(model)


class TestErrors:
    """Test corrupt checkpoints."""

    @pytest.fixture(autouse=True)
    def _setup_bytes(self) -> None:
        """Encode one mini model."""
        self.data = encode_checkpoint(mini("4,5"))

    @pytest.mark.parametrize("fraction", [0.0, 0.001, 0.01, 0.5, 0.99])
    def test_truncated(self, fraction: float) -> None:
        """Test cuts in the header, metadata and tensor table."""
        cut = max(int(len(self.data) * fraction), 2)
        with pytest.raises(CheckpointTruncated):
            decode_checkpoint(self.data[:cut])

    def test_one_byte_short(self) -> None:
        """Test a missing last byte."""
        with pytest.raises(CheckpointTruncated):
            decode_checkpoint(self.data[:-1])

    def test_bad_magic(self) -> None:
        """Test a foreign file."""
        with pytest.raises(CheckpointWrongFormat):
            decode_checkpoint(b"PNG!" + self.data[4:])

    def test_version(self) -> None:
        """Test an unsupported version."""
        data = self.data[:4] + (2).to_bytes(2, "little") + self.data[6:]
        with pytest.raises(CheckpointVersionMismatch):
            decode_checkpoint(data)

    def test_trailing(self) -> None:
        """Test trailing garbage."""
        with pytest.raises(CheckpointWrongFormat):
            decode_checkpoint(self.data + b"\x00")

    def test_bad_metadata(self) -> None:
        """Test unreadable metadata."""
        meta_length = int.from_bytes(self.data[6:10], "little")
        data = self.data[:10] + b"{" * meta_length + self.data[10 + meta_length :]
        with pytest.raises(CheckpointWrongFormat):
            decode_checkpoint(data)

    def test_shape_mismatch(self) -> None:
        """Test tensors that disagree with the embedded architecture."""
        data = decode_checkpoint(self.data)
        data.tensors["fc.bias"] = np.zeros(5, dtype=np.float32)
        with pytest.raises(CheckpointShapeMismatch):
            bind_checkpoint(data)

    def test_missing_tensor(self) -> None:
        """Test a tensor absent from the file."""
        data = decode_checkpoint(self.data)
        del data.tensors["fc.weight"]
        with pytest.raises(CheckpointShapeMismatch):
            bind_checkpoint(data)

    def test_placement_mismatch(self) -> None:
        """Test metadata naming a different placement."""
        data = decode_checkpoint(self.data)
        data.metadata["placement"] = [1]
        with pytest.raises(CheckpointShapeMismatch):
            bind_checkpoint(data)

    def test_incomplete_metadata(self) -> None:
        """Test missing architecture."""
        data = decode_checkpoint(self.data)
        del data.metadata["arch"]
        with pytest.raises(CheckpointWrongFormat):
            bind_checkpoint(data)

    def test_metadata_is_json(self) -> None:
        """Test the metadata block is plain sorted JSON."""
        meta_length = int.from_bytes(self.data[6:10], "little")
        metadata = json.loads(self.data[10 : 10 + meta_length])
        assert list(metadata) == sorted(metadata)
        assert metadata["placement"] == [4, 5]

    def test_huge_shape(self) -> None:
        """Test dimensions whose product overflows 64 bits."""
        metadata = b"{}"
        data = (
            b"PBNN"
            + (1).to_bytes(2, "little")
            + len(metadata).to_bytes(4, "little")
            + metadata
            + (1).to_bytes(4, "little")
            + (1).to_bytes(4, "little")
            + b"w"
            + (1).to_bytes(1, "little")
            + (3).to_bytes(4, "little")
            + (2**31).to_bytes(4, "little")
            + (2**31).to_bytes(4, "little")
            + (2).to_bytes(4, "little")
        )
        with pytest.raises(CheckpointTruncated):
            decode_checkpoint(data)
