import numpy as np
import pytest

from repact import piecewise
from repact.errors import ValidationError
from repact.experiment import ConvBlockSpec
from repact.model import TinyCNN
from repact.repact_layer import RepActVariant
from repact.tensor import Tape, backward, grad_check, softmax_cross_entropy

GRADCHECK_BLOCKS = [ConvBlockSpec(4, 3, 1, 1), ConvBlockSpec(4, 3, 2, 1), ConvBlockSpec(6, 3, 1, 1), ConvBlockSpec(6, 3, 2, 1)]
SMALL_BLOCKS = [ConvBlockSpec(4, 3, 1, 1), ConvBlockSpec(6, 3, 2, 1)]


def small_model(activation="repact_i", **kwargs):
    return TinyCNN(1, 8, SMALL_BLOCKS, activation, **kwargs)


@pytest.fixture
def batch():
    rng = np.random.default_rng(0)
    return rng.random((6, 1, 8, 8)).astype(np.float32), rng.integers(0, 10, 6)


class TestConstruction:
    def test_logits_shape(self, batch):
        x, _ = batch
        assert small_model().forward(x, "eval").shape == (6, 10)

    def test_parameter_names(self):
        names = list(small_model("repact_iii").parameters())
        assert names[:7] == ["block0.conv.weight", "block0.bn.gamma", "block0.bn.beta", "block0.act.alphas",
                             "block0.act.prelu_slope", "block0.act.gamma", "block0.act.beta"]
        assert names[-2:] == ["head.weight", "head.bias"]

    def test_baselines_have_no_repact_layers(self):
        for activation in ("relu", "hardswish"):
            model = small_model(activation)
            assert model.repact_layers() == {}
            assert not any(".act." in name for name in model.parameters())

    def test_variants(self):
        assert small_model("repact_ii").repact_layers()["block1"].variant is RepActVariant.II_SOFTMAX
        assert small_model("repact_iii").repact_layers()["block0"].bn is not None

    def test_branch_subset(self):
        layers = small_model(branch_set=["identity", "relu"]).repact_layers()
        np.testing.assert_array_equal(layers["block0"].alphas, [0.5, 0.5])

    def test_same_seed_same_weights(self):
        a, b = small_model(seed=3), small_model(seed=3)
        for name, t in a.parameters().items():
            np.testing.assert_array_equal(t.data, b.parameters()[name].data)

    def test_unknown_activation(self):
        with pytest.raises(ValidationError):
            small_model("gelu")

    def test_block_leaves_no_extent(self):
        with pytest.raises(ValidationError):
            TinyCNN(1, 2, [ConvBlockSpec(4, 5, 1, 0)])

    def test_wrong_input_shape(self):
        with pytest.raises(ValidationError):
            small_model().forward(np.zeros((2, 3, 8, 8), dtype=np.float32))


class TestState:
    def test_round_trip(self, batch):
        x, y = batch
        model = small_model("repact_iii", seed=1)
        with Tape():
            loss = softmax_cross_entropy(model.forward(x, "train"), y)
        backward(loss)
        for t in model.parameters().values():
            t.data -= (0.1 * t.grad).astype(t.dtype)

        copy = TinyCNN.from_description(model.description())
        copy.load_state(model.state())
        np.testing.assert_array_equal(copy.forward(x, "eval").data, model.forward(x, "eval").data)
        assert copy.repact_layers()["block0"].bn.running_var == model.repact_layers()["block0"].bn.running_var

    def test_missing_key(self):
        state = small_model().state()
        del state["head.bias"]
        with pytest.raises(ValidationError):
            small_model().load_state(state)

    def test_unexpected_key(self):
        state = small_model().state()
        state["block9.conv.weight"] = np.zeros(3)
        with pytest.raises(ValidationError):
            small_model().load_state(state)

    def test_shape_mismatch(self):
        state = small_model().state()
        state["head.weight"] = np.zeros((3, 3), dtype=np.float32)
        with pytest.raises(ValidationError):
            small_model().load_state(state)

    def test_bad_description(self):
        with pytest.raises(ValidationError):
            TinyCNN.from_description({"in_channels": 1})


class TestFusedForward:
    @pytest.mark.parametrize("activation", ["repact_i", "repact_ii", "repact_iii"])
    def test_matches_multi_branch(self, batch, activation):
        x, _ = batch
        model = small_model(activation, seed=2)
        rng = np.random.default_rng(5)
        for params in model.repact_layers().values():
            params.alphas[...] = rng.uniform(-1, 1, params.alphas.shape)
        polys = model.fused_polys()
        assert set(polys) == {"block0", "block1"}
        multi = model.forward(x, "eval").data
        fused = model.forward(x, "eval", fused=polys).data
        assert np.max(np.abs(multi - fused)) <= 1e-4

    def test_identity_weights_fuse_to_identity(self):
        model = small_model()
        for params in model.repact_layers().values():
            params.alphas[...] = [1.0, 0.0, 0.0, 0.0]
        for poly in model.fused_polys().values():
            assert poly == piecewise.make_identity()


class TestModelGradients:
    @pytest.mark.parametrize("activation", ["repact_i", "repact_ii", "repact_iii"])
    def test_every_parameter_group(self, activation):
        model = TinyCNN(1, 8, GRADCHECK_BLOCKS, activation, seed=0, dtype="float64")
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 1, 8, 8))
        y = rng.integers(0, 10, 4)

        report = grad_check(lambda: softmax_cross_entropy(model.forward(x, "train"), y), model.parameters(),
                            max_checks=8, seed=0)
        assert report.passed, report.worst
        assert set(report.max_rel_error) == set(model.parameters())
        assert not report.unchecked
        assert all(report.checked[name] > 0 for name in model.parameters())
