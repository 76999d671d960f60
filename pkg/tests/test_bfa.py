import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hammerlab import bfa
from hammerlab.bfa import (
    AttackReport,
    CellLayout,
    Dataset,
    QuantizedNetwork,
    QuantLayer,
    allowed_bits,
    attack,
    batch_loss,
    build_toy_network,
    evaluate,
    flip_bit,
    load_network,
    min_level,
    network_from_bytes,
    network_to_bytes,
    save_network,
)
from hammerlab.classifier import Scheme, SecurityLevelMap, classify
from hammerlab.errors import DomainError, FileFormatError, ShapeError

import oracles


def tiny(seed, n_classes=5, dim=5, n=60):
    """One linear layer of template weights: at most 200 bits."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_classes, dim)) * 3
    y = np.tile(np.arange(n_classes), n // n_classes)
    x = centers[y] + rng.normal(size=(y.size, dim))
    w = np.clip(np.rint(centers / np.abs(centers).max() * 127), -127, 127)
    net = QuantizedNetwork((QuantLayer(w, 1 / 127, "none"),), float(np.abs(x).max()) / 127)
    return net, Dataset(x, y)


@pytest.fixture(scope="module")
def toy():
    return build_toy_network(0)


class TestNetwork:
    @pytest.mark.parametrize("w, bit, want", [(0, 7, -128), (-1, 7, 127), (5, 0, 4), (-128, 7, 0), (127, 6, 63)])
    def test_flip_bit(self, w, bit, want):
        assert flip_bit(w, bit) == want

    @given(st.integers(-128, 127), st.integers(0, 7))
    def test_flip_bit_involution(self, w, bit):
        f = flip_bit(w, bit)
        assert -128 <= f <= 127 and f != w and flip_bit(f, bit) == w

    def test_flip_bit_range(self):
        with pytest.raises(ValueError):
            flip_bit(0, 8)

    def test_layer_validation(self):
        with pytest.raises(ValueError):
            QuantLayer(np.array([[200]]), 1.0)
        with pytest.raises(ShapeError):
            QuantLayer(np.zeros(3), 1.0)
        with pytest.raises(ValueError):
            QuantLayer(np.zeros((1, 1)), 0.0)
        with pytest.raises(ValueError):
            QuantLayer(np.zeros((1, 1)), 1.0, "tanh")

    def test_chain_validation(self):
        with pytest.raises(ShapeError):
            QuantizedNetwork((QuantLayer(np.zeros((3, 2)), 1.0), QuantLayer(np.zeros((2, 4)), 1.0)), 1.0)

    def test_forward_is_exact_integer_arithmetic(self, toy):
        net, _, test = toy
        x = test.x[:5]
        got = net.forward_int(x)
        for i in range(5):
            h = [int(v) for v in net.quantize_inputs(x[i])]
            for layer in net.layers:
                w = layer.weights.tolist()
                h = [sum(a * b for a, b in zip(row, h)) for row in w]
                if layer.activation == "relu":
                    h = [max(v, 0) for v in h]
            assert got[i].tolist() == h

    def test_with_flips_leaves_original(self, toy):
        net = toy[0]
        other = net.with_flips([(0, 0, 0, 7)])
        assert other != net
        assert other.layers[0].weights[0, 0] == flip_bit(int(net.layers[0].weights[0, 0]), 7)
        assert other.with_flips([(0, 0, 0, 7)]) == net


class TestEvaluate:
    def test_empty(self, toy):
        with pytest.raises(ValueError):
            evaluate(toy[0], Dataset(np.zeros((0, 16)), np.zeros(0)))

    def test_dimension_mismatch(self, toy):
        with pytest.raises(ShapeError):
            evaluate(toy[0], Dataset(np.zeros((3, 4)), np.zeros(3)))

    def test_dataset_shape(self):
        with pytest.raises(ShapeError):
            Dataset(np.zeros((3, 4)), np.zeros(2))

    @pytest.mark.parametrize("labels, share", [([0, 0, 0, 1, 2], 0.6), ([2, 2, 0, 1], 0.25)])
    def test_zero_weights_predict_class_zero(self, labels, share):
        net = QuantizedNetwork((QuantLayer(np.zeros((3, 2)), 1.0, "none"),), 1.0)
        data = Dataset(np.ones((len(labels), 2)), np.array(labels))
        assert evaluate(net, data) == share

    @pytest.mark.parametrize("seed", range(6))
    def test_toy_fits_and_is_deterministic(self, seed):
        net, train, test = build_toy_network(seed)
        assert evaluate(net, test) >= 0.90
        again = build_toy_network(seed)
        assert again[0] == net and np.array_equal(again[2].x, test.x)
        assert np.bincount(test.y).tolist() == [100] * 10
        assert len(test) == 1000

    def test_permuted_labels_near_random_guess(self, toy):
        net, _, test = toy
        rng = np.random.default_rng(0)
        shuffled = Dataset(test.x, test.y[rng.permutation(len(test))])
        assert abs(evaluate(net, shuffled) - 0.10) < 0.04

    def test_fixture_accuracy(self, toy):
        assert evaluate(toy[0], toy[2]) == 0.992


class TestLoss:
    def test_matches_naive(self):
        rng = np.random.default_rng(1)
        z = rng.integers(-50, 50, size=(7, 4)).astype(float)
        y = rng.integers(0, 4, 7)
        want = sum(math.log(sum(math.exp(v * 0.1) for v in row)) - row[k] * 0.1 for row, k in zip(z, y)) / 7
        assert batch_loss(z, y, 0.1) == pytest.approx(want, rel=1e-12)

    def test_stacking_independent(self):
        rng = np.random.default_rng(2)
        z = rng.integers(-9, 9, size=(3, 6, 5)).astype(float)
        y = rng.integers(0, 5, 6)
        stacked = batch_loss(z, y, 0.5)
        assert stacked.tolist() == [batch_loss(z[i], y, 0.5) for i in range(3)]


class TestLayout:
    def test_inverse_and_order(self):
        lay = CellLayout(((2, 3), (4, 2)), (5, 9, 11), 64)
        assert lay.n_bits == 8 * 14
        refs = list(lay.bits())
        assert [lay.index(r) for r in refs] == list(range(lay.n_bits))
        assert refs[0] == (0, 0, 0, 7) and refs[7] == (0, 0, 0, 0) and refs[48] == (1, 0, 0, 7)
        assert lay.cell(refs[64]) == (9, 0)
        assert len({lay.cell(r) for r in refs}) == lay.n_bits

    def test_capacity(self):
        with pytest.raises(ShapeError):
            CellLayout(((4, 4),), (0,), 100)
        with pytest.raises(ShapeError):
            CellLayout(((1, 1),), (0, 0), 100)

    def test_past_end(self):
        with pytest.raises(IndexError):
            CellLayout(((1, 1),), (0,), 8).bit_at(8)


class TestAllowed:
    @pytest.mark.parametrize(
        "model, scheme, level",
        [
            ("SG", Scheme.FOUR_LEVEL, 4),
            ("VC", Scheme.FOUR_LEVEL, 3),
            ("DB", Scheme.FOUR_LEVEL, 2),
            ("SG", Scheme.THREE_LEVEL, 4),
            ("VC", Scheme.THREE_LEVEL, 3),
            ("DB", Scheme.THREE_LEVEL, 3),
            ("SG", Scheme.TWO_LEVEL, 4),
            ("VC", Scheme.TWO_LEVEL, 4),
            ("DB", Scheme.TWO_LEVEL, 4),
        ],
    )
    def test_min_level(self, model, scheme, level):
        assert min_level(model, scheme) == level

    def layout(self):
        return CellLayout(((2, 2),), (0, 1), 16)

    def test_all_level_one(self):
        cells = [(r, c) for r in (0, 1) for c in range(16)]
        m = classify([], [], [], cells)
        for model in ("SG", "VC", "DB"):
            assert allowed_bits(m, self.layout(), model) == []

    def test_uncovered_cell(self):
        m = classify([], [], [], [(0, c) for c in range(16)])
        with pytest.raises(DomainError):
            allowed_bits(m, self.layout(), "DB")

    def test_selects_by_level(self):
        lay = self.layout()
        levels = {(r, c): 1 for r in (0, 1) for c in range(16)}
        levels[(0, 0)], levels[(0, 1)], levels[(1, 0)] = 4, 3, 2
        m = SecurityLevelMap(levels, Scheme.FOUR_LEVEL)
        assert allowed_bits(m, lay, "SG") == [(0, 0, 0, 7)]
        assert allowed_bits(m, lay, "VC") == [(0, 0, 0, 7), (0, 0, 0, 6)]
        assert allowed_bits(m, lay, "DB") == [(0, 0, 0, 7), (0, 0, 0, 6), (0, 1, 0, 7)]

    @given(st.data())
    @settings(max_examples=50, deadline=None)
    def test_monotone_and_overlap(self, data):
        lay = self.layout()
        cells = [(r, c) for r in (0, 1) for c in range(16)]
        db = data.draw(st.sets(st.sampled_from(cells)))
        vc = data.draw(st.sets(st.sampled_from(sorted(db)))) if db else set()
        sg = data.draw(st.sets(st.sampled_from(sorted(vc)))) if vc else set()
        m = classify(sg, vc, db, cells, overlap_epsilon=0.0)
        got = {model: set(allowed_bits(m, lay, model)) for model in ("SG", "VC", "DB")}
        assert got["SG"] <= got["VC"] <= got["DB"]
        overlap = classify(sg, db, db, cells)
        assert set(allowed_bits(overlap, lay, "VC")) == set(allowed_bits(overlap, lay, "DB"))


class TestAttack:
    def test_no_bits(self, toy):
        rep = attack(toy[0], toy[2], [])
        assert rep.iterations == 0 and rep.reason == "no flippable bits" and len(rep.trajectory) == 1

    def test_full_access_reaches_random_guess(self, toy):
        net, _, test = toy
        rep = attack(net, test, list(CellLayout.for_network(net, (0,), net.n_bits).bits()))
        assert rep.reason == "target reached"
        assert rep.trajectory[-1] <= 0.10
        assert len(rep.trajectory) == rep.iterations + 1 == len(rep.losses) + 1
        assert len(set(rep.flipped)) == rep.iterations
        assert evaluate(net.with_flips(rep.flipped), test) == rep.trajectory[-1]

    def test_max_iters(self, toy):
        net, _, test = toy
        rep = attack(net, test, list(CellLayout.for_network(net, (0,), net.n_bits).bits()), max_iters=2)
        assert rep.iterations == 2 and rep.reason == "max_iters reached"

    def test_exhausted(self, toy):
        net, _, test = toy
        rep = attack(net, test, [(0, 0, 0, 0), (0, 0, 1, 0)])
        assert rep.iterations == 2 and rep.reason == "allowed bits exhausted"
        assert rep.trajectory[-1] > 0.10

    def test_deterministic(self, toy):
        net, _, test = toy
        bits = list(CellLayout.for_network(net, (0,), net.n_bits).bits())[::3]
        assert attack(net, test, bits, max_iters=5).to_dict() == attack(net, test, bits[::-1], max_iters=5).to_dict()

    def test_report_dict(self):
        rep = AttackReport(1, [(0, 1, 2, 7)], [0.9, 0.1], "target reached", [2.0])
        assert rep.to_dict() == {
            "iterations": 1, "flipped": [[0, 1, 2, 7]], "trajectory": [0.9, 0.1], "losses": [2.0],
            "reason": "target reached",
        }

    def test_candidate_scores_match_rebuilt_networks(self, toy):
        net, _, test = toy
        batch = test.head(64)
        cands = list(CellLayout.for_network(net, (0,), net.n_bits).bits())[::37]
        got = bfa._candidate_losses(net, net.quantize_inputs(batch.x), batch.y, cands)
        for ref, loss in zip(cands, got):
            trial = net.with_flips([ref])
            assert loss == batch_loss(trial.forward_int(batch.x), batch.y, trial.logit_scale)


@given(st.integers(0, 10_000), st.integers(0, 2**32 - 1))
@settings(max_examples=15, deadline=None)
def test_attack_matches_brute_force_greedy(seed, pick):
    net, data = tiny(seed)
    assert net.n_bits <= 200
    bits = list(CellLayout.for_network(net, (0,), 200).bits())
    rng = np.random.default_rng(pick)
    allowed = [bits[i] for i in sorted(rng.choice(len(bits), size=40, replace=False))]
    rep = attack(net, data, allowed, max_iters=3, target_acc=0.2)
    flipped, trajectory = oracles.brute_force_greedy(net, data, allowed, 3, 0.2)
    assert rep.flipped == flipped and rep.trajectory == trajectory


class TestNetworkFile:
    def test_round_trip(self, toy, tmp_path):
        net = toy[0]
        assert network_from_bytes(network_to_bytes(net)) == net
        save_network(net, tmp_path / "n.qnet")
        assert load_network(tmp_path / "n.qnet") == net

    @pytest.mark.parametrize(
        "mutate",
        [lambda b: b[:5], lambda b: b"ABCD" + b[4:], lambda b: b[:30], lambda b: b[:-1], lambda b: b + b"\0"],
    )
    def test_corrupt(self, toy, mutate):
        with pytest.raises(FileFormatError):
            network_from_bytes(mutate(network_to_bytes(toy[0])))
