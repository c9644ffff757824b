import math

import numpy as np
import pytest

from tcqa import Executor, TrainConfig, bce_loss, load_params, save_params, train_adapter
from tcqa.adjacency import CalibrationParams, NeuralAdjacencyMatrix
from tcqa.executor import AdapterParams
from tcqa.queries import STRUCTURES, generate_queries, relations_of
from tcqa.trainer import TRAIN_STRUCTURES, bce_grad


@pytest.fixture(scope="module")
def train_queries(typed_kg):
    kg, _ = typed_kg
    out = []
    for k, label in enumerate(TRAIN_STRUCTURES):
        out += generate_queries(kg, label, 150, seed=k, split="train")
    order = np.random.default_rng(0).permutation(len(out))[:500]
    return [out[i] for i in sorted(order)]


class TestLoss:
    def test_two_entity_example(self):
        assert bce_loss([0.8, 0.3], {0}) == pytest.approx(-math.log(0.8) - math.log(0.7))
        assert bce_loss([0.8, 0.3], {0}) == pytest.approx(0.5798, abs=1e-4)

    def test_perfect_output(self):
        assert bce_loss([1.0, 0.0, 1.0, 0.0], {0, 2}) == pytest.approx(0.0, abs=1e-8)

    def test_uniform_output(self):
        assert bce_loss(np.full(6, 0.5), {1, 4}) == pytest.approx(1.3863, abs=1e-4)

    @pytest.mark.parametrize("answers", [set(), {0, 1, 2}])
    def test_preconditions(self, answers):
        with pytest.raises(ValueError):
            bce_loss([0.2, 0.4, 0.6], answers)

    def test_grad_matches_finite_difference(self, rng):
        p = rng.uniform(0.05, 0.95, 7)
        ans = {1, 5}
        _, g = bce_grad(p, ans)
        for i in range(7):
            e = np.zeros(7)
            e[i] = 1e-6
            fd = (bce_loss(p + e, ans) - bce_loss(p - e, ans)) / 2e-6
            assert g[i] == pytest.approx(fd, rel=1e-6)


class TestTraining:
    def test_zero_epochs_keeps_zero(self, matrix, graphs, train_queries):
        state = train_adapter(matrix, graphs, train_queries, TrainConfig(epochs=0))
        assert not state.calibration.alpha.any() and not state.calibration.beta.any()
        assert not state.adapter.gamma.any() and not state.adapter.mu.any()

    def test_deterministic(self, matrix, graphs, train_queries):
        cfg = TrainConfig(epochs=2, seed=5, learning_rate=1e-3)
        a = train_adapter(matrix, graphs, train_queries, cfg)
        b = train_adapter(matrix, graphs, train_queries, cfg)
        for x, y in ((a.calibration.alpha, b.calibration.alpha), (a.calibration.beta, b.calibration.beta),
                     (a.adapter.gamma, b.adapter.gamma), (a.adapter.mu, b.adapter.mu)):
            assert x.tobytes() == y.tobytes()
        assert a.loss_history == b.loss_history

    def test_threads_match_serial(self, matrix, graphs, train_queries):
        serial = train_adapter(matrix, graphs, train_queries[:100], TrainConfig(epochs=1, learning_rate=1e-3))
        pooled = train_adapter(matrix, graphs, train_queries[:100],
                               TrainConfig(epochs=1, learning_rate=1e-3, threads=3))
        np.testing.assert_allclose(serial.calibration.beta, pooled.calibration.beta, rtol=1e-12, atol=1e-15)

    def test_loss_non_increasing_early(self, matrix, graphs, train_queries):
        assert len(train_queries) == 500
        state = train_adapter(matrix, graphs, train_queries, TrainConfig(epochs=20))
        hist = state.loss_history
        assert len(hist) == 20
        assert all(b <= a + 1e-12 for a, b in zip(hist[:5], hist[1:5]))

    def test_only_reachable_parameters_change(self, matrix, graphs, typed_kg):
        kg, _ = typed_kg
        qs = [q for q in generate_queries(kg, "2i", 60, seed=9, split="train")
              if 0 not in relations_of(q.query.root)]
        used = set().union(*(relations_of(q.query.root) for q in qs))
        state = train_adapter(matrix, graphs, qs, TrainConfig(epochs=2, learning_rate=1e-2))
        cal = state.calibration
        for r in range(matrix.num_relations):
            rows = cal.keys[:, 0] == r
            if r not in used:
                assert not cal.alpha[rows].any() and not cal.beta[rows].any()
                assert state.adapter.gamma[r] == 0.0 and state.adapter.mu[r] == 0.0
        # 2i sources are anchors only, so only anchor rows may move
        anchors = {(p.relation, p.child.entity) for q in qs for p in q.query.root.children}
        moved = {tuple(k) for k, a, b in zip(cal.keys.tolist(), cal.alpha, cal.beta) if a or b}
        assert moved and moved <= anchors

    def test_structure_filter(self, matrix, graphs, typed_kg):
        kg, _ = typed_kg
        qs = generate_queries(kg, "1p", 10, seed=0, split="train")
        state = train_adapter(matrix, graphs, qs, TrainConfig(epochs=3))
        assert state.loss_history == []

    def test_bad_config(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0)
        with pytest.raises(ValueError):
            TrainConfig(structures=("5p",))


class TestParamsFile:
    def test_round_trip(self, tmp_path, matrix, graphs, train_queries):
        state = train_adapter(matrix, graphs, train_queries[:64], TrainConfig(epochs=1, learning_rate=1e-2))
        save_params(tmp_path / "p.bin", state.calibration, state.adapter)
        cal, ad = load_params(tmp_path / "p.bin", matrix)
        assert cal.keys.tobytes() == state.calibration.keys.tobytes()
        for x, y in ((cal.alpha, state.calibration.alpha), (cal.beta, state.calibration.beta),
                     (ad.gamma, state.adapter.gamma), (ad.mu, state.adapter.mu)):
            assert x.tobytes() == y.tobytes()
        save_params(tmp_path / "q.bin", cal, ad)
        assert (tmp_path / "p.bin").read_bytes() == (tmp_path / "q.bin").read_bytes()

    def test_relation_mismatch(self, tmp_path, matrix):
        other = NeuralAdjacencyMatrix.from_entries(matrix.num_entities, matrix.num_relations + 2, [0], [0], [1], [0.5])
        save_params(tmp_path / "p.bin", CalibrationParams.zeros(other), AdapterParams.zeros(other.num_relations))
        with pytest.raises(ValueError, match="relations"):
            load_params(tmp_path / "p.bin", matrix)

    def test_truncated(self, tmp_path, matrix):
        save_params(tmp_path / "p.bin", CalibrationParams.zeros(matrix), AdapterParams.zeros(matrix.num_relations))
        data = (tmp_path / "p.bin").read_bytes()
        (tmp_path / "p.bin").write_bytes(data[:-3])
        with pytest.raises(ValueError):
            load_params(tmp_path / "p.bin", matrix)

    def test_zero_params_are_neutral(self, tmp_path, matrix, graphs, rng):
        save_params(tmp_path / "p.bin", CalibrationParams.zeros(matrix), AdapterParams.zeros(matrix.num_relations))
        cal, ad = load_params(tmp_path / "p.bin", matrix)
        loaded, plain = Executor(matrix, graphs, cal, ad), Executor(matrix)
        from tcqa.queries import build_structure, structure_arity
        for label in STRUCTURES:
            n_a, n_r = structure_arity(label)
            q = build_structure(label, rng.integers(matrix.num_entities, size=n_a),
                                rng.integers(matrix.num_relations, size=n_r))
            assert loaded.execute(q).tobytes() == plain.execute(q).tobytes()
