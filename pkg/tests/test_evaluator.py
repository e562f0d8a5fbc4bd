import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mccf.evaluator import (AttentionDump, EvalReport, clip_ratings, cluster_separation,
                            evaluate, export_attention, pick_export_user, predict_edges,
                            rmse_mae)
from mccf.gradcheck import toy_graph
from mccf.graph import BipartiteGraph, RatingEdge
from mccf.model import MCCF, ModelConfig


class TestMetrics:
    def test_examples(self):
        rmse, mae = rmse_mae([1, 2], [1, 4])
        assert rmse == pytest.approx(math.sqrt(2), abs=1e-15) and mae == 1.0
        assert rmse_mae([3, 4], [3, 4]) == (0.0, 0.0)
        np.testing.assert_array_equal(clip_ratings([5.7, 0.2, 3.3], 5), [5.0, 1.0, 3.3])

    def test_empty(self):
        with pytest.raises(ValueError):
            rmse_mae([], [])

    @settings(max_examples=100)
    @given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-3, 9)), st.integers(0, 10_000))
    def test_rmse_ge_mae_and_clipping_helps(self, pred, seed):
        tgt = np.random.default_rng(seed).integers(1, 6, pred.size).astype(float)
        rmse, mae = rmse_mae(pred, tgt)
        assert rmse >= mae - 1e-12 >= -1e-12
        assert rmse_mae(clip_ratings(pred, 5), tgt)[0] <= rmse + 1e-12

    def test_report_formats(self):
        rep = EvalReport(0.9, 0.7, 10, 1)
        assert rep.as_line() == "rmse=0.900000,mae=0.700000,n_scored=10,n_fallback=1"
        assert rep.as_block().splitlines()[0] == "rmse=0.9"


class TestEvaluate:
    def test_cold_pair_uses_global_mean(self):
        g = BipartiteGraph(3, 3, 5, [0, 0, 1], [0, 1, 1], [5, 3, 4])
        model = MCCF(3, 3, ModelConfig(n_components=2, dim=4), rng=0)
        edges = [RatingEdge(2, 2, 2), RatingEdge(0, 1, 3)]
        pred, cold = predict_edges(model, g, edges)
        np.testing.assert_array_equal(cold, [True, False])
        assert pred[0] == 4.0
        rep = evaluate(model, g, edges)
        assert rep.n_scored == 2 and rep.n_fallback == 1

    def test_predictions_clipped_and_deterministic(self):
        g = toy_graph()
        model = MCCF(3, 4, ModelConfig(n_components=2, dim=4), rng=1)
        for t in model.params.values():
            t.data = t.data * 40  # push raw outputs outside [1, 5]
        pred, _ = predict_edges(model, g, g.edges)
        assert np.all((pred >= 1) & (pred <= 5))
        assert evaluate(model, g, g.edges) == evaluate(model, g, g.edges)

    def test_empty_test_set(self):
        g = toy_graph()
        with pytest.raises(ValueError):
            evaluate(MCCF(3, 4, ModelConfig(dim=4), rng=0), g, [])


class TestAttentionExport:
    def _graph(self):
        # user 0 rated every item
        cells = [(0, i, 1 + i % 5) for i in range(6)] + [(1, 0, 4), (1, 3, 2), (2, 5, 5)]
        return BipartiteGraph(3, 6, 5, *map(list, zip(*cells)))

    def test_rows_are_distributions(self):
        g = self._graph()
        model = MCCF(3, 6, ModelConfig(n_components=3, dim=4), rng=0)
        dump = export_attention(model, g, "all items", labels=[0, 0, 1, 1, 2, 2])
        node, comp = dump.of_level("node"), dump.of_level("component")
        assert [r.entity_id for r in node] == list(range(6)) and all(r.idx == 0 for r in node)
        assert len(comp) == 6
        np.testing.assert_allclose(dump.matrix("node").sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(dump.matrix("component").sum(axis=1), 1.0, atol=1e-9)
        assert [r.label for r in comp] == [0, 0, 1, 1, 2, 2]

    def test_single_component_rows_are_one(self):
        g = self._graph()
        dump = export_attention(MCCF(3, 6, ModelConfig(n_components=1, dim=4), rng=0), g, 1)
        assert all(r.weights == (1.0,) for r in dump.rows)
        assert {r.entity_id for r in dump.of_level("node")} == {0, 3}

    def test_empty_neighborhood_and_range(self):
        g = BipartiteGraph(2, 2, 5, [0], [0], [3])
        model = MCCF(2, 2, ModelConfig(dim=4), rng=0)
        with pytest.raises(ValueError, match="empty"):
            export_attention(model, g, 1)
        with pytest.raises(ValueError, match="range"):
            export_attention(model, g, 5)

    def test_csv_round_trip(self, tmp_path):
        g = self._graph()
        dump = export_attention(MCCF(3, 6, ModelConfig(n_components=2, dim=4), rng=3), g,
                                labels=[1, 0, 1, 0, 1, 0])
        dump.write_csv(tmp_path / "a.csv")
        assert (tmp_path / "a.csv").read_text().splitlines()[0] == "entity_id,level,idx,w_0,w_1,label"
        back = AttentionDump.read_csv(tmp_path / "a.csv")
        assert back == dump

    def test_pick_export_user(self):
        assert pick_export_user(self._graph()) == 0
        with pytest.raises(ValueError):
            pick_export_user(BipartiteGraph(2, 2, 5, [], [], []))


class TestClusterSeparation:
    def test_separated_and_mixed(self):
        w = np.array([[1, 0, 0], [0.9, 0.1, 0], [0, 1, 0], [0, 0.9, 0.1]])
        intra, inter = cluster_separation(w, [0, 0, 1, 1])
        assert intra > 0.99 and inter < 0.15
        intra, inter = cluster_separation(w, [0, 1, 0, 1])
        assert intra < inter
