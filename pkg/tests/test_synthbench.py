import numpy as np
import pytest

from seqtrans import synthbench
from seqtrans.datapipe import leave_one_out_split
from seqtrans.evaluator import EvalProtocol, derived_rng, sample_negatives
from seqtrans.synthbench import SynthSpec


def test_spec_validation_and_text_round_trip():
    with pytest.raises(ValueError):
        SynthSpec(K=2, P=np.array([[0.5, 0.4], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        SynthSpec(K=2, P=np.eye(3))
    with pytest.raises(ValueError):
        SynthSpec(K=0)
    spec = SynthSpec(K=3, M=4, T=5, U=6, P=synthbench.random_matrix(3, 1), seed=9)
    back = SynthSpec.from_text(spec.to_text())
    assert back.K == 3 and back.M == 4 and back.T == 5 and back.U == 6 and back.seed == 9
    assert np.array_equal(back.P, spec.P)


def test_default_is_cycle():
    spec = SynthSpec()
    assert spec.n_items == 200
    np.testing.assert_array_equal(spec.P, np.roll(np.eye(8), 1, axis=1))


def test_generate_shape_and_determinism():
    spec = SynthSpec(K=4, M=3, T=6, U=5, seed=2)
    a, b = synthbench.generate(spec), synthbench.generate(spec)
    assert a == b and len(a) == 30
    for e in a:
        assert spec.category_of(int(e.item[1:])) == int(e.category[1:])
    assert [e.timestamp for e in a[:6]] == list(range(6))
    assert synthbench.generate(SynthSpec(K=4, M=3, T=6, U=5, seed=3)) != a


def test_single_category_and_identity_walks():
    assert {e.category for e in synthbench.generate(SynthSpec(K=1, M=5, T=4, U=3))} == {"c0"}
    events = synthbench.generate(SynthSpec(K=5, M=2, T=8, U=20, P=np.eye(5)))
    for u in range(20):
        assert len({e.category for e in events[u * 8:(u + 1) * 8]}) == 1


def test_cycle_walk_follows_cycle():
    events = synthbench.generate(SynthSpec(K=8, M=3, T=10, U=4))
    for u in range(4):
        cats = [int(e.category[1:]) for e in events[u * 10:(u + 1) * 10]]
        assert all((b - a) % 8 == 1 for a, b in zip(cats, cats[1:]))


def test_empirical_transitions_converge():
    P = synthbench.random_matrix(4, 5)
    spec = SynthSpec(K=4, M=2, T=200, U=5000, P=P, seed=1)
    counts = synthbench.transition_counts(synthbench.generate(spec), 4)
    assert counts.sum() == 5000 * 199
    est = counts / counts.sum(axis=1, keepdims=True)
    assert np.abs(est - P).max() < 0.02


def _oracle(spec, negatives, split="test"):
    ds = leave_one_out_split(synthbench.generate(spec))
    return synthbench.bayes_oracle(spec, ds, EvalProtocol(negatives=negatives, cutoffs=(1, 5, 10)), split), ds


def test_cycle_with_one_item_per_category_is_perfect():
    rep, _ = _oracle(SynthSpec(K=12, M=1, T=5, U=50), negatives=None)
    assert rep.category_accuracy == 1.0 and rep.hit[1] == 1.0 and rep.ndcg[1] == 1.0


def test_cycle_with_ten_items_gives_one_tenth():
    # short walks never revisit a category, so all ten items of the next one are candidates;
    # enough users that every item is in the catalog
    rep, ds = _oracle(SynthSpec(K=8, M=10, T=3, U=2000), negatives=None)
    assert ds.maps.n_items == 80
    assert rep.category_accuracy == 1.0
    assert rep.hit[1] == pytest.approx(0.1, abs=1e-15)
    assert rep.hit[10] == 1.0


def test_uniform_transitions_give_chance_accuracy():
    K = 6
    rep, _ = _oracle(SynthSpec(K=K, M=3, T=5, U=30, P=np.full((K, K), 1 / K)), negatives=10)
    assert rep.category_accuracy == pytest.approx(1 / K, abs=1e-15)
    assert rep.category_hit[5] == pytest.approx(5 / K, abs=1e-15)


def test_oracle_expectation_matches_random_tie_breaking():
    spec = SynthSpec(K=5, M=6, T=12, U=60, P=synthbench.random_matrix(5, 3))
    protocol = EvalProtocol(negatives=8, cutoffs=(1, 3, 5))
    ds = leave_one_out_split(synthbench.generate(spec))
    rep = synthbench.bayes_oracle(spec, ds, protocol)
    rng = np.random.default_rng(0)
    draws = 400
    sim = {n: 0.0 for n in protocol.cutoffs}
    for u in range(len(ds.users)):
        _, hc, (truth, _) = ds.history(u, "test")
        row = spec.P[int(ds.maps.cat_name(hc[-1])[1:])]
        negs = sample_negatives(ds.history_set(u), ds.maps.n_items, 8, derived_rng(protocol.seed, u, "test"))
        prob = lambda i: row[spec.category_of(int(ds.maps.item_name(int(i))[1:]))]
        scores = np.array([prob(truth), *(prob(i) for i in negs)])
        for _ in range(draws):
            jitter = scores + rng.random(scores.size) * 1e-9
            r = int(np.sum(jitter > jitter[0]))
            for n in sim:
                sim[n] += r < n
    for n in protocol.cutoffs:
        assert abs(sim[n] / (draws * len(ds.users)) - rep.hit[n]) < 0.02


def test_oracle_report_lines_and_ranges():
    rep, _ = _oracle(SynthSpec(K=4, M=5, T=8, U=30, P=synthbench.random_matrix(4, 2)), negatives=5)
    for v in [rep.category_accuracy, *rep.hit.values(), *rep.ndcg.values(), *rep.category_hit.values()]:
        assert 0.0 <= v <= 1.0
    assert rep.lines()[0].startswith("bayes_category_accuracy = ")
    assert rep.hit[1] == rep.ndcg[1]


def test_expected_tie_metrics():
    assert synthbench.expected_tie_metrics(0, 0, 1) == (1.0, 1.0)
    assert synthbench.expected_tie_metrics(0, 3, 1)[0] == 0.25
    assert synthbench.expected_tie_metrics(4, 0, 5)[1] == pytest.approx(1 / np.log2(6))


def test_binomial_ceiling():
    assert synthbench.binomial_ceiling(0.5, 100) == pytest.approx(0.65)
    assert synthbench.binomial_ceiling(1.0, 10) == pytest.approx(1.0, abs=1e-5)


def test_read_matrix(tmp_path):
    path = tmp_path / "P.txt"
    path.write_text("0.5 0.5\n1 0\n")
    np.testing.assert_array_equal(synthbench.read_matrix(path), [[0.5, 0.5], [1.0, 0.0]])
