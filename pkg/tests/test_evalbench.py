import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unlearnlab.data import ConceptSpec, generate
from unlearnlab.evalbench.gapratio import (
    HIGHER,
    LOWER,
    BenchmarkTable,
    TableFormatError,
    UndefinedGapRatioError,
    gap_ratio,
    parse_table,
    benchmark_table,
)
from unlearnlab.evalbench.scaling import eval_scaling, linear_fit
from unlearnlab.evalbench.similarity import concept_similarity, similarity_matrix
from unlearnlab.evalbench.sweep import lambda_sweep
from unlearnlab.evalbench.zeroshot import (
    MissingPrototypeError,
    ZeroShotEvaluator,
    search_batch,
    search_evaluator,
    true_label_rank,
    zero_shot_eval,
)
from unlearnlab.model import DualEncoder
from unlearnlab.objectives import PairBatch
from unlearnlab.unlearn import slug_run

from helpers import embedding_model, task


@pytest.fixture(scope="module")
def unlearned():
    pools, model, split = task(0)
    result = slug_run(model, split.forget, split.retain, search_evaluator(split), 10, concepts=split.targets)
    return pools, model, split, result


# -- zero-shot -------------------------------------------------------------------


def test_embedding_equal_to_prototype_predicts_it():
    m = embedding_model(3)
    protos = np.eye(3)
    batch = PairBatch([[0.0, 2.0, 0.0]], [[0.0, 1.0, 0.0]], [1])
    r = zero_shot_eval(m, batch, protos, [1])
    assert (r.fa1, r.n_forget, r.n_retain) == (1.0, 1, 0)


def test_rank_ties_go_to_lower_index():
    scores = np.array([[0.5, 0.5, 0.1], [0.5, 0.5, 0.1]])
    assert true_label_rank(scores, np.array([0, 1])).tolist() == [0, 1]


def test_permuted_prototypes_give_chance_accuracy():
    pools, model, _ = task(0)
    rng = np.random.default_rng(0)
    accs = [zero_shot_eval(model, pools.test, pools.text_prototypes[rng.permutation(8)], []).ta1 for _ in range(200)]
    assert abs(np.mean(accs) - 1 / 8) <= 0.1


def test_top5_saturates_with_five_concepts():
    p = generate(ConceptSpec(n_concepts=5, n_train=3, n_test=4, seed=1))
    for seed in range(3):
        r = zero_shot_eval(DualEncoder.init(seed=seed), p.test, p.text_prototypes, [0, 2])
        assert r.fa5 == 1.0 and r.ta5 == 1.0
        assert r.fa1 <= r.fa5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 9))
def test_accuracy_monotone_in_k(seed, k):
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=(20, k))
    labels = rng.integers(0, k, 20)
    rank = true_label_rank(scores, labels)
    assert ((rank >= 0) & (rank < k)).all()
    assert [(rank < j).mean() for j in range(1, k + 1)] == sorted((rank < j).mean() for j in range(1, k + 1))


def test_missing_prototype():
    m = embedding_model(2)
    with pytest.raises(MissingPrototypeError):
        zero_shot_eval(m, PairBatch([[1.0, 0.0]], [[1.0, 0.0]], [3]), np.eye(2), [0])


def test_search_batch_composition():
    _, _, split = task(0, [2])
    b = search_batch(split)
    assert (b.labels == 2).sum() == 50 + 50  # training pairs plus held-out rows
    assert not set(b.labels[b.labels != 2]) - set(split.validation.labels)
    assert len(b) == 100 + 3 * 7
    with pytest.raises(ValueError):
        ZeroShotEvaluator(split.validation.where(split.validation.labels != 2), split.prototypes, [2])
    with pytest.raises(ValueError):
        ZeroShotEvaluator(b, split.prototypes, [2], topk=3)


# -- similarity --------------------------------------------------------------------


def test_trained_model_diagonal_dominates():
    pools, model, split = task(0)
    sim = concept_similarity(model, split.test, split.prototypes)
    assert sim.diagonal().mean() > sim.off_diagonal_mean() + 0.2


def test_forget_diagonal_drops(unlearned):
    pools, model, split, result = unlearned
    before = concept_similarity(model, split.test, split.prototypes)
    after = concept_similarity(result.model, split.test, split.prototypes)
    c = split.targets[0]
    assert before.entry(c, c) - after.entry(c, c) > 0.3


@pytest.mark.xfail(strict=True, reason="a single-layer edit on the toy also moves other concepts' diagonals")
def test_other_diagonals_nearly_unchanged(unlearned):
    pools, model, split, result = unlearned
    before = concept_similarity(model, split.test, split.prototypes)
    after = concept_similarity(result.model, split.test, split.prototypes)
    others = [k for k in range(8) if k not in split.targets]
    assert max(abs(before.entry(k, k) - after.entry(k, k)) for k in others) < 0.05


def test_similarity_range_and_csv():
    pools, model, _ = task(1)
    sim = similarity_matrix(model, pools.test.vision[:10], pools.text_prototypes)
    assert sim.values.shape == (10, 8)
    assert (np.abs(sim.values) <= 1.0).all()
    lines = sim.to_csv().splitlines()
    assert lines[0] == "row," + ",".join(map(str, range(8))) and len(lines) == 11
    with pytest.raises(ValueError):
        similarity_matrix(model, np.empty((0, 32)), pools.text_prototypes)


# -- sweep ---------------------------------------------------------------------------


def test_sweep_zero_row_and_determinism(unlearned):
    pools, model, split, result = unlearned
    ev = search_evaluator(split)
    grid = [0.0, result.delta.lam, 2 * result.delta.lam]
    s1 = lambda_sweep(model, result.delta.direction, grid, ev)
    s2 = lambda_sweep(model, result.delta.direction, grid, ev)
    assert s1.report_at(0.0).to_dict() == ev.report(model).to_dict()
    assert s1.report_at(0.0).fa1 > 0.9
    assert s1.report_at(result.delta.lam).fa1 == 0.0
    assert s1.to_csv() == s2.to_csv()
    assert s1.to_csv().splitlines()[0] == "lambda,FA@1,FA@5,TA@1"


def test_sweep_validation(unlearned):
    pools, model, split, result = unlearned
    ev = search_evaluator(split)
    with pytest.raises(ValueError):
        lambda_sweep(model, result.delta.direction, [], ev)
    with pytest.raises(ValueError):
        lambda_sweep(model, result.delta.direction, [1.0, 0.5], ev)
    with pytest.raises(KeyError):
        lambda_sweep(model, result.delta.direction, [1.0], ev, layer="text.fc9")


# -- scaling --------------------------------------------------------------------------


def test_scaling_sizes_and_fa():
    pools, model, split = task(0)
    res = eval_scaling(model, split.test, split.prototypes, split.targets, [0.2, 0.5, 1.0], repeats=1)
    assert [r.size for r in res.rows] == [80, 200, 400]
    full = res.rows[-1].fa1
    assert all(r.fa1 >= 0.2 * full for r in res.rows)
    with pytest.raises(ValueError):
        eval_scaling(model, split.test, split.prototypes, split.targets, [0.0])


def test_linear_fit_exact():
    slope, intercept, r2 = linear_fit([1, 2, 3, 4], [3, 5, 7, 9])
    assert (slope, intercept, r2) == pytest.approx((2.0, 1.0, 1.0), abs=1e-12)


# -- gap ratio ------------------------------------------------------------------------


def _table(values, orient=(HIGHER, LOWER), best=None):
    metrics = ("acc", "time")
    return BenchmarkTable(tuple(f"m{i}" for i in range(len(values))), metrics, np.array(values, float),
                          dict(zip(metrics, orient)), best)


def test_gap_ratio_hand_example():
    r = gap_ratio(_table([[0.8, 10.0], [0.4, 5.0]]))
    np.testing.assert_allclose(r.vectors["m0"], [0.0, 1.0])
    np.testing.assert_allclose(r.vectors["m1"], [0.5, 0.0])
    assert r.mean("m0") == pytest.approx(0.5) and r.l2("m1") == pytest.approx(0.25)


def test_single_method_is_its_own_best():
    r = gap_ratio(_table([[0.3, 2.0]]))
    assert not r.vectors["m0"].any()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0.01, 100), st.floats(0.01, 100)), min_size=1, max_size=8),
       st.floats(0.01, 100))
def test_gap_ratio_scale_invariant(rows, c):
    base = gap_ratio(_table(rows))
    scaled = np.array(rows) * [c, 1.0]
    other = gap_ratio(_table(scaled))
    for m in base.vectors:
        np.testing.assert_allclose(base.vectors[m], other.vectors[m], rtol=1e-9, atol=1e-12)
        assert (base.vectors[m] >= 0).all()


def test_zero_best_is_undefined():
    with pytest.raises(UndefinedGapRatioError):
        gap_ratio(_table([[0.5, 0.0], [0.4, 1.0]]))


def test_explicit_best_row():
    r = gap_ratio(_table([[0.5, 2.0]], best={"acc": 1.0, "time": 1.0}))
    np.testing.assert_allclose(r.vectors["m0"], [0.5, 1.0])
    r = gap_ratio(_table([[0.5, 2.0]], best={"acc": 1.0, "time": 1.0}), use_explicit_best=False)
    assert not r.vectors["m0"].any()


def test_shipped_table_layout():
    t = benchmark_table()
    assert len(t.entries) == 9 and "memory+storage" in t.entries
    assert t.best is not None and "Best" not in t.methods
    r = gap_ratio(t)
    assert set(r.groups) == {"effectiveness", "efficiency"}
    assert len(r.groups["effectiveness"]) == 7 and len(r.groups["efficiency"]) == 2
    header = r.to_csv().splitlines()[0].split(",")
    assert header[0] == "method" and "GR_memory+storage" in header


def test_parse_table():
    text = "orientation,higher,lower\nmethod,acc,time\nA,0.5,2\nBest,1,1\n"
    t = parse_table(text)
    assert t.methods == ("A",) and t.best == {"acc": 1.0, "time": 1.0}


@pytest.mark.parametrize("text", [
    "method,acc\nA,1\n",
    "orientation,higher\nmethod,acc\n",
    "orientation,higher,lower\nmethod,acc,time\nA,1\n",
    "orientation,sideways\nmethod,acc\nA,1\n",
    "orientation,higher\nmethod,acc\nA,fast\n",
    "orientation,higher\nmethod,acc\nBest,1\n",
])
def test_parse_table_errors(text):
    with pytest.raises(TableFormatError):
        parse_table(text)


def test_combined_entry_uses_best_attained_sum():
    # per-metric bests 1 + 0 are never attained together; the best summed value is 2
    t = BenchmarkTable(("a", "b"), ("mem", "disk"), np.array([[1.0, 1.0], [3.0, 0.0]]),
                       {"mem": LOWER, "disk": LOWER}, best={"mem": 1.0, "disk": 0.0},
                       combine={"mem+disk": ("mem", "disk")}, groups={"eff": ("mem+disk",)})
    r = gap_ratio(t)
    assert r.best.tolist() == [2.0]
    np.testing.assert_allclose([r.vectors["a"][0], r.vectors["b"][0]], [0.0, 0.5])
    assert r.group("b", "eff") == {"l1": 0.5, "l2": 0.5}
