import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from structok import downstream as D
from structok import lm
from structok import tokenizer as T
from structok.errors import ConfigError, DataError, DegenerateInputError
from structok.textenc import TextFeatConfig

from oracles import ref_auroc_pairs


# --- fuse --------------------------------------------------------------------

def test_fuse_layout():
    s = np.array([1.0, 2.0, 3.0, 4.0])
    t = np.array([5.0, 6.0, 7.0])
    f = D.fuse(s, t)
    assert f.shape == (7,)
    assert np.array_equal(f[:4], s)
    assert np.array_equal(f[4:], t)


def test_fuse_single_sides():
    t = np.array([1.0, 2.0])
    assert np.array_equal(D.fuse(None, t), t)
    assert np.array_equal(D.fuse(t, None), t)
    with pytest.raises(DataError):
        D.fuse(None, None)


# --- logistic heads ------------------------------------------------------------

def test_fit_head_separable():
    X = np.array([[0.0, 1.0], [0.0, 2.0], [1.0, -1.0], [1.0, -2.0]])
    y = np.array([1.0, 1.0, 0.0, 0.0])
    head = D.fit_head(X, y, D.HeadConfig(l2=1e-4, epochs=400, lr=0.1))
    pred = (D.predict_scores(head, X)[:, 0] > 0.5).astype(float)
    assert np.array_equal(pred, y)


def test_fit_head_huge_l2_collapses_to_prior():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(100, 3))
    y = (rng.random(100) < 0.3).astype(float)
    head = D.fit_head(X, y, D.HeadConfig(l2=1e6, epochs=500, lr=0.1))
    assert np.abs(head.weights).max() < 1e-3
    prior = y.mean()
    scores = D.predict_scores(head, X)[:, 0]
    assert np.allclose(scores, prior, atol=0.05)


def test_fit_head_skips_single_class_labels():
    X = np.array([[0.0], [1.0], [2.0]])
    Y = np.column_stack([np.array([1.0, 1.0, 1.0]), np.array([1.0, 0.0, 0.0])])
    head = D.fit_head(X, Y, D.HeadConfig(epochs=50), label_names=["allpos", "ok"])
    assert head.skipped_labels == ["allpos"]
    assert np.all(head.weights[0] == 0.0)
    # smoothed prior bias keeps the skipped label finite
    assert np.isfinite(head.bias[0])


def test_fit_head_dimension_mismatch():
    with pytest.raises(DataError):
        D.fit_head(np.zeros((3, 2)), np.zeros((4, 1)), D.HeadConfig())


def test_fit_head_matches_convex_oracle():
    # independent minimizer (scipy L-BFGS on a freshly written objective)
    from scipy.optimize import minimize

    rng = np.random.default_rng(3)
    n, dim = 200, 5
    X = rng.normal(size=(n, dim))
    w_true = rng.normal(size=dim)
    y = (rng.random(n) < 1.0 / (1.0 + np.exp(-(X @ w_true)))).astype(float)
    l2 = 1e-3

    head = D.fit_head(X, y, D.HeadConfig(l2=l2, epochs=800, lr=0.1))
    ours = D.head_loss(head, X, y)

    def objective(theta):
        w, b = theta[:dim], theta[dim]
        z = X @ w + b
        loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * (w @ w)
        p = 1.0 / (1.0 + np.exp(-z))
        gw = X.T @ (p - y) / n + l2 * w
        gb = np.mean(p - y)
        return loss, np.concatenate([gw, [gb]])

    res = minimize(objective, np.zeros(dim + 1), jac=True, method="L-BFGS-B",
                   options={"maxiter": 2000, "ftol": 1e-14, "gtol": 1e-12})
    assert ours <= res.fun + 1e-3
    assert abs(ours - res.fun) < 1e-3


def test_predict_scores_zero_head_is_half():
    head = D.LogRegHead(weights=np.zeros((4, 3)), bias=np.zeros(4),
                        label_names=list("abcd"), l2=0.0)
    scores = D.predict_scores(head, np.ones(3))
    assert np.allclose(scores, 0.5)


def test_predict_scores_monotone_in_positive_weight():
    head = D.LogRegHead(weights=np.array([[2.0, 0.0]]), bias=np.zeros(1),
                        label_names=["x"], l2=0.0)
    lo = D.predict_scores(head, np.array([0.1, 0.0]))[0]
    hi = D.predict_scores(head, np.array([0.9, 0.0]))[0]
    assert hi > lo


def test_predict_scores_batch_equals_single():
    rng = np.random.default_rng(1)
    head = D.LogRegHead(weights=rng.normal(size=(3, 4)), bias=rng.normal(size=3),
                        label_names=list("abc"), l2=0.0)
    X = rng.normal(size=(5, 4))
    batch = D.predict_scores(head, X)
    for i in range(5):
        assert np.allclose(batch[i], D.predict_scores(head, X[i]))


def test_predict_scores_dim_mismatch():
    head = D.LogRegHead(weights=np.zeros((1, 3)), bias=np.zeros(1),
                        label_names=["x"], l2=0.0)
    with pytest.raises(DataError):
        D.predict_scores(head, np.zeros(5))


# --- recall@k ------------------------------------------------------------------

def test_recall_truth_fully_in_topk():
    scores = np.array([[0.9, 0.8, 0.1, 0.2, 0.3, 0.05, 0.0, 0.0]])
    assert D.recall_at_k(scores, [{0, 1}], 5) == 1.0


def test_recall_denominator_is_truth_size():
    scores = np.zeros((1, 12))
    scores[0, :5] = np.arange(5, 0, -1)
    truth = [set(range(10))]  # 10 true labels, top-5 hits 5 of them
    assert D.recall_at_k(scores, truth, 5) == 0.5


def test_recall_tie_at_k_breaks_by_label_id():
    scores = np.array([[0.5, 0.5, 0.5, 0.5]])
    # all tied: top-2 must be labels {0, 1}
    assert D.recall_at_k(scores, [{0, 1}], 2) == 1.0
    assert D.recall_at_k(scores, [{2, 3}], 2) == 0.0


def test_recall_excludes_empty_truth():
    scores = np.array([[1.0, 0.0], [0.5, 0.6]])
    value = D.recall_at_k(scores, [{0}, set()], 1)
    assert value == 1.0
    with pytest.raises(DegenerateInputError):
        D.recall_at_k(scores, [set(), set()], 1)


def test_recall_k_validation():
    with pytest.raises(ConfigError):
        D.recall_at_k(np.zeros((1, 2)), [{0}], 0)


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_recall_monotone_in_k(seed):
    rng = np.random.default_rng(seed)
    scores = rng.random((6, 9))
    truths = [set(rng.choice(9, size=rng.integers(1, 5), replace=False).tolist())
              for _ in range(6)]
    values = [D.recall_at_k(scores, truths, k) for k in range(1, 10)]
    assert all(a <= b + 1e-12 for a, b in zip(values, values[1:]))
    assert values[-1] == 1.0  # k >= n_labels catches every truth


# --- auroc ----------------------------------------------------------------------

def test_auroc_perfect_and_tied():
    assert D.auroc([0.9, 0.1], [1, 0]) == 1.0
    assert D.auroc([0.1, 0.9], [1, 0]) == 0.0
    assert D.auroc([0.5, 0.5], [1, 0]) == 0.5


def test_auroc_degenerate_raises():
    with pytest.raises(DegenerateInputError):
        D.auroc([0.4, 0.6], [1, 1])
    with pytest.raises(DegenerateInputError):
        D.auroc([0.4, 0.6], [0, 0])


def test_auroc_matches_pair_counting_oracle():
    rng = np.random.default_rng(17)
    for trial in range(200):
        n = int(rng.integers(2, 51))
        # quantized scores force plenty of ties
        scores = np.round(rng.random(n), 1)
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        expected = ref_auroc_pairs(scores.tolist(), labels.tolist())
        assert D.auroc(scores, labels) == expected


def test_auroc_flip_labels_sums_to_one():
    rng = np.random.default_rng(2)
    scores = rng.random(30)
    labels = rng.integers(0, 2, size=30)
    labels[0], labels[1] = 0, 1
    assert D.auroc(scores, labels) + D.auroc(scores, 1 - labels) == pytest.approx(1.0)


def test_auroc_invariant_under_monotone_transform():
    rng = np.random.default_rng(4)
    scores = rng.random(25)
    labels = rng.integers(0, 2, size=25)
    labels[0], labels[1] = 0, 1
    assert D.auroc(scores, labels) == D.auroc(np.exp(3 * scores), labels)


# --- split and benchmark ---------------------------------------------------------

def test_split_disjoint_union_deterministic():
    pids = [f"p{i}" for i in range(500)]
    split = D.split_patients(pids, seed=9)
    again = D.split_patients(pids, seed=9)
    assert split == again
    train = {p for p, is_tr in split.items() if is_tr}
    test = {p for p, is_tr in split.items() if not is_tr}
    assert train | test == set(pids)
    assert train & test == set()
    assert 0.7 < len(train) / 500 < 0.9
    other = D.split_patients(pids, seed=10)
    assert other != split


@pytest.fixture(scope="module")
def bench_setup():
    from structok.corpus import SynthConfig, generate_synthetic

    corpus, truth = generate_synthetic(
        SynthConfig(n_patients=150, n_codes=80, n_conditions=6, text_template_vocab=3, seed=21))
    tok = T.train(corpus, T.TrainerConfig(target_vocab_size=5 + 80 + 12))
    seqs = [T.encode(tok, t) for t in corpus.patients]
    mcfg = lm.ModelConfig(vocab_size=tok.vocab_size, context_length=96,
                          model_dim=32, n_heads=4, n_layers=1)
    params, _ = lm.train_lm(seqs, mcfg, lm.TrainConfig(steps=60, batch_size=16, seed=0))
    tasks = [
        D.TaskSpec("new_code_assignment", D.KIND_CODES, "new_code_assignment", k=(5, 7)),
        D.TaskSpec("cond0_present", D.KIND_BINARY, "cond0_present"),
    ]
    return corpus, tok, mcfg, params, tasks


def test_run_benchmark_text_only_has_no_model_hash(bench_setup):
    corpus, tok, mcfg, params, tasks = bench_setup
    report = D.run_benchmark(corpus, tok, None, None, tasks, settings=("text",), seed=1,
                             head_cfg=D.HeadConfig(epochs=40),
                             text_cfg=TextFeatConfig(n_buckets=128))
    assert "model" not in report["config_hashes"]
    assert set(report["results"]) == {"text"}
    entry = report["results"]["text"]["new_code_assignment"]
    assert 0.0 <= entry["metrics"]["recall@5"] <= 1.0


def test_run_benchmark_deterministic_and_frozen(bench_setup):
    corpus, tok, mcfg, params, tasks = bench_setup
    before = {k: v.copy() for k, v in params.items()}
    kwargs = dict(settings=("text", "element", "bpe"), seed=2,
                  head_cfg=D.HeadConfig(epochs=40), text_cfg=TextFeatConfig(n_buckets=128))
    a = D.run_benchmark(corpus, tok, mcfg, params, tasks, **kwargs)
    b = D.run_benchmark(corpus, tok, mcfg, params, tasks, **kwargs)
    assert D.report_to_json(a) == D.report_to_json(b)
    # probe fitting never touches the LM parameters
    assert all(np.array_equal(before[k], params[k]) for k in params)
    for setting in ("text", "element", "bpe"):
        assert "auroc" in a["results"][setting]["cond0_present"]["metrics"]


def test_run_benchmark_missing_label_is_per_task_error(bench_setup):
    corpus, tok, mcfg, params, _ = bench_setup
    tasks = [
        D.TaskSpec("ghost", D.KIND_BINARY, "no_such_field"),
        D.TaskSpec("cond0_present", D.KIND_BINARY, "cond0_present"),
    ]
    report = D.run_benchmark(corpus, tok, None, None, tasks, settings=("text",), seed=3,
                             head_cfg=D.HeadConfig(epochs=20),
                             text_cfg=TextFeatConfig(n_buckets=64))
    res = report["results"]["text"]
    assert "error" in res["ghost"]
    assert "metrics" in res["cond0_present"]


def test_run_benchmark_vocab_mismatch(bench_setup):
    corpus, tok, mcfg, params, tasks = bench_setup
    bad_cfg = lm.ModelConfig(vocab_size=tok.vocab_size + 1)
    with pytest.raises(DataError):
        D.run_benchmark(corpus, tok, bad_cfg, params, tasks, settings=("bpe",))


def test_format_report_table(bench_setup):
    corpus, tok, mcfg, params, tasks = bench_setup
    report = D.run_benchmark(corpus, tok, None, None, tasks, settings=("text",), seed=1,
                             head_cfg=D.HeadConfig(epochs=10),
                             text_cfg=TextFeatConfig(n_buckets=64))
    table = D.format_report_table(report)
    assert "setting" in table and "text" in table
    assert "recall@5" in table
