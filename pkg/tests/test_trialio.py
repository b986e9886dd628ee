import json
import math

import numpy as np
import pytest

from ordsim.errors import (
    ConfigError,
    DomainError,
    DuplicateSubject,
    EmptyAfterFilter,
    ParseError,
)
from ordsim.ordcore import OrdinalCounts
from ordsim.posterior import ModelSpec
from ordsim.sampler import SamplerConfig, run_model
from ordsim.trialio import (
    TrialDataset,
    TrialSchema,
    analyze_case,
    case_csv_text,
    complete_cases,
    load_schema,
    load_trial,
    synthetic_ascot_bundle,
    write_case_outputs,
)

FAST = SamplerConfig(warmup=400, draws=500, seed=11)


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def _dataset_file(tmp_path, counts, name="d.csv", shuffle_seed=None, prefix="S"):
    rows = []
    sid = 0
    for arm in (0, 1):
        for cat, n in enumerate(counts[arm], start=1):
            for _ in range(n):
                sid += 1
                rows.append(f"{prefix}{sid},{arm},{cat}")
    if shuffle_seed is not None:
        np.random.default_rng(shuffle_seed).shuffle(rows)
    return _write(tmp_path, "subject_id,arm,outcome\n" + "\n".join(rows) + "\n", name)


def test_load_small_file(tmp_path):
    d = load_trial(_write(tmp_path, "subject_id,arm,outcome\na,0,1\nb,1,3\nc,0,\n"))
    assert len(d) == 3
    assert d.outcome.tolist() == [1, 3, 0]
    assert d.missing.tolist() == [False, False, True]


def test_tab_delimited(tmp_path):
    d = load_trial(_write(tmp_path, "subject_id\tarm\toutcome\na\t0\t1\nb\t1\t2\n"))
    assert d.arm.tolist() == [0, 1]


def test_domain_and_parse_errors(tmp_path):
    schema = TrialSchema(tuple(str(i) for i in range(1, 9)))
    with pytest.raises(DomainError, match="line 3"):
        load_trial(_write(tmp_path, "subject_id,arm,outcome\na,0,1\nb,1,9\n"), schema)
    with pytest.raises(DomainError, match="arm"):
        load_trial(_write(tmp_path, "subject_id,arm,outcome\na,2,1\n"))
    with pytest.raises(ParseError, match="line 2"):
        load_trial(_write(tmp_path, "subject_id,arm,outcome\na,0,x\n"))
    with pytest.raises(ParseError, match="expected 3 fields"):
        load_trial(_write(tmp_path, "subject_id,arm,outcome\na,0\n"))
    with pytest.raises(ParseError, match="outcome"):
        load_trial(_write(tmp_path, "subject_id,arm\na,0\n"))
    with pytest.raises(DuplicateSubject, match="line 2"):
        load_trial(_write(tmp_path, "subject_id,arm,outcome\na,0,1\na,1,2\n"))
    with pytest.raises(FileNotFoundError):
        load_trial(tmp_path / "nope.csv")


def test_schema_files(tmp_path):
    t = _write(tmp_path, 'name = "x"\nlabels = ["a", "b", "c"]\n', "s.toml")
    assert load_schema(t).labels == ("a", "b", "c")
    j = _write(tmp_path, json.dumps({"labels": ["lo", "hi"], "arm_map": {"A": 0, "B": 1}}), "s.json")
    s = load_schema(j)
    assert s.name == "s" and s.arm_map == {"A": 0, "B": 1}
    with pytest.raises(ConfigError, match="unknown"):
        load_schema(_write(tmp_path, 'labels = ["a", "b"]\ncolour = 1\n', "bad.toml"))
    with pytest.raises(FileNotFoundError, match="missing.toml"):
        load_schema(tmp_path / "missing.toml")


def test_arm_map_filters_rows(tmp_path):
    p = _write(tmp_path, "subject_id,arm,outcome\na,low,1\nb,mid,2\nc,high,2\nd,mid,1\n")
    d = load_trial(p, TrialSchema(("1", "2"), arm_map={"low": 0, "mid": 1}))
    assert d.subject_ids == ("a", "b", "d") and d.arm.tolist() == [0, 1, 1]


def test_complete_cases():
    sch = TrialSchema.default(3)
    full = TrialDataset(("a", "b"), [0, 1], [1, 2], sch)
    same, n = complete_cases(full)
    assert same is full and n == 0
    with pytest.raises(EmptyAfterFilter):
        complete_cases(TrialDataset(("a", "b"), [0, 1], [0, 0], sch))
    mixed = TrialDataset(("a", "b", "c", "d"), [0, 1, 0, 1], [1, 0, 3, 0], sch)
    kept, n = complete_cases(mixed)
    assert len(kept) + n == len(mixed) and n == 2
    assert kept.counts().n == len(kept)


@pytest.fixture(scope="module")
def po_case(tmp_path_factory):
    # seeded PO dataset: j = 5, n = 2000, odds ratio 1.3
    from ordsim.dgm import S1, SYMMETRIC, discretize_beta, gen_scenario1, sample_trial

    rng = np.random.default_rng(2024)
    tp = gen_scenario1(discretize_beta(SYMMETRIC, 5), S1(math.log(1.3), 0.0), rng)
    counts = sample_trial(tp, 2000, rng).counts
    tmp = tmp_path_factory.mktemp("case")
    path = _dataset_file(tmp, counts)
    d = load_trial(path, TrialSchema(tuple("ABCDE"), name="po5"))
    return tmp, counts, d, analyze_case(d, FAST)


def test_po_case_intervals_contain_truth(po_case):
    _, counts, d, res = po_case
    assert res.counts.n == 2000 == counts.sum()
    assert list(res.models) == ["sep-logistic", "po", "ppo-u", "cppo-linear", "cppo-last"]
    for r in res.models.values():
        assert r.ok and [c.cutpoint for c in r.cutpoints] == [2, 3, 4, 5]
        for c in r.cutpoints:
            assert c.ci_low <= math.log(1.3) <= c.ci_high, (r.model, c)


def test_case_equals_direct_run_model(po_case):
    _, counts, _, res = po_case
    oc = OrdinalCounts(counts)
    for label in ("sep-logistic", "po"):
        fit = run_model(ModelSpec.from_label(label, 5), oc, FAST)
        med = np.median(fit.draws.theta, axis=(0, 1))
        assert [c.median for c in res.models[label].cutpoints] == med.tolist()


def test_case_row_order_and_id_invariance(po_case):
    tmp, counts, _, res = po_case
    p = _dataset_file(tmp, counts, name="shuffled.csv", shuffle_seed=5, prefix="X")
    d2 = load_trial(p, TrialSchema(tuple("ABCDE"), name="po5"))
    res2 = analyze_case(d2, FAST, models=("po", "ppo-u"))
    for m in ("po", "ppo-u"):
        assert res2.models[m].cutpoints == res.models[m].cutpoints


def test_case_outputs(po_case, tmp_path):
    _, _, _, res = po_case
    jpath, cpath = write_case_outputs(res, tmp_path)
    doc = json.loads(jpath.read_text())
    assert doc["name"] == "po5" and len(doc["models"]) == 5
    lines = cpath.read_text().splitlines()
    assert len(lines) == 1 + 5 * 4
    assert lines[1].startswith("po5,sep-logistic,2,")
    assert case_csv_text(res) == cpath.read_text()


def test_null_case_medians_near_zero(tmp_path):
    counts = np.array([[40, 60, 80, 60, 40], [40, 60, 80, 60, 40]])
    d = load_trial(_dataset_file(tmp_path, counts), TrialSchema.default(5))
    res = analyze_case(d, FAST)
    for r in res.models.values():
        for c in r.cutpoints:
            sd = (c.ci_high - c.ci_low) / 3.92
            assert abs(c.median) < 3 * sd


def test_sparse_category_flags(tmp_path):
    counts = np.array([[30, 0, 25, 20, 30], [28, 6, 20, 3, 35]])
    d = load_trial(_dataset_file(tmp_path, counts), TrialSchema.default(5))
    res = analyze_case(d, FAST, models=("sep-logistic", "ppo-u"))
    assert [s["category"] for s in res.sparse] == [2, 4]
    ppo = res.models["ppo-u"]
    assert ppo.ok and {"n_divergent", "ess_bulk", "degraded"} <= set(ppo.diagnostics)


def test_prior_dominated_cutpoint(tmp_path):
    counts = np.array([[30, 20, 0], [25, 20, 5]])
    d = load_trial(_dataset_file(tmp_path, counts), TrialSchema.default(3))
    res = analyze_case(d, FAST, models=("sep-logistic",))
    flags = {c.cutpoint: c.prior_dominated for c in res.models["sep-logistic"].cutpoints}
    assert flags == {2: False, 3: True}


def test_model_failure_isolated(tmp_path, monkeypatch):
    import ordsim.trialio as tio
    from ordsim.errors import InitFailure

    real = tio.run_model

    def flaky(spec, data, cfg):
        if spec.kind == "ppo-u":
            raise InitFailure("no start")
        return real(spec, data, cfg)

    monkeypatch.setattr(tio, "run_model", flaky)
    counts = np.array([[10, 10, 10], [10, 10, 10]])
    d = load_trial(_dataset_file(tmp_path, counts), TrialSchema.default(3))
    res = tio.analyze_case(d, SamplerConfig(warmup=150, draws=50), models=("po", "ppo-u"))
    assert res.models["po"].ok and not res.models["ppo-u"].ok
    assert "InitFailure" in res.models["ppo-u"].error


def test_bundle(tmp_path):
    files = synthetic_ascot_bundle(tmp_path)
    assert [p.stem for p, _ in files] == ["who8", "mmrc5", "free_days_a", "free_days_b"]
    for dpath, spath in files:
        schema = load_schema(spath)
        d, _ = complete_cases(load_trial(dpath, schema))
        c = d.counts()
        assert c.arm_totals.min() > 100
        if schema.j == 29:
            assert (c.counts.sum(axis=0) == 0).sum() >= 7
    again = tmp_path / "again"
    synthetic_ascot_bundle(again)
    assert (again / "who8.csv").read_bytes() == (tmp_path / "who8.csv").read_bytes()
