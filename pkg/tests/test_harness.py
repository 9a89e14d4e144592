import csv
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from dira import harness as H
from dira.errors import ConfigError, FormatError

FIXTURES = Path(__file__).parent / "golden"


def small_config(out, **kw) -> H.ExperimentConfig:
    base = dict(dataset="digits", hidden=[4, 6], corruptions=["gaussian_noise", "contrast"],
                sample_counts=[1, 5], n_seeds=2, epochs=2, eta=1e-2, lam=10.0,
                source_max_epochs=4, fisher_samples=40, output_dir=str(out))
    base.update(kw)
    return H.ExperimentConfig(**base)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    cfg = small_config(tmp_path_factory.mktemp("run"))
    metrics = H.cmd_train_source(cfg)
    return cfg, metrics


def test_train_source_writes_artifacts(trained):
    cfg, metrics = trained
    out = Path(cfg.output_dir)
    for name in ("m0.dira", "f0.dirf", "source_metrics.json", "train-source.config.json"):
        assert (out / name).is_file()
    assert json.loads((out / "source_metrics.json").read_text()) == json.loads(json.dumps(metrics))
    assert H.ExperimentConfig.from_dict(json.loads((out / "train-source.config.json").read_text())) == cfg
    H.require_artifacts(cfg)


def test_train_source_rerun_identical(trained, tmp_path):
    cfg, _ = trained
    again = replace(cfg, output_dir=str(tmp_path))
    H.cmd_train_source(again)
    for name in ("m0.dira", "f0.dirf", "source_metrics.json"):
        assert (tmp_path / name).read_bytes() == (Path(cfg.output_dir) / name).read_bytes()


def test_synthetic_source_accuracy(tmp_path):
    cfg = H.ExperimentConfig(dataset="synthetic", architecture="mlp", hidden=[16], output_dir=str(tmp_path),
                             source_eta=0.1, source_momentum=0.0, source_lr_drops=0, fisher_samples=50)
    assert H.cmd_train_source(cfg)["top1_source_test"] >= 0.99


def test_missing_dataset_fails_before_compute(tmp_path):
    cfg = H.ExperimentConfig(dataset=str(tmp_path / "nope"), output_dir=str(tmp_path / "out"))
    with pytest.raises(ConfigError):
        H.cmd_train_source(cfg)
    assert not (tmp_path / "out").exists()


def test_sweep_rows_and_order(trained):
    cfg, _ = trained
    rows = H.cmd_sweep(cfg)
    assert len(rows) == 2 * 2 * 4 * 2
    keys = [(cfg.corruptions.index(r.corruption_kind), r.n_samples, H.METHODS.index(r.method), r.seed) for r in rows]
    assert keys == sorted(keys)
    assert H.read_rows(Path(cfg.output_dir) / "sweep.csv") == rows


def test_source_rows_constant_across_n(trained):
    cfg, _ = trained
    rows = H.read_rows(Path(cfg.output_dir) / "sweep.csv") if (Path(cfg.output_dir) / "sweep.csv").exists() \
        else H.cmd_sweep(cfg)
    for kind in cfg.corruptions:
        for s in H.rep_seeds(cfg):
            vals = {(r.top1_source_test, r.top1_target_test) for r in rows
                    if r.method == "source" and r.corruption_kind == kind and r.seed == s}
            assert len(vals) == 1


def test_csv_header_exact(trained):
    cfg, _ = trained
    H.cmd_sweep(cfg)
    with open(Path(cfg.output_dir) / "sweep.csv") as fh:
        assert next(csv.reader(fh)) == ["method", "corruption_kind", "severity", "n_samples", "seed",
                                        "top1_source_test", "top1_target_test", "wall_ms"]


def test_sweep_threads_match_serial(trained, tmp_path, monkeypatch):
    cfg, _ = trained
    serial = H.cmd_sweep(cfg)
    text = (Path(cfg.output_dir) / "sweep.csv").read_bytes()
    monkeypatch.setenv("DIRA_THREADS", "2")
    assert H.cmd_sweep(cfg) == serial
    assert (Path(cfg.output_dir) / "sweep.csv").read_bytes() == text


def test_bad_threads_env(trained, monkeypatch):
    monkeypatch.setenv("DIRA_THREADS", "many")
    with pytest.raises(ConfigError):
        H.cmd_sweep(trained[0])


def test_sweep_without_artifacts(tmp_path):
    with pytest.raises(ConfigError, match="train-source"):
        H.cmd_sweep(small_config(tmp_path))


def test_dynamic_single_domain_matches_sweep(trained):
    cfg, _ = trained
    sweep = [r for r in H.cmd_sweep(cfg) if r.corruption_kind == "contrast" and r.method != "source"]
    dyn = H.cmd_dynamic(cfg, ["contrast"])
    adapted = [H.ResultRow(**{k: d[k] for k in H.ROW_FIELDS}) for d in dyn if d["n_samples"] > 0]
    assert sorted(adapted, key=str) == sorted(sweep, key=str)


def test_dynamic_order_invariance(trained):
    cfg, _ = trained
    strip = lambda rows: sorted((tuple(d[k] for k in H.ROW_FIELDS) for d in rows))
    ab = H.cmd_dynamic(cfg, ["gaussian_noise", "contrast"])
    ba = H.cmd_dynamic(cfg, ["contrast", "gaussian_noise"])
    assert strip(ab) == strip(ba)
    assert [d["position"] for d in ab][0] == 0 and ab[0]["corruption_kind"] == "gaussian_noise"
    assert ba[0]["corruption_kind"] == "contrast"


def test_dynamic_layout(trained):
    cfg, _ = trained
    rows = H.cmd_dynamic(cfg, ["contrast"])
    arrival = [d for d in rows if d["n_samples"] == 0]
    assert len(arrival) == cfg.n_seeds and all(d["method"] == "source" for d in arrival)
    steps = [d["step"] for d in rows]
    assert steps == sorted(steps) and steps[0] == 1
    header = (Path(cfg.output_dir) / "dynamic.csv").read_text().splitlines()[0]
    assert header == ",".join(H.DYNAMIC_FIELDS)


def test_dynamic_rejects_unknown_domain(trained):
    with pytest.raises(ConfigError):
        H.cmd_dynamic(trained[0], ["fog"])


def test_report_golden(tmp_path):
    table = H.cmd_report(FIXTURES / "fixture_sweep.csv", output_dir=tmp_path)
    assert (tmp_path / "report.md").read_text() == (FIXTURES / "fixture_report.md").read_text()
    assert table.columns == ["gaussian_noise", "contrast"]
    assert (tmp_path / "sweep_contrast.svg").read_text().startswith("<svg")


def test_report_mean_is_arithmetic_mean(tmp_path):
    table = H.build_table(H.read_rows(FIXTURES / "fixture_sweep.csv"))
    for method, vals in table.rows.items():
        assert table.mean(method) == sum(vals) / len(vals)


def test_report_selects_n(tmp_path):
    table = H.build_table(H.read_rows(FIXTURES / "fixture_sweep.csv"), n_samples=1)
    assert table.n_samples == 1
    with pytest.raises(ConfigError):
        H.build_table(H.read_rows(FIXTURES / "fixture_sweep.csv"), n_samples=7)


def test_report_rejects_bad_header(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("method,corruption,severity\nsource,contrast,5\n")
    with pytest.raises(FormatError, match="corruption_kind"):
        H.read_rows(bad)


def test_report_rejects_short_row(tmp_path):
    text = (FIXTURES / "fixture_sweep.csv").read_text().splitlines()
    bad = tmp_path / "bad.csv"
    bad.write_text("\n".join(text[:2] + ["source,contrast,5"]) + "\n")
    with pytest.raises(FormatError, match="line 3"):
        H.read_rows(bad)


@pytest.mark.parametrize("kw", [dict(sample_counts=[5, 1]), dict(sample_counts=[]), dict(methods=["ewc"]),
                                dict(methods=[]), dict(severity=6), dict(corruptions=["fog"]), dict(n_seeds=0),
                                dict(eta=0.0), dict(train_fraction=1.0), dict(sgd_high_eta=-1.0)])
def test_config_validation(kw, tmp_path):
    with pytest.raises(ConfigError):
        small_config(tmp_path, **kw).validate()


def test_config_file_round_trip(tmp_path):
    cfg = small_config(tmp_path)
    (tmp_path / "c.json").write_text(cfg.to_text())
    assert H.ExperimentConfig.from_file(tmp_path / "c.json") == cfg
    (tmp_path / "bad.json").write_text('{"nonsense": 1}')
    with pytest.raises(ConfigError, match="nonsense"):
        H.ExperimentConfig.from_file(tmp_path / "bad.json")


def test_result_row_validation():
    with pytest.raises(ConfigError):
        H.ResultRow("dira", "contrast", 5, 1, 0, 1.5, 0.5)


def test_derive_seed_stable():
    assert H.derive_seed(1, "a") == H.derive_seed(1, "a")
    assert H.derive_seed(1, "a") != H.derive_seed(1, "b")
    assert H.derive_seed(0, "ab", "c") != H.derive_seed(0, "a", "bc")
    assert 0 <= H.derive_seed(3) < 2**63


def test_target_domain_disjoint_and_nested(trained):
    cfg, _ = trained
    _, src_test = H.source_split(cfg)
    dom = H.target_domain(cfg, src_test, "contrast", 5, 0)
    assert len(dom.train) + len(dom.test) == len(src_test)
    np.testing.assert_array_equal(dom.draw(5).images[:1], dom.draw(1).images)
    with pytest.raises(ConfigError):
        dom.draw(len(dom.train) + 1)
