"""
パイプライン・レポート・CLIの統合テスト
"""

import numpy as np
import pandas as pd
import pytest

from src.cli import EXIT_CONFIG_ERROR, EXIT_OK, EXIT_STAGE_ERROR, main
from src.features import FeatureDescriptor, LearningSet, NightMask
from src.pipeline import ForecastPipeline, Manifest, StageError, export_predictions, latest_run, load_predictions
from src.report import TABLE_FILES, ReportError, fan_data, report

GRID = [round(i * 0.01, 10) for i in range(1, 100)]
HOUSEHOLDS = ("H001", "H002")


def _models(run_dir):
    return sorted(p.name for p in (run_dir / "models").glob("*.json"))


def test_run_writes_artifacts_and_manifest(small_config):
    """2世帯 × 2手法 × 2近傍数のモデル・予測と、検証可能なマニフェスト"""
    result = ForecastPipeline(small_config()).execute()
    run_dir = result.run_dir

    expected = [f"{h}_Poly{d}_knn{k}.json" for h in HOUSEHOLDS for d in (1, 2) for k in (10, 20)]
    assert _models(run_dir) == sorted(expected)
    assert len(list((run_dir / "predictions").glob("*.csv"))) == 8
    assert len(list((run_dir / "selection").glob("*.json"))) == 4
    assert (run_dir / "config.yaml").exists()
    assert (run_dir / "frames" / "frames.csv").exists()

    manifest = Manifest.load(run_dir)
    assert manifest.verify() == []
    assert all(entry.valid for entry in manifest.entries.values())
    assert "models/H001_Poly2_knn20.json" in manifest.entries
    assert not any(result.stage_hits["fit"])

    per_level = pd.read_csv(run_dir / "evaluation" / "per_level.csv", dtype={"household": str})
    assert set(per_level["household"]) == set(HOUSEHOLDS)
    assert set(per_level["k_nn"]) == {10, 20}
    # 1つの評価あたり 99 分位点 × 2指標 + 49 区間 × 2指標
    assert len(per_level) == 8 * (99 * 2 + 49 * 2)

    night = pd.read_csv(run_dir / "evaluation" / "night_accuracy.csv", dtype={"household": str})
    assert list(night["household"]) == list(HOUSEHOLDS)
    assert (night["night_count"] > 0).all()


def test_predictions_are_monotone(small_config):
    result = ForecastPipeline(small_config(knn={"neighbors": [10]}, regression={"degrees": [3]},
                                           report={"fan_technique": "Poly3"})).execute()
    table = load_predictions(result.run_dir / "predictions" / "H002_Poly3_knn10.csv", GRID)
    assert (np.diff(table.predictions, axis=1) >= 0).all()
    assert (table.predictions >= 0).all()
    assert (table.predictions[table.night] == 0).all()


def test_second_run_uses_cache(small_config):
    """同じ設定の再実行は全段階キャッシュヒットで、成果物はバイト単位で同じ"""
    config = small_config()
    first = ForecastPipeline(config).execute()
    second = ForecastPipeline(config).execute()

    assert not first.all_cached
    assert second.all_cached
    assert first.run_dir != second.run_dir
    for name in _models(first.run_dir):
        assert (first.run_dir / "models" / name).read_bytes() == (second.run_dir / "models" / name).read_bytes()
    for relative in ("evaluation/per_level.csv", "evaluation/night_accuracy.csv", "config.yaml"):
        assert (first.run_dir / relative).read_bytes() == (second.run_dir / relative).read_bytes()
    assert all(entry.cache_hit for name, entry in second.manifest.entries.items() if name.startswith("models/"))


def test_changed_knn_recomputes_downstream_only(small_config):
    """近傍数だけ変えると、選択・学習ペアは再利用し、新しい近傍数だけ計算する"""
    ForecastPipeline(small_config()).execute()
    result = ForecastPipeline(small_config(knn={"neighbors": [10, 30]})).execute()
    assert result.cache_hit("ingest")
    assert result.cache_hit("select")
    assert result.cache_hit("assemble")
    assert not result.cache_hit("knn")
    assert result.stage_hits["knn"].count(True) == 4
    assert result.stage_hits["fit"].count(False) == 4


def test_parallel_workers_give_identical_models(small_config, tmp_path):
    """並列数によらず同じモデル"""
    serial = ForecastPipeline(small_config(run={"output_dir": str(tmp_path / "serial"), "workers": 1})).execute()
    parallel = ForecastPipeline(small_config(run={"output_dir": str(tmp_path / "parallel"), "workers": 2})).execute()
    assert _models(serial.run_dir) == _models(parallel.run_dir)
    for name in _models(serial.run_dir):
        assert (serial.run_dir / "models" / name).read_bytes() == (parallel.run_dir / "models" / name).read_bytes()


def test_until_fit_stops_before_predictions(small_config):
    result = ForecastPipeline(small_config()).execute(until="fit")
    assert len(_models(result.run_dir)) == 8
    assert not (result.run_dir / "predictions").exists()
    assert not (result.run_dir / "evaluation" / "per_level.csv").exists()
    with pytest.raises(ReportError) as excinfo:
        report(result.run_dir)
    assert "evaluation/per_level.csv" in excinfo.value.missing


def test_learning_sets_start_after_previous_day(small_config):
    """学習・テストとも前日の同時刻がある基準時刻から始まる（H = H_p = 24, H1 = 4）"""
    result = ForecastPipeline(small_config()).execute(until="assemble")
    train = pd.read_csv(result.run_dir / "learning_sets" / "H001_Poly1_train.csv")
    test = pd.read_csv(result.run_dir / "learning_sets" / "H001_Poly1_test.csv")
    assert train["origin_k"].min() == 24
    boundary = train["origin_k"].max() + 24 + 1
    assert test["origin_k"].min() == boundary + 24


def test_ingest_only(small_config):
    result = ForecastPipeline(small_config()).execute(until="ingest")
    assert set(result.stage_hits) == {"ingest"}
    assert not (result.run_dir / "models").exists()


def test_stage_error_marks_manifest(small_config):
    """k_NN が学習ペア数を超えると knn 段階のエラー、途中成果物は無効"""
    config = small_config(knn={"neighbors": [10 ** 6]}, report={"fan_knn": None})
    with pytest.raises(StageError) as excinfo:
        ForecastPipeline(config).execute()
    assert excinfo.value.stage == "knn"
    assert excinfo.value.household in HOUSEHOLDS

    run_dir = latest_run(config.run.output_dir)
    manifest = Manifest.load(run_dir)
    household_entries = [entry for entry in manifest.entries.values() if entry.household is not None]
    assert household_entries
    assert not any(entry.valid for entry in household_entries)
    assert not (run_dir / "models").exists()


def test_missing_input_file(small_config, tmp_path):
    config = small_config(data={"path": str(tmp_path / "missing.csv")})
    with pytest.raises(StageError) as excinfo:
        ForecastPipeline(config).execute()
    assert excinfo.value.stage == "ingest"


def test_report_outputs(small_config):
    """要約表4つ、曲線、扇形図データ"""
    result = ForecastPipeline(small_config()).execute()
    written = report(result.run_dir)
    report_dir = result.run_dir / "report"
    assert set(written) >= {report_dir / name for name in TABLE_FILES.values()}
    night = pd.read_csv(report_dir / "night_accuracy.csv", dtype={"household": str})
    assert list(night.columns) == ["household", "precision", "agreement"]

    table = pd.read_csv(report_dir / TABLE_FILES["quantile_pinball"], index_col="k_nn")
    assert list(table.index) == [10, 20]
    assert list(table.columns) == ["Poly1", "Poly2"]
    assert (table.to_numpy() > 0).all()

    curve = pd.read_csv(report_dir / "curve_interval_reliability_deviation.csv", index_col="level")
    assert len(curve) == 49
    assert list(curve.columns) == ["Poly1_knn10", "Poly1_knn20", "Poly2_knn10", "Poly2_knn20"]

    fan = pd.read_csv(report_dir / "fan_H001_Poly1_knn10_day2.csv")
    assert 0 < len(fan) <= 24
    assert [c for c in fan.columns if c.startswith("q")] == [f"q{q:.10g}" for q in GRID]

    assert Manifest.load(result.run_dir).verify() == []
    assert "report/summary.csv" in Manifest.load(result.run_dir).entries


def test_report_single_technique(small_config):
    result = ForecastPipeline(small_config(regression={"degrees": [2]}, report={"fan_technique": "Poly2"})).execute()
    report(result.run_dir)
    table = pd.read_csv(result.run_dir / "report" / TABLE_FILES["interval_pinball"], index_col="k_nn")
    assert list(table.columns) == ["Poly2"]


def test_fan_night_day_is_zero(tmp_path, make_frame):
    """夜間だけの日は全分位点が 0"""
    frame = make_frame(np.zeros(96 * 3))
    learning_set = LearningSet(
        X=np.zeros((96, 1)), y=np.zeros(96), descriptors=[FeatureDescriptor("P", 0)],
        household_id="H001", origins=np.arange(96, 192)
    )
    mask = NightMask(flags=np.ones(96, dtype=bool))
    export_predictions(learning_set, mask, np.zeros((96, 99)), GRID, frame, tmp_path / "predictions" / "H001_Poly1_knn10.csv")

    fan = fan_data(tmp_path, "H001", "Poly1", 10, 0, GRID)
    assert len(fan) == 96
    assert (fan["is_night"] == 1).all()
    assert (fan[[f"q{q:.10g}" for q in GRID]].to_numpy() == 0).all()
    assert fan["target_time"].iloc[0] == "2020-01-03 00:00:00"

    with pytest.raises(ReportError):
        fan_data(tmp_path, "H001", "Poly1", 10, 1, GRID)
    with pytest.raises(ReportError):
        fan_data(tmp_path, "H002", "Poly1", 10, 0, GRID)


def test_cli_exit_codes(small_config, tmp_path, capsys):
    """成功 0、段階の失敗 1、設定エラー 2"""
    config_path = tmp_path / "config.yaml"
    config_path.write_text(small_config(report={"fan_knn": None}).to_yaml(), encoding="utf-8")

    assert main(["run", "--config", str(config_path), "--knn", "10", "--degrees", "1"]) == EXIT_OK
    run_dir = latest_run(str(tmp_path / "runs"))
    assert (run_dir / "report" / "table1_quantile_reliability.csv").exists()
    assert "Run directory" in capsys.readouterr().out

    assert main(["report", "--config", str(config_path)]) == EXIT_OK
    assert main(["run", "--config", str(config_path), "--knn", "1000000"]) == EXIT_STAGE_ERROR
    assert "stage 'knn' failed" in capsys.readouterr().err

    assert main(["train", "--config", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG_ERROR
    bad = tmp_path / "bad.yaml"
    bad.write_text("regression:\n  degrees: [4]\n", encoding="utf-8")
    assert main(["train", "--config", str(bad)]) == EXIT_CONFIG_ERROR
    assert main(["run", "--config", str(config_path), "--degrees", "5"]) == EXIT_CONFIG_ERROR


def test_cli_overrides_outside_fan_settings(small_config, tmp_path):
    """扇形図の指定から外れる世帯・近傍数・次数をCLIで指定しても実行できる"""
    config_path = tmp_path / "config.yaml"
    config_path.write_text(small_config().to_yaml(), encoding="utf-8")

    argv = ["run", "--config", str(config_path), "--households", "H002", "--knn", "20", "--degrees", "2"]
    assert main(argv) == EXIT_OK
    run_dir = latest_run(str(tmp_path / "runs"))
    assert (run_dir / "report" / "fan_H002_Poly2_knn20_day2.csv").exists()


def test_cli_cache_command(small_config, tmp_path, capsys):
    """cache サブコマンドで統計表示と古いエントリの削除"""
    config_path = tmp_path / "config.yaml"
    config_path.write_text(small_config().to_yaml(), encoding="utf-8")
    assert main(["train", "--config", str(config_path), "--knn", "10", "--degrees", "1"]) == EXIT_OK
    capsys.readouterr()

    assert main(["cache", "--config", str(config_path), "--stage", "fit", "--rebuild-index"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "Entries: 0" not in out
    assert "fit/" in out

    assert main(["cache", "--config", str(config_path), "--clear-days", "0"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "Deleted 0 " not in out
    assert "Entries: 0" in out
