import numpy as np
import pytest

from scripts.metrics import MetricsReport, OrganScore
from scripts.reports import (
    format_report_table,
    print_evaluation_summary,
    read_report,
    report_frame,
    report_from_text,
    report_table,
    report_to_text,
    write_report,
)


@pytest.fixture
def report():
    return MetricsReport.from_scores(
        {
            "esophagus": OrganScore(0.7213, 5.1),
            "heart": OrganScore(0.9, 11.25),
            "trachea": OrganScore(0.85, float("nan")),
            "aorta": OrganScore(0.8, 4.0),
        },
        {"esophagus": 120, "heart": 9000, "trachea": 0, "aorta": 800},
    )


def test_text_format_keys_and_nan(report):
    text = report_to_text(report)
    assert "class.esophagus.dsc=0.7213\n" in text
    assert "class.trachea.hd=nan\n" in text
    assert "count.heart=9000\n" in text
    assert text.rstrip().splitlines()[-2:] == [
        f"mean.dsc={report.mean_dsc!r}",
        f"mean.hd={report.mean_hd!r}",
    ]


def test_text_survives_a_file(tmp_path, report):
    path = write_report(report, tmp_path / "report.txt")
    back = read_report(path)
    assert back.per_class["heart"] == report.per_class["heart"]
    assert np.isnan(back.per_class["trachea"].hd)
    assert back.counts == report.counts
    assert back.mean_dsc == report.mean_dsc


def test_parser_rejects_unknown_or_incomplete_entries():
    with pytest.raises(ValueError, match="unknown key"):
        report_from_text("class.heart.volume=3\n")
    with pytest.raises(ValueError, match="key=value"):
        report_from_text("mean.dsc 0.5\n")
    with pytest.raises(KeyError):
        report_from_text("class.heart.dsc=0.5\nmean.dsc=0.5\nmean.hd=1\n")
    with pytest.raises(KeyError):
        report_from_text("class.heart.dsc=0.5\nclass.heart.hd=1\n")


def test_table_column_order_and_mean(report):
    table = report_table(report)
    assert list(table.columns) == ["Esophagus", "Heart", "Trachea", "Aorta", "Mean"]
    assert list(table.index) == ["DSC", "HD"]
    assert table.loc["DSC", "Mean"] == pytest.approx(report.mean_dsc)
    assert "undef" in format_report_table(report)


def test_frame_carries_labels(report):
    df = report_frame(report, case_id="case_000", fold=2)
    assert list(df.columns) == ["case_id", "fold", "organ", "dsc", "hd", "voxels"]
    assert len(df) == 4
    assert (df["case_id"] == "case_000").all()


def test_summary_lists_undefined_hd(report, capsys):
    print_evaluation_summary(report, title="Fold 0")
    out = capsys.readouterr().out
    assert "U-Net+DR: Fold 0" in out
    assert "HD undefined (empty mask): trachea" in out
