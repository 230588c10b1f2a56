"""
Tests for the multi-seed comparison.
"""
import json

import pytest

from behavior_graph import GraphVariant
from errors import MissingRunsError
from evaluation import METRICS_FILE
from reporting import ABSENT, ORACLE_DIR, build_comparison, collect_runs, run_dir, write_comparison

HM3, ESMM = GraphVariant.HM3, GraphVariant.ESMM


def put_metrics(directory, cvr_auc, ctcvr_auc):
    directory.mkdir(parents=True, exist_ok=True)
    (directory / METRICS_FILE).write_text(
        json.dumps({"cvr_auc": cvr_auc, "ctcvr_auc": ctcvr_auc}), encoding="utf-8"
    )


@pytest.fixture
def dataset(tmp_path):
    """hm3 and esmm over seeds 1 and 2; hm3 wins seed 1 on CVR AUC only."""
    put_metrics(run_dir(tmp_path, HM3, 1), 0.80, 0.70)
    put_metrics(run_dir(tmp_path, HM3, 2), 0.70, 0.70)
    put_metrics(run_dir(tmp_path, ESMM, 1), 0.75, 0.72)
    put_metrics(run_dir(tmp_path, ESMM, 2), 0.70, 0.72)
    return tmp_path


class TestCollect:
    """Tests for gathering per-run metrics."""

    def test_layout(self, tmp_path):
        """Runs live under runs/<variant>/seed-<n>."""
        assert run_dir(tmp_path, HM3, 4) == tmp_path / "runs" / "hm3" / "seed-4"

    def test_missing_runs_listed(self, dataset):
        """Every missing (variant, seed) is named."""
        with pytest.raises(MissingRunsError) as info:
            collect_runs(dataset, [HM3, GraphVariant.BASE], [1, 2])
        assert info.value.missing == ["base/seed-1", "base/seed-2"]


class TestSummary:
    """Tests for the comparison numbers."""

    def test_mean_and_std(self, dataset):
        """Mean and sample standard deviation per variant."""
        rows = build_comparison(dataset, [HM3, ESMM], [1, 2], preset="desk-S")["rows"]
        hm3 = rows[0]
        assert hm3["variant"] == "hm3" and hm3["n"] == 2
        assert hm3["cvr_auc_mean"] == pytest.approx(0.75)
        assert hm3["cvr_auc_std"] == pytest.approx(0.0707106781)
        assert rows[1]["ctcvr_auc_std"] == pytest.approx(0.0)

    def test_single_seed_has_no_std(self, dataset):
        """With one seed the spread is shown as n/a."""
        comparison = build_comparison(dataset, [HM3], [1], preset="desk-S")
        assert comparison["rows"][0]["cvr_auc_std"] is None
        written = write_comparison(dataset, [HM3], [1], preset="desk-S")
        assert written["rows"][0]["n"] == 1
        assert f"0.800000 ± {ABSENT}" in (dataset / "comparison.txt").read_text(encoding="utf-8")

    def test_seed_matched_wins(self, dataset):
        """Wins count seeds where a strictly beats b."""
        wins = build_comparison(dataset, [HM3, ESMM], [1, 2], preset="desk-S")["wins"]
        hm3_vs_esmm = next(w for w in wins if w["variant"] == "hm3")
        esmm_vs_hm3 = next(w for w in wins if w["variant"] == "esmm")
        assert hm3_vs_esmm["cvr_auc_wins"] == 1 and hm3_vs_esmm["seeds"] == 2
        assert esmm_vs_hm3["cvr_auc_wins"] == 0
        assert esmm_vs_hm3["ctcvr_auc_wins"] == 2

    def test_absent_auc_is_skipped(self, tmp_path):
        """A run without CVR AUC does not count toward the mean."""
        put_metrics(run_dir(tmp_path, HM3, 1), None, 0.7)
        put_metrics(run_dir(tmp_path, HM3, 2), 0.6, 0.7)
        row = build_comparison(tmp_path, [HM3], [1, 2], preset="desk-S")["rows"][0]
        assert row["cvr_auc_mean"] == pytest.approx(0.6)
        assert row["cvr_auc_std"] is None


class TestWrite:
    """Tests for the comparison files."""

    def test_files_and_oracle_row(self, dataset):
        """The table includes the oracle ceiling when it was scored."""
        put_metrics(dataset / ORACLE_DIR, 0.9, 0.85)
        write_comparison(dataset, [HM3, ESMM], [1, 2], preset="desk-S", config_digest="abc")
        text = (dataset / "comparison.txt").read_text(encoding="utf-8")
        assert text.splitlines()[0].split()[:3] == ["variant", "preset", "n"]
        assert "oracle" in text and "0.900000" in text
        stored = json.loads((dataset / "comparison.json").read_text(encoding="utf-8"))
        assert stored["config_hash"] == "abc"
        assert "wall_clock_seconds" not in json.dumps(stored)
        index = json.loads((dataset / "run_index.json").read_text(encoding="utf-8"))
        assert len(index) == 4

    def test_byte_stable(self, dataset):
        """Re-running the report reproduces the comparison files byte for byte."""
        write_comparison(dataset, [HM3, ESMM], [1, 2], preset="desk-S")
        first = (dataset / "comparison.txt").read_bytes(), (dataset / "comparison.json").read_bytes()
        write_comparison(dataset, [HM3, ESMM], [1, 2], preset="desk-S")
        assert first == ((dataset / "comparison.txt").read_bytes(), (dataset / "comparison.json").read_bytes())
