"""Bundled-phantom results against the committed baseline from the first verified run."""

import json
from pathlib import Path

import pytest

from vascutrace import pipeline

BASELINE = json.loads((Path(__file__).parent / "data" / "bundled_baseline.json").read_text())


@pytest.mark.parametrize("name", pipeline.BUNDLED)
def test_bundled_summary_matches_baseline(name, tmp_path):
    s = pipeline.run_pipeline(pipeline.override(pipeline.load_config(name), figures=False), tmp_path).summary
    want = BASELINE[name]
    for key in ("config_hash", "seed", "frames", "artifacts_injected", "detections"):
        assert s[key] == want[key], key
    for variant in ("unfiltered", "filtered"):
        assert s[variant]["point_count"] == want[f"{variant}_point_count"]
        for k in ("mean_l2", "std_l2", "hausdorff"):
            # loose enough to survive a different BLAS, tight enough to catch any behavioural change
            assert s[variant][k] == pytest.approx(want[f"{variant}_{k}"], rel=1e-9, abs=1e-12), (variant, k)
    assert s["filtered"]["mean_l2"] <= 1.0


def test_depth_profiles_span_range():
    depths = []
    for name in pipeline.BUNDLED:
        spec = pipeline.build_phantom(pipeline.load_config(name).phantom)
        depths.extend(spec.depths())
    assert 12.0 <= min(depths) <= 15.0 and 50.0 <= max(depths) <= 56.0
