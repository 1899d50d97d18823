"""Smoke test for the fmrivid_py extension module.

Build and expose the module first, for example:

    cargo build --release -p fmrivid-py --features extension-module
    cp target/release/libfmrivid_py.so python/fmrivid_py.so

or install it with `pip install ./crates/py` (maturin backend).
"""

import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import fmrivid_py as fv  # noqa: E402


def check_config():
    text = fv.resolve_config("window = 3", profile="quick")
    assert "window = 3" in text.splitlines()
    assert fv.config_hash(profile="quick") == fv.config_hash("", profile="quick")
    assert fv.config_hash("window = 3", profile="quick") != fv.config_hash(profile="quick")
    try:
        fv.resolve_config("no_such_key = 1")
    except ValueError as e:
        assert "unknown config key" in str(e)
    else:
        raise AssertionError("unknown key accepted")


def check_metrics():
    img = [((i * 7) % 11) / 10.0 for i in range(16 * 16 * 3)]
    assert fv.ssim_image(img, img, [16, 16, 3]) == 1.0
    zeros = [0.0] * (16 * 16 * 3)
    ones = [1.0] * (16 * 16 * 3)
    c1 = (0.01 * 1.0) ** 2
    assert abs(fv.ssim_image(zeros, ones, [16, 16, 3]) - c1 / (1.0 + c1)) < 1e-9
    onehot = [[1.0 if c == i % 8 else 0.0 for c in range(8)] for i in range(5)]
    assert fv.nway_top_k(onehot, onehot, 2) == 1.0
    assert fv.ablation_p([0.5, 0.6, 0.7], [0.5, 0.6, 0.7]) == 1.0


def check_stage_ordering():
    with tempfile.TemporaryDirectory() as d:
        try:
            fv.run_stage(d, "sample", profile="quick")
        except RuntimeError as e:
            assert "cotrain" in str(e)
        else:
            raise AssertionError("sample ran without cotrain")
        assert fv.run_stage(d, "gen-data", "train_scans = 60\ntest_scans = 30", profile="quick") == "ran"
        assert fv.run_stage(d, "gen-data", "train_scans = 60\ntest_scans = 30", profile="quick") == "skipped"


if __name__ == "__main__":
    assert "cotrain" in fv.STAGES
    check_config()
    check_metrics()
    check_stage_ordering()
    print("fmrivid_py smoke test: ok")
