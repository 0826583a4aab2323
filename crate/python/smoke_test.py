"""Smoke test for the poigraph_py extension.

Build and install the module first:

    cd crates/py && maturin build --release -o dist && pip install dist/*.whl

The ranker check needs the `poigraph` binary; it is looked up in
$POIGRAPH_BIN, then target/release and target/debug.
"""

import json
import math
import os
import subprocess
import sys
import tempfile
from pathlib import Path

import poigraph_py as pg

ROOT = Path(__file__).resolve().parent.parent

CONFIG = """seed = 1
[paths]
catalog = "data/catalog.jsonl"
logs = "data/logs.jsonl"
work_dir = "run"
[graph]
d_n = 16
[model]
d = 16
d_c = 8
layer_widths = [16, 16]
heads = 2
[train]
epochs = 2
batch_size = 16
"""


def check_helpers():
    assert pg.geohash_encode(57.64911, 10.40744, 11) == "u4pruydqqvj"
    assert pg.normalize_query("  Ｃａｆé   Bar ") == "café bar"
    assert pg.lexical_score("abc", "abc", "") == 1.0
    m = pg.metrics_from_ranks([1, 2, 4], [1, 3])
    assert math.isclose(m["MRR"], 7 / 12), m
    assert math.isclose(m["SR@1"], 1 / 3), m
    try:
        pg.geohash_encode(91.0, 0.0, 6)
    except ValueError:
        pass
    else:
        raise AssertionError("out-of-range latitude accepted")


def find_binary():
    env = os.environ.get("POIGRAPH_BIN")
    if env:
        return env
    for profile in ("release", "debug"):
        p = ROOT / "target" / profile / "poigraph"
        if p.exists():
            return str(p)
    return None


def check_ranker(binary):
    with tempfile.TemporaryDirectory() as tmp:
        def cli(*args):
            return subprocess.run(
                [binary, *args], cwd=tmp, check=True, capture_output=True, text=True
            ).stdout

        cli("synth", "--out", "data", "--pois", "80", "--queries", "400")
        Path(tmp, "run.toml").write_text(CONFIG)
        cli("--config", "run.toml", "build-graph")
        cli("--config", "run.toml", "train")

        cwd = os.getcwd()
        os.chdir(tmp)
        try:
            ranker = pg.Ranker.from_config("run.toml")
        finally:
            os.chdir(cwd)
        assert ranker.num_pois == 80

        query, lat, lon = "cafe", 0.1, 0.2
        ours = ranker.rank(query, lat, lon, top=5)
        theirs = json.loads(
            cli("--config", "run.toml", "rank", "--query", query,
                "--lat", str(lat), "--lon", str(lon), "--top", "5", "--json")
        )
        assert [p for p, _ in ours] == [r["poi_id"] for r in theirs]
        for (_, s), r in zip(ours, theirs):
            assert abs(s - r["score"]) < 1e-9 and 0.0 < s < 1.0

        subset = [p for p, _ in ours[:3]][::-1]
        assert [p for p, _ in ranker.rank(query, lat, lon, candidates=subset)] == [
            p for p, _ in ours[:3]
        ]
        assert ranker.rank(query, lat, lon, candidates=[]) == []
        try:
            ranker.rank(query, lat, lon, candidates=["no-such-poi"])
        except ValueError:
            pass
        else:
            raise AssertionError("unknown candidate accepted")


def main():
    check_helpers()
    print("helpers ok")
    binary = find_binary()
    if binary is None:
        print("ranker skipped: poigraph binary not built")
        return 0
    check_ranker(binary)
    print("ranker ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
