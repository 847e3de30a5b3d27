import json
import shutil
from pathlib import Path

import pytest

from ecoreg.cli import main
from ecoreg.io import load_embeddings

SYNTH = """
n_regions = 60
samples_per_region = [30, 60]
count_scale = 0.3
seed = 4

[schema]
variables = [
  {name = "sex", kind = "categorical", levels = ["male", "female"]},
  {name = "race", kind = "categorical", levels = ["white", "black", "hispanic"]},
  {name = "age", kind = "real"},
]
interactions = [%s]

[effects]
sex = [[0.0, 1.0]]
race = 1.5

[featurizer]
rff_features = 8
"""

RUN = """
seed = 7

[paths]
records = "records.csv"
schema = "schema.json"
outcomes = "outcomes.csv"
exitpoll = "exitpoll.csv"
region_states = "states.csv"

[featurizer]
rff_features = 8

[solver]
alpha_grid = [0.5, 1.0]
n_lambda = 10
n_folds = 4

[predict]
levels = ["national", "per-state", "per-region"]
gender_gap = ["sex=male", "sex=female"]

[[tables]]
name = "sex"
partition = true
queries = [{name = "men", query = "sex=male"}, {name = "women", query = "sex=female"}]

[explore]
square_variables = ["race"]
"""

COMMANDS = ["featurize", "fit", "predict", "explore", "report"]


def prepare(root: Path, interactions='["sex", "race"]') -> Path:
    root.mkdir(parents=True, exist_ok=True)
    (root / "synth.toml").write_text(SYNTH % interactions)
    (root / "run.toml").write_text(RUN)
    assert main(["synth", "--config", str(root / "run.toml"), "--spec", str(root / "synth.toml"),
                 "--output-dir", str(root), "--workers", "1"]) == 0
    regions = sorted({line.split(",")[0] for line in
                      (root / "records.csv").read_text().splitlines()[1:]})
    (root / "states.csv").write_text("region_id,state\n" + "".join(
        f"{r},{'S1' if i % 2 else 'S2'}\n" for i, r in enumerate(regions)))
    (root / "exitpoll.csv").write_text(
        "state,group,query,share_A,share_B,participation\n"
        "S1,women,sex=female,0.40,0.55,0.6\nS2,men,sex=male,0.55,0.40,\n")
    return root


def run_all(root: Path, out: Path, workers: int):
    for cmd in COMMANDS:
        code = main([cmd, "--config", str(root / "run.toml"), "--output-dir", str(out),
                     "--workers", str(workers)])
        assert code == 0, cmd


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = prepare(tmp_path_factory.mktemp("cli"))
    run_all(root, root / "out1", 1)
    run_all(root, root / "out4", 4)
    run_all(root, root / "again", 1)
    return root


class TestPipeline:
    def test_outputs_exist(self, runs):
        names = {p.name for p in (runs / "out1").iterdir()}
        for expected in ["embedding.bin", "regions.csv", "fit.bin", "cv_table.csv",
                         "exit_poll_sex_national.csv", "exit_poll_sex_per-state.csv",
                         "gender_gap.csv", "fit_scatter.csv", "exploration_ranking.csv",
                         "square_race.csv", "report.txt"] + [f"manifest_{c}.json" for c in COMMANDS]:
            assert expected in names

    @pytest.mark.parametrize("other", ["out4", "again"])
    def test_byte_identical(self, runs, other):
        a, b = runs / "out1", runs / other
        names = sorted(p.name for p in a.iterdir())
        assert names == sorted(p.name for p in b.iterdir())
        for n in names:
            assert (a / n).read_bytes() == (b / n).read_bytes(), n

    def test_manifest(self, runs):
        m = json.loads((runs / "out1" / "manifest_fit.json").read_text())
        assert m["seed"] == 7 and "embedding.bin" in m["inputs"] and "fit.bin" in m["outputs"]
        assert set(m["versions"]) >= {"ecoreg", "numpy", "scipy", "python"}

    def test_layout_bookkeeping(self, runs, tmp_path):
        emb, feat, table, _ = load_embeddings(runs / "out1" / "embedding.bin")
        assert emb.shape[1] == sum(feat.layout.spans())
        assert sum(k.value == "ExitPollSubgroup" for k in emb.kinds) == 2
        plain = prepare(tmp_path / "plain", interactions="")
        run = (plain / "run.toml").read_text().replace('exitpoll = "exitpoll.csv"\n', "")
        (plain / "run.toml").write_text(run)
        assert main(["featurize", "--config", str(plain / "run.toml"), "--output-dir",
                     str(plain / "o"), "--workers", "1"]) == 0
        emb0, _, _, _ = load_embeddings(plain / "o" / "embedding.bin")
        # sex x race adds (2-1)*(3-1) columns
        assert emb.shape[1] - emb0.shape[1] == feat.layout["sex:race"].span == 2

    def test_partition_table(self, runs):
        lines = (runs / "out1" / "exit_poll_sex_national.csv").read_text().splitlines()
        assert lines[0] == "group,share_A,share_B,frac_electorate,participation,other_nonvoting,level,unit_id"
        fracs = [float(l.split(",")[3]) for l in lines[1:]]
        assert sum(fracs) == pytest.approx(1.0, abs=1e-9)

    def test_seed_override_changes_fit(self, runs):
        out = runs / "seed9"
        for cmd in ["featurize", "fit"]:
            assert main([cmd, "--config", str(runs / "run.toml"), "--output-dir", str(out),
                         "--seed", "9", "--workers", "1"]) == 0
        assert json.loads((out / "manifest_fit.json").read_text())["seed"] == 9
        assert (out / "embedding.bin").read_bytes() != (runs / "out1" / "embedding.bin").read_bytes()


class TestExitCodes:
    def test_bad_toml(self, tmp_path):
        (tmp_path / "run.toml").write_text("seed = = 3\n")
        assert main(["report", "--config", str(tmp_path / "run.toml")]) == 2

    def test_missing_seed(self, tmp_path):
        (tmp_path / "run.toml").write_text("[paths]\n")
        assert main(["report", "--config", str(tmp_path / "run.toml")]) == 2

    def test_missing_input(self, tmp_path):
        (tmp_path / "run.toml").write_text('seed = 1\n[paths]\nrecords = "nope.csv"\n'
                                           'schema = "nope.json"\n')
        assert main(["featurize", "--config", str(tmp_path / "run.toml"),
                     "--output-dir", str(tmp_path / "o")]) == 2

    def test_malformed_records(self, runs, tmp_path):
        root = tmp_path / "bad"
        shutil.copytree(runs, root, ignore=shutil.ignore_patterns("out*", "again", "seed9"))
        text = (root / "records.csv").read_text().splitlines()
        text[5] = text[5].rsplit(",", 1)[0] + ",abc"
        (root / "records.csv").write_text("\n".join(text) + "\n")
        assert main(["featurize", "--config", str(root / "run.toml"), "--output-dir",
                     str(root / "o"), "--workers", "1"]) == 2

    def test_corrupt_fit_is_internal(self, runs, tmp_path):
        out = tmp_path / "o"
        shutil.copytree(runs / "out1", out)
        raw = bytearray((out / "fit.bin").read_bytes())
        raw[-1] ^= 0xFF
        (out / "fit.bin").write_bytes(bytes(raw))
        assert main(["report", "--config", str(runs / "run.toml"), "--output-dir", str(out)]) == 1

    def test_unknown_square_variable(self, runs, tmp_path):
        cfg = (runs / "run.toml").read_text().replace('["race"]', '["height"]')
        (runs / "bad.toml").write_text(cfg)
        shutil.copytree(runs / "out1", tmp_path / "o")
        assert main(["explore", "--config", str(runs / "bad.toml"), "--output-dir",
                     str(tmp_path / "o"), "--workers", "1"]) == 2
