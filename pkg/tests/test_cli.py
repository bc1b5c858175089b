import json

import pytest

from certrl.cli import main, read_config

TINY_CONFIG = """\
# tiny run for tests
env = pointmass1d
epochs = 2
grad_steps = 3
model_rollouts = 8
model_rollout_len = 3
init_episodes = 4
model_epochs = 3
eval_episodes = 2
batch_size = 16
end_step = 4
final_step = 6
T_train = 2
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def bundle_bytes(path):
    return {p.relative_to(path).as_posix(): p.read_bytes()
            for p in sorted(path.rglob("*")) if p.is_file() and p.name != "timings.json"}


def flip_bit(path, line_prefix, char_index, bit):
    text = path.read_bytes()
    start = text.index(line_prefix.encode())
    pos = start + len(line_prefix) + char_index
    data = bytearray(text)
    data[pos] ^= 1 << bit
    path.write_bytes(bytes(data))


@pytest.fixture
def config_file(tmp_path):
    p = tmp_path / "train.cfg"
    p.write_text(TINY_CONFIG)
    return p


def test_read_config_flat(config_file):
    cfg = read_config(config_file)
    assert cfg["epochs"] == "2" and cfg["T_train"] == "2"


def test_two_step_certify_and_verify(tmp_path, capsys):
    code, out, _ = run(capsys, "certify", "--env", "table1", "--epsilon", 0.5, "--horizon", 2,
                       "--samples", 1000, "--out-dir", tmp_path / "b")
    assert code == 0
    assert abs(json.loads(out)["wcar"] - 4.0) < 0.2
    summary = json.loads((tmp_path / "b" / "summary.json").read_text())
    assert summary["N"] == 1000 and summary["delta_E"] == 0.0
    assert len(list((tmp_path / "b" / "certificates").glob("*.txt"))) == 1000
    code, out, _ = run(capsys, "verify", tmp_path / "b")
    assert code == 0 and json.loads(out)["verified"]


def test_pipeline_is_reproducible_and_tamper_evident(tmp_path, capsys, config_file):
    bundles = []
    for name in ("r1", "r2"):
        run_dir = tmp_path / name
        assert run(capsys, "train", "--config", config_file, "--seed", 4,
                   "--out-dir", run_dir / "train")[0] == 0
        code, _, _ = run(capsys, "certify", "--policy", run_dir / "train" / "policy.ckpt",
                         "--model", run_dir / "train" / "model.ckpt", "--epsilon", 0.05,
                         "--horizon", 3, "--samples", 4, "--seed", 1, "--delta-e", 0.1,
                         "--out-dir", run_dir / "bundle")
        assert code == 0
        assert run(capsys, "verify", run_dir / "bundle")[0] == 0
        bundles.append(run_dir / "bundle")
    assert bundle_bytes(bundles[0]) == bundle_bytes(bundles[1])
    assert (tmp_path / "r1" / "train" / "train_log.csv").read_bytes() == \
        (tmp_path / "r2" / "train" / "train_log.csv").read_bytes()

    cert = bundles[0] / "certificates" / "cert_000002.txt"
    original = cert.read_bytes()
    for prefix in ("R_min ", "step 1 r "):
        for bit in range(8):
            for idx in (0, 3):
                cert.write_bytes(original)
                flip_bit(cert, prefix, idx, bit)
                code, out, _ = run(capsys, "verify", bundles[0])
                assert code == 1, (prefix, idx, bit)
    cert.write_bytes(original)
    assert run(capsys, "verify", bundles[0])[0] == 0


def test_bad_inputs_exit_2_with_json(tmp_path, capsys):
    code, _, err = run(capsys, "verify", tmp_path / "missing")
    assert code == 2 and json.loads(err)["error"] == "input"
    code, _, err = run(capsys, "certify", "--policy", tmp_path / "nope.ckpt",
                       "--out-dir", tmp_path / "x")
    assert code == 2 and "checkpoint" in json.loads(err)["message"]
    bad = tmp_path / "bad.cfg"
    bad.write_text("epochs = many\n")
    code, _, err = run(capsys, "train", "--config", bad, "--out-dir", tmp_path / "t")
    assert code == 2
    code, _, err = run(capsys, "certify", "--samples", 0, "--out-dir", tmp_path / "x")
    assert code == 2
    code, _, err = run(capsys, "frobnicate")
    assert code == 2 and json.loads(err)["error"] == "usage"


def test_report_over_horizons(tmp_path, capsys):
    for T in (1, 2, 5, 10):
        # start at the equilibrium so the per-step nominal reward does not drift with T
        assert run(capsys, "certify", "--env", "pointmass1d", "--init", "origin",
                   "--epsilon", 0.05, "--horizon", T,
                   "--samples", 200, "--out-dir", tmp_path / "runs" / f"T{T}")[0] == 0
    assert run(capsys, "attack", "--env", "pointmass1d", "--episodes", 10,
               "--out-dir", tmp_path / "runs" / "attack")[0] == 0
    code, out, _ = run(capsys, "report", tmp_path / "runs")
    assert code == 0 and json.loads(out) == {"rows": 4, "attacks": 1,
                                             "out_dir": str(tmp_path / "runs")}
    report = json.loads((tmp_path / "runs" / "report.json").read_text())
    rows = sorted(report["certified"], key=lambda r: r["T"])
    assert [r["T"] for r in rows] == [1, 2, 5, 10]
    per_step = [r["wcar_per_step"] for r in rows]
    assert all(a >= b for a, b in zip(per_step, per_step[1:]))
    csv_lines = (tmp_path / "runs" / "report.csv").read_text().splitlines()
    assert csv_lines[0].startswith("run,env,init,policy,model,epsilon,T")
    assert len(csv_lines) == 5
