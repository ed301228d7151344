import json
import shutil
import subprocess
import sys
import time

import numpy as np
import pytest

from cwfedavg.cli import main
from cwfedavg.config import parse_config
from cwfedavg.data import read_partition_csv
from cwfedavg.metrics import read_matrix_csv
from cwfedavg.runner import lambda_sweep, run_experiment

SMALL = """
seed = 2
clients = 6
rounds = 3

[dataset]
kind = "synthetic"
classes = 3
dim = 5
per_class = 60

[partition]
kind = "pathological"
classes_per_client = 1

[algorithm]
kind = "{kind}"
{mode}

[training]
lr = 0.05
hidden = [8]

[flags]
trace_batches = {trace}
"""


def small(tmp_path, kind="cwfedavg", mode='mode = "estimated_wdr"\nlambda = 1.0', trace="false", name="small.toml"):
    path = tmp_path / name
    path.write_text(SMALL.format(kind=kind, mode=mode, trace=trace))
    return path


def files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


def test_run_writes_artifacts(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", str(small(tmp_path, trace="true")), "--out", str(out)]) == 0
    names = set(files(out))
    assert names == {
        "accuracy_trace.csv", "omega_trace.csv", "norm_heatmap_local.csv", "norm_heatmap_global.csv",
        "data_distribution.csv", "omega_batch_trace.csv", "manifest.json",
    }
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 2 and len(manifest["communication"]) == 3
    assert "best mean accuracy" in capsys.readouterr().out
    _, _, glob = read_matrix_csv(out / "norm_heatmap_global.csv")
    assert glob.shape == (3, 3)
    train, test = read_partition_csv(out / "data_distribution.csv")
    assert train.shape == (6, 3) and (train.sum(axis=1) > 0).all()


def test_rerun_is_bit_identical(tmp_path):
    cfg = small(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    main(["run", str(cfg), "--out", str(a)])
    main(["run", str(cfg), "--out", str(b)])
    assert files(a) == files(b)
    shutil.rmtree(a)
    main(["run", str(cfg), "--out", str(a)])
    assert files(a) == files(b)


def test_checksum_depends_only_on_config_bytes(tmp_path):
    text = small(tmp_path).read_text()
    (tmp_path / "x").mkdir()
    other = tmp_path / "x" / "renamed.toml"
    other.write_text(text)
    s1 = run_experiment(parse_config(tmp_path / "small.toml"), tmp_path / "o1")
    s2 = run_experiment(parse_config(other), tmp_path / "o2")
    assert s1.manifest_checksum == s2.manifest_checksum


def test_local_only_has_no_global_heatmap(tmp_path):
    out = tmp_path / "out"
    assert main(["run", str(small(tmp_path, kind="local_only", mode="")), "--out", str(out)]) == 0
    assert "norm_heatmap_global.csv" not in files(out)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["communication_total"] == {"uploaded_params": 0, "downloaded_params": 0}


def test_manifest_communication_parity(tmp_path):
    m = {}
    for kind, mode in (("cwfedavg", 'mode = "true_dist"'), ("fedavg", "")):
        out = tmp_path / kind
        main(["run", str(small(tmp_path, kind=kind, mode=mode, name=f"{kind}.toml")), "--out", str(out)])
        m[kind] = json.loads((out / "manifest.json").read_text())["communication"]
    assert m["cwfedavg"] == m["fedavg"]


def test_broken_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text(SMALL.format(kind="fedavg", mode="", trace="false").replace("rounds = 3", "rounds = 0"))
    assert main(["run", str(bad)]) == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("error:") and "rounds" in err and "\n" not in err


def test_missing_config_exit_code(tmp_path, capsys):
    assert main(["run", str(tmp_path / "absent.toml")]) == 1
    assert "not found" in capsys.readouterr().err


def test_usage_errors():
    for argv in (["bogus"], [], ["sweep-lambda", "x.toml", "--lambdas"]):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2


def test_sweep_lambda(tmp_path, capsys):
    out = tmp_path / "sweep"
    assert main(["sweep-lambda", str(small(tmp_path)), "--lambdas", "1", "0", "--out", str(out)]) == 0
    header, labels, mat = read_matrix_csv(out / "lambda_sweep.csv")
    assert labels == ["0", "1"] and mat.shape == (2, 3)
    assert (out / "lambda_0" / "manifest.json").exists() and (out / "lambda_1" / "manifest.json").exists()
    with pytest.raises(ValueError):
        lambda_sweep(parse_config(small(tmp_path)), [])


def test_sweep_lambda_zero_matches_no_wdr(tmp_path):
    cfg = parse_config(small(tmp_path))
    from cwfedavg.federation import AlgorithmKind
    from cwfedavg.runner import simulate

    (row,) = lambda_sweep(cfg, [0.0])
    plain = simulate(cfg.replace(algorithm=AlgorithmKind("cwfedavg", "estimated_no_wdr")))
    assert row[3] == plain.final_mean_omega


def test_export_partition(tmp_path, capsys):
    dest = tmp_path / "p.csv"
    assert main(["export-partition", str(small(tmp_path)), "--out", str(dest)]) == 0
    train, test = read_partition_csv(dest)
    assert ((train > 0).sum(axis=1) == 1).all()
    assert "wrote 6 clients" in capsys.readouterr().out


def test_uniform_true_dist_matches_fedavg_summary(tmp_path):
    from cwfedavg.federation import AlgorithmKind
    from cwfedavg.verify import uniform_equivalence_config

    cfg = uniform_equivalence_config(rounds=10)
    fed = run_experiment(cfg, tmp_path / "f")
    cw = run_experiment(cfg.replace(algorithm=AlgorithmKind("cwfedavg", "true_dist")), tmp_path / "c")
    assert np.max(np.abs(np.array(fed.accuracy_trace) - cw.accuracy_trace)) <= 1e-6


def test_verify_subprocess_exit_zero():
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "cwfedavg", "verify"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert time.perf_counter() - t0 < 60
    assert proc.stdout.count("[PASS]") == 6
