import json

import numpy as np
import pytest

from sealkit import cli
from sealkit import nn
from sealkit import tensor as T
from sealkit.trigger import write_ppm

SMALL = ["--size", "16", "--channels", "1", "--classes", "3"]
FAST = ["--iters", "100", "--restarts", "1"]


def run(tmp, name, *args):
    out = tmp / name
    code = cli.main([args[0], "--out-dir", str(out), *args[1:]])
    return code, out


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


@pytest.fixture
def model(tmp_path):
    code, out = run(tmp_path, "gen", "gen-model", "--seed", "0", *SMALL)
    assert code == 0
    return out / "model.snet"


def test_gen_model_manifest(model):
    m = manifest(model.parent)
    assert m["command"] == "gen-model" and m["config"]["seed"] == 0
    assert m["rng"] == T.RNG_TAG and "model.snet" in m["outputs"]
    assert nn.load(model).input_shape == (1, 16, 16)


def test_stain_then_verify(tmp_path, model):
    code, out = run(tmp_path, "st", "stain", "--model", str(model), "--layer", "2", "--a", "1", "--b", "1",
                    "--seed", "3", "--delta", "8", *FAST, *SMALL, "--count", "50", "--probes", "64")
    assert code == 0
    code, ver = run(tmp_path, "ver", "verify", "--model", str(out / "model.snet"), "--record", str(out / "stain.sstn"))
    assert code == 0
    res = json.loads((ver / "verify.json").read_text())
    assert res["match"] and res["response"] == pytest.approx(8.0, abs=1e-3)
    code, fpr = run(tmp_path, "fpr", "eval-fpr", "--model", str(out / "model.snet"), "--record",
                    str(out / "stain.sstn"), *SMALL, "--count", "20")
    assert code == 0 and (fpr / "histogram.csv").exists()
    code, pr = run(tmp_path, "pr", "prune-attack", "--model", str(out / "model.snet"), "--record",
                   str(out / "stain.sstn"), "--fraction", "0.1")
    assert code == 0 and "survival_change" in manifest(pr)["result"]


def test_weight_schema_from_cli(tmp_path):
    code, gen = run(tmp_path, "g", "gen-model", "--arch", "toy-mlp", "--seed", "1", "--hidden", "8", *SMALL)
    assert code == 0
    bits = "".join(str(i % 2) for i in range(8))
    code, out = run(tmp_path, "w", "stain", "--model", str(gen / "model.snet"), "--layer", "3", "--index", "0",
                    "--schema", "weight", "--message", bits, "--seed", "2", *FAST)
    assert code == 0
    w = nn.load(out / "model.snet")[3].W[0]
    assert "".join("1" if x > 0 else "0" for x in w) == bits


def test_lock_sqex_then_eval_lock(tmp_path):
    code, gen = run(tmp_path, "g", "gen-model", "--seed", "4", "--inject-sqex", "3", *SMALL)
    assert code == 0
    code, lk = run(tmp_path, "lk", "lock", "--model", str(gen / "model.snet"), "--kind", "sqex", "--layer", "2",
                   "--a", "1", "--b", "1", "--seed", "5", "--keep-backup", *FAST, *SMALL, "--probes", "64")
    assert code == 0
    for name in ("model.snet", "lock.slck", "patch.spat"):
        assert name in manifest(lk)["outputs"]
    code, ev = run(tmp_path, "ev", "eval-lock", "--original", str(gen / "model.snet"), "--locked",
                   str(lk / "model.snet"), "--record", str(lk / "lock.slck"), *SMALL, "--count", "40")
    assert code == 0
    rows = (ev / "report.csv").read_text().strip().splitlines()
    assert len(rows) == 7
    acc = manifest(ev)["result"]
    assert acc["locked-patched"] == pytest.approx(acc["edited-patched"], abs=0.01)
    code, ed = run(tmp_path, "ed", "edited", "--model", str(lk / "model.snet"), "--record", str(lk / "lock.slck"))
    assert code == 0


def test_trigger_and_patch_apply(tmp_path, model):
    code, tr = run(tmp_path, "tr", "trigger", "--model", str(model), "--layer", "2", "--a", "1", "--b", "1",
                   "--seed", "0", *FAST)
    assert code == 0 and (tr / "patch.spat").exists()
    img = tmp_path / "in.ppm"
    gray = np.zeros((3, 16, 16))
    img.write_bytes(write_ppm(gray))
    # a 3-channel image against a 1-channel patch is a precondition failure
    code, _ = run(tmp_path, "pa", "patch-apply", "--image", str(img), "--patch", str(tr / "patch.spat"))
    assert code == 3
    T.save_tensor(tmp_path / "in.sten", np.zeros((1, 16, 16)))
    code, pa = run(tmp_path, "pa2", "patch-apply", "--image", str(tmp_path / "in.sten"), "--patch",
                   str(tr / "patch.spat"), "--output", "out.sten")
    assert code == 0 and T.load_tensor(pa / "out.sten").max() > 0


def test_certify_values(tmp_path):
    code, out = run(tmp_path, "c2", "certify", "--thm", "2", "--m", "2000", "--n", "0")
    assert code == 0
    assert manifest(out)["result"]["value"] == pytest.approx(0.0432, abs=1e-3)
    code, out = run(tmp_path, "c1", "certify", "--thm", "1", "--d", "3", "--cov-trace", "1", "--threshold", "1")
    assert code == 0 and manifest(out)["result"]["value"] == pytest.approx(np.pi / 16, abs=1e-9)
    code, out = run(tmp_path, "cc", "certify", "--thm", "collision", "--d", "100", "--theta", "0.5")
    assert code == 0 and manifest(out)["result"]["value"] == pytest.approx(np.exp(-12.5), abs=1e-12)


def test_certify_from_feature_file(tmp_path):
    T.save_tensor(tmp_path / "f.sten", T.Rng(0).normal((500, 8)))
    code, out = run(tmp_path, "cf", "certify", "--thm", "finetune", "--features", str(tmp_path / "f.sten"),
                    "--threshold", "20", "--perturbation", "1")
    assert code == 0
    cert = json.loads((out / "certificate.json").read_text())
    assert cert["kind"] == "finetune" and cert["estimated_moments"]


def test_config_file_and_overrides(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# dkw certificate\nthm = 2\nm = 1000\nn = 3   # three hits\n")
    code, out = run(tmp_path, "cfg", "certify", "--config", str(cfg), "--set", "m=2000", "--set", "n=0")
    assert code == 0
    m = manifest(out)
    assert m["config"]["m"] == 2000 and m["result"]["value"] == pytest.approx(0.0432, abs=1e-3)


def test_byte_identical_reruns(tmp_path):
    a = run(tmp_path, "a", "validate-bounds", "--thm", "2", "--seed", "1", "--m", "300", "--test-n", "500",
            "--repeats", "20")[1]
    b = run(tmp_path, "b", "validate-bounds", "--thm", "2", "--seed", "1", "--m", "300", "--test-n", "500",
            "--repeats", "20")[1]
    assert (a / "bounds.csv").read_bytes() == (b / "bounds.csv").read_bytes()
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
    c1 = run(tmp_path, "c1", "certify", "--thm", "2", "--m", "500", "--n", "2")[1]
    c2 = run(tmp_path, "c2", "certify", "--thm", "2", "--m", "500", "--n", "2")[1]
    assert (c1 / "certificate.json").read_bytes() == (c2 / "certificate.json").read_bytes()


def test_validate_bounds_thm1(tmp_path):
    code, out = run(tmp_path, "v1", "validate-bounds", "--thm", "1", "--seed", "0", "--d", "16", "--trials", "5",
                    "--pairs", "500")
    assert code == 0
    res = manifest(out)["result"]
    assert res["trials_respected"] == res["trials"] == 5


def test_exit_codes(tmp_path, model):
    # config errors
    assert run(tmp_path, "e1", "gen-model", *SMALL)[0] == 2  # seed missing
    assert run(tmp_path, "e2", "certify", "--set", "bogus=1")[0] == 2
    assert run(tmp_path, "e3", "certify", "--thm", "7")[0] == 2
    assert run(tmp_path, "e4", "stain", "--model", str(model), "--layer", "x", "--seed", "0")[0] == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("no equals sign here\n")
    assert run(tmp_path, "e5", "certify", "--config", str(bad))[0] == 2
    # precondition failures
    assert run(tmp_path, "e6", "certify", "--thm", "2", "--m", "10", "--n", "11")[0] == 3
    assert run(tmp_path, "e7", "verify", "--model", str(tmp_path / "missing.snet"), "--record", "x")[0] == 3
    assert run(tmp_path, "e8", "stain", "--model", str(model), "--layer", "1", "--seed", "0", *FAST)[0] == 3
    with pytest.raises(SystemExit):
        cli.main(["no-such-command"])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_code(tmp_path):
    net = nn.sequential((1, 16, 16), nn.Flatten(), nn.Dense(np.full((2, 256), np.inf), np.zeros(2)),
                        nn.Dense(np.ones((2, 2)), np.zeros(2)))
    nn.save(net, tmp_path / "inf.snet")
    code, _ = run(tmp_path, "n", "trigger", "--model", str(tmp_path / "inf.snet"), "--layer", "2", "--seed", "0",
                  *FAST)
    assert code == 4
