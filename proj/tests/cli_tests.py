#!/usr/bin/env python3
"""End-to-end checks for the ccdiff binary: exit codes, overrides, determinism,
and a golden-output regression for the eval pipeline."""
import filecmp
import json
import os
import shutil
import subprocess
import sys
import tempfile

BIN = os.environ["CCDIFF_BIN"]
GOLDEN_DIR = os.environ["GOLDEN_DIR"]
CONFIG_DIR = os.environ["CONFIG_DIR"]

FAILURES = []


def check(name, cond, detail=""):
    status = "ok" if cond else "FAIL"
    print(f"  [{status}] {name}" + (f" ({detail})" if detail and not cond else ""))
    if not cond:
        FAILURES.append(name)


def run(args, cwd=None):
    return subprocess.run([BIN] + args, capture_output=True, text=True, cwd=cwd)


def write_config(path, **overrides):
    cfg = {
        "seed": 5,
        "data": {"n": 24, "H": 16, "W": 16, "kind": "seg_mask", "K": 3,
                 "split": [0.75, 0.125, 0.125]},
        "train": {"T": 20, "t_thre": 5, "lr": 0.001, "batch": 4, "iters": 4},
        "reward": {"layers": 1, "extractor_iters": 20},
        "eval": {"n": 2, "layers": 1, "extractor_iters": 20},
        "sample": {"n": 1},
        "bench": {"t_samples": [1, 2]},
    }
    for key, val in overrides.items():
        if isinstance(val, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(val)
        else:
            cfg[key] = val
    with open(path, "w") as f:
        json.dump(cfg, f)
    return path


def resolved_json(stdout):
    head, _, rest = stdout.partition("resolved config:\n")
    del head
    depth = 0
    for i, ch in enumerate(rest):
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return json.loads(rest[: i + 1])
    raise AssertionError("no resolved config JSON on stdout")


def test_exit_codes(tmp):
    print("exit codes and error reporting:")
    r = run([])
    check("no subcommand rejected", r.returncode != 0)

    bad = os.path.join(tmp, "bad.json")
    with open(bad, "w") as f:
        json.dump({"seed": 1, "tran": {"iters": 2}}, f)
    r = run(["pretrain", "--config", bad, "--out", os.path.join(tmp, "o0")])
    check("unknown key exits 2", r.returncode == 2, f"rc={r.returncode}")
    check("unknown key named", "tran" in r.stderr, r.stderr.strip())
    check("config error prefix", "config error:" in r.stderr, r.stderr.strip())

    cfg = write_config(os.path.join(tmp, "c.json"))
    r = run(["pretrain", "--config", cfg, "--out", os.path.join(tmp, "o1")])
    check("missing dataset exits 3", r.returncode == 3, f"rc={r.returncode}")
    check("io error prefix", "io error:" in r.stderr, r.stderr.strip())

    badval = write_config(os.path.join(tmp, "cbad.json"),
                          data={"kind": "segmask", "n": 24, "H": 16, "W": 16, "K": 3})
    r = run(["finetune", "--config", badval, "--out", os.path.join(tmp, "o1")])
    check("invalid value exits 2", r.returncode == 2, f"rc={r.returncode}")
    check("bad kind named", "segmask" in r.stderr, r.stderr.strip())


def test_resolved_config(tmp):
    print("resolved config echo and overrides:")
    cfg = write_config(os.path.join(tmp, "c.json"))
    out = os.path.join(tmp, "gen")
    r = run(["gen-data", "--config", cfg, "--out", out])
    check("gen-data succeeds", r.returncode == 0, r.stderr.strip())
    check("prints resolved config", r.stdout.startswith("resolved config:\n"))
    j = resolved_json(r.stdout)
    check("config seed echoed", j["seed"] == 5)
    check("out override echoed", j["out"] == out)
    check("defaults filled", j["train"]["T_sample"] == 5 and j["train"]["strategy"] == "efficient")
    check("dataset written", os.path.isfile(os.path.join(out, "data.cnds")))
    check("manifest written", os.path.isfile(os.path.join(out, "manifest.txt")))

    r = run(["gen-data", "--config", cfg, "--seed", "77", "--out", os.path.join(tmp, "gen77")])
    check("seed override echoed", resolved_json(r.stdout)["seed"] == 77)


def test_pipeline(tmp):
    print("pipeline behavior:")
    cfg = write_config(os.path.join(tmp, "c.json"))
    out = os.path.join(tmp, "run")
    for sub in ("gen-data", "pretrain"):
        r = run([sub, "--config", cfg, "--out", out])
        check(f"{sub} succeeds", r.returncode == 0, r.stderr.strip())
    check("loss curve written", os.path.isfile(os.path.join(out, "pretrain_loss.csv")))

    # zero-iteration training must be a pure save of the initialization
    zcfg = write_config(os.path.join(tmp, "z.json"), train={"T": 20, "iters": 0})
    zout = os.path.join(tmp, "zrun")
    run(["gen-data", "--config", zcfg, "--out", zout])
    r = run(["pretrain", "--config", zcfg, "--out", zout])
    check("zero-iter pretrain succeeds", r.returncode == 0, r.stderr.strip())
    check("zero-iter checkpoint equals init",
          filecmp.cmp(os.path.join(zout, "init.cnpp"), os.path.join(zout, "pretrain.cnpp"),
                      shallow=False))

    # same config, two runs: bitwise identical checkpoints
    out2 = os.path.join(tmp, "run2")
    for sub in ("gen-data", "pretrain"):
        run([sub, "--config", cfg, "--out", out2])
    check("pretrain deterministic",
          filecmp.cmp(os.path.join(out, "pretrain.cnpp"), os.path.join(out2, "pretrain.cnpp"),
                      shallow=False))

    r = run(["finetune", "--config", cfg, "--out", out])
    check("finetune succeeds", r.returncode == 0, r.stderr.strip())
    check("step reports written", os.path.isfile(os.path.join(out, "steps_efficient.csv")))
    with open(os.path.join(out, "steps_efficient.csv")) as f:
        header = f.readline().strip()
    check("step csv header", header == "iter,t,l_train,l_reward,l_total", header)

    r = run(["sample", "--config", cfg, "--out", out])
    check("sample succeeds", r.returncode == 0, r.stderr.strip())
    pgm = os.path.join(out, "sample_0.pgm")
    check("sample images written",
          os.path.isfile(pgm) and os.path.isfile(os.path.join(out, "sample_0_cond.pgm"))
          and os.path.isfile(os.path.join(out, "sample_0_extracted.pgm")))
    if os.path.isfile(pgm):
        with open(pgm, "rb") as f:
            check("pgm magic", f.read(2) == b"P5")

    r = run(["bench-tape", "--config", cfg, "--out", out])
    check("bench-tape succeeds", r.returncode == 0, r.stderr.strip())
    check("tape fit written", os.path.isfile(os.path.join(out, "tape_fit.csv")))


def test_golden_eval(tmp):
    print("golden eval regression:")
    golden = os.path.join(GOLDEN_DIR, "eval.csv")
    if not os.path.isfile(golden):
        check("golden eval.csv present", False, f"missing {golden}")
        return
    cfg = os.path.join(CONFIG_DIR, "golden.json")
    out = os.path.join(tmp, "golden")
    for sub in ("gen-data", "pretrain", "eval"):
        r = run([sub, "--config", cfg, "--out", out])
        check(f"golden {sub} succeeds", r.returncode == 0, r.stderr.strip())
    produced = os.path.join(out, "eval.csv")
    same = os.path.isfile(produced) and filecmp.cmp(golden, produced, shallow=False)
    detail = ""
    if not same and os.path.isfile(produced):
        detail = "produced: " + open(produced).read().strip()
    check("eval.csv matches golden", same, detail)


def main():
    tmp = tempfile.mkdtemp(prefix="ccdiff_cli_")
    try:
        test_exit_codes(tmp)
        test_resolved_config(tmp)
        test_pipeline(tmp)
        test_golden_eval(tmp)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    if FAILURES:
        print(f"{len(FAILURES)} check(s) failed: {', '.join(FAILURES)}")
        return 1
    print("all cli checks passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
