import json
import socket
import threading
import time

import pytest

from fedavoid import cli, data, models

from toys import TINY

CFG = {"arch": TINY.name, "rounds": 2, "epochs": 1, "lr": 0.5, "batch_size": 8, "train_size": 16, "val_size": 12,
       "train_envs": ["S0", "S1"], "val_envs": ["S0", "S1"]}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(CFG))
    return p


def run(*argv):
    return cli.main([str(a) for a in argv])


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_gen_data(tmp_path, cfg_path):
    assert run("gen-data", "--config", cfg_path, "--seed", 3, "--out", tmp_path / "d") == 0
    names = sorted(p.name for p in (tmp_path / "d").glob("*.feds"))
    assert names == ["S0_train_s3.feds", "S0_val.feds", "S1_train_s3.feds", "S1_val.feds"]
    ds = data.load(tmp_path / "d" / "S1_train_s3.feds")
    assert len(ds) == 16 and ds.seed == 3 and ds.split == "train"


@pytest.mark.parametrize("cmd", ["train-central", "train-fed"])
def test_train_commands_write_model_and_metrics(tmp_path, cfg_path, cmd):
    out = tmp_path / cmd
    assert run(cmd, "--config", cfg_path, "--seed", 1, "--out", out) == 0
    mp = cli.load_model(out / "model.feda")
    assert mp.arch is TINY
    summary = json.loads((out / "metrics.json").read_text())
    assert set(summary["metrics"]) == {"S0", "S1", "pooled"}
    assert summary["config"]["mode"] == ("federated" if cmd == "train-fed" else "centralized")


def test_train_fed_over_lossy_network_matches_in_process(tmp_path, cfg_path):
    assert run("train-fed", "--config", cfg_path, "--out", tmp_path / "a") == 0
    assert run("train-fed", "--config", cfg_path, "--out", tmp_path / "b", "--net-drop", 0.3, "--net-dup", 0.1,
               "--net-reorder", 2) == 0
    assert cli.load_model(tmp_path / "a" / "model.feda") == cli.load_model(tmp_path / "b" / "model.feda")
    assert json.loads((tmp_path / "b" / "metrics.json").read_text())["committed_rounds"] == 2


def test_total_loss_is_a_protocol_failure(tmp_path, cfg_path):
    assert run("train-fed", "--config", cfg_path, "--out", tmp_path, "--net-drop", 1.0) == 2


def test_config_errors(tmp_path, cfg_path):
    assert run("train-central", "--config", tmp_path / "missing.json", "--out", tmp_path) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("matrix", "--config", bad, "--out", tmp_path) == 1
    bad.write_text(json.dumps({**CFG, "rounds": -1}))
    assert run("train-central", "--config", bad, "--out", tmp_path) == 1
    assert run("matrix", "--config", cfg_path, "--modes", "sideways", "--out", tmp_path) == 1
    assert run("sim2real", "--config", cfg_path, "--out", tmp_path) == 1  # sim val envs
    assert run("report", "--input", tmp_path / "none.csv", "--out", tmp_path) == 1
    assert run("no-such-command") == 1
    assert run("train-fed", "--net-drop", "lots") == 1
    assert run("train-fed", "--config", cfg_path, "--net-drop", 2.0, "--out", tmp_path) == 1


def test_help_exits_zero(capsys):
    assert run("--help") == 0
    assert "sim2real" in capsys.readouterr().out


def test_internal_error_exit_code(monkeypatch, tmp_path, cfg_path):
    def explode(cfg, seed):
        raise RuntimeError("bug")

    monkeypatch.setattr(cli.ex, "train", explode)
    assert run("train-central", "--config", cfg_path, "--out", tmp_path) == 3


def test_corrupt_model_file_is_protocol_error(tmp_path):
    p = tmp_path / "m.feda"
    cli.save_model(models.initial_model(TINY, 0), p)
    raw = bytearray(p.read_bytes())
    raw[20] ^= 0xFF
    p.write_bytes(bytes(raw))
    from fedavoid.transport import DecodeError

    with pytest.raises(DecodeError):
        cli.load_model(p)


def test_matrix_then_report(tmp_path, cfg_path, capsys):
    out = tmp_path / "m"
    assert run("matrix", "--config", cfg_path, "--archs", TINY.name, "--min-combo", 2, "--out", out) == 0
    rows = (out / "matrix.csv").read_text().splitlines()
    # 2 modes x 1 combo x 1 seed x (2 val envs + pooled)
    assert len(rows) == 1 + 6
    assert run("report", "--input", out / "matrix.csv", "--out", tmp_path / "r") == 0
    summary = json.loads((tmp_path / "r" / "matrix_summary.json").read_text())
    assert summary["cells"] == json.loads((out / "matrix_summary.json").read_text())["cells"]


def test_sim2real_command(tmp_path):
    cfg = tmp_path / "s.json"
    cfg.write_text(json.dumps({**CFG, "val_envs": ["R0", "R1"]}))
    assert run("sim2real", "--config", cfg, "--archs", TINY.name, "--out", tmp_path) == 0
    assert (tmp_path / "sim2real.csv").exists()


def test_continual_command(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"archs": [TINY.name], "seeds": [0], "pretrain_rounds": 1, "pretrain_size": 16,
                               "steps": 40, "n_buf": 16, "epochs": 1, "batch_size": 8, "rstar_size": 10}))
    assert run("continual", "--config", cfg, "--out", tmp_path) == 0
    assert (tmp_path / "continual.csv").read_text().count("\n") == 1 + 4
    assert json.loads((tmp_path / "continual_summary.json").read_text())["medians"]
    cfg.write_text(json.dumps({"seeds": "zero"}))
    assert run("continual", "--config", cfg, "--out", tmp_path) == 1


def test_client_without_server_is_protocol_error(tmp_path, cfg_path):
    port = free_port()
    assert run("client", "--config", cfg_path, "--client-id", "S0", "--port", port, "--out", tmp_path) == 2
    assert run("client", "--config", cfg_path, "--client-id", "R2", "--port", port, "--out", tmp_path) == 1


def test_serve_and_clients_over_tcp(tmp_path, cfg_path):
    port = free_port()
    codes = {}

    def serve():
        codes["serve"] = run("serve", "--config", cfg_path, "--seed", 2, "--port", port, "--out", tmp_path / "srv")

    def client(cid):
        codes[cid] = run("client", "--config", cfg_path, "--seed", 2, "--client-id", cid, "--port", port,
                         "--timeout", 60, "--out", tmp_path)

    st = threading.Thread(target=serve)
    st.start()
    deadline = time.monotonic() + 10
    while time.monotonic() < deadline:
        try:
            socket.create_connection(("127.0.0.1", port), timeout=0.5).close()
            break
        except OSError:
            time.sleep(0.05)
    threads = [threading.Thread(target=client, args=(c,)) for c in ("S0", "S1")]
    for t in threads:
        t.start()
    for t in threads + [st]:
        t.join(120)
    assert codes == {"serve": 0, "S0": 0, "S1": 0}
    assert run("train-fed", "--config", cfg_path, "--seed", 2, "--out", tmp_path / "ref") == 0
    assert cli.load_model(tmp_path / "srv" / "model.feda") == cli.load_model(tmp_path / "ref" / "model.feda")
