"""The command line entry point."""

import pytest

from helpers import DEMO_DIR

from forwardlite import cli


class _StubServer:
    def __init__(self):
        self.closed = False

    def serve_forever(self):
        raise KeyboardInterrupt

    def server_close(self):
        self.closed = True


def test_check_compiles_demo(capsys):
    assert cli.main(["check", str(DEMO_DIR)]) == 0
    out = capsys.readouterr().out
    assert "2 page(s)" in out


def test_check_reports_load_errors(tmp_path, capsys):
    assert cli.main(["check", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error:") and "app.json" in err


def test_serve_uses_port_flag(monkeypatch):
    seen = {}

    def fake(app, port, host):
        seen["port"], seen["host"] = port, host
        return _StubServer()

    monkeypatch.setattr(cli, "make_http_server", fake)
    monkeypatch.delenv("FW_PORT", raising=False)
    assert cli.main(["serve", str(DEMO_DIR), "--port", "1234"]) == 0
    assert seen == {"port": 1234, "host": "127.0.0.1"}


def test_env_var_overrides_port(monkeypatch):
    seen = {}

    def fake(app, port, host):
        seen["port"] = port
        return _StubServer()

    monkeypatch.setattr(cli, "make_http_server", fake)
    monkeypatch.setenv("FW_PORT", "4321")
    assert cli.main(["serve", str(DEMO_DIR)]) == 0
    assert seen["port"] == 4321


def test_subcommand_required():
    with pytest.raises(SystemExit):
        cli.main([])
