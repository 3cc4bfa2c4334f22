from __future__ import annotations

from io import StringIO
from unittest import mock

from django.test import SimpleTestCase

from instance_rsr.cli import COMMANDS, run, usage
from tests.testapp.utils import make_tmp_dir


class CLITests(SimpleTestCase):
    def run_cli(self, *argv):
        with mock.patch("sys.stdout", new_callable=StringIO) as stdout, mock.patch(
            "sys.stderr", new_callable=StringIO
        ) as stderr:
            code = run(list(argv))
        return code, stdout.getvalue(), stderr.getvalue()

    def test_help(self):
        code, stdout, _ = self.run_cli("--help")
        assert code == 0
        assert stdout == usage()
        for name in COMMANDS:
            assert f"  {name}\n" in stdout

    def test_no_command(self):
        code, _, stderr = self.run_cli()
        assert code == 2
        assert stderr.startswith("usage: instance-rsr")

    def test_unknown_command(self):
        code, _, stderr = self.run_cli("upscale")
        assert code == 2
        assert "unknown command 'upscale'" in stderr

    def test_selftest(self):
        code, stdout, _ = self.run_cli("selftest", "--only", "codec-round-trip")
        assert code == 0
        assert "1/1 checks passed" in stdout

    def test_invalid_case(self):
        code, _, stderr = self.run_cli(
            "train", "--case", "3", "--out", str(make_tmp_dir(self))
        )
        assert code == 2
        assert "invalid case 3: expected one of 0, 1, 2" in stderr

    def test_unknown_flag(self):
        code, _, stderr = self.run_cli("selftest", "--bogus")
        assert code == 2
        assert "unrecognized arguments: --bogus" in stderr

    def test_runtime_error(self):
        code, _, stderr = self.run_cli(
            "degrade", "--in", str(make_tmp_dir(self)), "--out", str(make_tmp_dir(self))
        )
        assert code == 1
        assert "E_CONFIG: No scenes found" in stderr

    def test_command_help(self):
        code, stdout, _ = self.run_cli("gen-data", "--help")
        assert code == 0
        assert "--num-instances" in stdout
