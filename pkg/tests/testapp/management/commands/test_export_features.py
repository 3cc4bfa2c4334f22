from __future__ import annotations

from io import StringIO

import pytest
from django.core.management import CommandError, call_command
from django.test import SimpleTestCase

from instance_rsr.probe import load_features
from tests.testapp.utils import make_tmp_dir, train_tiny_checkpoint


class ExportFeaturesTests(SimpleTestCase):
    def setUp(self):
        self.checkpoint = train_tiny_checkpoint(make_tmp_dir(self))

    def test_default_layer(self):
        path = make_tmp_dir(self) / "features.safetensors"
        out = StringIO()
        call_command(
            "export_features", ckpt=self.checkpoint, out=path, scenes=2, stdout=out
        )
        assert out.getvalue().startswith("Wrote layer 1 features to")
        dump = load_features(path)
        assert dump.layer == 1
        assert dump.features.shape == (128, 16)
        assert path.with_suffix(".csv").exists()

    def test_explicit_layer(self):
        path = make_tmp_dir(self) / "features.safetensors"
        call_command(
            "export_features",
            "--layer",
            "2",
            ckpt=self.checkpoint,
            out=path,
            scenes=1,
            stdout=StringIO(),
        )
        assert load_features(path).layer == 2

    def test_layer_out_of_range(self):
        with pytest.raises(CommandError, match="E_PROBE"):
            call_command(
                "export_features",
                "--layer",
                "3",
                ckpt=self.checkpoint,
                out=make_tmp_dir(self) / "features.safetensors",
                stdout=StringIO(),
            )
