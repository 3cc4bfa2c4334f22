from __future__ import annotations

import torch
from django.test import SimpleTestCase, override_settings

from instance_rsr import conf


class ConfTests(SimpleTestCase):
    def test_defaults(self):
        assert conf.get_setting("PATCH_SIZE") == 4
        assert conf.get_setting("MAX_INSTANCES") == 16

    def test_test_settings(self):
        assert conf.default_dtype() == torch.float64
        assert conf.default_device() == torch.device("cpu")

    @override_settings(INSTANCE_RSR_PATCH_SIZE=8, INSTANCE_RSR_DTYPE="float32")
    def test_override(self):
        assert conf.get_setting("PATCH_SIZE") == 8
        assert conf.default_dtype() == torch.float32
