from __future__ import annotations

from io import StringIO

import pytest
from django.core.management import call_command
from django.core.management.base import SystemCheckError
from django.test import SimpleTestCase, override_settings

from instance_rsr.checks import check_settings


class CallCheckTests(SimpleTestCase):
    def test_check(self):
        call_command("check", stdout=StringIO())

    @override_settings(INSTANCE_RSR_DTYPE="float16")
    def test_check_fails(self):
        with pytest.raises(SystemCheckError, match="instance_rsr.E002"):
            call_command("check", stdout=StringIO(), stderr=StringIO())


class CheckSettingsTests(SimpleTestCase):
    def test_passes(self):
        assert check_settings() == []

    @override_settings(INSTANCE_RSR_IMAGE_SIZE=30, INSTANCE_RSR_PATCH_SIZE=4)
    def test_indivisible_patch_size(self):
        errors = check_settings()
        assert [error.id for error in errors] == ["instance_rsr.E001"]
        assert "(30)" in errors[0].msg

    @override_settings(INSTANCE_RSR_PATCH_SIZE=0)
    def test_zero_patch_size(self):
        assert [error.id for error in check_settings()] == ["instance_rsr.E001"]

    @override_settings(INSTANCE_RSR_DTYPE="bfloat16")
    def test_unsupported_dtype(self):
        errors = check_settings()
        assert [error.id for error in errors] == ["instance_rsr.E002"]
        assert errors[0].hint == "Use one of: float32, float64"

    @override_settings(INSTANCE_RSR_MAX_INSTANCES=17)
    def test_too_many_instances(self):
        assert [error.id for error in check_settings()] == ["instance_rsr.E003"]

    @override_settings(INSTANCE_RSR_MAX_INSTANCES=0, INSTANCE_RSR_DTYPE="half")
    def test_multiple_errors(self):
        ids = [error.id for error in check_settings()]
        assert ids == ["instance_rsr.E002", "instance_rsr.E003"]
