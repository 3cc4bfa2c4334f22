from __future__ import annotations

from django.apps import AppConfig
from django.utils.translation import gettext_lazy as _

from instance_rsr.checks import register_checks


class InstanceRSRConfig(AppConfig):
    name = "instance_rsr"
    verbose_name = _("Instance-aware diffusion super-resolution")

    def ready(self) -> None:
        register_checks()
