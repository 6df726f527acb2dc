"""Prompt template files and placeholder substitution.

Templates are plain text with ``{name}`` placeholders. Only names passed to
:func:`render` are substituted, so literal braces elsewhere survive.
"""

from __future__ import annotations

import os
import re
from importlib import resources
from pathlib import Path

TEMPLATE_NAMES = ("generate", "dq1", "dq2", "dq3", "iq_authors", "iq_overlap")

_PLACEHOLDER = re.compile(r"\{(\w+)\}")


def render(template: str, **values) -> str:
    def sub(m: re.Match) -> str:
        name = m.group(1)
        return str(values[name]) if name in values else m.group(0)

    return _PLACEHOLDER.sub(sub, template)


class TemplateSet:
    """Loads ``<name>.tmpl`` files, preferring a user directory over the bundled defaults."""

    def __init__(self, directory: str | os.PathLike | None = None):
        self.directory = Path(directory) if directory else None
        self._texts: dict[str, str] = {}
        for name in TEMPLATE_NAMES:
            self._texts[name] = self._load(name)

    def _load(self, name: str) -> str:
        if self.directory is not None:
            path = self.directory / f"{name}.tmpl"
            if path.exists():
                return path.read_text(encoding="utf-8")
        return resources.files("refcheck").joinpath("templates", f"{name}.tmpl").read_text(
            encoding="utf-8"
        )

    def __getitem__(self, name: str) -> str:
        return self._texts[name]

    def render(self, name: str, **values) -> str:
        return render(self._texts[name], **values)
