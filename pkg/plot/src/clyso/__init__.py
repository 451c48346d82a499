# Copyright (C) 2025 Clyso
# SPDX-License-Identifier: AGPL-3.0-or-later

from .__version__ import __version__

__all__ = ["__version__"]
