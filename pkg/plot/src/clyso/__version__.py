# Copyright (C) 2025 Clyso
# SPDX-License-Identifier: AGPL-3.0-or-later

import importlib.metadata

__version__ = importlib.metadata.version("plot")
