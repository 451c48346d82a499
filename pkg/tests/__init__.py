# Copyright (C) 2025 Clyso
# SPDX-License-Identifier: AGPL-3.0-or-later


