#!/usr/bin/env python3
# Copyright 2026 The MPVIC Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""Validates every config in a directory against its schema.json."""

import json
import pathlib
import sys

try:
    import jsonschema
except ImportError:
    print("jsonschema not installed; skipping")
    sys.exit(0)


def main() -> int:
    root = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else "configs")
    schema = json.loads((root / "schema.json").read_text())
    failed = 0
    for path in sorted(root.glob("*.json")):
        if path.name == "schema.json":
            continue
        try:
            jsonschema.validate(json.loads(path.read_text()), schema)
            print(f"ok {path.name}")
        except jsonschema.ValidationError as e:
            print(f"invalid {path.name}: {e.message}")
            failed += 1
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
