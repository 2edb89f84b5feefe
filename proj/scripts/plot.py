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
"""Plots the per-timestep summaries written by `mpvic eval` and `mpvic summarize`.

Each run directory must hold summary_timeseries.csv. One figure per run:
deviation and mean stiffness eigenvalue with their 95% bootstrap bands,
per-axis stiffness, and the external force.
"""

import argparse
import pathlib

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402


def plot_run(run: pathlib.Path, out: pathlib.Path) -> pathlib.Path:
    df = pd.read_csv(run / "summary_timeseries.csv")
    fig, axes = plt.subplots(4, 1, figsize=(7, 9), sharex=True)
    ax = axes[0]
    ax.plot(df.t, df.deviation_mean * 1000.0)
    ax.fill_between(df.t, df.deviation_lo * 1000.0, df.deviation_hi * 1000.0, alpha=0.3)
    ax.set_ylabel("|dx| [mm]")
    ax = axes[1]
    ax.plot(df.t, df.lambda_mean)
    ax.fill_between(df.t, df.lambda_lo, df.lambda_hi, alpha=0.3)
    ax.set_ylabel("mean eig(K) [N/m]")
    for axis in "xyz":
        axes[2].plot(df.t, df[f"K{axis}"], label=f"K{axis}")
        axes[3].plot(df.t, df[f"f{axis}"], label=f"f{axis}")
    axes[2].set_ylabel("K [N/m]")
    axes[3].set_ylabel("f_ext [N]")
    axes[3].set_xlabel("t [s]")
    axes[2].legend(loc="upper right", ncol=3)
    axes[3].legend(loc="upper right", ncol=3)
    fig.suptitle(f"{run.name} ({int(df.trials.max())} trials)")
    fig.tight_layout()
    path = out / f"{run.name}.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("runs", nargs="+", type=pathlib.Path, help="run output directories")
    parser.add_argument("--out", type=pathlib.Path, default=pathlib.Path("plots"))
    args = parser.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    for run in args.runs:
        print(plot_run(run, args.out))


if __name__ == "__main__":
    main()
