"""Static SVG learning curves: one chart per (env, task), one line per method."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def emit_charts(groups: dict, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    by_env_task: dict[tuple[str, str], list[dict]] = {}
    for g in groups.values():
        by_env_task.setdefault((g["env"], g["task"]), []).append(g)
    paths = []
    plt.rcParams["svg.hashsalt"] = "u2o"  # stable element ids across reruns
    for (env_id, task), curves in sorted(by_env_task.items()):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for g in sorted(curves, key=lambda g: g["method"]):
            pts = g["points"]
            if not pts:
                continue
            x = np.array([p["env_steps"] for p in pts])
            mean = np.array([p["eval_return_mean"] for p in pts])
            std = np.array([p["eval_return_std"] for p in pts])
            (line,) = ax.plot(x, mean, label=g["method"], gid=f"line-{g['method']}")
            ax.fill_between(x, mean - std, mean + std, color=line.get_color(), alpha=0.2, linewidth=0,
                            gid=f"band-{g['method']}")
        ax.set_xlabel("env_steps")
        ax.set_ylabel("eval_return")
        ax.set_title(f"{env_id} / {task}")
        ax.legend(loc="best", fontsize="small")
        fig.tight_layout()
        path = out_dir / f"{env_id}_{task}.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        paths.append(path)
    return paths
