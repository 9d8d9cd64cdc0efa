"""Box/strip charts of per-repetition MSE deltas, written as SVG."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "svg.fonttype": "none",
    "svg.hashsalt": "missshift",
}
ENV_COLORS = {
    "source": "#4c72b0",
    "target-shifted": "#dd8452",
    "complete": "#dd8452",
    "target-noshift": "#55a868",
}


def delta_chart(frame, title, path, baseline, reference=None, seed=0):
    """One row per estimator; a box and jittered points per environment.

    ``frame`` has columns estimator, environment, delta. ``reference``, when
    given, is the constant-mean model's average delta and is drawn as a line.
    """
    estimators = list(dict.fromkeys(frame["estimator"]))
    envs = [e for e in ENV_COLORS if e in set(frame["environment"])]
    rng = np.random.default_rng(seed)
    width = 0.8 / max(len(envs), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.5, 0.45 * len(estimators) * max(len(envs), 1) + 1.2))
        for j, env in enumerate(envs):
            sub = frame[frame["environment"] == env]
            pos, data = [], []
            for i, est in enumerate(estimators):
                vals = sub.loc[sub["estimator"] == est, "delta"].dropna().to_numpy()
                if len(vals):
                    pos.append(i + (j - (len(envs) - 1) / 2) * width)
                    data.append(vals)
            if not data:
                continue
            ax.boxplot(
                data, positions=pos, widths=0.8 * width, orientation="horizontal", showfliers=False,
                patch_artist=True, boxprops={"facecolor": ENV_COLORS[env], "alpha": 0.35},
                medianprops={"color": ENV_COLORS[env]},
            )
            for p, vals in zip(pos, data):
                jitter = rng.uniform(-0.25, 0.25, len(vals)) * width
                ax.scatter(vals, p + jitter, s=10, color=ENV_COLORS[env], zorder=3, label=None)
            ax.scatter([], [], s=10, color=ENV_COLORS[env], label=env)
        ax.axvline(0.0, color="0.3", lw=0.8)
        if reference is not None and np.isfinite(reference):
            ax.axvline(reference, color="0.5", lw=0.8, ls="--", label="mean model")
        ax.set_yticks(range(len(estimators)), estimators)
        ax.invert_yaxis()
        ax.set_xlabel(f"MSE minus {baseline} MSE")
        ax.set_title(title)
        ax.legend(loc="best", frameon=False)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path
