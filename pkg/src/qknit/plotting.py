"""Bar plots of density matrices (real and imaginary parts)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .states import DensityMatrix  # noqa: E402


def basis_labels(n: int) -> list[str]:
    names = ("Z", "-Z")
    out = [""]
    for _ in range(n):
        out = [a + ("," if a else "") + b for a in out for b in names]
    return out


def plot_density_matrix(dm: DensityMatrix, path, title: str = "", reference: "DensityMatrix | None" = None) -> None:
    """Save 3D bars of Re(ρ) and Im(ρ); ``reference`` is drawn as wireframe outlines."""
    m = dm.matrix
    d = m.shape[0]
    labels = basis_labels(dm.n_qubits)
    xs, ys = np.meshgrid(np.arange(d), np.arange(d), indexing="ij")
    xs, ys = xs.ravel(), ys.ravel()
    fig = plt.figure(figsize=(9, 4.2))
    for i, (part, name) in enumerate(((m.real, "Re"), (m.imag, "Im"))):
        ax = fig.add_subplot(1, 2, i + 1, projection="3d")
        h = part.T.ravel()
        colors = np.where(h >= 0, "tab:blue", "tab:red")
        ax.bar3d(xs - 0.35, ys - 0.35, np.zeros_like(h), 0.7, 0.7, h, color=colors, shade=True, alpha=0.85)
        if reference is not None:
            r = (reference.matrix.real if name == "Re" else reference.matrix.imag).T.ravel()
            ax.bar3d(xs - 0.35, ys - 0.35, np.zeros_like(r), 0.7, 0.7, r, color=(0, 0, 0, 0), edgecolor="k", linewidth=0.4)
        ax.set_xticks(range(d))
        ax.set_yticks(range(d))
        ax.set_xticklabels(labels, fontsize=7)
        ax.set_yticklabels(labels, fontsize=7)
        lim = max(0.6, 1.1 * float(np.abs(m).max()))
        ax.set_zlim(-lim, lim)
        ax.set_title(f"{name}(ρ)")
    if title:
        fig.suptitle(title)
    fig.subplots_adjust(left=0.02, right=0.98, bottom=0.08, top=0.85, wspace=0.1)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
