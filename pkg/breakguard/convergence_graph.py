import numpy as np
try:
    from matplotlib import pyplot
except ImportError:
    raise ImportError("matplotlib must be installed to create convergence "
        "graphs")

# classes that import optional modules have to be in their own file, or else
# they get imported (and potentially error) when breakguard is imported.


class ConvergenceGraph:
    """
    Eigenvalue decay on a log scale next to the chance estimate of each
    continuation step.

    Parameters
    ----------
    eigenvalues: dict[str, ndarray]
        Eigenvalue sequences by label, for example one per mesh resolution.
    steps: list[:class:`~breakguard.optimizer.ContinuationStep`] or list[dict]
        Continuation history.
    figure: :class:`matplotlib.figure.Figure`
        Drawn into if passed.
    alpha_c: float
        The chance bound, drawn as a horizontal line.
    """
    def __init__(self, eigenvalues=None, steps=None, figure=None,
        alpha_c=None):
        self.figure = figure or pyplot.figure(figsize=(10, 4))
        panels = int(bool(eigenvalues)) + int(bool(steps))
        if panels == 0:
            raise ValueError("nothing to plot")
        axes = np.atleast_1d(self.figure.subplots(1, panels))
        i = 0
        if eigenvalues:
            self.plot_eigenvalues(axes[i], eigenvalues)
            i += 1
        if steps:
            self.plot_chance(axes[i], steps, alpha_c)

    def plot_eigenvalues(self, ax, eigenvalues):
        for label, values in eigenvalues.items():
            values = np.abs(np.asarray(values))
            ax.semilogy(np.arange(1, len(values) + 1), values, marker="o",
                markersize=3, label=label)
        ax.set_xlabel("Index")
        ax.set_ylabel("|Eigenvalue|")
        ax.legend()

    def plot_chance(self, ax, steps, alpha_c):
        steps = [s if isinstance(s, dict) else s.to_dict() for s in steps]
        ax.plot([s["k"] for s in steps], [s["chance"] for s in steps],
            marker="o")
        if alpha_c is not None:
            ax.axhline(y=alpha_c, color="red")
        ax.set_xlabel("Continuation step")
        ax.set_ylabel("Chance")
