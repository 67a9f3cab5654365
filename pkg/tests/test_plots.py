import numpy as np

from dfadapter.plots import plot_roc, plot_saliency, plot_training_curves

PNG = b"\x89PNG\r\n\x1a\n"


def test_training_curves_png(tmp_path):
    log = [{"epoch": e, "lr": 0.01 * e, "loss": 1.0 / e, "train_acc": 0.5 + 0.1 * e, "val_acc": None if e == 1 else 0.6}
           for e in range(1, 4)]
    plot_training_curves(log, tmp_path / "c.png")
    assert (tmp_path / "c.png").read_bytes()[:8] == PNG


def test_roc_png(tmp_path):
    plot_roc([(0.0, 0.0), (0.2, 0.7), (1.0, 1.0)], 0.75, 0.25, tmp_path / "r.png")
    assert (tmp_path / "r.png").read_bytes()[:8] == PNG


def test_saliency_png(tmp_path):
    img = np.random.default_rng(0).uniform(size=(3, 16, 16))
    plot_saliency(img, np.linspace(0, 1, 256).reshape(16, 16), tmp_path / "s.png", title="fake")
    assert (tmp_path / "s.png").read_bytes()[:8] == PNG
