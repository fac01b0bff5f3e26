from cofinetune.evaluation import APReport
from cofinetune.plotting import plot_comparison, plot_per_class_ap, plot_training_log
from cofinetune.train import LogEntry

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def _report():
    return APReport(
        per_class_ap={0: 0.9, 1: 0.4, 2: None, 3: 0.1},
        gt_counts={0: 30, 1: 8, 2: 0, 3: 2},
        label_frequency={0: 20000, 1: 5000, 2: 0, 3: 12},
        groups={0: "Head", 1: "Mid", 2: "Tail", 3: "Tail"},
        group_map={"Head": 0.9, "Mid": 0.4, "Tail": 0.1},
        mean_ap=0.4666,
        class_names={0: "stand", 1: "sit", 3: "swim"},
    )


def _render_all(d):
    log = [LogEntry(i, "det" if i % 3 else "cls", 1.0 / (i + 1), 0.01 * i) for i in range(30)]
    return [
        plot_per_class_ap(_report(), d / "ap.png"),
        plot_comparison({"Head": 0.5, "Mid": 0.3, "Tail": None, "overall": 0.4},
                        {"Head": 0.6, "Mid": 0.2, "Tail": 0.1, "overall": 0.45}, "seq", "cof", d / "cmp.png"),
        plot_training_log(log, d / "sub" / "log.png"),
        plot_training_log([], d / "empty_log.png"),
    ]


def test_figures_are_written(tmp_path):
    for p in _render_all(tmp_path):
        assert p.read_bytes().startswith(PNG_MAGIC)


def test_rerender_is_byte_identical(tmp_path):
    a = _render_all(tmp_path / "a")
    b = _render_all(tmp_path / "b")
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes(), pa.name


def test_empty_report(tmp_path):
    empty = APReport({}, {}, {}, {}, {"Head": None, "Mid": None, "Tail": None}, None)
    assert plot_per_class_ap(empty, tmp_path / "e.png").is_file()
