from collections import defaultdict

import pytest

CRITERIA = {
    "gradients": "Gradient integrity (finite differences, every parameter, 4 variants)",
    "combiners": "Combiner oracles (APA / ACPA / AAPA, 20 instances each)",
    "causality": "Causality of decoder logits (100 trials, bit-exact)",
    "bleu": "BLEU oracle (50-sentence suite)",
    "optim": "Adam and KL scalar oracles (1000 steps / distributions)",
    "desk": "Desk-scale learning (copy task, BLEU >= 0.95 within 10 epochs)",
    "table": "Directional stacked vs parallel comparison",
    "divergence": "Branch attention divergence of trained AAPA(B=3)",
    "persistence": "Determinism and persistence",
}

_checks: dict[str, list[tuple[bool, str]]] = defaultdict(list)


@pytest.fixture
def verdict():
    """Record one sub-check of an acceptance criterion; returns ``ok`` for use in ``assert``."""

    def record(key: str, ok, detail: str) -> bool:
        if key not in CRITERIA:
            raise KeyError(key)
        _checks[key].append((bool(ok), detail))
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _checks:
        return
    terminalreporter.section("acceptance criteria")
    for key, title in CRITERIA.items():
        checks = _checks.get(key)
        if not checks:
            terminalreporter.write_line(f"NOT RUN  {title}")
            continue
        status = "PASS" if all(ok for ok, _ in checks) else "FAIL"
        detail = "; ".join(("" if ok else "[x] ") + d for ok, d in checks)
        terminalreporter.write_line(f"{status:<8} {title}: {detail}")
