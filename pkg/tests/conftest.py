import sys

import numpy as np
import pytest

from refdx.corpus import Corpus, ReferenceCase, SyntheticSpec, generate_synthetic


def make_case(cid, image, abnormality="Normal", dementia="NonDementia", description="", text=None):
    image = np.asarray(image, dtype=np.float64)
    t = image if text is None else np.asarray(text, dtype=np.float64)
    return ReferenceCase(cid, image, t, t, t, abnormality, dementia, description)


def corpus_from_images(images, labels=None):
    labels = labels or ["Normal"] * len(images)
    cases = [make_case(f"c{i}", img, lab) for i, (img, lab) in enumerate(zip(images, labels))]
    return Corpus(cases, len(images[0]))


@pytest.fixture(scope="session")
def small_synth():
    return generate_synthetic(SyntheticSpec(4, 10, 8, 6.0, 1.0, seed=3, id_prefix="s"))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(mod.RESULTS):
        ok, title, detail, seconds = mod.RESULTS[number]
        info = ", ".join(f"{k}={v}" for k, v in detail.items())
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}  ({info})")
