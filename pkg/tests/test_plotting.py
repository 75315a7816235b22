import pytest

from iotfuzz.assessor import ResponseVerdict, VerdictClass, assess, load_registry
from iotfuzz.plotting import campaign_figure, save_campaign_figure


def report(cats):
    vuln = load_registry()["D3D_003"]
    return assess(vuln, [ResponseVerdict(i, c, "") for i, c in enumerate(cats)])


@pytest.mark.parametrize("suffix,magic", [(".png", b"\x89PNG"), (".svg", b"<?xml"), (".pdf", b"%PDF")])
def test_figure_written(tmp_path, suffix, magic):
    path = tmp_path / f"campaign{suffix}"
    save_campaign_figure(report([VerdictClass.VALID] * 3 + [VerdictClass.INVALID] * 5), path)
    assert path.read_bytes().startswith(magic)


def test_empty_campaign_draws():
    fig = campaign_figure(report([]))
    assert len(fig.axes) == 2
