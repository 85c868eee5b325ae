import pytest

from cohortgraph import config as C
from cohortgraph.config import ConfigError


def test_defaults_validate_and_round_trip(tmp_path):
    cfg = C.from_dict(None)
    assert cfg.graph.k == 7 and cfg.model.heads == 5 and cfg.model.dropout == 0.10
    C.dump(cfg, tmp_path / "c.yaml")
    assert C.load(tmp_path / "c.yaml") == cfg


def test_paper_profile_overrides_and_explicit_keys_win():
    cfg = C.from_dict({"profile": "paper", "train": {"batch": 4}})
    assert cfg.model.base_filters == 32 and cfg.model.input_size == (96, 96)
    assert cfg.train.batch == 4 and cfg.train.slices == 10 and cfg.train.lr == 5e-4
    assert cfg.cohort.synth.shape == (96, 96, 96)


@pytest.mark.parametrize(
    "doc,path",
    [
        ({"model": {"nope": 1}}, "model.nope"),
        ({"train": {"lr": -1}}, "train.lr"),
        ({"train": {"batch": "x"}}, "train.batch"),
        ({"model": {"arch": "resnet"}}, "model.arch"),
        ({"graph": {"k": 9, "context": 8}}, "graph.context"),
        ({"train": {"patience": 30}}, "train.patience"),
        ({"profile": "huge"}, "profile"),
        ({"model": {"arch": "unet-pretrained-mlp"}, "train": {"task": "seg-only"}}, "model.arch"),
        ({"cohort": {"synth": {"prevalence_icu": 2.0}}}, "cohort.synth"),
        ({"model": {"dropout": True}}, "model.dropout"),
    ],
)
def test_errors_name_the_field(doc, path):
    with pytest.raises(ConfigError) as err:
        C.from_dict(doc)
    assert err.value.path == path


def test_document_level_errors(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("- a\n- b\n")
    with pytest.raises(ConfigError, match="mapping"):
        C.load(p)
    p.write_text("model: {arch: [\n")
    with pytest.raises(ConfigError, match="YAML"):
        C.load(p)
