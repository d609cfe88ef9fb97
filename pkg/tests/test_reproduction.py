"""Directional checks on the complementary task with full-length federations.

Clients are scored on their own validation shard. Enabled with ``FEDBLOCKS_RUN_SLOW=1``.
"""

import functools

import pytest

from fedblocks.experiment import ExperimentConfig, run

pytestmark = pytest.mark.slow


@functools.cache
def personalization_gain(modality_config: str, split: str, fusion: str = "concat"):
    config = ExperimentConfig.from_dict(
        {
            "task": {"kind": "complementary"},
            "model": {"fusion": fusion},
            "data": {"split": split, "eval_scope": "client"},
            "experiment": {"name": f"{modality_config}-{split}-{fusion}", "modality_config": modality_config},
        }
    )
    return run(config, progress=False).gains


def test_full_model_learns_with_complete_modalities():
    # Chance macro-F1 on four balanced classes is about 0.25.
    assert personalization_gain("0-0-10", "iid").s_fm >= 0.45


def test_modality_exclusive_gain_is_positive_under_label_skew():
    # A single modality carries no label information, so with IID clients every mode sits at chance.
    iid, niid = personalization_gain("5-5-0", "iid"), personalization_gain("5-5-0", "niid")
    assert niid.pg > 0
    assert niid.pg >= iid.pg


def test_gain_grows_with_missing_rate():
    pg = {c: personalization_gain(c, "niid").pg for c in ("0-0-10", "3-3-4", "5-5-0")}
    assert pg["5-5-0"] >= pg["3-3-4"] >= pg["0-0-10"]


def test_modality_complete_gain_is_near_neutral():
    assert abs(personalization_gain("0-0-10", "iid").pg) <= 5.0


def test_attention_private_fusion_beats_private_head():
    gains = personalization_gain("5-5-0", "niid", "attention")
    assert gains.phf_gain >= gains.ph_gain
