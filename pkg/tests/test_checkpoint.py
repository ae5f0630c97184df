import struct

import numpy as np
import pytest

from kplab.checkpoint import MAGIC, decode, encode, load_series, save_series
from kplab.nn import CheckpointSeries


def _series(rng, m=3, p=5, phase="train"):
    return CheckpointSeries(rng.standard_normal((m + 1, p)), seed=9, loss_curve=[1.0, 0.5, 0.25][:m],
                            accuracy=0.75, phase=phase)


def test_layout_is_bit_exact():
    s = CheckpointSeries(np.array([[1.0, 2.0], [3.0, 4.0]]))
    blob = encode(s)
    assert blob[:6] == MAGIC and blob[6] == 1
    assert struct.unpack_from("<IQ", blob, 7) == (1, 2)
    assert np.frombuffer(blob[19:], "<f8").tolist() == [1.0, 2.0, 3.0, 4.0]
    assert len(blob) == 19 + 8 * 4


@pytest.mark.parametrize("phase,flag", [("phase1", 1), ("final", 2)])
def test_phase_flag(rng, phase, flag):
    blob = encode(_series(rng, phase=phase))
    assert blob[6] == 2 and blob[7] == flag
    w, got = decode(blob)
    assert got == phase


@pytest.mark.parametrize("phase", ["train", "phase1", "final"])
def test_roundtrip(tmp_path, rng, phase):
    s = _series(rng, phase=phase)
    path = save_series(tmp_path / "run" / "w.kpchk", s)
    back = load_series(path)
    assert back.weights.tobytes() == s.weights.tobytes()
    assert back.phase == phase and back.seed == 9
    assert back.loss_curve == s.loss_curve and back.accuracy == 0.75
    assert not list(tmp_path.rglob("*.tmp"))


def test_corruption_detected(rng):
    blob = encode(_series(rng))
    with pytest.raises(ValueError):
        decode(b"XXXXXX" + blob[6:])
    with pytest.raises(ValueError):
        decode(blob[:-8])
    with pytest.raises(ValueError):
        decode(blob[:6] + bytes([9]) + blob[7:])
