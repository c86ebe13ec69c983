import json
import struct

import numpy as np
import pytest

from facecloak.core import (
    CLOAK_MAGIC,
    BudgetMap,
    CloakMask,
    Embedding,
    EvalReport,
    ImagePlane,
    check_label,
    config_digest,
    load_cloak,
    read_cloak_header,
    save_cloak,
)
from facecloak.errors import (
    ContainerInvariantError,
    ContainerNotFoundError,
    CorruptHeaderError,
    CorruptPayloadError,
    InvariantError,
    PersistenceError,
    ShapeError,
)


def make_cloak(rng, shape=(20, 24, 3), eps=8 / 255, eps_a=32 / 255):
    boosted = rng.random(shape) < 0.3
    budget = BudgetMap(np.where(boosted, np.float32(eps_a), np.float32(eps)), eps, eps_a)
    delta = np.clip(rng.normal(0, 0.1, shape).astype(np.float32), -budget.values, budget.values)
    attention = rng.uniform(0, 2, shape).astype(np.float32)
    return CloakMask(delta, attention, budget, "toy-abc", "0" * 64, "digest")


class TestImagePlane:
    def test_accepts_valid(self, rng):
        img = ImagePlane(rng.random((16, 17, 3)))
        assert img.shape == (16, 17, 3)
        assert img.data.dtype == np.float64
        assert not img.data.flags.writeable

    @pytest.mark.parametrize("shape", [(15, 16, 3), (16, 16, 4), (16, 16), (16, 15, 3)])
    def test_rejects_bad_shape(self, shape):
        with pytest.raises(ShapeError):
            ImagePlane(np.zeros(shape))

    @pytest.mark.parametrize("bad", [-1e-9, 1.0 + 1e-9, np.nan, np.inf])
    def test_rejects_out_of_range_instead_of_clamping(self, bad):
        arr = np.full((16, 16, 3), 0.5)
        arr[3, 4, 1] = bad
        with pytest.raises(InvariantError):
            ImagePlane(arr)

    def test_uint8_round_trip(self, rng):
        raw = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
        assert np.array_equal(ImagePlane.from_uint8(raw).to_uint8(), raw)

    def test_identity_hash_is_sha256_of_payload(self, rng):
        import hashlib

        img = ImagePlane(rng.random((16, 16, 3)))
        assert img.identity_hash() == hashlib.sha256(img.payload_bytes()).hexdigest()
        assert len(img.payload_bytes()) == 16 * 16 * 3 * 8


class TestEmbedding:
    def test_normalized(self, rng):
        e = Embedding.normalized(rng.normal(size=64))
        assert abs(np.linalg.norm(e.values) - 1) < 1e-12

    def test_rejects_non_unit(self):
        with pytest.raises(InvariantError):
            Embedding(np.array([1.0, 1.0]))

    def test_distance(self):
        a, b = Embedding(np.array([1.0, 0.0])), Embedding(np.array([0.0, 1.0]))
        assert a.distance(b) == pytest.approx(np.sqrt(2))

    def test_label(self):
        assert check_label("x") == "x"
        with pytest.raises(InvariantError):
            check_label("")


class TestBudgetMap:
    def test_values_restricted_to_two_levels(self):
        with pytest.raises(InvariantError):
            BudgetMap(np.full((4, 4, 3), 0.1), 8 / 255, 32 / 255)

    def test_boosted_not_below_base(self):
        with pytest.raises(InvariantError):
            BudgetMap(np.full((4, 4, 3), 0.1), 0.2, 0.1)

    def test_boosted_mask(self):
        vals = np.full((4, 4, 3), np.float32(8 / 255))
        vals[0, 0, 0] = np.float32(32 / 255)
        b = BudgetMap(vals, 8 / 255, 32 / 255)
        assert b.boosted_mask().sum() == 1


class TestCloakMask:
    def test_rejects_delta_over_budget(self):
        shape = (16, 16, 3)
        budget = BudgetMap.uniform(shape, 8 / 255)
        delta = np.zeros(shape, np.float32)
        delta[0, 0, 0] = np.float32(9 / 255)
        with pytest.raises(InvariantError):
            CloakMask(delta, np.ones(shape), budget, "b", "", "")

    def test_rejects_attention_out_of_range(self):
        shape = (16, 16, 3)
        with pytest.raises(InvariantError):
            CloakMask(np.zeros(shape), np.full(shape, 2.5), BudgetMap.uniform(shape, 0.1), "b", "", "")

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            CloakMask(np.zeros((16, 16, 3)), np.ones((16, 17, 3)), BudgetMap.uniform((16, 16, 3), 0.1), "b", "", "")


class TestContainer:
    def test_zero_cloak_file_size_and_round_trip(self, tmp_path):
        cloak = CloakMask.zeros((112, 112, 3), eps=8 / 255)
        p = tmp_path / "zero.fclk"
        save_cloak(cloak, p)
        blob = p.read_bytes()
        assert blob.startswith(CLOAK_MAGIC)
        (n,) = struct.unpack("<Q", blob[6:14])
        header = json.loads(blob[14:14 + n])
        assert list(header) == ["height", "width", "channels", "base_eps", "boosted_eps", "backend_id",
                                "seed_identity_hash", "config_digest", "payload_sha256"]
        # delta, attention and budget payloads
        assert len(blob) == 14 + n + 112 * 112 * 3 * 4 * 3
        assert load_cloak(p) == cloak

    def test_random_cloak_bit_exact(self, tmp_path, rng):
        cloak = make_cloak(rng)
        p = tmp_path / "c.fclk"
        save_cloak(cloak, p)
        back = load_cloak(p)
        assert back == cloak
        assert back.delta.tobytes() == cloak.delta.tobytes()
        assert back.budget.base_eps == cloak.budget.base_eps
        save_cloak(back, tmp_path / "d.fclk")
        assert (tmp_path / "d.fclk").read_bytes() == p.read_bytes()

    def test_unwritable_path(self, tmp_path, rng):
        with pytest.raises(PersistenceError) as ei:
            save_cloak(make_cloak(rng), tmp_path / "missing-dir" / "c.fclk")
        assert "missing-dir" in str(ei.value)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ContainerNotFoundError):
            load_cloak(tmp_path / "nope.fclk")

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.fclk"
        p.write_bytes(b"NOTCLK" + b"\0" * 20)
        with pytest.raises(CorruptHeaderError):
            load_cloak(p)

    def test_truncated_payload(self, tmp_path, rng):
        p = tmp_path / "c.fclk"
        save_cloak(make_cloak(rng), p)
        p.write_bytes(p.read_bytes()[:-5])
        with pytest.raises(CorruptPayloadError):
            load_cloak(p)

    def test_flipped_payload_byte(self, tmp_path, rng):
        p = tmp_path / "c.fclk"
        save_cloak(make_cloak(rng), p)
        blob = bytearray(p.read_bytes())
        blob[-1] ^= 0x01
        p.write_bytes(bytes(blob))
        with pytest.raises(CorruptPayloadError):
            load_cloak(p)

    def _rewrite_header(self, path, **changes):
        blob = path.read_bytes()
        (n,) = struct.unpack("<Q", blob[6:14])
        header = json.loads(blob[14:14 + n])
        header.update(changes)
        hb = json.dumps(header).encode()
        path.write_bytes(CLOAK_MAGIC + struct.pack("<Q", len(hb)) + hb + blob[14 + n:])

    def test_header_eps_a_below_eps(self, tmp_path, rng):
        p = tmp_path / "c.fclk"
        save_cloak(make_cloak(rng), p)
        self._rewrite_header(p, boosted_eps=1 / 255)
        with pytest.raises(ContainerInvariantError):
            load_cloak(p)

    def test_header_not_json(self, tmp_path):
        p = tmp_path / "c.fclk"
        p.write_bytes(CLOAK_MAGIC + struct.pack("<Q", 3) + b"{{{")
        with pytest.raises(CorruptHeaderError):
            load_cloak(p)

    def test_error_kinds_are_distinct(self):
        kinds = {e.kind for e in (ContainerNotFoundError, CorruptHeaderError, CorruptPayloadError,
                                  ContainerInvariantError)}
        assert len(kinds) == 4

    def test_read_header_only(self, tmp_path, rng):
        p = tmp_path / "c.fclk"
        save_cloak(make_cloak(rng), p)
        h = read_cloak_header(p)
        assert (h["height"], h["width"], h["channels"]) == (20, 24, 3)


class TestEvalReport:
    def test_json_round_trip_and_field_order(self):
        r = EvalReport(80.0, 70.0, 90.0, 0.85, 28.0, [{"transform": "jpeg", "strength": 30, "n": 1, "psr": 60.0}],
                       "toy", 8 / 255, 10, 8, "abc", 100)
        d = json.loads(r.to_json())
        assert list(d) == ["top1_psr", "top5_psr", "verification_psr", "ssim_mean", "psnr_mean_db",
                           "robustness", "metadata"]
        assert EvalReport.from_dict(d) == r

    @pytest.mark.parametrize("kw", [{"top1_psr": 101.0}, {"ssim_mean": 1.5}, {"psnr_mean_db": 0.0}])
    def test_invariants(self, kw):
        base = dict(top1_psr=1.0, top5_psr=1.0, verification_psr=None, ssim_mean=0.5, psnr_mean_db=30.0)
        base.update(kw)
        with pytest.raises(InvariantError):
            EvalReport(**base)


def test_config_digest_is_order_independent():
    assert config_digest({"a": 1, "b": [1, 2]}) == config_digest({"b": [1, 2], "a": 1})
    assert config_digest({"a": 1}) != config_digest({"a": 2})
