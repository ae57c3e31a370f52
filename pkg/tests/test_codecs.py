import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pelab import codecs as C
from pelab.codecs import ForeignBitstreamError, make_codec
from pelab.gmm import GmmModel, load_model, sample_data
from pelab.metrics import GridSpec, kl_grid, mse

# Entropy of the analytically integrated cell probabilities of bimodal-1d under
# a unit uniform quantiser (independent scipy.stats oracle).
RATE_BIMODAL_DELTA1 = 2.267311947085009
# Truncated-normal mean on [0, 1), (phi(0) - phi(1)) / (Phi(1) - Phi(0)).
TRUNCNORM_01 = 0.45986222928642656


@pytest.fixture(scope="module")
def bimodal():
    return load_model("bimodal-1d")


def bs(codec, symbols):
    return C.Bitstream(np.asarray(symbols, dtype=np.int64).reshape(-1, 1), codec.codec_id)


class TestEncode:
    def test_uniform_indices(self):
        c = make_codec("uniform-mse", 1.0)
        assert c.encode([[0.3]]).symbols[0, 0] == 0
        assert c.encode([[-0.2]]).symbols[0, 0] == -1

    def test_deadzone_rule_exhaustive(self):
        c = make_codec("deadzone-opaque", 1.0)
        x = np.round(np.arange(-3000, 3001) * 1e-3, 12)[:, None]
        k = c.encode(x).symbols[:, 0]
        expected = np.array([0 if -1 <= v < 1 else (int(np.floor(v)) if v >= 1 else int(np.floor(v)) + 1) for v in x[:, 0]])
        assert np.array_equal(k, expected)
        assert c.encode([[0.8]]).symbols[0, 0] == 0
        # every cell holds exactly the points whose decoded value re-encodes to it
        lo, hi = c.cell_bounds(k)
        assert np.all((x[:, 0] >= lo) & (x[:, 0] < hi))

    def test_cell_sampler_shares_uniform_indices(self, bimodal):
        x = sample_data(bimodal, 1000, 0)
        a = make_codec("uniform-mse", 0.5, 0.1).encode(x).symbols
        b = make_codec("cell-sampler-perceptual", 0.5, 0.1).encode(x).symbols
        assert np.array_equal(a, b)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            make_codec("uniform-mse", 1.0).encode([[np.nan]])

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            make_codec("jpeg", 1.0)
        with pytest.raises(ValueError):
            C.codec_from_dict({"kind": "uniform-mse", "delta": 1.0, "colour": 1})


class TestDecode:
    def test_uniform_midpoint(self):
        c = make_codec("uniform-mse", 1.0)
        assert c.decode(bs(c, [0]))[0, 0] == 0.5

    def test_deadzone_centre(self):
        c = make_codec("deadzone-opaque", 1.0)
        assert c.decode(bs(c, [0]))[0, 0] == 0.0
        assert np.array_equal(c.decode(bs(c, [1, -1, 3]))[:, 0], [1.5, -1.5, 3.5])

    def test_cell_sampler_uniform_statistics(self):
        c = make_codec("cell-sampler-perceptual", 1.0)
        x = c.decode(bs(c, np.zeros(1_000_000)), seed=0)
        assert abs(x.mean() - 0.5) <= 0.002
        assert abs(x.var() / (1 / 12) - 1) <= 0.02
        assert x.min() >= 0.0 and x.max() < 1.0

    def test_cell_sampler_deterministic_given_seed(self):
        c = make_codec("cell-sampler-perceptual", 1.0)
        y = bs(c, np.arange(100))
        assert np.array_equal(c.decode(y, seed=3), c.decode(y, seed=3))
        assert not np.array_equal(c.decode(y, seed=3), c.decode(y, seed=4))

    def test_foreign_bitstream_rejected(self):
        a, b = make_codec("uniform-mse", 1.0), make_codec("uniform-mse", 0.5)
        with pytest.raises(ForeignBitstreamError):
            b.decode(a.encode([[0.2]]))
        with pytest.raises(ForeignBitstreamError):
            make_codec("deadzone-opaque", 1.0).decode(a.encode([[0.2]]))

    @settings(max_examples=100, deadline=None)
    @given(
        kind=st.sampled_from(["uniform-mse", "deadzone-opaque"]),
        delta=st.floats(0.01, 5.0),
        offset=st.floats(-2.0, 2.0),
        x=arrays(np.float64, (20, 2), elements=st.floats(-50, 50)),
    )
    def test_idempotent_reconstruction(self, kind, delta, offset, x):
        c = make_codec(kind, delta, offset)
        xh = c.decode(c.encode(x))
        assert np.array_equal(c.encode(xh).symbols, c.encode(x).symbols)
        assert np.array_equal(c.decode(c.encode(xh)), xh)


class TestRate:
    def test_constant_symbols(self):
        c = make_codec("uniform-mse", 1.0)
        assert C.rate_bits(c, bs(c, np.zeros(5000))) == 0.0

    def test_four_values(self):
        c = make_codec("uniform-mse", 1.0)
        assert C.rate_bits(c, bs(c, np.tile([0, 1, 2, 3], 1000))) == pytest.approx(2.0, abs=0.01)

    def test_bimodal_matches_cell_entropy(self, bimodal):
        c = make_codec("uniform-mse", 1.0)
        y = c.encode(sample_data(bimodal, 1_000_000, 0))
        assert C.rate_bits(c, y) == pytest.approx(RATE_BIMODAL_DELTA1, abs=0.01)


class TestCellPosteriorMean:
    def test_truncated_normal(self):
        m = load_model("std-normal-1d")
        c = make_codec("uniform-mse", 1.0)
        assert C.cell_posterior_mean(m, c, bs(c, [0]))[0, 0] == pytest.approx(TRUNCNORM_01, abs=1e-9)

    def test_symmetric_cell(self, bimodal):
        c = make_codec("uniform-mse", 1.0, offset=-0.5)
        assert C.cell_posterior_mean(bimodal, c, bs(c, [0]))[0, 0] == pytest.approx(0.0, abs=1e-12)

    def test_narrow_cell_limit(self, bimodal):
        c = make_codec("uniform-mse", 1e-3)
        k = np.array([-2100, -5, 0, 1234])
        centres = c.reconstruction(k)
        assert np.allclose(C.cell_posterior_mean(bimodal, c, bs(c, k))[:, 0], centres, atol=1e-6)

    def test_rejects_multidimensional(self):
        m = load_model("grid-gmm-2d")
        c = make_codec("uniform-mse", 1.0)
        with pytest.raises(NotImplementedError):
            C.cell_posterior_mean(m, c, c.encode(np.zeros((2, 2))))

    def test_mse_ordering(self, bimodal):
        x = sample_data(bimodal, 100_000, 1)
        uni = make_codec("uniform-mse", 1.0)
        cell = make_codec("cell-sampler-perceptual", 1.0)
        y = uni.encode(x)
        oracle = mse(C.cell_posterior_mean(bimodal, uni, y), x)
        mid = mse(uni.decode(y), x)
        sampled = mse(cell.decode(cell.encode(x), seed=1), x)
        assert oracle <= mid <= sampled


class TestContainers:
    @pytest.mark.parametrize("kind", C.KINDS)
    def test_bitstream_round_trip(self, kind, bimodal):
        c = make_codec(kind, 0.37, -0.2)
        y = c.encode(sample_data(bimodal, 2000, 0) * 40)
        raw = C.bitstream_bytes(y, c)
        assert raw[:5] == b"PELB1"
        y2, c2 = C.read_bitstream(io.BytesIO(raw))
        assert np.array_equal(y2.symbols, y.symbols) and c2.codec_id == c.codec_id
        assert C.bitstream_bytes(y2, c2) == raw

    def test_truncated_and_trailing_rejected(self):
        c = make_codec("uniform-mse", 1.0)
        raw = C.bitstream_bytes(c.encode([[300.0], [-7.0]]), c)
        with pytest.raises(ValueError):
            C.read_bitstream(io.BytesIO(raw[:-1]))
        with pytest.raises(ValueError):
            C.read_bitstream(io.BytesIO(raw + b"\x00"))
        with pytest.raises(ValueError):
            C.read_bitstream(io.BytesIO(b"XXXXX" + raw[5:]))

    def test_extreme_symbols(self):
        c = make_codec("uniform-mse", 1.0)
        y = bs(c, [np.iinfo(np.int64).max, np.iinfo(np.int64).min, 0, -1])
        y2, _ = C.read_bitstream(io.BytesIO(C.bitstream_bytes(y, c)))
        assert np.array_equal(y2.symbols, y.symbols)

    def test_samples_round_trip(self):
        x = np.random.default_rng(0).standard_normal((37, 3))
        buf = io.BytesIO()
        C.write_samples(x, buf)
        assert buf.getvalue()[:5] == b"PELS1"
        buf.seek(0)
        assert np.array_equal(C.read_samples(buf), x)


class TestProperties:
    def test_cell_sampler_has_improvable_kl(self, bimodal):
        c = make_codec("cell-sampler-perceptual", 1.0)
        x = sample_data(bimodal, 200_000, 2)
        assert kl_grid(c.decode(c.encode(x), seed=2), bimodal, GridSpec.uniform(1)).value >= 0.05

    def test_deadzone_is_not_differentiable(self):
        c = make_codec("deadzone-opaque", 1.0)
        assert c.differentiable is False
        with pytest.raises(TypeError):
            c.soft_index(np.zeros((1, 1)))

    def test_soft_index_close_to_hard_and_derivative(self):
        c = make_codec("uniform-mse", 0.5)
        x = np.linspace(-3, 3, 101)[:, None] + 0.013
        soft, dsoft = c.soft_index(x, derivative=True)
        centre = c.reconstruction(c.encode(x).symbols)
        near = np.abs(x - centre) < 0.1 * c.delta
        assert np.allclose(soft[near], c.encode(x).symbols[near], atol=0.05)
        h = 1e-6
        fd = (c.soft_index(x + h) - c.soft_index(x - h)) / (2 * h)
        assert np.allclose(dsoft, fd, atol=1e-4)

    def test_decoded_log_density_normalised(self, bimodal):
        for kind in C.KINDS:
            f = C.decoded_log_density(bimodal, make_codec(kind, 1.0), 0.3)
            grid = np.linspace(-12, 12, 200_001)[:, None]
            mass = np.trapezoid(np.exp(f(grid)), grid[:, 0])
            assert mass == pytest.approx(1.0, abs=1e-8)

    def test_decoded_log_density_matches_histogram(self):
        m = GmmModel(np.ones(1), np.zeros((1, 1)), np.ones((1, 1)))
        c = make_codec("uniform-mse", 1.0)
        f = C.decoded_log_density(m, c, 0.5)
        from pelab.solvers import add_noise

        x = add_noise(c.decode(c.encode(sample_data(m, 400_000, 0))), 0.5, 1)
        assert kl_grid(x, f, GridSpec.uniform(1, -8, 8, 256)).value <= 0.003
