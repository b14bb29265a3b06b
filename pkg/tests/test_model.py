import numpy as np
import pytest

from domainbank.autodiff import Tensor, backward, gradient_check, reduce_mean, reduce_sum
from domainbank.errors import ConfigError, ContractError, DimensionError
from domainbank.losses import l1
from domainbank.model import (ArchConfig, DomainBankModel, ImageBatch, build, count_for, cycle,
                              decode, discriminate, encode, micro_arch, model_digest,
                              param_count, param_domain, param_role, translate)

from conftest import image_batch


def conv(i, o, k, norm):
    return i * o * k * k + o + (2 * o if norm else 0)


def res(c, norm):
    return 2 * conv(c, c, 3, norm)


def bank_oracle(c_img=3, ch=(16, 32, 64), dch=(16, 32, 64), front_res=1, tied=False):
    """Closed-form size of one domain bank under the default layout."""
    c0, c1, c2 = ch
    d0, d1, d2 = dch
    enc = conv(c_img, c0, 4, True) + conv(c0, c1, 4, True) + conv(c1, c2, 4, True)
    enc += front_res * res(c2, True)
    dec = front_res * res(c2, True) + conv(c2, c1, 4, True) + conv(c1, c0, 4, True)
    dec += conv(c0, c_img, 4, False)
    disc = conv(c_img, d0, 4, False) + conv(d0, d1, 4, True)
    disc += 0 if tied else conv(d1, d2, 4, True)
    return enc + dec + disc + conv(d2, 1, 3, False)


class TestBuild:
    def test_needs_two_domains(self):
        with pytest.raises(ConfigError):
            build(1, micro_arch())

    def test_shared_stacks_are_single_objects(self, micro):
        assert micro.encoder(0).top is micro.encoder(1).top
        assert micro.decoder(0).top is micro.decoder(1).top
        assert micro.encoder(0).front is not micro.encoder(1).front

    def test_update_through_one_view_is_seen_by_the_other(self, micro):
        x = image_batch(1)
        before = encode(micro, x, 1).mu.data.copy()
        for _, p in micro.encoder(0).top.named_parameters():
            p.data += 0.05
        assert not np.array_equal(encode(micro, x, 1).mu.data, before)

    def test_same_seed_same_bytes(self):
        assert model_digest(build(3, micro_arch(), 4)) == model_digest(build(3, micro_arch(), 4))
        assert model_digest(build(3, micro_arch(), 4)) != model_digest(build(3, micro_arch(), 5))

    def test_banks_do_not_depend_on_domain_count(self):
        a, b = build(2, micro_arch(), 1), build(4, micro_arch(), 1)
        pa = dict(a.named_parameters())
        for k, p in b.named_parameters():
            if k in pa:
                np.testing.assert_array_equal(p.data, pa[k].data)

    def test_arch_validation(self):
        with pytest.raises(ConfigError):
            ArchConfig(image_size=12)
        with pytest.raises(ConfigError):
            ArchConfig(norm="batch")
        with pytest.raises(ConfigError):
            ArchConfig(private_stages=0)
        with pytest.raises(ConfigError):
            ArchConfig.from_dict({"bogus": 1})

    def test_arch_dict_round_trip_and_digest(self):
        a = ArchConfig(channels=(8, 8, 16), private_stages=2)
        assert ArchConfig.from_dict(a.to_dict()) == a
        assert a.digest() == ArchConfig.from_dict(a.to_dict()).digest()
        assert a.digest() != ArchConfig().digest()

    def test_parameter_roles(self, micro):
        roles = {param_role(k) for k, _ in micro.named_parameters()}
        assert roles == {"enc_top", "dec_top", "enc_front", "dec_back", "disc_front",
                         "disc_top", "disc_head"}
        assert param_domain("domains.1.enc_front.0.conv.weight") == 1
        assert param_domain("shared.enc_top.0.conv1.weight") is None


class TestParamCount:
    def test_bank_matches_closed_form(self):
        pc = count_for(ArchConfig(), 2)
        assert pc.per_domain == bank_oracle()

    def test_tied_top_is_counted_once(self):
        pc = count_for(ArchConfig(tie_disc_top=True), 2)
        assert pc.per_domain == bank_oracle(tied=True)
        assert pc.shared - count_for(ArchConfig(), 2).shared == conv(32, 64, 4, True)

    def test_affine_in_n(self):
        arch = micro_arch()
        pcs = [param_count(build(n, arch)) for n in (2, 3, 5)]
        assert pcs[1].total - pcs[0].total == pcs[0].per_domain
        assert pcs[2].total - pcs[0].total == 3 * pcs[0].per_domain
        assert len({p.shared for p in pcs}) == 1
        assert pcs[0].total == build(2, arch).num_params()

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_private_stages_move_parameters_not_add_them(self, k):
        base = count_for(ArchConfig(), 2)
        pc = count_for(ArchConfig(private_stages=k), 2)
        moved = pc.shared - base.shared
        assert base.per_domain - pc.per_domain == moved + (
            0 if k == 3 else 2 * (res(64, True) - res(ArchConfig().channels[k - 1], True)))


class TestStreams:
    def test_deterministic_encode_and_latent_shape(self, micro):
        x = image_batch(0)
        a, b = encode(micro, x, 0), encode(micro, x, 0)
        np.testing.assert_array_equal(a.z.data, b.z.data)
        assert a.z is a.mu
        assert a.shape == (2, 4, 1, 1)

    def test_latent_size_is_input_over_eight(self):
        m = build(2, micro_arch(), 0)
        x = image_batch(0, size=24)
        assert encode(m, x, 0).shape[2:] == (3, 3)

    def test_stochastic_noise_statistics(self):
        m = build(2, micro_arch(image_size=16), 0)
        x = image_batch(0, n=625, size=16)
        code = encode(m, x, 0, stochastic=True, rng=3)
        eta = (code.z.data - code.mu.data).astype(np.float64).ravel()
        assert eta.size == 10_000
        assert abs(eta.mean()) < 0.05
        assert eta.var() == pytest.approx(1.0, rel=0.05)

    def test_domain_tag_mismatch(self, micro):
        with pytest.raises(ContractError):
            encode(micro, image_batch(1), 0)
        with pytest.raises(ContractError):
            encode(micro, image_batch(0), 2)

    def test_bad_image_shape(self, micro):
        with pytest.raises(DimensionError):
            encode(micro, ImageBatch(Tensor(np.zeros((1, 1, 12, 12), np.float32)), 0), 0)

    def test_decode_shape_range_and_tag(self, micro, rng):
        z = Tensor(rng.normal(0, 5, (3, 4, 2, 2)).astype(np.float32))
        out = decode(micro, z, 1)
        assert out.shape == (3, 1, 16, 16)
        assert out.domain == 1
        assert np.all(np.abs(out.pixels.data) <= 1)

    def test_decode_rejects_wrong_latent(self, micro):
        with pytest.raises(DimensionError):
            decode(micro, Tensor(np.zeros((1, 3, 1, 1), np.float32)), 0)

    def test_decoder_back_isolation(self):
        m = build(3, micro_arch(), 0)
        z = encode(m, image_batch(0), 0)
        out1, out2 = decode(m, z, 1).pixels.data, decode(m, z, 2).pixels.data
        for _, p in m.domains[1].dec_back.named_parameters():
            p.data[...] = 0
        assert not np.array_equal(decode(m, z, 1).pixels.data, out1)
        np.testing.assert_array_equal(decode(m, z, 2).pixels.data, out2)

    def test_reconstruction_is_composition(self, micro):
        x = image_batch(0)
        np.testing.assert_array_equal(translate(micro, x, 0, 0).pixels.data,
                                      decode(micro, encode(micro, x, 0), 0).pixels.data)

    def test_cycle_is_translate_twice(self, micro):
        x = image_batch(0)
        ab = translate(micro, x, 0, 1)
        ref = translate(micro, ab, 1, 0)
        out = cycle(micro, x, 0, 1)
        assert out.domain == 0 and out.shape == x.shape
        np.testing.assert_array_equal(out.pixels.data, ref.pixels.data)

    def test_stochastic_cycle_is_seeded(self, micro):
        x = image_batch(0)
        a = cycle(micro, x, 0, 1, True, 5).pixels.data
        np.testing.assert_array_equal(a, cycle(micro, x, 0, 1, True, 5).pixels.data)
        assert not np.array_equal(a, cycle(micro, x, 0, 1, True, 6).pixels.data)

    def test_cycle_needs_distinct_domains(self, micro):
        with pytest.raises(ContractError):
            cycle(micro, image_batch(0), 0, 0)

    def test_cycle_gradient_reaches_every_generator_stack(self, micro):
        x = image_batch(0)
        backward(l1(cycle(micro, x, 0, 1).pixels, x.pixels))
        for k, p in micro.generator_named_params():
            if k.endswith("weight"):
                assert p.grad is not None and np.any(p.grad != 0), k


class TestDiscriminate:
    def test_scores_in_open_unit_interval(self, micro):
        s = discriminate(micro, image_batch(0, n=3), 0).data
        assert s.shape == (3, 1, 1, 1)
        assert np.all((s > 0) & (s < 1))

    def test_discriminators_are_isolated(self, micro):
        x = image_batch(1)
        before = discriminate(micro, x, 1).data.copy()
        for _, p in micro.domains[0].named_parameters():
            p.data += 1.0
        np.testing.assert_array_equal(discriminate(micro, x, 1).data, before)

    def test_gradient_through_discriminator(self, micro64):
        x = image_batch(0, dtype=np.float64)
        for k, p in micro64.named_parameters():
            if k.endswith("bias"):
                p.data = p.data + 0.1

        def f(t):
            return reduce_mean(discriminate(micro64, ImageBatch(t, 0), 0))

        assert gradient_check(f, Tensor(x.pixels.data)).max_rel_error < 1e-3
