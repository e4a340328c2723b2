import torch

import pytest

from voldiff.biflownet import (
    BiFlowNet,
    IntraPatchFlow,
    UNet3D,
    depatchify_latent,
    fuse,
    patchify_latent,
)
from voldiff.config import BiFlowNetConfig
from voldiff.errors import ConfigError, VolumeError

TOY = dict(patch_extent=4, token_size=2, embed_dim=16, num_heads=2, depth=4,
           unet_channels=(8, 12), num_classes=3)


def _net(in_channels=4, **overrides):
    torch.manual_seed(0)
    return BiFlowNet(BiFlowNetConfig(**{**TOY, **overrides}),
                     in_channels=in_channels)


def _warm(module):
    """Replace zero-initialized output heads with random weights.

    Fresh estimators deliberately start at an exactly-zero output; probes of
    signal propagation and gradient flow need non-degenerate weights.
    """
    gen = torch.Generator().manual_seed(123)
    with torch.no_grad():
        for p in module.parameters():
            if float(p.abs().max()) == 0.0:
                p.copy_(torch.randn(p.shape, generator=gen,
                                    dtype=p.dtype) * 0.05)
    return module


class TestPatchify:
    def test_single_patch_identity(self):
        z = torch.randn(2, 3, 4, 4, 4)
        p = patchify_latent(z, 4)
        assert p.shape == (2, 1, 3, 4, 4, 4)
        assert torch.equal(p[:, 0], z)

    def test_round_trip_bit_exact(self):
        z = torch.randn(2, 5, 8, 12, 4)
        p = patchify_latent(z, 4)
        back = depatchify_latent(p, (2, 3, 1))
        assert torch.equal(back, z)

    def test_block_100_is_direct_slice(self):
        z = torch.randn(1, 2, 8, 8, 8)
        p = patchify_latent(z, 4)
        # row-major order: block (1, 0, 0) sits at index 1*2*2 + 0 + 0 = 4
        assert torch.equal(p[0, 4], z[0, :, 4:, :4, :4])

    def test_indivisible_extent_rejected(self):
        with pytest.raises(VolumeError):
            patchify_latent(torch.randn(1, 2, 6, 8, 8), 4)


class TestIntraPatchFlow:
    def _flow(self, **overrides):
        torch.manual_seed(1)
        return IntraPatchFlow(BiFlowNetConfig(**{**TOY, **overrides}),
                              in_channels=4)

    def test_permutation_equivariance(self):
        flow = self._flow()
        patches = torch.randn(1, 4, 4, 4, 4, 4)
        cond = torch.randn(1, 16)
        perm = torch.tensor([2, 0, 3, 1])
        _, out = flow(patches, cond)
        _, out_perm = flow(patches[:, perm], cond)
        assert torch.allclose(out[:, perm], out_perm, atol=1e-6)

    def test_identical_patches_identical_outputs(self):
        flow = self._flow()
        one = torch.randn(1, 1, 4, 4, 4, 4)
        patches = one.repeat(1, 3, 1, 1, 1, 1)
        taps, out = flow(patches, torch.randn(1, 16))
        assert torch.allclose(out[:, 0], out[:, 1], atol=1e-6)
        assert torch.allclose(taps[0][:, 0], taps[0][:, 2], atol=1e-6)

    def test_output_shape_over_configs(self):
        for i, (p, ts, e, heads) in enumerate(
                [(4, 2, 16, 2), (4, 4, 8, 2), (2, 1, 12, 3), (2, 2, 8, 1),
                 (4, 1, 16, 4)]):
            torch.manual_seed(i)
            flow = IntraPatchFlow(
                BiFlowNetConfig(patch_extent=p, token_size=ts, embed_dim=e,
                                num_heads=heads, depth=4, unet_channels=(8, 8),
                                num_classes=2),
                in_channels=3)
            patches = torch.randn(2, 2, 3, p, p, p)
            taps, out = flow(patches, torch.randn(2, e))
            assert out.shape == patches.shape
            assert len(taps) == 4

    def test_cross_patch_jacobian_zero(self):
        flow = _warm(self._flow())
        patches = torch.randn(1, 2, 4, 4, 4, 4)
        perturbed = patches.clone()
        perturbed[0, 0] += torch.randn(4, 4, 4, 4)
        cond = torch.randn(1, 16)
        _, out_a = flow(patches, cond)
        _, out_b = flow(perturbed, cond)
        # patch 1 untouched -> its output bit-identical
        assert torch.equal(out_a[0, 1], out_b[0, 1])
        assert not torch.equal(out_a[0, 0], out_b[0, 0])


class TestUNet:
    def _unet(self):
        torch.manual_seed(2)
        return UNet3D(BiFlowNetConfig(**TOY), in_channels=4)

    def _warm_unet(self):
        return _warm(self._unet())

    def test_output_shape(self):
        unet = self._unet()
        z = torch.randn(2, 4, 8, 8, 8)
        out = unet(z, torch.randn(2, 16))
        assert out.shape == z.shape

    def test_zero_injection_identity(self):
        unet = self._unet()
        z = torch.randn(1, 4, 8, 8, 8)
        cond = torch.randn(1, 16)
        plain = unet(z, cond)
        zeros = {
            "enc_full": torch.zeros(1, 8, 8, 8, 8),
            "enc_half": torch.zeros(1, 12, 4, 4, 4),
            "dec_half": torch.zeros(1, 12, 4, 4, 4),
            "dec_full": torch.zeros(1, 8, 8, 8, 8),
        }
        injected = unet(z, cond, injected=zeros)
        assert torch.equal(plain, injected)

    def test_global_receptive_field(self):
        unet = self._warm_unet()
        z = torch.randn(1, 4, 8, 8, 8)
        cond = torch.randn(1, 16)
        out_a = unet(z, cond)
        z2 = z.clone()
        z2[0, :, 0, 0, 0] += 10.0
        out_b = unet(z2, cond)
        # corner perturbation reaches the far corner through the bottleneck
        assert not torch.equal(out_a[0, :, -1, -1, -1], out_b[0, :, -1, -1, -1])

    def test_shape_mismatch_rejected(self):
        unet = self._unet()
        z = torch.randn(1, 4, 8, 8, 8)
        with pytest.raises(VolumeError):
            unet(z, torch.randn(1, 16),
                 injected={"enc_full": torch.zeros(1, 8, 4, 4, 4)})


class TestFusion:
    def test_zero_dit_identity(self):
        u = torch.randn(2, 8, 4, 4, 4)
        assert torch.equal(fuse(torch.zeros(u.shape), u), u)

    def test_commutative_without_projection(self):
        a, b = torch.randn(1, 4, 2, 2, 2), torch.randn(1, 4, 2, 2, 2)
        assert torch.equal(fuse(a, b), fuse(b, a))

    def test_gradients_reach_both_flows(self):
        net = _warm(_net())
        z = torch.randn(2, 4, 8, 8, 8)
        out = net(z, torch.tensor([3, 7]), torch.tensor([0, 1]))
        out.square().sum().backward()
        dit_grads = [p.grad for p in net.intra.parameters() if p.grad is not None]
        unet_grads = [p.grad for p in net.unet.parameters() if p.grad is not None]
        assert any(float(g.abs().sum()) > 0 for g in dit_grads)
        assert any(float(g.abs().sum()) > 0 for g in unet_grads)


class TestBiFlowNet:
    def test_output_shapes_over_configs(self):
        for i, (C, extent) in enumerate([(4, 8), (2, 8), (6, 16)]):
            net = _net(in_channels=C)
            z = torch.randn(1, C, extent, extent, extent)
            out = net(z, 5, 0)
            assert out.shape == z.shape

    def test_unet_only_ablation(self):
        net = _net(intra_enabled=False)
        assert net.intra is None
        z = torch.randn(1, 4, 8, 8, 8)
        assert net(z, 3, 0).shape == z.shape

    def test_class_conditioning_changes_output(self):
        net = _warm(_net())
        z = torch.randn(1, 4, 8, 8, 8)
        with torch.no_grad():
            a = net(z, 10, 0)
            b = net(z, 10, 1)
        assert float(torch.linalg.vector_norm(a - b)) > 0

    def test_class_out_of_range(self):
        net = _net()
        with pytest.raises(VolumeError):
            net(torch.randn(1, 4, 8, 8, 8), 3, 7)

    def test_finite_difference_gradients(self):
        # <= 10k-parameter toy in float64: analytic vs central differences on
        # 10 randomly chosen parameters
        torch.manual_seed(4)
        cfg = BiFlowNetConfig(patch_extent=2, token_size=2, embed_dim=4,
                              num_heads=2, depth=4, unet_channels=(4, 4),
                              num_classes=2)
        net = _warm(BiFlowNet(cfg, in_channels=2).double())
        n_params = sum(p.numel() for p in net.parameters())
        assert n_params <= 10_000, n_params
        zt = torch.randn(1, 2, 8, 8, 8, dtype=torch.float64)
        eps = torch.randn(zt.shape, dtype=torch.float64)

        def loss_value():
            return ((eps - net(zt, 3, 1)) ** 2).sum()

        loss = loss_value()
        net.zero_grad()
        loss.backward()
        params = [p for p in net.parameters() if p.grad is not None
                  and float(p.grad.abs().max()) > 1e-8]
        rng = torch.Generator().manual_seed(0)
        checked = 0
        for p in params:
            if checked >= 10:
                break
            flat_idx = int(torch.randint(0, p.numel(), (1,), generator=rng))
            analytic = float(p.grad.reshape(-1)[flat_idx])
            h = 1e-6
            with torch.no_grad():
                p.reshape(-1)[flat_idx] += h
                up = float(loss_value())
                p.reshape(-1)[flat_idx] -= 2 * h
                down = float(loss_value())
                p.reshape(-1)[flat_idx] += h
            numeric = (up - down) / (2 * h)
            rel = abs(analytic - numeric) / max(abs(numeric), 1e-6)
            assert rel <= 1e-3, (rel, analytic, numeric)
            checked += 1
        assert checked == 10

    def test_estimator_wrapper_handles_unbatched(self):
        net = _net()
        est = net.as_estimator()
        z = torch.randn(4, 8, 8, 8)
        out = est(z, 3, 0)
        assert out.shape == z.shape
        batched = est(z[None], 3, 0)
        assert torch.allclose(out, batched[0], atol=1e-6)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            BiFlowNetConfig(**{**TOY, "depth": 3})
        with pytest.raises(ConfigError):
            BiFlowNetConfig(**{**TOY, "patch_extent": 4, "token_size": 3})
