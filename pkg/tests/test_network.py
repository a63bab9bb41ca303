"""Dual-branch blocks, token recursion, upsampling, and the weighted loss."""

import numpy as np
import pytest
import torch

from fewseg.network import (
    ConvBlock,
    DualBranchBlock,
    FewShotSegmenter,
    binarize_logits,
    combine_level_losses,
    conv_block_predict,
    total_loss,
    upsample_token,
)
from fewseg.attention import downsample_mask
from oracles import bilinear_upsample_oracle


def make_block(in_dim=2, width=4, query_grid=(4, 4), support_grid=(2, 2), self_branch=True, seed=0):
    torch.manual_seed(seed)
    block = DualBranchBlock(in_dim, width, query_grid, support_grid, self_branch=self_branch)
    block.eval()
    return block


# =============================================================================
# Hard binarization
# =============================================================================


def test_binarize_ties_go_foreground():
    logits = torch.zeros(2, 2, 2)
    assert torch.all(binarize_logits(logits) == 1.0)


def test_binarize_channel_comparison():
    logits = torch.tensor([[[1.0, 3.0]], [[2.0, 1.0]]])  # [2, 1, 2]
    assert binarize_logits(logits).tolist() == [[1.0, 0.0]]


def test_binarize_cuts_gradient():
    logits = torch.randn(2, 3, 3, requires_grad=True)
    mask = binarize_logits(logits)
    assert not mask.requires_grad


def test_binarize_shape_validation():
    with pytest.raises(ValueError):
        binarize_logits(torch.zeros(3, 2, 2))
    with pytest.raises(ValueError):
        binarize_logits(torch.zeros(2, 2))


# =============================================================================
# Token prediction and upsampling
# =============================================================================


def test_conv_block_predict_hand_case():
    """1x1-kernel block with hand-set weights on a known grid."""
    block = ConvBlock(1, 1, 2, kernel_size=1)
    with torch.no_grad():
        block.conv1.weight.fill_(1.0)
        block.conv1.bias.zero_()
        block.conv2.weight[0].fill_(2.0)
        block.conv2.weight[1].fill_(-1.0)
        block.conv2.bias.zero_()
    x = torch.tensor([[1.0], [2.0], [3.0], [4.0]]).unsqueeze(1)  # [4, 1, 1] on a 2x2 grid
    logits = conv_block_predict(x, block, (2, 2))
    assert logits.shape == (2, 2, 2)
    assert torch.equal(logits[0], torch.tensor([[2.0, 4.0], [6.0, 8.0]]))  # relu(2x)
    assert torch.all(logits[1] == 0.0)  # relu(-x) with positive x


def test_conv_block_predict_shape_validation():
    block = ConvBlock(4, 4, 2)
    with pytest.raises(ValueError):
        conv_block_predict(torch.zeros(5, 1, 4), block, (2, 2))
    with pytest.raises(ValueError):
        conv_block_predict(torch.zeros(4, 2, 4), block, (2, 2))


def test_upsample_token_identity_same_grid():
    token = torch.randn(6, 1, 4)
    assert torch.equal(upsample_token(token, (2, 3), (2, 3)), token)


def test_upsample_token_constant_field_stays_constant():
    token = torch.full((4, 1, 3), 2.5)
    up = upsample_token(token, (2, 2), (5, 5))
    assert up.shape == (25, 1, 3)
    assert torch.allclose(up, torch.full((25, 1, 3), 2.5), atol=1e-6)


def test_upsample_token_ramp_matches_closed_form():
    """align_corners bilinear of a plane reproduces the plane exactly.

    The 2x2 ramp [[0, 1], [2, 3]] upsampled to 4x4 must equal
    f(i, j) = 2*(i/3) + (j/3) at every output cell.
    """
    ramp = torch.tensor([0.0, 1.0, 2.0, 3.0]).reshape(4, 1, 1)
    up = upsample_token(ramp, (2, 2), (4, 4))[:, 0, 0].reshape(4, 4)
    for i in range(4):
        for j in range(4):
            assert up[i, j].item() == pytest.approx(2 * i / 3 + j / 3, abs=1e-6)


def test_upsample_token_matches_numpy_oracle():
    rng = np.random.default_rng(0)
    field = rng.standard_normal((5, 3, 4)).astype(np.float32)  # [D, h, w]
    token = torch.from_numpy(field).permute(1, 2, 0).reshape(12, 1, 5)
    up = upsample_token(token, (3, 4), (7, 9))
    got = up[:, 0, :].reshape(7, 9, 5).permute(2, 0, 1).numpy()
    want = bilinear_upsample_oracle(field.astype(np.float64), 7, 9)
    assert np.abs(got - want).max() < 1e-5


def test_upsample_token_rejects_downscale():
    with pytest.raises(ValueError):
        upsample_token(torch.zeros(9, 1, 2), (3, 3), (2, 2))


# =============================================================================
# Dual-branch token recursion
# =============================================================================


def _random_block_inputs(block, n_blocks, seed=1):
    rng = np.random.default_rng(seed)
    n_q = block.query_grid[0] * block.query_grid[1]
    n_s = block.support_grid[0] * block.support_grid[1]
    x_qs = torch.from_numpy(rng.random((n_q, n_s, n_blocks)).astype(np.float32))
    x_qq = torch.from_numpy(rng.random((n_q, n_s, n_blocks)).astype(np.float32))
    mask = torch.from_numpy((rng.random(block.support_grid) < 0.5).astype(np.float32))
    mask[0, 0] = 1.0
    token = torch.from_numpy(rng.standard_normal((n_q, 1, 4)).astype(np.float32))
    return x_qs, x_qq, mask, token


def test_token_update_decomposes_into_branches():
    """token_out - token_in equals the cross plus self branch outputs."""
    block = make_block()
    x_qs, x_qq, mask, token = _random_block_inputs(block, 2)
    token_out, logits = block(x_qs, x_qq, mask, token)

    x_bar_qs = block.cross_branch(x_qs, mask, token)
    pseudo = downsample_mask(binarize_logits(logits.detach()), block.support_grid)
    x_bar_qq = block.self_branch_forward(x_qq, pseudo, token)
    assert torch.allclose(token_out, token + x_bar_qs + x_bar_qq, atol=1e-6)


def test_single_branch_token_update():
    """Without the self branch the update is token + cross output, exactly."""
    block = make_block(self_branch=False)
    x_qs, _, mask, token = _random_block_inputs(block, 2)
    token_out, _ = block(x_qs, None, mask, token)
    x_bar_qs = block.cross_branch(x_qs, mask, token)
    assert torch.equal(token_out, token + x_bar_qs)


def test_single_branch_has_no_self_stacks():
    block = make_block(self_branch=False)
    assert not hasattr(block, "stack_qq_1")
    assert not hasattr(block, "stack_qq_2")
    with pytest.raises(ValueError):
        bi = make_block(self_branch=True)
        x_qs, _, mask, token = _random_block_inputs(bi, 2)
        bi(x_qs, None, mask, token)  # self branch enabled but no self correlation


def test_pseudo_mask_follows_block_prediction():
    """The self branch is gated by the binarized detached block logits."""
    block = make_block()
    x_qs, x_qq, mask, token = _random_block_inputs(block, 2)
    _, logits = block(x_qs, x_qq, mask, token)
    pseudo = downsample_mask(binarize_logits(logits.detach()), block.support_grid)
    assert set(pseudo.unique().tolist()) <= {0.0, 1.0}
    assert pseudo.shape == torch.Size(block.support_grid)


def test_bi_transformer_false_strictly_fewer_params():
    bi = make_block(self_branch=True)
    uni = make_block(self_branch=False)
    n_bi = sum(p.numel() for p in bi.parameters())
    n_uni = sum(p.numel() for p in uni.parameters())
    assert n_uni < n_bi


def test_support_mask_shape_validated():
    block = make_block()
    x_qs, x_qq, _, token = _random_block_inputs(block, 2)
    with pytest.raises(ValueError):
        block(x_qs, x_qq, torch.ones(3, 3), token)


def test_self_branch_rejects_support_grid_larger_than_query():
    """The pseudo mask lives on the query grid; it cannot be upsampled."""
    with pytest.raises(ValueError):
        DualBranchBlock(2, 4, (2, 2), (4, 4), self_branch=True)
    DualBranchBlock(2, 4, (2, 2), (4, 4), self_branch=False)  # cross-only is fine


# =============================================================================
# Full segmenter
# =============================================================================


def _toy_grids():
    return {2: (8, 8), 3: (4, 4), 4: (2, 2)}


def test_segmenter_support_grids_pool_level_2():
    net = FewShotSegmenter({2: 2, 3: 2, 4: 2}, _toy_grids(), width=8)
    assert net.support_grids == {4: (2, 2), 3: (4, 4), 2: (4, 4)}


def test_segmenter_rejects_odd_level2_grid():
    with pytest.raises(ValueError):
        FewShotSegmenter({2: 2, 3: 2, 4: 2}, {2: (7, 7), 3: (4, 4), 4: (2, 2)}, width=8)


def test_segmenter_forward_shapes_and_finiteness(toy_model):
    torch.manual_seed(0)
    image = torch.randn(3, 64, 64)
    support = torch.randn(3, 64, 64)
    mask = (torch.rand(64, 64) > 0.4).float()
    logits = toy_model.forward_episode(image, support, mask)
    assert tuple(logits[4].shape) == (2, 2, 2)
    assert tuple(logits[3].shape) == (2, 4, 4)
    assert tuple(logits[2].shape) == (2, 8, 8)
    assert tuple(logits[1].shape) == (2, 16, 16)
    for lvl in (1, 2, 3, 4):
        assert torch.isfinite(logits[lvl]).all()


def test_segmenter_grid_mismatch_rejected(toy_model):
    image = torch.randn(3, 32, 32)  # grids 4/2/1, model built for 8/4/2
    mask = torch.ones(32, 32)
    with pytest.raises(ValueError):
        toy_model.forward_episode(image, image, mask)


def test_gradients_reach_every_trainable_parameter(toy_model):
    torch.manual_seed(1)
    net = toy_model.net
    net.train()
    net.zero_grad()
    image = torch.randn(3, 64, 64)
    support = torch.randn(3, 64, 64)
    mask = (torch.rand(64, 64) > 0.4).float()
    gt = (torch.rand(64, 64) > 0.5).float()
    logits = toy_model.forward_episode(image, support, mask)
    loss = total_loss(logits, gt)
    loss.backward()
    missing = [name for name, p in net.named_parameters() if p.grad is None]
    assert not missing, f"parameters with no gradient: {missing}"
    net.zero_grad()
    net.eval()


def test_backbone_gets_no_gradients(toy_model):
    assert all(not p.requires_grad for p in toy_model.backbone.parameters())


# =============================================================================
# Loss weighting
# =============================================================================


def test_equal_level_losses_total_is_exactly_that_loss():
    """Weights sum to one: 0.7 + 3 * 0.1."""
    for value in (1.0, 0.5, 2.0, 0.25):
        level = torch.tensor(value, dtype=torch.float64)
        total = combine_level_losses({1: level, 2: level, 3: level, 4: level})
        assert total.item() == value


def test_final_level_only_weighted_exactly_07():
    l1 = torch.tensor(1.25, dtype=torch.float64)
    zero = torch.tensor(0.0, dtype=torch.float64)
    total = combine_level_losses({1: l1, 2: zero, 3: zero, 4: zero})
    assert total.item() == (1.0 - 3.0 * 0.1) * 1.25


def test_combine_missing_level_rejected():
    l = torch.tensor(1.0)
    with pytest.raises(ValueError):
        combine_level_losses({1: l, 2: l, 3: l})


def test_uniform_logits_loss_is_ln2():
    """Identical channels at every level make each CE term ln 2, hence the total."""
    maps = {lvl: torch.zeros(2, size, size) for lvl, size in ((1, 8), (2, 4), (3, 2), (4, 1))}
    gt = (torch.rand(16, 16) > 0.5).float()
    loss = total_loss(maps, gt)
    assert loss.item() == pytest.approx(float(np.log(2.0)), abs=1e-6)


def test_total_loss_matches_manual_recomputation():
    torch.manual_seed(2)
    maps = {lvl: torch.randn(2, size, size) for lvl, size in ((1, 8), (2, 4), (3, 2), (4, 2))}
    gt = (torch.rand(16, 16) > 0.5).float()
    got = total_loss(maps, gt, alpha=0.1)

    import torch.nn.functional as F

    per_level = {}
    for lvl, logits in maps.items():
        up = F.interpolate(logits[None], size=(16, 16), mode="bilinear", align_corners=True)[0]
        log_probs = torch.log_softmax(up, dim=0)
        picked = torch.where(gt.bool(), log_probs[1], log_probs[0])
        per_level[lvl] = -picked.mean()
    want = 0.7 * per_level[1] + 0.1 * (per_level[2] + per_level[3] + per_level[4])
    assert got.item() == pytest.approx(want.item(), abs=1e-6)


def test_total_loss_validation():
    maps = {lvl: torch.zeros(2, 2, 2) for lvl in (1, 2, 3)}
    with pytest.raises(ValueError):
        total_loss(maps, torch.zeros(4, 4))
    maps[4] = torch.zeros(2, 2, 2)
    with pytest.raises(ValueError):
        total_loss(maps, torch.zeros(4, 4, 1))
