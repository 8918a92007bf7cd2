import numpy as np
import pytest
import torch

from selfkp import model as M
from selfkp.model import BACKBONE, TINY_BACKBONE, KeypointNet

# conv weights + biases, worked out layer by layer
EXPECTED_PARAMS = (
    (1 * 64 * 9 + 64) + (64 * 64 * 9 + 64) + 2 * (64 * 64 * 9 + 64)
    + (64 * 128 * 9 + 128) + 3 * (128 * 128 * 9 + 128)
    + (128 * 256 * 9 + 256) + (256 * 64 + 64)
    + (128 * 256 * 9 + 256) + (256 * 256 + 256)
)


@pytest.fixture(scope="module")
def net():
    torch.manual_seed(0)
    return KeypointNet().eval()


def test_parameter_count(net):
    assert EXPECTED_PARAMS == 1_300_608
    assert M.count_parameters(net) == EXPECTED_PARAMS


def test_leaky_slope_everywhere(net):
    slopes = {m.negative_slope for m in net.modules() if isinstance(m, torch.nn.LeakyReLU)}
    assert slopes == {0.01}
    assert sum(isinstance(m, torch.nn.LeakyReLU) for m in net.modules()) == 10
    assert not any(isinstance(m, torch.nn.BatchNorm2d) for m in net.modules())


def test_output_shapes(net):
    with torch.no_grad():
        logits, field = net(torch.zeros(1, 1, 64, 64))
        assert logits.shape == (1, 64, 8, 8) and field.shape == (1, 256, 8, 8)
        logits, field = net(torch.zeros(1, 1, 64, 128))
        assert logits.shape == (1, 64, 8, 16) and field.shape == (1, 256, 8, 16)


def test_indivisible_input_rejected(net):
    with pytest.raises(ValueError, match="divisible"):
        net(torch.zeros(1, 1, 60, 64))


def test_backbone_needs_three_pools():
    with pytest.raises(ValueError):
        KeypointNet(backbone=(4, "M", 4))


def test_heatmap_block_sums(rng):
    logits = torch.tensor(rng.normal(0, 3, (2, 64, 5, 7)))
    hm = M.heatmap_from_logits(logits)
    assert hm.shape == (2, 40, 56)
    sums = hm.reshape(2, 5, 8, 7, 8).sum(dim=(2, 4))
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-12)


def test_channel_to_pixel_layout():
    # channel c lights up pixel (c // 8, c % 8) of its cell
    for c in (0, 7, 8, 27, 63):
        logits = torch.full((64, 2, 3), -50.0)
        logits[c, 1, 2] = 50.0
        hm = M.heatmap_from_logits(logits)
        y, x = divmod(int(hm[8:16, 16:24].argmax()), 8)
        assert (y, x) == (c // 8, c % 8)


def test_uniform_logits_give_uniform_heatmap():
    hm = M.heatmap_from_logits(torch.zeros(64, 3, 3, dtype=torch.float64))
    assert torch.allclose(hm, torch.full_like(hm, 1 / 64))


def test_heatmap_rejects_wrong_channels():
    with pytest.raises(ValueError):
        M.heatmap_from_logits(torch.zeros(65, 2, 2))


class TestDescriptors:
    def test_unit_norm(self, rng):
        field = torch.tensor(rng.normal(size=(16, 6, 6)))
        pts = rng.uniform(0, 47, (30, 2))
        d = M.interpolate_descriptors(field, pts)
        assert torch.allclose(d.norm(dim=1), torch.ones(30, dtype=d.dtype), atol=1e-12)

    def test_cell_centre_hits_grid_value(self, rng):
        field = torch.tensor(rng.normal(size=(8, 4, 5)))
        # centre of cell (row 2, col 3) sits at pixel (3 * 8 + 3.5, 2 * 8 + 3.5)
        d = M.interpolate_descriptors(field, [[27.5, 19.5]])
        ref = field[:, 2, 3] / field[:, 2, 3].norm()
        assert torch.allclose(d[0], ref, atol=1e-12)

    def test_empty(self):
        assert M.interpolate_descriptors(torch.zeros(8, 2, 2), np.zeros((0, 2))).shape == (0, 8)

    def test_border_clamped(self, rng):
        field = torch.tensor(rng.normal(size=(8, 4, 4)))
        a = M.interpolate_descriptors(field, [[0.0, 0.0]])
        b = M.interpolate_descriptors(field, [[3.5, 3.5]])
        assert torch.allclose(a, b)


def test_center_crop_to_cell(rng):
    img = rng.random((37, 50))
    crop, (x0, y0) = M.center_crop_to_cell(img)
    assert crop.shape == (32, 48) and (x0, y0) == (1, 2)
    assert np.array_equal(crop, img[2:34, 1:49])


def test_extract_features_offsets_into_original_frame(rng):
    torch.manual_seed(1)
    net = KeypointNet(backbone=TINY_BACKBONE, head_width=8, descriptor_dim=16)
    img = rng.random((37, 50))
    pts, scores, desc = M.extract_features(net, img, threshold=0.0, nms_radius=0)
    assert len(pts) == 32 * 48
    assert pts[:, 0].min() == 1 and pts[:, 1].min() == 2
    assert desc.shape == (len(pts), 16)


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path, net, rng):
        M.save_checkpoint(tmp_path / "m.pt", net, step=12, epoch=3)
        loaded, payload = M.load_checkpoint(tmp_path / "m.pt")
        assert payload["step"] == 12 and payload["epoch"] == 3
        assert payload["channel_order"] == M.CHANNEL_ORDER
        x = torch.tensor(rng.random((1, 1, 32, 32)), dtype=torch.float32)
        with torch.no_grad():
            a, b = net(x), loaded.eval()(x)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])

    def test_unknown_channel_order_rejected(self, tmp_path, net):
        M.save_checkpoint(tmp_path / "m.pt", net)
        payload = torch.load(tmp_path / "m.pt", weights_only=True)
        payload["channel_order"] = "column-major"
        torch.save(payload, tmp_path / "bad.pt")
        with pytest.raises(ValueError, match="channel order"):
            M.load_checkpoint(tmp_path / "bad.pt")

    def test_future_version_rejected(self, tmp_path, net):
        M.save_checkpoint(tmp_path / "m.pt", net)
        payload = torch.load(tmp_path / "m.pt", weights_only=True)
        payload["format_version"] = M.CHECKPOINT_VERSION + 1
        torch.save(payload, tmp_path / "bad.pt")
        with pytest.raises(ValueError, match="version"):
            M.load_checkpoint(tmp_path / "bad.pt")

    def test_tiny_architecture_restored(self, tmp_path):
        net = KeypointNet(backbone=TINY_BACKBONE, head_width=8, descriptor_dim=16)
        M.save_checkpoint(tmp_path / "t.pt", net)
        loaded, _ = M.load_checkpoint(tmp_path / "t.pt")
        assert loaded.arch == net.arch
        assert M.count_parameters(loaded) == M.count_parameters(net)


def test_default_backbone_layout():
    convs = [v for v in BACKBONE if v != "M"]
    assert convs == [64, 64, 64, 64, 128, 128, 128, 128]
