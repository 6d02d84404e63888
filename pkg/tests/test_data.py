from __future__ import annotations

import gzip
import struct

import numpy as np
import pytest

from metapac.data import (
    MetaDataset,
    SyntheticEnvSpec,
    TaskData,
    gen_synthetic,
    load_dataset,
    make_permuted_tasks,
    pixel_swap_permutation,
    read_idx,
    save_dataset,
    write_idx,
)
from metapac.errors import DomainError, FormatError
from metapac.losses import LOSSES, loss_grad, loss_value


def idx_bytes(magic, dims, payload):
    return struct.pack(f">i{len(dims)}i", magic, *dims) + bytes(payload)


@pytest.fixture
def image_fixture(tmp_path):
    path = tmp_path / "img.idx"
    path.write_bytes(idx_bytes(2051, (1, 2, 2), [0, 255, 128, 64]))
    return path


@pytest.fixture
def small_images():
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(60, 4, 4)).astype(np.uint8)
    labels = rng.integers(0, 10, size=60)
    return images / 255.0, labels


class TestLosses:
    @pytest.mark.parametrize("name", LOSSES)
    def test_range(self, name):
        r = np.random.default_rng(1).normal(scale=5, size=(10_000, 3))
        v = loss_value(name, r)
        assert np.all((v >= 0) & (v <= 1))

    @pytest.mark.parametrize("name", LOSSES)
    def test_grad_fd(self, name):
        r = np.array([[0.3, -0.2], [0.1, 0.4]])
        g = loss_grad(name, r)
        h = 1e-6
        for i in range(2):
            for j in range(2):
                e = np.zeros_like(r)
                e[i, j] = h
                fd = (loss_value(name, r + e)[i] - loss_value(name, r - e)[i]) / (2 * h)
                np.testing.assert_allclose(g[i, j], fd, rtol=1e-7)

    def test_clipped_subgradient(self):
        assert np.all(loss_grad("clipped-square", np.array([[2.0]])) == 0.0)

    def test_unknown(self):
        with pytest.raises(DomainError):
            loss_value("hinge", np.zeros((1, 1)))


class TestSynthetic:
    def test_deterministic(self):
        spec = SyntheticEnvSpec(seed=3, n=3, n_test_tasks=2)
        a, _ = gen_synthetic(spec)
        b, _ = gen_synthetic(spec)
        assert a.equals(b)
        for ta, tb in zip(a.tasks, b.tasks):
            assert ta.x_train.tobytes() == tb.x_train.tobytes()

    def test_shapes(self):
        data, _ = gen_synthetic(SyntheticEnvSpec(dim=3, m=7, n=4, n_test_tasks=5, m_test=11))
        assert (data.n, data.m, data.dim, data.n_outputs) == (4, 7, 3, 1)
        assert len(data.test_tasks) == 5 and data.test_tasks[0].x_test.shape == (11, 3)

    @pytest.mark.parametrize("loss", LOSSES)
    def test_noiseless_perfect_fit(self, loss):
        spec = SyntheticEnvSpec(dim=3, task_spread=0.0, obs_noise=0.0, n=3)
        data, oracle = gen_synthetic(spec)
        u = spec.mean_vector
        for t in data.tasks:
            np.testing.assert_array_equal(t.meta["w_star"], u)
            np.testing.assert_array_equal(t.y_train[:, 0], t.x_train @ u)
        w = np.append(u, 0.0)
        assert oracle.population_loss(w, u, loss) == 0.0

    def test_label_noise_variance(self):
        spec = SyntheticEnvSpec(dim=2, obs_noise=0.04, m=4000, n=5, n_test_tasks=0, seed=11)
        data, _ = gen_synthetic(spec)
        for t in data.tasks:
            resid = t.y_train[:, 0] - t.x_train @ t.meta["w_star"]
            # sd of the sample variance of a Gaussian is s^2 sqrt(2/(m-1))
            sd = spec.obs_noise * np.sqrt(2 / (spec.m - 1))
            assert abs(resid.var() - spec.obs_noise) <= 3 * sd

    @pytest.mark.parametrize("loss", LOSSES)
    def test_oracle_matches_mc(self, loss):
        spec = SyntheticEnvSpec(dim=3, obs_noise=0.09, task_spread=0.25)
        _, oracle = gen_synthetic(spec)
        rng = np.random.default_rng(5)
        samples = 1_000_000
        for _ in range(20):
            w_star = oracle.sample_task_params(rng, 1)[0]
            w = np.append(w_star + rng.normal(scale=0.5, size=3), rng.normal(scale=0.5))
            x = rng.standard_normal((samples, 3))
            y = x @ w_star + 0.3 * rng.standard_normal(samples)
            vals = loss_value(loss, (x @ w[:-1] + w[-1] - y)[:, None])
            mc, sd = vals.mean(), vals.std() / np.sqrt(samples)
            closed = oracle.population_loss(w, w_star, loss)
            assert abs(closed - mc) <= 5 * sd + 1e-15

    def test_oracle_batched(self):
        _, oracle = gen_synthetic(SyntheticEnvSpec(dim=2))
        ws = np.random.default_rng(0).normal(size=(4, 5, 3, 1))
        out = oracle.population_loss(ws, np.zeros(2))
        assert out.shape == (4, 5)

    def test_clipped_degenerate(self):
        _, oracle = gen_synthetic(SyntheticEnvSpec(dim=1, obs_noise=0.0))
        assert oracle.population_loss([0.0, 0.5], [0.0], "clipped-square") == 0.25
        assert oracle.population_loss([0.0, 3.0], [0.0], "clipped-square") == 1.0

    def test_spec_validation(self):
        with pytest.raises(DomainError):
            SyntheticEnvSpec(task_spread=-1.0)
        with pytest.raises(DomainError):
            SyntheticEnvSpec(dim=2, env_mean=(1.0,))


class TestContainers:
    def test_unequal_m_rejected(self):
        a = TaskData(np.zeros((3, 2)), np.zeros(3), np.zeros((0, 2)), np.zeros(0))
        b = TaskData(np.zeros((4, 2)), np.zeros(4), np.zeros((0, 2)), np.zeros(0))
        with pytest.raises(DomainError):
            MetaDataset([a, b])

    def test_empty_rejected(self):
        with pytest.raises(DomainError):
            MetaDataset([])


class TestIdx:
    def test_fixture(self, image_fixture):
        arr, header = read_idx(image_fixture)
        assert header.magic == 2051 and header.dims == (1, 2, 2)
        np.testing.assert_array_equal(arr.ravel(), [0.0, 1.0, 128 / 255, 64 / 255])

    def test_labels(self, tmp_path):
        path = tmp_path / "lab.idx"
        path.write_bytes(idx_bytes(2049, (3,), [7, 0, 9]))
        arr, header = read_idx(path)
        np.testing.assert_array_equal(arr, [7, 0, 9])
        assert header.dims == (3,)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.idx"
        path.write_bytes(idx_bytes(9999, (1,), [0]))
        with pytest.raises(FormatError) as err:
            read_idx(path)
        assert err.value.offset == 0

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.idx"
        path.write_bytes(idx_bytes(2051, (1, 2, 2), [0, 255, 128]))
        with pytest.raises(FormatError) as err:
            read_idx(path)
        assert err.value.offset == 16 + 3

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "hdr.idx"
        path.write_bytes(struct.pack(">ii", 2051, 1))
        with pytest.raises(FormatError) as err:
            read_idx(path)
        assert err.value.offset == 8

    def test_gzip_round_trip(self, tmp_path):
        images = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
        path = tmp_path / "img.idx.gz"
        write_idx(path, images)
        assert path.read_bytes()[:2] == b"\x1f\x8b"
        arr, _ = read_idx(path)
        np.testing.assert_array_equal(np.rint(arr * 255).astype(np.uint8), images)
        assert gzip.decompress(path.read_bytes())[:4] == b"\x00\x00\x08\x03"


class TestPermutedTasks:
    def test_zero_swaps_identity(self, small_images):
        images, labels = small_images
        data = make_permuted_tasks(images, labels, n=2, m=10, swaps=0)
        for t in data.tasks:
            np.testing.assert_array_equal(t.meta["permutation"], np.arange(16))
            np.testing.assert_array_equal(t.x_train, images.reshape(60, -1)[t.meta["indices"]])

    def test_deterministic(self, small_images):
        a = make_permuted_tasks(*small_images, n=2, m=10, seed=4)
        b = make_permuted_tasks(*small_images, n=2, m=10, seed=4)
        assert a.equals(b)

    @pytest.mark.parametrize("kind", ["pixel-swaps", "label-permute"])
    def test_bijection_and_disjoint(self, small_images, kind):
        data = make_permuted_tasks(*small_images, kind=kind, n=3, m=10, m_test=5, seed=1)
        seen = []
        for t in data.tasks:
            perm = t.meta["permutation"]
            np.testing.assert_array_equal(np.sort(perm), np.arange(perm.size))
            seen.extend(t.meta["indices"])
            np.testing.assert_array_equal(t.y_train.sum(axis=1), 1.0)
        assert len(set(seen)) == len(seen)

    def test_label_permute_consistent(self, small_images):
        images, labels = small_images
        data = make_permuted_tasks(images, labels, kind="label-permute", n=1, m=20, seed=2)
        t = data.tasks[0]
        np.testing.assert_array_equal(t.y_train.argmax(axis=1), t.meta["permutation"][labels[t.meta["indices"]]])

    def test_swaps_not_involutive(self):
        rng = np.random.default_rng(8)
        probe = np.arange(784)
        perm = pixel_swap_permutation(rng, 784, 100)
        once = probe[perm]
        twice = once[perm]
        assert not np.array_equal(once, twice)
        assert not np.array_equal(twice, probe)

    def test_not_enough_images(self, small_images):
        with pytest.raises(DomainError):
            make_permuted_tasks(*small_images, n=7, m=10)

    def test_losses_in_range(self, small_images):
        data = make_permuted_tasks(*small_images, n=2, m=10)
        w = np.random.default_rng(0).normal(size=(16, 10))
        for loss in LOSSES:
            v = loss_value(loss, data.tasks[0].x_train @ w - data.tasks[0].y_train)
            assert np.all((v >= 0) & (v <= 1))


class TestSaveLoad:
    def test_round_trip(self, tmp_path):
        data, _ = gen_synthetic(SyntheticEnvSpec(seed=2**63 + 5, n=3, n_test_tasks=2))
        path = tmp_path / "d.mpds"
        save_dataset(data, path)
        back = load_dataset(path)
        assert back.equals(data)
        assert back.provenance["seed"] == 2**63 + 5

    def test_round_trip_permuted(self, tmp_path, small_images):
        data = make_permuted_tasks(*small_images, n=2, m=10, m_test=3)
        path = tmp_path / "p.mpds"
        save_dataset(data, path)
        assert load_dataset(path).equals(data)

    def test_bytes_deterministic(self, tmp_path):
        data, _ = gen_synthetic(SyntheticEnvSpec(n=2))
        save_dataset(data, tmp_path / "a")
        save_dataset(data, tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "v2"
        path.write_bytes(b"METAPAC-DATASET v2\n" + struct.pack(">Q", 2) + b"{}")
        with pytest.raises(FormatError, match="version 2"):
            load_dataset(path)

    def test_foreign_file(self, image_fixture):
        with pytest.raises(FormatError, match="header"):
            load_dataset(image_fixture)

    def test_truncated(self, tmp_path):
        data, _ = gen_synthetic(SyntheticEnvSpec(n=2))
        path = tmp_path / "t"
        save_dataset(data, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-10])
        with pytest.raises(FormatError, match="truncated"):
            load_dataset(path)
