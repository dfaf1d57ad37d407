#!/usr/bin/env python

"""Tests for affectlib/fusionnet.py."""
import os
import shutil
import sys
import tempfile
import unittest

try:
    from unittest import mock
except ImportError:
    import mock

import numpy as np
import torch

# This makes it so we can find affectlib when running from repo-root.
sys.path.insert(0, '.')
import affectlib
import affectlib.base
import affectlib.facegraph as facegraph
import affectlib.fusionnet as fusionnet
import affectlib.trainer as trainer


def _layer_norm(x, eps=1e-5):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _dense_gcn(x, edges, weight, bias):
    n = x.shape[0]
    a = np.eye(n)
    for (i, j) in edges:
        a[i, j] = a[j, i] = 1.0
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return (d[:, None] * a * d[None, :]).dot(x).dot(weight.T) + bias


def _random_graph(rng, n):
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.rand() < 0.4:
                edges.append((i, j))
    return edges


def _model(**overrides):
    config = affectlib.PipelineConfig({'model': overrides} if overrides
                                      else None)
    return fusionnet.build_model(config)


def _inputs(batch, size=64, seed=0):
    g = torch.Generator().manual_seed(seed)
    images = torch.randn(batch, 3, size, size, generator=g)
    coords = torch.rand(batch, facegraph.NUM_LANDMARKS, 3, generator=g) * 2 - 1
    return (images, coords)


class AttentionTest(unittest.TestCase):
    def setUp(self):
        torch.manual_seed(0)

    def test_zero_second_layer_halves_input(self):
        block = fusionnet.AttentionBlock(16, 4)
        with torch.no_grad():
            block.fc2.weight.zero_()
        f = torch.randn(3, 16)
        torch.testing.assert_close(0.5 * f, block.reweight(f))

    def test_zero_input(self):
        block = fusionnet.AttentionBlock(16, 4)
        f = torch.zeros(2, 16)
        torch.testing.assert_close(torch.zeros(2, 16), block.reweight(f))
        torch.testing.assert_close(torch.zeros(2, 16), block(f))

    def test_weights_in_unit_interval(self):
        block = fusionnet.AttentionBlock(32, 8)
        w = block.weights(torch.randn(5, 32) * 10)
        self.assertTrue(bool(((w >= 0) & (w <= 1)).all()))

    def test_matches_dense_oracle(self):
        rng = np.random.RandomState(1)
        block = fusionnet.AttentionBlock(12, 3).double()
        w1 = rng.normal(scale=0.3, size=(3, 12))
        w2 = rng.normal(scale=0.3, size=(12, 3))
        with torch.no_grad():
            block.fc1.weight.copy_(torch.from_numpy(w1))
            block.fc2.weight.copy_(torch.from_numpy(w2))
        f = rng.normal(size=(4, 12))
        gate = _sigmoid(np.maximum(f.dot(w1.T), 0).dot(w2.T))
        expected = _layer_norm(gate * f)
        actual = block(torch.from_numpy(f)).detach().numpy()
        np.testing.assert_allclose(expected, actual, atol=1e-6)

    def test_no_bias(self):
        block = fusionnet.AttentionBlock(8, 2)
        self.assertIsNone(block.fc1.bias)
        self.assertIsNone(block.fc2.bias)

    def test_wrong_width(self):
        block = fusionnet.AttentionBlock(8, 2)
        with self.assertRaises(affectlib.base.ShapeError):
            block(torch.zeros(1, 9))


class GraphConvTest(unittest.TestCase):
    def test_two_node_toy(self):
        stack = fusionnet.GraphConvStack((2, 2))
        (conv,) = stack.layers
        with torch.no_grad():
            conv.lin.weight.copy_(torch.eye(2))
            conv.bias.zero_()
        out = stack(torch.eye(2), fusionnet.graph_edge_index([(0, 1)]))
        torch.testing.assert_close(torch.full((2, 2), 0.5), out)

    def test_matches_dense_oracle(self):
        rng = np.random.RandomState(2)
        torch.manual_seed(2)
        for _ in range(50):
            n = rng.randint(1, 7)
            edges = _random_graph(rng, n)
            stack = fusionnet.GraphConvStack((3, 5, 4, 4)).double()
            x = rng.normal(size=(n, 3))
            expected = x
            for (k, conv) in enumerate(stack.layers):
                expected = _dense_gcn(expected, edges,
                                      conv.lin.weight.detach().numpy(),
                                      conv.bias.detach().numpy())
                if k < len(stack.layers) - 1:
                    expected = np.maximum(expected, 0)
            actual = stack(torch.from_numpy(x),
                           fusionnet.graph_edge_index(edges))
            np.testing.assert_allclose(expected, actual.detach().numpy(),
                                       atol=1e-6)

    def test_permutation_equivariant(self):
        rng = np.random.RandomState(3)
        torch.manual_seed(3)
        stack = fusionnet.GraphConvStack((3, 8, 6)).double()
        n = 6
        edges = _random_graph(rng, n)
        x = rng.normal(size=(n, 3))
        perm = rng.permutation(n)
        # Node i of the permuted graph is node perm[i] of the original.
        inverse = np.argsort(perm)
        permuted_edges = [(int(inverse[i]), int(inverse[j]))
                          for (i, j) in edges]
        out = stack(torch.from_numpy(x),
                    fusionnet.graph_edge_index(edges)).detach().numpy()
        permuted = stack(torch.from_numpy(x[perm]),
                         fusionnet.graph_edge_index(permuted_edges))
        np.testing.assert_allclose(out[perm], permuted.detach().numpy(),
                                   atol=1e-9)

    def test_batched_matches_single(self):
        torch.manual_seed(4)
        stack = fusionnet.GraphConvStack()
        edge_index = fusionnet.graph_edge_index(facegraph.build_topology())
        x = torch.randn(3, facegraph.NUM_LANDMARKS, 3)
        batched = stack(x, edge_index)
        self.assertEqual((3, facegraph.NUM_LANDMARKS, fusionnet.GCN_WIDTH),
                         tuple(batched.shape))
        for b in range(3):
            torch.testing.assert_close(batched[b], stack(x[b], edge_index))

    def test_gcn_forward_on_face_graph(self):
        torch.manual_seed(5)
        raw = np.random.RandomState(5).normal(size=(468, 3))
        graph = facegraph.face_graph(facegraph.normalize_landmarks(raw))
        out = fusionnet.gcn_forward(graph, fusionnet.GraphConvStack())
        self.assertEqual((468, 128), tuple(out.shape))

    def test_pool_is_column_mean(self):
        torch.manual_seed(6)
        attn = fusionnet.AttentionBlock(5, 2).double()
        with torch.no_grad():
            attn.fc2.weight.zero_()
        x = np.random.RandomState(6).normal(size=(9, 5))
        out = fusionnet.gcn_pool_attend(torch.from_numpy(x), attn)
        np.testing.assert_allclose(_layer_norm(0.5 * x.mean(axis=0)),
                                   out.detach().numpy(), atol=1e-9)


class HeadTest(unittest.TestCase):
    def test_parameter_count(self):
        self.assertEqual(1249287, fusionnet.head_parameter_count())
        head = fusionnet.ClassifierHead()
        self.assertEqual(1249287, sum(p.numel() for p in head.parameters()))

    def test_dropout_rates(self):
        head = fusionnet.ClassifierHead()
        rates = [m.p for m in head.modules()
                 if isinstance(m, torch.nn.Dropout)]
        self.assertEqual([0.325, 0.275], rates)


class FusionNetTest(unittest.TestCase):
    def setUp(self):
        torch.manual_seed(0)
        self.model = _model()

    def test_output_shape(self):
        (images, coords) = _inputs(2)
        logits = self.model.eval()(images, coords)
        self.assertEqual((2, 7), tuple(logits.shape))
        self.assertEqual(0, self.model.last_fallbacks)

    def test_feature_widths(self):
        (images, coords) = _inputs(2)
        feats = self.model.eval().features(images, coords)
        self.assertEqual((2, 2048), tuple(feats.f_cnn_attn.shape))
        self.assertEqual((2, 128), tuple(feats.f_gcn.shape))
        self.assertEqual((2, 2176), tuple(feats.f_fused.shape))

    def test_zero_head_gives_uniform(self):
        last = self.model.head.layers[-1]
        with torch.no_grad():
            last.weight.zero_()
            last.bias.zero_()
        (images, coords) = _inputs(3)
        probs = fusionnet.predict(self.model.eval(), images, coords)
        torch.testing.assert_close(torch.full((3, 7), 1 / 7.0), probs)

    def test_predict_is_softmax_of_logits(self):
        (images, coords) = _inputs(4)
        self.model.eval()
        with torch.no_grad():
            logits = self.model(images, coords)
        probs = fusionnet.predict(self.model, images, coords)
        expected = torch.exp(logits) / torch.exp(logits).sum(dim=1,
                                                             keepdim=True)
        torch.testing.assert_close(expected, probs, atol=1e-7, rtol=0)
        torch.testing.assert_close(torch.ones(4), probs.sum(dim=1))

    def test_predict_needs_eval_mode(self):
        (images, coords) = _inputs(1)
        with self.assertRaises(affectlib.base.UsageError):
            fusionnet.predict(self.model.train(), images, coords)

    def test_poisoned_graph_falls_back(self):
        (images, coords) = _inputs(3)
        coords[1, 10, 0] = float('nan')
        self.model.eval()
        feats = self.model.features(images, coords)
        self.assertEqual(1, feats.fallbacks)
        torch.testing.assert_close(torch.zeros(128), feats.f_gcn[1])
        self.assertTrue(bool(feats.f_gcn[0].abs().sum() > 0))
        (logits, fallbacks) = fusionnet.fusion_forward(self.model, images,
                                                       coords)
        self.assertEqual(1, fallbacks)
        self.assertTrue(bool(torch.isfinite(logits).all()))

    def test_graph_branch_failure_falls_back(self):
        (images, coords) = _inputs(2)
        self.model.eval()
        with mock.patch.object(self.model.graph_branch, 'forward',
                               side_effect=RuntimeError('boom')):
            feats = self.model.features(images, coords)
        self.assertEqual(2, feats.fallbacks)
        torch.testing.assert_close(torch.zeros(2, 128), feats.f_gcn)

    def test_face_graph_inputs(self):
        rng = np.random.RandomState(7)
        graphs = [facegraph.face_graph(facegraph.normalize_landmarks(
            rng.normal(size=(468, 3)))) for _ in range(2)]
        (images, _) = _inputs(2)
        (logits, fallbacks) = fusionnet.fusion_forward(self.model.eval(),
                                                       images, graphs)
        self.assertEqual((2, 7), tuple(logits.shape))
        self.assertEqual(0, fallbacks)

    def test_batch_mismatch(self):
        (images, _) = _inputs(2)
        (_, coords) = _inputs(3)
        with self.assertRaises(affectlib.base.ShapeError):
            self.model(images, coords)

    def test_dropout_is_off_in_eval(self):
        (images, coords) = _inputs(2)
        self.model.eval()
        with torch.no_grad():
            torch.testing.assert_close(self.model(images, coords),
                                       self.model(images, coords))

    def test_dropout_follows_seed_in_training(self):
        (images, coords) = _inputs(2)
        self.model.train()
        with torch.no_grad():
            torch.manual_seed(42)
            a = self.model(images, coords)
            torch.manual_seed(42)
            b = self.model(images, coords)
            c = self.model(images, coords)
        torch.testing.assert_close(a, b)
        self.assertFalse(torch.allclose(a, c))

    def test_unknown_backbone(self):
        with self.assertRaises(affectlib.base.ConfigError):
            _model(backbone={'kind': 'vgg'})


class FreezingTest(unittest.TestCase):
    def test_first_44_tensors_never_move(self):
        torch.manual_seed(0)
        model = _model()
        params = list(model.backbone.parameters())
        self.assertEqual(48, len(params))
        self.assertEqual(44, sum(1 for p in params if not p.requires_grad))
        before = [p.detach().clone() for p in params]

        train_cfg = affectlib.PipelineConfig()['train']
        train_cfg.update(lr_backbone=1e-3, lr_head=1e-3)
        optimizer = trainer.make_optimizer(model, train_cfg)
        for step in range(10):
            (images, coords) = _inputs(2, seed=step)
            targets = trainer.smooth_targets(
                torch.eye(facegraph.NUM_CLASSES)[[step % 7, (step + 3) % 7]],
                train_cfg['smoothing'])
            trainer.train_step(model, (images, coords, targets), optimizer,
                               clip_norm=train_cfg['clip_norm'],
                               batch_index=step)
            for p in params[:44]:
                self.assertIsNone(p.grad)

        for (k, (old, new)) in enumerate(zip(before, params)):
            if k < 44:
                torch.testing.assert_close(old, new, atol=0, rtol=0)
            else:
                self.assertFalse(torch.equal(old, new),
                                 'backbone tensor %d did not train' % k)

    def test_backbone_parameters_are_trainable_only(self):
        model = _model()
        self.assertEqual(4, len(model.backbone_parameters()))

    def test_too_many_frozen(self):
        with self.assertRaises(affectlib.base.ConfigError):
            fusionnet.freeze_prefix(fusionnet.StubBackbone(), 49)

    def test_stub_backbone_width(self):
        out = fusionnet.StubBackbone()(torch.zeros(2, 3, 224, 224))
        self.assertEqual((2, 2048), tuple(out.shape))


class ImageTensorTest(unittest.TestCase):
    def test_normalizes(self):
        crops = np.zeros((2, 4, 4, 3), dtype=np.uint8)
        crops[:, :, :, 0] = 255
        x = fusionnet.image_tensor(crops, [0.5, 0.5, 0.5], [0.5, 0.25, 0.5])
        self.assertEqual((2, 3, 4, 4), tuple(x.shape))
        torch.testing.assert_close(torch.ones(2, 4, 4), x[:, 0])
        torch.testing.assert_close(torch.full((2, 4, 4), -2.0), x[:, 1])

    def test_single_crop(self):
        x = fusionnet.image_tensor(np.zeros((4, 4, 3), dtype=np.uint8),
                                   [0, 0, 0], [1, 1, 1])
        self.assertEqual((1, 3, 4, 4), tuple(x.shape))


class CheckpointTest(unittest.TestCase):
    def setUp(self):
        self.tmpdir = tempfile.mkdtemp()
        self.path = os.path.join(self.tmpdir, 'model.pt')
        torch.manual_seed(0)
        self.model = _model()
        fusionnet.save_checkpoint(self.path, self.model, 'cfg', 0)

    def tearDown(self):
        shutil.rmtree(self.tmpdir)

    def test_round_trip(self):
        torch.manual_seed(1)
        other = _model()
        payload = fusionnet.load_checkpoint(self.path, other)
        self.assertEqual(facegraph.topology_hash(),
                         payload['manifest']['topology_sha256'])
        for (a, b) in zip(self.model.state_dict().values(),
                          other.state_dict().values()):
            torch.testing.assert_close(a, b)

    def test_width_mismatch(self):
        other = _model(gcn={'hidden': 32})
        with self.assertRaises(affectlib.base.IntegrityError):
            fusionnet.load_checkpoint(self.path, other)

    def test_topology_mismatch(self):
        payload = torch.load(self.path, weights_only=False)
        payload['manifest']['topology_sha256'] = '0' * 64
        torch.save(payload, self.path)
        with self.assertRaises(affectlib.base.IntegrityError):
            fusionnet.load_checkpoint(self.path, _model())

    def test_missing_file(self):
        with self.assertRaises(affectlib.base.UsageError):
            fusionnet.load_checkpoint(os.path.join(self.tmpdir, 'nope.pt'),
                                      self.model)


if __name__ == '__main__':
    unittest.main()
