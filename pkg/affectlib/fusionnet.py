"""The fusion network: global image features plus a face-graph branch.

    image --backbone--> 2048 --attention--> f_cnn_attn (2048)
    landmarks --3 GCN layers--> 468 x 128 --mean--> attention, norm --> f_gcn (128)
    concat(f_cnn_attn, f_gcn) (2176) --head--> 7 logits

An attention block computes sigmoid(W2 relu(W1 f)) * f and layer-norms
the result.  The graph layers are torch_geometric GCNConv (symmetric
normalization with self-loops, with bias), widths 3 -> 64 -> 128 -> 128
with ReLU after the first two.

If a sample's graph has non-finite coordinates, or the graph branch
raises or returns non-finite values, that sample's f_gcn is replaced by
zeros.  This is a per-sample fallback, not an error; the number of
fallbacks is returned with the logits.

The backbone is a contract: B x 3 x 224 x 224 normalized images in,
B x 2048 out, with the first `frozen_prefix` parameter tensors (in
registration order) frozen.  StubBackbone is a small random network
that honors it; ResNetBackbone wraps torchvision's ResNet-50.
"""

from __future__ import absolute_import
import collections
import logging

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch_geometric.nn import GCNConv

from . import base
from . import facegraph


CNN_WIDTH = 2048
GCN_WIDTH = 128
FUSED_WIDTH = CNN_WIDTH + GCN_WIDTH
HEAD_WIDTHS = (512, 256, facegraph.NUM_CLASSES)
LAYER_NORM_EPS = 1e-5

FusionFeatures = collections.namedtuple(
    'FusionFeatures', ('f_cnn_attn', 'f_gcn', 'f_fused', 'fallbacks'))


class AttentionBlock(nn.Module):
    """Squeeze-style feature reweighting followed by layer norm."""
    def __init__(self, in_dim, bottleneck_dim):
        super(AttentionBlock, self).__init__()
        self.in_dim = in_dim
        self.fc1 = nn.Linear(in_dim, bottleneck_dim, bias=False)
        self.fc2 = nn.Linear(bottleneck_dim, in_dim, bias=False)
        self.norm = nn.LayerNorm(in_dim, eps=LAYER_NORM_EPS)

    def _check(self, f):
        if f.shape[-1] != self.in_dim:
            raise base.ShapeError('Attention block expects width %d, got %d'
                                  % (self.in_dim, f.shape[-1]))

    def weights(self, f):
        """The attention weights, each in (0, 1)."""
        self._check(f)
        return torch.sigmoid(self.fc2(F.relu(self.fc1(f))))

    def reweight(self, f):
        return self.weights(f) * f

    def forward(self, f):
        return self.norm(self.reweight(f))


def attention_refine(f, block):
    return block(f)


class GraphConvStack(nn.Module):
    """GCN layers of the given widths; ReLU after all but the last."""
    def __init__(self, widths=(3, 64, GCN_WIDTH, GCN_WIDTH)):
        super(GraphConvStack, self).__init__()
        self.widths = tuple(widths)
        self.layers = nn.ModuleList(
            GCNConv(w_in, w_out)
            for (w_in, w_out) in zip(self.widths[:-1], self.widths[1:]))

    def forward(self, x, edge_index):
        """x is N x F or B x N x F; the graph is shared by the batch."""
        for (i, layer) in enumerate(self.layers):
            x = layer(x, edge_index)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


def _node_features(graph):
    landmarks = graph.landmarks
    coords = getattr(landmarks, 'coords', landmarks)
    return torch.as_tensor(np.asarray(coords), dtype=torch.float32)


def graph_edge_index(edges):
    return torch.as_tensor(facegraph.edge_array(edges), dtype=torch.long)


def gcn_forward(graph, stack):
    """Node embeddings (N x out) for one FaceGraph."""
    x = _node_features(graph).to(next(stack.parameters()).dtype)
    return stack(x, graph_edge_index(graph.edges))


def gcn_pool_attend(node_feats, attn, norm=None):
    """Mean over nodes, attention refinement, then an optional layer norm."""
    pooled = node_feats.mean(dim=-2)
    refined = attention_refine(pooled, attn)
    if norm is not None:
        refined = norm(refined)
    return refined


class GraphBranch(nn.Module):
    def __init__(self, hidden=64, bottleneck=32):
        super(GraphBranch, self).__init__()
        self.stack = GraphConvStack((3, hidden, GCN_WIDTH, GCN_WIDTH))
        self.attn = AttentionBlock(GCN_WIDTH, bottleneck)
        self.norm = nn.LayerNorm(GCN_WIDTH, eps=LAYER_NORM_EPS)

    def forward(self, coords, edge_index):
        return gcn_pool_attend(self.stack(coords, edge_index),
                               self.attn, self.norm)


class StubBackbone(nn.Module):
    """A small random CNN that emits 2048 features.

    It registers 48 parameter tensors: the stem (2), 22 residual 1x1
    conv blocks (44), and the output projection (2).  So with the
    default frozen prefix of 44, only the last block and the
    projection train.
    """
    def __init__(self, channels=8, blocks=22, grid=7):
        super(StubBackbone, self).__init__()
        self.stem = nn.Conv2d(3, channels, kernel_size=4, stride=4)
        self.pool = nn.AdaptiveAvgPool2d(grid)
        self.blocks = nn.ModuleList(nn.Conv2d(channels, channels, 1)
                                    for _ in range(blocks))
        self.fc = nn.Linear(channels * grid * grid, CNN_WIDTH)

    def forward(self, images):
        x = self.pool(F.relu(self.stem(images)))
        for block in self.blocks:
            x = x + torch.tanh(block(x))
        return self.fc(torch.flatten(x, 1))


class ResNetBackbone(nn.Module):
    """torchvision ResNet-50 with its classifier removed."""
    def __init__(self, pretrained=True):
        super(ResNetBackbone, self).__init__()
        import torchvision
        weights = (torchvision.models.ResNet50_Weights.DEFAULT
                   if pretrained else None)
        self.net = torchvision.models.resnet50(weights=weights)
        self.net.fc = nn.Identity()

    def forward(self, images):
        return self.net(images)


def make_backbone(kind, pretrained=False):
    if kind == 'stub':
        return StubBackbone()
    if kind == 'resnet50':
        return ResNetBackbone(pretrained)
    raise base.ConfigError('Unknown model.backbone.kind %r '
                           '(want stub|resnet50)' % kind)


def freeze_prefix(module, count):
    """Freeze the first `count` parameter tensors in registration order."""
    params = list(module.parameters())
    if count > len(params):
        raise base.ConfigError('Cannot freeze %d of %d backbone tensors'
                               % (count, len(params)))
    for p in params[:count]:
        p.requires_grad_(False)
    return params[:count]


def head_parameter_count():
    widths = (FUSED_WIDTH,) + HEAD_WIDTHS
    affine = sum(w_in * w_out + w_out
                 for (w_in, w_out) in zip(widths[:-1], widths[1:]))
    return affine + 2 * sum(HEAD_WIDTHS[:-1])


class ClassifierHead(nn.Module):
    def __init__(self, dropout1=0.325, dropout2=0.275):
        super(ClassifierHead, self).__init__()
        (h1, h2, out) = HEAD_WIDTHS
        self.layers = nn.Sequential(
            nn.Linear(FUSED_WIDTH, h1),
            nn.LayerNorm(h1, eps=LAYER_NORM_EPS),
            nn.ReLU(),
            nn.Dropout(dropout1),
            nn.Linear(h1, h2),
            nn.LayerNorm(h2, eps=LAYER_NORM_EPS),
            nn.ReLU(),
            nn.Dropout(dropout2),
            nn.Linear(h2, out),
        )
        count = sum(p.numel() for p in self.parameters())
        if count != head_parameter_count():
            raise base.ShapeError('Classifier head has %d parameters, '
                                  'expected %d'
                                  % (count, head_parameter_count()))

    def forward(self, fused):
        return self.layers(fused)


class FusionNet(nn.Module):
    def __init__(self, model_config, edges=None):
        """Build the network from the `model` config section.

        Arguments:
            model_config: the `model` section of a PipelineConfig
                (or a dict of the same shape).
            edges: the graph edges; defaults to the bundled face
                topology.
        """
        super(FusionNet, self).__init__()
        self.model_config = model_config
        backbone = model_config['backbone']
        self.backbone = make_backbone(backbone['kind'],
                                      backbone['pretrained'])
        self.frozen = freeze_prefix(self.backbone, backbone['frozen_prefix'])
        self.cnn_attn = AttentionBlock(CNN_WIDTH,
                                       model_config['attn']['cnn_bottleneck'])
        self.graph_branch = GraphBranch(model_config['gcn']['hidden'],
                                        model_config['attn']['gcn_bottleneck'])
        self.head = ClassifierHead(model_config['head']['dropout1'],
                                   model_config['head']['dropout2'])
        if edges is None:
            edges = facegraph.build_topology()
        self.register_buffer('edge_index', graph_edge_index(edges))
        self.last_fallbacks = 0

    def widths(self):
        return {
            'backbone': self.model_config['backbone']['kind'],
            'frozen_prefix': self.model_config['backbone']['frozen_prefix'],
            'cnn': CNN_WIDTH,
            'cnn_bottleneck': self.cnn_attn.fc1.out_features,
            'gcn': list(self.graph_branch.stack.widths),
            'gcn_bottleneck': self.graph_branch.attn.fc1.out_features,
            'fused': FUSED_WIDTH,
            'head': list(HEAD_WIDTHS),
        }

    def backbone_parameters(self):
        return [p for p in self.backbone.parameters() if p.requires_grad]

    def head_parameters(self):
        """The attention blocks, graph branch and head."""
        return (list(self.cnn_attn.parameters()) +
                list(self.graph_branch.parameters()) +
                list(self.head.parameters()))

    def _graph_features(self, coords):
        batch = coords.shape[0]
        bad_input = ~torch.isfinite(coords).reshape(batch, -1).all(dim=1)
        safe = torch.where(bad_input[:, None, None],
                           torch.zeros_like(coords), coords)
        try:
            f_gcn = self.graph_branch(safe, self.edge_index)
        except (RuntimeError, ValueError) as why:
            logging.warning('affectlib: graph branch failed (%s); using '
                            'zero graph features for the batch' % why)
            f_gcn = torch.zeros(batch, GCN_WIDTH, dtype=coords.dtype,
                                device=coords.device)
            bad_input = torch.ones(batch, dtype=torch.bool,
                                   device=coords.device)
        fallback = bad_input | ~torch.isfinite(f_gcn).all(dim=1)
        f_gcn = torch.where(fallback[:, None], torch.zeros_like(f_gcn), f_gcn)
        return (f_gcn, int(fallback.sum()))

    def features(self, images, coords):
        if images.shape[0] != coords.shape[0]:
            raise base.ShapeError('Batch mismatch: %d images, %d graphs'
                                  % (images.shape[0], coords.shape[0]))
        f_cnn_attn = attention_refine(self.backbone(images), self.cnn_attn)
        (f_gcn, fallbacks) = self._graph_features(coords)
        if fallbacks:
            logging.warning('affectlib: graph fallback engaged for %d of %d '
                            'samples' % (fallbacks, coords.shape[0]))
        f_fused = torch.cat([f_cnn_attn, f_gcn], dim=1)
        return FusionFeatures(f_cnn_attn, f_gcn, f_fused, fallbacks)

    def forward(self, images, coords):
        """Logits for B images and B x 468 x 3 landmark coordinates."""
        feats = self.features(images, coords)
        self.last_fallbacks = feats.fallbacks
        return self.head(feats.f_fused)


def build_model(config, edges=None):
    return FusionNet(config['model'], edges)


def image_tensor(crops, mean, std):
    """Turn B x H x W x 3 uint8 RGB crops into normalized B x 3 x H x W."""
    x = torch.as_tensor(np.asarray(crops), dtype=torch.float32) / 255.0
    if x.dim() == 3:
        x = x.unsqueeze(0)
    x = x.permute(0, 3, 1, 2)
    mean = torch.as_tensor(mean, dtype=torch.float32).view(1, 3, 1, 1)
    std = torch.as_tensor(std, dtype=torch.float32).view(1, 3, 1, 1)
    return (x - mean) / std


def graphs_tensor(graphs):
    return torch.stack([_node_features(g) for g in graphs])


def fusion_forward(model, images, graphs):
    """Return (B x 7 logits, number of graph fallbacks).

    graphs is a list of FaceGraphs or a B x N x 3 coordinate tensor.
    """
    coords = graphs if torch.is_tensor(graphs) else graphs_tensor(graphs)
    logits = model(images, coords)
    return (logits, model.last_fallbacks)


def softmax_probabilities(logits):
    return torch.softmax(torch.as_tensor(logits), dim=-1)


def predict(model, images, graphs):
    """B x 7 class probabilities.  The model must be in eval mode."""
    if model.training:
        raise base.UsageError('predict() needs the model in eval mode')
    with torch.no_grad():
        (logits, _) = fusion_forward(model, images, graphs)
    return softmax_probabilities(logits)


def save_checkpoint(path, model, config_hash, seed, extra=None):
    """Save parameters plus a manifest we verify on load."""
    from . import __version__
    payload = {
        'manifest': {
            'version': __version__,
            'widths': model.widths(),
            'topology_sha256': facegraph.topology_hash(),
            'config_hash': config_hash,
            'seed': seed,
        },
        'state_dict': model.state_dict(),
    }
    if extra:
        payload.update(extra)
    torch.save(payload, path)


def load_checkpoint(path, model):
    """Load a checkpoint into model, checking widths and topology first."""
    try:
        payload = torch.load(path, map_location='cpu', weights_only=False)
    except (IOError, OSError) as why:
        raise base.UsageError('Cannot read checkpoint %s: %s' % (path, why))
    manifest = payload.get('manifest', {})
    if manifest.get('topology_sha256') != facegraph.topology_hash():
        raise base.IntegrityError(
            'Checkpoint %s was trained on topology %s, not %s'
            % (path, manifest.get('topology_sha256'),
               facegraph.topology_hash()))
    if manifest.get('widths') != model.widths():
        raise base.IntegrityError('Checkpoint %s has widths %s, model has %s'
                                  % (path, manifest.get('widths'),
                                     model.widths()))
    model.load_state_dict(payload['state_dict'])
    return payload
