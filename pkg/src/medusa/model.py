"""Model bundles: backbone plus optional attention components."""
import numpy as np

from . import ops
from .attention import AttentionOutputs, GlobalConfig, ScaleHead, build_global_module, medusa_gates
from .backbone import BackboneConfig, build_backbone
from .baselines import SEHead, se_forward
from .tensor import ConfigError

VARIANTS = ("plain", "se", "medusa", "global")

# sub-seed offsets so that every component draws from its own stream
_GLOBAL_SEED_OFFSET = 1000
_HEAD_SEED_OFFSET = 2000


class ModelBundle:
    """Backbone, global attention module, and per-stage heads, with BN statistics.

    ``kind`` is one of ``plain``, ``se``, ``medusa``, or ``global`` (a lone
    global module, as produced by segmentation pretraining).
    """

    def __init__(self, kind, backbone=None, global_module=None, heads=(), se_reduction=None,
                 backbone_config=None, global_config=None, seed=0):
        if kind not in VARIANTS:
            raise ConfigError("unknown variant %r (expected one of %s)" % (kind, ", ".join(VARIANTS)))
        self.kind = kind
        self.backbone = backbone
        self.global_module = global_module
        self.heads = list(heads)
        self.se_reduction = se_reduction
        self.backbone_config = backbone_config
        self.global_config = global_config
        self.seed = seed

    @property
    def has_attention(self):
        return self.kind == "medusa"

    @property
    def dtype(self):
        for p in self.parameters().values():
            return p.dtype
        return np.dtype(np.float32)

    def groups(self):
        """Parameters split into ``backbone`` and ``attention`` groups."""
        backbone = list(self.backbone.parameters()) if self.backbone is not None else []
        attention = []
        if self.global_module is not None:
            attention.extend(self.global_module.parameters())
        for head in self.heads:
            attention.extend(head.parameters())
        if self.kind == "se":
            # SE gates train jointly with the backbone
            return {"backbone": backbone + attention, "attention": []}
        return {"backbone": backbone, "attention": attention}

    def parameters(self):
        out = {}
        for group in self.groups().values():
            for p in group:
                if p.name in out:
                    raise ConfigError("duplicate parameter name %r" % p.name)
                out[p.name] = p
        return dict(sorted(out.items()))

    def bn_states(self):
        out = {}
        if self.backbone is not None:
            out.update(self.backbone.bn_states())
        if self.global_module is not None:
            out.update(self.global_module.bn_states())
        return dict(sorted(out.items()))

    def forward(self, x, attention_enabled=True, backbone_mode="eval", attention_mode="eval"):
        """Classify a batch; returns ``(logits, AttentionOutputs or None)``."""
        if self.backbone is None:
            raise ConfigError("bundle of kind %r has no backbone to classify with" % self.kind)
        if self.kind == "medusa":
            return medusa_forward(self, x, attention_enabled, backbone_mode, attention_mode)
        if self.kind == "se" and attention_enabled:
            gates = [lambda j, f, h=h: se_forward(h, f) for h in self.heads]
            return self.backbone.forward_features(x, gates, backbone_mode).logits, None
        return self.backbone.forward_features(x, None, backbone_mode).logits, None


def medusa_forward(bundle, x, attention_enabled=True, backbone_mode="eval", attention_mode="eval"):
    """Full forward pass of a MEDUSA bundle.

    The global map is computed once and shared by all heads.  With attention
    disabled the stage gates are identities, but ``sigma(A_G)`` is still
    computed for inspection.
    """
    missing = [name for name, part in (("backbone", bundle.backbone), ("global module", bundle.global_module)) if part is None]
    if bundle.backbone is not None and len(bundle.heads) != bundle.backbone.config.stage_count:
        missing.append("scale heads")
    if missing:
        raise ConfigError("MEDUSA bundle is missing: %s" % ", ".join(missing))
    bundle.backbone.check_input(x)
    a_g = bundle.global_module.forward(x, attention_mode)
    sigma = ops.sigmoid(a_g)
    record = AttentionOutputs(a_g, sigma)
    gates = medusa_gates(bundle.heads, sigma, record) if attention_enabled else None
    feats = bundle.backbone.forward_features(x, gates, backbone_mode)
    return feats.logits, record


def build_variant(kind, backbone_config=None, global_config=None, seed=0, se_reduction=4, dtype=np.float32):
    """Construct a bundle; the backbone initialisation depends only on ``seed``."""
    if kind not in VARIANTS:
        raise ConfigError("unknown variant %r (expected one of %s)" % (kind, ", ".join(VARIANTS)))
    backbone_config = backbone_config or BackboneConfig()
    global_config = global_config or GlobalConfig()
    backbone = None if kind == "global" else build_backbone(backbone_config, seed, dtype)
    global_module = None
    heads = []
    if kind in ("medusa", "global"):
        global_module = build_global_module(
            backbone_config.input_shape, global_config.depth, global_config.base_channels,
            seed + _GLOBAL_SEED_OFFSET, dtype,
        )
    rng = np.random.default_rng(seed + _HEAD_SEED_OFFSET)
    if kind == "medusa":
        heads = [ScaleHead(j, c, rng, dtype) for j, c in enumerate(backbone_config.stage_channels)]
    elif kind == "se":
        heads = [SEHead(j, c, se_reduction, rng, dtype) for j, c in enumerate(backbone_config.stage_channels)]
    return ModelBundle(kind, backbone, global_module, heads, se_reduction if kind == "se" else None,
                       backbone_config, global_config, seed)
