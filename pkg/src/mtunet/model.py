"""The assembled classifier: backbone -> pattern extractor -> pair matcher."""

from __future__ import annotations

import numpy as np

from .backbone import Backbone
from .errors import LoadError
from .io import load_checkpoint, save_checkpoint
from .matcher import PairMatcher, average_supports, classify_query, score_matrix
from .pattern import PatternExtractor, pe_forward
from .tensor import no_grad


class MTUNet:
    def __init__(self, backbone, pe=None, pm=None):
        self.backbone = backbone
        self.pe = pe
        self.pm = pm

    # -- persistence ----------------------------------------------------
    def state(self):
        named = self.backbone.state_dict("backbone.")
        if self.pe is not None:
            named.update(self.pe.state_dict("pe."))
            named["pe.iterations"] = np.array([float(self.pe.iterations)])
        if self.pm is not None:
            named.update(self.pm.state_dict("pm."))
            named["pm.input_scale"] = np.array([self.pm.input_scale])
        return named

    def save(self, path):
        save_checkpoint(path, self.state())

    @classmethod
    def from_state(cls, named):
        try:
            widths = []
            i = 1
            while f"backbone.block{i}.conv.weight" in named:
                widths.append(named[f"backbone.block{i}.conv.weight"].shape[0])
                i += 1
            in_channels = named["backbone.block1.conv.weight"].shape[1]
            n_classes = named["backbone.head.weight"].shape[0]
        except KeyError as exc:
            raise LoadError(f"checkpoint lacks {exc.args[0]}") from None
        backbone = Backbone(n_classes, None, widths=tuple(widths), in_channels=in_channels)
        backbone.load_state_dict(_strip(named, "backbone."))
        pe = pm = None
        if "pe.patterns" in named:
            slots, dim = named["pe.patterns"].shape
            iterations = int(named.get("pe.iterations", np.array([3.0]))[0])
            pe = PatternExtractor(backbone.channels, slots, None, dim=dim, iterations=iterations)
            pe.load_state_dict(_strip(named, "pe."))
        if "pm.mlp.fc1.weight" in named:
            scale = float(named.get("pm.input_scale", np.array([1.0]))[0])
            pm = PairMatcher(backbone.channels, None, input_scale=scale)
            pm.load_state_dict(_strip(named, "pm."))
        model = cls(backbone, pe, pm)
        unknown = sorted(set(named) - set(model.state()))
        if unknown:
            raise LoadError(f"unknown checkpoint entry {unknown[0]!r}")
        return model

    @classmethod
    def load(cls, path):
        return cls.from_state(load_checkpoint(path))

    # -- inference --------------------------------------------------------
    def attend(self, images, batch=64):
        """(V, A_T) ndarrays for a stack of images."""
        vs, attn = [], []
        with no_grad():
            for start in range(0, len(images), batch):
                feats = self.backbone.features(images[start:start + batch])
                v, a = pe_forward(feats, self.pe)
                vs.append(v.data)
                attn.append(a.data)
        return np.concatenate(vs), np.concatenate(attn)

    def embed(self, images):
        return self.attend(images)[0]

    def scores(self, queries, supports):
        """Q×K membership scores for query features and K×N×c support features."""
        with no_grad():
            return score_matrix(queries, average_supports(supports), self.pm).data

    def classify(self, queries, supports):
        return classify_query(self.scores(queries, supports))


def _strip(named, prefix):
    return {k[len(prefix):]: v for k, v in named.items() if k.startswith(prefix)}
