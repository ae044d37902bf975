#!/usr/bin/env python3
"""Faster R-CNN detector backend on torchvision.

Speaks the JSON-lines protocol of the `external` detector backend on
stdin/stdout. The backbone is rebuilt from the attached checkpoint's
`det_backbone.` shapes, so any bottleneck ResNet variant loads, and the
feature pyramid is torchvision's own with `head.fpn.` weights copied in.
"""

import hashlib
import json
import os
import re
import struct
import sys
from collections import OrderedDict

import numpy as np
import torch
from PIL import Image
from torch import nn
from torchvision.models.detection import FasterRCNN
from torchvision.ops import FeaturePyramidNetwork
from torchvision.ops.feature_pyramid_network import LastLevelMaxPool
from torchvision.ops.misc import FrozenBatchNorm2d

MAGIC = b"GPCKPT\r\n"
FORMAT_VERSION = 1
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def read_archive(path):
    data = open(path, "rb").read()
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ValueError(f"{path}: checksum mismatch")
    if body[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint archive")
    (hlen,) = struct.unpack("<Q", body[8:16])
    header = json.loads(body[16 : 16 + hlen])
    if header["format_version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {header['format_version']}")
    payload = body[16 + hlen :]
    arrays = OrderedDict()
    for e in header["arrays"]:
        raw = payload[e["offset"] : e["offset"] + e["length"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
    return header["meta"], arrays


def write_archive(path, meta, arrays):
    payload = bytearray()
    entries = []
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f4")
        raw = a.tobytes()
        entries.append(
            {"name": name, "dtype": "f32", "shape": list(a.shape), "offset": len(payload), "length": len(raw)}
        )
        payload += raw
    header = json.dumps({"format_version": FORMAT_VERSION, "meta": meta, "arrays": entries}).encode()
    out = MAGIC + struct.pack("<Q", len(header)) + header + bytes(payload)
    out += hashlib.sha256(out).digest()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(out)
    os.replace(tmp, path)


class Bottleneck(nn.Module):
    def __init__(self, cin, cout, width, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, width, 1, bias=False)
        self.bn1 = FrozenBatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, 3, stride, 1, bias=False)
        self.bn2 = FrozenBatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, cout, 1, bias=False)
        self.bn3 = FrozenBatchNorm2d(cout)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = nn.Sequential(
                OrderedDict(conv=nn.Conv2d(cin, cout, 1, stride, bias=False), bn=FrozenBatchNorm2d(cout))
            )

    def forward(self, x):
        y = torch.relu(self.bn1(self.conv1(x)))
        y = torch.relu(self.bn2(self.conv2(y)))
        y = self.bn3(self.conv3(y))
        identity = x if self.downsample is None else self.downsample(x)
        return torch.relu(y + identity)


class ResNet(nn.Module):
    """Bottleneck ResNet with the archive's parameter names."""

    def __init__(self, stem, channels, blocks, expansion=4):
        super().__init__()
        self.stem = nn.Sequential(
            OrderedDict(conv=nn.Conv2d(3, stem, 7, 2, 3, bias=False), bn=FrozenBatchNorm2d(stem))
        )
        cin = stem
        for s, (cout, n) in enumerate(zip(channels, blocks)):
            layers = []
            for i in range(n):
                stride = 2 if i == 0 and s > 0 else 1
                layers.append(Bottleneck(cin, cout, cout // expansion, stride))
                cin = cout
            setattr(self, f"stage{s + 1}", nn.Sequential(*layers))

    def forward(self, x):
        x = torch.relu(self.stem(x))
        x = nn.functional.max_pool2d(x, 3, 2, 1)
        feats = []
        for s in range(1, 5):
            x = getattr(self, f"stage{s}")(x)
            feats.append(x)
        return feats


class BackboneWithFpn(nn.Module):
    def __init__(self, body, in_channels, out_channels=256):
        super().__init__()
        self.body = body
        self.fpn = FeaturePyramidNetwork(in_channels, out_channels, extra_blocks=LastLevelMaxPool())
        self.out_channels = out_channels

    def forward(self, x):
        feats = self.body(x)
        return self.fpn(OrderedDict((str(i), f) for i, f in enumerate(feats)))


def spec_from_arrays(arrays):
    stem = arrays["det_backbone.stem.conv.weight"].shape[0]
    channels, blocks = [], []
    for s in range(1, 5):
        idx = {int(m.group(1)) for k in arrays if (m := re.match(rf"det_backbone\.stage{s}\.(\d+)\.", k))}
        if not idx:
            raise ValueError(f"checkpoint has no det_backbone.stage{s} keys")
        blocks.append(max(idx) + 1)
        channels.append(arrays[f"det_backbone.stage{s}.0.conv3.weight"].shape[0])
    return stem, channels, blocks


def fpn_key(ours):
    m = re.match(r"head\.fpn\.(lateral|output)\.(\d)\.(weight|bias)$", ours)
    if not m:
        return None
    kind = "inner_blocks" if m.group(1) == "lateral" else "layer_blocks"
    return f"fpn.{kind}.{m.group(2)}.0.{m.group(3)}"


class Backend:
    def __init__(self):
        self.model = None

    def attach(self, req):
        meta, arrays = read_archive(req["checkpoint"])
        opts = req.get("options", {})
        torch.manual_seed(opts.get("seed", 0))
        stem, channels, blocks = spec_from_arrays(arrays)
        backbone = BackboneWithFpn(ResNet(stem, channels, blocks), channels)

        state = backbone.state_dict()
        for name, value in arrays.items():
            if name.startswith("det_backbone."):
                key = "body." + name[len("det_backbone.") :]
            else:
                key = fpn_key(name)
            if key is None:
                continue
            if key not in state:
                raise ValueError(f"no slot for `{name}`")
            state[key] = torch.from_numpy(value.astype(np.float32))
        missing = [k for k in backbone.state_dict() if k.startswith("body.") and "det_backbone." + k[5:] not in arrays]
        if missing:
            raise ValueError("missing backbone keys: " + ", ".join(missing))
        backbone.load_state_dict(state)

        trainable = opts.get("trainable_stages", 3)
        allowed = [f"stage{s}" for s in range(5 - min(trainable, 4), 5)] + (["stem"] if trainable >= 5 else [])
        for name, p in backbone.body.named_parameters():
            p.requires_grad_(any(name.startswith(a) for a in allowed))

        norm = meta["normalization"]
        self.model = FasterRCNN(
            backbone,
            num_classes=opts.get("num_classes", 1) + 1,
            min_size=opts.get("min_size", 512),
            max_size=opts.get("max_size", 512),
            image_mean=norm["mean"],
            image_std=norm["std"],
        )
        for prefix in ("rpn.", "roi_heads."):
            extra = {k: v for k, v in arrays.items() if k.startswith("head." + prefix)}
            if extra:
                own = self.model.state_dict()
                for k, v in extra.items():
                    own[k[len("head.") :]] = torch.from_numpy(v.astype(np.float32))
                self.model.load_state_dict(own)
        params = [p for p in self.model.parameters() if p.requires_grad]
        self.opt = torch.optim.SGD(
            params, lr=0.0, momentum=opts.get("momentum", 0.9), weight_decay=opts.get("weight_decay", 1e-4)
        )
        self.meta = meta
        self.norm = norm
        return {}

    @staticmethod
    def load_image(sample):
        img = np.asarray(Image.open(sample["path"]).convert("RGB"), dtype=np.float32) / 255.0
        return torch.from_numpy(img).permute(2, 0, 1).contiguous()

    def train_step(self, req):
        self.model.train()
        images, targets = [], []
        for s in req["samples"]:
            images.append(self.load_image(s))
            boxes = torch.tensor(s["boxes"], dtype=torch.float32).reshape(-1, 4)
            labels = torch.tensor(s["labels"], dtype=torch.int64) + 1
            targets.append({"boxes": boxes, "labels": labels})
        for g in self.opt.param_groups:
            g["lr"] = req["lr"]
        losses = self.model(images, targets)
        total = sum(losses.values())
        self.opt.zero_grad()
        total.backward()
        self.opt.step()
        return {"loss": float(total.detach()), "parts": {k: float(v.detach()) for k, v in losses.items()}}

    @torch.no_grad()
    def predict(self, req):
        self.model.eval()
        images = [self.load_image(s) for s in req["samples"]]
        outs = self.model(images)
        dets = []
        for s, o in zip(req["samples"], outs):
            dets.append(
                {
                    "image_id": s["image_id"],
                    "boxes": o["boxes"].tolist(),
                    "labels": (o["labels"] - 1).tolist(),
                    "scores": o["scores"].tolist(),
                }
            )
        return {"detections": dets}

    @torch.no_grad()
    def features(self, req):
        """Pyramid maps for one image, normalized but not resized."""
        x = self.load_image(req["sample"])
        mean = torch.tensor(self.norm["mean"]).view(3, 1, 1)
        std = torch.tensor(self.norm["std"]).view(3, 1, 1)
        x = ((x - mean) / std).unsqueeze(0)
        levels = self.model.backbone(x)
        return {"levels": [{"shape": list(v.shape), "data": v.flatten().tolist()} for v in levels.values()]}

    def export(self, req):
        arrays = {}
        for k, v in self.model.state_dict().items():
            if k.endswith("num_batches_tracked"):
                continue
            if k.startswith("backbone.body."):
                name = "det_backbone." + k[len("backbone.body.") :]
            elif k.startswith("backbone.fpn."):
                m = re.match(r"backbone\.fpn\.(inner_blocks|layer_blocks)\.(\d)\.0\.(weight|bias)$", k)
                kind = "lateral" if m.group(1) == "inner_blocks" else "output"
                name = f"head.fpn.{kind}.{m.group(2)}.{m.group(3)}"
            else:
                name = "head." + k
            arrays[name] = v.detach().cpu().numpy()
        meta = dict(self.meta)
        meta["extra"] = dict(meta.get("extra", {}), task="detection")
        write_archive(req["path"], meta, arrays)
        return {}


def main():
    backend = Backend()
    for line in sys.stdin:
        if not line.strip():
            continue
        req = json.loads(line)
        cmd = req.get("cmd")
        if cmd == "shutdown":
            break
        try:
            if cmd in ("attach", "train_step", "predict", "features", "export"):
                if cmd != "attach" and backend.model is None:
                    raise ValueError("no checkpoint attached")
                reply = getattr(backend, cmd)(req)
                reply["ok"] = True
            else:
                reply = {"ok": False, "error": f"unknown command `{cmd}`"}
        except Exception as e:  # reported to the caller, not fatal
            reply = {"ok": False, "error": f"{type(e).__name__}: {e}"}
        sys.stdout.write(json.dumps(reply) + "\n")
        sys.stdout.flush()


if __name__ == "__main__":
    main()
