#!/usr/bin/env python3
"""Convert a torchvision ResNet state dict into a generalist checkpoint.

    python3 scripts/import_torchvision_resnet.py --out generalist.ckpt
    python3 scripts/import_torchvision_resnet.py --weights resnet50.pth --out generalist.ckpt

Without --weights the torchvision ImageNet weights are fetched through
torchvision's own download cache.
"""

import argparse
import re
import sys
from pathlib import Path

import torch
import torchvision

sys.path.insert(0, str(Path(__file__).resolve().parent))
from torchvision_backend import read_archive, write_archive  # noqa: E402

RULES = [
    (r"^conv1\.", "stem.conv."),
    (r"^bn1\.", "stem.bn."),
    (r"^layer(\d)\.(\d+)\.downsample\.0\.", r"stage\1.\2.downsample.conv."),
    (r"^layer(\d)\.(\d+)\.downsample\.1\.", r"stage\1.\2.downsample.bn."),
    (r"^layer(\d)\.", r"stage\1."),
]


def rename(key):
    if key.startswith("fc.") or key.endswith("num_batches_tracked"):
        return None
    for pat, rep in RULES:
        new, n = re.subn(pat, rep, key)
        if n:
            return "backbone." + new
    raise ValueError(f"unexpected key {key}")


def convert(state):
    arrays = {}
    for k, v in state.items():
        name = rename(k)
        if name is not None:
            arrays[name] = v.detach().cpu().float().numpy()
    return arrays


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--arch", default="resnet50", choices=["resnet50"])
    ap.add_argument("--weights", help="state dict saved with torch.save")
    ap.add_argument("--random", action="store_true", help="skip weights, keep torchvision's random init")
    ap.add_argument("--check", help="reference checkpoint whose key set and shapes must match")
    ap.add_argument("--out", required=True)
    args = ap.parse_args()

    if args.weights:
        state = torch.load(args.weights, map_location="cpu", weights_only=True)
        source = Path(args.weights).name
    elif args.random:
        state = getattr(torchvision.models, args.arch)(weights=None).state_dict()
        source = "random"
    else:
        state = getattr(torchvision.models, args.arch)(weights="DEFAULT").state_dict()
        source = "torchvision"
    arrays = convert(state)

    if args.check:
        _, ref = read_archive(args.check)
        ours = {k: tuple(v.shape) for k, v in arrays.items()}
        theirs = {k: tuple(v.shape) for k, v in ref.items() if k.startswith("backbone.")}
        if ours != theirs:
            missing = sorted(set(theirs) - set(ours))[:5]
            extra = sorted(set(ours) - set(theirs))[:5]
            bad = sorted(k for k in set(ours) & set(theirs) if ours[k] != theirs[k])[:5]
            sys.exit(f"layout mismatch: missing {missing} extra {extra} shape {bad}")

    meta = {
        "method": "generalist",
        "dataset": "imagenet",
        "epochs": 0,
        "normalization": {"mean": [0.485, 0.456, 0.406], "std": [0.229, 0.224, 0.225]},
        "parent_checksum": None,
        "backbone": args.arch,
        "extra": {"init": source},
    }
    write_archive(args.out, meta, arrays)
    print(f"{args.out}: {len(arrays)} arrays")


if __name__ == "__main__":
    main()
