#!/usr/bin/env python3
"""Download torchvision's ImageNet VGG-19 and write the convolution weights
the extractor needs as a safetensors file.

    python scripts/fetch_vgg19.py vgg19.safetensors
    export BRUSHWORK_VGG19=$PWD/vgg19.safetensors

Needs torch, torchvision and safetensors.
"""
import argparse

import torch
from safetensors.torch import save_file
from torchvision.models import VGG19_Weights, vgg19

# Convolutions up to relu5_1.
CONV_INDICES = [0, 2, 5, 7, 10, 12, 14, 16, 19, 21, 23, 25, 28]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out")
    args = ap.parse_args()
    state = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features.state_dict()
    tensors = {}
    for i in CONV_INDICES:
        for part in ("weight", "bias"):
            key = f"{i}.{part}"
            tensors[f"features.{key}"] = state[key].to(torch.float32).contiguous()
    save_file(tensors, args.out)
    print(f"wrote {len(tensors)} tensors to {args.out}")


if __name__ == "__main__":
    main()
