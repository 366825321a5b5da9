"""Convert a torchvision ResNet-50 checkpoint into the engine's HDF5 weights format.

Batch norm layers are folded into per-channel scale and shift (eval-mode statistics).
The result is what repro mode expects as model.weights, e.g. a ResNet-50 fine-tuned on
the ten ImageNette classes:

    python tools/convert_torchvision_resnet50.py finetuned.pt resnet50_imagenette.h5 \
        --classes n01440764 n02102040 n02979186 n03000684 n03028079 \
                  n03394916 n03417042 n03425413 n03445777 n03888605
"""

import argparse

import numpy as np
import torch
import torchvision

import cpdefense


def fold_bn(bn):
    scale = bn.weight.detach() / torch.sqrt(bn.running_var + bn.eps)
    shift = bn.bias.detach() - bn.running_mean * scale
    return [scale.numpy(), shift.numpy()]


def conv_weight(conv):
    # torch (out, in, kh, kw) -> engine rows (kh, kw, in), columns out
    w = conv.weight.detach().permute(2, 3, 1, 0).contiguous()
    return w.reshape(-1, w.shape[-1]).numpy()


def engine_params(model):
    params = [conv_weight(model.conv1), *fold_bn(model.bn1)]
    for stage in (model.layer1, model.layer2, model.layer3, model.layer4):
        for unit in stage:
            for conv, bn in ((unit.conv1, unit.bn1), (unit.conv2, unit.bn2), (unit.conv3, unit.bn3)):
                params += [conv_weight(conv), *fold_bn(bn)]
            if unit.downsample is not None:
                params += [conv_weight(unit.downsample[0]), *fold_bn(unit.downsample[1])]
    params += [model.fc.weight.detach().T.contiguous().numpy(), model.fc.bias.detach().numpy()]
    return [np.ascontiguousarray(p, dtype=np.float64) for p in params]


def load_model(checkpoint, num_classes):
    model = torchvision.models.resnet50(num_classes=num_classes)
    if checkpoint:
        state = torch.load(checkpoint, map_location="cpu")
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        if isinstance(state, torch.nn.Module):
            state = state.state_dict()
        model.load_state_dict(state)
    return model.eval()


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("checkpoint", help="torchvision resnet50 state dict (or pickled module)")
    ap.add_argument("output", help="engine weights file (.h5)")
    ap.add_argument("--classes", nargs="+", required=True, help="class names in logit order")
    ap.add_argument("--image-size", type=int, default=224)
    args = ap.parse_args()

    model = load_model(args.checkpoint, len(args.classes))
    cpdefense.save_resnet50(args.output, args.classes, args.image_size, engine_params(model))
    print(f"wrote {args.output}")


if __name__ == "__main__":
    main()
