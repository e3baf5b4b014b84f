"""Compact five-stage segmentation network with a frozen stem, a frozen
domain-neutral twin of the deep layers, rearrangement/style-elimination
insertion points, and the SGD training loop.

Layer 0 (the stem) is frozen by default; the rearranged branch is produced
from its output, so both branches share one stem pass. The neutral twin is a
frozen copy of layers 1-4 taken at initialization and is fed the (optionally
style-eliminated) shallow features of the original sample under no_grad.
"""

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import mla as mla_mod
from . import objective as obj
from . import srm as srm_mod
from .data import SegSample
from .stats import IGNORE, resize_labels

DEEP_LAYERS = (1, 2, 3, 4)


class ShapeMismatchError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class NetworkConfig:
    channels: tuple = (16, 24, 32, 48, 64)
    strides: tuple = (1, 2, 1, 2, 1)
    num_classes: int = 4
    seed: int = 0
    frozen_layer0: bool = True
    neutral_twin: bool = True
    style_elim: bool = True

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.strides = tuple(self.strides)
        if len(self.channels) != 5 or len(self.strides) != 5:
            raise ValueError("five stages required")


@dataclass
class TrainConfig:
    lr_encoder: float = 0.005
    lr_decoder: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_power: float = 0.9
    max_steps: int = 200
    batch: int = 4
    crop: int = 32
    seed: int = 0
    lambda_mla: tuple = mla_mod.DEFAULT_LAMBDA_MLA
    lambda_pc: float = obj.DEFAULT_LAMBDA_PC
    alpha: float = srm_mod.DEFAULT_ALPHA
    use_srm: bool = True
    use_pc: bool = True
    use_mla_global: bool = True
    use_mla_regional: bool = True
    use_mla_local: bool = True
    pretrain_steps: int = 0
    pretrain_domains: int = 8
    pretrain_per_domain: int = 4
    log_every: int = 10

    def __post_init__(self):
        self.lambda_mla = tuple(self.lambda_mla)

    @property
    def use_mla(self) -> bool:
        return (
            self.use_mla_global or self.use_mla_regional or self.use_mla_local
        ) and any(l != 0 for l in self.lambda_mla)


def poly_lr(base_lr: float, step: int, max_steps: int, power: float) -> float:
    return base_lr * (1.0 - step / max_steps) ** power


def _block(cin: int, cout: int, stride: int) -> nn.Sequential:
    groups = 4 if cout % 4 == 0 else 1
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(groups, cout),
        nn.ReLU(inplace=True),
    )


@dataclass
class ForwardOut:
    features: dict  # layer id (1..4) -> (B, D_l, H_l, W_l)
    logits: torch.Tensor  # (B, C, H, W)
    probs: torch.Tensor  # (B, C, H, W)


@dataclass
class PairOut:
    shallow_I: torch.Tensor
    shallow_SR: torch.Tensor
    gt_shallow: torch.Tensor
    branch_I: ForwardOut
    branch_SR: ForwardOut
    neutral_features: dict


class SegNet(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        torch.manual_seed(config.seed)
        ch, st = config.channels, config.strides
        self.layer0 = nn.Sequential(
            nn.Conv2d(3, ch[0], 3, stride=st[0], padding=1), nn.ReLU(inplace=True)
        )
        self.layers = nn.ModuleList(
            [_block(ch[l - 1], ch[l], st[l]) for l in DEEP_LAYERS]
        )
        self.head = nn.Conv2d(ch[4], config.num_classes, 1)
        if config.frozen_layer0:
            for p in self.layer0.parameters():
                p.requires_grad_(False)
        if config.neutral_twin:
            self.twin = copy.deepcopy(self.layers)
            for p in self.twin.parameters():
                p.requires_grad_(False)
        else:
            self.twin = None

    def load_backbone(self, state: dict):
        """Load stem + deep-layer weights and re-snapshot the frozen twin.

        Used to start a run from domain-neutral pretrained weights: the twin
        becomes a frozen copy of exactly the weights training starts from.
        """
        self.load_state_dict(state, strict=False)
        if self.config.frozen_layer0:
            for p in self.layer0.parameters():
                p.requires_grad_(False)
        if self.config.neutral_twin:
            self.twin = copy.deepcopy(self.layers)
            for p in self.twin.parameters():
                p.requires_grad_(False)

    # parameter groups -------------------------------------------------
    def encoder_parameters(self):
        params = [p for p in self.layers.parameters()]
        if not self.config.frozen_layer0:
            params = list(self.layer0.parameters()) + params
        return params

    def decoder_parameters(self):
        return list(self.head.parameters())

    # forward paths ----------------------------------------------------
    def _check_image(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() == 3:
            image = image.unsqueeze(0)
        if image.dim() != 4 or image.shape[1] != 3:
            raise ShapeMismatchError(f"expected (B, 3, H, W) image, got {tuple(image.shape)}")
        return image

    def _encode(self, x: torch.Tensor, modules) -> dict:
        feats = {}
        for l, layer in zip(DEEP_LAYERS, modules):
            x = layer(x)
            feats[l] = x
        return feats

    def _decode(self, f4: torch.Tensor, out_size) -> tuple[torch.Tensor, torch.Tensor]:
        logits = self.head(f4)
        logits = nn.functional.interpolate(
            logits, size=out_size, mode="bilinear", align_corners=False
        )
        return logits, torch.softmax(logits, dim=1)

    def stem(self, image: torch.Tensor) -> torch.Tensor:
        return self.layer0(self._check_image(image))

    def _post_stem(self, x0: torch.Tensor) -> torch.Tensor:
        return mla_mod.style_eliminate(x0) if self.config.style_elim else x0

    def _branch(self, z: torch.Tensor, out_size) -> ForwardOut:
        feats = self._encode(z, self.layers)
        logits, probs = self._decode(feats[4], out_size)
        return ForwardOut(features=feats, logits=logits, probs=probs)

    def forward(self, image: torch.Tensor) -> ForwardOut:
        image = self._check_image(image)
        x0 = self.layer0(image)
        return self._branch(self._post_stem(x0), image.shape[-2:])

    def forward_pair(
        self,
        image: torch.Tensor,
        labels: torch.Tensor,
        rng: np.random.Generator,
        alpha: float = srm_mod.DEFAULT_ALPHA,
    ) -> PairOut:
        """Run the original and rearranged branches plus the frozen neutral path."""
        image = self._check_image(image)
        if labels.dim() == 2:
            labels = labels.unsqueeze(0)
        x0 = self.layer0(image)
        h0, w0 = x0.shape[-2:]
        gt_s = torch.stack([resize_labels(labels[b], h0, w0) for b in range(labels.shape[0])])
        x0_sr = torch.stack(
            [srm_mod.rearrange(x0[b], gt_s[b], rng, alpha) for b in range(x0.shape[0])]
        )
        z_I = self._post_stem(x0)
        z_SR = self._post_stem(x0_sr)
        out_size = image.shape[-2:]
        branch_I = self._branch(z_I, out_size)
        branch_SR = self._branch(z_SR, out_size)
        if self.twin is not None:
            with torch.no_grad():
                neutral = self._encode(z_I.detach(), self.twin)
        else:
            neutral = {l: f.detach() for l, f in branch_I.features.items()}
        return PairOut(
            shallow_I=x0,
            shallow_SR=x0_sr,
            gt_shallow=gt_s,
            branch_I=branch_I,
            branch_SR=branch_SR,
            neutral_features=neutral,
        )


# ----------------------------------------------------------------------
# checkpointing


def parameter_digest(module: nn.Module) -> str:
    """SHA-256 over the module's parameter/buffer bytes, in state-dict order."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, model: SegNet, extra: dict | None = None):
    payload = {
        "version": 1,
        "network_config": asdict(model.config),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[SegNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != 1:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    config = NetworkConfig(**payload["network_config"])
    model = SegNet(config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload.get("extra", {})


# ----------------------------------------------------------------------
# training


def check_finite(value: float, step: int):
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value} at step {step}")


def neutral_pretrain(net_config: NetworkConfig, train_config: TrainConfig) -> dict:
    """Backbone weights from a plain task run on style-randomized domains.

    Desk-scale surrogate for a pretrained domain-neutral extractor: every
    pretraining mini-domain re-draws per-category colors, so the resulting
    features carry texture rather than color. The returned state covers the
    stem and deep layers only; load it with SegNet.load_backbone so the twin
    snapshots the same weights.
    """
    from .data import make_pretrain_domains

    cfg = train_config
    corpus = make_pretrain_domains(
        num_categories=net_config.num_classes,
        seed=cfg.seed,
        n_domains=cfg.pretrain_domains,
        per_domain=cfg.pretrain_per_domain,
        size=cfg.crop,
    )
    pre_net = NetworkConfig(
        channels=net_config.channels,
        strides=net_config.strides,
        num_classes=net_config.num_classes,
        seed=net_config.seed,
        frozen_layer0=False,
        neutral_twin=False,
        style_elim=True,
    )
    pre_train = TrainConfig(
        lr_encoder=cfg.lr_encoder,
        lr_decoder=cfg.lr_decoder,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        poly_power=cfg.poly_power,
        max_steps=cfg.pretrain_steps,
        batch=cfg.batch,
        crop=cfg.crop,
        seed=cfg.seed,
        use_srm=False,
        use_pc=False,
        use_mla_global=False,
        use_mla_regional=False,
        use_mla_local=False,
    )
    result = train(corpus, pre_net, pre_train)
    return {
        k: v
        for k, v in result.model.state_dict().items()
        if k.startswith(("layer0.", "layers."))
    }


def compute_losses(model: SegNet, pair: PairOut, labels: torch.Tensor, cfg: TrainConfig):
    """Batch-mean objective for one forward_pair output."""
    batch = labels.shape[0]
    task_I = task_SR = pc = torch.zeros(())
    per_layer_acc = None
    for b in range(batch):
        task_I = task_I + obj.task_loss(pair.branch_I.probs[b], labels[b])
        task_SR = task_SR + obj.task_loss(pair.branch_SR.probs[b], labels[b])
        if cfg.use_pc:
            pc = pc + obj.js_consistency(pair.branch_I.probs[b], pair.branch_SR.probs[b])
        if cfg.use_mla:
            per_layer = []
            for l in DEEP_LAYERS:
                f_n = pair.neutral_features[l][b]
                gt_l = resize_labels(labels[b], f_n.shape[-2], f_n.shape[-1])
                per_layer.append(
                    (pair.branch_I.features[l][b], pair.branch_SR.features[l][b], f_n, gt_l)
                )
            bd = mla_mod.mla_loss(
                per_layer,
                cfg.lambda_mla,
                use_global=cfg.use_mla_global,
                use_regional=cfg.use_mla_regional,
                use_local=cfg.use_mla_local,
            )
            if per_layer_acc is None:
                per_layer_acc = bd
            else:
                per_layer_acc = mla_mod.AlignmentBreakdown(
                    layers=[
                        mla_mod.LayerAlignment(
                            a.a_global + b2.a_global,
                            a.a_regional + b2.a_regional,
                            a.a_local + b2.a_local,
                        )
                        for a, b2 in zip(per_layer_acc.layers, bd.layers)
                    ],
                    lambda_mla=bd.lambda_mla,
                    total=per_layer_acc.total + bd.total,
                )
    task_I, task_SR, pc = task_I / batch, task_SR / batch, pc / batch
    if per_layer_acc is None:
        breakdown = mla_mod.zero_breakdown(len(DEEP_LAYERS), cfg.lambda_mla)
    else:
        breakdown = mla_mod.AlignmentBreakdown(
            layers=[
                mla_mod.LayerAlignment(
                    l.a_global / batch, l.a_regional / batch, l.a_local / batch
                )
                for l in per_layer_acc.layers
            ],
            lambda_mla=per_layer_acc.lambda_mla,
            total=per_layer_acc.total / batch,
        )
    lam_pc = cfg.lambda_pc if cfg.use_pc else 0.0
    total, losses = obj.total_loss(task_I, task_SR, breakdown, pc, lam_pc)
    return total, losses, breakdown


def _augment(sample: SegSample, rng: np.random.Generator, crop: int) -> SegSample:
    img, lab = sample.image, sample.labels
    if rng.random() < 0.5:
        img, lab = torch.flip(img, dims=(2,)), torch.flip(lab, dims=(1,))
    h, w = lab.shape
    if crop < h or crop < w:
        top = int(rng.integers(0, h - crop + 1))
        left = int(rng.integers(0, w - crop + 1))
        img = img[:, top : top + crop, left : left + crop]
        lab = lab[top : top + crop, left : left + crop]
    return SegSample(image=img, labels=lab)


@dataclass
class TrainResult:
    model: SegNet
    metrics: list = field(default_factory=list)
    checkpoint_path: Path | None = None
    final_digest: str = ""


def train(
    dataset: list[SegSample],
    net_config: NetworkConfig,
    train_config: TrainConfig,
    out_dir=None,
    init_state: dict | None = None,
) -> TrainResult:
    """SGD training with poly learning-rate decay and per-step metrics.

    When pretrain_steps > 0 (or init_state is given) the backbone starts
    from domain-neutral pretrained weights and the twin snapshots them. The
    frozen stem and the neutral twin are excluded from the optimizer and are
    bit-identical before and after training. When out_dir is given the
    checkpoint and a newline-delimited metrics log are written there.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    cfg = train_config
    model = SegNet(net_config)
    if init_state is None and cfg.pretrain_steps > 0:
        init_state = neutral_pretrain(net_config, cfg)
    if init_state is not None:
        model.load_backbone(init_state)
    model.train()
    rng = np.random.default_rng(cfg.seed)
    groups = [
        {"params": model.encoder_parameters(), "lr": cfg.lr_encoder},
        {"params": model.decoder_parameters(), "lr": cfg.lr_decoder},
    ]
    optimizer = torch.optim.SGD(
        groups, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    base_lrs = [g["lr"] for g in optimizer.param_groups]

    metrics = []
    order = []
    for step in range(cfg.max_steps):
        if len(order) < cfg.batch:
            order.extend(rng.permutation(len(dataset)).tolist())
        idx, order = order[: cfg.batch], order[cfg.batch :]
        batch = [_augment(dataset[i], rng, cfg.crop) for i in idx]
        images = torch.stack([s.image for s in batch])
        labels = torch.stack([s.labels for s in batch])

        for g, base in zip(optimizer.param_groups, base_lrs):
            g["lr"] = poly_lr(base, step, cfg.max_steps, cfg.poly_power)

        optimizer.zero_grad()
        if cfg.use_srm:
            pair = model.forward_pair(images, labels, rng, cfg.alpha)
            total, losses, breakdown = compute_losses(model, pair, labels, cfg)
        else:
            out = model(images)
            task = torch.stack(
                [obj.task_loss(out.probs[b], labels[b]) for b in range(labels.shape[0])]
            ).mean()
            if cfg.use_mla and model.twin is not None:
                with torch.no_grad():
                    neutral = model._encode(
                        model._post_stem(model.layer0(images)).detach(), model.twin
                    )
                per_sample = []
                for b in range(labels.shape[0]):
                    per_layer = []
                    for l in DEEP_LAYERS:
                        f_n = neutral[l][b]
                        gt_l = resize_labels(labels[b], f_n.shape[-2], f_n.shape[-1])
                        per_layer.append((out.features[l][b], None, f_n, gt_l))
                    per_sample.append(
                        mla_mod.mla_loss(
                            per_layer,
                            cfg.lambda_mla,
                            use_global=cfg.use_mla_global,
                            use_regional=cfg.use_mla_regional,
                            use_local=cfg.use_mla_local,
                        )
                    )
                mla_total = torch.stack([bd.total for bd in per_sample]).mean()
                breakdown = per_sample[0]
                breakdown = mla_mod.AlignmentBreakdown(
                    layers=breakdown.layers, lambda_mla=breakdown.lambda_mla, total=mla_total
                )
            else:
                breakdown = mla_mod.zero_breakdown(len(DEEP_LAYERS), cfg.lambda_mla)
            total, losses = obj.total_loss(task, task, breakdown, torch.zeros(()), 0.0)
        check_finite(float(total.detach()), step)
        total.backward()
        optimizer.step()

        if step % cfg.log_every == 0 or step == cfg.max_steps - 1:
            metrics.append(
                {
                    "step": step,
                    "lr_encoder": optimizer.param_groups[0]["lr"],
                    "lr_decoder": optimizer.param_groups[1]["lr"],
                    "loss": losses.to_dict(),
                    "mla": breakdown.to_dict(),
                }
            )

    model.eval()
    result = TrainResult(model=model, metrics=metrics, final_digest=parameter_digest(model))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = out_dir / "checkpoint.pt"
        save_checkpoint(ckpt, model, extra={"train_config": asdict(cfg)})
        with open(out_dir / "metrics.jsonl", "w") as fh:
            for row in metrics:
                fh.write(json.dumps(row) + "\n")
        result.checkpoint_path = ckpt
    return result


def evaluate(model: SegNet, dataset: list[SegSample]):
    """Per-category IoU and mean IoU of argmax predictions over a dataset."""
    from .data import miou

    if not dataset:
        raise ValueError("dataset is empty")
    preds, truths = [], []
    with torch.no_grad():
        for s in dataset:
            out = model(s.image.unsqueeze(0))
            preds.append(out.probs[0].argmax(dim=0))
            truths.append(s.labels)
    return miou(preds, truths, model.config.num_classes)


# ----------------------------------------------------------------------
# gradient verification


GRADCHECK_LOSSES = ("global", "regional", "local", "mla", "pc", "task")


def _fd_gradient(fn, x: torch.Tensor, h: float = 1e-4) -> torch.Tensor:
    """Central finite differences of a scalar fn w.r.t. every element of x."""
    g = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + h
        up = float(fn())
        flat[i] = orig - h
        down = float(fn())
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def gradcheck(
    loss_selector: str,
    probe_size: tuple = (4, 3, 3),
    trials: int = 10,
    seed: int = 0,
    h: float = 1e-4,
) -> dict:
    """Compare analytic (autograd) gradients against central finite differences.

    Probes are random double-precision feature maps; for the probability
    losses the probe is a logit map pushed through softmax. Returns the max
    relative error over trials and probed inputs.
    """
    if loss_selector not in GRADCHECK_LOSSES:
        raise ValueError(f"unknown loss {loss_selector}")
    gen = torch.Generator().manual_seed(seed)
    d = probe_size[0]
    max_rel = 0.0
    for _ in range(trials):
        f_i = torch.randn(probe_size, generator=gen, dtype=torch.float64)
        f_sr = torch.randn(probe_size, generator=gen, dtype=torch.float64)
        f_n = torch.randn(probe_size, generator=gen, dtype=torch.float64)
        gt = torch.randint(0, min(3, d), probe_size[1:], generator=gen)

        if loss_selector in ("global", "regional", "local", "mla"):
            probes = [f_i, f_sr]

            def fn():
                if loss_selector == "global":
                    return mla_mod.global_alignment(f_i, f_sr, f_n)
                if loss_selector == "regional":
                    return mla_mod.regional_alignment(f_i, f_sr, f_n, gt)
                if loss_selector == "local":
                    return mla_mod.local_alignment(f_i, f_sr, f_n)
                return mla_mod.mla_loss(
                    [(f_i, f_sr, f_n, gt)], lambda_mla=(1.0,)
                ).total

        elif loss_selector == "pc":
            probes = [f_i, f_sr]

            def fn():
                return obj.js_consistency(
                    torch.softmax(f_i, dim=0), torch.softmax(f_sr, dim=0)
                )

        else:  # task
            probes = [f_i]

            def fn():
                return obj.task_loss(torch.softmax(f_i, dim=0), gt)

        for p in probes:
            p.requires_grad_(True)
        loss = fn()
        grads = torch.autograd.grad(loss, probes)
        for p, g_auto in zip(probes, grads):
            p.requires_grad_(False)
            with torch.no_grad():
                g_fd = _fd_gradient(fn, p, h)
            scale = max(float(g_auto.abs().max()), 1e-8)
            rel = float((g_auto - g_fd).abs().max()) / scale
            max_rel = max(max_rel, rel)
    return {"loss": loss_selector, "trials": trials, "max_rel_error": max_rel}
