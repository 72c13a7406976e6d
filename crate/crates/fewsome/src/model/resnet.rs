//! ResNet-18 backbone with the classifier head replaced by a bias-free
//! fully-connected layer to the embedding dimension plus a sigmoid.
//!
//! Normalisation layers keep their learnable scale but carry no shift, so
//! the network has no additive parameter anywhere.

use crate::nn::{
    relu, relu_backward, sigmoid, sigmoid_backward, BatchNorm2d, BnCache, Conv2d, GlobalAvgPool,
    Linear, MaxPool2d, ParamKind, ParamMeta, Parameterized,
};
use crate::Scalar;
use ndarray::{Array2, Array4, ArrayViewD, ArrayViewMutD};
use rand_chacha::ChaCha8Rng;

struct BasicBlock<F: Scalar> {
    conv1: Conv2d<F>,
    bn1: BatchNorm2d<F>,
    conv2: Conv2d<F>,
    bn2: BatchNorm2d<F>,
    /// 1x1 strided projection when the shape changes.
    down: Option<(Conv2d<F>, BatchNorm2d<F>)>,
}

pub struct BlockCache<F: Scalar> {
    x: Array4<F>,
    r1: Array4<F>,
    bn1c: BnCache<F>,
    bn2c: BnCache<F>,
    downc: Option<BnCache<F>>,
    out: Array4<F>,
}

impl<F: Scalar> BasicBlock<F> {
    fn new(in_c: usize, out_c: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let down = if stride != 1 || in_c != out_c {
            Some((
                Conv2d::new(crate::nn::kaiming_conv(out_c, in_c, 1, rng), stride, 0),
                BatchNorm2d::new(out_c),
            ))
        } else {
            None
        };
        Self {
            conv1: Conv2d::new(crate::nn::kaiming_conv(out_c, in_c, 3, rng), stride, 1),
            bn1: BatchNorm2d::new(out_c),
            conv2: Conv2d::new(crate::nn::kaiming_conv(out_c, out_c, 3, rng), 1, 1),
            bn2: BatchNorm2d::new(out_c),
            down,
        }
    }

    fn forward_infer(&self, x: &Array4<F>) -> Array4<F> {
        let r1 = relu(&self.bn1.forward_infer(&self.conv1.forward(x)));
        let main = self.bn2.forward_infer(&self.conv2.forward(&r1));
        let skip = match &self.down {
            Some((conv, bn)) => bn.forward_infer(&conv.forward(x)),
            None => x.clone(),
        };
        relu(&(main + skip))
    }

    fn forward_train(&mut self, x: &Array4<F>) -> (Array4<F>, BlockCache<F>) {
        let z1 = self.conv1.forward(x);
        let (b1, bn1c) = self.bn1.forward_train(&z1);
        let r1 = relu(&b1);
        let z2 = self.conv2.forward(&r1);
        let (main, bn2c) = self.bn2.forward_train(&z2);
        let (skip, downc) = match &mut self.down {
            Some((conv, bn)) => {
                let zd = conv.forward(x);
                let (bd, c) = bn.forward_train(&zd);
                (bd, Some(c))
            }
            None => (x.clone(), None),
        };
        let out = relu(&(main + skip));
        let cache = BlockCache {
            x: x.clone(),
            r1,
            bn1c,
            bn2c,
            downc,
            out: out.clone(),
        };
        (out, cache)
    }

    fn backward(&mut self, cache: &BlockCache<F>, dout: &Array4<F>) -> Array4<F> {
        let dsum = relu_backward(&cache.out, dout);
        let dz2 = self.bn2.backward(&cache.bn2c, &dsum);
        let dr1 = self.conv2.backward(&cache.r1, &dz2);
        let db1 = relu_backward(&cache.r1, &dr1);
        let dz1 = self.bn1.backward(&cache.bn1c, &db1);
        let dx_main = self.conv1.backward(&cache.x, &dz1);
        let dx_skip = match (&mut self.down, &cache.downc) {
            (Some((conv, bn)), Some(dc)) => {
                let dzd = bn.backward(dc, &dsum);
                conv.backward(&cache.x, &dzd)
            }
            _ => dsum,
        };
        dx_main + dx_skip
    }

    fn set_track_running_stats(&mut self, track: bool) {
        self.bn1.track_running_stats = track;
        self.bn2.track_running_stats = track;
        if let Some((_, bn)) = &mut self.down {
            bn.track_running_stats = track;
        }
    }
}

pub struct ResNet18<F: Scalar> {
    conv1: Conv2d<F>,
    bn1: BatchNorm2d<F>,
    pool: MaxPool2d,
    blocks: Vec<BasicBlock<F>>, // layer1.0, layer1.1, layer2.0, ... layer4.1
    gap: GlobalAvgPool,
    fc: Linear<F>,
    input_shape: (usize, usize, usize),
}

pub struct ResNetCache<F: Scalar> {
    x0: Array4<F>,
    bn1c: BnCache<F>,
    r1: Array4<F>,
    arg_pool: Array4<u32>,
    block_inputs_hw: (usize, usize),
    blocks: Vec<BlockCache<F>>,
    gap_in: Array4<F>,
    feat: Array2<F>,
    emb: Array2<F>,
}

const STAGES: [(usize, usize, usize); 8] = [
    // (in_c, out_c, stride) per block
    (64, 64, 1),
    (64, 64, 1),
    (64, 128, 2),
    (128, 128, 1),
    (128, 256, 2),
    (256, 256, 1),
    (256, 512, 2),
    (512, 512, 1),
];

impl<F: Scalar> ResNet18<F> {
    pub fn kaiming(
        input_shape: (usize, usize, usize),
        embedding_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (c, _, _) = input_shape;
        let conv1 = Conv2d::new(crate::nn::kaiming_conv(64, c, 7, rng), 2, 3);
        let bn1 = BatchNorm2d::new(64);
        let pool = MaxPool2d::new(3, 2, 1);
        let blocks = STAGES
            .iter()
            .map(|&(i, o, s)| BasicBlock::new(i, o, s, rng))
            .collect();
        let fc = Linear::new(crate::nn::kaiming_linear(embedding_dim, 512, rng));
        Self {
            conv1,
            bn1,
            pool,
            blocks,
            gap: GlobalAvgPool,
            fc,
            input_shape,
        }
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn embedding_dim(&self) -> usize {
        self.fc.out_features()
    }

    /// Freeze or track normalisation running statistics during training.
    pub fn set_track_running_stats(&mut self, track: bool) {
        self.bn1.track_running_stats = track;
        for b in &mut self.blocks {
            b.set_track_running_stats(track);
        }
    }

    pub fn forward_infer(&self, x: &Array4<F>) -> Array2<F> {
        let r1 = relu(&self.bn1.forward_infer(&self.conv1.forward(x)));
        let (mut h, _) = self.pool.forward(&r1);
        for b in &self.blocks {
            h = b.forward_infer(&h);
        }
        let feat = self.gap.forward(&h);
        sigmoid(&self.fc.forward(&feat))
    }

    pub fn forward_train(&mut self, x: &Array4<F>) -> (Array2<F>, ResNetCache<F>) {
        let x0 = x.clone();
        let z1 = self.conv1.forward(&x0);
        let (b1, bn1c) = self.bn1.forward_train(&z1);
        let r1 = relu(&b1);
        let (p0, arg_pool) = self.pool.forward(&r1);
        let block_inputs_hw = (r1.dim().2, r1.dim().3);
        let mut h = p0;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            let (out, c) = b.forward_train(&h);
            caches.push(c);
            h = out;
        }
        let gap_in = h;
        let feat = self.gap.forward(&gap_in);
        let emb = sigmoid(&self.fc.forward(&feat));
        let cache = ResNetCache {
            x0,
            bn1c,
            r1,
            arg_pool,
            block_inputs_hw,
            blocks: caches,
            gap_in,
            feat,
            emb: emb.clone(),
        };
        (emb, cache)
    }

    pub fn backward(&mut self, cache: &ResNetCache<F>, demb: &Array2<F>) {
        let ds = sigmoid_backward(&cache.emb, demb);
        let dfeat = self.fc.backward(&cache.feat, &ds);
        let gap_hw = (cache.gap_in.dim().2, cache.gap_in.dim().3);
        let mut dh = self.gap.backward(gap_hw, &dfeat);
        for (b, c) in self.blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            dh = b.backward(c, &dh);
        }
        let dr1 = self.pool.backward(&cache.arg_pool, cache.block_inputs_hw, &dh);
        let db1 = relu_backward(&cache.r1, &dr1);
        let dz1 = self.bn1.backward(&cache.bn1c, &db1);
        let _ = self.conv1.backward(&cache.x0, &dz1);
    }

    fn block_name(i: usize) -> (String, String) {
        let layer = i / 2 + 1;
        let pos = i % 2;
        (format!("layer{layer}.{pos}"), format!("layer{layer}.{pos}"))
    }
}

impl<F: Scalar> Parameterized<F> for ResNet18<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&ParamMeta, ArrayViewD<'_, F>)) {
        f(
            &ParamMeta::new("conv1.weight", ParamKind::ConvWeight),
            self.conv1.weight.view().into_dyn(),
        );
        f(
            &ParamMeta::new("bn1.scale", ParamKind::NormScale),
            self.bn1.gamma.view().into_dyn(),
        );
        for (i, b) in self.blocks.iter().enumerate() {
            let (p, _) = Self::block_name(i);
            f(
                &ParamMeta::new(format!("{p}.conv1.weight"), ParamKind::ConvWeight),
                b.conv1.weight.view().into_dyn(),
            );
            f(
                &ParamMeta::new(format!("{p}.bn1.scale"), ParamKind::NormScale),
                b.bn1.gamma.view().into_dyn(),
            );
            f(
                &ParamMeta::new(format!("{p}.conv2.weight"), ParamKind::ConvWeight),
                b.conv2.weight.view().into_dyn(),
            );
            f(
                &ParamMeta::new(format!("{p}.bn2.scale"), ParamKind::NormScale),
                b.bn2.gamma.view().into_dyn(),
            );
            if let Some((conv, bn)) = &b.down {
                f(
                    &ParamMeta::new(format!("{p}.downsample.0.weight"), ParamKind::ConvWeight),
                    conv.weight.view().into_dyn(),
                );
                f(
                    &ParamMeta::new(format!("{p}.downsample.1.scale"), ParamKind::NormScale),
                    bn.gamma.view().into_dyn(),
                );
            }
        }
        f(
            &ParamMeta::new("head.weight", ParamKind::LinearWeight),
            self.fc.weight.view().into_dyn(),
        );
    }

    fn visit_params_mut(
        &mut self,
        f: &mut dyn FnMut(&ParamMeta, ArrayViewMutD<'_, F>, ArrayViewMutD<'_, F>),
    ) {
        f(
            &ParamMeta::new("conv1.weight", ParamKind::ConvWeight),
            self.conv1.weight.view_mut().into_dyn(),
            self.conv1.grad.view_mut().into_dyn(),
        );
        f(
            &ParamMeta::new("bn1.scale", ParamKind::NormScale),
            self.bn1.gamma.view_mut().into_dyn(),
            self.bn1.grad.view_mut().into_dyn(),
        );
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let (p, _) = Self::block_name(i);
            f(
                &ParamMeta::new(format!("{p}.conv1.weight"), ParamKind::ConvWeight),
                b.conv1.weight.view_mut().into_dyn(),
                b.conv1.grad.view_mut().into_dyn(),
            );
            f(
                &ParamMeta::new(format!("{p}.bn1.scale"), ParamKind::NormScale),
                b.bn1.gamma.view_mut().into_dyn(),
                b.bn1.grad.view_mut().into_dyn(),
            );
            f(
                &ParamMeta::new(format!("{p}.conv2.weight"), ParamKind::ConvWeight),
                b.conv2.weight.view_mut().into_dyn(),
                b.conv2.grad.view_mut().into_dyn(),
            );
            f(
                &ParamMeta::new(format!("{p}.bn2.scale"), ParamKind::NormScale),
                b.bn2.gamma.view_mut().into_dyn(),
                b.bn2.grad.view_mut().into_dyn(),
            );
            if let Some((conv, bn)) = &mut b.down {
                f(
                    &ParamMeta::new(format!("{p}.downsample.0.weight"), ParamKind::ConvWeight),
                    conv.weight.view_mut().into_dyn(),
                    conv.grad.view_mut().into_dyn(),
                );
                f(
                    &ParamMeta::new(format!("{p}.downsample.1.scale"), ParamKind::NormScale),
                    bn.gamma.view_mut().into_dyn(),
                    bn.grad.view_mut().into_dyn(),
                );
            }
        }
        f(
            &ParamMeta::new("head.weight", ParamKind::LinearWeight),
            self.fc.weight.view_mut().into_dyn(),
            self.fc.grad.view_mut().into_dyn(),
        );
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        f("bn1.running_mean", self.bn1.running_mean.view().into_dyn());
        f("bn1.running_var", self.bn1.running_var.view().into_dyn());
        for (i, b) in self.blocks.iter().enumerate() {
            let (p, _) = Self::block_name(i);
            f(
                &format!("{p}.bn1.running_mean"),
                b.bn1.running_mean.view().into_dyn(),
            );
            f(
                &format!("{p}.bn1.running_var"),
                b.bn1.running_var.view().into_dyn(),
            );
            f(
                &format!("{p}.bn2.running_mean"),
                b.bn2.running_mean.view().into_dyn(),
            );
            f(
                &format!("{p}.bn2.running_var"),
                b.bn2.running_var.view().into_dyn(),
            );
            if let Some((_, bn)) = &b.down {
                f(
                    &format!("{p}.downsample.1.running_mean"),
                    bn.running_mean.view().into_dyn(),
                );
                f(
                    &format!("{p}.downsample.1.running_var"),
                    bn.running_var.view().into_dyn(),
                );
            }
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        f(
            "bn1.running_mean",
            self.bn1.running_mean.view_mut().into_dyn(),
        );
        f("bn1.running_var", self.bn1.running_var.view_mut().into_dyn());
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let (p, _) = Self::block_name(i);
            f(
                &format!("{p}.bn1.running_mean"),
                b.bn1.running_mean.view_mut().into_dyn(),
            );
            f(
                &format!("{p}.bn1.running_var"),
                b.bn1.running_var.view_mut().into_dyn(),
            );
            f(
                &format!("{p}.bn2.running_mean"),
                b.bn2.running_mean.view_mut().into_dyn(),
            );
            f(
                &format!("{p}.bn2.running_var"),
                b.bn2.running_var.view_mut().into_dyn(),
            );
            if let Some((_, bn)) = &mut b.down {
                f(
                    &format!("{p}.downsample.1.running_mean"),
                    bn.running_mean.view_mut().into_dyn(),
                );
                f(
                    &format!("{p}.downsample.1.running_var"),
                    bn.running_var.view_mut().into_dyn(),
                );
            }
        }
    }
}
