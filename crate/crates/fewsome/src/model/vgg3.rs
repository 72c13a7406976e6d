//! VGG-3 backbone: the first three convolutional blocks of VGG-16
//! (channel widths 64/128/256), a flatten, one bias-free fully-connected
//! layer to the embedding dimension, and a sigmoid.

use crate::nn::{
    relu, relu_backward, sigmoid, sigmoid_backward, Conv2d, Linear, MaxPool2d, ParamKind,
    ParamMeta, Parameterized,
};
use crate::Scalar;
use ndarray::{Array2, Array4, ArrayViewD, ArrayViewMutD};
use rand_chacha::ChaCha8Rng;

/// Conv positions follow the VGG-16 `features` indexing, which keeps
/// pretrained-weight files directly addressable.
pub(crate) const VGG3_CONV_NAMES: [&str; 7] = [
    "features.0.weight",
    "features.2.weight",
    "features.5.weight",
    "features.7.weight",
    "features.10.weight",
    "features.12.weight",
    "features.14.weight",
];

pub struct Vgg3<F: Scalar> {
    convs: [Conv2d<F>; 7],
    fc: Linear<F>,
    pool: MaxPool2d,
    input_shape: (usize, usize, usize),
    flat_dim: usize,
}

pub struct Vgg3Cache<F: Scalar> {
    x0: Array4<F>,
    r11: Array4<F>,
    r12: Array4<F>,
    arg1: Array4<u32>,
    p1: Array4<F>,
    r21: Array4<F>,
    r22: Array4<F>,
    arg2: Array4<u32>,
    p2: Array4<F>,
    r31: Array4<F>,
    r32: Array4<F>,
    r33: Array4<F>,
    arg3: Array4<u32>,
    flat: Array2<F>,
    emb: Array2<F>,
}

const WIDTHS: [(usize, usize); 7] = [
    (0, 64), // in_c filled from input shape
    (64, 64),
    (64, 128),
    (128, 128),
    (128, 256),
    (256, 256),
    (256, 256),
];

impl<F: Scalar> Vgg3<F> {
    /// Builds with Kaiming-initialised weights drawn from `rng`.
    pub fn kaiming(
        input_shape: (usize, usize, usize),
        embedding_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (c, h, w) = input_shape;
        let pool = MaxPool2d::new(2, 2, 0);
        let convs = std::array::from_fn(|i| {
            let (in_c, out_c) = WIDTHS[i];
            let in_c = if i == 0 { c } else { in_c };
            Conv2d::new(crate::nn::kaiming_conv(out_c, in_c, 3, rng), 1, 1)
        });
        let flat_dim = Self::flat_dim_for(h, w);
        let fc = Linear::new(crate::nn::kaiming_linear(embedding_dim, flat_dim, rng));
        Self {
            convs,
            fc,
            pool,
            input_shape,
            flat_dim,
        }
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn embedding_dim(&self) -> usize {
        self.fc.out_features()
    }

    fn flat_dim_for(h: usize, w: usize) -> usize {
        let pool = MaxPool2d::new(2, 2, 0);
        let (h1, w1) = pool.out_hw(h, w);
        let (h2, w2) = pool.out_hw(h1, w1);
        let (h3, w3) = pool.out_hw(h2, w2);
        256 * h3 * w3
    }

    pub fn forward_infer(&self, x: &Array4<F>) -> Array2<F> {
        let r11 = relu(&self.convs[0].forward(x));
        let r12 = relu(&self.convs[1].forward(&r11));
        let (p1, _) = self.pool.forward(&r12);
        let r21 = relu(&self.convs[2].forward(&p1));
        let r22 = relu(&self.convs[3].forward(&r21));
        let (p2, _) = self.pool.forward(&r22);
        let r31 = relu(&self.convs[4].forward(&p2));
        let r32 = relu(&self.convs[5].forward(&r31));
        let r33 = relu(&self.convs[6].forward(&r32));
        let (p3, _) = self.pool.forward(&r33);
        let b = p3.dim().0;
        let flat = p3
            .into_shape_with_order((b, self.flat_dim))
            .expect("pool output is standard layout");
        sigmoid(&self.fc.forward(&flat))
    }

    pub fn forward_train(&self, x: &Array4<F>) -> (Array2<F>, Vgg3Cache<F>) {
        let x0 = x.clone();
        let r11 = relu(&self.convs[0].forward(&x0));
        let r12 = relu(&self.convs[1].forward(&r11));
        let (p1, arg1) = self.pool.forward(&r12);
        let r21 = relu(&self.convs[2].forward(&p1));
        let r22 = relu(&self.convs[3].forward(&r21));
        let (p2, arg2) = self.pool.forward(&r22);
        let r31 = relu(&self.convs[4].forward(&p2));
        let r32 = relu(&self.convs[5].forward(&r31));
        let r33 = relu(&self.convs[6].forward(&r32));
        let (p3, arg3) = self.pool.forward(&r33);
        let b = p3.dim().0;
        let flat = p3
            .into_shape_with_order((b, self.flat_dim))
            .expect("pool output is standard layout");
        let emb = sigmoid(&self.fc.forward(&flat));
        let cache = Vgg3Cache {
            x0,
            r11,
            r12,
            arg1,
            p1,
            r21,
            r22,
            arg2,
            p2,
            r31,
            r32,
            r33,
            arg3,
            flat,
            emb: emb.clone(),
        };
        (emb, cache)
    }

    /// Backpropagates an embedding gradient, accumulating weight gradients.
    pub fn backward(&mut self, cache: &Vgg3Cache<F>, demb: &Array2<F>) {
        let ds = sigmoid_backward(&cache.emb, demb);
        let dflat = self.fc.backward(&cache.flat, &ds);
        let (b, _) = dflat.dim();
        let (h3, w3) = {
            let (_, _, rh, rw) = cache.r33.dim();
            self.pool.out_hw(rh, rw)
        };
        let dp3 = dflat
            .into_shape_with_order((b, 256, h3, w3))
            .expect("flat grad is standard layout");

        let hw33 = (cache.r33.dim().2, cache.r33.dim().3);
        let dr33 = self.pool.backward(&cache.arg3, hw33, &dp3);
        let dz33 = relu_backward(&cache.r33, &dr33);
        let dr32 = self.convs[6].backward(&cache.r32, &dz33);
        let dz32 = relu_backward(&cache.r32, &dr32);
        let dr31 = self.convs[5].backward(&cache.r31, &dz32);
        let dz31 = relu_backward(&cache.r31, &dr31);
        let dp2 = self.convs[4].backward(&cache.p2, &dz31);

        let hw22 = (cache.r22.dim().2, cache.r22.dim().3);
        let dr22 = self.pool.backward(&cache.arg2, hw22, &dp2);
        let dz22 = relu_backward(&cache.r22, &dr22);
        let dr21 = self.convs[3].backward(&cache.r21, &dz22);
        let dz21 = relu_backward(&cache.r21, &dr21);
        let dp1 = self.convs[2].backward(&cache.p1, &dz21);

        let hw12 = (cache.r12.dim().2, cache.r12.dim().3);
        let dr12 = self.pool.backward(&cache.arg1, hw12, &dp1);
        let dz12 = relu_backward(&cache.r12, &dr12);
        let dr11 = self.convs[1].backward(&cache.r11, &dz12);
        let dz11 = relu_backward(&cache.r11, &dr11);
        let _ = self.convs[0].backward(&cache.x0, &dz11);
    }
}

impl<F: Scalar> Parameterized<F> for Vgg3<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&ParamMeta, ArrayViewD<'_, F>)) {
        for (i, conv) in self.convs.iter().enumerate() {
            f(
                &ParamMeta::new(VGG3_CONV_NAMES[i], ParamKind::ConvWeight),
                conv.weight.view().into_dyn(),
            );
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
        for (i, conv) in self.convs.iter_mut().enumerate() {
            f(
                &ParamMeta::new(VGG3_CONV_NAMES[i], ParamKind::ConvWeight),
                conv.weight.view_mut().into_dyn(),
                conv.grad.view_mut().into_dyn(),
            );
        }
        f(
            &ParamMeta::new("head.weight", ParamKind::LinearWeight),
            self.fc.weight.view_mut().into_dyn(),
            self.fc.grad.view_mut().into_dyn(),
        );
    }
}
