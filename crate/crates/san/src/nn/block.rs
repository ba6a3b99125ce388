//! Conv/deconv + optional norm + optional activation composites.

use rand::Rng;

use super::{
    BufSlot, Conv2d, ConvTranspose2d, LeakyRelu, Mode, Norm2d, NormKind, ParamSlot, Params,
    Scalar,
};
use ndarray::Array4;

pub struct ConvBlock<S: Scalar> {
    pub conv: Conv2d<S>,
    pub norm: Option<Norm2d<S>>,
    pub act: Option<LeakyRelu<S>>,
}

impl<S: Scalar> ConvBlock<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        norm: Option<NormKind>,
        act_slope: Option<f64>,
        rng: &mut impl Rng,
    ) -> Self {
        ConvBlock {
            conv: Conv2d::new(in_c, out_c, k, stride, pad, act_slope.unwrap_or(0.0), rng),
            norm: norm.map(|kind| Norm2d::new(kind, out_c)),
            act: act_slope.map(LeakyRelu::new),
        }
    }

    pub fn forward(&mut self, x: &Array4<S>, mode: Mode) -> Array4<S> {
        let mut y = self.conv.forward(x, mode);
        if let Some(norm) = &mut self.norm {
            y = norm.forward(&y, mode);
        }
        if let Some(act) = &mut self.act {
            y = act.forward(&y, mode);
        }
        y
    }

    pub fn backward(&mut self, gy: &Array4<S>) -> Array4<S> {
        let mut g = gy.clone();
        if let Some(act) = &mut self.act {
            g = act.backward(&g);
        }
        if let Some(norm) = &mut self.norm {
            g = norm.backward(&g);
        }
        self.conv.backward(&g)
    }
}

impl<S: Scalar> Params<S> for ConvBlock<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, S>)) {
        self.conv.visit_params(&super::join(prefix, "conv"), f);
        if let Some(norm) = &mut self.norm {
            norm.visit_params(&super::join(prefix, "norm"), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(BufSlot<'_, S>)) {
        if let Some(norm) = &mut self.norm {
            norm.visit_buffers(&super::join(prefix, "norm"), f);
        }
    }
}

pub struct DeconvBlock<S: Scalar> {
    pub deconv: ConvTranspose2d<S>,
    pub norm: Option<Norm2d<S>>,
    pub act: Option<LeakyRelu<S>>,
}

impl<S: Scalar> DeconvBlock<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        norm: Option<NormKind>,
        act_slope: Option<f64>,
        rng: &mut impl Rng,
    ) -> Self {
        DeconvBlock {
            deconv: ConvTranspose2d::new(
                in_c,
                out_c,
                k,
                stride,
                pad,
                act_slope.unwrap_or(0.0),
                rng,
            ),
            norm: norm.map(|kind| Norm2d::new(kind, out_c)),
            act: act_slope.map(LeakyRelu::new),
        }
    }

    pub fn forward(&mut self, x: &Array4<S>, mode: Mode) -> Array4<S> {
        let mut y = self.deconv.forward(x, mode);
        if let Some(norm) = &mut self.norm {
            y = norm.forward(&y, mode);
        }
        if let Some(act) = &mut self.act {
            y = act.forward(&y, mode);
        }
        y
    }

    pub fn backward(&mut self, gy: &Array4<S>) -> Array4<S> {
        let mut g = gy.clone();
        if let Some(act) = &mut self.act {
            g = act.backward(&g);
        }
        if let Some(norm) = &mut self.norm {
            g = norm.backward(&g);
        }
        self.deconv.backward(&g)
    }
}

impl<S: Scalar> Params<S> for DeconvBlock<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, S>)) {
        self.deconv.visit_params(&super::join(prefix, "deconv"), f);
        if let Some(norm) = &mut self.norm {
            norm.visit_params(&super::join(prefix, "norm"), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(BufSlot<'_, S>)) {
        if let Some(norm) = &mut self.norm {
            norm.visit_buffers(&super::join(prefix, "norm"), f);
        }
    }
}
