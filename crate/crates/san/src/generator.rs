//! Pose-transfer generator with semantic attention blocks.
//!
//! Two encoders share one architecture but not weights: the appearance
//! pathway reads the source image with its mask and one-hot parsing map, the
//! semantic pathway reads the target mask and parsing map. A chain of
//! semantic attention blocks then repeatedly gates the semantic code into the
//! appearance code:
//!
//! ```text
//! M_t      = sigmoid(mask_convs(F_pt))          attention mask
//! F_ps(t)  = M_t * F_pt + F_ps(t-1)             gated residual injection
//! F_pt(t)  = conv([F_pt(t-1), F_ps(t)])         semantic update
//! ```
//!
//! Both final codes run through three more stride-2 stages (the content
//! pyramids), and a decoder of transposed convolutions rebuilds the image,
//! concatenating the appearance/semantic content features at each matching
//! scale before upsampling. The output is a tanh image in `[-1, 1]`.

use ndarray::{concatenate, s, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{
    join, sigmoid, BufSlot, Conv2d, ConvBlock, DeconvBlock, Mode, NormKind, ParamSlot, Params,
    Scalar,
};

/// How attention masks are produced in each block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskMode {
    /// Sigmoid over the learned mask convolutions (normal operation).
    Learned,
    /// Replace every mask value with a constant. `Constant(1.0)` disables the
    /// gating for ablations; `Constant(0.0)` turns each block into an
    /// identity on the appearance path, which the tests exploit.
    Constant(f64),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Semantic label count (channels of the one-hot parsing maps).
    pub labels: usize,
    /// Channel width after the first convolution; the attention blocks run
    /// at twice this width.
    pub base_channels: usize,
    /// Number of semantic attention blocks.
    pub blocks: usize,
    pub norm: String,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            labels: 20,
            base_channels: 16,
            blocks: 5,
            norm: "instance".into(),
        }
    }
}

impl GeneratorConfig {
    pub fn norm_kind(&self) -> crate::Result<NormKind> {
        match self.norm.as_str() {
            "instance" => Ok(NormKind::Instance),
            "batch" => Ok(NormKind::Batch),
            other => Err(crate::Error::Config(format!(
                "unknown norm kind `{other}` (expected `instance` or `batch`)"
            ))),
        }
    }

    /// Channels of the appearance input: RGB + mask + one-hot labels.
    pub fn appearance_channels(&self) -> usize {
        4 + self.labels
    }

    /// Channels of the semantic input: mask + one-hot labels.
    pub fn semantic_channels(&self) -> usize {
        1 + self.labels
    }
}

/// Total spatial downsampling between input and the bottleneck, hence the
/// divisibility requirement on image sizes.
pub const DOWNSAMPLE_FACTOR: usize = 32;

const SLOPE: f64 = 0.2;

fn to_std<S: Scalar>(x: Array4<S>) -> Array4<S> {
    if x.is_standard_layout() {
        x
    } else {
        x.as_standard_layout().to_owned()
    }
}

fn cat2<S: Scalar>(a: &Array4<S>, b: &Array4<S>) -> Array4<S> {
    to_std(concatenate![Axis(1), a.view(), b.view()])
}

fn cat3<S: Scalar>(a: &Array4<S>, b: &Array4<S>, c: &Array4<S>) -> Array4<S> {
    to_std(concatenate![Axis(1), a.view(), b.view(), c.view()])
}

fn split2<S: Scalar>(x: &Array4<S>, c1: usize) -> (Array4<S>, Array4<S>) {
    (
        x.slice(s![.., ..c1, .., ..]).to_owned(),
        x.slice(s![.., c1.., .., ..]).to_owned(),
    )
}

fn split3<S: Scalar>(x: &Array4<S>, c1: usize, c2: usize) -> (Array4<S>, Array4<S>, Array4<S>) {
    (
        x.slice(s![.., ..c1, .., ..]).to_owned(),
        x.slice(s![.., c1..c1 + c2, .., ..]).to_owned(),
        x.slice(s![.., c1 + c2.., .., ..]).to_owned(),
    )
}

struct SabCache<S> {
    f_pt_in: Array4<S>,
    mask: Array4<S>,
    mode: MaskMode,
}

/// One semantic attention block. All parameters are block-local.
pub struct Sab<S: Scalar> {
    mask1: ConvBlock<S>,
    mask2: ConvBlock<S>,
    mask3: Conv2d<S>,
    update: ConvBlock<S>,
    cache: Option<SabCache<S>>,
}

impl<S: Scalar> Sab<S> {
    pub fn new(channels: usize, norm: NormKind, rng: &mut impl Rng) -> Self {
        let c = channels;
        Sab {
            mask1: ConvBlock::new(c, c, 3, 1, 1, Some(norm), Some(SLOPE), rng),
            mask2: ConvBlock::new(c, c, 3, 1, 1, Some(norm), Some(SLOPE), rng),
            mask3: Conv2d::new(c, c, 3, 1, 1, 0.0, rng),
            update: ConvBlock::new(2 * c, c, 3, 1, 1, Some(norm), Some(SLOPE), rng),
            cache: None,
        }
    }

    /// Returns `(f_ps_next, f_pt_next)`; with `Mode::Train` the block caches
    /// what [`Self::backward`] needs.
    pub fn forward(
        &mut self,
        f_ps: &Array4<S>,
        f_pt: &Array4<S>,
        mask_mode: MaskMode,
        mode: Mode,
    ) -> (Array4<S>, Array4<S>) {
        let mask = match mask_mode {
            MaskMode::Learned => {
                let pre = self
                    .mask3
                    .forward(&self.mask2.forward(&self.mask1.forward(f_pt, mode), mode), mode);
                sigmoid(&pre)
            }
            MaskMode::Constant(v) => Array4::from_elem(f_pt.dim(), S::from_f64(v)),
        };
        let f_ps_next = &mask * f_pt + f_ps;
        let f_pt_next = self.update.forward(&cat2(f_pt, &f_ps_next), mode);
        if mode == Mode::Train {
            self.cache = Some(SabCache {
                f_pt_in: f_pt.clone(),
                mask: mask.clone(),
                mode: mask_mode,
            });
        }
        (f_ps_next, f_pt_next)
    }

    /// Returns gradients with respect to the block inputs `(f_ps, f_pt)`.
    pub fn backward(&mut self, g_ps_next: &Array4<S>, g_pt_next: &Array4<S>) -> (Array4<S>, Array4<S>) {
        let cache = self.cache.take().expect("sab backward without forward");
        let c = cache.f_pt_in.dim().1;
        let g_update_in = self.update.backward(g_pt_next);
        let (g_fpt_from_update, g_fps_from_update) = split2(&g_update_in, c);
        // Total gradient arriving at f_ps_next: direct + through the update conv.
        let g_fps_next = g_ps_next + &g_fps_from_update;
        // Eq. 2 pieces: f_ps_next = mask * f_pt + f_ps.
        let g_ps = g_fps_next.clone();
        let mut g_pt = &g_fps_next * &cache.mask + &g_fpt_from_update;
        if cache.mode == MaskMode::Learned {
            let g_mask = &g_fps_next * &cache.f_pt_in;
            // Through the sigmoid: m * (1 - m).
            let g_pre = g_mask * &cache.mask.mapv(|m| m * (S::one() - m));
            let g_mask_path = self
                .mask1
                .backward(&self.mask2.backward(&self.mask3.backward(&g_pre)));
            g_pt = g_pt + g_mask_path;
        }
        (g_ps, g_pt)
    }
}

impl<S: Scalar> Params<S> for Sab<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, S>)) {
        self.mask1.visit_params(&join(prefix, "mask1"), f);
        self.mask2.visit_params(&join(prefix, "mask2"), f);
        self.mask3.visit_params(&join(prefix, "mask3"), f);
        self.update.visit_params(&join(prefix, "update"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(BufSlot<'_, S>)) {
        self.mask1.visit_buffers(&join(prefix, "mask1"), f);
        self.mask2.visit_buffers(&join(prefix, "mask2"), f);
        self.update.visit_buffers(&join(prefix, "update"), f);
    }
}

/// Appearance and semantic content pyramids (three scales each), returned by
/// [`Generator::content_features`].
pub struct ContentFeatures<S> {
    pub appearance: [Array4<S>; 3],
    pub semantic: [Array4<S>; 3],
}

struct GenCache<S> {
    tanh_out: Array4<S>,
}

pub struct Generator<S: Scalar> {
    app_enc: Vec<ConvBlock<S>>,
    sem_enc: Vec<ConvBlock<S>>,
    sabs: Vec<Sab<S>>,
    conv_a: Vec<ConvBlock<S>>,
    conv_s: Vec<ConvBlock<S>>,
    dec: Vec<DeconvBlock<S>>,
    out_conv: Conv2d<S>,
    cache: Option<GenCache<S>>,
    base: usize,
}

impl<S: Scalar> Generator<S> {
    pub fn new(cfg: &GeneratorConfig, rng: &mut impl Rng) -> crate::Result<Self> {
        let norm = cfg.norm_kind()?;
        if cfg.base_channels == 0 || cfg.blocks == 0 {
            return Err(crate::Error::Config(
                "generator base_channels and blocks must be positive".into(),
            ));
        }
        let c = cfg.base_channels;
        let f = 2 * c;
        let enc = |in_c: usize, rng: &mut _| -> Vec<ConvBlock<S>> {
            vec![
                ConvBlock::new(in_c, c, 7, 1, 3, Some(norm), Some(SLOPE), rng),
                ConvBlock::new(c, f, 3, 2, 1, Some(norm), Some(SLOPE), rng),
                ConvBlock::new(f, f, 3, 2, 1, Some(norm), Some(SLOPE), rng),
            ]
        };
        let content = |rng: &mut _| -> Vec<ConvBlock<S>> {
            (0..3)
                .map(|_| ConvBlock::new(f, f, 3, 2, 1, Some(norm), Some(SLOPE), rng))
                .collect()
        };
        Ok(Generator {
            app_enc: enc(cfg.appearance_channels(), rng),
            sem_enc: enc(cfg.semantic_channels(), rng),
            sabs: (0..cfg.blocks).map(|_| Sab::new(f, norm, rng)).collect(),
            conv_a: content(rng),
            conv_s: content(rng),
            dec: vec![
                DeconvBlock::new(2 * f, f, 4, 2, 1, Some(norm), Some(SLOPE), rng),
                DeconvBlock::new(3 * f, f, 4, 2, 1, Some(norm), Some(SLOPE), rng),
                DeconvBlock::new(3 * f, f, 4, 2, 1, Some(norm), Some(SLOPE), rng),
                DeconvBlock::new(f, c, 4, 2, 1, Some(norm), Some(SLOPE), rng),
                DeconvBlock::new(c, c, 4, 2, 1, Some(norm), Some(SLOPE), rng),
            ],
            out_conv: Conv2d::new(c, 3, 3, 1, 1, 0.0, rng),
            cache: None,
            base: c,
        })
    }

    fn check_input(&self, app: &Array4<S>, sem: &Array4<S>) -> crate::Result<()> {
        let (n, _, h, w) = app.dim();
        let (ns, _, hs, ws) = sem.dim();
        if (n, h, w) != (ns, hs, ws) {
            return Err(crate::Error::ShapeMismatch {
                context: "generator inputs".into(),
                expected: format!("matching batch and size, appearance {:?}", app.dim()),
                found: format!("semantic {:?}", sem.dim()),
            });
        }
        if h % DOWNSAMPLE_FACTOR != 0 || w % DOWNSAMPLE_FACTOR != 0 || h == 0 || w == 0 {
            return Err(crate::Error::ShapeMismatch {
                context: "generator inputs".into(),
                expected: format!("height and width divisible by {DOWNSAMPLE_FACTOR}"),
                found: format!("{h}x{w}"),
            });
        }
        Ok(())
    }

    fn encode(
        enc: &mut [ConvBlock<S>],
        x: &Array4<S>,
        mode: Mode,
    ) -> Array4<S> {
        let mut cur = x.clone();
        for block in enc.iter_mut() {
            cur = block.forward(&cur, mode);
        }
        cur
    }

    fn run_sabs(
        &mut self,
        f_ps0: Array4<S>,
        f_pt0: Array4<S>,
        mask_mode: MaskMode,
        mode: Mode,
    ) -> (Array4<S>, Array4<S>) {
        let mut f_ps = f_ps0;
        let mut f_pt = f_pt0;
        for sab in self.sabs.iter_mut() {
            let (a, b) = sab.forward(&f_ps, &f_pt, mask_mode, mode);
            f_ps = a;
            f_pt = b;
        }
        (f_ps, f_pt)
    }

    fn content(
        chain: &mut [ConvBlock<S>],
        x: &Array4<S>,
        mode: Mode,
    ) -> [Array4<S>; 3] {
        let c1 = chain[0].forward(x, mode);
        let c2 = chain[1].forward(&c1, mode);
        let c3 = chain[2].forward(&c2, mode);
        [c1, c2, c3]
    }

    /// Full forward pass producing a `(n, 3, h, w)` image in `[-1, 1]`.
    pub fn forward(
        &mut self,
        appearance: &Array4<S>,
        semantic: &Array4<S>,
        mask_mode: MaskMode,
        mode: Mode,
    ) -> crate::Result<Array4<S>> {
        self.check_input(appearance, semantic)?;
        let f_ps0 = Self::encode(&mut self.app_enc, appearance, mode);
        let f_pt0 = Self::encode(&mut self.sem_enc, semantic, mode);
        let (f_ps, f_pt) = self.run_sabs(f_ps0, f_pt0, mask_mode, mode);
        let a = Self::content(&mut self.conv_a, &f_ps, mode);
        let s = Self::content(&mut self.conv_s, &f_pt, mode);
        let u1 = self.dec[0].forward(&cat2(&a[2], &s[2]), mode);
        let u2 = self.dec[1].forward(&cat3(&u1, &a[1], &s[1]), mode);
        let u3 = self.dec[2].forward(&cat3(&u2, &a[0], &s[0]), mode);
        let u4 = self.dec[3].forward(&u3, mode);
        let u5 = self.dec[4].forward(&u4, mode);
        let y = crate::nn::tanh(&self.out_conv.forward(&u5, mode));
        if mode == Mode::Train {
            self.cache = Some(GenCache { tanh_out: y.clone() });
        }
        Ok(y)
    }

    /// Backpropagate an image gradient; accumulates parameter gradients and
    /// returns gradients for the two inputs.
    pub fn backward(&mut self, g_image: &Array4<S>) -> (Array4<S>, Array4<S>) {
        let cache = self.cache.take().expect("generator backward without forward");
        let f = 2 * self.base;
        let g = crate::nn::tanh_backward(&cache.tanh_out, g_image);
        let g = self.out_conv.backward(&g);
        let g = self.dec[4].backward(&g);
        let g = self.dec[3].backward(&g);
        let g_cat3b = self.dec[2].backward(&g);
        let (g_u2, g_a0, g_s0) = split3(&g_cat3b, f, f);
        let g_cat3a = self.dec[1].backward(&g_u2);
        let (g_u1, g_a1, g_s1) = split3(&g_cat3a, f, f);
        let g_cat2 = self.dec[0].backward(&g_u1);
        let (g_a2, g_s2) = split2(&g_cat2, f);
        // Content pyramids: deepest gradient first, adding each skip branch.
        let g_fps = Self::content_backward(&mut self.conv_a, g_a2, g_a1, g_a0);
        let g_fpt = Self::content_backward(&mut self.conv_s, g_s2, g_s1, g_s0);
        // Attention chain in reverse.
        let (mut g_ps, mut g_pt) = (g_fps, g_fpt);
        for sab in self.sabs.iter_mut().rev() {
            let (a, b) = sab.backward(&g_ps, &g_pt);
            g_ps = a;
            g_pt = b;
        }
        let g_app = Self::encode_backward(&mut self.app_enc, g_ps);
        let g_sem = Self::encode_backward(&mut self.sem_enc, g_pt);
        (g_app, g_sem)
    }

    fn content_backward(
        chain: &mut [ConvBlock<S>],
        g3: Array4<S>,
        g2: Array4<S>,
        g1: Array4<S>,
    ) -> Array4<S> {
        let g = chain[2].backward(&g3) + g2;
        let g = chain[1].backward(&g) + g1;
        chain[0].backward(&g)
    }

    fn encode_backward(enc: &mut [ConvBlock<S>], g: Array4<S>) -> Array4<S> {
        let mut g = g;
        for block in enc.iter_mut().rev() {
            g = block.backward(&g);
        }
        g
    }

    /// Evaluation-mode synthesis with learned attention masks.
    pub fn generate(
        &mut self,
        appearance: &Array4<S>,
        semantic: &Array4<S>,
    ) -> crate::Result<Array4<S>> {
        self.forward(appearance, semantic, MaskMode::Learned, Mode::Eval)
    }

    /// The two content pyramids for the given inputs (evaluation mode).
    pub fn content_features(
        &mut self,
        appearance: &Array4<S>,
        semantic: &Array4<S>,
        mask_mode: MaskMode,
    ) -> crate::Result<ContentFeatures<S>> {
        self.check_input(appearance, semantic)?;
        let mode = Mode::Eval;
        let f_ps0 = Self::encode(&mut self.app_enc, appearance, mode);
        let f_pt0 = Self::encode(&mut self.sem_enc, semantic, mode);
        let (f_ps, f_pt) = self.run_sabs(f_ps0, f_pt0, mask_mode, mode);
        Ok(ContentFeatures {
            appearance: Self::content(&mut self.conv_a, &f_ps, mode),
            semantic: Self::content(&mut self.conv_s, &f_pt, mode),
        })
    }

    /// The pathway codes entering the first attention block, for tests.
    pub fn encode_pathways(
        &mut self,
        appearance: &Array4<S>,
        semantic: &Array4<S>,
    ) -> crate::Result<(Array4<S>, Array4<S>)> {
        self.check_input(appearance, semantic)?;
        Ok((
            Self::encode(&mut self.app_enc, appearance, Mode::Eval),
            Self::encode(&mut self.sem_enc, semantic, Mode::Eval),
        ))
    }
}

impl<S: Scalar> Params<S> for Generator<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, S>)) {
        for (i, b) in self.app_enc.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("app_enc.{i}")), f);
        }
        for (i, b) in self.sem_enc.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("sem_enc.{i}")), f);
        }
        for (i, b) in self.sabs.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("sab.{i}")), f);
        }
        for (i, b) in self.conv_a.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("conv_a.{i}")), f);
        }
        for (i, b) in self.conv_s.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("conv_s.{i}")), f);
        }
        for (i, b) in self.dec.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("dec.{i}")), f);
        }
        self.out_conv.visit_params(&join(prefix, "out"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(BufSlot<'_, S>)) {
        for (i, b) in self.app_enc.iter_mut().enumerate() {
            b.visit_buffers(&join(prefix, &format!("app_enc.{i}")), f);
        }
        for (i, b) in self.sem_enc.iter_mut().enumerate() {
            b.visit_buffers(&join(prefix, &format!("sem_enc.{i}")), f);
        }
        for (i, b) in self.sabs.iter_mut().enumerate() {
            b.visit_buffers(&join(prefix, &format!("sab.{i}")), f);
        }
        for (i, b) in self.conv_a.iter_mut().enumerate() {
            b.visit_buffers(&join(prefix, &format!("conv_a.{i}")), f);
        }
        for (i, b) in self.conv_s.iter_mut().enumerate() {
            b.visit_buffers(&join(prefix, &format!("conv_s.{i}")), f);
        }
        for (i, b) in self.dec.iter_mut().enumerate() {
            b.visit_buffers(&join(prefix, &format!("dec.{i}")), f);
        }
    }
}
