//! Person re-identification harness: a small identity classifier whose
//! penultimate layer serves as the embedding, Euclidean and learned
//! (KISSME-style) distances, single-query retrieval scoring, and
//! generator-based training-set augmentation.

use std::path::Path;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_manifest, write_record, Dataset, Manifest, Record};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::nn::{
    softmax_cross_entropy, Adam, ConvBlock, GlobalAvgPool, LeakyRelu, Linear, Mode, NormKind,
    ParamSlot, Params, Scalar,
};
use crate::rng::derive;
use crate::trainer::assemble_batch;

/// Ridge added to a singular moment matrix before the second inversion try.
pub const KISSME_RIDGE: f64 = 1e-6;

/// Identity-classifier hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReidConfig {
    pub embed_dim: usize,
    pub base_channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for ReidConfig {
    fn default() -> Self {
        ReidConfig {
            embed_dim: 32,
            base_channels: 8,
            epochs: 15,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            seed: 1,
        }
    }
}

impl ReidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Convolutional identity classifier. Three stride-2 stages, global average
/// pooling, a linear embedding layer with LeakyReLU, and a linear classifier
/// on top. The activated embedding — the classifier's input — is the feature
/// used for retrieval.
pub struct Embedder<S: Scalar> {
    convs: Vec<ConvBlock<S>>,
    pool: GlobalAvgPool,
    embed: Linear<S>,
    act: LeakyRelu<S>,
    classify: Linear<S>,
    embed_dim: usize,
    classes: usize,
}

impl<S: Scalar> Embedder<S> {
    pub fn new(cfg: &ReidConfig, classes: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        if classes < 2 {
            return Err(Error::Data(format!(
                "identity classification needs at least 2 identities, got {classes}"
            )));
        }
        let c = cfg.base_channels;
        let widths = [(3, c), (c, 2 * c), (2 * c, 4 * c)];
        let convs = widths
            .iter()
            .map(|&(i, o)| ConvBlock::new(i, o, 3, 2, 1, Some(NormKind::Instance), Some(0.2), rng))
            .collect();
        Ok(Embedder {
            convs,
            pool: GlobalAvgPool::new(),
            embed: Linear::new(4 * c, cfg.embed_dim, rng),
            act: LeakyRelu::new(0.2),
            classify: Linear::new(cfg.embed_dim, classes, rng),
            embed_dim: cfg.embed_dim,
            classes,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn features(&mut self, images: &Array4<S>, mode: Mode) -> Array2<S> {
        let mut x = images.clone();
        for conv in &mut self.convs {
            x = conv.forward(&x, mode);
        }
        let pooled = self.pool.forward(&x);
        self.act.forward(&self.embed.forward(&pooled, mode), mode)
    }

    /// Class logits with caches armed for [`Self::backward`].
    pub fn forward_train(&mut self, images: &Array4<S>) -> Array2<S> {
        let emb = self.features(images, Mode::Train);
        self.classify.forward(&emb, Mode::Train)
    }

    /// Retrieval embeddings, one row per image (evaluation mode, no caches).
    pub fn embed_eval(&mut self, images: &Array4<S>) -> Array2<f64> {
        self.features(images, Mode::Eval).mapv(|v| v.to_f64())
    }

    /// Class logits in evaluation mode.
    pub fn logits_eval(&mut self, images: &Array4<S>) -> Array2<S> {
        let emb = self.features(images, Mode::Eval);
        self.classify.forward(&emb, Mode::Eval)
    }

    pub fn backward(&mut self, g_logits: &Array2<S>) {
        let g_emb = self.classify.backward(g_logits);
        let g_pre = self.act.backward(&g_emb);
        let g_pooled = self.embed.backward(&g_pre);
        let mut g = self.pool.backward(&g_pooled);
        for conv in self.convs.iter_mut().rev() {
            g = conv.backward(&g);
        }
    }
}

impl<S: Scalar> Params<S> for Embedder<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, S>)) {
        for (i, conv) in self.convs.iter_mut().enumerate() {
            conv.visit_params(&crate::nn::join(prefix, &format!("conv.{i}")), f);
        }
        self.embed.visit_params(&crate::nn::join(prefix, "embed"), f);
        self.classify
            .visit_params(&crate::nn::join(prefix, "classify"), f);
    }
}

/// Images-only batch plus class targets for the identity classifier.
fn class_batch<S: Scalar>(
    ds: &Dataset,
    indices: &[usize],
    class_of: impl Fn(u32) -> usize,
) -> (Array4<S>, Vec<usize>) {
    let (h, w) = (ds.height, ds.width);
    let mut images = Array4::<S>::zeros((indices.len(), 3, h, w));
    let mut targets = Vec::with_capacity(indices.len());
    for (bi, &i) in indices.iter().enumerate() {
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    images[[bi, c, y, x]] = S::from_f64(ds.samples[i].image[[c, y, x]] as f64);
                }
            }
        }
        targets.push(class_of(ds.records[i].identity));
    }
    (images, targets)
}

/// Trains the classifier on every sample of `ds`. Returns the embedder and
/// its final whole-set training accuracy.
pub fn train_ide<S: Scalar>(ds: &Dataset, cfg: &ReidConfig) -> Result<(Embedder<S>, f64)> {
    cfg.validate()?;
    let by_id = ds.by_identity();
    if by_id.len() < 2 {
        return Err(Error::Data(format!(
            "identity classification needs at least 2 identities, got {}",
            by_id.len()
        )));
    }
    let ids: Vec<u32> = by_id.keys().copied().collect();
    let class_of = |id: u32| ids.binary_search(&id).expect("identity present");

    let mut model = Embedder::<S>::new(cfg, ids.len(), &mut derive(cfg.seed, "init/reid"))?;
    let mut opt = Adam::<S>::new(cfg.beta1, cfg.beta2);

    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut derive(cfg.seed, &format!("reid/{epoch}")));
        for chunk in order.chunks(cfg.batch_size) {
            let (images, targets) = class_batch::<S>(ds, chunk, class_of);
            step += 1;
            let logits = model.forward_train(&images);
            let (loss, g_logits) = softmax_cross_entropy(&logits, &targets);
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    term: "reid_cross_entropy".into(),
                    step,
                });
            }
            model.zero_grads();
            model.backward(&g_logits);
            opt.step(cfg.learning_rate, |f| model.visit_params("reid", f));
        }
    }

    // Final accuracy over the whole training set, largest-logit decision.
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0usize;
    for chunk in all.chunks(cfg.batch_size) {
        let (images, targets) = class_batch::<S>(ds, chunk, class_of);
        let logits = model.logits_eval(&images);
        for (row, &want) in logits.axis_iter(Axis(0)).zip(&targets) {
            let got = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(i, _)| i)
                .expect("at least one class");
            correct += usize::from(got == want);
        }
    }
    Ok((model, correct as f64 / ds.len() as f64))
}

/// Retrieval distance: plain Euclidean or the learned KISSME form.
#[derive(Debug, Clone)]
pub enum MetricModel {
    Euclidean,
    Kissme { m: Array2<f64> },
}

impl MetricModel {
    pub fn kind(&self) -> &'static str {
        match self {
            MetricModel::Euclidean => "euclidean",
            MetricModel::Kissme { .. } => "kissme",
        }
    }
}

/// `euclidean`: ‖x−y‖₂. `kissme`: (x−y)ᵀ M (x−y).
pub fn distance(metric: &MetricModel, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch {
            context: "embedding distance".into(),
            expected: format!("{}-dim", x.len()),
            found: format!("{}-dim", y.len()),
        });
    }
    match metric {
        MetricModel::Euclidean => Ok(x
            .iter()
            .zip(y)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()),
        MetricModel::Kissme { m } => {
            if m.nrows() != x.len() {
                return Err(Error::ShapeMismatch {
                    context: "kissme matrix".into(),
                    expected: format!("{0}x{0}", x.len()),
                    found: format!("{}x{}", m.nrows(), m.ncols()),
                });
            }
            let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
            let mut s = 0.0;
            for (i, di) in d.iter().enumerate() {
                for (j, dj) in d.iter().enumerate() {
                    s += di * m[[i, j]] * dj;
                }
            }
            Ok(s)
        }
    }
}

fn invert_moment(mat: &nalgebra::DMatrix<f64>, what: &str) -> Result<nalgebra::DMatrix<f64>> {
    if let Some(inv) = mat.clone().try_inverse() {
        return Ok(inv);
    }
    log::warn!("{what} moment matrix is singular; adding {KISSME_RIDGE:e} ridge");
    let ridged = mat + nalgebra::DMatrix::identity(mat.nrows(), mat.ncols()) * KISSME_RIDGE;
    ridged.try_inverse().ok_or_else(|| {
        Error::Numeric(format!(
            "{what} moment matrix is singular even after ridge regularization"
        ))
    })
}

/// Second moment of difference vectors (rows), uncentered: differences of a
/// symmetric pair population have zero mean by construction.
fn second_moment(diffs: &Array2<f64>) -> nalgebra::DMatrix<f64> {
    let (n, d) = diffs.dim();
    let mut m = nalgebra::DMatrix::zeros(d, d);
    for row in diffs.axis_iter(Axis(0)) {
        for i in 0..d {
            for j in 0..d {
                m[(i, j)] += row[i] * row[j];
            }
        }
    }
    m / n as f64
}

/// Fits the KISSME matrix `M = S_same⁻¹ − S_diff⁻¹` from same-identity and
/// different-identity embedding differences (one difference per row), then
/// projects `M` onto the positive semi-definite cone by eigenvalue clipping.
pub fn fit_kissme(same: &Array2<f64>, diff: &Array2<f64>) -> Result<MetricModel> {
    let d = same.ncols();
    if diff.ncols() != d {
        return Err(Error::ShapeMismatch {
            context: "kissme difference sets".into(),
            expected: format!("{d} columns"),
            found: format!("{} columns", diff.ncols()),
        });
    }
    for (what, n) in [("same-identity", same.nrows()), ("different-identity", diff.nrows())] {
        if n < d + 1 {
            return Err(Error::Data(format!(
                "kissme needs at least {} {what} difference samples for {d}-dim embeddings, got {n}",
                d + 1
            )));
        }
    }
    let inv_same = invert_moment(&second_moment(same), "same-identity")?;
    let inv_diff = invert_moment(&second_moment(diff), "different-identity")?;
    let raw = &inv_same - &inv_diff;
    let sym = (&raw + raw.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let projected =
        &eig.eigenvectors * nalgebra::DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    let m = Array2::from_shape_fn((d, d), |(i, j)| projected[(i, j)]);
    Ok(MetricModel::Kissme { m })
}

/// Single-query retrieval scores.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RetrievalScores {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
}

/// CMC rank-1/5/10 and mean average precision over single queries. Ties are
/// broken by gallery order (lower index wins), so results are reproducible.
pub fn evaluate_reid(
    metric: &MetricModel,
    query: &Array2<f64>,
    query_ids: &[u32],
    gallery: &Array2<f64>,
    gallery_ids: &[u32],
) -> Result<RetrievalScores> {
    let (nq, d) = query.dim();
    let (ng, dg) = gallery.dim();
    assert_eq!(nq, query_ids.len(), "query id count");
    assert_eq!(ng, gallery_ids.len(), "gallery id count");
    if ng == 0 {
        return Err(Error::Data("retrieval gallery is empty".into()));
    }
    if nq == 0 {
        return Err(Error::Data("retrieval query set is empty".into()));
    }
    if d != dg {
        return Err(Error::ShapeMismatch {
            context: "retrieval embeddings".into(),
            expected: format!("{d}-dim"),
            found: format!("{dg}-dim"),
        });
    }
    for &qid in query_ids {
        if !gallery_ids.contains(&qid) {
            return Err(Error::Data(format!(
                "query identity {qid} does not appear in the gallery"
            )));
        }
    }

    let q_rows: Vec<&[f64]> = query
        .axis_iter(Axis(0))
        .map(|r| r.to_slice().expect("standard layout"))
        .collect();
    let g_rows: Vec<&[f64]> = gallery
        .axis_iter(Axis(0))
        .map(|r| r.to_slice().expect("standard layout"))
        .collect();

    let mut hits = [0usize; 3]; // ranks 1, 5, 10
    let mut sum_ap = 0.0;
    for (q, qrow) in q_rows.iter().enumerate() {
        let mut order: Vec<(f64, usize)> = Vec::with_capacity(ng);
        for (g, grow) in g_rows.iter().enumerate() {
            order.push((distance(metric, qrow, grow)?, g));
        }
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite distance").then(a.1.cmp(&b.1)));

        let first = order
            .iter()
            .position(|&(_, g)| gallery_ids[g] == query_ids[q])
            .expect("query identity checked against gallery");
        for (hi, r) in [1usize, 5, 10].iter().enumerate() {
            if first < *r {
                hits[hi] += 1;
            }
        }

        let mut found = 0usize;
        let mut ap = 0.0;
        for (pos, &(_, g)) in order.iter().enumerate() {
            if gallery_ids[g] == query_ids[q] {
                found += 1;
                ap += found as f64 / (pos + 1) as f64;
            }
        }
        sum_ap += ap / found as f64;
    }
    let frac = |h: usize| h as f64 / nq as f64;
    Ok(RetrievalScores {
        rank1: frac(hits[0]),
        rank5: frac(hits[1]),
        rank10: frac(hits[2]),
        map: sum_ap / nq as f64,
    })
}

/// Writes an augmented copy of `ds` into `out_split_dir`: every original
/// record, plus `alpha - 1` synthesized views per original. Each synthesized
/// view reuses the source record's identity and the guiding record's pose,
/// parsing, and mask, and is flagged `synthetic`. Target poses are drawn
/// uniformly over the other records, any identity.
pub fn augment<S: Scalar>(
    gen: &mut Generator<S>,
    ds: &Dataset,
    out_split_dir: &Path,
    alpha: usize,
    seed: u64,
) -> Result<Manifest> {
    if alpha == 0 {
        return Err(Error::Config("augmentation factor must be at least 1".into()));
    }
    let n = ds.len();
    let mut records: Vec<Record> = ds.records.clone();
    for (i, rec) in ds.records.iter().enumerate() {
        write_record(
            out_split_dir,
            &rec.stem,
            &ds.samples[i].image,
            &ds.samples[i].parsing,
            &ds.samples[i].mask,
        )?;
    }

    // (source, guide, stem) for every synthesized view.
    let mut jobs: Vec<(usize, usize, String)> = Vec::new();
    for (i, rec) in ds.records.iter().enumerate() {
        for k in 1..alpha {
            let mut rng = derive(seed, &format!("augment/{}/{k}", rec.stem));
            let mut t = rng.gen_range(0..n - 1);
            if t >= i {
                t += 1;
            }
            jobs.push((i, t, format!("{}_s{k:02}", rec.stem)));
        }
    }

    for chunk in jobs.chunks(8) {
        let pairs: Vec<(usize, usize)> = chunk.iter().map(|&(i, t, _)| (i, t)).collect();
        let batch = assemble_batch::<S>(ds, &pairs, false)?;
        let fake = gen.generate(&batch.appearance, &batch.semantic)?;
        for (bi, &(i, t, ref stem)) in chunk.iter().enumerate() {
            let (h, w) = (ds.height, ds.width);
            let image = Array3::from_shape_fn((3, h, w), |(c, y, x)| {
                fake[[bi, c, y, x]].to_f64() as f32
            });
            write_record(
                out_split_dir,
                stem,
                &image,
                &ds.samples[t].parsing,
                &ds.samples[t].mask,
            )?;
            records.push(Record {
                identity: ds.records[i].identity,
                pose: ds.records[t].pose,
                synthetic: true,
                stem: stem.clone(),
            });
        }
    }

    let manifest = Manifest {
        labels: ds.labels,
        seed: ds.seed,
        height: ds.height,
        width: ds.width,
        records,
    };
    write_manifest(out_split_dir, &manifest)?;
    Ok(manifest)
}

/// Embeddings plus identities for every sample of a dataset.
pub fn embed_dataset<S: Scalar>(
    model: &mut Embedder<S>,
    ds: &Dataset,
    batch_size: usize,
) -> (Array2<f64>, Vec<u32>) {
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut rows = Array2::<f64>::zeros((ds.len(), model.embed_dim()));
    for chunk in all.chunks(batch_size.max(1)) {
        let (images, _) = class_batch::<S>(ds, chunk, |_| 0);
        let emb = model.embed_eval(&images);
        for (bi, &i) in chunk.iter().enumerate() {
            rows.row_mut(i).assign(&emb.row(bi));
        }
    }
    let ids = ds.records.iter().map(|r| r.identity).collect();
    (rows, ids)
}

/// Splits a dataset into query (the lowest-pose record of each identity) and
/// gallery (every other record). Returns index lists.
pub fn query_gallery_split(ds: &Dataset) -> (Vec<usize>, Vec<usize>) {
    let by_id = ds.by_identity();
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    for (_, indices) in by_id {
        let q = *indices
            .iter()
            .min_by_key(|&&i| ds.records[i].pose)
            .expect("identity has records");
        query.push(q);
        for &i in &indices {
            if i != q {
                gallery.push(i);
            }
        }
    }
    (query, gallery)
}

/// Same-identity and different-identity embedding differences for KISSME:
/// every unordered same-identity pair, plus an equal number of
/// different-identity pairs drawn deterministically from `seed`.
pub fn kissme_differences(
    embeddings: &Array2<f64>,
    ids: &[u32],
    seed: u64,
) -> (Array2<f64>, Array2<f64>) {
    let n = ids.len();
    let d = embeddings.ncols();
    let mut same = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if ids[i] == ids[j] {
                same.push((i, j));
            }
        }
    }
    let mut rng = derive(seed, "kissme/diff-pairs");
    let mut diff = Vec::with_capacity(same.len());
    while diff.len() < same.len() {
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..n);
        if ids[i] != ids[j] {
            diff.push((i, j));
        }
    }
    let take = |pairs: &[(usize, usize)]| {
        Array2::from_shape_fn((pairs.len(), d), |(r, c)| {
            let (i, j) = pairs[r];
            embeddings[[i, c]] - embeddings[[j, c]]
        })
    };
    (take(&same), take(&diff))
}

/// One seed's protocol outcome.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SeedScores {
    pub seed: u64,
    pub accuracy: f64,
    #[serde(flatten)]
    pub scores: RetrievalScores,
}

/// Mean scores over seeds plus the per-seed breakdown.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolSummary {
    pub metric_kind: String,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub per_seed: Vec<SeedScores>,
}

/// Full evaluation protocol: for each seed, train the classifier on the
/// training split, embed the test split, fit the requested metric on
/// training embeddings, and score single-query retrieval on the test split.
pub fn reid_protocol<S: Scalar>(
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &ReidConfig,
    metric_kind: &str,
    seeds: &[u64],
) -> Result<ProtocolSummary> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    if !["euclidean", "kissme"].contains(&metric_kind) {
        return Err(Error::Config(format!(
            "unknown metric kind {metric_kind:?}; expected euclidean or kissme"
        )));
    }
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let run_cfg = ReidConfig { seed, ..cfg.clone() };
        let (mut model, accuracy) = train_ide::<S>(train_ds, &run_cfg)?;
        let metric = match metric_kind {
            "euclidean" => MetricModel::Euclidean,
            _ => {
                let (train_emb, train_ids) = embed_dataset(&mut model, train_ds, cfg.batch_size);
                let (same, diff) = kissme_differences(&train_emb, &train_ids, seed);
                fit_kissme(&same, &diff)?
            }
        };
        let (test_emb, test_ids) = embed_dataset(&mut model, test_ds, cfg.batch_size);
        let (q_idx, g_idx) = query_gallery_split(test_ds);
        let pick = |idx: &[usize]| {
            let rows = Array2::from_shape_fn((idx.len(), test_emb.ncols()), |(r, c)| {
                test_emb[[idx[r], c]]
            });
            let ids: Vec<u32> = idx.iter().map(|&i| test_ids[i]).collect();
            (rows, ids)
        };
        let (q_emb, q_ids) = pick(&q_idx);
        let (g_emb, g_ids) = pick(&g_idx);
        let scores = evaluate_reid(&metric, &q_emb, &q_ids, &g_emb, &g_ids)?;
        per_seed.push(SeedScores {
            seed,
            accuracy,
            scores,
        });
    }
    let n = per_seed.len() as f64;
    let mean = |f: fn(&RetrievalScores) -> f64| per_seed.iter().map(|s| f(&s.scores)).sum::<f64>() / n;
    Ok(ProtocolSummary {
        metric_kind: metric_kind.to_string(),
        rank1: mean(|s| s.rank1),
        rank5: mean(|s| s.rank5),
        rank10: mean(|s| s.rank10),
        map: mean(|s| s.map),
        per_seed,
    })
}
