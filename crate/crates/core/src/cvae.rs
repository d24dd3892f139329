//! Conditional VAE with a multi-gaussian latent prior, trained task by task.
//!
//! Variants differ in how the class reaches the networks and which decoder
//! parameters are shared across tasks:
//!
//! | variant | prior      | conditioning         | decoder                          |
//! |---------|------------|----------------------|----------------------------------|
//! | CEO     | `N(0, I)`  | class embeddings     | shared                           |
//! | FO      | `N(μ_y, I)`| none                 | shared                           |
//! | FOD     | `N(μ_y, I)`| none                 | shared body, per-task last weight and biases |
//! | FODCE   | `N(μ_y, I)`| class embeddings     | as FOD                           |
//! | CGIL    | `N(0, I)`  | one model per class  | one decoder per class            |
//!
//! The upper-bound baseline keeps raw features and never builds a model.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis, Ix1, Ix2, Zip};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::dataio::ClasswiseStats;
use crate::error::{check_dim, Error, Result};
use crate::nn::{Activation, AdamConfig, DenseLayer, Mlp, Moments};
use crate::nullspace::NullSpaceState;
use crate::priors::PriorBank;
use crate::rng::{rng_for, std_normal, Rng};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;
pub const EMBED_INIT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "ceo")]
    Ceo,
    #[serde(rename = "fo")]
    Fo,
    #[serde(rename = "fod")]
    Fod,
    #[serde(rename = "fodce")]
    Fodce,
    #[serde(rename = "cgil")]
    CgilPerClass,
    #[serde(rename = "upper-bound")]
    UpperBound,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Ceo,
        Variant::Fo,
        Variant::Fod,
        Variant::Fodce,
        Variant::CgilPerClass,
        Variant::UpperBound,
    ];

    pub fn uses_embeddings(self) -> bool {
        matches!(self, Variant::Ceo | Variant::Fodce)
    }

    pub fn uses_heads(self) -> bool {
        matches!(self, Variant::Fod | Variant::Fodce)
    }

    /// Whether class means come from the prior bank rather than `N(0, I)`.
    pub fn uses_class_prior(self) -> bool {
        matches!(self, Variant::Fo | Variant::Fod | Variant::Fodce)
    }

    /// Variants with one conditional model shared by every class.
    pub fn is_shared_vae(self) -> bool {
        matches!(self, Variant::Ceo | Variant::Fo | Variant::Fod | Variant::Fodce)
    }

    fn tag(self) -> u8 {
        Variant::ALL.iter().position(|&v| v == self).unwrap() as u8
    }

    fn from_tag(t: u8) -> Result<Self> {
        Variant::ALL
            .get(t as usize)
            .copied()
            .ok_or_else(|| Error::Malformed(format!("variant tag {t}")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Ceo => "ceo",
            Variant::Fo => "fo",
            Variant::Fod => "fod",
            Variant::Fodce => "fodce",
            Variant::CgilPerClass => "cgil",
            Variant::UpperBound => "upper-bound",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ceo" | "vae-ceo" => Ok(Variant::Ceo),
            "fo" | "vae-fo" => Ok(Variant::Fo),
            "fod" | "vae-fod" => Ok(Variant::Fod),
            "fodce" | "vae-fodce" => Ok(Variant::Fodce),
            "cgil" | "cgil-per-class" | "vae-cgil" => Ok(Variant::CgilPerClass),
            "upper-bound" | "upperbound" | "upper_bound" => Ok(Variant::UpperBound),
            _ => Err(Error::Config(format!("unknown variant '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaeDims {
    pub input: usize,
    pub hidden: usize,
    pub latent: usize,
    pub embed: usize,
}

impl VaeDims {
    pub fn desk() -> Self {
        Self {
            input: 64,
            hidden: 64,
            latent: 16,
            embed: 10,
        }
    }
}

/// Per-task decoder parameters: the last weight and every bias.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderHead {
    pub last_weight: Array2<f64>,
    pub biases: Vec<Array1<f64>>,
}

impl DecoderHead {
    pub fn parameter_count(&self) -> usize {
        self.last_weight.len() + self.biases.iter().map(Array1::len).sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub mu: Array2<f64>,
    /// Clamped to `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub logvar: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    variant: Variant,
    dims: VaeDims,
    pub encoder: Mlp,
    pub decoder: Mlp,
    heads: BTreeMap<usize, DecoderHead>,
    embeddings: BTreeMap<u32, Array1<f64>>,
}

/// Reconstruction and prior-matching terms, both averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub recon: f64,
    pub prior_match: f64,
    pub total: f64,
}

/// `½ Σ_d (σ² + (μ − m)² − 1 − log σ²)` for one posterior against `N(m, I)`.
pub fn prior_match_kld(mu: ArrayView1<f64>, logvar: ArrayView1<f64>, target: ArrayView1<f64>) -> Result<f64> {
    check_dim("kld logvar", mu.len(), logvar.len())?;
    check_dim("kld target", mu.len(), target.len())?;
    let mut s = 0.0;
    for ((&m, &lv), &t) in mu.iter().zip(&logvar).zip(&target) {
        s += lv.exp() + (m - t) * (m - t) - 1.0 - lv;
    }
    Ok(0.5 * s)
}

/// Batch-averaged ELBO terms given reconstructions and posterior parameters.
pub fn elbo_terms(
    x: ArrayView2<f64>,
    x_hat: ArrayView2<f64>,
    post: &EncoderOutput,
    targets: ArrayView2<f64>,
    kappa: f64,
) -> Result<LossParts> {
    let b = x.nrows();
    check_dim("reconstruction rows", b, x_hat.nrows())?;
    check_dim("reconstruction width", x.ncols(), x_hat.ncols())?;
    check_dim("posterior rows", b, post.mu.nrows())?;
    check_dim("target rows", b, targets.nrows())?;
    if b == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let recon = (&x - &x_hat).mapv(|v| v * v).sum() / b as f64;
    let mut kld = 0.0;
    for i in 0..b {
        kld += prior_match_kld(post.mu.row(i), post.logvar.row(i), targets.row(i))?;
    }
    let prior_match = kld / b as f64;
    Ok(LossParts {
        recon,
        prior_match,
        total: recon + kappa * prior_match,
    })
}

/// `z = μ + exp(½ log σ²) ⊙ ε`.
pub fn reparameterize(out: &EncoderOutput, eps: ArrayView2<f64>) -> Result<Array2<f64>> {
    if out.mu.shape() != eps.shape() {
        return Err(Error::invalid(format!(
            "noise shape {:?} does not match latent shape {:?}",
            eps.shape(),
            out.mu.shape()
        )));
    }
    Ok(&out.mu + &(out.logvar.mapv(|v| (0.5 * v).exp()) * eps))
}

/// `n` draws from `N(mean, I)`.
pub fn sample_latents(mean: ArrayView1<f64>, n: usize, rng: &mut Rng) -> Array2<f64> {
    let k = mean.len();
    let mut z = Array2::from_shape_fn((n, k), |_| std_normal(rng));
    z += &mean;
    z
}

fn standard_normal(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| std_normal(rng))
}

impl VaeModel {
    pub fn new(variant: Variant, dims: VaeDims, seed: u64) -> Result<Self> {
        if variant == Variant::UpperBound {
            return Err(Error::invalid("the upper-bound baseline has no model"));
        }
        if dims.input == 0 || dims.hidden == 0 || dims.latent == 0 {
            return Err(Error::invalid("network dimensions must be positive"));
        }
        if variant.uses_embeddings() && dims.embed == 0 {
            return Err(Error::invalid("embedding variants need a positive embedding width"));
        }
        let cond = if variant.uses_embeddings() { dims.embed } else { 0 };
        let encoder = Mlp::new(
            &[dims.input, dims.hidden, dims.hidden, 2 * dims.latent],
            cond,
            &mut rng_for(seed, "encoder-init", 0),
        );
        let decoder = Mlp::new(
            &[dims.latent, dims.hidden, dims.hidden, dims.input],
            cond,
            &mut rng_for(seed, "decoder-init", 0),
        );
        Ok(Self {
            variant,
            dims,
            encoder,
            decoder,
            heads: BTreeMap::new(),
            embeddings: BTreeMap::new(),
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn dims(&self) -> VaeDims {
        self.dims
    }

    pub fn heads(&self) -> &BTreeMap<usize, DecoderHead> {
        &self.heads
    }

    pub fn embeddings(&self) -> &BTreeMap<u32, Array1<f64>> {
        &self.embeddings
    }

    /// Creates embeddings for classes not seen before. A no-op for variants
    /// without embeddings.
    pub fn ensure_embeddings(&mut self, classes: &BTreeSet<u32>, seed: u64) {
        if !self.variant.uses_embeddings() {
            return;
        }
        for &c in classes {
            self.embeddings.entry(c).or_insert_with(|| {
                let mut rng = rng_for(seed, "embedding", u64::from(c));
                Array1::from_shape_fn(self.dims.embed, |_| rng.random_range(-EMBED_INIT..EMBED_INIT))
            });
        }
    }

    fn cond_block(&self, labels: &[u32]) -> Result<Option<Array2<f64>>> {
        if !self.variant.uses_embeddings() {
            return Ok(None);
        }
        let mut c = Array2::zeros((labels.len(), self.dims.embed));
        for (mut row, y) in c.rows_mut().into_iter().zip(labels) {
            row.assign(self.embeddings.get(y).ok_or(Error::UnknownClass(*y))?);
        }
        Ok(Some(c))
    }

    /// Decoder layers whose weights are shared across tasks and therefore
    /// protected by projection.
    pub fn protected_layers(&self) -> Vec<usize> {
        let n = self.decoder.layers().len();
        match self.variant {
            Variant::Ceo | Variant::Fo => (0..n).collect(),
            Variant::Fod | Variant::Fodce => (0..n - 1).collect(),
            Variant::CgilPerClass | Variant::UpperBound => Vec::new(),
        }
    }

    /// Input width (conditioning included) of every protected layer.
    pub fn protected_layer_dims(&self) -> BTreeMap<usize, usize> {
        self.protected_layers()
            .into_iter()
            .map(|l| (l, self.decoder.layers()[l].in_dim()))
            .collect()
    }

    pub fn encode(&self, x_norm: ArrayView2<f64>, labels: &[u32]) -> Result<EncoderOutput> {
        check_dim("encode labels", x_norm.nrows(), labels.len())?;
        let cond = self.cond_block(labels)?;
        let out = self.encoder.predict(x_norm, cond.as_ref().map(|c| c.view()))?;
        Ok(self.split_posterior(&out))
    }

    fn split_posterior(&self, out: &Array2<f64>) -> EncoderOutput {
        let k = self.dims.latent;
        EncoderOutput {
            mu: out.slice(s![.., ..k]).to_owned(),
            logvar: out.slice(s![.., k..]).mapv(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX)),
        }
    }

    /// The decoder as used for `task`: the shared network, with the task's
    /// head installed for dynamic-head variants.
    pub fn decoder_for(&self, task: usize) -> Result<Cow<'_, Mlp>> {
        if !self.variant.uses_heads() {
            return Ok(Cow::Borrowed(&self.decoder));
        }
        let head = self.heads.get(&task).ok_or(Error::UnknownTask(task))?;
        let mut dec = self.decoder.clone();
        install_head(&mut dec, head);
        Ok(Cow::Owned(dec))
    }

    pub fn decode(&self, z: ArrayView2<f64>, task: usize, labels: &[u32]) -> Result<Array2<f64>> {
        check_dim("decode labels", z.nrows(), labels.len())?;
        let dec = self.decoder_for(task)?;
        let cond = self.cond_block(labels)?;
        dec.predict(z, cond.as_ref().map(|c| c.view()))
    }

    /// Loss of one batch with the given reparameterization noise.
    pub fn vae_loss(
        &self,
        x_norm: ArrayView2<f64>,
        labels: &[u32],
        task: usize,
        bank: &PriorBank,
        eps: ArrayView2<f64>,
        kappa: f64,
    ) -> Result<LossParts> {
        let post = self.encode(x_norm, labels)?;
        let z = reparameterize(&post, eps)?;
        let x_hat = self.decode(z.view(), task, labels)?;
        let targets = prior_targets(bank, labels, self.dims.latent)?;
        elbo_terms(x_norm, x_hat.view(), &post, targets.view(), kappa)
    }

    pub fn parameter_count(&self) -> usize {
        self.encoder.parameter_count()
            + self.decoder.parameter_count()
            + self.heads.values().map(DecoderHead::parameter_count).sum::<usize>()
            + self.embeddings.values().map(Array1::len).sum::<usize>()
    }

    pub fn encode_checkpoint(&self, w: &mut Writer, bank_hash: u64) {
        w.u8(self.variant.tag());
        for d in [self.dims.input, self.dims.hidden, self.dims.latent, self.dims.embed] {
            w.len_prefixed(d);
        }
        w.u64(bank_hash);
        self.encoder.encode(w);
        self.decoder.encode(w);
        w.len_prefixed(self.heads.len());
        for (&t, h) in &self.heads {
            w.len_prefixed(t);
            w.matrix(&h.last_weight);
            w.len_prefixed(h.biases.len());
            for b in &h.biases {
                w.vector(b);
            }
        }
        w.len_prefixed(self.embeddings.len());
        for (&c, e) in &self.embeddings {
            w.u32(c);
            w.vector(e);
        }
    }

    /// Returns the model and the hash of the prior bank it was saved with.
    pub fn decode_checkpoint(r: &mut Reader<'_>) -> Result<(Self, u64)> {
        let variant = Variant::from_tag(r.u8()?)?;
        let dims = VaeDims {
            input: r.len_prefixed()?,
            hidden: r.len_prefixed()?,
            latent: r.len_prefixed()?,
            embed: r.len_prefixed()?,
        };
        let bank_hash = r.u64()?;
        let encoder = Mlp::decode(r)?;
        let decoder = Mlp::decode(r)?;
        let mut heads = BTreeMap::new();
        for _ in 0..r.len_prefixed()? {
            let t = r.len_prefixed()?;
            let last_weight = r.matrix()?;
            let biases = (0..r.len_prefixed()?).map(|_| r.vector()).collect::<Result<Vec<_>>>()?;
            heads.insert(t, DecoderHead { last_weight, biases });
        }
        let mut embeddings = BTreeMap::new();
        for _ in 0..r.len_prefixed()? {
            let c = r.u32()?;
            embeddings.insert(c, r.vector()?);
        }
        let model = Self {
            variant,
            dims,
            encoder,
            decoder,
            heads,
            embeddings,
        };
        model.validate()?;
        Ok((model, bank_hash))
    }

    fn validate(&self) -> Result<()> {
        check_dim("encoder input", self.dims.input, self.encoder.input_dim())?;
        check_dim("encoder output", 2 * self.dims.latent, self.encoder.output_dim())?;
        check_dim("decoder input", self.dims.latent, self.decoder.input_dim())?;
        check_dim("decoder output", self.dims.input, self.decoder.output_dim())?;
        let n = self.decoder.layers().len();
        for h in self.heads.values() {
            let last = &self.decoder.layers()[n - 1];
            if h.last_weight.shape() != last.weight.shape() || h.biases.len() != n {
                return Err(Error::Malformed("decoder head shape".into()));
            }
            for (b, l) in h.biases.iter().zip(self.decoder.layers()) {
                check_dim("decoder head bias", l.out_dim(), b.len())?;
            }
        }
        for e in self.embeddings.values() {
            check_dim("embedding", self.dims.embed, e.len())?;
        }
        Ok(())
    }

    /// Posterior means as `class_id,z_1,...,z_k` rows.
    pub fn latent_dump_csv(&self, x_norm: ArrayView2<f64>, labels: &[u32]) -> Result<String> {
        let post = self.encode(x_norm, labels)?;
        let mut out = String::new();
        for (row, y) in post.mu.rows().into_iter().zip(labels) {
            out.push_str(&y.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        Ok(out)
    }
}

fn install_head(dec: &mut Mlp, head: &DecoderHead) {
    let n = dec.layers().len();
    for (layer, b) in dec.layers_mut().iter_mut().zip(&head.biases) {
        layer.bias.assign(b);
    }
    dec.layers_mut()[n - 1].weight.assign(&head.last_weight);
}

fn fresh_head(decoder: &Mlp, rng: &mut Rng) -> DecoderHead {
    let last = &decoder.layers()[decoder.layers().len() - 1];
    let init = DenseLayer::new(last.in_dim(), last.out_dim(), Activation::Identity, rng);
    DecoderHead {
        last_weight: init.weight,
        biases: decoder.layers().iter().map(|l| Array1::zeros(l.out_dim())).collect(),
    }
}

/// Stacked prior means for a batch of labels.
pub fn prior_targets(bank: &PriorBank, labels: &[u32], latent: usize) -> Result<Array2<f64>> {
    check_dim("prior bank latent", latent, bank.latent_dim())?;
    let mut t = Array2::zeros((labels.len(), latent));
    for (mut row, y) in t.rows_mut().into_iter().zip(labels) {
        row.assign(bank.mean(*y).ok_or(Error::UnknownClass(*y))?);
    }
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Rate for the encoder, embeddings, heads and unprojected decoder.
    pub lr: f64,
    /// Decoder rate once gradients are projected.
    pub lr_projected: f64,
    pub kappa: f64,
    /// Skip every decoder update after the first task.
    pub frozen_decoder: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr: 5e-4,
            lr_projected: 5e-5,
            kappa: 1.0,
            frozen_decoder: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub epoch_losses: Vec<LossParts>,
    pub projected_layers: Vec<usize>,
    pub decoder_lr: f64,
}

/// Per-layer update rules for the decoder during one task.
#[derive(Debug, Clone)]
struct DecoderPlan {
    weight: Vec<Option<f64>>,
    bias: Vec<Option<f64>>,
    projector: Vec<Option<Array2<f64>>>,
}

fn plan_decoder(
    model: &VaeModel,
    task: usize,
    nullspace: Option<&NullSpaceState>,
    cfg: &TrainConfig,
) -> DecoderPlan {
    let n = model.decoder.layers().len();
    let protected = model.protected_layers();
    let heads = model.variant.uses_heads();
    let frozen = cfg.frozen_decoder && task > 0;

    let mut projector = vec![None; n];
    if !frozen {
        if let Some(ns) = nullspace {
            for &l in &protected {
                if let Some(p) = ns.projector(l) {
                    projector[l] = Some(p.projector.clone());
                }
            }
        }
    }
    let projecting = projector.iter().any(Option::is_some);
    let shared_lr = if projecting { cfg.lr_projected } else { cfg.lr };

    let mut weight = vec![None; n];
    let mut bias = vec![None; n];
    for l in 0..n {
        let head_weight = heads && l == n - 1;
        weight[l] = if head_weight {
            Some(cfg.lr)
        } else if frozen {
            None
        } else {
            Some(shared_lr)
        };
        bias[l] = if heads {
            Some(cfg.lr)
        } else if frozen || (nullspace.is_some() && task > 0) {
            // shared biases cannot be projected, so they stop with task 1
            None
        } else {
            Some(cfg.lr)
        };
    }
    DecoderPlan {
        weight,
        bias,
        projector,
    }
}

struct Optimizer {
    step: u64,
    enc: Vec<(Moments<Ix2>, Moments<Ix1>)>,
    dec: Vec<(Moments<Ix2>, Moments<Ix1>)>,
    emb: BTreeMap<u32, Moments<Ix1>>,
}

impl Optimizer {
    fn new(encoder: &Mlp, decoder: &Mlp, trained_embeddings: &BTreeMap<u32, Array1<f64>>) -> Self {
        let moments = |m: &Mlp| {
            m.layers()
                .iter()
                .map(|l| (Moments::zeros_like(&l.weight), Moments::zeros_like(&l.bias)))
                .collect()
        };
        Self {
            step: 0,
            enc: moments(encoder),
            dec: moments(decoder),
            emb: trained_embeddings
                .iter()
                .map(|(&c, e)| (c, Moments::zeros_like(e)))
                .collect(),
        }
    }
}

/// Trains encoder and decoder on one task's (normalized) data.
///
/// `nullspace` carries the statistics of earlier tasks; when it holds
/// projectors, every shared decoder weight gradient is projected before it
/// reaches Adam and the decoder switches to `lr_projected`. Passing `Some`
/// also marks the run as using projection, which freezes shared decoder
/// biases after the first task.
pub fn train_task(
    model: &mut VaeModel,
    task: usize,
    x_norm: &Array2<f64>,
    labels: &[u32],
    bank: &PriorBank,
    nullspace: Option<&NullSpaceState>,
    cfg: &TrainConfig,
) -> Result<TrainStats> {
    check_dim("training features", model.dims.input, x_norm.ncols())?;
    check_dim("training labels", x_norm.nrows(), labels.len())?;
    if labels.is_empty() {
        return Err(Error::invalid("empty task"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let classes: BTreeSet<u32> = labels.iter().copied().collect();
    for &c in &classes {
        if !bank.contains(c) {
            return Err(Error::UnknownClass(c));
        }
    }
    if model.variant.uses_heads() {
        if model.heads.contains_key(&task) {
            return Err(Error::HeadCollision(task));
        }
        let head = fresh_head(&model.decoder, &mut rng_for(cfg.seed, "head-init", task as u64));
        model.heads.insert(task, head);
    }
    model.ensure_embeddings(&classes, cfg.seed);

    let plan = plan_decoder(model, task, nullspace, cfg);
    let mut decoder = model.decoder_for(task)?.into_owned();
    let trained_emb: BTreeMap<u32, Array1<f64>> = classes
        .iter()
        .filter_map(|c| model.embeddings.get(c).map(|e| (*c, e.clone())))
        .collect();
    let mut opt = Optimizer::new(&model.encoder, &decoder, &trained_emb);
    let enc_cfg = AdamConfig::with_lr(cfg.lr);
    let targets_all = prior_targets(bank, labels, model.dims.latent)?;

    let mut rng = rng_for(cfg.seed, "train", task as u64);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossParts {
            recon: 0.0,
            prior_match: 0.0,
            total: 0.0,
        };
        for chunk in order.chunks(cfg.batch_size) {
            let x = x_norm.select(Axis(0), chunk);
            let y: Vec<u32> = chunk.iter().map(|&i| labels[i]).collect();
            let targets = targets_all.select(Axis(0), chunk);
            let eps = standard_normal(chunk.len(), model.dims.latent, &mut rng);
            let parts = batch_step(model, &mut decoder, &plan, &mut opt, &enc_cfg, cfg, &x, &y, &targets, &eps)?;
            let w = chunk.len() as f64;
            sum.recon += parts.recon * w;
            sum.prior_match += parts.prior_match * w;
            sum.total += parts.total * w;
        }
        let n = labels.len() as f64;
        epoch_losses.push(LossParts {
            recon: sum.recon / n,
            prior_match: sum.prior_match / n,
            total: sum.total / n,
        });
    }

    if model.variant.uses_heads() {
        let n = decoder.layers().len();
        let head = model.heads.get_mut(&task).expect("head inserted above");
        head.last_weight.assign(&decoder.layers()[n - 1].weight);
        for (b, l) in head.biases.iter_mut().zip(decoder.layers()) {
            b.assign(&l.bias);
        }
        for l in 0..n - 1 {
            model.decoder.layers_mut()[l].weight.assign(&decoder.layers()[l].weight);
        }
    } else {
        model.decoder = decoder;
    }

    let projected_layers = (0..plan.projector.len()).filter(|&l| plan.projector[l].is_some()).collect::<Vec<_>>();
    let decoder_lr = if projected_layers.is_empty() { cfg.lr } else { cfg.lr_projected };
    Ok(TrainStats {
        epoch_losses,
        projected_layers,
        decoder_lr,
    })
}

#[allow(clippy::too_many_arguments)]
fn batch_step(
    model: &mut VaeModel,
    decoder: &mut Mlp,
    plan: &DecoderPlan,
    opt: &mut Optimizer,
    enc_cfg: &AdamConfig,
    cfg: &TrainConfig,
    x: &Array2<f64>,
    labels: &[u32],
    targets: &Array2<f64>,
    eps: &Array2<f64>,
) -> Result<LossParts> {
    let b = x.nrows() as f64;
    let k = model.dims.latent;
    let cond = model.cond_block(labels)?;
    let cond_view = cond.as_ref().map(|c| c.view());

    let enc_trace = model.encoder.forward(x.view(), cond_view)?;
    let raw_logvar = enc_trace.output.slice(s![.., k..]).to_owned();
    let post = model.split_posterior(&enc_trace.output);
    let sigma = post.logvar.mapv(|v| (0.5 * v).exp());
    let z = &post.mu + &(&sigma * eps);
    let dec_trace = decoder.forward(z.view(), cond_view)?;
    let x_hat = &dec_trace.output;
    let parts = elbo_terms(x.view(), x_hat.view(), &post, targets.view(), cfg.kappa)?;

    let grad_xhat = (x_hat - x) * (2.0 / b);
    let dec_grads = decoder.backward(&dec_trace, grad_xhat.view())?;
    let gz = &dec_grads.input;
    let g_mu = gz + &((&post.mu - targets) * (cfg.kappa / b));
    let mut g_lv = gz * eps * &sigma * 0.5 + &(post.logvar.mapv(|v| v.exp() - 1.0) * (0.5 * cfg.kappa / b));
    Zip::from(&mut g_lv).and(&raw_logvar).for_each(|g, &r| {
        if !(LOGVAR_MIN..=LOGVAR_MAX).contains(&r) {
            *g = 0.0;
        }
    });
    if !g_mu.iter().chain(g_lv.iter()).all(|v| v.is_finite()) {
        return Err(Error::invalid("non-finite gradient during training"));
    }
    let g_out = concatenate![Axis(1), g_mu.view(), g_lv.view()];
    let enc_grads = model.encoder.backward(&enc_trace, g_out.view())?;

    opt.step += 1;
    let step = opt.step;
    for ((layer, g), (mw, mb)) in model.encoder.layers_mut().iter_mut().zip(&enc_grads.layers).zip(&mut opt.enc) {
        mw.update(&mut layer.weight, &g.weight, step, enc_cfg)?;
        mb.update(&mut layer.bias, &g.bias, step, enc_cfg)?;
    }
    for (l, ((layer, g), (mw, mb))) in decoder
        .layers_mut()
        .iter_mut()
        .zip(&dec_grads.layers)
        .zip(&mut opt.dec)
        .enumerate()
    {
        if let Some(lr) = plan.weight[l] {
            let gw = match &plan.projector[l] {
                Some(p) => g.weight.dot(p),
                None => g.weight.clone(),
            };
            match &plan.projector[l] {
                Some(p) => {
                    // Adam's per-element scaling leaves the subspace, so the step is projected again
                    let before = layer.weight.clone();
                    mw.update(&mut layer.weight, &gw, step, &AdamConfig::with_lr(lr))?;
                    layer.weight = &before + &(&layer.weight - &before).dot(p);
                }
                None => mw.update(&mut layer.weight, &gw, step, &AdamConfig::with_lr(lr))?,
            }
        }
        if let Some(lr) = plan.bias[l] {
            mb.update(&mut layer.bias, &g.bias, step, &AdamConfig::with_lr(lr))?;
        }
    }
    if model.variant.uses_embeddings() {
        let mut g_emb: BTreeMap<u32, Array1<f64>> =
            opt.emb.keys().map(|&c| (c, Array1::zeros(model.dims.embed))).collect();
        for cg in [enc_grads.cond.as_ref(), dec_grads.cond.as_ref()].into_iter().flatten() {
            for (row, y) in cg.rows().into_iter().zip(labels) {
                if let Some(acc) = g_emb.get_mut(y) {
                    *acc += &row;
                }
            }
        }
        for (c, m) in opt.emb.iter_mut() {
            let e = model.embeddings.get_mut(c).expect("embedding created before training");
            m.update(e, &g_emb[c], step, enc_cfg)?;
        }
    }
    Ok(parts)
}

/// Feeds decoder-layer inputs of a finished task into the null-space state:
/// `passes` reparameterized posterior draws per record, plus the same number
/// of prior draws `z ∼ N(μ_y, I)` spread evenly over the task's records.
#[allow(clippy::too_many_arguments)]
pub fn update_nullspace(
    model: &VaeModel,
    task: usize,
    x_norm: &Array2<f64>,
    labels: &[u32],
    bank: &PriorBank,
    state: &mut NullSpaceState,
    passes: usize,
    seed: u64,
) -> Result<()> {
    let layers: Vec<usize> = state.layer_ids().collect();
    let decoder = model.decoder_for(task)?;
    let cond = model.cond_block(labels)?;
    let post = model.encode(x_norm.view(), labels)?;
    let targets = prior_targets(bank, labels, model.dims.latent)?;
    let mut rng = rng_for(seed, "nullspace", task as u64);
    let n = labels.len();
    for _ in 0..passes {
        let eps = standard_normal(n, model.dims.latent, &mut rng);
        let z_post = reparameterize(&post, eps.view())?;
        let z_prior = &targets + &standard_normal(n, model.dims.latent, &mut rng);
        for z in [z_post, z_prior] {
            let trace = decoder.forward(z.view(), cond.as_ref().map(|c| c.view()))?;
            for &l in &layers {
                let input = trace
                    .inputs
                    .get(l)
                    .ok_or_else(|| Error::invalid(format!("decoder has no layer {l}")))?;
                state.accumulate_covariance(l, input.view())?;
            }
        }
    }
    for l in layers {
        state.compute_projector(l)?;
    }
    Ok(())
}

/// `n` synthetic samples of class `y`, decoded with `task`'s head and mapped
/// back to feature space when `stats` is given.
pub fn generate(
    model: &VaeModel,
    bank: &PriorBank,
    stats: Option<&ClasswiseStats>,
    y: u32,
    n: usize,
    seed: u64,
    task: usize,
) -> Result<Array2<f64>> {
    let mean = bank.mean(y).ok_or(Error::UnknownClass(y))?;
    let mut rng = rng_for(seed, "generate", u64::from(y));
    let z = sample_latents(mean.view(), n, &mut rng);
    let x_hat = model.decode(z.view(), task, &vec![y; n])?;
    match stats {
        None => Ok(x_hat),
        Some(st) => {
            let mut out = x_hat;
            for mut row in out.rows_mut() {
                let back = st.denormalize(row.view(), y)?;
                row.assign(&back);
            }
            Ok(out)
        }
    }
}

/// Relative L2 change between two output batches, `‖a − b‖ / ‖a‖`.
pub fn relative_drift(before: &Array2<f64>, after: &Array2<f64>) -> Result<f64> {
    if before.shape() != after.shape() {
        return Err(Error::Incompatible("drift batches differ in shape".into()));
    }
    let num = (before - after).mapv(|v| v * v).sum().sqrt();
    let den = before.mapv(|v| v * v).sum().sqrt();
    Ok(if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    })
}
