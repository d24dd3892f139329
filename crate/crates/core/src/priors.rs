//! Class-conditional latent priors `N(μ_y, I)` learned by fixed-point
//! iteration.
//!
//! At the start of a task each new class gets an anchor, the mean of its
//! encoder latents. The iteration then moves the new means to
//!
//! ```text
//! μ_y ← anchor_y + λ · Σ_{y' ≠ y} (μ_y − μ_y') / max(‖μ_y − μ_y'‖², pair_floor)
//! ```
//!
//! with all reads taken from the previous iterate. The sum runs over every
//! class in the bank, but means of earlier tasks are frozen and never written.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{check_dim, Error, Result};
use crate::rng::Rng;

pub type Anchors = BTreeMap<u32, Array1<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorBank {
    latent_dim: usize,
    means: BTreeMap<u32, Array1<f64>>,
    frozen: BTreeMap<u32, bool>,
}

impl PriorBank {
    pub fn new(latent_dim: usize) -> Self {
        Self {
            latent_dim,
            means: BTreeMap::new(),
            frozen: BTreeMap::new(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn mean(&self, class: u32) -> Option<&Array1<f64>> {
        self.means.get(&class)
    }

    pub fn contains(&self, class: u32) -> bool {
        self.means.contains_key(&class)
    }

    pub fn is_frozen(&self, class: u32) -> bool {
        self.frozen.get(&class).copied().unwrap_or(false)
    }

    pub fn classes(&self) -> impl Iterator<Item = u32> + '_ {
        self.means.keys().copied()
    }

    pub fn means(&self) -> &BTreeMap<u32, Array1<f64>> {
        &self.means
    }

    pub fn active_classes(&self) -> BTreeSet<u32> {
        self.frozen.iter().filter(|(_, &f)| !f).map(|(&c, _)| c).collect()
    }

    /// Adds new classes with `μ_y⁽⁰⁾ = anchor_y`. Nothing is inserted if any
    /// class is already present.
    pub fn init_means(&mut self, anchors: &Anchors) -> Result<()> {
        for (&c, a) in anchors {
            if self.means.contains_key(&c) {
                return Err(Error::DuplicateClass(c));
            }
            check_dim("prior anchor", self.latent_dim, a.len())?;
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("anchor for class {c} is not finite")));
            }
        }
        for (&c, a) in anchors {
            self.means.insert(c, a.clone());
            self.frozen.insert(c, false);
        }
        Ok(())
    }

    /// Marks every class as belonging to a finished task.
    pub fn freeze_all(&mut self) {
        for f in self.frozen.values_mut() {
            *f = true;
        }
    }

    fn write_active(&mut self, updated: BTreeMap<u32, Array1<f64>>) {
        for (c, m) in updated {
            debug_assert!(!self.is_frozen(c));
            self.means.insert(c, m);
        }
    }

    /// Means stacked in class order, one row per class.
    pub fn matrix(&self) -> (Vec<u32>, Array2<f64>) {
        let ids: Vec<u32> = self.means.keys().copied().collect();
        let mut m = Array2::zeros((ids.len(), self.latent_dim));
        for (mut row, mu) in m.rows_mut().into_iter().zip(self.means.values()) {
            row.assign(mu);
        }
        (ids, m)
    }

    pub fn parameter_count(&self) -> usize {
        self.means.len() * self.latent_dim
    }

    pub fn encode(&self, w: &mut Writer) {
        w.len_prefixed(self.latent_dim);
        w.len_prefixed(self.means.len());
        for (&c, m) in &self.means {
            w.u32(c);
            w.u8(u8::from(self.is_frozen(c)));
            w.vector(m);
        }
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let latent_dim = r.len_prefixed()?;
        let n = r.len_prefixed()?;
        let mut bank = PriorBank::new(latent_dim);
        for _ in 0..n {
            let c = r.u32()?;
            let frozen = r.u8()? != 0;
            let m = r.vector()?;
            check_dim("bank mean", latent_dim, m.len())?;
            if bank.means.insert(c, m).is_some() {
                return Err(Error::DuplicateClass(c));
            }
            bank.frozen.insert(c, frozen);
        }
        Ok(bank)
    }

    /// FNV-1a over the encoded bank; models record it to reference the bank
    /// they were trained against.
    pub fn content_hash(&self) -> u64 {
        let mut w = Writer::new();
        self.encode(&mut w);
        w.into_bytes().iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
            (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }

    /// `class_id,m_1,...,m_k` rows for external plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (c, m) in &self.means {
            out.push_str(&c.to_string());
            for v in m {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FpiConfig {
    pub lambda: f64,
    pub eps_conv: f64,
    pub max_iter: usize,
    pub pair_floor: f64,
}

impl Default for FpiConfig {
    fn default() -> Self {
        Self {
            lambda: 900.0,
            eps_conv: 1e-5,
            max_iter: 10_000,
            pair_floor: 1e-8,
        }
    }
}

impl FpiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.eps_conv > 0.0) || self.max_iter == 0 || !(self.pair_floor > 0.0) {
            return Err(Error::invalid("fpi needs eps_conv > 0, max_iter >= 1, pair_floor > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpiTrace {
    /// Frobenius norm of the change of the stacked mean matrix per iteration.
    pub displacements: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// `KL(N(μ, I) ‖ N(μ', I)) = ½‖μ' − μ‖²`.
pub fn kld_isotropic(mu: &Array1<f64>, mu_prime: &Array1<f64>) -> Result<f64> {
    check_dim("kld_isotropic", mu.len(), mu_prime.len())?;
    Ok(0.5 * squared_distance(mu, mu_prime))
}

fn squared_distance(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_active(bank: &PriorBank, anchors: &Anchors, active: &BTreeSet<u32>) -> Result<()> {
    for &c in active {
        if !bank.contains(c) {
            return Err(Error::UnknownClass(c));
        }
        if bank.is_frozen(c) {
            return Err(Error::invalid(format!("class {c} is frozen")));
        }
        let a = anchors.get(&c).ok_or(Error::UnknownClass(c))?;
        check_dim("fpi anchor", bank.latent_dim, a.len())?;
    }
    Ok(())
}

/// One synchronous update of the active means. Returns the new means and
/// leaves the bank untouched.
pub fn fpi_step(
    bank: &PriorBank,
    anchors: &Anchors,
    config: &FpiConfig,
    active: &BTreeSet<u32>,
) -> Result<BTreeMap<u32, Array1<f64>>> {
    check_active(bank, anchors, active)?;
    let mut out = BTreeMap::new();
    for &y in active {
        let mu_y = &bank.means[&y];
        let mut push = Array1::<f64>::zeros(bank.latent_dim);
        for (&other, mu_o) in &bank.means {
            if other == y {
                continue;
            }
            let diff = mu_y - mu_o;
            let denom = diff.dot(&diff).max(config.pair_floor);
            push.scaled_add(1.0 / denom, &diff);
        }
        let mut next = anchors[&y].clone();
        next.scaled_add(config.lambda, &push);
        out.insert(y, next);
    }
    Ok(out)
}

/// Iterates [`fpi_step`] on every active class until the displacement drops
/// to `eps_conv` or `max_iter` is reached. Frozen means are never written.
pub fn run_fpi(bank: &mut PriorBank, anchors: &Anchors, config: &FpiConfig) -> Result<FpiTrace> {
    config.validate()?;
    let active = bank.active_classes();
    check_active(bank, anchors, &active)?;
    let mut trace = FpiTrace {
        displacements: Vec::new(),
        iterations: 0,
        converged: false,
    };
    while trace.iterations < config.max_iter {
        let next = fpi_step(bank, anchors, config, &active)?;
        let disp = next
            .iter()
            .map(|(c, m)| squared_distance(m, &bank.means[c]))
            .sum::<f64>()
            .sqrt();
        if !disp.is_finite() {
            return Err(Error::invalid("fixed-point iteration diverged"));
        }
        bank.write_active(next);
        trace.displacements.push(disp);
        trace.iterations += 1;
        if disp <= config.eps_conv {
            trace.converged = true;
            break;
        }
    }
    Ok(trace)
}

/// Objective whose stationary points are the fixed points of [`fpi_step`]:
///
/// ```text
/// Σ_{y ∈ anchors} [½‖μ_y − anchor_y‖² + (k/2)·ln 2π]  −  (λ/2)·Σ_{pairs {y,y'}} ln KL(N_y ‖ N_y')
/// ```
///
/// The first sum is the per-class mean negative log-likelihood with the
/// latent scatter around the anchor dropped (it does not depend on the
/// means); the pair-count normalization is folded into λ. Pairs range over
/// all classes in the bank, frozen ones included. Coincident means make the
/// log-KLD undefined; the function then returns `f64::INFINITY`.
pub fn loss_optim(bank: &PriorBank, anchors: &Anchors, lambda: f64) -> Result<f64> {
    let k = bank.latent_dim as f64;
    let mut likelihood = 0.0;
    for (c, a) in anchors {
        let mu = bank.mean(*c).ok_or(Error::UnknownClass(*c))?;
        check_dim("loss_optim anchor", bank.latent_dim, a.len())?;
        likelihood += 0.5 * squared_distance(mu, a) + 0.5 * k * (2.0 * PI).ln();
    }
    let means: Vec<&Array1<f64>> = bank.means.values().collect();
    let mut repulsion = 0.0;
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            let kld = 0.5 * squared_distance(means[i], means[j]);
            if kld == 0.0 {
                return Ok(f64::INFINITY);
            }
            repulsion -= kld.ln();
        }
    }
    Ok(likelihood + 0.5 * lambda * repulsion)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub min_distance: f64,
    pub mean_distance: f64,
    pub nearest_neighbor: BTreeMap<u32, f64>,
}

pub fn separation_report(bank: &PriorBank) -> Result<SeparationReport> {
    separation_of(bank.means())
}

pub fn separation_of(means: &BTreeMap<u32, Array1<f64>>) -> Result<SeparationReport> {
    if means.len() < 2 {
        return Err(Error::invalid("separation needs at least two classes"));
    }
    let ids: Vec<u32> = means.keys().copied().collect();
    let mut nearest: BTreeMap<u32, f64> = ids.iter().map(|&c| (c, f64::INFINITY)).collect();
    let (mut min, mut sum, mut pairs) = (f64::INFINITY, 0.0, 0usize);
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            let d = squared_distance(&means[&ids[i]], &means[&ids[j]]).sqrt();
            min = min.min(d);
            sum += d;
            pairs += 1;
            for c in [ids[i], ids[j]] {
                let e = nearest.get_mut(&c).unwrap();
                *e = e.min(d);
            }
        }
    }
    Ok(SeparationReport {
        min_distance: min,
        mean_distance: sum / pairs as f64,
        nearest_neighbor: nearest,
    })
}

/// How class means are obtained before VAE training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorInit {
    /// Anchors refined by fixed-point iteration.
    Fpi,
    /// Means drawn from `N(0, I)`, no iteration.
    Normal,
    /// Means drawn from `U(-1, 1)`, no iteration.
    Uniform,
}

impl std::str::FromStr for PriorInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fpi" => Ok(PriorInit::Fpi),
            "normal" => Ok(PriorInit::Normal),
            "uniform" => Ok(PriorInit::Uniform),
            _ => Err(Error::Config(format!("unknown prior init {s:?}"))),
        }
    }
}

impl std::fmt::Display for PriorInit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PriorInit::Fpi => "fpi",
            PriorInit::Normal => "normal",
            PriorInit::Uniform => "uniform",
        })
    }
}

/// Random means for the ablation modes that skip the iteration.
pub fn sample_means(classes: &BTreeSet<u32>, latent_dim: usize, mode: PriorInit, rng: &mut Rng) -> Result<Anchors> {
    classes
        .iter()
        .map(|&c| {
            let m = match mode {
                PriorInit::Normal => Array1::from_shape_fn(latent_dim, |_| StandardNormal.sample(rng)),
                PriorInit::Uniform => Array1::from_shape_fn(latent_dim, |_| rng.random_range(-1.0..1.0)),
                PriorInit::Fpi => return Err(Error::invalid("fpi means are not sampled")),
            };
            Ok((c, m))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_for, std_normal};
    use ndarray::array;

    fn anchors(items: &[(u32, Array1<f64>)]) -> Anchors {
        items.iter().cloned().collect()
    }

    fn cfg(lambda: f64) -> FpiConfig {
        FpiConfig {
            lambda,
            eps_conv: 1e-12,
            ..FpiConfig::default()
        }
    }

    #[test]
    fn init_copies_anchor_and_rejects_duplicates() {
        let mut bank = PriorBank::new(2);
        let a = anchors(&[(0, array![1.0, 1.0])]);
        bank.init_means(&a).unwrap();
        assert_eq!(bank.mean(0).unwrap(), &array![1.0, 1.0]);
        assert!(matches!(bank.init_means(&a), Err(Error::DuplicateClass(0))));
    }

    #[test]
    fn init_keeps_frozen_set() {
        let mut bank = PriorBank::new(2);
        bank.init_means(&anchors(&[(0, array![0.0, 1.0]), (1, array![1.0, 0.0])])).unwrap();
        bank.freeze_all();
        bank.init_means(&anchors(&[(2, array![2.0, 0.0]), (3, array![0.0, 2.0]), (4, array![2.0, 2.0])]))
            .unwrap();
        assert_eq!(bank.len(), 5);
        assert!(bank.is_frozen(0) && bank.is_frozen(1));
        assert_eq!(bank.active_classes(), BTreeSet::from([2, 3, 4]));
    }

    #[test]
    fn isotropic_kld_closed_form() {
        assert_eq!(kld_isotropic(&array![0.0, 0.0], &array![2.0, 0.0]).unwrap(), 2.0);
        assert_eq!(kld_isotropic(&array![1.5, -2.0], &array![1.5, -2.0]).unwrap(), 0.0);
        assert!(kld_isotropic(&array![0.0], &array![0.0, 1.0]).is_err());
    }

    #[test]
    fn single_class_lands_on_anchor() {
        let mut bank = PriorBank::new(2);
        let a = anchors(&[(3, array![0.5, -1.0])]);
        bank.init_means(&anchors(&[(3, array![9.0, 9.0])])).unwrap();
        let next = fpi_step(&bank, &a, &cfg(37.0), &BTreeSet::from([3])).unwrap();
        assert_eq!(next[&3], a[&3]);
    }

    #[test]
    fn zero_lambda_returns_anchors() {
        let a = anchors(&[(0, array![0.1, 0.0]), (1, array![0.0, 0.1]), (2, array![0.1, 0.1])]);
        let mut bank = PriorBank::new(2);
        bank.init_means(&a).unwrap();
        let tr = run_fpi(&mut bank, &a, &cfg(0.0)).unwrap();
        assert!(tr.converged && tr.iterations <= 2);
        assert_eq!(bank.means(), &a);
    }

    #[test]
    fn two_class_closed_form() {
        for lambda in [1.0, 4.0, 12.0, 0.3] {
            let a = anchors(&[(0, array![1.0, 0.0]), (1, array![-1.0, 0.0])]);
            let mut bank = PriorBank::new(2);
            bank.init_means(&a).unwrap();
            let tr = run_fpi(&mut bank, &a, &cfg(lambda)).unwrap();
            assert!(tr.converged);
            let c = (1.0 + (1.0 + 2.0 * lambda).sqrt()) / 2.0;
            assert!((bank.mean(0).unwrap()[0] - c).abs() < 1e-9);
            assert!((bank.mean(1).unwrap()[0] + c).abs() < 1e-9);
            assert!(bank.mean(0).unwrap()[1].abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_means_bitwise_unchanged() {
        let mut bank = PriorBank::new(3);
        bank.init_means(&anchors(&[(0, array![0.3, 0.1, -0.2]), (1, array![-0.4, 0.2, 0.0])]))
            .unwrap();
        let first = bank.means().clone();
        run_fpi(&mut bank, &first, &cfg(2.0)).unwrap();
        bank.freeze_all();
        let before = bank.clone();
        let new = anchors(&[(2, array![0.0, 0.0, 0.1]), (3, array![0.1, -0.1, 0.0])]);
        bank.init_means(&new).unwrap();
        let tr = run_fpi(&mut bank, &new, &cfg(2.0)).unwrap();
        assert!(tr.converged);
        for c in [0, 1] {
            let (a, b) = (before.mean(c).unwrap(), bank.mean(c).unwrap());
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn fixed_point_residual_within_eps() {
        let mut rng = rng_for(4, "res", 0);
        let a: Anchors = (0..6)
            .map(|c| (c, Array1::from_shape_fn(4, |_| StandardNormal.sample(&mut rng))))
            .collect();
        let mut bank = PriorBank::new(4);
        bank.init_means(&a).unwrap();
        let config = FpiConfig {
            lambda: 3.0,
            ..FpiConfig::default()
        };
        let tr = run_fpi(&mut bank, &a, &config).unwrap();
        assert!(tr.converged);
        assert!(tr.displacements.iter().all(|d| d.is_finite() && *d >= 0.0));
        let again = fpi_step(&bank, &a, &config, &bank.active_classes()).unwrap();
        let residual: f64 = again
            .iter()
            .map(|(c, m)| squared_distance(m, bank.mean(*c).unwrap()))
            .sum::<f64>()
            .sqrt();
        assert!(residual <= config.eps_conv, "residual {residual}");
    }

    #[test]
    fn coincident_anchors_stay_finite() {
        let a = anchors(&[(0, array![1.0, 1.0]), (1, array![1.0, 1.0])]);
        let mut bank = PriorBank::new(2);
        bank.init_means(&a).unwrap();
        let next = fpi_step(&bank, &a, &cfg(5.0), &bank.active_classes()).unwrap();
        assert!(next.values().flatten().all(|v| v.is_finite()));
        assert_eq!(loss_optim(&bank, &a, 5.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn loss_single_class_at_anchor() {
        let a = anchors(&[(0, array![0.2, 0.4, 0.6])]);
        let mut bank = PriorBank::new(3);
        bank.init_means(&a).unwrap();
        let expected = 1.5 * (2.0 * PI).ln();
        assert!((loss_optim(&bank, &a, 10.0).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn larger_lambda_separates_more() {
        let mut rng = rng_for(12, "sweep", 0);
        let a: Anchors = (0..6)
            .map(|c| (c, Array1::from_shape_fn(3, |_| 0.3 * std_normal(&mut rng))))
            .collect();
        let mut last = -1.0;
        for lambda in [0.0, 1.0, 10.0, 100.0] {
            let mut bank = PriorBank::new(3);
            bank.init_means(&a).unwrap();
            let tr = run_fpi(&mut bank, &a, &FpiConfig { lambda, ..FpiConfig::default() }).unwrap();
            assert!(tr.converged, "lambda {lambda}");
            let d = separation_report(&bank).unwrap().min_distance;
            assert!(d > last, "lambda {lambda}: {d} <= {last}");
            last = d;
        }
    }

    #[test]
    fn separation_examples() {
        let mut bank = PriorBank::new(2);
        bank.init_means(&anchors(&[(0, array![0.0, 0.0]), (1, array![3.0, 4.0])])).unwrap();
        let r = separation_report(&bank).unwrap();
        assert_eq!(r.min_distance, 5.0);
        assert_eq!(r.nearest_neighbor[&1], 5.0);

        let mut dup = PriorBank::new(2);
        dup.init_means(&anchors(&[(0, array![1.0, 1.0]), (1, array![1.0, 1.0])])).unwrap();
        assert_eq!(separation_report(&dup).unwrap().min_distance, 0.0);
        assert!(separation_report(&PriorBank::new(2)).is_err());
    }

    #[test]
    fn converged_bank_more_separated_than_anchors() {
        let mut rng = rng_for(10, "sep", 0);
        let a: Anchors = (0..10)
            .map(|c| (c, Array1::from_shape_fn(4, |_| 0.5 * std_normal(&mut rng))))
            .collect();
        let anchor_min = separation_of(&a).unwrap().min_distance;
        let mut bank = PriorBank::new(4);
        bank.init_means(&a).unwrap();
        assert!(run_fpi(&mut bank, &a, &FpiConfig { lambda: 2.0, ..FpiConfig::default() }).unwrap().converged);
        assert!(separation_report(&bank).unwrap().min_distance > anchor_min);
    }

    #[test]
    fn bank_codec_and_csv() {
        let mut bank = PriorBank::new(2);
        bank.init_means(&anchors(&[(4, array![0.5, -1.25])])).unwrap();
        bank.freeze_all();
        let mut w = Writer::new();
        bank.encode(&mut w);
        let bytes = w.into_bytes();
        assert_eq!(PriorBank::decode(&mut Reader::new(&bytes)).unwrap(), bank);
        assert_eq!(bank.to_csv(), "4,0.5,-1.25\n");
    }

    #[test]
    fn sampled_means_have_expected_ranges() {
        let classes: BTreeSet<u32> = (0..50).collect();
        let u = sample_means(&classes, 8, PriorInit::Uniform, &mut rng_for(0, "u", 0)).unwrap();
        assert!(u.values().flatten().all(|v| (-1.0..1.0).contains(v)));
        let n = sample_means(&classes, 8, PriorInit::Normal, &mut rng_for(0, "n", 0)).unwrap();
        assert!(n.values().flatten().any(|v| v.abs() > 1.0));
        assert!(sample_means(&classes, 8, PriorInit::Fpi, &mut rng_for(0, "n", 0)).is_err());
    }
}
