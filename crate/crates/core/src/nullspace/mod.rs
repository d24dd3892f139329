//! Null-space gradient projection for the decoder.
//!
//! For every protected layer the state keeps the exact uncentered second
//! moment `Σ_l` of all layer inputs seen on finished tasks. Its eigenvectors
//! with eigenvalue at most `a · max(λ_min, ε_eig · λ_max)` form `U_B`, and a
//! weight gradient `G` (`d_out × d_in`) is replaced by `G · U_B · U_Bᵀ`, so the
//! resulting update maps previous-task inputs (which live mostly in the
//! discarded span) to approximately zero.

mod eigen;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{check_dim, Error, Result};

pub use eigen::{sym_eigen_jacobi, SymEigen, JACOBI_MAX_SWEEPS, JACOBI_TOL};

pub const DEFAULT_THRESHOLD_FACTOR: f64 = 100.0;
pub const DEFAULT_EIG_FLOOR: f64 = 1e-12;

/// Selected eigenbasis for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerProjector {
    /// `d_in × |B|`, orthonormal columns.
    pub basis: Array2<f64>,
    /// `U_B · U_Bᵀ`, cached for projection.
    pub projector: Array2<f64>,
    /// All eigenvalues of `Σ_l`, ascending.
    pub eigenvalues: Array1<f64>,
    pub threshold: f64,
}

impl LayerProjector {
    pub fn selected(&self) -> usize {
        self.basis.ncols()
    }

    pub fn lambda_min(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues[self.eigenvalues.len() - 1]
    }

    /// Share of the spectrum inside the selected span, in `[0, 1]`. A zero
    /// trace yields 0; check [`LayerProjector::trace`] to tell that case apart.
    pub fn proportion(&self) -> f64 {
        let total = self.trace();
        if total <= 0.0 {
            return 0.0;
        }
        let kept: f64 = self.eigenvalues.iter().take(self.selected()).map(|v| v.max(0.0)).sum();
        (kept / total).clamp(0.0, 1.0)
    }

    pub fn trace(&self) -> f64 {
        self.eigenvalues.iter().map(|v| v.max(0.0)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCovariance {
    pub sigma: Array2<f64>,
    pub count: u64,
    pub projector: Option<LayerProjector>,
}

impl LayerCovariance {
    fn new(dim: usize) -> Self {
        Self {
            sigma: Array2::zeros((dim, dim)),
            count: 0,
            projector: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub layer: usize,
    pub count: u64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub selected: usize,
    pub proportion: f64,
}

/// Covariances and projectors of every protected layer, keyed by layer index.
#[derive(Debug, Clone, PartialEq)]
pub struct NullSpaceState {
    layers: BTreeMap<usize, LayerCovariance>,
    threshold_factor: f64,
    eig_floor: f64,
}

impl NullSpaceState {
    /// `layer_dims` maps a layer index to its input width.
    pub fn new(layer_dims: &BTreeMap<usize, usize>, threshold_factor: f64, eig_floor: f64) -> Result<Self> {
        if !(threshold_factor > 0.0) {
            return Err(Error::invalid("threshold factor must be positive"));
        }
        if !(eig_floor >= 0.0) {
            return Err(Error::invalid("eigen floor must be non-negative"));
        }
        Ok(Self {
            layers: layer_dims.iter().map(|(&l, &d)| (l, LayerCovariance::new(d))).collect(),
            threshold_factor,
            eig_floor,
        })
    }

    pub fn threshold_factor(&self) -> f64 {
        self.threshold_factor
    }

    pub fn layer_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.keys().copied()
    }

    pub fn layer(&self, layer: usize) -> Result<&LayerCovariance> {
        self.layers
            .get(&layer)
            .ok_or_else(|| Error::invalid(format!("layer {layer} is not tracked")))
    }

    fn layer_mut(&mut self, layer: usize) -> Result<&mut LayerCovariance> {
        self.layers
            .get_mut(&layer)
            .ok_or_else(|| Error::invalid(format!("layer {layer} is not tracked")))
    }

    /// `Σ ← (n·Σ + XᵀX) / (n + b)`, `n ← n + b`. An empty batch is a no-op.
    pub fn accumulate_covariance(&mut self, layer: usize, inputs: ArrayView2<f64>) -> Result<()> {
        let cov = self.layer_mut(layer)?;
        check_dim("covariance input", cov.dim(), inputs.ncols())?;
        let b = inputs.nrows() as u64;
        if b == 0 {
            return Ok(());
        }
        let n = cov.count as f64;
        let total = (cov.count + b) as f64;
        let xtx = inputs.t().dot(&inputs);
        cov.sigma = (&cov.sigma * n + xtx) / total;
        cov.count += b;
        Ok(())
    }

    /// Eigendecomposes `Σ_l` and stores the selected low-eigenvalue basis.
    pub fn compute_projector(&mut self, layer: usize) -> Result<&LayerProjector> {
        let (a, floor) = (self.threshold_factor, self.eig_floor);
        let cov = self.layer_mut(layer)?;
        if cov.count == 0 {
            return Err(Error::invalid(format!("layer {layer} has no samples")));
        }
        let eig = sym_eigen_jacobi(&cov.sigma, JACOBI_TOL, JACOBI_MAX_SWEEPS).ok_or(Error::EigenNoConvergence {
            layer,
            sweeps: JACOBI_MAX_SWEEPS,
        })?;
        let n = eig.values.len();
        let lambda_min = eig.values[0];
        let lambda_max = eig.values[n - 1];
        let threshold = a * lambda_min.max(floor * lambda_max);
        let selected = eig.values.iter().take_while(|&&v| v <= threshold).count();
        let basis = eig.vectors.slice(ndarray::s![.., ..selected]).to_owned();
        let projector = basis.dot(&basis.t());
        cov.projector = Some(LayerProjector {
            basis,
            projector,
            eigenvalues: eig.values,
            threshold,
        });
        Ok(cov.projector.as_ref().unwrap())
    }

    pub fn projector(&self, layer: usize) -> Option<&LayerProjector> {
        self.layers.get(&layer).and_then(|c| c.projector.as_ref())
    }

    /// Proportion `R` of the layer's spectrum inside the selected span.
    pub fn proportion(&self, layer: usize) -> Result<f64> {
        self.layer(layer)?
            .projector
            .as_ref()
            .map(LayerProjector::proportion)
            .ok_or_else(|| Error::invalid(format!("no projector computed for layer {layer}")))
    }

    pub fn diagnostics(&self) -> Vec<LayerDiagnostics> {
        self.layers
            .iter()
            .filter_map(|(&layer, cov)| {
                cov.projector.as_ref().map(|p| LayerDiagnostics {
                    layer,
                    count: cov.count,
                    lambda_min: p.lambda_min(),
                    lambda_max: p.lambda_max(),
                    selected: p.selected(),
                    proportion: p.proportion(),
                })
            })
            .collect()
    }

    /// Covariances are stored as `f64` so a reloaded state reproduces the
    /// same projectors.
    pub fn encode(&self, w: &mut Writer) {
        w.f64(self.threshold_factor);
        w.f64(self.eig_floor);
        w.len_prefixed(self.layers.len());
        for (&l, cov) in &self.layers {
            w.len_prefixed(l);
            w.len_prefixed(cov.dim());
            w.u64(cov.count);
            for &v in &cov.sigma {
                w.f64(v);
            }
        }
    }

    /// Rebuilds the state and recomputes projectors for layers with samples.
    pub fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let threshold_factor = r.f64()?;
        let eig_floor = r.f64()?;
        let n = r.len_prefixed()?;
        let mut dims = BTreeMap::new();
        let mut raw = Vec::with_capacity(n);
        for _ in 0..n {
            let l = r.len_prefixed()?;
            let d = r.len_prefixed()?;
            let count = r.u64()?;
            let data = (0..d * d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            dims.insert(l, d);
            raw.push((l, count, Array2::from_shape_vec((d, d), data).expect("square")));
        }
        let mut state = NullSpaceState::new(&dims, threshold_factor, eig_floor)?;
        for (l, count, sigma) in raw {
            let cov = state.layer_mut(l)?;
            cov.sigma = sigma;
            cov.count = count;
            if count > 0 {
                state.compute_projector(l)?;
            }
        }
        Ok(state)
    }
}

/// `Ḡ = G · U_B · U_Bᵀ` for a `d_out × d_in` gradient and a `d_in × |B|` basis.
pub fn project_gradient(grad: &Array2<f64>, basis: &Array2<f64>) -> Result<Array2<f64>> {
    check_dim("projection basis rows", grad.ncols(), basis.nrows())?;
    Ok(grad.dot(basis).dot(&basis.t()))
}

/// Same as [`project_gradient`] with a precomputed `U_B · U_Bᵀ`.
pub fn apply_projector(grad: &Array2<f64>, projector: &Array2<f64>) -> Result<Array2<f64>> {
    check_dim("projector size", grad.ncols(), projector.nrows())?;
    Ok(grad.dot(projector))
}

pub fn diagnostics_csv(rows: &[(usize, LayerDiagnostics)]) -> String {
    let mut out = String::from("task,layer_id,n_l,lambda_min,lambda_max,selected,proportion\n");
    for (task, d) in rows {
        out.push_str(&format!(
            "{},{},{},{:e},{:e},{},{}\n",
            task, d.layer, d.count, d.lambda_min, d.lambda_max, d.selected, d.proportion
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_for, std_normal};
    use ndarray::{array, s};

    fn state(dim: usize) -> NullSpaceState {
        NullSpaceState::new(&BTreeMap::from([(0, dim)]), DEFAULT_THRESHOLD_FACTOR, DEFAULT_EIG_FLOOR).unwrap()
    }

    fn with_sigma(sigma: Array2<f64>) -> NullSpaceState {
        let mut st = state(sigma.nrows());
        let cov = st.layer_mut(0).unwrap();
        cov.sigma = sigma;
        cov.count = 1;
        st
    }

    #[test]
    fn single_outer_product() {
        let mut st = state(2);
        st.accumulate_covariance(0, array![[1.0, 2.0]].view()).unwrap();
        assert_eq!(st.layer(0).unwrap().sigma, array![[1.0, 2.0], [2.0, 4.0]]);
        assert_eq!(st.layer(0).unwrap().count, 1);
    }

    #[test]
    fn empty_batch_is_identity() {
        let mut st = state(2);
        st.accumulate_covariance(0, array![[1.0, 2.0]].view()).unwrap();
        let before = st.clone();
        st.accumulate_covariance(0, Array2::<f64>::zeros((0, 2)).view()).unwrap();
        assert_eq!(st, before);
        assert!(st.accumulate_covariance(0, array![[1.0]].view()).is_err());
    }

    #[test]
    fn two_batches_equal_one() {
        let mut rng = rng_for(1, "cov", 0);
        let x = Array2::from_shape_fn((9, 4), |_| std_normal(&mut rng));
        let mut a = state(4);
        a.accumulate_covariance(0, x.slice(s![..4, ..])).unwrap();
        a.accumulate_covariance(0, x.slice(s![4.., ..])).unwrap();
        let mut b = state(4);
        b.accumulate_covariance(0, x.view()).unwrap();
        let (sa, sb) = (&a.layer(0).unwrap().sigma, &b.layer(0).unwrap().sigma);
        let rel = (sa - sb).iter().map(|v| v * v).sum::<f64>().sqrt() / sb.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(rel < 1e-12);
    }

    #[test]
    fn isotropic_selects_everything() {
        let mut st = with_sigma(Array2::eye(5));
        let p = st.compute_projector(0).unwrap();
        assert_eq!(p.selected(), 5);
        assert!((&p.projector - &Array2::<f64>::eye(5)).iter().all(|v| v.abs() < 1e-15));
        assert_eq!(st.proportion(0).unwrap(), 1.0);
    }

    #[test]
    fn exact_null_space() {
        let mut st = with_sigma(Array2::from_diag(&array![1.0, 0.0, 0.0]));
        let p = st.compute_projector(0).unwrap();
        assert_eq!(p.selected(), 2);
        let expected = Array2::from_diag(&array![0.0, 1.0, 1.0]);
        assert!((&p.projector - &expected).iter().all(|v| v.abs() <= 1e-10));
        assert_eq!(st.proportion(0).unwrap(), 0.0);
    }

    #[test]
    fn proportion_arithmetic() {
        let mut st = with_sigma(Array2::from_diag(&array![4.0, 1.0, 0.01]));
        st.compute_projector(0).unwrap();
        assert!((st.proportion(0).unwrap() - 1.01 / 5.01).abs() <= 1e-12);
    }

    #[test]
    fn zero_trace_reports_zero() {
        let mut st = with_sigma(Array2::zeros((3, 3)));
        let p = st.compute_projector(0).unwrap();
        assert_eq!(p.trace(), 0.0);
        assert_eq!(st.proportion(0).unwrap(), 0.0);
    }

    #[test]
    fn projector_needs_samples() {
        let mut st = state(3);
        assert!(st.compute_projector(0).is_err());
        assert!(st.proportion(0).is_err());
    }

    #[test]
    fn full_and_empty_bases() {
        let g = array![[1.0, -2.0, 0.5], [0.0, 3.0, 1.0]];
        assert_eq!(project_gradient(&g, &Array2::eye(3)).unwrap(), g);
        assert_eq!(project_gradient(&g, &Array2::zeros((3, 0))).unwrap(), Array2::<f64>::zeros((2, 3)));
        assert!(project_gradient(&g, &Array2::eye(2)).is_err());
    }

    #[test]
    fn annihilates_principal_direction() {
        let mut rng = rng_for(3, "ann", 0);
        let u = Array1::from_shape_fn(6, |_| std_normal(&mut rng));
        let x = Array2::from_shape_fn((40, 6), |(i, j)| (i as f64 - 20.0) * 0.1 * u[j]);
        let mut st = state(6);
        st.accumulate_covariance(0, x.view()).unwrap();
        let basis = st.compute_projector(0).unwrap().basis.clone();
        for k in 0..5 {
            let mut rng = rng_for(3, "g", k);
            let g = Array2::from_shape_fn((4, 6), |_| std_normal(&mut rng));
            let gp = project_gradient(&g, &basis).unwrap();
            let ratio = gp.dot(&u).dot(&gp.dot(&u)).sqrt() / g.dot(&u).dot(&g.dot(&u)).sqrt();
            assert!(ratio <= 1e-6, "ratio {ratio}");
        }
    }

    #[test]
    fn state_codec_recomputes_projectors() {
        let mut rng = rng_for(8, "codec", 0);
        let x = Array2::from_shape_fn((12, 3), |_| std_normal(&mut rng));
        let mut st = state(3);
        st.accumulate_covariance(0, x.view()).unwrap();
        st.compute_projector(0).unwrap();
        let mut w = Writer::new();
        st.encode(&mut w);
        let bytes = w.into_bytes();
        assert_eq!(NullSpaceState::decode(&mut Reader::new(&bytes)).unwrap(), st);
    }
}
