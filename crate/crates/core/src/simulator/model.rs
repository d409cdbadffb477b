//! Frozen backbone and bottleneck adapters.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};

use crate::error::{Result, SaefError};
use crate::numeric::ParamVector;
use crate::rng;

fn random_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl rand::Rng) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

/// Frozen feature extractor stand-in: `h = x · embed` is the activation the
/// adapter sees, and `h · mlp` is the frozen branch it is added to.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub embed: Array2<f64>,
    pub mlp: Array2<f64>,
}

impl Backbone {
    pub fn new(d_in: usize, d: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "backbone", 0);
        Self {
            embed: random_matrix(d_in, d, 1.0 / (d_in as f64).sqrt(), &mut rng),
            mlp: random_matrix(d, d, 1.0 / (d as f64).sqrt(), &mut rng),
        }
    }

    pub fn d_in(&self) -> usize {
        self.embed.nrows()
    }

    pub fn d(&self) -> usize {
        self.embed.ncols()
    }

    /// Pre-adapter activations for a batch of inputs (rows).
    pub fn pre_activation(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.embed)
    }

    /// Frozen branch output for a batch of pre-adapter activations.
    pub fn frozen(&self, h: ArrayView2<'_, f64>) -> Array2<f64> {
        h.dot(&self.mlp)
    }
}

/// Bottleneck adapter `ReLU(h · down) · up`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    /// `d × r`
    pub down: Array2<f64>,
    /// `r × d`
    pub up: Array2<f64>,
}

impl Adapter {
    pub fn zeros(d: usize, r: usize) -> Self {
        Self { down: Array2::zeros((d, r)), up: Array2::zeros((r, d)) }
    }

    /// Random start: `down ~ N(0, 1/d)`, `up ~ N(0, up_std²)`.
    pub fn init(d: usize, r: usize, up_std: f64, rng: &mut impl rand::Rng) -> Self {
        Self { down: random_matrix(d, r, 1.0 / (d as f64).sqrt(), rng), up: random_matrix(r, d, up_std, rng) }
    }

    pub fn d(&self) -> usize {
        self.down.nrows()
    }

    pub fn r(&self) -> usize {
        self.down.ncols()
    }

    /// Flattened parameters: `down` then `up`, each row-major.
    pub fn to_params(&self) -> Result<ParamVector> {
        let mut v = Vec::with_capacity(2 * self.down.len());
        v.extend(self.down.iter().copied());
        v.extend(self.up.iter().copied());
        ParamVector::new(v)
    }

    pub fn from_params(params: &ParamVector, d: usize, r: usize) -> Result<Self> {
        let v = params.as_slice();
        if v.len() != 2 * d * r {
            return Err(SaefError::LengthMismatch { expected: 2 * d * r, actual: v.len() });
        }
        let down = Array2::from_shape_vec((d, r), v[..d * r].to_vec()).expect("shape");
        let up = Array2::from_shape_vec((r, d), v[d * r..].to_vec()).expect("shape");
        Ok(Self { down, up })
    }

    fn check(&self, d: usize) -> Result<()> {
        if self.down.nrows() != d || self.up.ncols() != d || self.up.nrows() != self.down.ncols() {
            return Err(SaefError::LengthMismatch { expected: d, actual: self.down.nrows() });
        }
        Ok(())
    }

    /// Residual branch for a batch of pre-adapter activations.
    pub fn residual(&self, h: ArrayView2<'_, f64>) -> Array2<f64> {
        h.dot(&self.down).mapv(|u| u.max(0.0)).dot(&self.up)
    }

    /// Residual branch for a single activation vector.
    pub fn residual_one(&self, h: ArrayView1<'_, f64>) -> Array1<f64> {
        h.dot(&self.down).mapv(|u| u.max(0.0)).dot(&self.up)
    }
}

/// `frozen(h) + ReLU(h · down) · up` for a batch of pre-adapter activations.
pub fn features_from_pre(backbone: &Backbone, adapter: &Adapter, h: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    adapter.check(backbone.d())?;
    if h.ncols() != backbone.d() {
        return Err(SaefError::LengthMismatch { expected: backbone.d(), actual: h.ncols() });
    }
    Ok(backbone.frozen(h) + adapter.residual(h))
}

/// Adapted features of a batch of raw inputs.
pub fn adapter_forward(backbone: &Backbone, adapter: &Adapter, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if x.ncols() != backbone.d_in() {
        return Err(SaefError::LengthMismatch { expected: backbone.d_in(), actual: x.ncols() });
    }
    features_from_pre(backbone, adapter, backbone.pre_activation(x).view())
}

/// Column mean of a non-empty batch.
pub(crate) fn mean_row(m: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    m.mean_axis(Axis(0)).ok_or(SaefError::Empty("feature batch"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn identity_backbone() -> Backbone {
        Backbone { embed: Array2::eye(3), mlp: Array2::eye(3) }
    }

    #[test]
    fn zero_adapter_is_identity_residual() {
        let bb = Backbone::new(4, 6, 1);
        let x = array![[1.0, -2.0, 0.5, 3.0], [0.0, 1.0, 1.0, -1.0]];
        let out = adapter_forward(&bb, &Adapter::zeros(6, 2), x.view()).unwrap();
        let frozen = bb.frozen(bb.pre_activation(x.view()).view());
        assert_eq!(out, frozen);
    }

    #[test]
    fn hand_computed_rank_one() {
        // h = (1, 2, -1), u = h · (1, 1, 0)ᵀ = 3.
        let bb = identity_backbone();
        let adapter = Adapter { down: array![[1.0], [1.0], [0.0]], up: array![[0.5, -1.0, 2.0]] };
        let out = adapter_forward(&bb, &adapter, array![[1.0, 2.0, -1.0]].view()).unwrap();
        // (1, 2, -1) + 3 · (0.5, -1, 2) = (2.5, -1, 5)
        assert_eq!(out, array![[2.5, -1.0, 5.0]]);
    }

    #[test]
    fn negative_preactivation_gives_zero_residual() {
        let bb = identity_backbone();
        let adapter = Adapter { down: array![[-1.0], [-1.0], [-1.0]], up: array![[7.0, 7.0, 7.0]] };
        let x = array![[1.0, 2.0, 0.5]];
        let out = adapter_forward(&bb, &adapter, x.view()).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let bb = Backbone::new(4, 6, 1);
        assert!(adapter_forward(&bb, &Adapter::zeros(5, 2), Array2::zeros((1, 4)).view()).is_err());
        assert!(adapter_forward(&bb, &Adapter::zeros(6, 2), Array2::zeros((1, 3)).view()).is_err());
    }

    #[test]
    fn params_round_trip() {
        let mut rng = rng::stream(3, "t", 0);
        let a = Adapter::init(5, 2, 0.3, &mut rng);
        let p = a.to_params().unwrap();
        assert_eq!(p.len(), 20);
        assert_eq!(p.as_slice()[1], a.down[[0, 1]]);
        assert_eq!(p.as_slice()[10 + 5], a.up[[1, 0]]);
        assert_eq!(Adapter::from_params(&p, 5, 2).unwrap(), a);
        assert!(Adapter::from_params(&p, 4, 2).is_err());
    }
}
