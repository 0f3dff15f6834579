//! Problem data: linear dynamics, bounded stochastic disturbances, and the
//! chance/hard constraint specification the synthesis pipeline consumes.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::poly::Polytope;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("rejection sampler exceeded its attempt budget")]
    SamplerStuck,
}

/// `x+ = A x + B u + B_w w`.
#[derive(Clone, Debug)]
pub struct LinearSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    b_w: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, b_w: DMatrix<f64>) -> Result<Self, ModelError> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(ModelError::Dimension("state matrix must be square".into()));
        }
        if b.nrows() != n {
            return Err(ModelError::Dimension(format!(
                "input matrix has {} rows, state dimension is {}",
                b.nrows(),
                n
            )));
        }
        if b_w.nrows() != n {
            return Err(ModelError::Dimension(format!(
                "disturbance matrix has {} rows, state dimension is {}",
                b_w.nrows(),
                n
            )));
        }
        Ok(LinearSystem { a, b, b_w })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn m_w(&self) -> usize {
        self.b_w.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn b_w(&self) -> &DMatrix<f64> {
        &self.b_w
    }

    /// `A + B K` for a state-feedback gain.
    pub fn closed_loop(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        &self.a + &self.b * k
    }
}

/// State chance constraints `P{[H]_j x <= [h]_j} >= 1 - [eps]_j`, hard input
/// constraints `G u <= g`, the tightening levels for the input and terminal
/// channels, and the prediction horizon.
#[derive(Clone, Debug)]
pub struct ConstraintSpec {
    pub h: DMatrix<f64>,
    pub h_off: DVector<f64>,
    pub eps: DVector<f64>,
    pub g: DMatrix<f64>,
    pub g_off: DVector<f64>,
    pub eps_u: f64,
    pub eps_t: f64,
    pub horizon: usize,
}

impl ConstraintSpec {
    pub fn validate(&self, sys: &LinearSystem) -> Result<(), ModelError> {
        if self.h.ncols() != sys.n() {
            return Err(ModelError::Dimension("state constraint width != n".into()));
        }
        if self.h.nrows() != self.h_off.len() || self.h.nrows() != self.eps.len() {
            return Err(ModelError::Dimension("state constraint rows disagree".into()));
        }
        if self.g.ncols() != sys.m() {
            return Err(ModelError::Dimension("input constraint width != m".into()));
        }
        if self.g.nrows() != self.g_off.len() {
            return Err(ModelError::Dimension("input constraint rows disagree".into()));
        }
        for &e in self.eps.iter().chain([self.eps_u, self.eps_t].iter()) {
            if !(0.0 < e && e < 1.0) {
                return Err(ModelError::InvalidParameter(format!(
                    "violation level {e} outside (0, 1)"
                )));
            }
        }
        if self.horizon == 0 {
            return Err(ModelError::InvalidParameter("horizon must be at least 1".into()));
        }
        Ok(())
    }

    pub fn num_state_rows(&self) -> usize {
        self.h.nrows()
    }

    pub fn num_input_rows(&self) -> usize {
        self.g.nrows()
    }
}

#[derive(Clone, Debug)]
enum DisturbanceKind {
    /// Zero-mean Gaussian with the given covariance, rejected outside the
    /// ball `||w||^2 <= radius_sq`. The Cholesky factor is cached.
    TruncatedGaussian { chol: DMatrix<f64>, sigma: DMatrix<f64>, radius_sq: f64 },
    /// Resample uniformly from a fixed bank of recorded disturbances.
    SampleBank { samples: Vec<DVector<f64>> },
}

/// Disturbance distribution plus a bounded polytopic outer set of its support,
/// used by every worst-case branch of the synthesis.
#[derive(Clone, Debug)]
pub struct DisturbanceModel {
    kind: DisturbanceKind,
    outer: Polytope,
}

impl DisturbanceModel {
    /// Truncated Gaussian: `w ~ N(0, sigma)` conditioned on `||w||^2 <=
    /// radius_sq`. The outer set is a regular `outer_facets`-gon tangent to
    /// the truncation ball in two dimensions, and the tangent box otherwise.
    pub fn truncated_gaussian(
        sigma: DMatrix<f64>,
        radius_sq: f64,
        outer_facets: usize,
    ) -> Result<Self, ModelError> {
        let d = sigma.nrows();
        if sigma.ncols() != d {
            return Err(ModelError::Dimension("covariance must be square".into()));
        }
        if !(radius_sq.is_finite() && radius_sq > 0.0) {
            return Err(ModelError::InvalidParameter(
                "truncation radius must be finite and positive".into(),
            ));
        }
        let chol = Cholesky::new(sigma.clone())
            .ok_or(ModelError::NotPositiveDefinite)?
            .l()
            .into_owned();
        let outer = ball_outer_polytope(d, radius_sq.sqrt(), outer_facets)?;
        Ok(DisturbanceModel {
            kind: DisturbanceKind::TruncatedGaussian { chol, sigma, radius_sq },
            outer,
        })
    }

    /// Empirical distribution over a recorded sample bank. The outer set uses
    /// the same facet normals as the Gaussian case with offsets fit to the
    /// data, so it contains every recorded sample by construction.
    pub fn from_samples(samples: Vec<DVector<f64>>, outer_facets: usize) -> Result<Self, ModelError> {
        let first = samples
            .first()
            .ok_or_else(|| ModelError::InvalidParameter("sample bank is empty".into()))?;
        let d = first.len();
        if samples.iter().any(|s| s.len() != d) {
            return Err(ModelError::Dimension("samples have mixed lengths".into()));
        }
        let template = ball_outer_polytope(d, 1.0, outer_facets)?;
        let mut b = DVector::zeros(template.num_rows());
        for i in 0..template.num_rows() {
            let dir = template.a().row(i).transpose();
            let mut best = f64::NEG_INFINITY;
            for s in &samples {
                best = best.max(dir.dot(s));
            }
            b[i] = best + 1e-12;
        }
        let outer = Polytope::new(template.a().clone(), b)
            .map_err(|e| ModelError::InvalidParameter(e.to_string()))?;
        Ok(DisturbanceModel { kind: DisturbanceKind::SampleBank { samples }, outer })
    }

    pub fn dim(&self) -> usize {
        self.outer.dim()
    }

    /// Bounded polytopic superset of the support.
    pub fn outer(&self) -> &Polytope {
        &self.outer
    }

    /// Covariance, when the model has one.
    pub fn sigma(&self) -> Option<&DMatrix<f64>> {
        match &self.kind {
            DisturbanceKind::TruncatedGaussian { sigma, .. } => Some(sigma),
            DisturbanceKind::SampleBank { .. } => None,
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<DVector<f64>, ModelError> {
        match &self.kind {
            DisturbanceKind::TruncatedGaussian { chol, radius_sq, .. } => {
                let d = chol.nrows();
                for _ in 0..1_000_000 {
                    let xi = DVector::from_iterator(
                        d,
                        (0..d).map(|_| StandardNormal.sample(rng)),
                    );
                    let w = chol * xi;
                    if w.norm_squared() <= *radius_sq {
                        return Ok(w);
                    }
                }
                Err(ModelError::SamplerStuck)
            }
            DisturbanceKind::SampleBank { samples } => {
                let idx = rng.random_range(0..samples.len());
                Ok(samples[idx].clone())
            }
        }
    }
}

/// Regular tangent polygon (2-D) or tangent box (other dimensions) containing
/// the ball of the given radius.
fn ball_outer_polytope(d: usize, radius: f64, facets: usize) -> Result<Polytope, ModelError> {
    if d == 2 {
        if facets < 3 {
            return Err(ModelError::InvalidParameter(
                "outer polygon needs at least 3 facets".into(),
            ));
        }
        let mut a = DMatrix::zeros(facets, 2);
        let mut b = DVector::zeros(facets);
        for k in 0..facets {
            let th = 2.0 * std::f64::consts::PI * (k as f64) / (facets as f64);
            a[(k, 0)] = th.cos();
            a[(k, 1)] = th.sin();
            b[k] = radius;
        }
        Polytope::new(a, b).map_err(|e| ModelError::InvalidParameter(e.to_string()))
    } else {
        let lo = vec![-radius; d];
        let hi = vec![radius; d];
        Polytope::from_box(&lo, &hi).map_err(|e| ModelError::InvalidParameter(e.to_string()))
    }
}

/// Error-channel rollout `e_{l+1} = (A + B K) e_l + B_w w_l` from `e_0 = 0`;
/// returns `e_1, ..., e_L` for `L` disturbances.
pub fn propagate_error(
    sys: &LinearSystem,
    k_gain: &DMatrix<f64>,
    ws: &[DVector<f64>],
) -> Vec<DVector<f64>> {
    let a_cl = sys.closed_loop(k_gain);
    let mut out = Vec::with_capacity(ws.len());
    let mut e = DVector::zeros(sys.n());
    for w in ws {
        e = &a_cl * e + sys.b_w() * w;
        out.push(e.clone());
    }
    out
}

/// Independent deterministic stream `tag` of a master seed (splitmix64 mix),
/// so differently sized draws from one stream never shift another stream.
pub fn derive_rng(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut z = seed.wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}
