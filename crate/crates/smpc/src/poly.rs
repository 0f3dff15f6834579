//! Polytopes in halfspace form `{x : A x <= b}` and the operations the
//! offline set recursions are built from: redundancy elimination, support
//! functions, Pontryagin difference, Fourier–Motzkin projection, and vertex
//! enumeration in the plane.
//!
//! An empty set is represented by an explicit flag (see [`Polytope::empty`]),
//! never by deliberately inconsistent rows; operations that would produce an
//! empty set signal [`PolyError::Empty`] instead of returning one silently.

use nalgebra::{DMatrix, DVector, Vector2};
use thiserror::Error;

use crate::solver::{solve_lp, LpOutcome, SolverError, Tolerances};

/// A facet whose relaxed maximum exceeds its offset by less than this is
/// redundant; also the slack used when comparing sets for equality.
pub const REDUNDANCY_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PolyError {
    #[error("polytope is empty")]
    Empty,
    #[error("polytope is unbounded along the queried direction")]
    Unbounded,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Clone, Debug)]
pub struct Polytope {
    a: DMatrix<f64>,
    b: DVector<f64>,
    empty: bool,
}

impl Polytope {
    /// Wrap rows `A x <= b`. Rows are stored as given; call [`reduce`] to
    /// normalize and prune.
    ///
    /// [`reduce`]: Polytope::reduce
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self, PolyError> {
        if a.nrows() != b.len() {
            return Err(PolyError::Dimension(format!(
                "{} rows but {} offsets",
                a.nrows(),
                b.len()
            )));
        }
        Ok(Polytope { a, b, empty: false })
    }

    /// The explicitly empty set in `dim` dimensions.
    pub fn empty(dim: usize) -> Self {
        Polytope { a: DMatrix::zeros(0, dim), b: DVector::zeros(0), empty: true }
    }

    /// Reassemble a polytope from serialized parts.
    pub fn from_parts(a: DMatrix<f64>, b: DVector<f64>, empty: bool) -> Result<Self, PolyError> {
        let mut p = Polytope::new(a, b)?;
        p.empty = empty;
        Ok(p)
    }

    /// Axis-aligned box `lo <= x <= hi`.
    pub fn from_box(lo: &[f64], hi: &[f64]) -> Result<Self, PolyError> {
        if lo.len() != hi.len() {
            return Err(PolyError::Dimension("bound lengths differ".into()));
        }
        let d = lo.len();
        let mut a = DMatrix::zeros(2 * d, d);
        let mut b = DVector::zeros(2 * d);
        for j in 0..d {
            a[(2 * j, j)] = 1.0;
            b[2 * j] = hi[j];
            a[(2 * j + 1, j)] = -1.0;
            b[2 * j + 1] = -lo[j];
        }
        Polytope::new(a, b)
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn is_marked_empty(&self) -> bool {
        self.empty
    }

    /// Membership within an absolute-plus-relative slack per row.
    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        if self.empty {
            return false;
        }
        let resid = &self.b - &self.a * x;
        (0..self.num_rows()).all(|i| resid[i] >= -tol * (1.0 + self.b[i].abs()))
    }

    /// Support function `h(d) = max { d'x : x in P }`.
    pub fn support(&self, dir: &DVector<f64>) -> Result<f64, PolyError> {
        match solve_lp(dir, self, &Tolerances::standard())? {
            LpOutcome::Optimal(s) => Ok(s.value),
            LpOutcome::Infeasible { .. } => Err(PolyError::Empty),
            LpOutcome::Unbounded { .. } => Err(PolyError::Unbounded),
        }
    }

    /// Largest ball inside the polytope: `(center, radius)`.
    ///
    /// Radius 0 means the feasible set has no interior; an unbounded polytope
    /// that admits arbitrarily large balls reports [`PolyError::Unbounded`].
    pub fn chebyshev_center(&self) -> Result<(DVector<f64>, f64), PolyError> {
        if self.empty {
            return Err(PolyError::Empty);
        }
        let (r, d) = (self.num_rows(), self.dim());
        if r == 0 {
            return Err(PolyError::Unbounded);
        }
        let mut a = DMatrix::zeros(r + 1, d + 1);
        let mut b = DVector::zeros(r + 1);
        for i in 0..r {
            let norm = self.a.row(i).norm();
            for j in 0..d {
                a[(i, j)] = self.a[(i, j)];
            }
            a[(i, d)] = norm;
            b[i] = self.b[i];
        }
        a[(r, d)] = -1.0; // rho >= 0
        let mut c = DVector::zeros(d + 1);
        c[d] = 1.0;
        let lifted = Polytope::new(a, b)?;
        match solve_lp(&c, &lifted, &Tolerances::standard())? {
            LpOutcome::Optimal(s) => Ok((s.x.rows(0, d).into_owned(), s.x[d])),
            LpOutcome::Infeasible { .. } => Err(PolyError::Empty),
            LpOutcome::Unbounded { .. } => Err(PolyError::Unbounded),
        }
    }

    /// Stack the rows of two polytopes over the same space.
    pub fn intersect(&self, other: &Polytope) -> Result<Polytope, PolyError> {
        if self.dim() != other.dim() {
            return Err(PolyError::Dimension(format!(
                "intersecting {}-dim with {}-dim",
                self.dim(),
                other.dim()
            )));
        }
        if self.empty || other.empty {
            return Ok(Polytope::empty(self.dim()));
        }
        let r = self.num_rows() + other.num_rows();
        let mut a = DMatrix::zeros(r, self.dim());
        let mut b = DVector::zeros(r);
        a.rows_mut(0, self.num_rows()).copy_from(&self.a);
        a.rows_mut(self.num_rows(), other.num_rows()).copy_from(&other.a);
        b.rows_mut(0, self.num_rows()).copy_from(&self.b);
        b.rows_mut(self.num_rows(), other.num_rows()).copy_from(&other.b);
        Polytope::new(a, b)
    }

    /// `{x : T x in P}` — substitute the affine map into every row.
    pub fn affine_preimage(&self, t: &DMatrix<f64>) -> Result<Polytope, PolyError> {
        if t.nrows() != self.dim() {
            return Err(PolyError::Dimension(format!(
                "map produces {} coords, polytope needs {}",
                t.nrows(),
                self.dim()
            )));
        }
        if self.empty {
            return Ok(Polytope::empty(t.ncols()));
        }
        Polytope::new(&self.a * t, self.b.clone())
    }

    /// Minimal representation: unit-norm rows, duplicates merged, and every
    /// redundant facet removed (a facet is kept only if relaxing it by one
    /// unit lets its own LP exceed the offset by more than [`REDUNDANCY_TOL`]).
    pub fn reduce(&self) -> Result<Polytope, PolyError> {
        if self.empty {
            return Err(PolyError::Empty);
        }
        let d = self.dim();
        // Normalize, drop vacuous zero rows, detect trivially inconsistent ones.
        let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
        for i in 0..self.num_rows() {
            let norm = self.a.row(i).norm();
            if norm <= 1e-11 {
                if self.b[i] < -1e-9 {
                    return Err(PolyError::Empty);
                }
                continue;
            }
            let normal = self.a.row(i).transpose() / norm;
            let off = self.b[i] / norm;
            // Merge rows with (numerically) the same normal, keeping the
            // tightest offset.
            if let Some((_, o)) = rows
                .iter_mut()
                .find(|(n, _)| (n - &normal).amax() <= 1e-10)
            {
                *o = o.min(off);
            } else {
                rows.push((normal, off));
            }
        }
        if rows.is_empty() {
            return Polytope::new(DMatrix::zeros(0, d), DVector::zeros(0));
        }

        let build = |idx: &[usize], rows: &[(DVector<f64>, f64)]| -> Polytope {
            let mut a = DMatrix::zeros(idx.len(), d);
            let mut b = DVector::zeros(idx.len());
            for (k, &i) in idx.iter().enumerate() {
                a.row_mut(k).copy_from(&rows[i].0.transpose());
                b[k] = rows[i].1;
            }
            Polytope { a, b, empty: false }
        };

        let all: Vec<usize> = (0..rows.len()).collect();
        let full = build(&all, &rows);
        match solve_lp(&DVector::zeros(d), &full, &Tolerances::standard())? {
            LpOutcome::Optimal(_) => {}
            LpOutcome::Infeasible { .. } => return Err(PolyError::Empty),
            LpOutcome::Unbounded { .. } => unreachable!("zero objective is never unbounded"),
        }

        // One LP per facet: maximize its normal over the others, with the
        // facet itself relaxed by 1 so the LP stays bounded in that direction.
        let mut keep = vec![true; rows.len()];
        for i in 0..rows.len() {
            let mut idx: Vec<usize> = (0..rows.len()).filter(|&j| j != i && keep[j]).collect();
            if idx.is_empty() {
                continue; // last remaining row always stays
            }
            idx.push(i);
            let mut trial = build(&idx, &rows);
            let last = trial.b.len() - 1;
            trial.b[last] += 1.0;
            let val = match solve_lp(&rows[i].0, &trial, &Tolerances::standard())? {
                LpOutcome::Optimal(s) => s.value,
                LpOutcome::Unbounded { .. } => f64::INFINITY,
                LpOutcome::Infeasible { .. } => return Err(PolyError::Empty),
            };
            if val <= rows[i].1 + REDUNDANCY_TOL {
                keep[i] = false;
            }
        }
        let kept: Vec<usize> = (0..rows.len()).filter(|&i| keep[i]).collect();
        Ok(build(&kept, &rows))
    }

    /// Pontryagin difference `{x : x + M w in P  for all w in W}`: each offset
    /// is eroded by the support of `W` in the mapped facet direction.
    pub fn pontryagin_diff(&self, w: &Polytope, m: &DMatrix<f64>) -> Result<Polytope, PolyError> {
        if m.nrows() != self.dim() || m.ncols() != w.dim() {
            return Err(PolyError::Dimension(format!(
                "map is {}x{}, needs {}x{}",
                m.nrows(),
                m.ncols(),
                self.dim(),
                w.dim()
            )));
        }
        if self.empty {
            return Err(PolyError::Empty);
        }
        let mut b = self.b.clone();
        for i in 0..self.num_rows() {
            let dir = m.transpose() * self.a.row(i).transpose();
            b[i] -= w.support(&dir)?;
        }
        let eroded = Polytope::new(self.a.clone(), b)?;
        match solve_lp(&DVector::zeros(self.dim()), &eroded, &Tolerances::standard())? {
            LpOutcome::Optimal(_) => Ok(eroded),
            LpOutcome::Infeasible { .. } => Err(PolyError::Empty),
            LpOutcome::Unbounded { .. } => unreachable!("zero objective is never unbounded"),
        }
    }

    /// Minkowski sum `{p + q : p in P, q in Q}` over the union of the
    /// operands' facet normals, each offset set to the summed supports.
    ///
    /// Exact whenever every facet normal of the sum appears among the
    /// operands' normals — always true in the plane — and an outer
    /// approximation otherwise. Both operands must be bounded in their facet
    /// directions.
    pub fn minkowski_sum(&self, other: &Polytope) -> Result<Polytope, PolyError> {
        if self.dim() != other.dim() {
            return Err(PolyError::Dimension(format!(
                "summing {}-dim with {}-dim",
                self.dim(),
                other.dim()
            )));
        }
        if self.empty || other.empty {
            return Err(PolyError::Empty);
        }
        let r = self.num_rows() + other.num_rows();
        let mut a = DMatrix::zeros(r, self.dim());
        let mut b = DVector::zeros(r);
        for i in 0..self.num_rows() {
            let dir = self.a.row(i).transpose();
            a.row_mut(i).copy_from(&self.a.row(i));
            b[i] = self.support(&dir)? + other.support(&dir)?;
        }
        for j in 0..other.num_rows() {
            let dir = other.a.row(j).transpose();
            a.row_mut(self.num_rows() + j).copy_from(&other.a.row(j));
            b[self.num_rows() + j] = self.support(&dir)? + other.support(&dir)?;
        }
        Polytope::new(a, b)?.reduce()
    }

    /// Orthogonal projection onto the coordinates `dims` (strictly ascending).
    ///
    /// Fourier–Motzkin elimination, removing the highest-indexed eliminated
    /// coordinate first and pruning redundant rows after every elimination to
    /// keep the intermediate row counts from compounding.
    pub fn project(&self, dims: &[usize]) -> Result<Polytope, PolyError> {
        if dims.is_empty() || dims.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PolyError::Dimension("dims must be strictly ascending".into()));
        }
        if *dims.last().unwrap() >= self.dim() {
            return Err(PolyError::Dimension(format!(
                "coordinate {} out of range for dimension {}",
                dims.last().unwrap(),
                self.dim()
            )));
        }
        let mut cur = self.reduce()?;
        for col in (0..self.dim()).rev() {
            if dims.contains(&col) {
                continue;
            }
            cur = cur.eliminate(col)?.reduce()?;
        }
        Ok(cur)
    }

    /// Eliminate one coordinate by combining every positive-coefficient row
    /// with every negative-coefficient row.
    fn eliminate(&self, col: usize) -> Result<Polytope, PolyError> {
        let d = self.dim();
        let drop_col = |i: usize| -> DVector<f64> {
            DVector::from_iterator(
                d - 1,
                (0..d).filter(|&j| j != col).map(|j| self.a[(i, j)]),
            )
        };
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
        for i in 0..self.num_rows() {
            let c = self.a[(i, col)];
            if c > 1e-11 {
                pos.push(i);
            } else if c < -1e-11 {
                neg.push(i);
            } else {
                rows.push((drop_col(i), self.b[i]));
            }
        }
        for &i in &pos {
            for &k in &neg {
                let ci = self.a[(i, col)];
                let ck = -self.a[(k, col)]; // magnitude of the negative coefficient
                let row = drop_col(i) * ck + drop_col(k) * ci;
                let off = ck * self.b[i] + ci * self.b[k];
                rows.push((row, off));
            }
        }
        let mut a = DMatrix::zeros(rows.len(), d - 1);
        let mut b = DVector::zeros(rows.len());
        for (idx, (row, off)) in rows.iter().enumerate() {
            a.row_mut(idx).copy_from(&row.transpose());
            b[idx] = *off;
        }
        Polytope::new(a, b)
    }

    /// Vertices of a bounded 2-D polytope in counterclockwise order.
    pub fn vertices_2d(&self) -> Result<Vec<Vector2<f64>>, PolyError> {
        if self.dim() != 2 {
            return Err(PolyError::Dimension(format!("vertices_2d on {}-dim set", self.dim())));
        }
        for dir in [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]] {
            self.support(&DVector::from_row_slice(&dir))?; // errors if unbounded or empty
        }
        let p = self.reduce()?;
        let r = p.num_rows();
        let scale = 1.0 + p.b.amax();
        let mut verts: Vec<Vector2<f64>> = Vec::new();
        for i in 0..r {
            for j in (i + 1)..r {
                let det = p.a[(i, 0)] * p.a[(j, 1)] - p.a[(i, 1)] * p.a[(j, 0)];
                if det.abs() <= 1e-12 {
                    continue;
                }
                let x = (p.b[i] * p.a[(j, 1)] - p.b[j] * p.a[(i, 1)]) / det;
                let y = (p.a[(i, 0)] * p.b[j] - p.a[(j, 0)] * p.b[i]) / det;
                let v = DVector::from_row_slice(&[x, y]);
                if !p.contains(&v, 1e-7) {
                    continue;
                }
                let vv = Vector2::new(x, y);
                if verts.iter().all(|u| (u - vv).amax() > 1e-8 * scale) {
                    verts.push(vv);
                }
            }
        }
        if verts.len() > 2 {
            let cx = verts.iter().map(|v| v.x).sum::<f64>() / verts.len() as f64;
            let cy = verts.iter().map(|v| v.y).sum::<f64>() / verts.len() as f64;
            verts.sort_by(|u, v| {
                let au = (u.y - cy).atan2(u.x - cx);
                let av = (v.y - cy).atan2(v.x - cx);
                au.partial_cmp(&av).unwrap()
            });
        }
        Ok(verts)
    }

    /// Area of a bounded 2-D polytope by the shoelace formula.
    pub fn area_2d(&self) -> Result<f64, PolyError> {
        let v = self.vertices_2d()?;
        if v.len() < 3 {
            return Ok(0.0);
        }
        let mut twice = 0.0;
        for i in 0..v.len() {
            let j = (i + 1) % v.len();
            twice += v[i].x * v[j].y - v[j].x * v[i].y;
        }
        Ok(0.5 * twice.abs())
    }

    /// `self ⊆ other` up to `tol`, decided by support functions: every facet
    /// of `other` must bound `self`.
    pub fn is_subset(&self, other: &Polytope, tol: f64) -> Result<bool, PolyError> {
        if self.dim() != other.dim() {
            return Err(PolyError::Dimension(format!(
                "comparing {}-dim with {}-dim",
                self.dim(),
                other.dim()
            )));
        }
        if self.empty {
            return Ok(true);
        }
        for i in 0..other.num_rows() {
            let dir = other.a.row(i).transpose();
            match self.support(&dir) {
                Ok(val) => {
                    if val > other.b[i] + tol * (1.0 + other.b[i].abs()) {
                        return Ok(false);
                    }
                }
                Err(PolyError::Empty) => return Ok(true),
                Err(PolyError::Unbounded) => return Ok(false),
                Err(e) => return Err(e),
            }
        }
        Ok(true)
    }

    /// Mutual inclusion within `tol`.
    pub fn set_equal(&self, other: &Polytope, tol: f64) -> Result<bool, PolyError> {
        Ok(self.is_subset(other, tol)? && other.is_subset(self, tol)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn square(half: f64) -> Polytope {
        Polytope::from_box(&[-half, -half], &[half, half]).unwrap()
    }

    #[test]
    fn reduce_drops_a_slack_facet_and_keeps_the_tight_ones() {
        // Unit square plus a diagonal cut far outside it.
        let a = DMatrix::from_row_slice(
            5,
            2,
            &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0, 1.0, 1.0],
        );
        let b = DVector::from_row_slice(&[1.0, 1.0, 1.0, 1.0, 10.0]);
        let p = Polytope::new(a, b).unwrap().reduce().unwrap();
        assert_eq!(p.num_rows(), 4);
        assert!(p.set_equal(&square(1.0), 1e-9).unwrap());
    }

    #[test]
    fn reduce_signals_empty_for_contradictory_rows() {
        let a = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let b = DVector::from_row_slice(&[-2.0, 1.0]); // x <= -2 and x >= -1
        assert!(matches!(Polytope::new(a, b).unwrap().reduce(), Err(PolyError::Empty)));
    }

    #[test]
    fn reduce_is_idempotent_here() {
        let a = DMatrix::from_row_slice(
            6,
            2,
            &[1.0, 0.1, -1.0, 0.3, 0.2, 1.0, -0.1, -1.0, 1.0, 1.0, 0.9, 1.05],
        );
        let b = DVector::from_row_slice(&[1.0, 1.2, 0.8, 1.1, 1.5, 1.45]);
        let once = Polytope::new(a, b).unwrap().reduce().unwrap();
        let twice = once.reduce().unwrap();
        assert_eq!(once.num_rows(), twice.num_rows());
        assert!(once.set_equal(&twice, 1e-9).unwrap());
    }

    #[test]
    fn support_of_a_box_is_the_weighted_corner() {
        let p = square(2.0);
        let dir = DVector::from_row_slice(&[3.0, -1.0]);
        assert_abs_diff_eq!(p.support(&dir).unwrap(), 8.0, epsilon = 1e-9);
    }

    #[test]
    fn pontryagin_difference_of_boxes_shrinks_by_the_subtrahend() {
        let p = square(2.0);
        let w = square(0.5);
        let m = DMatrix::identity(2, 2);
        let diff = p.pontryagin_diff(&w, &m).unwrap();
        assert!(diff.set_equal(&square(1.5), 1e-9).unwrap());
    }

    #[test]
    fn pontryagin_difference_signals_empty_when_erosion_eats_everything() {
        let p = square(0.3);
        let w = square(0.5);
        let m = DMatrix::identity(2, 2);
        assert!(matches!(p.pontryagin_diff(&w, &m), Err(PolyError::Empty)));
    }

    #[test]
    fn minkowski_sum_of_boxes_adds_the_half_widths() {
        let sum = square(2.0).minkowski_sum(&square(0.5)).unwrap();
        assert!(sum.set_equal(&square(2.5), 1e-9).unwrap());
    }

    #[test]
    fn minkowski_sum_supports_add_in_the_plane() {
        // An axis box plus a rotated diamond: the sum's support must equal
        // the sum of supports in every probe direction (exactness in 2-D).
        let p = square(1.0);
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0, 1.0]);
        let q = Polytope::new(a, DVector::from_element(4, 1.0)).unwrap();
        let sum = p.minkowski_sum(&q).unwrap();
        for k in 0..24 {
            let th = 2.0 * std::f64::consts::PI * (k as f64) / 24.0;
            let dir = DVector::from_row_slice(&[th.cos(), th.sin()]);
            assert_abs_diff_eq!(
                sum.support(&dir).unwrap(),
                p.support(&dir).unwrap() + q.support(&dir).unwrap(),
                epsilon = 1e-8
            );
        }
    }

    #[test]
    fn minkowski_sum_with_a_point_translates() {
        let point = Polytope::from_box(&[0.7, -0.2], &[0.7, -0.2]).unwrap();
        let sum = square(1.0).minkowski_sum(&point).unwrap();
        let expect = Polytope::from_box(&[-0.3, -1.2], &[1.7, 0.8]).unwrap();
        assert!(sum.set_equal(&expect, 1e-9).unwrap());
    }

    #[test]
    fn projection_of_a_product_box_is_the_factor_box() {
        let p = Polytope::from_box(&[-1.0, -2.0, -3.0], &[1.0, 2.0, 3.0]).unwrap();
        let proj = p.project(&[0, 1]).unwrap();
        assert!(proj
            .set_equal(&Polytope::from_box(&[-1.0, -2.0], &[1.0, 2.0]).unwrap(), 1e-9)
            .unwrap());
    }

    #[test]
    fn projection_of_a_rotated_set_needs_row_combinations() {
        // { (x,y) : |x + y| <= 1, |x - y| <= 1 } projects onto |x| <= 1.
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0, 1.0]);
        let b = DVector::from_element(4, 1.0);
        let p = Polytope::new(a, b).unwrap();
        let proj = p.project(&[0]).unwrap();
        assert!(proj
            .set_equal(&Polytope::from_box(&[-1.0], &[1.0]).unwrap(), 1e-9)
            .unwrap());
    }

    #[test]
    fn vertices_are_counterclockwise_and_area_matches() {
        let p = square(1.0);
        let v = p.vertices_2d().unwrap();
        assert_eq!(v.len(), 4);
        for i in 0..v.len() {
            let j = (i + 1) % v.len();
            let k = (i + 2) % v.len();
            let cross = (v[j].x - v[i].x) * (v[k].y - v[j].y) - (v[j].y - v[i].y) * (v[k].x - v[j].x);
            assert!(cross > 0.0, "vertices not counterclockwise");
        }
        assert_abs_diff_eq!(p.area_2d().unwrap(), 4.0, epsilon = 1e-9);
    }

    #[test]
    fn subset_and_equality_respect_row_order() {
        let inner = square(1.0);
        let outer = square(1.5);
        assert!(inner.is_subset(&outer, 1e-9).unwrap());
        assert!(!outer.is_subset(&inner, 1e-9).unwrap());
        // Same set, rows permuted and scaled.
        let a = DMatrix::from_row_slice(4, 2, &[0.0, 2.0, 2.0, 0.0, 0.0, -2.0, -2.0, 0.0]);
        let b = DVector::from_element(4, 2.0);
        let scaled = Polytope::new(a, b).unwrap();
        assert!(scaled.set_equal(&square(1.0), 1e-9).unwrap());
    }

    #[test]
    fn chebyshev_center_of_a_shifted_box() {
        let p = Polytope::from_box(&[0.0, -1.0], &[4.0, 1.0]).unwrap();
        let (c, rho) = p.chebyshev_center().unwrap();
        assert_abs_diff_eq!(rho, 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(c[1], 0.0, epsilon = 1e-8);
        assert!(c[0] >= 1.0 - 1e-8 && c[0] <= 3.0 + 1e-8);
    }

    #[test]
    fn marked_empty_propagates_through_intersection() {
        let p = square(1.0).intersect(&Polytope::empty(2)).unwrap();
        assert!(p.is_marked_empty());
        assert!(!p.contains(&DVector::zeros(2), 1e-9));
        assert!(p.is_subset(&square(0.1), 1e-9).unwrap());
    }
}
