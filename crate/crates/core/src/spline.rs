//! B-spline knot vectors, basis evaluation, knot insertion, restriction to
//! sub-segments, Gram matrices, and Lagrange interpolation weights.
//!
//! All knot vectors are clamped: the first and last knots carry multiplicity
//! exactly `order`, so the basis spans every polynomial piece including the
//! endpoints and restriction to a sub-segment is well defined.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::quad::gauss_legendre;

/// Which adjacent polynomial piece supplies a value at a break: the one
/// ending there (`Left`, a left limit) or the one starting there (`Right`).
/// Also selects the retained segment when restricting at a cut.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// A nondecreasing knot sequence with clamped (full multiplicity) ends.
#[derive(Clone, Debug, PartialEq)]
pub struct KnotVector {
    knots: Vec<f64>,
    order: usize,
}

impl KnotVector {
    pub fn new(knots: Vec<f64>, order: usize) -> Result<Self> {
        if order < 1 {
            return Err(Error::InvalidKnots("order must be at least 1".into()));
        }
        if knots.len() < 2 * order {
            return Err(Error::InvalidKnots(format!(
                "need at least {} knots for order {}, got {}",
                2 * order,
                order,
                knots.len()
            )));
        }
        if knots.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidKnots("knots must be finite".into()));
        }
        if knots.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidKnots("knots must be nondecreasing".into()));
        }
        let kv = KnotVector { knots, order };
        let (a, b) = kv.domain();
        if a >= b {
            return Err(Error::InvalidKnots("domain must be nondegenerate".into()));
        }
        if kv.multiplicity(a) != order || kv.multiplicity(b) != order {
            return Err(Error::InvalidKnots(format!(
                "boundary knots must have multiplicity exactly {order} (clamped)"
            )));
        }
        let mut i = 0;
        while i < kv.knots.len() {
            let mut j = i;
            while j < kv.knots.len() && kv.knots[j] == kv.knots[i] {
                j += 1;
            }
            if j - i > order {
                return Err(Error::InvalidKnots(format!(
                    "knot {} has multiplicity {} > order {}",
                    kv.knots[i],
                    j - i,
                    order
                )));
            }
            i = j;
        }
        Ok(kv)
    }

    /// Clamped vector over [a, b] with `n_spans` equal-width spans.
    pub fn clamped_uniform(a: f64, b: f64, n_spans: usize, order: usize) -> Result<Self> {
        if n_spans < 1 {
            return Err(Error::InvalidKnots("need at least one span".into()));
        }
        let mut knots = vec![a; order];
        for i in 1..n_spans {
            knots.push(a + (b - a) * i as f64 / n_spans as f64);
        }
        knots.extend(std::iter::repeat_n(b, order));
        KnotVector::new(knots, order)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Basis dimension N = number of knots - order.
    pub fn dim(&self) -> usize {
        self.knots.len() - self.order
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.knots[0], *self.knots.last().unwrap())
    }

    /// Distinct knot values (the breaks), including both domain endpoints.
    pub fn breaks(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for &u in &self.knots {
            if out.last() != Some(&u) {
                out.push(u);
            }
        }
        out
    }

    pub fn multiplicity(&self, u: f64) -> usize {
        self.knots.iter().filter(|&&v| v == u).count()
    }

    fn contains(&self, t: f64) -> bool {
        let (a, b) = self.domain();
        t >= a && t <= b
    }

    /// Index i of the span with knots[i] <= t < knots[i+1] (right-continuous)
    /// or knots[i] < t <= knots[i+1] (left limit). Assumes `t` in the domain.
    fn find_span(&self, t: f64, side: Side) -> usize {
        let k = self.order;
        let n = self.dim();
        match side {
            Side::Right => {
                if t >= self.knots[n] {
                    // Right endpoint: left-limit convention keeps evaluation
                    // defined on the closed interval.
                    return n - 1;
                }
                let mut lo = k - 1;
                let mut hi = n - 1;
                while lo < hi {
                    let mid = (lo + hi + 1) / 2;
                    if self.knots[mid] <= t {
                        lo = mid;
                    } else {
                        hi = mid - 1;
                    }
                }
                lo
            }
            Side::Left => {
                if t <= self.knots[k - 1] {
                    return k - 1;
                }
                let mut lo = k - 1;
                let mut hi = n - 1;
                while lo < hi {
                    let mid = (lo + hi + 1) / 2;
                    if self.knots[mid] < t {
                        lo = mid;
                    } else {
                        hi = mid - 1;
                    }
                }
                lo
            }
        }
    }

    /// The k basis values that may be nonzero on `span`, evaluated at `t`
    /// (indices span-k+1 ..= span). Triangular in-place recursion.
    fn basis_nonzero(&self, span: usize, t: f64) -> Vec<f64> {
        let k = self.order;
        let mut vals = vec![0.0; k];
        let mut left = vec![0.0; k];
        let mut right = vec![0.0; k];
        vals[0] = 1.0;
        for j in 1..k {
            left[j] = t - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let den = right[r + 1] + left[j - r];
                let temp = if den != 0.0 { vals[r] / den } else { 0.0 };
                vals[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            vals[j] = saved;
        }
        vals
    }
}

/// An order-k B-spline space over a clamped knot vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineSpace {
    kv: KnotVector,
}

impl SplineSpace {
    pub fn new(kv: KnotVector) -> Self {
        SplineSpace { kv }
    }

    /// Uniform-break space over [a, b].
    pub fn uniform(a: f64, b: f64, n_spans: usize, order: usize) -> Result<Self> {
        Ok(SplineSpace::new(KnotVector::clamped_uniform(a, b, n_spans, order)?))
    }

    pub fn knot_vector(&self) -> &KnotVector {
        &self.kv
    }

    pub fn order(&self) -> usize {
        self.kv.order()
    }

    pub fn dim(&self) -> usize {
        self.kv.dim()
    }

    pub fn domain(&self) -> (f64, f64) {
        self.kv.domain()
    }

    pub fn breaks(&self) -> Vec<f64> {
        self.kv.breaks()
    }

    /// All N basis values at `t`. Nonnegative, summing to one.
    pub fn eval_basis(&self, t: f64) -> Result<DVector<f64>> {
        self.eval_basis_side(t, Side::Right)
    }

    /// Basis values with an explicit one-sided convention at breaks.
    pub fn eval_basis_side(&self, t: f64, side: Side) -> Result<DVector<f64>> {
        let (a, b) = self.domain();
        if !self.kv.contains(t) {
            return Err(Error::OutsideDomain { point: t, start: a, end: b });
        }
        let k = self.order();
        let span = self.kv.find_span(t, side);
        let vals = self.kv.basis_nonzero(span, t);
        let mut out = DVector::zeros(self.dim());
        for (r, v) in vals.iter().enumerate() {
            out[span + 1 - k + r] = *v;
        }
        Ok(out)
    }

    /// Design matrix: rows are basis evaluations at the given times.
    pub fn design_matrix(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(times.len(), self.dim());
        for (i, &t) in times.iter().enumerate() {
            m.row_mut(i).copy_from_slice(self.eval_basis(t)?.as_slice());
        }
        Ok(m)
    }

    /// Gram matrix W = integral of b(s) b(s)' over the domain. Exact for the
    /// polynomial integrands: per-span Gauss-Legendre with k nodes covers
    /// degree 2k-2 products.
    pub fn gram_matrix(&self) -> DMatrix<f64> {
        let k = self.order();
        let n = self.dim();
        let knots = self.kv.knots();
        let (gx, gw) = gauss_legendre(k);
        let mut w = DMatrix::zeros(n, n);
        for span in (k - 1)..n {
            let (lo, hi) = (knots[span], knots[span + 1]);
            if hi <= lo {
                continue;
            }
            let mid = 0.5 * (lo + hi);
            let half = 0.5 * (hi - lo);
            for (xi, wi) in gx.iter().zip(&gw) {
                let t = mid + half * xi;
                let vals = self.kv.basis_nonzero(span, t);
                let weight = wi * half;
                for r in 0..k {
                    for c in 0..k {
                        w[(span + 1 - k + r, span + 1 - k + c)] += weight * vals[r] * vals[c];
                    }
                }
            }
        }
        w
    }

    /// Sub-space on one side of `cut` (knot multiplicity k at the cut).
    pub fn restricted(&self, cut: f64, side: Side) -> Result<SplineSpace> {
        let f = SplineFunction::new(self.clone(), DVector::zeros(self.dim()))?;
        Ok(f.restrict(cut, side)?.space)
    }

    /// Matrix mapping full-segment coefficients to sub-segment coefficients,
    /// together with the sub-space it maps into.
    pub fn restriction_matrix(&self, cut: f64, side: Side) -> Result<(SplineSpace, DMatrix<f64>)> {
        let n = self.dim();
        let sub = self.restricted(cut, side)?;
        let mut m = DMatrix::zeros(sub.dim(), n);
        for j in 0..n {
            let mut c = DVector::zeros(n);
            c[j] = 1.0;
            let f = SplineFunction::new(self.clone(), c)?;
            m.column_mut(j).copy_from(&f.restrict(cut, side)?.coefficients);
        }
        Ok((sub, m))
    }
}

/// A spline: a space plus one coefficient per basis function.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineFunction {
    pub space: SplineSpace,
    pub coefficients: DVector<f64>,
}

impl SplineFunction {
    pub fn new(space: SplineSpace, coefficients: DVector<f64>) -> Result<Self> {
        if coefficients.len() != space.dim() {
            return Err(Error::InvalidInput(format!(
                "coefficient length {} does not match basis dimension {}",
                coefficients.len(),
                space.dim()
            )));
        }
        Ok(SplineFunction { space, coefficients })
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        self.eval_side(t, Side::Right)
    }

    pub fn eval_side(&self, t: f64, side: Side) -> Result<f64> {
        let kv = &self.space.kv;
        let (a, b) = kv.domain();
        if !kv.contains(t) {
            return Err(Error::OutsideDomain { point: t, start: a, end: b });
        }
        let k = kv.order();
        let span = kv.find_span(t, side);
        let vals = kv.basis_nonzero(span, t);
        let mut sum = 0.0;
        for (r, v) in vals.iter().enumerate() {
            sum += v * self.coefficients[span + 1 - k + r];
        }
        Ok(sum)
    }

    pub fn eval_many(&self, times: &[f64]) -> Result<Vec<f64>> {
        times.iter().map(|&t| self.eval(t)).collect()
    }

    /// Insert a single knot (Boehm's recurrence). The represented function is
    /// unchanged; the basis dimension grows by one.
    pub fn insert_knot(&self, u: f64) -> Result<SplineFunction> {
        let kv = &self.space.kv;
        let (a, b) = kv.domain();
        if u <= a || u >= b {
            return Err(Error::OutsideDomain { point: u, start: a, end: b });
        }
        let k = kv.order();
        if kv.multiplicity(u) + 1 > k {
            return Err(Error::InvalidKnots(format!(
                "inserting {u} would exceed multiplicity {k}"
            )));
        }
        let p = k - 1; // degree
        let span = kv.find_span(u, Side::Right);
        let knots = kv.knots();
        let n = kv.dim();
        let c = &self.coefficients;

        let mut new_knots = Vec::with_capacity(knots.len() + 1);
        new_knots.extend_from_slice(&knots[..=span]);
        new_knots.push(u);
        new_knots.extend_from_slice(&knots[span + 1..]);

        let mut q = DVector::zeros(n + 1);
        for j in 0..=n {
            if j + p <= span {
                q[j] = c[j];
            } else if j > span {
                q[j] = c[j - 1];
            } else {
                // span - p < j <= span: affine blend of neighbours.
                let alpha = (u - knots[j]) / (knots[j + p] - knots[j]);
                q[j] = alpha * c[j] + (1.0 - alpha) * c[j - 1];
            }
        }
        SplineFunction::new(SplineSpace::new(KnotVector::new(new_knots, k)?), q)
    }

    /// Insert several knots (sorted, possibly repeated), one at a time.
    pub fn insert_knots(&self, new_knots: &[f64]) -> Result<SplineFunction> {
        if new_knots.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidKnots("insertion knots must be sorted".into()));
        }
        let mut f = self.clone();
        for &u in new_knots {
            f = f.insert_knot(u)?;
        }
        Ok(f)
    }

    /// Restrict to the segment on the requested side of `cut`: knots are
    /// inserted at the cut up to multiplicity k, then knots and coefficients
    /// are truncated. The result agrees with `self` on the sub-segment.
    pub fn restrict(&self, cut: f64, side: Side) -> Result<SplineFunction> {
        let (a, b) = self.space.domain();
        if cut <= a || cut >= b {
            return Err(Error::OutsideDomain { point: cut, start: a, end: b });
        }
        let k = self.space.order();
        let mut f = self.clone();
        for _ in self.space.kv.multiplicity(cut)..k {
            f = f.insert_knot(cut)?;
        }
        let knots = f.space.kv.knots();
        let n = f.space.dim();
        match side {
            Side::Left => {
                let below = knots.iter().filter(|&&v| v <= cut).count();
                let n1 = below - k;
                let sub = KnotVector::new(knots[..below].to_vec(), k)?;
                let coeffs = f.coefficients.rows(0, n1).into_owned();
                SplineFunction::new(SplineSpace::new(sub), coeffs)
            }
            Side::Right => {
                let first_at = knots.iter().position(|&v| v == cut).unwrap();
                let n2 = knots.len() - first_at - k;
                let sub = KnotVector::new(knots[first_at..].to_vec(), k)?;
                let coeffs = f.coefficients.rows(n - n2, n2).into_owned();
                SplineFunction::new(SplineSpace::new(sub), coeffs)
            }
        }
    }

    /// Derivative as a spline of order k-1 on the shortened knot vector.
    pub fn derivative(&self) -> Result<SplineFunction> {
        let kv = &self.space.kv;
        let k = kv.order();
        if k < 2 {
            return Err(Error::InvalidInput(
                "order-1 splines have no spline derivative".into(),
            ));
        }
        let knots = kv.knots();
        let n = kv.dim();
        let c = &self.coefficients;
        let mut d = DVector::zeros(n - 1);
        for j in 0..n - 1 {
            let den = knots[j + k] - knots[j + 1];
            d[j] = if den > 0.0 {
                (k as f64 - 1.0) * (c[j + 1] - c[j]) / den
            } else {
                0.0
            };
        }
        let sub = KnotVector::new(knots[1..knots.len() - 1].to_vec(), k - 1)?;
        SplineFunction::new(SplineSpace::new(sub), d)
    }

    /// One-sided derivative value of the given order (0 = the function itself).
    pub fn eval_derivative(&self, t: f64, order: usize, side: Side) -> Result<f64> {
        let mut f = self.clone();
        for _ in 0..order {
            f = f.derivative()?;
        }
        f.eval_side(t, side)
    }
}

/// Lagrange interpolation weights: ell_j(t) over the given pairwise distinct
/// nodes. The weights sum to one and reproduce any polynomial of degree
/// len(nodes) - 1 from its node values.
pub fn lagrange_weights(nodes: &[f64], t: f64) -> Result<Vec<f64>> {
    for i in 0..nodes.len() {
        for j in i + 1..nodes.len() {
            if nodes[i] == nodes[j] {
                return Err(Error::InvalidNodes(format!(
                    "duplicate node {} at positions {i} and {j}",
                    nodes[i]
                )));
            }
        }
    }
    let mut w = vec![1.0; nodes.len()];
    for (j, wj) in w.iter_mut().enumerate() {
        for (r, &xr) in nodes.iter().enumerate() {
            if r != j {
                *wj *= (t - xr) / (nodes[j] - xr);
            }
        }
    }
    Ok(w)
}
