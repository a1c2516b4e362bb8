//! Dense-vector math and a scalar reverse-mode differentiation core.
//!
//! Everything is 64-bit: the gradient checks this crate promises (relative
//! error ≤ 1e-4 against central differences) are not reliable in f32.

mod scalar;
pub mod tape;

pub use scalar::{lift, Scalar};
pub use tape::{Gradients, OpKind, Tape, Var};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("input must be non-empty")]
    EmptyInput,
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("inverse temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("matrix shape {rows}x{cols} does not match {len} elements")]
    BadShape { rows: usize, cols: usize, len: usize },
    #[error("gradient is singular at a {op:?} node")]
    SingularGradient { op: OpKind },
    #[error("variable does not belong to this tape")]
    ForeignVar,
}

/// Dense vector of finite 64-bit floats with a fixed, positive dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vec64 {
    data: Vec<f64>,
}

impl Vec64 {
    pub fn new(data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.is_empty() {
            return Err(NumericsError::EmptyInput);
        }
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(NumericsError::NonFinite { index });
        }
        Ok(Self { data })
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "dimension must be positive");
        Self {
            data: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

impl TryFrom<Vec<f64>> for Vec64 {
    type Error = NumericsError;
    fn try_from(data: Vec<f64>) -> Result<Self, NumericsError> {
        Self::new(data)
    }
}

impl From<Vec64> for Vec<f64> {
    fn from(v: Vec64) -> Vec<f64> {
        v.data
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat64 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat64 {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::BadShape {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Mat64 {
        let mut out = Mat64::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "matvec dimension mismatch");
        (0..self.rows)
            .map(|r| dot_s(self.row(r), x))
            .collect()
    }
}

/// Cosine similarity together with the zero-vector degeneracy flag.
///
/// A zero vector yields value 0 with `degenerate` set instead of an error:
/// all-clamped attention rows legitimately produce zero pooled vectors, and
/// batch scoring has to stay total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub degenerate: bool,
}

// ---- generic kernels -------------------------------------------------

pub fn dot_s<S: Scalar>(a: &[S], b: &[S]) -> S {
    assert_eq!(a.len(), b.len(), "dot dimension mismatch");
    assert!(!a.is_empty(), "dot on empty slices");
    let mut acc = a[0] * b[0];
    for i in 1..a.len() {
        acc = acc + a[i] * b[i];
    }
    acc
}

pub fn l2norm_s<S: Scalar>(a: &[S]) -> S {
    dot_s(a, a).sqrt()
}

pub fn cosine_s<S: Scalar>(a: &[S], b: &[S]) -> (S, bool) {
    assert_eq!(a.len(), b.len(), "cosine dimension mismatch");
    let sq_a = dot_s(a, a);
    let sq_b = dot_s(b, b);
    if sq_a.value() == 0.0 || sq_b.value() == 0.0 {
        // Detached zero: value 0, no gradient flows into either input.
        return (a[0].scale(0.0), true);
    }
    ((dot_s(a, b)) / (sq_a.sqrt() * sq_b.sqrt()), false)
}

/// Softmax of `lambda * xs`, computed with max-subtraction.
pub fn softmax_s<S: Scalar>(xs: &[S], lambda: f64) -> Vec<S> {
    assert!(!xs.is_empty(), "softmax on empty input");
    let mut max = xs[0];
    for &x in &xs[1..] {
        if x.value() > max.value() {
            max = x;
        }
    }
    let exps: Vec<S> = xs
        .iter()
        .map(|&x| ((x - max).scale(lambda)).exp())
        .collect();
    let mut z = exps[0];
    for &e in &exps[1..] {
        z = z + e;
    }
    exps.into_iter().map(|e| e / z).collect()
}

pub fn matvec_s<S: Scalar>(w: &[S], rows: usize, cols: usize, x: &[S]) -> Vec<S> {
    assert_eq!(w.len(), rows * cols, "matvec weight shape mismatch");
    assert_eq!(x.len(), cols, "matvec input dimension mismatch");
    (0..rows)
        .map(|r| dot_s(&w[r * cols..(r + 1) * cols], x))
        .collect()
}

/// Σ_j weights[j] · vecs[j], the attention-pooled representation.
pub fn weighted_sum_s<S: Scalar>(weights: &[S], vecs: &[Vec<S>]) -> Vec<S> {
    assert_eq!(weights.len(), vecs.len(), "weighted_sum length mismatch");
    assert!(!vecs.is_empty(), "weighted_sum on empty input");
    let dim = vecs[0].len();
    let mut out: Vec<S> = vecs[0].iter().map(|&v| v * weights[0]).collect();
    for j in 1..vecs.len() {
        debug_assert_eq!(vecs[j].len(), dim);
        for c in 0..dim {
            out[c] = out[c] + vecs[j][c] * weights[j];
        }
    }
    out
}

// ---- f64 surface -----------------------------------------------------

pub fn dot(a: &Vec64, b: &Vec64) -> Result<f64, NumericsError> {
    if a.dim() != b.dim() {
        return Err(NumericsError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(dot_s(a.as_slice(), b.as_slice()))
}

pub fn l2norm(a: &Vec64) -> f64 {
    l2norm_s(a.as_slice())
}

pub fn cosine(a: &Vec64, b: &Vec64) -> Result<Cosine, NumericsError> {
    if a.dim() != b.dim() {
        return Err(NumericsError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let (value, degenerate) = cosine_s(a.as_slice(), b.as_slice());
    Ok(Cosine { value, degenerate })
}

pub fn softmax(xs: &[f64], lambda: f64) -> Result<Vec<f64>, NumericsError> {
    if xs.is_empty() {
        return Err(NumericsError::EmptyInput);
    }
    if lambda <= 0.0 {
        return Err(NumericsError::NonPositiveTemperature(lambda));
    }
    Ok(softmax_s(xs, lambda))
}

/// `max(x, 0)`; the subgradient at 0 is 0, so inactive similarities receive
/// no gradient.
pub fn clamp_plus(x: f64) -> f64 {
    x.relu()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> Vec64 {
        Vec64::new(xs.to_vec()).unwrap()
    }

    #[test]
    fn dot_hand_values() {
        assert_eq!(dot(&v(&[1.0, 0.0]), &v(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(dot(&v(&[1.0, 2.0]), &v(&[3.0, 4.0])).unwrap(), 11.0);
    }

    #[test]
    fn dot_dimension_mismatch() {
        let err = dot(&v(&[1.0]), &v(&[1.0, 2.0])).unwrap_err();
        assert!(matches!(err, NumericsError::DimensionMismatch { .. }));
    }

    #[test]
    fn l2norm_hand_values() {
        assert_eq!(l2norm(&v(&[3.0, 4.0])), 5.0);
        assert_eq!(l2norm(&v(&[0.0, 0.0])), 0.0);
    }

    #[test]
    fn cosine_hand_values() {
        assert_eq!(
            cosine(&v(&[1.0, 0.0]), &v(&[1.0, 0.0])).unwrap().value,
            1.0
        );
        assert_eq!(
            cosine(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap().value,
            0.0
        );
        assert_relative_eq!(
            cosine(&v(&[1.0, 1.0]), &v(&[1.0, 0.0])).unwrap().value,
            0.7071067811865475,
            max_relative = 1e-15
        );
    }

    #[test]
    fn cosine_zero_vector_degenerate() {
        let c = cosine(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])).unwrap();
        assert_eq!(c.value, 0.0);
        assert!(c.degenerate);
    }

    #[test]
    fn softmax_hand_values() {
        let s = softmax(&[1.0, 0.0], 1.0).unwrap();
        assert_relative_eq!(s[0], 0.7310585786300049, max_relative = 1e-14);
        assert_relative_eq!(s[1], 0.2689414213699951, max_relative = 1e-14);

        let s = softmax(&[0.3, 0.3, 0.3], 7.0).unwrap();
        for x in s {
            assert_relative_eq!(x, 1.0 / 3.0, max_relative = 1e-14);
        }
    }

    #[test]
    fn softmax_large_lambda_is_one_hot() {
        let s = softmax(&[0.2, 0.9, 0.1], 1e6).unwrap();
        assert!((s[1] - 1.0).abs() < 1e-9);
        assert!(s[0] < 1e-9 && s[2] < 1e-9);
    }

    #[test]
    fn softmax_rejects_empty_and_bad_lambda() {
        assert!(matches!(softmax(&[], 1.0), Err(NumericsError::EmptyInput)));
        assert!(matches!(
            softmax(&[1.0], 0.0),
            Err(NumericsError::NonPositiveTemperature(_))
        ));
    }

    #[test]
    fn clamp_plus_values() {
        assert_eq!(clamp_plus(-0.5), 0.0);
        assert_eq!(clamp_plus(0.7), 0.7);
        assert_eq!(clamp_plus(0.0), 0.0);
    }

    #[test]
    fn vec64_rejects_non_finite() {
        assert!(Vec64::new(vec![1.0, f64::NAN]).is_err());
        assert!(Vec64::new(vec![f64::INFINITY]).is_err());
        assert!(Vec64::new(vec![]).is_err());
    }

    #[test]
    fn matvec_identity() {
        let m = Mat64::identity(3);
        assert_eq!(m.matvec(&[1.0, 2.0, 3.0]), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_known_closed_forms() {
        // d(a·b)/da = b, d(a·b)/db = a
        let tape = Tape::new();
        let a: Vec<Var> = [1.0, 2.0, 3.0].iter().map(|&x| tape.leaf(x)).collect();
        let b: Vec<Var> = [4.0, 5.0, 6.0].iter().map(|&x| tape.leaf(x)).collect();
        let y = dot_s(&a, &b);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt_slice(&a), vec![4.0, 5.0, 6.0]);
        assert_eq!(g.wrt_slice(&b), vec![1.0, 2.0, 3.0]);

        // d||a||/da = a/||a||
        let tape = Tape::new();
        let a: Vec<Var> = [3.0, 4.0].iter().map(|&x| tape.leaf(x)).collect();
        let y = l2norm_s(&a);
        let g = tape.backward(y).unwrap();
        assert_relative_eq!(g.wrt(a[0]), 3.0 / 5.0, max_relative = 1e-14);
        assert_relative_eq!(g.wrt(a[1]), 4.0 / 5.0, max_relative = 1e-14);
    }

    /// Central finite difference of a scalar function of a flat input.
    fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
        let mut plus = x.to_vec();
        let mut minus = x.to_vec();
        plus[i] += h;
        minus[i] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    }

    /// Checks tape gradients of `build` against central differences at `x`.
    fn assert_fd_matches(build: &dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>, x: &[f64]) {
        let tape = Tape::new();
        let leaves: Vec<Var> = x.iter().map(|&v| tape.leaf(v)).collect();
        let out = build(&tape, &leaves);
        let grads = tape.backward(out).unwrap();
        let f = |xs: &[f64]| {
            let t = Tape::new();
            let ls: Vec<Var> = xs.iter().map(|&v| t.leaf(v)).collect();
            build(&t, &ls).value()
        };
        for i in 0..x.len() {
            let fd = central_diff(&f, x, i, 1e-5);
            let an = grads.wrt(leaves[i]);
            let denom = fd.abs().max(1.0);
            assert!(
                (an - fd).abs() / denom <= 1e-4,
                "grad mismatch at {i}: analytic {an}, fd {fd}"
            );
        }
    }

    #[test]
    fn fd_check_ops_over_100_seeds() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = rng.gen_range(2..=8);
            let x: Vec<f64> = (0..2 * d).map(|_| rng.gen_range(-2.0..2.0)).collect();

            // dot of the two halves
            assert_fd_matches(
                &move |_t, vars| dot_s(&vars[..d], &vars[d..]),
                &x,
            );
            // norm of the first half (keep away from the origin)
            let mut xn = x.clone();
            xn[0] += 3.0;
            assert_fd_matches(&move |_t, vars| l2norm_s(&vars[..d]), &xn);
            // cosine of halves
            assert_fd_matches(
                &move |_t, vars| cosine_s(&vars[..d], &vars[d..]).0,
                &xn,
            );
            // random linear functional of a softmax (covers the full Jacobian)
            let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let lambda = rng.gen_range(0.5..4.0);
            let wc = w.clone();
            assert_fd_matches(
                &move |_t, vars| {
                    let sm = softmax_s(&vars[..d], lambda);
                    let mut acc = sm[0].scale(wc[0]);
                    for j in 1..d {
                        acc = acc + sm[j].scale(wc[j]);
                    }
                    acc
                },
                &x,
            );
            // relu away from the kink
            let mut xr = x.clone();
            for v in &mut xr {
                if v.abs() < 1e-3 {
                    *v = 0.5;
                }
            }
            assert_fd_matches(
                &move |_t, vars| {
                    let mut acc = vars[0].relu();
                    for &v in &vars[1..d] {
                        acc = acc + v.relu();
                    }
                    acc
                },
                &xr,
            );
        }
    }

    proptest! {
        #[test]
        // Input range mirrors the attention domain: normalized clamped
        // cosines in [0, 1] scaled by a moderate inverse temperature.
        // (Far outside it, exp underflow can make an entry exactly 0.)
        fn softmax_sums_to_one_and_shift_invariant(
            xs in proptest::collection::vec(-3.0f64..3.0, 1..12),
            c in -5.0f64..5.0,
            lambda in 0.1f64..20.0,
        ) {
            let s = softmax(&xs, lambda).unwrap();
            let sum: f64 = s.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(s.iter().all(|&p| p > 0.0));

            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let s2 = softmax(&shifted, lambda).unwrap();
            for (a, b) in s.iter().zip(&s2) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn cosine_positive_scale_invariant(
            xs in proptest::collection::vec(0.1f64..3.0, 2..8),
            ys in proptest::collection::vec(0.1f64..3.0, 2..8),
            k in 0.01f64..100.0,
            m in 0.01f64..100.0,
        ) {
            let n = xs.len().min(ys.len());
            let a = Vec64::new(xs[..n].to_vec()).unwrap();
            let b = Vec64::new(ys[..n].to_vec()).unwrap();
            let ka = Vec64::new(xs[..n].iter().map(|x| x * k).collect()).unwrap();
            let mb = Vec64::new(ys[..n].iter().map(|y| y * m).collect()).unwrap();
            let c1 = cosine(&a, &b).unwrap().value;
            let c2 = cosine(&ka, &mb).unwrap().value;
            prop_assert!((c1 - c2).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(&c1));
        }
    }
}
