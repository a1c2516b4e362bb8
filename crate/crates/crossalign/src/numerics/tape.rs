//! Wengert-list reverse-mode differentiation for scalars.
//!
//! Operations on [`Var`] append nodes with precomputed local partials to a
//! [`Tape`]; [`Tape::backward`] replays the list once in reverse to obtain
//! the derivative of one output with respect to every recorded node.
//!
//! A tape is single-writer: concurrent gradient evaluations each need
//! their own tape. Forward-only scoring never touches a tape at all.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::scalar::Scalar;
use super::NumericsError;

/// Operation kind recorded per node, kept for diagnostics only: the
/// backward sweep runs off the stored partials.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Sqrt,
    Exp,
    Ln,
    Relu,
    Scale,
    Shift,
}

#[derive(Debug, Clone, Copy)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
    op: OpKind,
}

/// Append-only record of a scalar computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to one recorded scalar. Cheap to copy; carries its current value
/// so forward arithmetic never re-reads the tape.
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: u32,
    value: f64,
}

/// Derivatives of one output with respect to every node of its tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Record a differentiable input.
    pub fn leaf(&self, value: f64) -> Var<'_> {
        let index = self.push(Node {
            parents: [0, 0],
            partials: [0.0, 0.0],
            op: OpKind::Leaf,
        });
        Var {
            tape: self,
            index,
            value,
        }
    }

    /// Record a value that participates in arithmetic but whose gradient is
    /// never read. Structurally identical to a leaf.
    pub fn constant(&self, value: f64) -> Var<'_> {
        self.leaf(value)
    }

    fn push(&self, node: Node) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        assert!(index <= u32::MAX as usize, "tape overflow");
        nodes.push(node);
        index as u32
    }

    fn unary(&self, op: OpKind, parent: u32, partial: f64, value: f64) -> Var<'_> {
        let index = self.push(Node {
            parents: [parent, parent],
            partials: [partial, 0.0],
            op,
        });
        Var {
            tape: self,
            index,
            value,
        }
    }

    fn binary(&self, op: OpKind, a: u32, b: u32, pa: f64, pb: f64, value: f64) -> Var<'_> {
        let index = self.push(Node {
            parents: [a, b],
            partials: [pa, pb],
            op,
        });
        Var {
            tape: self,
            index,
            value,
        }
    }

    /// Reverse sweep from `output` back to the leaves.
    ///
    /// Each node is visited exactly once, so repeated use of a value (as in
    /// `x + x`) accumulates correctly. Fails if `output` lives on another
    /// tape or if a non-finite derivative shows up, e.g. the norm gradient
    /// at the zero vector.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients, NumericsError> {
        if !std::ptr::eq(output.tape, self) {
            return Err(NumericsError::ForeignVar);
        }
        let nodes = self.nodes.borrow();
        let out = output.index as usize;
        debug_assert!(out < nodes.len());

        let mut grads = vec![0.0f64; nodes.len()];
        grads[out] = 1.0;
        for i in (0..=out).rev() {
            let g = grads[i];
            if g == 0.0 {
                continue;
            }
            let node = nodes[i];
            for side in 0..2 {
                let p = node.partials[side];
                if p == 0.0 {
                    continue;
                }
                let contribution = g * p;
                if !contribution.is_finite() {
                    return Err(NumericsError::SingularGradient { op: node.op });
                }
                grads[node.parents[side] as usize] += contribution;
            }
        }
        Ok(Gradients { grads })
    }
}

impl<'t> Var<'t> {
    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    fn same_tape(self, other: Var<'t>) {
        debug_assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }
}

impl Gradients {
    /// ∂output/∂v.
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        self.grads[v.index as usize]
    }

    pub fn wrt_slice(&self, vs: &[Var<'_>]) -> Vec<f64> {
        vs.iter().map(|&v| self.wrt(v)).collect()
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(rhs);
        self.tape
            .binary(OpKind::Add, self.index, rhs.index, 1.0, 1.0, self.value + rhs.value)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(rhs);
        self.tape
            .binary(OpKind::Sub, self.index, rhs.index, 1.0, -1.0, self.value - rhs.value)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(rhs);
        self.tape.binary(
            OpKind::Mul,
            self.index,
            rhs.index,
            rhs.value,
            self.value,
            self.value * rhs.value,
        )
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(rhs);
        self.tape.binary(
            OpKind::Div,
            self.index,
            rhs.index,
            1.0 / rhs.value,
            -self.value / (rhs.value * rhs.value),
            self.value / rhs.value,
        )
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.unary(OpKind::Neg, self.index, -1.0, -self.value)
    }
}

impl<'t> Scalar for Var<'t> {
    type Ctx = &'t Tape;

    fn constant(tape: &'t Tape, value: f64) -> Self {
        tape.constant(value)
    }

    fn value(self) -> f64 {
        self.value
    }

    fn sqrt(self) -> Self {
        let v = self.value.sqrt();
        // Partial 1/(2*sqrt(x)) is +inf at x == 0; backward surfaces that
        // as a singularity error if any gradient actually flows here.
        self.tape.unary(OpKind::Sqrt, self.index, 0.5 / v, v)
    }

    fn exp(self) -> Self {
        let v = self.value.exp();
        self.tape.unary(OpKind::Exp, self.index, v, v)
    }

    fn ln(self) -> Self {
        self.tape
            .unary(OpKind::Ln, self.index, 1.0 / self.value, self.value.ln())
    }

    fn relu(self) -> Self {
        if self.value > 0.0 {
            self.tape.unary(OpKind::Relu, self.index, 1.0, self.value)
        } else {
            self.tape.unary(OpKind::Relu, self.index, 0.0, 0.0)
        }
    }

    fn scale(self, c: f64) -> Self {
        self.tape
            .unary(OpKind::Scale, self.index, c, self.value * c)
    }

    fn shift(self, c: f64) -> Self {
        self.tape
            .unary(OpKind::Shift, self.index, 1.0, self.value + c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reuse_accumulates_once_per_node() {
        // d(x + x)/dx = 2: both parent slots of the add node hit the same leaf.
        let tape = Tape::new();
        let x = tape.leaf(3.0);
        let y = x + x;
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x), 2.0);
    }

    #[test]
    fn shared_subexpression() {
        // z = x*y; w = z + z => dw/dx = 2y, dw/dy = 2x.
        let tape = Tape::new();
        let x = tape.leaf(3.0);
        let y = tape.leaf(5.0);
        let z = x * y;
        let w = z + z;
        let g = tape.backward(w).unwrap();
        assert_eq!(g.wrt(x), 10.0);
        assert_eq!(g.wrt(y), 6.0);
    }

    #[test]
    fn div_and_chain() {
        let tape = Tape::new();
        let x = tape.leaf(2.0);
        let y = tape.leaf(4.0);
        let z = (x / y).exp(); // e^(x/y)
        let g = tape.backward(z).unwrap();
        let e = (0.5f64).exp();
        assert!((g.wrt(x) - e / 4.0).abs() < 1e-12);
        assert!((g.wrt(y) - (-e * 2.0 / 16.0)).abs() < 1e-12);
    }

    #[test]
    fn relu_subgradient_zero_at_origin() {
        let tape = Tape::new();
        let x = tape.leaf(0.0);
        let y = x.relu();
        assert_eq!(y.value(), 0.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x), 0.0);
    }

    #[test]
    fn sqrt_at_zero_is_singular_when_gradient_flows() {
        let tape = Tape::new();
        let x = tape.leaf(0.0);
        let y = x.sqrt();
        let err = tape.backward(y).unwrap_err();
        assert!(matches!(err, NumericsError::SingularGradient { op: OpKind::Sqrt }));
    }

    #[test]
    fn sqrt_at_zero_harmless_when_detached() {
        // Gradient zeroed before the singular node: no error.
        let tape = Tape::new();
        let x = tape.leaf(0.0);
        let y = x.sqrt().scale(0.0).shift(1.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x), 0.0);
    }

    #[test]
    fn backward_rejects_foreign_var() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let x = t1.leaf(1.0);
        assert!(matches!(t2.backward(x), Err(NumericsError::ForeignVar)));
    }
}
