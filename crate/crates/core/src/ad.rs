//! Scalar abstraction shared by plain evaluation (`f64`) and reverse-mode
//! differentiation ([`Var`]).
//!
//! All motion and loss kernels are written once against [`Real`]. Running
//! them with `f64` gives values; running them with [`Var`] records every
//! arithmetic operation on a thread-local tape so that [`Tape::gradient`]
//! can sweep it backwards.

use std::cell::Cell;
use std::fmt::Debug;
use std::marker::PhantomData;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

pub trait Real:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + AddAssign
{
    fn cst(v: f64) -> Self;
    fn value(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn abs(self) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    fn one() -> Self {
        Self::cst(1.0)
    }

    fn max0(self) -> Self {
        if self.value() > 0.0 {
            self
        } else {
            Self::zero()
        }
    }
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
}

const NO_PARENT: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct Node {
    a: u32,
    da: f64,
    b: u32,
    db: f64,
}

/// Operation record of one tape. Buffers keep their capacity between
/// tapes on the same thread so repeated evaluations reuse memory.
#[derive(Default)]
struct Record {
    nodes: Vec<Node>,
    adjoints: Vec<f64>,
}

thread_local! {
    /// The record of the tape active on this thread, or null.
    static ACTIVE: Cell<*mut Record> = const { Cell::new(std::ptr::null_mut()) };
    static SPARE: Cell<Option<Box<Record>>> = const { Cell::new(None) };
}

#[inline]
fn push(node: Node) -> u32 {
    let rec = ACTIVE.with(Cell::get);
    assert!(!rec.is_null(), "Var arithmetic outside of an active Tape");
    // SAFETY: a non-null ACTIVE points into the Box owned by the Tape alive
    // on this thread (Tape is !Send and clears ACTIVE on drop), and no other
    // reference into the record is held while arithmetic runs.
    let nodes = unsafe { &mut (*rec).nodes };
    let idx = nodes.len() as u32;
    nodes.push(node);
    idx
}

/// A scalar recorded on the active [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var {
    idx: u32,
    val: f64,
}

impl Var {
    #[inline]
    fn unary(self, val: f64, d: f64) -> Var {
        if self.idx == NO_PARENT {
            return Var::cst(val);
        }
        let idx = push(Node {
            a: self.idx,
            da: d,
            b: NO_PARENT,
            db: 0.0,
        });
        Var { idx, val }
    }

    #[inline]
    fn binary(self, other: Var, val: f64, da: f64, db: f64) -> Var {
        if self.idx == NO_PARENT && other.idx == NO_PARENT {
            return Var::cst(val);
        }
        let idx = push(Node {
            a: self.idx,
            da,
            b: other.idx,
            db,
        });
        Var { idx, val }
    }
}

impl Real for Var {
    #[inline]
    fn cst(v: f64) -> Self {
        Var {
            idx: NO_PARENT,
            val: v,
        }
    }
    #[inline]
    fn value(self) -> f64 {
        self.val
    }
    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        let d = if s > 0.0 { 0.5 / s } else { 0.0 };
        self.unary(s, d)
    }
    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }
    fn abs(self) -> Self {
        let d = if self.val > 0.0 {
            1.0
        } else if self.val < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.unary(self.val.abs(), d)
    }
}

impl Add for Var {
    type Output = Var;
    #[inline]
    fn add(self, rhs: Var) -> Var {
        self.binary(rhs, self.val + rhs.val, 1.0, 1.0)
    }
}

impl Sub for Var {
    type Output = Var;
    #[inline]
    fn sub(self, rhs: Var) -> Var {
        self.binary(rhs, self.val - rhs.val, 1.0, -1.0)
    }
}

impl Mul for Var {
    type Output = Var;
    #[inline]
    fn mul(self, rhs: Var) -> Var {
        self.binary(rhs, self.val * rhs.val, rhs.val, self.val)
    }
}

impl Div for Var {
    type Output = Var;
    #[inline]
    fn div(self, rhs: Var) -> Var {
        let q = self.val / rhs.val;
        self.binary(rhs, q, 1.0 / rhs.val, -q / rhs.val)
    }
}

impl Neg for Var {
    type Output = Var;
    #[inline]
    fn neg(self) -> Var {
        self.unary(-self.val, -1.0)
    }
}

impl Add<f64> for Var {
    type Output = Var;
    #[inline]
    fn add(self, rhs: f64) -> Var {
        self.unary(self.val + rhs, 1.0)
    }
}

impl Sub<f64> for Var {
    type Output = Var;
    #[inline]
    fn sub(self, rhs: f64) -> Var {
        self.unary(self.val - rhs, 1.0)
    }
}

impl Mul<f64> for Var {
    type Output = Var;
    #[inline]
    fn mul(self, rhs: f64) -> Var {
        self.unary(self.val * rhs, rhs)
    }
}

impl Div<f64> for Var {
    type Output = Var;
    #[inline]
    fn div(self, rhs: f64) -> Var {
        self.unary(self.val / rhs, 1.0 / rhs)
    }
}

impl AddAssign for Var {
    #[inline]
    fn add_assign(&mut self, rhs: Var) {
        *self = *self + rhs;
    }
}

/// Owns the operation record for one gradient evaluation.
///
/// Only one tape may be active per thread. Dropping it discards the record.
pub struct Tape {
    record: *mut Record,
    _not_send: PhantomData<*const ()>,
}

impl Tape {
    pub fn new() -> Tape {
        assert!(
            ACTIVE.with(Cell::get).is_null(),
            "a Tape is already active on this thread"
        );
        let mut rec = SPARE.with(Cell::take).unwrap_or_default();
        rec.nodes.clear();
        let record = Box::into_raw(rec);
        ACTIVE.with(|a| a.set(record));
        Tape {
            record,
            _not_send: PhantomData,
        }
    }

    fn with_record<R>(&self, f: impl FnOnce(&mut Record) -> R) -> R {
        // SAFETY: the record is owned by this tape and `f` only reads and
        // sweeps it; no Var arithmetic (which pushes) runs meanwhile.
        f(unsafe { &mut *self.record })
    }

    /// Registers an independent input.
    pub fn var(&self, value: f64) -> Var {
        let idx = push(Node {
            a: NO_PARENT,
            da: 0.0,
            b: NO_PARENT,
            db: 0.0,
        });
        Var { idx, val: value }
    }

    pub fn len(&self) -> usize {
        self.with_record(|rec| rec.nodes.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adjoints of `output` with respect to every recorded node.
    pub fn gradient(&self, output: Var) -> Gradient {
        self.with_record(|rec| {
            sweep(&rec.nodes, &mut rec.adjoints, output);
            Gradient(rec.adjoints.clone())
        })
    }

    /// Adjoints of `output` with respect to `inputs` only.
    pub fn gradient_wrt(&self, output: Var, inputs: &[Var]) -> Vec<f64> {
        self.with_record(|rec| {
            sweep(&rec.nodes, &mut rec.adjoints, output);
            inputs
                .iter()
                .map(|v| if v.idx == NO_PARENT { 0.0 } else { rec.adjoints[v.idx as usize] })
                .collect()
        })
    }
}

fn sweep(nodes: &[Node], adj: &mut Vec<f64>, output: Var) {
    adj.clear();
    adj.resize(nodes.len(), 0.0);
    if output.idx == NO_PARENT {
        return;
    }
    adj[output.idx as usize] = 1.0;
    for i in (0..=output.idx as usize).rev() {
        let g = adj[i];
        if g == 0.0 {
            continue;
        }
        let n = nodes[i];
        if n.a != NO_PARENT {
            adj[n.a as usize] += n.da * g;
        }
        if n.b != NO_PARENT {
            adj[n.b as usize] += n.db * g;
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Drop for Tape {
    fn drop(&mut self) {
        ACTIVE.with(|a| a.set(std::ptr::null_mut()));
        // SAFETY: `record` came from Box::into_raw in Tape::new and is
        // released exactly once, here.
        let rec = unsafe { Box::from_raw(self.record) };
        SPARE.with(|s| s.set(Some(rec)));
    }
}

/// Adjoint vector produced by [`Tape::gradient`].
pub struct Gradient(Vec<f64>);

impl Gradient {
    pub fn wrt(&self, v: Var) -> f64 {
        if v.idx == NO_PARENT {
            0.0
        } else {
            self.0[v.idx as usize]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f<S: Real>(x: S, y: S) -> S {
        (x * y + x.exp() / y).sqrt() - (x - y).abs() * 3.0
    }

    #[test]
    fn matches_finite_differences() {
        let (x0, y0) = (0.7, 1.3);
        let tape = Tape::new();
        let x = tape.var(x0);
        let y = tape.var(y0);
        let out = f(x, y);
        let g = tape.gradient(out);
        let h = 1e-6;
        let dx = (f(x0 + h, y0) - f(x0 - h, y0)) / (2.0 * h);
        let dy = (f(x0, y0 + h) - f(x0, y0 - h)) / (2.0 * h);
        assert!((g.wrt(x) - dx).abs() < 1e-8);
        assert!((g.wrt(y) - dy).abs() < 1e-8);
        assert!((out.value() - f(x0, y0)).abs() < 1e-15);
    }

    #[test]
    fn constants_are_not_recorded() {
        let tape = Tape::new();
        let c = Var::cst(2.0) * Var::cst(3.0) + 1.0;
        assert_eq!(c.value(), 7.0);
        assert!(tape.is_empty());
        let x = tape.var(1.0);
        let y = x * c;
        assert_eq!(tape.gradient(y).wrt(x), 7.0);
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        let tape = Tape::new();
        let x = tape.var(3.0);
        let y = x * x + x;
        assert_eq!(tape.gradient(y).wrt(x), 7.0);
    }

    #[test]
    fn sqrt_at_zero_has_zero_slope() {
        let tape = Tape::new();
        let x = tape.var(0.0);
        let y = x.sqrt();
        assert_eq!(tape.gradient(y).wrt(x), 0.0);
    }
}
