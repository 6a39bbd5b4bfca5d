//! Quadrature rules and tabulated interpolants shared by the model and kernels.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

/// Composite Simpson rule on `panels` panels (each panel uses its midpoint).
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
    let n = panels.max(1);
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 0..n {
        let left = a + i as f64 * h;
        acc += 4.0 * f(left + 0.5 * h);
        if i > 0 {
            acc += 2.0 * f(left);
        }
    }
    acc * h / 6.0
}

// Kronrod 15-point abscissae and weights with the embedded Gauss 7-point weights.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        kron += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kron * h, ((kron - gauss) * h).abs())
}

struct Segment {
    a: f64,
    b: f64,
    value: f64,
    err: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.err == other.err
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> Ordering {
        self.err.total_cmp(&other.err)
    }
}

/// Globally adaptive Gauss-Kronrod (7/15) integration.
///
/// Stops when the summed error estimate is below `max(abs_tol, rel_tol*|I|)`.
pub fn adaptive<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    rel_tol: f64,
    abs_tol: f64,
    max_segments: usize,
) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let (v, e) = gk15(&f, a, b);
    let mut heap = BinaryHeap::new();
    heap.push(Segment { a, b, value: v, err: e });
    let mut total = v;
    let mut err = e;
    while err > abs_tol.max(rel_tol * total.abs()) {
        if heap.len() >= max_segments {
            return Err(Error::QuadratureFailure { tol: rel_tol, budget: max_segments });
        }
        let worst = heap.pop().expect("heap is never empty here");
        let mid = 0.5 * (worst.a + worst.b);
        let (v1, e1) = gk15(&f, worst.a, mid);
        let (v2, e2) = gk15(&f, mid, worst.b);
        total += v1 + v2 - worst.value;
        err += e1 + e2 - worst.err;
        heap.push(Segment { a: worst.a, b: mid, value: v1, err: e1 });
        heap.push(Segment { a: mid, b: worst.b, value: v2, err: e2 });
    }
    // re-sum to shed the rounding drift of the running total
    Ok(heap.iter().map(|s| s.value).sum())
}

/// Cubic Hermite interpolant on a uniform grid, built from values and slopes.
#[derive(Debug, Clone)]
pub struct HermiteTable {
    x0: f64,
    h: f64,
    y: Vec<f64>,
    dy: Vec<f64>,
}

impl HermiteTable {
    pub fn new(x0: f64, h: f64, y: Vec<f64>, dy: Vec<f64>) -> Self {
        assert_eq!(y.len(), dy.len());
        assert!(y.len() >= 2 && h > 0.0);
        Self { x0, h, y, dy }
    }

    pub fn x_min(&self) -> f64 {
        self.x0
    }

    pub fn x_max(&self) -> f64 {
        self.x0 + self.h * (self.y.len() - 1) as f64
    }

    pub fn nodes(&self) -> &[f64] {
        &self.y
    }

    fn locate(&self, x: f64) -> (usize, f64) {
        let last = self.y.len() - 2;
        let s = ((x - self.x0) / self.h).max(0.0);
        let i = (s.floor() as usize).min(last);
        (i, (s - i as f64).clamp(0.0, 1.0))
    }

    /// Value at `x`, clamped to the table range.
    pub fn eval(&self, x: f64) -> f64 {
        let (i, s) = self.locate(x);
        let (y0, y1) = (self.y[i], self.y[i + 1]);
        let (m0, m1) = (self.dy[i] * self.h, self.dy[i + 1] * self.h);
        let s2 = s * s;
        let s3 = s2 * s;
        (2.0 * s3 - 3.0 * s2 + 1.0) * y0
            + (s3 - 2.0 * s2 + s) * m0
            + (-2.0 * s3 + 3.0 * s2) * y1
            + (s3 - s2) * m1
    }

    /// Derivative of the interpolant at `x`.
    pub fn deriv(&self, x: f64) -> f64 {
        let (i, s) = self.locate(x);
        let (y0, y1) = (self.y[i], self.y[i + 1]);
        let (m0, m1) = (self.dy[i] * self.h, self.dy[i + 1] * self.h);
        let s2 = s * s;
        ((6.0 * s2 - 6.0 * s) * y0
            + (3.0 * s2 - 4.0 * s + 1.0) * m0
            + (-6.0 * s2 + 6.0 * s) * y1
            + (3.0 * s2 - 2.0 * s) * m1)
            / self.h
    }
}
