//! Double-double arithmetic (about 106 significant bits) for reference
//! values of the kernel closed form.

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

pub const PI: Dd = Dd { hi: std::f64::consts::PI, lo: 1.224_646_799_147_353_2e-16 };

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub fn new(x: f64) -> Self {
        Self { hi: x, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return Self::ZERO;
        }
        // one Newton step from the double root doubles the precision
        let x = self.hi.sqrt();
        let xx = Dd::new(x) * Dd::new(x);
        let corr = (self - xx).hi / (2.0 * x);
        let (h, l) = quick_two_sum(x, corr);
        Dd { hi: h, lo: l }
    }

    fn scale(self, f: f64) -> Self {
        Dd { hi: self.hi * f, lo: self.lo * f }
    }

    /// `(sin x, cos x)` by Taylor series on `x / 256` and eight doublings.
    pub fn sin_cos(self) -> (Dd, Dd) {
        let y = self.scale(1.0 / 256.0);
        let y2 = y * y;
        let (mut s, mut c) = (y, Dd::ONE);
        let (mut ts, mut tc) = (y, Dd::ONE);
        for k in 1..16 {
            let k = k as f64;
            ts = -(ts * y2) / Dd::new((2.0 * k) * (2.0 * k + 1.0));
            tc = -(tc * y2) / Dd::new((2.0 * k - 1.0) * (2.0 * k));
            s = s + ts;
            c = c + tc;
        }
        for _ in 0..8 {
            let s2 = (s * c).scale(2.0);
            c = c * c - s * s;
            s = s2;
        }
        (s, c)
    }

    /// Angle in `[0, π]` with the given (unnormalized) sine and cosine.
    pub fn angle(sin: Dd, cos: Dd) -> Dd {
        let r = (sin * sin + cos * cos).sqrt();
        let (st, ct) = (sin / r, cos / r);
        let theta0 = Dd::new(sin.to_f64().atan2(cos.to_f64()));
        let (s0, c0) = theta0.sin_cos();
        // sin(θ − θ0) is the remaining correction to first order
        theta0 + (st * c0 - ct * s0)
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        self + (-o)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        let e = e + (self.hi * o.lo + self.lo * o.hi);
        let (hi, lo) = quick_two_sum(p, e);
        Dd { hi, lo }
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self - o * Dd::new(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Dd::new(q2);
        let q3 = r.hi / o.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo } + Dd::new(q3)
    }
}

/// Closed-form Neural Spline kernel of two homogeneous vectors
/// `u = (x, φ, 1)`, evaluated in double-double.
pub fn kernel(u: &[f64], v: &[f64]) -> Dd {
    let u: Vec<Dd> = u.iter().map(|&c| Dd::new(c)).collect();
    let v: Vec<Dd> = v.iter().map(|&c| Dd::new(c)).collect();
    let dot = |p: &[Dd], q: &[Dd]| p.iter().zip(q).fold(Dd::ZERO, |acc, (a, b)| acc + *a * *b);
    let a = dot(&u, &u).sqrt();
    let b = dot(&v, &v).sqrt();
    let cos = dot(&u, &v);
    // Lagrange identity: |u|²|v|² − (u·v)² without cancellation
    let mut cross2 = Dd::ZERO;
    for i in 0..u.len() {
        for j in i + 1..u.len() {
            let c = u[i] * v[j] - u[j] * v[i];
            cross2 = cross2 + c * c;
        }
    }
    let sin = cross2.sqrt();
    let theta = Dd::angle(sin, cos);
    let ab = a * b;
    let (s, c) = (sin / ab, cos / ab);
    ab / PI * (s + (PI - theta).scale(2.0) * c)
}

/// Homogeneous lift of a position and feature.
pub fn lift(x: &[f64; 3], feature: &[f64]) -> Vec<f64> {
    let mut u = x.to_vec();
    u.extend_from_slice(feature);
    u.push(1.0);
    u
}
