//! Reference-frame algebra.
//!
//! Three-phase quantities map to the stationary αβ frame with the
//! amplitude-invariant Clarke transform, and from there to the synchronous dq
//! frame by a rotation through the grid angle. Zero-sequence is dropped: the
//! transformer equivalent circuit has no path for it.

use std::f64::consts::{FRAC_PI_6, PI};
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use num_complex::Complex64;

const SQRT_3: f64 = 1.732_050_807_568_877_2;

/// A quantity in the standard three-phase abc frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ThreePhase {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl ThreePhase {
    pub const ZERO: ThreePhase = ThreePhase {
        a: 0.0,
        b: 0.0,
        c: 0.0,
    };

    pub fn new(a: f64, b: f64, c: f64) -> Self {
        Self { a, b, c }
    }

    pub fn scale(self, k: f64) -> Self {
        Self::new(self.a * k, self.b * k, self.c * k)
    }

    pub fn get(&self, phase: Phase) -> f64 {
        match phase {
            Phase::A => self.a,
            Phase::B => self.b,
            Phase::C => self.c,
        }
    }

    pub fn get_mut(&mut self, phase: Phase) -> &mut f64 {
        match phase {
            Phase::A => &mut self.a,
            Phase::B => &mut self.b,
            Phase::C => &mut self.c,
        }
    }

    pub fn sum(&self) -> f64 {
        self.a + self.b + self.c
    }
}

/// One leg of a three-phase converter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn index(self) -> usize {
        match self {
            Phase::A => 0,
            Phase::B => 1,
            Phase::C => 2,
        }
    }

    /// Electrical offset of this phase relative to phase a.
    pub fn offset(self) -> f64 {
        -(self.index() as f64) * 2.0 * PI / 3.0
    }

    /// Unit direction of this phase axis in the αβ plane.
    pub fn axis(self) -> Complex64 {
        Complex64::from_polar(1.0, -self.offset())
    }
}

macro_rules! complex_frame {
    ($name:ident) => {
        impl $name {
            pub const ZERO: $name = $name(Complex64 { re: 0.0, im: 0.0 });

            pub fn new(re: f64, im: f64) -> Self {
                Self(Complex64::new(re, im))
            }

            pub fn from_polar(r: f64, theta: f64) -> Self {
                Self(Complex64::from_polar(r, theta))
            }

            pub fn norm(self) -> f64 {
                self.0.norm()
            }

            pub fn arg(self) -> f64 {
                self.0.arg()
            }

            pub fn is_finite(self) -> bool {
                self.0.re.is_finite() && self.0.im.is_finite()
            }
        }

        impl Add for $name {
            type Output = $name;
            fn add(self, rhs: $name) -> $name {
                $name(self.0 + rhs.0)
            }
        }

        impl Sub for $name {
            type Output = $name;
            fn sub(self, rhs: $name) -> $name {
                $name(self.0 - rhs.0)
            }
        }

        impl AddAssign for $name {
            fn add_assign(&mut self, rhs: $name) {
                self.0 += rhs.0;
            }
        }

        impl SubAssign for $name {
            fn sub_assign(&mut self, rhs: $name) {
                self.0 -= rhs.0;
            }
        }

        impl Neg for $name {
            type Output = $name;
            fn neg(self) -> $name {
                $name(-self.0)
            }
        }

        impl Mul<f64> for $name {
            type Output = $name;
            fn mul(self, rhs: f64) -> $name {
                $name(self.0 * rhs)
            }
        }

        impl Mul<Complex64> for $name {
            type Output = $name;
            fn mul(self, rhs: Complex64) -> $name {
                $name(self.0 * rhs)
            }
        }

        impl From<Complex64> for $name {
            fn from(z: Complex64) -> $name {
                $name(z)
            }
        }
    };
}

/// A stationary-frame quantity `ξ_α + jξ_β`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AlphaBeta(pub Complex64);

/// A synchronous-frame quantity `ξ_d + jξ_q`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dq(pub Complex64);

complex_frame!(AlphaBeta);
complex_frame!(Dq);

impl Dq {
    pub fn d(self) -> f64 {
        self.0.re
    }

    pub fn q(self) -> f64 {
        self.0.im
    }
}

/// Amplitude-invariant Clarke transform.
pub fn clarke(x: ThreePhase) -> AlphaBeta {
    let alpha = (2.0 * x.a - x.b - x.c) / 3.0;
    let beta = (x.b - x.c) / SQRT_3;
    AlphaBeta::new(alpha, beta)
}

/// Zero-sequence-free inverse of [`clarke`].
pub fn inverse_clarke(x: AlphaBeta) -> ThreePhase {
    let (alpha, beta) = (x.0.re, x.0.im);
    ThreePhase {
        a: alpha,
        b: -0.5 * alpha + 0.5 * SQRT_3 * beta,
        c: -0.5 * alpha - 0.5 * SQRT_3 * beta,
    }
}

/// Rotates an αβ quantity into the frame whose d-axis sits at `phi`.
pub fn to_dq(x: AlphaBeta, phi: f64) -> Dq {
    Dq(x.0 * Complex64::from_polar(1.0, -phi))
}

pub fn from_dq(x: Dq, phi: f64) -> AlphaBeta {
    AlphaBeta(x.0 * Complex64::from_polar(1.0, phi))
}

/// `e^{-jπ/6}`, the clockwise 30° rotation introduced by the delta winding.
pub fn delta_rotation() -> Complex64 {
    Complex64::from_polar(1.0, -FRAC_PI_6)
}

pub fn delta_rotate(x: AlphaBeta) -> AlphaBeta {
    x * delta_rotation()
}

pub fn inverse_delta_rotate(x: AlphaBeta) -> AlphaBeta {
    x * delta_rotation().conj()
}

/// Maps line quantities to (sum, difference) channels.
pub fn sum_diff(x_i: AlphaBeta, x_ii: AlphaBeta) -> (AlphaBeta, AlphaBeta) {
    (x_i + x_ii, x_i - x_ii)
}

/// Recovers the line quantities from (sum, difference) channels.
pub fn inverse_sum_diff(sum: AlphaBeta, diff: AlphaBeta) -> (AlphaBeta, AlphaBeta) {
    ((sum + diff) * 0.5, (sum - diff) * 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn close(a: AlphaBeta, b: AlphaBeta, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn clarke_examples() {
        assert!(close(
            clarke(ThreePhase::new(1.0, -0.5, -0.5)),
            AlphaBeta::new(1.0, 0.0),
            1e-15
        ));
        assert!(close(clarke(ThreePhase::ZERO), AlphaBeta::ZERO, 0.0));
        assert!(close(
            clarke(ThreePhase::new(1.0, 1.0, 1.0)),
            AlphaBeta::ZERO,
            1e-15
        ));
    }

    #[test]
    fn clarke_matches_complex_row_vector() {
        let x = ThreePhase::new(0.3, -1.2, 2.5);
        let a = Complex64::new(-0.5, SQRT_3 / 2.0);
        let direct = (Complex64::new(x.a, 0.0) + a * x.b + a.conj() * x.c) * (2.0 / 3.0);
        assert!(close(clarke(x), AlphaBeta(direct), 1e-14));
    }

    #[test]
    fn inverse_clarke_examples() {
        let x = inverse_clarke(AlphaBeta::new(1.0, 0.0));
        assert_abs_diff_eq!(x.a, 1.0);
        assert_abs_diff_eq!(x.b, -0.5);
        assert_abs_diff_eq!(x.c, -0.5);
        let y = inverse_clarke(AlphaBeta::new(0.0, 1.0));
        assert_abs_diff_eq!(y.a, 0.0);
        assert_abs_diff_eq!(y.b, 3f64.sqrt() / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(y.c, -(3f64.sqrt()) / 2.0, epsilon = 1e-15);
        assert_eq!(inverse_clarke(AlphaBeta::ZERO), ThreePhase::ZERO);
    }

    #[test]
    fn dq_examples() {
        assert!(close(
            AlphaBeta(to_dq(AlphaBeta::new(1.0, 0.0), 0.0).0),
            AlphaBeta::new(1.0, 0.0),
            0.0
        ));
        let q = to_dq(AlphaBeta::new(0.0, 1.0), PI / 2.0);
        assert_abs_diff_eq!(q.d(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(q.q(), 0.0, epsilon = 1e-15);
        let r = to_dq(AlphaBeta::new(1.0, 0.0), PI / 6.0);
        assert_abs_diff_eq!(r.d(), 0.866_025_403_784_438_6, epsilon = 1e-15);
        assert_abs_diff_eq!(r.q(), -0.5, epsilon = 1e-15);
    }

    #[test]
    fn delta_examples() {
        let r = delta_rotate(AlphaBeta::new(1.0, 0.0));
        assert_abs_diff_eq!(r.0.re, 0.866_025_403_784_438_6, epsilon = 1e-15);
        assert_abs_diff_eq!(r.0.im, -0.5, epsilon = 1e-15);
        assert_eq!(delta_rotate(AlphaBeta::ZERO), AlphaBeta::ZERO);
        let x = AlphaBeta::new(0.3, -0.7);
        let twelve = (0..12).fold(x, |acc, _| delta_rotate(acc));
        assert!(close(twelve, x, 1e-14));
    }

    #[test]
    fn sum_diff_examples() {
        let (s, d) = sum_diff(AlphaBeta::new(1.0, 1.0), AlphaBeta::new(1.0, -1.0));
        assert_eq!(s, AlphaBeta::new(2.0, 0.0));
        assert_eq!(d, AlphaBeta::new(0.0, 2.0));
        let x = AlphaBeta::new(0.2, 0.9);
        let (s, d) = sum_diff(x, x);
        assert_eq!(s, x * 2.0);
        assert_eq!(d, AlphaBeta::ZERO);
        let (i, ii) = inverse_sum_diff(AlphaBeta::new(2.0, 0.0), AlphaBeta::new(0.0, 2.0));
        assert_eq!(i, AlphaBeta::new(1.0, 1.0));
        assert_eq!(ii, AlphaBeta::new(1.0, -1.0));
    }

    #[test]
    fn balanced_set_traces_circle() {
        let amp = 53_900.0;
        for k in 0..720 {
            let th = k as f64 * 2.0 * PI / 720.0;
            let x = ThreePhase::new(
                amp * th.cos(),
                amp * (th - 2.0 * PI / 3.0).cos(),
                amp * (th - 4.0 * PI / 3.0).cos(),
            );
            let z = clarke(x);
            assert!((z.norm() - amp).abs() <= 1e-9 * amp);
        }
    }

    #[test]
    fn phase_axes_follow_clarke() {
        for ph in Phase::ALL {
            let mut x = ThreePhase::ZERO;
            *x.get_mut(ph) = 1.5;
            assert!(close(clarke(x), AlphaBeta(ph.axis() * 1.0), 1e-15));
        }
    }

    proptest! {
        #[test]
        fn clarke_inverse_roundtrip(re in -1e5f64..1e5, im in -1e5f64..1e5) {
            let x = AlphaBeta::new(re, im);
            let back = clarke(inverse_clarke(x));
            prop_assert!((back - x).norm() <= 1e-12 * (1.0 + x.norm()));
            prop_assert!(inverse_clarke(x).sum().abs() <= 1e-9 * (1.0 + x.norm()));
        }

        #[test]
        fn dq_rotation_roundtrip(re in -1e5f64..1e5, im in -1e5f64..1e5, phi in -20.0f64..20.0) {
            let x = AlphaBeta::new(re, im);
            let dq = to_dq(x, phi);
            prop_assert!((dq.norm() - x.norm()).abs() <= 1e-12 * (1.0 + x.norm()));
            prop_assert!((from_dq(dq, phi) - x).norm() <= 1e-12 * (1.0 + x.norm()));
        }

        #[test]
        fn sum_diff_roundtrip(a in -1e4f64..1e4, b in -1e4f64..1e4, c in -1e4f64..1e4, d in -1e4f64..1e4) {
            let (x, y) = (AlphaBeta::new(a, b), AlphaBeta::new(c, d));
            let (s, df) = sum_diff(x, y);
            let (x2, y2) = inverse_sum_diff(s, df);
            prop_assert!((x2 - x).norm() <= 1e-12 * (1.0 + x.norm()));
            prop_assert!((y2 - y).norm() <= 1e-12 * (1.0 + y.norm()));
        }
    }
}
