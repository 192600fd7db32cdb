//! Shared numeric kernels: log-sum-exp, Fresnel integrals, Gaussian
//! quadrature rules. Everything here is deterministic pure math used by the
//! motion model, the filter, and the test oracles.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

/// log(Σ exp(x_i)) with the usual max shift. Returns −∞ for an empty slice
/// or when every entry is −∞. NaN inputs propagate.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &x in xs {
        if x.is_nan() {
            return f64::NAN;
        }
        if x > m {
            m = x;
        }
    }
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + sum.ln()
}

/// Numerically stable log(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// d/dx softplus(x) = sigmoid(x).
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug)]
struct Cx {
    re: f64,
    im: f64,
}

impl Cx {
    fn new(re: f64, im: f64) -> Self {
        Cx { re, im }
    }
    fn add(self, o: Cx) -> Cx {
        Cx::new(self.re + o.re, self.im + o.im)
    }
    fn mul(self, o: Cx) -> Cx {
        Cx::new(
            self.re * o.re - self.im * o.im,
            self.re * o.im + self.im * o.re,
        )
    }
    fn div(self, o: Cx) -> Cx {
        let d = o.re * o.re + o.im * o.im;
        Cx::new(
            (self.re * o.re + self.im * o.im) / d,
            (self.im * o.re - self.re * o.im) / d,
        )
    }
    fn scale(self, s: f64) -> Cx {
        Cx::new(self.re * s, self.im * s)
    }
}

/// Fresnel integrals C(x) = ∫₀ˣ cos(πt²/2) dt and S(x) = ∫₀ˣ sin(πt²/2) dt.
///
/// Power series below |x| = 1.5; above, the tail ∫ₓ^∞ e^{iπt²/2} dt is
/// written as a complex complementary error function and evaluated with the
/// modified-Lentz continued fraction. Absolute error is ~1e-15 over the
/// whole real line (checked against 30-digit references in the tests).
pub fn fresnel(x: f64) -> (f64, f64) {
    let ax = x.abs();
    let (c, s) = if ax <= 1.5 {
        fresnel_series(ax)
    } else {
        fresnel_cf(ax)
    };
    if x < 0.0 {
        (-c, -s)
    } else {
        (c, s)
    }
}

fn fresnel_series(x: f64) -> (f64, f64) {
    // C = Σ (−1)ⁿ (π/2)^{2n} x^{4n+1} / ((2n)! (4n+1))
    // S = Σ (−1)ⁿ (π/2)^{2n+1} x^{4n+3} / ((2n+1)! (4n+3))
    let h = std::f64::consts::FRAC_PI_2 * x * x; // (π/2) x²
    let mut c = 0.0;
    let mut s = 0.0;
    // term_c(n) = (−1)ⁿ h^{2n} / (2n)!, times x/(4n+1); similarly for S.
    let mut tc = 1.0; // h^{2n}/(2n)! with sign
    for n in 0..40 {
        let k = 2 * n;
        c += tc * x / (4 * n + 1) as f64;
        let ts = tc * h / (k + 1) as f64;
        s += ts * x / (4 * n + 3) as f64;
        let next = -ts * h / (k + 2) as f64;
        if next.abs() * x < 1e-18 && n > 2 {
            break;
        }
        tc = next;
    }
    (c, s)
}

fn fresnel_cf(x: f64) -> (f64, f64) {
    // E(x) = C + iS = (1+i)/2 − (1+i)/(2√π) · e^{iπx²/2} · F(βx), where
    // β = (√π/2)(1−i) and F(w) = 1/(w + (1/2)/(w + 1/(w + (3/2)/(w + ...))))
    // is the continued fraction for √π e^{w²} erfc(w).
    let sqrt_pi = std::f64::consts::PI.sqrt();
    let w = Cx::new(sqrt_pi / 2.0 * x, -sqrt_pi / 2.0 * x);
    // Small but with a representable square: complex division squares the
    // magnitude, so 1e-300 would underflow to 0/0.
    let tiny = 1e-30;
    let mut f = Cx::new(tiny, 0.0);
    let mut cc = f;
    let mut dd = Cx::new(0.0, 0.0);
    for k in 1..=1000 {
        let a = if k == 1 { 1.0 } else { (k - 1) as f64 / 2.0 };
        dd = w.add(dd.scale(a));
        if dd.re == 0.0 && dd.im == 0.0 {
            dd = Cx::new(tiny, 0.0);
        }
        cc = w.add(Cx::new(a, 0.0).div(cc));
        if cc.re == 0.0 && cc.im == 0.0 {
            cc = Cx::new(tiny, 0.0);
        }
        dd = Cx::new(1.0, 0.0).div(dd);
        let delta = cc.mul(dd);
        f = f.mul(delta);
        if (delta.re - 1.0).abs() + delta.im.abs() < 1e-15 {
            break;
        }
    }
    let phase = std::f64::consts::FRAC_PI_2 * x * x;
    let e = Cx::new(phase.cos(), phase.sin());
    let half = Cx::new(0.5, 0.5);
    let coef = Cx::new(0.5 / sqrt_pi, 0.5 / sqrt_pi);
    let tail = coef.mul(e).mul(f);
    let ex = Cx::new(half.re - tail.re, half.im - tail.im);
    (ex.re, ex.im)
}

/// Gauss–Legendre nodes and weights on [−1, 1], cached per order.
pub fn gauss_legendre(order: usize) -> Arc<Vec<(f64, f64)>> {
    assert!(order >= 2);
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Vec<(f64, f64)>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap();
    guard
        .entry(order)
        .or_insert_with(|| Arc::new(compute_gauss_legendre(order)))
        .clone()
}

fn compute_gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 1..=n {
        // Chebyshev-like initial guess, then Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 - 0.25) / (n as f64 + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            let (p, dp) = legendre_pair(n, x);
            pp = dp;
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                let (p2, dp2) = legendre_pair(n, x);
                x -= p2 / dp2;
                pp = legendre_pair(n, x).1;
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * pp * pp);
        out.push((x, w));
    }
    out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    out
}

fn legendre_pair(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// ∫_a^b f via Gauss–Legendre of the given order.
pub fn integrate_gl<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, order: usize) -> f64 {
    let nodes = gauss_legendre(order);
    let c = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut acc = 0.0;
    for &(x, w) in nodes.iter() {
        acc += w * f(mid + c * x);
    }
    acc * c
}

/// Gauss–Hermite nodes and weights for ∫ e^{−x²} f(x) dx ≈ Σ wᵢ f(xᵢ).
///
/// Roots of the orthonormal Hermite polynomial located by sign-change scan
/// plus Newton; weights from the Christoffel function. Used by the policy
/// normalization oracles.
pub fn gauss_hermite(n: usize) -> Vec<(f64, f64)> {
    assert!(n >= 2);
    // Orthonormal recurrence: h₀ = π^{-1/4}, h_{k+1} = x√(2/(k+1)) h_k − √(k/(k+1)) h_{k−1}
    let eval = |x: f64| -> (f64, f64, Vec<f64>) {
        let mut hs = Vec::with_capacity(n + 1);
        let mut h0 = std::f64::consts::PI.powf(-0.25);
        hs.push(h0);
        let mut h1 = x * std::f64::consts::SQRT_2 * h0;
        hs.push(h1);
        for k in 1..n {
            let kf = k as f64;
            let h2 = x * (2.0 / (kf + 1.0)).sqrt() * h1 - (kf / (kf + 1.0)).sqrt() * h0;
            h0 = h1;
            h1 = h2;
            hs.push(h1);
        }
        let dp = (2.0 * n as f64).sqrt() * hs[n - 1];
        (hs[n], dp, hs)
    };
    let bound = (2.0 * n as f64 + 1.0).sqrt() + 2.0;
    let grid = 40 * n;
    let mut roots = Vec::with_capacity(n);
    let mut prev_x = -bound;
    let mut prev_v = eval(prev_x).0;
    for i in 1..=grid {
        let x = -bound + 2.0 * bound * i as f64 / grid as f64;
        let v = eval(x).0;
        if prev_v == 0.0 {
            roots.push(prev_x);
        } else if prev_v.signum() != v.signum() {
            // Newton from the midpoint.
            let mut r = 0.5 * (prev_x + x);
            for _ in 0..60 {
                let (p, dp, _) = eval(r);
                let step = p / dp;
                r -= step;
                if step.abs() < 1e-15 {
                    break;
                }
            }
            roots.push(r);
        }
        prev_x = x;
        prev_v = v;
    }
    assert_eq!(roots.len(), n, "failed to isolate all Hermite roots");
    roots
        .into_iter()
        .map(|r| {
            let (_, _, hs) = eval(r);
            let denom: f64 = hs[..n].iter().map(|h| h * h).sum();
            (r, 1.0 / denom)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_matches_direct_sum() {
        let xs = [0.3f64, -1.2, 2.5, 0.0];
        let direct: f64 = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((logsumexp(&xs) - direct).abs() < 1e-14);
    }

    #[test]
    fn logsumexp_handles_extremes() {
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
        assert_eq!(
            logsumexp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]),
            f64::NEG_INFINITY
        );
        // No overflow for large shifted values.
        let v = logsumexp(&[-1000.0, -1000.0]);
        assert!((v - (-1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);
        let big = logsumexp(&[800.0, 800.0]);
        assert!((big - (800.0 + std::f64::consts::LN_2)).abs() < 1e-12);
    }

    #[test]
    fn fresnel_reference_values() {
        // 30-digit mpmath references.
        let refs: &[(f64, f64, f64)] = &[
            (0.1, 0.0999975326270850736, 0.0005235895476122106867),
            (0.5, 0.4923442258714463929, 0.06473243285999927761),
            (1.0, 0.7798934003768228295, 0.4382591473903547661),
            (1.5, 0.4452611760398215351, 0.6975049600820930131),
            (1.6, 0.365461683440487653, 0.6388876835093808346),
            (2.0, 0.4882534060753407545, 0.3434156783636982422),
            (3.0, 0.6057207892976856296, 0.4963129989673750361),
            (5.0, 0.5636311887040122311, 0.4991913819171168868),
            (10.0, 0.4998986942055157236, 0.4681699785848822404),
            (40.0, 0.4999984168574454649, 0.4920422537902730972),
            (79.33, 0.5037097713204951792, 0.5015289136326233445),
        ];
        for &(x, c_ref, s_ref) in refs {
            let (c, s) = fresnel(x);
            assert!(
                (c - c_ref).abs() < 2e-14 && (s - s_ref).abs() < 2e-14,
                "fresnel({x}): got ({c}, {s}), want ({c_ref}, {s_ref})"
            );
            let (cn, sn) = fresnel(-x);
            assert_eq!(cn, -c);
            assert_eq!(sn, -s);
        }
    }

    #[test]
    fn fresnel_continuous_at_crossover() {
        let (c_lo, s_lo) = fresnel_series(1.5);
        let (c_hi, s_hi) = fresnel_cf(1.5);
        assert!((c_lo - c_hi).abs() < 1e-13);
        assert!((s_lo - s_hi).abs() < 1e-13);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        // Order n is exact for degree 2n−1.
        let v = integrate_gl(|x| x.powi(7) - 3.0 * x.powi(4) + x, -1.0, 2.0, 8);
        // ∫ x⁷ = x⁸/8; ∫ −3x⁴ = −3x⁵/5; ∫ x = x²/2 over [−1, 2]
        let exact = (256.0 - 1.0) / 8.0 - 3.0 * (32.0 - (-1.0)) / 5.0 + (4.0 - 1.0) / 2.0;
        assert!((v - exact).abs() < 1e-12, "got {v}, want {exact}");
    }

    #[test]
    fn gauss_legendre_weights_sum_to_two() {
        for order in [8, 16, 17, 32] {
            let nodes = gauss_legendre(order);
            assert_eq!(nodes.len(), order);
            let sum: f64 = nodes.iter().map(|&(_, w)| w).sum();
            assert!((sum - 2.0).abs() < 1e-13);
            for win in nodes.windows(2) {
                assert!(win[0].0 < win[1].0);
            }
        }
    }

    #[test]
    fn gauss_legendre_oscillatory_accuracy() {
        // The motion model's integrands are as smooth as this one.
        let f = |s: f64| (5.0 + 2.0 * s) * (0.4 + 3.0 * s + 1.6 * s * s).cos();
        let fine = integrate_gl(&f, 0.0, 0.33, 64);
        let v16 = integrate_gl(&f, 0.0, 0.33, 16);
        assert!((fine - v16).abs() < 1e-13);
    }

    #[test]
    fn gauss_hermite_moments() {
        // ∫ e^{−x²} dx = √π; ∫ e^{−x²} x² dx = √π/2; ∫ e^{−x²} x⁶ dx = 15√π/8.
        let gh = gauss_hermite(24);
        let m0: f64 = gh.iter().map(|&(_, w)| w).sum();
        let m2: f64 = gh.iter().map(|&(x, w)| w * x * x).sum();
        let m6: f64 = gh.iter().map(|&(x, w)| w * x.powi(6)).sum();
        let sp = std::f64::consts::PI.sqrt();
        assert!((m0 - sp).abs() < 1e-12);
        assert!((m2 - sp / 2.0).abs() < 1e-12);
        assert!((m6 - 15.0 * sp / 8.0).abs() < 1e-10);
    }

    #[test]
    fn gauss_hermite_gaussian_normalization() {
        // ∫ N(x; μ, σ²) dx = 1 via substitution x = μ + √2 σ t.
        let gh = gauss_hermite(32);
        let (mu, sigma) = (0.7, 0.3);
        let total: f64 = gh
            .iter()
            .map(|&(t, w)| {
                let x = mu + std::f64::consts::SQRT_2 * sigma * t;
                let pdf = (-0.5 * ((x - mu) / sigma).powi(2)).exp()
                    / (sigma * (2.0 * std::f64::consts::PI).sqrt());
                w * pdf * (t * t).exp() // e^{t²} reweight
            })
            .sum::<f64>()
            * std::f64::consts::SQRT_2
            * sigma;
        assert!((total - 1.0).abs() < 1e-10, "got {total}");
    }
}
