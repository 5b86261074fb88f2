//! Discretised logistic likelihood for 8-bit pixels mapped to [−0.5, 0.5].

/// Half the spacing between adjacent 8-bit levels after `x/255 − 0.5`.
pub const HALF_BIN: f64 = 1.0 / 510.0;

/// Log-scales are clamped from below before use; gradient is zero there.
pub const MIN_LOG_SCALE: f64 = -7.0;

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

/// Negative log-probability of the 8-bit bin containing `x` under a
/// logistic with mean `mu` and scale `exp(log_scale)`, with the two extreme
/// bins absorbing the tails. Returns `(nll, d nll/d mu, d nll/d log_scale)`.
pub fn bin_nll(x: f32, mu: f32, log_scale: f32) -> (f64, f64, f64) {
    let (x, mu) = (x as f64, mu as f64);
    let clamped = (log_scale as f64) < MIN_LOG_SCALE;
    let ls = (log_scale as f64).max(MIN_LOG_SCALE);
    let inv = (-ls).exp();
    let a = (x + HALF_BIN - mu) * inv;
    let b = (x - HALF_BIN - mu) * inv;

    let (nll, dmu, dls) = if x < -0.5 + HALF_BIN {
        let s = sigmoid(-a);
        (softplus(-a), s * inv, s * a)
    } else if x > 0.5 - HALF_BIN {
        let s = sigmoid(b);
        (softplus(b), -s * inv, -s * b)
    } else {
        // σ(a) − σ(b), evaluated on whichever tail keeps precision.
        let mass = if a + b > 0.0 {
            sigmoid(-b) - sigmoid(-a)
        } else {
            sigmoid(a) - sigmoid(b)
        };
        if mass > 1e-12 {
            let da = sigmoid(a) * sigmoid(-a);
            let db = sigmoid(b) * sigmoid(-b);
            (
                -mass.ln(),
                (da - db) * inv / mass,
                (da * a - db * b) / mass,
            )
        } else {
            // Far tail: density at the bin centre times the bin width.
            let u = (x - mu) * inv;
            let log_pdf = -u - 2.0 * softplus(-u);
            let dlog = 1.0 - 2.0 * sigmoid(-u);
            (
                -(log_pdf - ls + (2.0 * HALF_BIN).ln()),
                -dlog * inv,
                -dlog * u + 1.0,
            )
        }
    };
    (nll, dmu, if clamped { 0.0 } else { dls })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cdf(u: f64) -> f64 {
        sigmoid(u)
    }

    /// Simpson integration of the logistic density over the bin.
    fn numeric_mass(lo: f64, hi: f64, mu: f64, s: f64) -> f64 {
        let pdf = |v: f64| {
            let u = (v - mu) / s;
            (-u).exp() / (s * (1.0 + (-u).exp()).powi(2))
        };
        let n = 2000;
        let h = (hi - lo) / n as f64;
        let mut acc = pdf(lo) + pdf(hi);
        for i in 1..n {
            acc += pdf(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn interior_bin_matches_numeric_cdf_difference() {
        let x = 20.0f32 / 255.0 - 0.5;
        let (mu, ls) = (-0.3f32, -2.5f32);
        let s = (ls as f64).exp();
        let want = -numeric_mass(x as f64 - HALF_BIN, x as f64 + HALF_BIN, mu as f64, s).ln();
        let got = bin_nll(x, mu, ls).0;
        assert!((got - want).abs() < 1e-7, "{got} vs {want}");
    }

    #[test]
    fn edge_bins_absorb_tails() {
        let (mu, ls) = (0.1f32, -1.0f32);
        let s = (ls as f64).exp();
        let lo = bin_nll(-0.5, mu, ls).0;
        let want_lo = -cdf((-0.5 + HALF_BIN - mu as f64) / s).ln();
        assert!((lo - want_lo).abs() < 1e-12);
        let hi = bin_nll(0.5, mu, ls).0;
        let want_hi = -(1.0 - cdf((0.5 - HALF_BIN - mu as f64) / s)).ln();
        assert!((hi - want_hi).abs() < 1e-9);
    }

    #[test]
    fn probabilities_over_all_bins_sum_to_one() {
        let (mu, ls) = (0.05f32, -2.0f32);
        let total: f64 = (0..256)
            .map(|b| (-bin_nll(b as f32 / 255.0 - 0.5, mu, ls).0).exp())
            .sum();
        // Bin centres are f32, so adjacent edges only telescope to ~1e-8.
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn analytic_gradients_match_central_differences() {
        for &(x, mu, ls) in &[
            (0.1f32, 0.05f32, -2.0f32),
            (-0.5, -0.2, -1.5),
            (0.5, 0.3, -2.2),
            (-0.2, 0.4, -3.0),
        ] {
            let (_, dmu, dls) = bin_nll(x, mu, ls);
            let h = 1e-3f64;
            let f = |m: f64, l: f64| bin_nll(x, m as f32, l as f32).0;
            let fd_mu = (f(mu as f64 + h, ls as f64) - f(mu as f64 - h, ls as f64)) / (2.0 * h);
            let fd_ls = (f(mu as f64, ls as f64 + h) - f(mu as f64, ls as f64 - h)) / (2.0 * h);
            assert!((dmu - fd_mu).abs() < 1e-2 * (1.0 + fd_mu.abs()), "{dmu} vs {fd_mu}");
            assert!((dls - fd_ls).abs() < 1e-2 * (1.0 + fd_ls.abs()), "{dls} vs {fd_ls}");
        }
    }
}
