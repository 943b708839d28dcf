//! Histogram estimation of per-node feature distributions and
//! Jensen–Shannon divergence between them.
//!
//! Divergences are computed in nats, so JSD is bounded by ln 2. Histograms
//! are Laplace-smoothed with a tiny per-bin mass so the KL terms never see
//! zeros; the smoothing perturbs the "zero iff equal" property by less than
//! 1e-12.

use crate::error::{Error, Result};

/// Per-bin Laplace smoothing constant applied before normalization.
pub const SMOOTHING_ALPHA: f64 = 1e-6;

/// Default bin count for per-node feature histograms.
pub const DEFAULT_BINS: usize = 64;

/// Discrete probability estimate over equal-width bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    bin_edges: Vec<f64>,
    mass: Vec<f64>,
}

impl Histogram {
    /// Build directly from validated parts. Mass must be nonnegative and sum
    /// to 1 within 1e-9; edges must be strictly increasing.
    pub fn from_parts(bin_edges: Vec<f64>, mass: Vec<f64>) -> Result<Self> {
        if bin_edges.len() != mass.len() + 1 {
            return Err(Error::Argument(format!(
                "{} edges cannot delimit {} bins",
                bin_edges.len(),
                mass.len()
            )));
        }
        if bin_edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Argument("bin edges not strictly increasing".into()));
        }
        if mass.iter().any(|&m| m < 0.0 || !m.is_finite()) {
            return Err(Error::Argument("negative or non-finite mass".into()));
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Argument(format!("mass sums to {total}, not 1")));
        }
        Ok(Self { bin_edges, mass })
    }

    pub fn bins(&self) -> usize {
        self.mass.len()
    }

    pub fn bin_edges(&self) -> &[f64] {
        &self.bin_edges
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }
}

/// Count samples into `bins` equal-width bins over `[lo, hi]`, Laplace-smooth,
/// and normalize. Samples outside the range are clipped into the boundary bins.
pub fn build_histogram(samples: &[f64], bins: usize, range: (f64, f64)) -> Result<Histogram> {
    let (lo, hi) = range;
    if samples.is_empty() {
        return Err(Error::Argument("empty sample set".into()));
    }
    if bins == 0 {
        return Err(Error::Argument("bin count must be positive".into()));
    }
    if !(lo < hi) {
        return Err(Error::Argument(format!("bad range [{lo}, {hi}]")));
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins];
    for &x in samples {
        let idx = if x <= lo {
            0
        } else if x >= hi {
            bins - 1
        } else {
            (((x - lo) / width) as usize).min(bins - 1)
        };
        counts[idx] += 1;
    }
    let denom = samples.len() as f64 + bins as f64 * SMOOTHING_ALPHA;
    let mass: Vec<f64> = counts
        .iter()
        .map(|&c| (c as f64 + SMOOTHING_ALPHA) / denom)
        .collect();
    let edges: Vec<f64> = (0..=bins)
        .map(|i| {
            if i == bins {
                hi
            } else {
                lo + i as f64 * width
            }
        })
        .collect();
    Histogram::from_parts(edges, mass)
}

fn check_shared_edges(p: &Histogram, q: &Histogram) -> Result<()> {
    if p.bin_edges != q.bin_edges {
        return Err(Error::Argument(
            "histograms do not share bin edges".into(),
        ));
    }
    Ok(())
}

/// Discrete KL divergence D(p || mid) in nats.
pub fn kl_to_midpoint(p: &Histogram, mid: &Histogram) -> Result<f64> {
    check_shared_edges(p, mid)?;
    let mut acc = 0.0;
    for (&pi, &mi) in p.mass.iter().zip(&mid.mass) {
        if pi > 0.0 {
            acc += pi * (pi / mi).ln();
        }
    }
    Ok(acc)
}

/// Jensen–Shannon divergence in nats: the average KL of each distribution to
/// their pointwise midpoint. Symmetric and bounded by ln 2.
pub fn jsd(p: &Histogram, q: &Histogram) -> Result<f64> {
    check_shared_edges(p, q)?;
    let mid_mass: Vec<f64> = p
        .mass
        .iter()
        .zip(&q.mass)
        .map(|(&a, &b)| (a + b) / 2.0)
        .collect();
    let mid = Histogram {
        bin_edges: p.bin_edges.clone(),
        mass: mid_mass,
    };
    Ok(0.5 * kl_to_midpoint(p, &mid)? + 0.5 * kl_to_midpoint(q, &mid)?)
}

/// JSD between two raw sample sets over a shared per-pair bin range.
///
/// The range is the min/max of the union of both sample sets, which keeps
/// both histograms on a common support. If that range has zero width (both
/// series constant and equal) the divergence is zero by definition and no
/// histograms are built.
pub fn jsd_between_samples(xs: &[f64], ys: &[f64], bins: usize) -> Result<f64> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::Argument("empty sample set".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in xs.iter().chain(ys) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo == hi {
        return Ok(0.0);
    }
    let p = build_histogram(xs, bins, (lo, hi))?;
    let q = build_histogram(ys, bins, (lo, hi))?;
    jsd(&p, &q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn random_histogram(rng: &mut ChaCha8Rng, bins: usize) -> Histogram {
        let samples: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..1.0)).collect();
        build_histogram(&samples, bins, (0.0, 1.0)).unwrap()
    }

    #[test]
    fn degenerate_mass_lands_in_first_bin() {
        let samples = vec![2.0; 50];
        let h = build_histogram(&samples, 4, (2.0, 6.0)).unwrap();
        assert!(h.mass()[0] > 0.999);
        for &m in &h.mass()[1..] {
            assert!(m < 1e-6);
        }
    }

    #[test]
    fn uniform_grid_gives_flat_mass() {
        let samples: Vec<f64> = (0..400).map(|i| (i as f64 + 0.5) / 400.0).collect();
        let h = build_histogram(&samples, 4, (0.0, 1.0)).unwrap();
        for &m in h.mass() {
            assert!((m - 0.25).abs() < 1e-6, "{m}");
        }
    }

    #[test]
    fn mass_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<f64> = (0..2016).map(|_| rng.gen_range(-3.0..9.0)).collect();
        let h = build_histogram(&samples, 64, (-3.0, 9.0)).unwrap();
        let total: f64 = h.mass().iter().sum();
        assert!((total - 1.0).abs() <= 1e-9);
        assert!(h.mass().iter().all(|&m| m > 0.0));
    }

    #[test]
    fn out_of_range_samples_clip_to_boundary_bins() {
        let h = build_histogram(&[-10.0, 10.0], 4, (0.0, 1.0)).unwrap();
        assert!(h.mass()[0] > 0.49 && h.mass()[3] > 0.49);
    }

    #[test]
    fn bad_arguments_rejected() {
        assert!(build_histogram(&[], 4, (0.0, 1.0)).is_err());
        assert!(build_histogram(&[1.0], 4, (1.0, 1.0)).is_err());
        assert!(build_histogram(&[1.0], 4, (2.0, 1.0)).is_err());
    }

    #[test]
    fn kl_identity_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_histogram(&mut rng, 16);
        assert!(kl_to_midpoint(&p, &p).unwrap().abs() < 1e-15);
    }

    /// Closed-form hand evaluation: p = (1-a', a'), mid = (1/2, 1/2) where a'
    /// is the smoothed floor mass after n one-sided samples.
    #[test]
    fn kl_matches_closed_form_two_bin_case() {
        let n = 100.0;
        let p = build_histogram(&[0.1; 100], 2, (0.0, 1.0)).unwrap();
        let a = SMOOTHING_ALPHA / (n + 2.0 * SMOOTHING_ALPHA);
        assert!((p.mass()[1] - a).abs() < 1e-18);
        let mid = Histogram::from_parts(vec![0.0, 0.5, 1.0], vec![0.5, 0.5]).unwrap();
        let expected = (1.0 - a) * (2.0 * (1.0 - a)).ln() + a * (2.0 * a).ln();
        let got = kl_to_midpoint(&p, &mid).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let p = random_histogram(&mut rng, 16);
            let q = random_histogram(&mut rng, 16);
            let mid_mass: Vec<f64> = p
                .mass()
                .iter()
                .zip(q.mass())
                .map(|(&a, &b)| (a + b) / 2.0)
                .collect();
            let mid = Histogram::from_parts(p.bin_edges().to_vec(), mid_mass).unwrap();
            assert!(kl_to_midpoint(&p, &mid).unwrap() >= 0.0);
        }
    }

    #[test]
    fn jsd_identity_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = random_histogram(&mut rng, 32);
            let q = random_histogram(&mut rng, 32);
            assert!(jsd(&p, &p).unwrap() <= 1e-12);
            let d = jsd(&p, &q).unwrap();
            assert!((0.0..=LN2 + 1e-12).contains(&d));
        }
    }

    #[test]
    fn jsd_disjoint_supports_saturate() {
        let p = build_histogram(&[0.1; 500], 4, (0.0, 1.0)).unwrap();
        let q = build_histogram(&[0.9; 500], 4, (0.0, 1.0)).unwrap();
        let d = jsd(&p, &q).unwrap();
        assert!((d - LN2).abs() < 1e-4, "{d}");
    }

    #[test]
    fn jsd_symmetry_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let p = random_histogram(&mut rng, 64);
            let q = random_histogram(&mut rng, 64);
            assert_eq!(jsd(&p, &q).unwrap(), jsd(&q, &p).unwrap());
        }
    }

    #[test]
    fn jsd_monotone_in_two_bin_separation() {
        let mut prev = -1.0;
        for i in 0..50 {
            let theta = 0.5 + 0.49 * (i as f64 + 1.0) / 50.0;
            let p = Histogram::from_parts(vec![0.0, 0.5, 1.0], vec![theta, 1.0 - theta]).unwrap();
            let q = Histogram::from_parts(vec![0.0, 0.5, 1.0], vec![1.0 - theta, theta]).unwrap();
            let d = jsd(&p, &q).unwrap();
            assert!(d > prev, "jsd should grow with theta: {d} after {prev}");
            prev = d;
        }
    }

    #[test]
    fn mismatched_edges_rejected() {
        let p = build_histogram(&[0.5], 4, (0.0, 1.0)).unwrap();
        let q = build_histogram(&[0.5], 4, (0.0, 2.0)).unwrap();
        assert!(jsd(&p, &q).is_err());
        assert!(kl_to_midpoint(&p, &q).is_err());
    }

    #[test]
    fn sample_level_jsd_short_circuits_constant_equal_series() {
        assert_eq!(jsd_between_samples(&[5.0; 10], &[5.0; 7], 64).unwrap(), 0.0);
        // Constant but different series still diverge.
        let d = jsd_between_samples(&[5.0; 10], &[7.0; 10], 64).unwrap();
        assert!((d - LN2).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn jsd_bounds_hold_for_arbitrary_samples(
            xs in proptest::collection::vec(-1e3..1e3f64, 1..64),
            ys in proptest::collection::vec(-1e3..1e3f64, 1..64),
        ) {
            let d = jsd_between_samples(&xs, &ys, 16).unwrap();
            prop_assert!(d >= 0.0);
            prop_assert!(d <= LN2 + 1e-12);
        }
    }
}
