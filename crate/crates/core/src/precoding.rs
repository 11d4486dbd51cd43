//! Baseband precoding with one-bit DACs.
//!
//! The quantizer is modelled by its Bussgang decomposition `x = G Q s + d`:
//! a real diagonal gain `G` fixed by the row powers of `Q`, and a distortion
//! `d` uncorrelated with `s` whose covariance follows the arcsine law.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::beamforming::EffectiveChannelMatrix;
use crate::error::{Error, Result};
use crate::linalg::{hermitian_rcond, CMatrix};

/// Tolerance on normalized correlations before `arcsin`.
const CORRELATION_SLACK: f64 = 1e-9;
/// Smallest accepted reciprocal condition number of `H H^H` for ZF.
pub const ZF_RCOND_MIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecoderKind {
    Mrt,
    Zf,
}

impl PrecoderKind {
    pub fn name(self) -> &'static str {
        match self {
            PrecoderKind::Mrt => "mrt",
            PrecoderKind::Zf => "zf",
        }
    }
}

impl std::fmt::Display for PrecoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PrecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mrt" => Ok(PrecoderKind::Mrt),
            "zf" => Ok(PrecoderKind::Zf),
            other => Err(Error::InvalidArgument(format!("unknown precoder {other:?}"))),
        }
    }
}

/// Everything the rate bound needs about the transmitter on one subcarrier.
#[derive(Debug, Clone)]
pub struct PrecoderSet {
    pub kind: PrecoderKind,
    /// `K^w x U^w` baseband precoder.
    pub q: CMatrix,
    /// Diagonal of the quantizer gain `G`.
    pub g: Vec<f64>,
    /// Distortion covariance.
    pub c_dd: CMatrix,
    pub power: f64,
}

impl PrecoderSet {
    pub fn new(kind: PrecoderKind, h: &EffectiveChannelMatrix, power: f64) -> Result<Self> {
        let q = match kind {
            PrecoderKind::Mrt => mrt_precoder(h, power)?,
            PrecoderKind::Zf => zf_precoder(h, power)?,
        };
        PrecoderSet::from_precoder(kind, q, power)
    }

    /// Builds `G` and `C_dd` around a given baseband precoder.
    pub fn from_precoder(kind: PrecoderKind, q: CMatrix, power: f64) -> Result<Self> {
        let k = q.nrows();
        let g = quantizer_gain(&q, power, k)?;
        let c_dd = distortion_covariance(&q, power, k)?;
        Ok(PrecoderSet {
            kind,
            q,
            g,
            c_dd,
            power,
        })
    }

    /// `G` as a dense matrix.
    pub fn g_matrix(&self) -> CMatrix {
        CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            self.g.len(),
            self.g.iter().map(|&v| Complex64::new(v, 0.0)),
        ))
    }

    /// `G Q`, the linear part of the quantizer output.
    pub fn gq(&self) -> CMatrix {
        let mut m = self.q.clone();
        for (i, &gi) in self.g.iter().enumerate() {
            m.row_mut(i).scale_mut(gi);
        }
        m
    }
}

fn check_power(power: f64) -> Result<()> {
    if power > 0.0 && power.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("transmit power {power} must be positive")))
    }
}

/// `Q = sqrt(P / tr(H H^H)) H^H`.
pub fn mrt_precoder(h: &EffectiveChannelMatrix, power: f64) -> Result<CMatrix> {
    check_power(power)?;
    let energy: f64 = h.matrix.iter().map(|z| z.norm_sqr()).sum();
    if energy == 0.0 {
        return Err(Error::ZeroChannel);
    }
    Ok(h.matrix.adjoint() * Complex64::new((power / energy).sqrt(), 0.0))
}

/// `Q = sqrt(P / tr((H H^H)^-1)) H^H (H H^H)^-1`.
pub fn zf_precoder(h: &EffectiveChannelMatrix, power: f64) -> Result<CMatrix> {
    check_power(power)?;
    let hh = &h.matrix * h.matrix.adjoint();
    let rcond = hermitian_rcond(&hh);
    let singular = || Error::SingularChannel {
        subcarrier: h.subcarrier,
        frequency_hz: h.frequency_hz,
        rcond,
    };
    if !(rcond > ZF_RCOND_MIN) {
        return Err(singular());
    }
    let inv = hh.cholesky().ok_or_else(singular)?.inverse();
    let tr: f64 = (0..inv.nrows()).map(|i| inv[(i, i)].re).sum();
    Ok(h.matrix.adjoint() * inv * Complex64::new((power / tr).sqrt(), 0.0))
}

fn row_powers(q: &CMatrix) -> Result<Vec<f64>> {
    (0..q.nrows())
        .map(|i| {
            let p: f64 = q.row(i).iter().map(|z| z.norm_sqr()).sum();
            if p > 0.0 {
                Ok(p)
            } else {
                Err(Error::UndrivenSubarray { index: i })
            }
        })
        .collect()
}

/// Diagonal of `G = sqrt(2P/(pi K)) diag(Q Q^H)^(-1/2)`.
pub fn quantizer_gain(q: &CMatrix, power: f64, k: usize) -> Result<Vec<f64>> {
    check_power(power)?;
    if k == 0 || q.nrows() != k {
        return Err(Error::DimensionMismatch(format!(
            "precoder has {} rows, expected K = {k}",
            q.nrows()
        )));
    }
    let a = (2.0 * power / (PI * k as f64)).sqrt();
    Ok(row_powers(q)?.into_iter().map(|d| a / d.sqrt()).collect())
}

fn clamped_asin(value: f64, row: usize, col: usize) -> Result<f64> {
    if !(value.abs() <= 1.0 + CORRELATION_SLACK) {
        return Err(Error::CorrelationOutOfRange { row, col, value });
    }
    Ok(value.clamp(-1.0, 1.0).asin())
}

/// Arcsine-law covariance of the quantized signal minus its linear part.
pub fn distortion_covariance(q: &CMatrix, power: f64, k: usize) -> Result<CMatrix> {
    let g = quantizer_gain(q, power, k)?;
    let r = q * q.adjoint();
    let d = row_powers(q)?;
    let a = 2.0 * power / (PI * k as f64);
    let mut c = CMatrix::zeros(k, k);
    for i in 0..k {
        c[(i, i)] = Complex64::new(a * PI / 2.0 - g[i] * g[i] * d[i], 0.0);
        for j in i + 1..k {
            let s = (d[i] * d[j]).sqrt();
            let asin = Complex64::new(
                clamped_asin(r[(i, j)].re / s, i, j)?,
                clamped_asin(r[(i, j)].im / s, i, j)?,
            );
            let v = asin * a - r[(i, j)] * (g[i] * g[j]);
            c[(i, j)] = v;
            c[(j, i)] = v.conj();
        }
    }
    Ok(c)
}

/// Output of the one-bit DAC bank.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedSignal {
    pub x: Vec<Complex64>,
}

fn sign(v: f64) -> f64 {
    if v < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Per-rail sign quantizer scaled so the output power is exactly `P`.
pub fn one_bit_quantize(z: &[Complex64], power: f64, k: usize) -> QuantizedSignal {
    let a = (power / (2.0 * k as f64)).sqrt();
    QuantizedSignal {
        x: z.iter()
            .map(|v| Complex64::new(a * sign(v.re), a * sign(v.im)))
            .collect(),
    }
}

/// Sample statistics of the quantizer distortion.
#[derive(Debug, Clone)]
pub struct DistortionStatistics {
    /// Sample mean of `d d^H`.
    pub covariance: CMatrix,
    /// Sample mean of `d s^H`, which vanishes in expectation.
    pub cross: CMatrix,
    pub trials: usize,
}

const CHUNK: usize = 1 << 15;

/// Monte Carlo estimate of the distortion covariance with Gaussian data
/// `s ~ CN(0, I)`. Trials are split into fixed-size chunks, each with its own
/// random stream, and partial sums are reduced in chunk order, so the result
/// does not depend on the number of worker threads.
pub fn empirical_distortion_statistics<R: Rng + ?Sized>(
    q: &CMatrix,
    power: f64,
    k: usize,
    trials: usize,
    rng: &mut R,
) -> Result<DistortionStatistics> {
    if trials == 0 {
        return Err(Error::InvalidArgument("need at least one trial".into()));
    }
    let g = quantizer_gain(q, power, k)?;
    let users = q.ncols();
    let base: u64 = rng.random();
    let chunks = trials.div_ceil(CHUNK);
    let partials: Vec<(CMatrix, CMatrix)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut local = ChaCha8Rng::seed_from_u64(base);
            local.set_stream(c as u64);
            let n = CHUNK.min(trials - c * CHUNK);
            let mut dd = CMatrix::zeros(k, k);
            let mut ds = CMatrix::zeros(k, users);
            let mut s = vec![Complex64::new(0.0, 0.0); users];
            let mut z = vec![Complex64::new(0.0, 0.0); k];
            let mut d = vec![Complex64::new(0.0, 0.0); k];
            for _ in 0..n {
                for v in s.iter_mut() {
                    let re: f64 = local.sample(StandardNormal);
                    let im: f64 = local.sample(StandardNormal);
                    *v = Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2;
                }
                for (i, zi) in z.iter_mut().enumerate() {
                    *zi = (0..users).map(|u| q[(i, u)] * s[u]).sum();
                }
                let x = one_bit_quantize(&z, power, k);
                for i in 0..k {
                    d[i] = x.x[i] - z[i] * g[i];
                }
                for i in 0..k {
                    for j in i..k {
                        dd[(i, j)] += d[i] * d[j].conj();
                    }
                    for u in 0..users {
                        ds[(i, u)] += d[i] * s[u].conj();
                    }
                }
            }
            (dd, ds)
        })
        .collect();
    let mut dd = CMatrix::zeros(k, k);
    let mut ds = CMatrix::zeros(k, users);
    for (a, b) in &partials {
        dd += a;
        ds += b;
    }
    let scale = Complex64::new(1.0 / trials as f64, 0.0);
    for i in 0..k {
        for j in 0..i {
            dd[(i, j)] = dd[(j, i)].conj();
        }
    }
    Ok(DistortionStatistics {
        covariance: dd * scale,
        cross: ds * scale,
        trials,
    })
}

pub fn empirical_distortion_covariance<R: Rng + ?Sized>(
    q: &CMatrix,
    power: f64,
    k: usize,
    trials: usize,
    rng: &mut R,
) -> Result<CMatrix> {
    Ok(empirical_distortion_statistics(q, power, k, trials, rng)?.covariance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beamforming::assemble_channel_matrix;
    use crate::linalg::{frobenius_norm, hermitian_defect, hermitian_eigenvalues, trace_re};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn channel(rows: Vec<Vec<Complex64>>) -> EffectiveChannelMatrix {
        let k = rows[0].len();
        assemble_channel_matrix(
            4,
            0.7e12,
            rows.into_iter().enumerate().map(|(u, r)| (u as u32 + 1, r)).collect(),
            (0..k).collect(),
        )
        .unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> CMatrix {
        CMatrix::from_fn(rows, cols, |_, _| {
            c(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal))
        })
    }

    fn max_diff(a: &CMatrix, b: &CMatrix) -> f64 {
        (a - b).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn identity_channel_precoders() {
        let h = channel(vec![vec![c(1.0, 0.0), c(0.0, 0.0)], vec![c(0.0, 0.0), c(1.0, 0.0)]]);
        let want = CMatrix::identity(2, 2) * c(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        assert!(max_diff(&mrt_precoder(&h, 1.0).unwrap(), &want) < 1e-15);
        let zf = zf_precoder(&h, 1.0).unwrap();
        assert!(max_diff(&zf, &want) < 1e-15);
        let hq = &h.matrix * &zf;
        assert!(max_diff(&hq, &want) < 1e-15);
    }

    #[test]
    fn zf_on_diagonal_channel() {
        let h = channel(vec![vec![c(2.0, 0.0), c(0.0, 0.0)], vec![c(0.0, 0.0), c(1.0, 0.0)]]);
        let q = zf_precoder(&h, 1.0).unwrap();
        let s = (1.0f64 / 1.25).sqrt();
        assert!((q[(0, 0)] - c(0.5 * s, 0.0)).norm() < 1e-15);
        assert!((q[(1, 1)] - c(s, 0.0)).norm() < 1e-15);
        let hq = &h.matrix * &q;
        assert!(max_diff(&hq, &(CMatrix::identity(2, 2) * c(s, 0.0))) < 1e-15);
    }

    #[test]
    fn degenerate_channels_fail_loudly() {
        let zero = channel(vec![vec![c(0.0, 0.0); 3]]);
        assert!(matches!(mrt_precoder(&zero, 1.0), Err(Error::ZeroChannel)));
        let rank1 = channel(vec![vec![c(1.0, 0.0), c(2.0, 1.0)], vec![c(2.0, 0.0), c(4.0, 2.0)]]);
        match zf_precoder(&rank1, 1.0) {
            Err(Error::SingularChannel { subcarrier, .. }) => assert_eq!(subcarrier, 4),
            other => panic!("expected singular channel, got {other:?}"),
        }
        let msg = zf_precoder(&rank1, 1.0).unwrap_err().to_string();
        assert!(msg.contains("subcarrier 4"), "{msg}");
    }

    #[test]
    fn quantizer_gain_reference_values() {
        let q = CMatrix::from_fn(4, 2, |i, j| if i % 2 == j { c(0.0, (0.5f64).sqrt()) } else { c(0.0, 0.0) });
        // each row has power 1/2 = P/K with P=2, K=4
        let g = quantizer_gain(&q, 2.0, 4).unwrap();
        for v in g {
            assert!((v - 0.797_884_560_802_865_4).abs() < 1e-15);
        }
        let g = quantizer_gain(&CMatrix::from_element(1, 1, c(3f64.sqrt(), 0.0)), 3.0, 1).unwrap();
        assert!((g[0] - (2.0 / PI).sqrt()).abs() < 1e-15);
        let mut undriven = CMatrix::from_element(3, 1, c(1.0, 0.0));
        undriven[(1, 0)] = c(0.0, 0.0);
        assert!(matches!(quantizer_gain(&undriven, 1.0, 3), Err(Error::UndrivenSubarray { index: 1 })));
    }

    #[test]
    fn distortion_reference_values() {
        let c1 = distortion_covariance(&CMatrix::from_element(1, 1, c(0.3, -0.8)), 1.0, 1).unwrap();
        assert!((c1[(0, 0)].re - 0.363_380_227_632_418_6).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_matrix(&mut rng, 4, 2);
        let scale = (1.0 / frobenius_norm(&q).powi(2)).sqrt();
        let q = q * c(scale, 0.0);
        let cdd = distortion_covariance(&q, 1.0, 4).unwrap();
        for i in 0..4 {
            assert!((cdd[(i, i)].re - 0.090_845_056_908_104_65).abs() < 1e-15);
            assert_eq!(cdd[(i, i)].im, 0.0);
        }
        assert_eq!(hermitian_defect(&cdd), 0.0);
    }

    #[test]
    fn orthogonal_rows_give_diagonal_distortion() {
        let q = CMatrix::from_fn(3, 3, |i, j| if i == j { c(1.0 + i as f64, 0.5) } else { c(0.0, 0.0) });
        let cdd = distortion_covariance(&q, 2.0, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(cdd[(i, j)].norm() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn correlation_slack_is_enforced() {
        assert!((clamped_asin(1.0 + 5e-10, 0, 1).unwrap() - PI / 2.0).abs() < 1e-15);
        assert!(matches!(clamped_asin(1.0 + 1e-6, 0, 1), Err(Error::CorrelationOutOfRange { .. })));
        assert!(clamped_asin(f64::NAN, 0, 1).is_err());
    }

    #[test]
    fn quantizer_mapping() {
        let x = one_bit_quantize(&[c(1.0, 1.0)], 1.0, 1);
        let h = 0.5f64.sqrt();
        assert_eq!(x.x, vec![c(h, h)]);
        let x = one_bit_quantize(&[c(0.0, -0.0), c(-2.0, 3.0)], 4.0, 2);
        assert_eq!(x.x, vec![c(1.0, 1.0), c(-1.0, 1.0)]);
    }

    #[test]
    fn single_trial_is_rank_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_matrix(&mut rng, 3, 2);
        let est = empirical_distortion_covariance(&q, 1.0, 3, 1, &mut rng).unwrap();
        assert!(hermitian_defect(&est) < 1e-15);
        let ev = hermitian_eigenvalues(&est);
        assert!(ev[0].abs() < 1e-12 && ev[1].abs() < 1e-12 && ev[2] > 0.0);
    }

    #[test]
    fn scalar_monte_carlo_matches_arcsine_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = CMatrix::from_element(1, 1, c(0.6, 0.8));
        let est = empirical_distortion_covariance(&q, 1.0, 1, 200_000, &mut rng).unwrap();
        let want = 1.0 - 2.0 / PI;
        assert!((est[(0, 0)].re - want).abs() < 0.01 * want);
    }

    #[test]
    fn monte_carlo_is_reproducible() {
        let mut r1 = ChaCha8Rng::seed_from_u64(77);
        let mut r2 = ChaCha8Rng::seed_from_u64(77);
        let q = random_matrix(&mut ChaCha8Rng::seed_from_u64(1), 3, 2);
        let a = empirical_distortion_covariance(&q, 1.0, 3, 70_000, &mut r1).unwrap();
        let b = empirical_distortion_covariance(&q, 1.0, 3, 70_000, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    fn precoder_inputs() -> impl Strategy<Value = (u64, usize, usize, f64)> {
        (0u64..10_000, 1usize..4, 0usize..4, -3.0f64..3.0)
            .prop_map(|(seed, u, extra, lp)| (seed, u, u + extra, 10f64.powf(lp)))
    }

    proptest! {
        #[test]
        fn precoder_power_invariants((seed, u, k, p) in precoder_inputs()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = channel((0..u).map(|_| random_matrix(&mut rng, 1, k).iter().copied().collect()).collect());
            for kind in [PrecoderKind::Mrt, PrecoderKind::Zf] {
                let set = PrecoderSet::new(kind, &h, p).unwrap();
                let qq = &set.q * set.q.adjoint();
                prop_assert!((trace_re(&qq) - p).abs() <= 1e-9 * p);
                prop_assert!(set.g.iter().all(|&g| g > 0.0));
                let gq = set.gq();
                let lin = trace_re(&(&gq * gq.adjoint()));
                prop_assert!((lin - 2.0 * p / PI).abs() <= 1e-9 * p);
                prop_assert!((trace_re(&set.c_dd) - p * (1.0 - 2.0 / PI)).abs() <= 1e-9 * p);
                prop_assert!((lin + trace_re(&set.c_dd) - p).abs() <= 1e-9 * p);
                prop_assert_eq!(hermitian_defect(&set.c_dd), 0.0);
                let ev = hermitian_eigenvalues(&set.c_dd);
                prop_assert!(ev[0] >= -1e-9 * p);
            }
        }

        #[test]
        fn zero_forcing_diagonalizes((seed, u, k, p) in precoder_inputs()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = channel((0..u).map(|_| random_matrix(&mut rng, 1, k).iter().copied().collect()).collect());
            let q = zf_precoder(&h, p).unwrap();
            let hq = &h.matrix * &q;
            let cval = hq[(0, 0)].re;
            prop_assert!(cval > 0.0);
            let resid = frobenius_norm(&(hq - CMatrix::identity(u, u) * c(cval, 0.0)));
            prop_assert!(resid < 1e-9 * cval * (u as f64).sqrt());
        }

        #[test]
        fn quantizer_gain_scaling(seed in 0u64..1000, alpha in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_matrix(&mut rng, 3, 2);
            let g1 = quantizer_gain(&q, 1.0, 3).unwrap();
            let g2 = quantizer_gain(&(q.clone() * c(alpha, 0.0)), 1.0, 3).unwrap();
            let d = row_powers(&q).unwrap();
            for i in 0..3 {
                let lhs = g2[i] * (alpha * alpha * d[i]).sqrt();
                let rhs = g1[i] * d[i].sqrt();
                prop_assert!((lhs - rhs).abs() < 1e-12);
                prop_assert!((lhs - (2.0 / (3.0 * PI)).sqrt()).abs() < 1e-12);
            }
        }

        #[test]
        fn quantizer_output_is_constant_envelope(z in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..9), p in 0.01f64..10.0) {
            let z: Vec<Complex64> = z.into_iter().map(|(a, b)| c(a, b)).collect();
            let k = z.len();
            let x = one_bit_quantize(&z, p, k);
            let power: f64 = x.x.iter().map(|v| v.norm_sqr()).sum();
            prop_assert!((power - p).abs() < 1e-12 * p);
            let a = (p / (2.0 * k as f64)).sqrt();
            prop_assert!(x.x.iter().all(|v| (v.re.abs() - a).abs() < 1e-15 && (v.im.abs() - a).abs() < 1e-15));
            let scaled: Vec<Complex64> = z.iter().map(|v| v * 5.0).collect();
            prop_assert_eq!(one_bit_quantize(&scaled, p, k), x);
        }
    }
}
