//! Achievable-rate lower bounds.
//!
//! Per user and subcarrier the one-bit DAC lower bound is
//! `B log2(1 + S / (I + D + N0))` with signal `S = |h G q_u|^2`, inter-user
//! interference `I`, quantizer distortion `D = h C_dd h^H` and noise `N0`.
//! In the large-array limit the effective channel collapses onto the LOS
//! gains, noise drops out and the bound becomes a power-independent
//! constant.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use num_complex::Complex64;

use crate::beamforming::{asymptotic_effective_channel, EffectiveChannelMatrix, UserBlock};
use crate::error::{Error, Result};
use crate::linalg::{quadratic_form, CMatrix};
use crate::precoding::PrecoderSet;

/// SINR decomposition and rate of one user on one subcarrier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubcarrierRate {
    pub user: u32,
    pub subcarrier: usize,
    pub frequency_hz: f64,
    pub signal: f64,
    pub interference: f64,
    pub distortion: f64,
    pub noise: f64,
    pub rate_bps: f64,
}

impl SubcarrierRate {
    pub fn sinr(&self) -> f64 {
        self.signal / (self.interference + self.distortion + self.noise)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RateReport {
    pub entries: Vec<SubcarrierRate>,
}

impl RateReport {
    /// `R_u` for every user present in the report.
    pub fn per_user(&self) -> BTreeMap<u32, f64> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.user).or_insert(0.0) += e.rate_bps;
        }
        out
    }

    /// `R = sum_u R_u`.
    pub fn total(&self) -> f64 {
        self.per_user().values().sum()
    }

    pub fn extend(&mut self, other: RateReport) {
        self.entries.extend(other.entries);
    }
}

fn sinr_report(h: &EffectiveChannelMatrix, p: &PrecoderSet, noise: f64, bandwidth: f64) -> Result<RateReport> {
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidArgument(format!("bandwidth {bandwidth} must be positive")));
    }
    let (u, k) = h.matrix.shape();
    if p.q.shape() != (k, u) || p.c_dd.shape() != (k, k) {
        return Err(Error::DimensionMismatch(format!(
            "channel is {u}x{k} but precoder is {:?} with C_dd {:?}",
            p.q.shape(),
            p.c_dd.shape()
        )));
    }
    let hgq = &h.matrix * p.gq();
    let mut entries = Vec::with_capacity(u);
    for (row, &user) in h.users.iter().enumerate() {
        let signal = hgq[(row, row)].norm_sqr();
        let interference: f64 = (0..u).filter(|&i| i != row).map(|i| hgq[(row, i)].norm_sqr()).sum();
        let hrow: Vec<Complex64> = h.matrix.row(row).iter().copied().collect();
        let distortion = distortion_power(user, &hrow, &p.c_dd)?;
        let rate_bps = bandwidth * (1.0 + signal / (interference + distortion + noise)).log2();
        entries.push(SubcarrierRate {
            user,
            subcarrier: h.subcarrier,
            frequency_hz: h.frequency_hz,
            signal,
            interference,
            distortion,
            noise,
            rate_bps,
        });
    }
    Ok(RateReport { entries })
}

/// `h C h^H` with the imaginary rounding residue checked and discarded.
fn distortion_power(user: u32, h: &[Complex64], c: &CMatrix) -> Result<f64> {
    let v = quadratic_form(h, c);
    let mut scale = 0.0;
    for (i, hi) in h.iter().enumerate() {
        for (j, hj) in h.iter().enumerate() {
            scale += hi.norm() * c[(i, j)].norm() * hj.norm();
        }
    }
    if scale == 0.0 {
        return Ok(0.0);
    }
    let residue = v.im.abs() / scale;
    if residue > 1e-9 {
        return Err(Error::ImaginaryResidue { user, residue });
    }
    if v.re < -1e-9 * scale {
        return Err(Error::NegativeDistortion { user, value: v.re });
    }
    Ok(v.re.max(0.0))
}

/// Rate lower bound on one subcarrier for noise power `n0 > 0` and
/// subcarrier bandwidth `bandwidth`.
pub fn rate_lower_bound(h: &EffectiveChannelMatrix, p: &PrecoderSet, n0: f64, bandwidth: f64) -> Result<RateReport> {
    if !(n0 > 0.0) {
        return Err(Error::InvalidArgument(format!("noise power {n0} must be positive")));
    }
    sinr_report(h, p, n0, bandwidth)
}

/// Same bound with the noise term removed.
pub fn rate_lower_bound_noise_free(h: &EffectiveChannelMatrix, p: &PrecoderSet, bandwidth: f64) -> Result<RateReport> {
    sinr_report(h, p, 0.0, bandwidth)
}

/// Sum over disjoint `(user, subcarrier)` entries of several reports.
pub fn sum_rate(reports: &[RateReport]) -> Result<f64> {
    let mut seen = BTreeSet::new();
    let mut total = 0.0;
    for r in reports {
        for e in &r.entries {
            if !seen.insert((e.user, e.subcarrier)) {
                return Err(Error::DuplicateReport {
                    user: e.user,
                    subcarrier: e.subcarrier,
                });
            }
            total += e.rate_bps;
        }
    }
    Ok(total)
}

/// Mean and sample standard deviation over Monte Carlo trials.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialStatistics {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl TrialStatistics {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        if n == 0 {
            return TrialStatistics {
                mean: f64::NAN,
                std: f64::NAN,
                count: 0,
            };
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        TrialStatistics { mean, std, count: n }
    }

    /// Standard error of the mean.
    pub fn sem(&self) -> f64 {
        self.std / (self.count as f64).sqrt()
    }
}

/// LOS gains of the users sharing one subcarrier in the large-array limit.
#[derive(Debug, Clone, PartialEq)]
pub struct AsymptoticSubcarrier {
    pub subcarrier: usize,
    /// `(user, eta_{u,L})` in column order; block sizes are the `K_u`.
    pub users: Vec<(u32, Vec<Complex64>)>,
}

impl AsymptoticSubcarrier {
    pub fn width(&self) -> usize {
        self.users.iter().map(|(_, e)| e.len()).sum()
    }

    pub fn blocks(&self) -> Vec<UserBlock> {
        let mut next = 0;
        self.users
            .iter()
            .map(|(u, eta)| {
                let b = UserBlock {
                    user: *u,
                    columns: next..next + eta.len(),
                    los_gains: eta.clone(),
                };
                next += eta.len();
                b
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.users.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "subcarrier {} has no users",
                self.subcarrier
            )));
        }
        for (u, eta) in &self.users {
            let first = eta
                .first()
                .ok_or_else(|| Error::InvalidArgument(format!("user {u} has an empty LOS block")))?
                .norm();
            if !(first > 0.0) {
                return Err(Error::InvalidArgument(format!("user {u} has a zero LOS gain")));
            }
            if eta.iter().any(|z| (z.norm() - first).abs() > 1e-9 * first) {
                return Err(Error::InvalidArgument(format!(
                    "LOS magnitudes of user {u} differ across its subarrays"
                )));
            }
        }
        Ok(())
    }

    /// Block matrix with column `u` holding `eta_u^H` on user `u`'s rows.
    pub fn xi(&self) -> CMatrix {
        let k = self.width();
        let mut xi = CMatrix::zeros(k, self.users.len());
        let mut row = 0;
        for (col, (_, eta)) in self.users.iter().enumerate() {
            for z in eta {
                xi[(row, col)] = z.conj();
                row += 1;
            }
        }
        xi
    }

    /// Diagonal of `Delta = diag(1/|eta_{u,k,L}|)`.
    pub fn delta(&self) -> Vec<f64> {
        self.users.iter().flat_map(|(_, e)| e.iter().map(|z| 1.0 / z.norm())).collect()
    }

    /// Normalized large-array channel matrix with rows `t_u`.
    pub fn channel_matrix(&self, frequency_hz: f64) -> Result<EffectiveChannelMatrix> {
        let blocks = self.blocks();
        let width = self.width();
        let rows = blocks
            .iter()
            .map(|b| Ok((b.user, asymptotic_effective_channel(b.user, &blocks, width)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut h = crate::beamforming::assemble_channel_matrix(self.subcarrier, frequency_hz, rows, (0..width).collect())?;
        // keep the block order of the scenario even if user ids are unsorted
        let order: Vec<u32> = self.users.iter().map(|u| u.0).collect();
        if h.users != order {
            let rows: Vec<usize> = order.iter().map(|u| h.users.iter().position(|v| v == u).unwrap()).collect();
            h.matrix = CMatrix::from_fn(rows.len(), width, |i, j| h.matrix[(rows[i], j)]);
            h.users = order;
        }
        Ok(h)
    }

    /// `C0 = arcsin(normalized Xi Xi^H) - Delta Xi Xi^H Delta`.
    pub fn c0(&self) -> Result<CMatrix> {
        self.validate()?;
        let xi = self.xi();
        let r = &xi * xi.adjoint();
        let delta = self.delta();
        let k = r.nrows();
        let mut c0 = CMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                let s = (r[(i, i)].re * r[(j, j)].re).sqrt();
                let re = asin_checked(r[(i, j)].re / s, i, j)?;
                let im = if i == j { 0.0 } else { asin_checked(r[(i, j)].im / s, i, j)? };
                c0[(i, j)] = Complex64::new(re, im) - r[(i, j)] * (delta[i] * delta[j]);
            }
        }
        Ok(c0)
    }
}

fn asin_checked(v: f64, row: usize, col: usize) -> Result<f64> {
    if !(v.abs() <= 1.0 + 1e-9) {
        return Err(Error::CorrelationOutOfRange { row, col, value: v });
    }
    Ok(v.clamp(-1.0, 1.0).asin())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsymptoticScenario {
    pub bandwidth_hz: f64,
    pub subcarriers: Vec<AsymptoticSubcarrier>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsymptoticRate {
    pub total: f64,
    pub per_user: BTreeMap<u32, f64>,
}

/// Large-array rate `sum_u sum_w B log2(1 + K_u^2 |eta_u|^2 / xi_u^w)` with
/// `xi_u^w = t_u C0 t_u^H`. No transmit power enters.
pub fn asymptotic_rate(scn: &AsymptoticScenario) -> Result<AsymptoticRate> {
    if !(scn.bandwidth_hz > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bandwidth {} must be positive",
            scn.bandwidth_hz
        )));
    }
    let mut per_user = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for sc in &scn.subcarriers {
        let c0 = sc.c0()?;
        let blocks = sc.blocks();
        let width = sc.width();
        for b in &blocks {
            if !seen.insert((b.user, sc.subcarrier)) {
                return Err(Error::DuplicateReport {
                    user: b.user,
                    subcarrier: sc.subcarrier,
                });
            }
            let t = asymptotic_effective_channel(b.user, &blocks, width)?;
            let xi = quadratic_form(&t, &c0);
            let ku = b.los_gains.len() as f64;
            let mag2 = b.los_gains[0].norm_sqr();
            if !(xi.re > 0.0) {
                return Err(Error::NonPositiveDistortionTerm {
                    user: b.user,
                    value: xi.re,
                });
            }
            let rate = scn.bandwidth_hz * (1.0 + ku * ku * mag2 / xi.re).log2();
            *per_user.entry(b.user).or_insert(0.0) += rate;
        }
    }
    Ok(AsymptoticRate {
        total: per_user.values().sum(),
        per_user,
    })
}

/// `B W log2(1 + 1/(pi/2 - 1))`: a single user with all LOS angles zero.
pub fn single_user_asymptotic_rate(bandwidth_hz: f64, subcarriers: usize) -> f64 {
    bandwidth_hz * subcarriers as f64 * (1.0 + 1.0 / (PI / 2.0 - 1.0)).log2()
}

/// Mean boresight power pattern `MN - (MN - 1) eps^2/3 + eps^2/3` of one
/// subarray whose phase shifters carry uniform errors on `[-eps, eps]`.
///
/// At `MN = 1` this evaluates to `1 + eps^2/3`, above the error-free value.
pub fn phase_error_pattern_factor(elements: usize, eps: f64) -> f64 {
    let mn = elements as f64;
    let e = eps * eps / 3.0;
    mn - (mn - 1.0) * e + e
}

/// Phase-shifter error bounds at the AP and at the users, radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseErrorSpec {
    pub eps_t: f64,
    pub eps_r: f64,
}

impl PhaseErrorSpec {
    pub fn new(eps_t: f64, eps_r: f64) -> Result<Self> {
        if !(eps_t >= 0.0) || !(eps_r >= 0.0) || !eps_t.is_finite() || !eps_r.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "phase error bounds ({eps_t}, {eps_r}) must be finite and non-negative"
            )));
        }
        Ok(PhaseErrorSpec { eps_t, eps_r })
    }

    pub fn none() -> Self {
        PhaseErrorSpec { eps_t: 0.0, eps_r: 0.0 }
    }

    pub fn is_zero(&self) -> bool {
        self.eps_t == 0.0 && self.eps_r == 0.0
    }
}

/// Large-array rate with phase errors: every LOS gain is scaled by the
/// square root of the transmit and receive pattern factors relative to the
/// ideal array gain before the asymptotic formula is applied.
pub fn asymptotic_rate_with_phase_errors(
    scn: &AsymptoticScenario,
    spec: &PhaseErrorSpec,
    tx_elements: usize,
    rx_elements: usize,
) -> Result<AsymptoticRate> {
    let ideal = (tx_elements * rx_elements) as f64;
    let perturbed = phase_error_pattern_factor(tx_elements, spec.eps_t) * phase_error_pattern_factor(rx_elements, spec.eps_r);
    let s = (perturbed / ideal).sqrt();
    let scaled = AsymptoticScenario {
        bandwidth_hz: scn.bandwidth_hz,
        subcarriers: scn
            .subcarriers
            .iter()
            .map(|sc| AsymptoticSubcarrier {
                subcarrier: sc.subcarrier,
                users: sc.users.iter().map(|(u, e)| (*u, e.iter().map(|z| z * s).collect())).collect(),
            })
            .collect(),
    };
    asymptotic_rate(&scaled)
}
