//! Multi-ray THz subarray channel.
//!
//! A subarray channel is a superposition of one line-of-sight ray and a small
//! number of reflected rays, each contributing a rank-one term
//! `eta * a_r(aoa) * a_t(aod)^H` scaled by the array size and antenna gains.
//! Path gains follow free-space spreading with an exponential molecular
//! absorption term whose coefficient is read from a tabulated spectrum.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{CMatrix, CVector};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 2.997_924_58e8;

/// Wavelength in meters for a carrier frequency in Hz.
pub fn wavelength(frequency_hz: f64) -> f64 {
    SPEED_OF_LIGHT / frequency_hz
}

/// Azimuth/elevation pair in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction {
    pub azimuth: f64,
    pub elevation: f64,
}

impl Direction {
    pub const fn new(azimuth: f64, elevation: f64) -> Self {
        Direction { azimuth, elevation }
    }

    pub fn from_degrees(azimuth: f64, elevation: f64) -> Self {
        Direction::new(azimuth.to_radians(), elevation.to_radians())
    }

    /// Direction cosines `(cos(az) sin(el), sin(az) sin(el))` along the row
    /// and column axes of a planar array.
    pub fn cosines(&self) -> (f64, f64) {
        let s = self.elevation.sin();
        (self.azimuth.cos() * s, self.azimuth.sin() * s)
    }
}

/// Uniform planar array: `rows x cols` elements at spacing `spacing` meters,
/// operated at wavelength `wavelength` meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrayGeometry {
    rows: usize,
    cols: usize,
    spacing: f64,
    wavelength: f64,
}

impl ArrayGeometry {
    pub fn new(rows: usize, cols: usize, spacing: f64, wavelength: f64) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidGeometry(format!(
                "array must have at least one element, got {rows}x{cols}"
            )));
        }
        if !(spacing > 0.0 && spacing.is_finite()) || !(wavelength > 0.0 && wavelength.is_finite())
        {
            return Err(Error::InvalidGeometry(format!(
                "spacing {spacing} and wavelength {wavelength} must be positive"
            )));
        }
        // Relative slack so that a = lambda computed through c/f still passes.
        if spacing > wavelength * (1.0 + 1e-12) {
            return Err(Error::InvalidGeometry(format!(
                "element spacing {spacing:e} m exceeds the wavelength {wavelength:e} m"
            )));
        }
        Ok(ArrayGeometry {
            rows,
            cols,
            spacing,
            wavelength,
        })
    }

    /// Half-wavelength spaced square array at the given frequency.
    pub fn half_wavelength(size: usize, frequency_hz: f64) -> Result<Self> {
        let lambda = wavelength(frequency_hz);
        ArrayGeometry::new(size, size, lambda / 2.0, lambda)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    pub fn elements(&self) -> usize {
        self.rows * self.cols
    }

    /// Same physical array operated at another wavelength.
    pub fn at_wavelength(&self, wavelength: f64) -> Result<Self> {
        ArrayGeometry::new(self.rows, self.cols, self.spacing, wavelength)
    }

    /// Electrical phase step `2 pi a / lambda`.
    pub fn phase_step(&self) -> f64 {
        TAU * self.spacing / self.wavelength
    }

    /// Per-axis phasor sequences `exp(j k m du)` and `exp(j k n dv)`.
    fn axis_phasors(&self, du: f64, dv: f64) -> (Vec<Complex64>, Vec<Complex64>) {
        let k = self.phase_step();
        (phasor_run(self.rows, k * du), phasor_run(self.cols, k * dv))
    }
}

fn phasor_run(len: usize, step: f64) -> Vec<Complex64> {
    (0..len)
        .map(|m| Complex64::from_polar(1.0, step * m as f64))
        .collect()
}

/// Planar-array steering vector. Element `(m, n)` sits at index `m * cols + n`.
pub fn steering_vector(geom: &ArrayGeometry, dir: Direction) -> CVector {
    let (u, v) = dir.cosines();
    let (xs, ys) = geom.axis_phasors(u, v);
    let scale = 1.0 / (geom.elements() as f64).sqrt();
    CVector::from_iterator(
        geom.elements(),
        xs.iter()
            .flat_map(|x| ys.iter().map(move |y| x * y * scale)),
    )
}

/// `a(first)^H a(second)`, evaluated in separable form.
pub fn steering_inner_product(geom: &ArrayGeometry, first: Direction, second: Direction) -> Complex64 {
    let (u1, v1) = first.cosines();
    let (u2, v2) = second.cosines();
    let (xs, ys) = geom.axis_phasors(u2 - u1, v2 - v1);
    let sx: Complex64 = xs.iter().sum();
    let sy: Complex64 = ys.iter().sum();
    sx * sy / geom.elements() as f64
}

/// `a(dir)^H w` for an arbitrary beamforming vector `w` in row-major order.
pub fn steering_projection(geom: &ArrayGeometry, dir: Direction, weights: &[Complex64]) -> Complex64 {
    debug_assert_eq!(weights.len(), geom.elements());
    let (u, v) = dir.cosines();
    let (xs, ys) = geom.axis_phasors(-u, -v);
    let cols = geom.cols();
    let mut acc = Complex64::new(0.0, 0.0);
    for (m, x) in xs.iter().enumerate() {
        let row = &weights[m * cols..(m + 1) * cols];
        let inner: Complex64 = ys.iter().zip(row).map(|(y, w)| y * w).sum();
        acc += x * inner;
    }
    acc / (geom.elements() as f64).sqrt()
}

/// Tabulated molecular absorption coefficient `kappa(f)` in 1/m.
///
/// Between samples the coefficient is interpolated linearly; outside the
/// table it is clamped to the nearest endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct AbsorptionModel {
    samples: Vec<(f64, f64)>,
}

impl AbsorptionModel {
    pub fn new(samples: Vec<(f64, f64)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument(
                "absorption model needs at least one sample".into(),
            ));
        }
        for (i, &(f, k)) in samples.iter().enumerate() {
            if !f.is_finite() || !k.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "absorption sample {i} is not finite"
                )));
            }
            if k < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "absorption coefficient {k} at {f:e} Hz is negative"
                )));
            }
            if i > 0 && f <= samples[i - 1].0 {
                return Err(Error::InvalidArgument(format!(
                    "absorption frequencies must be strictly increasing ({:e} then {f:e})",
                    samples[i - 1].0
                )));
            }
        }
        Ok(AbsorptionModel { samples })
    }

    /// No absorption at any frequency.
    pub fn transparent() -> Self {
        AbsorptionModel {
            samples: vec![(1.0e12, 0.0)],
        }
    }

    /// Constant coefficient at every frequency.
    pub fn constant(kappa: f64) -> Result<Self> {
        AbsorptionModel::new(vec![(1.0e12, kappa)])
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    pub fn kappa(&self, frequency_hz: f64) -> f64 {
        let s = &self.samples;
        let first = s[0];
        let last = s[s.len() - 1];
        if frequency_hz <= first.0 {
            return first.1;
        }
        if frequency_hz >= last.0 {
            return last.1;
        }
        let hi = s.partition_point(|&(f, _)| f <= frequency_hz);
        let (f0, k0) = s[hi - 1];
        let (f1, k1) = s[hi];
        k0 + (k1 - k0) * (frequency_hz - f0) / (f1 - f0)
    }

    /// Parses a two-column `frequency_hz, kappa_per_m` table. Columns may be
    /// separated by commas or whitespace; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut samples = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let fields: Vec<&str> = body
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .collect();
            if fields.len() != 2 {
                return Err(Error::AbsorptionSpectrum {
                    line,
                    message: format!("expected 2 columns, found {}", fields.len()),
                });
            }
            let parse = |s: &str| {
                s.parse::<f64>().map_err(|e| Error::AbsorptionSpectrum {
                    line,
                    message: format!("cannot parse {s:?}: {e}"),
                })
            };
            let f = parse(fields[0])?;
            let k = parse(fields[1])?;
            if let Some(&(prev, _)) = samples.last() {
                if f <= prev {
                    return Err(Error::AbsorptionSpectrum {
                        line,
                        message: format!("frequency {f:e} does not increase (previous {prev:e})"),
                    });
                }
            }
            if !(k >= 0.0) || !k.is_finite() {
                return Err(Error::AbsorptionSpectrum {
                    line,
                    message: format!("absorption coefficient {k} must be non-negative"),
                });
            }
            samples.push((f, k));
        }
        if samples.is_empty() {
            return Err(Error::AbsorptionSpectrum {
                line: 0,
                message: "no samples".into(),
            });
        }
        AbsorptionModel::new(samples)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })?;
        AbsorptionModel::parse(&text)
    }
}

/// Loads an absorption spectrum from tabular text.
pub fn load_absorption_spectrum(text: &str) -> Result<AbsorptionModel> {
    AbsorptionModel::parse(text)
}

/// LOS power gain `(c / (4 pi f d))^2 * exp(-kappa(f) d)`.
pub fn los_path_gain(frequency_hz: f64, distance_m: f64, absorption: &AbsorptionModel) -> Result<f64> {
    if !(frequency_hz > 0.0) || !(distance_m > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "path gain needs positive frequency and distance, got f={frequency_hz}, d={distance_m}"
        )));
    }
    let spreading = SPEED_OF_LIGHT / (4.0 * PI * frequency_hz * distance_m);
    Ok(spreading * spreading * (-absorption.kappa(frequency_hz) * distance_m).exp())
}

/// Power gain of a reflected ray with reflection coefficient `gamma`.
pub fn nlos_path_gain(
    frequency_hz: f64,
    distance_m: f64,
    absorption: &AbsorptionModel,
    gamma: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!(
            "reflection coefficient {gamma} outside [0, 1]"
        )));
    }
    Ok(gamma * gamma * los_path_gain(frequency_hz, distance_m, absorption)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RayKind {
    Los,
    /// Reflected ray with one or two bounces.
    Nlos { order: u8 },
}

/// One propagation path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub kind: RayKind,
    pub gain: Complex64,
    pub aod: Direction,
    pub aoa: Direction,
}

impl Ray {
    pub fn is_los(&self) -> bool {
        self.kind == RayKind::Los
    }
}

/// Returns the single LOS ray of a ray list.
pub fn los_ray(rays: &[Ray]) -> Result<&Ray> {
    let mut los = rays.iter().filter(|r| r.is_los());
    match (los.next(), los.next()) {
        (Some(r), None) => Ok(r),
        _ => Err(Error::LosRayCount {
            found: rays.iter().filter(|r| r.is_los()).count(),
        }),
    }
}

/// Dense channel matrix of one transmit subarray towards one user subarray.
#[derive(Debug, Clone)]
pub struct SubarrayChannel {
    pub matrix: CMatrix,
    pub frequency_hz: f64,
    pub distance_m: f64,
    pub tx: ArrayGeometry,
    pub rx: ArrayGeometry,
}

/// Builds `sqrt(Mt Nt Mr Nr) * sum_i eta_i Ωt Ωr a_r(aoa_i) a_t(aod_i)^H`.
pub fn synthesize_subarray_channel(
    rays: &[Ray],
    tx: &ArrayGeometry,
    rx: &ArrayGeometry,
    omega_t: f64,
    omega_r: f64,
    frequency_hz: f64,
    distance_m: f64,
) -> Result<SubarrayChannel> {
    los_ray(rays)?;
    let scale = ((tx.elements() * rx.elements()) as f64).sqrt() * omega_t * omega_r;
    let mut matrix = CMatrix::zeros(rx.elements(), tx.elements());
    for ray in rays {
        let ar = steering_vector(rx, ray.aoa);
        let at = steering_vector(tx, ray.aod);
        let g = ray.gain * scale;
        for (j, t) in at.iter().enumerate() {
            let tc = t.conj() * g;
            for (i, r) in ar.iter().enumerate() {
                matrix[(i, j)] += r * tc;
            }
        }
    }
    Ok(SubarrayChannel {
        matrix,
        frequency_hz,
        distance_m,
        tx: *tx,
        rx: *rx,
    })
}

/// Statistics of the reflected rays drawn around each LOS path.
#[derive(Debug, Clone, PartialEq)]
pub struct NlosSpec {
    pub first_order: usize,
    pub second_order: usize,
    /// Power loss of a one-bounce ray relative to LOS, dB.
    pub first_order_loss_db: f64,
    pub second_order_loss_db: f64,
    pub azimuth: (f64, f64),
    pub elevation: (f64, f64),
}

impl Default for NlosSpec {
    fn default() -> Self {
        NlosSpec {
            first_order: 2,
            second_order: 1,
            first_order_loss_db: 10.0,
            second_order_loss_db: 20.0,
            azimuth: (-PI, PI),
            elevation: (0.0, PI / 2.0),
        }
    }
}

impl NlosSpec {
    pub fn line_of_sight_only() -> Self {
        NlosSpec {
            first_order: 0,
            second_order: 0,
            ..NlosSpec::default()
        }
    }

    pub fn count(&self) -> usize {
        self.first_order + self.second_order
    }

    /// Amplitude reflection coefficient for a given bounce count.
    pub fn reflection_coefficient(&self, order: u8) -> f64 {
        let loss = if order <= 1 {
            self.first_order_loss_db
        } else {
            self.second_order_loss_db
        };
        10f64.powf(-loss / 20.0)
    }
}

/// Frequency-independent description of one ray: its geometry, random phase
/// and amplitude relative to LOS.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathComponent {
    pub kind: RayKind,
    pub aod: Direction,
    pub aoa: Direction,
    pub phase: f64,
    pub reflection: f64,
}

/// Ray geometry of one user link, shared by all transmit subarrays and
/// subcarriers. Subarrays see the same angles but pick up a propagation
/// phase from their position along the AP row axis.
#[derive(Debug, Clone, PartialEq)]
pub struct PathProfile {
    pub components: Vec<PathComponent>,
}

impl PathProfile {
    pub fn sample<R: Rng + ?Sized>(
        rng: &mut R,
        los_aod: Direction,
        los_aoa: Direction,
        nlos: &NlosSpec,
    ) -> Self {
        let mut components = Vec::with_capacity(1 + nlos.count());
        components.push(PathComponent {
            kind: RayKind::Los,
            aod: los_aod,
            aoa: los_aoa,
            phase: rng.random_range(0.0..TAU),
            reflection: 1.0,
        });
        let orders = std::iter::repeat_n(1u8, nlos.first_order).chain(std::iter::repeat_n(2u8, nlos.second_order));
        for order in orders {
            let mut angle = |(lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
            let aod = Direction::new(angle(nlos.azimuth), angle(nlos.elevation));
            let aoa = Direction::new(angle(nlos.azimuth), angle(nlos.elevation));
            components.push(PathComponent {
                kind: RayKind::Nlos { order },
                aod,
                aoa,
                phase: rng.random_range(0.0..TAU),
                reflection: nlos.reflection_coefficient(order),
            });
        }
        PathProfile { components }
    }

    pub fn los(&self) -> &PathComponent {
        &self.components[0]
    }

    /// Rays seen by a subarray displaced `offset_m` along the AP row axis.
    pub fn rays(
        &self,
        frequency_hz: f64,
        distance_m: f64,
        absorption: &AbsorptionModel,
        offset_m: f64,
    ) -> Result<Vec<Ray>> {
        let los_amplitude = los_path_gain(frequency_hz, distance_m, absorption)?.sqrt();
        let k = TAU * frequency_hz / SPEED_OF_LIGHT;
        Ok(self
            .components
            .iter()
            .map(|c| {
                let (u, _) = c.aod.cosines();
                let phase = c.phase - k * offset_m * u;
                Ray {
                    kind: c.kind,
                    gain: Complex64::from_polar(los_amplitude * c.reflection, phase),
                    aod: c.aod,
                    aoa: c.aoa,
                }
            })
            .collect())
    }
}

/// Draws one LOS ray plus `nlos.count()` reflected rays at a single frequency.
pub fn sample_rays<R: Rng + ?Sized>(
    rng: &mut R,
    los_aod: Direction,
    los_aoa: Direction,
    nlos: &NlosSpec,
    frequency_hz: f64,
    distance_m: f64,
    absorption: &AbsorptionModel,
) -> Result<Vec<Ray>> {
    PathProfile::sample(rng, los_aod, los_aoa, nlos).rays(frequency_hz, distance_m, absorption, 0.0)
}
