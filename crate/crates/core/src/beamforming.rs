//! Analog beam selection and effective-channel assembly.
//!
//! Each transmit subarray steers one analog beam shared by its user group and
//! each user steers one receive beam. After beamforming a user sees one
//! complex scalar per transmit subarray; stacking those rows over the users
//! active on a subcarrier gives the baseband channel matrix.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::ops::Range;

use num_complex::Complex64;

use crate::channel::{
    steering_inner_product, steering_projection, steering_vector, ArrayGeometry, Direction, Ray,
    SubarrayChannel,
};
use crate::error::{Error, Result};
use crate::linalg::CMatrix;

/// Finite grid of candidate beam directions.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    entries: Vec<Direction>,
    separation: f64,
}

impl Codebook {
    pub fn from_entries(entries: Vec<Direction>, separation: f64) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyCodebook);
        }
        Ok(Codebook {
            entries,
            separation,
        })
    }

    /// Azimuth `[-pi, pi)` by elevation `[0, pi/2)`, which covers the front
    /// hemisphere of a planar array once.
    pub fn hemisphere(separation: f64) -> Result<Self> {
        build_codebook(separation, (-PI, PI), (0.0, PI / 2.0))
    }

    /// Fine grid of step `step` over the pre-scan cell of size `section`
    /// that contains `dir`. Cells tile azimuth from `-pi` and elevation
    /// from 0.
    pub fn section(dir: Direction, section: f64, step: f64) -> Result<Self> {
        if !(section > 0.0) || !(step > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "section {section} and step {step} must be positive"
            )));
        }
        let az0 = -PI + ((dir.azimuth + PI) / section).floor() * section;
        let el0 = (dir.elevation / section).floor() * section;
        build_codebook(step, (az0, az0 + section), (el0, el0 + section))
    }

    pub fn entries(&self) -> &[Direction] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn separation(&self) -> f64 {
        self.separation
    }

    pub fn contains(&self, dir: Direction) -> bool {
        self.entries.contains(&dir)
    }
}

fn grid_count(range: (f64, f64), step: f64) -> usize {
    (((range.1 - range.0) / step - 1e-9).ceil() as usize).max(1)
}

/// Uniform grid over `[az.0, az.1) x [el.0, el.1)` with step `separation`,
/// azimuth outer and elevation inner.
pub fn build_codebook(separation: f64, azimuth: (f64, f64), elevation: (f64, f64)) -> Result<Codebook> {
    if !(separation > 0.0) || !separation.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "codebook separation {separation} must be positive"
        )));
    }
    for (name, r) in [("azimuth", azimuth), ("elevation", elevation)] {
        if !(r.1 > r.0) || !r.0.is_finite() || !r.1.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "{name} range [{}, {}) is degenerate",
                r.0, r.1
            )));
        }
    }
    let (na, ne) = (grid_count(azimuth, separation), grid_count(elevation, separation));
    let entries = (0..na)
        .flat_map(|i| {
            (0..ne).map(move |j| {
                Direction::new(
                    azimuth.0 + i as f64 * separation,
                    elevation.0 + j as f64 * separation,
                )
            })
        })
        .collect();
    Codebook::from_entries(entries, separation)
}

/// Transmit angle per group and receive angle per user.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BeamSelection {
    pub tx: BTreeMap<u32, Direction>,
    pub rx: BTreeMap<u32, Direction>,
}

/// `a_r(rx)^H F a_t(tx)` on a dense subarray channel.
pub fn effective_channel(ch: &SubarrayChannel, tx: Direction, rx: Direction) -> Result<Complex64> {
    let at = steering_vector(&ch.tx, tx);
    let ar = steering_vector(&ch.rx, rx);
    if ch.matrix.shape() != (ar.len(), at.len()) {
        return Err(Error::DimensionMismatch(format!(
            "channel is {:?}, beams need {}x{}",
            ch.matrix.shape(),
            ar.len(),
            at.len()
        )));
    }
    Ok(ar.dotc(&(&ch.matrix * at)))
}

/// Scale `sqrt(Mt Nt Mr Nr) * Ωt * Ωr` applied to every ray of a subarray
/// channel.
pub fn array_scale(tx: &ArrayGeometry, rx: &ArrayGeometry, omega_t: f64, omega_r: f64) -> f64 {
    ((tx.elements() * rx.elements()) as f64).sqrt() * omega_t * omega_r
}

/// Effective channel evaluated ray by ray with ideal steering beams; equal
/// to [`effective_channel`] on the synthesized matrix without forming it.
pub fn ray_effective_channel(
    rays: &[Ray],
    tx: &ArrayGeometry,
    rx: &ArrayGeometry,
    scale: f64,
    tx_beam: Direction,
    rx_beam: Direction,
) -> Complex64 {
    rays.iter()
        .map(|r| {
            r.gain
                * steering_inner_product(rx, rx_beam, r.aoa)
                * steering_inner_product(tx, r.aod, tx_beam)
        })
        .sum::<Complex64>()
        * scale
}

/// Effective channel for arbitrary beamforming weight vectors, e.g. steering
/// vectors corrupted by phase-shifter errors.
pub fn weighted_effective_channel(
    rays: &[Ray],
    tx: &ArrayGeometry,
    rx: &ArrayGeometry,
    scale: f64,
    tx_weights: &[Complex64],
    rx_weights: &[Complex64],
) -> Complex64 {
    rays.iter()
        .map(|r| {
            r.gain
                * steering_projection(rx, r.aoa, rx_weights).conj()
                * steering_projection(tx, r.aod, tx_weights)
        })
        .sum::<Complex64>()
        * scale
}

/// One user's propagation toward the subarrays of its group on one
/// subcarrier. Ray angles are common to all subarrays; gains are not.
#[derive(Debug, Clone)]
pub struct RayLink {
    pub frequency_hz: f64,
    pub tx: ArrayGeometry,
    pub rx: ArrayGeometry,
    pub scale: f64,
    pub aod: Vec<Direction>,
    pub aoa: Vec<Direction>,
    /// `gains[k][i]`: gain of ray `i` toward subarray `k`.
    pub gains: Vec<Vec<Complex64>>,
    /// `|eta_L|`, the normalizer of the selection objective.
    pub los_magnitude: f64,
}

impl RayLink {
    fn validate(&self) -> Result<()> {
        let j = self.aod.len();
        if self.aoa.len() != j || self.gains.iter().any(|g| g.len() != j) {
            return Err(Error::DimensionMismatch(format!(
                "ray link has {} AoDs, {} AoAs and gain rows of lengths {:?}",
                j,
                self.aoa.len(),
                self.gains.iter().map(Vec::len).collect::<Vec<_>>()
            )));
        }
        if !(self.los_magnitude > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "LOS magnitude {} must be positive",
                self.los_magnitude
            )));
        }
        Ok(())
    }

    /// Objective contribution `sum_k |h_k|^2 / |eta_L|^2` for one beam pair.
    pub fn objective(&self, tx: Direction, rx: Direction) -> f64 {
        let t: Vec<Complex64> = self.aod.iter().map(|&d| steering_inner_product(&self.tx, d, tx)).collect();
        let r: Vec<Complex64> = self.aoa.iter().map(|&d| steering_inner_product(&self.rx, rx, d)).collect();
        let norm = self.scale / self.los_magnitude;
        self.gains
            .iter()
            .map(|g| {
                let h: Complex64 = g.iter().zip(&t).zip(&r).map(|((g, t), r)| g * t * r).sum();
                (h * norm).norm_sqr()
            })
            .sum()
    }
}

/// Users of one group competing for its transmit beam.
#[derive(Debug, Clone)]
pub struct GroupSearch<'a> {
    pub group: u32,
    pub tx_codebook: &'a Codebook,
    pub users: Vec<UserSearch<'a>>,
}

#[derive(Debug, Clone)]
pub struct UserSearch<'a> {
    pub user: u32,
    pub rx_codebook: &'a Codebook,
    /// One link per subcarrier of the user.
    pub links: &'a [RayLink],
}

/// Result of the search for one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupBeams {
    pub tx_index: usize,
    pub rx_index: BTreeMap<u32, usize>,
    pub objective: f64,
}

/// Per-user lookup tables of steering inner products.
struct UserTables {
    /// `t[c][w][i] = a_t(aod_i)^H a_t(tx_c)`
    t: Vec<Vec<Vec<Complex64>>>,
    /// `r[c][w][i] = a_r(rx_c)^H a_r(aoa_i)`
    r: Vec<Vec<Vec<Complex64>>>,
    /// `max_c |r[c][w][i]|`
    r_max: Vec<Vec<f64>>,
    /// `gains[w][k][i] * scale / |eta_L|`
    coef: Vec<Vec<Vec<Complex64>>>,
}

impl UserTables {
    fn build(tx_codebook: &Codebook, user: &UserSearch) -> Result<Self> {
        for link in user.links {
            link.validate()?;
        }
        let t = tx_codebook
            .entries()
            .iter()
            .map(|&c| {
                user.links
                    .iter()
                    .map(|l| l.aod.iter().map(|&d| steering_inner_product(&l.tx, d, c)).collect())
                    .collect()
            })
            .collect();
        let r: Vec<Vec<Vec<Complex64>>> = user
            .rx_codebook
            .entries()
            .iter()
            .map(|&c| {
                user.links
                    .iter()
                    .map(|l| l.aoa.iter().map(|&d| steering_inner_product(&l.rx, c, d)).collect())
                    .collect()
            })
            .collect();
        let r_max = user
            .links
            .iter()
            .enumerate()
            .map(|(w, l)| {
                (0..l.aoa.len())
                    .map(|i| r.iter().map(|rc| rc[w][i].norm()).fold(0.0, f64::max))
                    .collect()
            })
            .collect();
        let coef = user
            .links
            .iter()
            .map(|l| {
                let s = l.scale / l.los_magnitude;
                l.gains.iter().map(|g| g.iter().map(|z| z * s).collect()).collect()
            })
            .collect();
        Ok(UserTables { t, r, r_max, coef })
    }

    /// Upper bound on this user's best objective for transmit codeword `c`.
    fn bound(&self, c: usize) -> f64 {
        let mut total = 0.0;
        for (w, coef_w) in self.coef.iter().enumerate() {
            let t = &self.t[c][w];
            for row in coef_w {
                let s: f64 = row
                    .iter()
                    .zip(t)
                    .zip(&self.r_max[w])
                    .map(|((a, t), m)| (a * t).norm() * m)
                    .sum();
                total += s * s;
            }
        }
        total
    }

    /// Best receive codeword for transmit codeword `c`, lowest index on ties.
    fn best_rx(&self, c: usize) -> (usize, f64) {
        // a[w][k][i] = coef * t
        let a: Vec<Vec<Vec<Complex64>>> = self
            .coef
            .iter()
            .zip(&self.t[c])
            .map(|(coef_w, t)| {
                coef_w
                    .iter()
                    .map(|row| row.iter().zip(t).map(|(x, y)| x * y).collect())
                    .collect()
            })
            .collect();
        let mut best = (0usize, f64::NEG_INFINITY);
        for (idx, r) in self.r.iter().enumerate() {
            let mut v = 0.0;
            for (a_w, r_w) in a.iter().zip(r) {
                for row in a_w {
                    let h: Complex64 = row.iter().zip(r_w).map(|(x, y)| x * y).sum();
                    v += h.norm_sqr();
                }
            }
            if v > best.1 {
                best = (idx, v);
            }
        }
        best
    }
}

/// Exact argmax of the group objective `sum_u sum_w sum_k |h_k|^2/|eta_L|^2`
/// over the transmit codebook and each user's receive codebook.
///
/// For a fixed transmit beam the users decouple, so each user's receive beam
/// is maximized on its own. Transmit candidates are visited in decreasing
/// order of an upper bound and the scan stops once the bound falls below the
/// best value found.
pub fn search_group(search: &GroupSearch) -> Result<GroupBeams> {
    if search.tx_codebook.is_empty() || search.users.iter().any(|u| u.rx_codebook.is_empty()) {
        return Err(Error::EmptyCodebook);
    }
    if search.users.is_empty() {
        return Err(Error::InvalidArgument(format!("group {} has no users", search.group)));
    }
    let tables = search
        .users
        .iter()
        .map(|u| UserTables::build(search.tx_codebook, u))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<(f64, usize)> = (0..search.tx_codebook.len())
        .map(|c| (tables.iter().map(|t| t.bound(c)).sum(), c))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut best: Option<GroupBeams> = None;
    for (bound, c) in order {
        if let Some(b) = &best {
            // the bound carries rounding of its own; keep a relative margin
            if bound < b.objective * (1.0 - 1e-12) {
                break;
            }
        }
        let mut total = 0.0;
        let mut rx_index = BTreeMap::new();
        for (u, t) in search.users.iter().zip(&tables) {
            let (idx, v) = t.best_rx(c);
            rx_index.insert(u.user, idx);
            total += v;
        }
        let better = match &best {
            None => true,
            Some(b) => total > b.objective || (total == b.objective && c < b.tx_index),
        };
        if better {
            best = Some(GroupBeams {
                tx_index: c,
                rx_index,
                objective: total,
            });
        }
    }
    Ok(best.expect("codebook is non-empty"))
}

/// Codebook beam selection for every group.
pub fn select_beam_angles_codebook(groups: &[GroupSearch]) -> Result<BeamSelection> {
    let mut sel = BeamSelection::default();
    for g in groups {
        let beams = search_group(g)?;
        sel.tx.insert(g.group, g.tx_codebook.entries()[beams.tx_index]);
        for u in &g.users {
            sel.rx.insert(u.user, u.rx_codebook.entries()[beams.rx_index[&u.user]]);
        }
    }
    Ok(sel)
}

/// Dense-matrix form of the selection problem for one group: the channel of
/// every user on every subcarrier toward every subarray of the group.
#[derive(Debug, Clone)]
pub struct GroupChannels<'a> {
    pub group: u32,
    pub users: Vec<UserChannels<'a>>,
}

#[derive(Debug, Clone)]
pub struct UserChannels<'a> {
    pub user: u32,
    /// `channels[w][k]`
    pub channels: &'a [Vec<SubarrayChannel>],
    /// `|eta_L|` per subcarrier.
    pub los_magnitude: &'a [f64],
}

/// Brute-force selection over full matrices, scanning every transmit and
/// receive pair. Intended for small arrays and as a reference for
/// [`select_beam_angles_codebook`].
pub fn select_beam_angles_exhaustive(
    groups: &[GroupChannels],
    tx_codebook: &Codebook,
    rx_codebook: &Codebook,
) -> Result<BeamSelection> {
    if tx_codebook.is_empty() || rx_codebook.is_empty() {
        return Err(Error::EmptyCodebook);
    }
    let mut sel = BeamSelection::default();
    for g in groups {
        let mut best: Option<(f64, usize, BTreeMap<u32, usize>)> = None;
        for (ci, &tx) in tx_codebook.entries().iter().enumerate() {
            let mut total = 0.0;
            let mut picks = BTreeMap::new();
            for u in &g.users {
                let mut ub = (0usize, f64::NEG_INFINITY);
                for (ri, &rx) in rx_codebook.entries().iter().enumerate() {
                    let mut v = 0.0;
                    for (w, per_k) in u.channels.iter().enumerate() {
                        let norm = u.los_magnitude[w] * u.los_magnitude[w];
                        for ch in per_k {
                            v += effective_channel(ch, tx, rx)?.norm_sqr() / norm;
                        }
                    }
                    if v > ub.1 {
                        ub = (ri, v);
                    }
                }
                picks.insert(u.user, ub.0);
                total += ub.1;
            }
            if best.as_ref().is_none_or(|b| total > b.0) {
                best = Some((total, ci, picks));
            }
        }
        let (_, ci, picks) = best.expect("codebook is non-empty");
        sel.tx.insert(g.group, tx_codebook.entries()[ci]);
        for (user, ri) in picks {
            sel.rx.insert(user, rx_codebook.entries()[ri]);
        }
    }
    Ok(sel)
}

/// `(group, [(user, links)])` as scored by [`beam_objective`].
pub type GroupLinks<'a> = (u32, Vec<(u32, &'a [RayLink])>);

/// Value of the selection objective for given beams, summed over groups.
pub fn beam_objective(groups: &[GroupLinks], sel: &BeamSelection) -> Result<f64> {
    let mut total = 0.0;
    for (group, users) in groups {
        let tx = *sel.tx.get(group).ok_or_else(|| {
            Error::InvalidArgument(format!("no transmit beam for group {group}"))
        })?;
        for (user, links) in users {
            let rx = *sel.rx.get(user).ok_or_else(|| {
                Error::InvalidArgument(format!("no receive beam for user {user}"))
            })?;
            total += links.iter().map(|l| l.objective(tx, rx)).sum::<f64>();
        }
    }
    Ok(total)
}

/// LOS ray angles and group membership of one user.
#[derive(Debug, Clone)]
pub struct LosUser<'a> {
    pub user: u32,
    pub group: u32,
    pub rays: &'a [Ray],
}

/// Beams along the LOS path: each user receives along its LOS AoA and each
/// group transmits along the LOS AoD of its reference user.
pub fn select_beam_angles_los(users: &[LosUser], reference: &BTreeMap<u32, u32>) -> Result<BeamSelection> {
    let mut sel = BeamSelection::default();
    for u in users {
        let los = crate::channel::los_ray(u.rays)?;
        sel.rx.insert(u.user, los.aoa);
        let reference_user = reference.get(&u.group).copied().unwrap_or(u.user);
        if reference_user == u.user {
            sel.tx.insert(u.group, los.aod);
        }
    }
    for u in users {
        if !sel.tx.contains_key(&u.group) {
            return Err(Error::InvalidArgument(format!(
                "reference user of group {} is not among the users",
                u.group
            )));
        }
    }
    Ok(sel)
}

/// Baseband channel `H~` of one subcarrier.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveChannelMatrix {
    pub matrix: CMatrix,
    pub subcarrier: usize,
    pub frequency_hz: f64,
    pub users: Vec<u32>,
    pub subarrays: Vec<usize>,
}

impl EffectiveChannelMatrix {
    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn subarray_count(&self) -> usize {
        self.subarrays.len()
    }

    pub fn row(&self, u: usize) -> Vec<Complex64> {
        self.matrix.row(u).iter().copied().collect()
    }
}

/// Stacks per-user effective channel rows in ascending user-id order.
pub fn assemble_channel_matrix(
    subcarrier: usize,
    frequency_hz: f64,
    mut rows: Vec<(u32, Vec<Complex64>)>,
    subarrays: Vec<usize>,
) -> Result<EffectiveChannelMatrix> {
    if rows.is_empty() || subarrays.is_empty() {
        return Err(Error::DimensionMismatch(
            "channel matrix needs at least one user and one subarray".into(),
        ));
    }
    let distinct: BTreeSet<usize> = subarrays.iter().copied().collect();
    if distinct.len() != subarrays.len() {
        return Err(Error::DimensionMismatch(format!(
            "repeated subarray id in {subarrays:?}"
        )));
    }
    rows.sort_by_key(|r| r.0);
    if rows.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::DimensionMismatch("repeated user id".into()));
    }
    let k = subarrays.len();
    if let Some((u, r)) = rows.iter().find(|(_, r)| r.len() != k) {
        return Err(Error::DimensionMismatch(format!(
            "row of user {u} has length {}, expected {k}",
            r.len()
        )));
    }
    if rows.iter().flat_map(|(_, r)| r).any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::InvalidArgument("channel entries must be finite".into()));
    }
    let matrix = CMatrix::from_fn(rows.len(), k, |i, j| rows[i].1[j]);
    Ok(EffectiveChannelMatrix {
        matrix,
        subcarrier,
        frequency_hz,
        users: rows.into_iter().map(|r| r.0).collect(),
        subarrays,
    })
}

/// Contiguous subarray blocks per group, assigned in ascending group id.
#[derive(Debug, Clone, PartialEq)]
pub struct SubarrayAllocation {
    total: usize,
    blocks: BTreeMap<u32, Range<usize>>,
}

impl SubarrayAllocation {
    pub fn new(total: usize, counts: &BTreeMap<u32, usize>) -> Result<Self> {
        let mut blocks = BTreeMap::new();
        let mut next = 0;
        for (&g, &n) in counts {
            if n == 0 {
                return Err(Error::InvalidArgument(format!("group {g} has no subarrays")));
            }
            blocks.insert(g, next..next + n);
            next += n;
        }
        if next > total {
            return Err(Error::OverlappingAllocation(format!(
                "groups request {next} subarrays but the AP has {total}"
            )));
        }
        Ok(SubarrayAllocation { total, blocks })
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn block(&self, group: u32) -> Option<Range<usize>> {
        self.blocks.get(&group).cloned()
    }

    pub fn count(&self, group: u32) -> usize {
        self.block(group).map_or(0, |r| r.len())
    }

    /// Subarrays active for a set of groups, ordered by group id.
    pub fn active(&self, groups: &BTreeSet<u32>) -> Vec<usize> {
        groups
            .iter()
            .filter_map(|g| self.blocks.get(g))
            .flat_map(|r| r.clone())
            .collect()
    }
}

/// One user's LOS gains on its block of the subcarrier's subarray list.
#[derive(Debug, Clone, PartialEq)]
pub struct UserBlock {
    pub user: u32,
    /// Column range inside the `K^w` active subarrays.
    pub columns: Range<usize>,
    /// `eta_{u,k,L}` for each column of the block.
    pub los_gains: Vec<Complex64>,
}

/// Large-array limit of the normalized effective channel: user `user`'s LOS
/// gains on its own block and zeros elsewhere.
pub fn asymptotic_effective_channel(user: u32, blocks: &[UserBlock], width: usize) -> Result<Vec<Complex64>> {
    let mut owner = vec![None; width];
    for b in blocks {
        if b.columns.end > width || b.columns.len() != b.los_gains.len() {
            return Err(Error::DimensionMismatch(format!(
                "block of user {} spans {:?} with {} gains in width {width}",
                b.user,
                b.columns,
                b.los_gains.len()
            )));
        }
        for c in b.columns.clone() {
            if let Some(other) = owner[c].replace(b.user) {
                return Err(Error::OverlappingAllocation(format!(
                    "column {c} claimed by users {other} and {}",
                    b.user
                )));
            }
        }
    }
    let mine = blocks
        .iter()
        .find(|b| b.user == user)
        .ok_or_else(|| Error::InvalidArgument(format!("user {user} has no block")))?;
    let mut t = vec![Complex64::new(0.0, 0.0); width];
    t[mine.columns.clone()].copy_from_slice(&mine.los_gains);
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{
        los_path_gain, synthesize_subarray_channel, AbsorptionModel, NlosSpec, PathProfile,
        RayKind,
    };
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn codebook_grid_sizes() {
        let cb = build_codebook(PI / 2.0, (0.0, PI), (0.0, PI)).unwrap();
        assert_eq!(cb.len(), 4);
        assert_eq!(cb.entries()[1], Direction::new(0.0, PI / 2.0));
        let one = build_codebook(10.0, (0.3, 1.0), (0.1, 0.2)).unwrap();
        assert_eq!(one.entries(), &[Direction::new(0.3, 0.1)]);
        let full = build_codebook(PI / 18.0, (-PI, PI), (0.0, PI)).unwrap();
        assert_eq!(full.len(), 36 * 18);
        assert_eq!(Codebook::hemisphere(PI / 36.0).unwrap().len(), 72 * 18);
    }

    #[test]
    fn codebook_steps_are_uniform() {
        let cb = build_codebook(PI / 18.0, (-PI, PI), (0.0, PI / 2.0)).unwrap();
        let e = cb.entries();
        for w in e.windows(2) {
            let d = if w[0].azimuth == w[1].azimuth {
                w[1].elevation - w[0].elevation
            } else {
                w[1].azimuth - w[0].azimuth
            };
            if d > 0.0 && w[0].azimuth == w[1].azimuth {
                assert!((d - PI / 18.0).abs() < 1e-12);
            }
        }
        for (i, a) in e.iter().enumerate() {
            for b in &e[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn codebook_rejects_bad_input() {
        assert!(build_codebook(0.0, (0.0, 1.0), (0.0, 1.0)).is_err());
        assert!(build_codebook(0.1, (1.0, 1.0), (0.0, 1.0)).is_err());
        assert!(matches!(Codebook::from_entries(vec![], 0.1), Err(Error::EmptyCodebook)));
    }

    #[test]
    fn section_codebook_contains_its_center_cell() {
        let step = PI / 180.0;
        let dir = Direction::from_degrees(33.4, 41.7);
        let cb = Codebook::section(dir, PI / 18.0, step).unwrap();
        assert_eq!(cb.len(), 100);
        let e = cb.entries();
        assert!((e[0].azimuth.to_degrees() - 30.0).abs() < 1e-9);
        assert!((e[0].elevation.to_degrees() - 40.0).abs() < 1e-9);
        assert!(e.iter().any(|d| (d.azimuth - 33f64.to_radians()).abs() < 1e-9
            && (d.elevation - 42f64.to_radians()).abs() < 1e-9));
    }

    fn los_only(gain: Complex64, aod: Direction, aoa: Direction) -> Vec<Ray> {
        vec![Ray {
            kind: RayKind::Los,
            gain,
            aod,
            aoa,
        }]
    }

    #[test]
    fn scalar_effective_channel() {
        let g = ArrayGeometry::new(1, 1, 0.5, 1.0).unwrap();
        let d = Direction::new(0.0, 0.0);
        let ch = synthesize_subarray_channel(&los_only(c(0.2, 0.7), d, d), &g, &g, 1.0, 1.0, 1e12, 1.0).unwrap();
        let h = effective_channel(&ch, Direction::new(1.0, 0.4), Direction::new(-2.0, 0.1)).unwrap();
        assert!((h - c(0.2, 0.7)).norm() < 1e-15);
    }

    #[test]
    fn matched_beams_recover_full_array_gain() {
        let tx = ArrayGeometry::new(4, 3, 0.5, 1.0).unwrap();
        let rx = ArrayGeometry::new(2, 2, 0.5, 1.0).unwrap();
        let (aod, aoa) = (Direction::new(0.4, 0.7), Direction::new(-0.9, 0.3));
        let eta = c(0.3, -0.4);
        let ch = synthesize_subarray_channel(&los_only(eta, aod, aoa), &tx, &rx, 10.0, 10.0, 1e12, 1.0).unwrap();
        let h = effective_channel(&ch, aod, aoa).unwrap();
        let want = eta * 48f64.sqrt() * 100.0;
        assert!((h - want).norm() < 1e-12 * want.norm());
        let off = effective_channel(&ch, Direction::new(0.5, 0.7), aoa).unwrap();
        assert!(off.norm() < h.norm());
    }

    #[test]
    fn effective_channel_rejects_wrong_geometry() {
        let g = ArrayGeometry::new(2, 2, 0.5, 1.0).unwrap();
        let d = Direction::new(0.0, 0.0);
        let mut ch = synthesize_subarray_channel(&los_only(c(1.0, 0.0), d, d), &g, &g, 1.0, 1.0, 1e12, 1.0).unwrap();
        ch.tx = ArrayGeometry::new(3, 2, 0.5, 1.0).unwrap();
        assert!(matches!(effective_channel(&ch, d, d), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn ray_route_matches_matrix_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let tx = ArrayGeometry::new(3, 2, 0.45, 1.0).unwrap();
        let rx = ArrayGeometry::new(2, 3, 0.5, 1.0).unwrap();
        let none = AbsorptionModel::transparent();
        let p = PathProfile::sample(&mut rng, Direction::new(0.2, 0.4), Direction::new(1.0, 0.6), &NlosSpec::default());
        let rays = p.rays(0.6e12, 2.0, &none, 0.0).unwrap();
        let ch = synthesize_subarray_channel(&rays, &tx, &rx, 3.0, 2.0, 0.6e12, 2.0).unwrap();
        let (bt, br) = (Direction::new(0.1, 0.5), Direction::new(0.9, 0.7));
        let a = effective_channel(&ch, bt, br).unwrap();
        let b = ray_effective_channel(&rays, &tx, &rx, array_scale(&tx, &rx, 3.0, 2.0), bt, br);
        assert!((a - b).norm() < 1e-12 * a.norm().max(1e-30));
        let wt = steering_vector(&tx, bt);
        let wr = steering_vector(&rx, br);
        let w = weighted_effective_channel(&rays, &tx, &rx, array_scale(&tx, &rx, 3.0, 2.0), wt.as_slice(), wr.as_slice());
        assert!((a - w).norm() < 1e-12 * a.norm().max(1e-30));
    }

    fn link_from(profile: &PathProfile, f: f64, tx: ArrayGeometry, rx: ArrayGeometry, offsets: &[f64]) -> RayLink {
        let none = AbsorptionModel::transparent();
        let gains = offsets
            .iter()
            .map(|&x| profile.rays(f, 1.0, &none, x).unwrap().iter().map(|r| r.gain).collect())
            .collect();
        RayLink {
            frequency_hz: f,
            tx,
            rx,
            scale: array_scale(&tx, &rx, 1.0, 1.0),
            aod: profile.components.iter().map(|c| c.aod).collect(),
            aoa: profile.components.iter().map(|c| c.aoa).collect(),
            gains,
            los_magnitude: los_path_gain(f, 1.0, &none).unwrap().sqrt(),
        }
    }

    #[test]
    fn single_entry_codebook_is_returned() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = ArrayGeometry::new(4, 4, 0.5, 1.0).unwrap();
        let p = PathProfile::sample(&mut rng, Direction::new(0.3, 0.3), Direction::new(0.1, 0.2), &NlosSpec::default());
        let links = vec![link_from(&p, 1e12, g, g, &[0.0])];
        let only = Codebook::from_entries(vec![Direction::new(2.0, 1.0)], 0.1).unwrap();
        let sel = select_beam_angles_codebook(&[GroupSearch {
            group: 1,
            tx_codebook: &only,
            users: vec![UserSearch { user: 4, rx_codebook: &only, links: &links }],
        }])
        .unwrap();
        assert_eq!(sel.tx[&1], Direction::new(2.0, 1.0));
        assert_eq!(sel.rx[&4], Direction::new(2.0, 1.0));
    }

    #[test]
    fn on_grid_los_only_channel_selects_los() {
        let cb = build_codebook(PI / 12.0, (-PI, PI), (0.0, PI / 2.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = ArrayGeometry::new(6, 6, 0.5, 1.0).unwrap();
        for _ in 0..5 {
            let aod = cb.entries()[rng.random_range(0..cb.len())];
            let aoa = cb.entries()[rng.random_range(0..cb.len())];
            if aod.elevation == 0.0 || aoa.elevation == 0.0 {
                continue;
            }
            let p = PathProfile::sample(&mut rng, aod, aoa, &NlosSpec::line_of_sight_only());
            let links = vec![link_from(&p, 1e12, g, g, &[0.0, 0.01])];
            let sel = select_beam_angles_codebook(&[GroupSearch {
                group: 1,
                tx_codebook: &cb,
                users: vec![UserSearch { user: 1, rx_codebook: &cb, links: &links }],
            }])
            .unwrap();
            assert_eq!(sel.tx[&1], aod);
            assert_eq!(sel.rx[&1], aoa);
        }
    }

    #[test]
    fn pruned_search_matches_matrix_brute_force() {
        let tx_cb = build_codebook(PI / 6.0, (-PI, PI), (0.0, PI / 2.0)).unwrap();
        let rx_cb = build_codebook(PI / 5.0, (-PI, PI), (0.0, PI / 2.0)).unwrap();
        let none = AbsorptionModel::transparent();
        for seed in 0..6u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = ArrayGeometry::new(3, 3, 0.5, 1.0).unwrap();
            let freqs = [0.9e12, 1.0e12];
            let offsets = [0.0, 0.013];
            let mut ray_links = Vec::new();
            let mut mats: Vec<Vec<Vec<SubarrayChannel>>> = Vec::new();
            let mut mags: Vec<Vec<f64>> = Vec::new();
            for _ in 0..2 {
                let aod = Direction::new(rng.random_range(-PI..PI), rng.random_range(0.2..1.4));
                let aoa = Direction::new(rng.random_range(-PI..PI), rng.random_range(0.2..1.4));
                let p = PathProfile::sample(&mut rng, aod, aoa, &NlosSpec::default());
                let mut ls = Vec::new();
                let mut ms = Vec::new();
                let mut mg = Vec::new();
                for &f in &freqs {
                    let gf = ArrayGeometry::new(3, 3, 0.5 * 3e-4, crate::channel::wavelength(f)).unwrap();
                    ls.push(link_from(&p, f, gf, gf, &offsets));
                    ms.push(
                        offsets
                            .iter()
                            .map(|&x| {
                                let rays = p.rays(f, 1.0, &none, x).unwrap();
                                synthesize_subarray_channel(&rays, &gf, &gf, 1.0, 1.0, f, 1.0).unwrap()
                            })
                            .collect(),
                    );
                    mg.push(los_path_gain(f, 1.0, &none).unwrap().sqrt());
                }
                let _ = g;
                ray_links.push(ls);
                mats.push(ms);
                mags.push(mg);
            }
            let fast = select_beam_angles_codebook(&[GroupSearch {
                group: 7,
                tx_codebook: &tx_cb,
                users: vec![
                    UserSearch { user: 1, rx_codebook: &rx_cb, links: &ray_links[0] },
                    UserSearch { user: 2, rx_codebook: &rx_cb, links: &ray_links[1] },
                ],
            }])
            .unwrap();
            let slow = select_beam_angles_exhaustive(
                &[GroupChannels {
                    group: 7,
                    users: vec![
                        UserChannels { user: 1, channels: &mats[0], los_magnitude: &mags[0] },
                        UserChannels { user: 2, channels: &mats[1], los_magnitude: &mags[1] },
                    ],
                }],
                &tx_cb,
                &rx_cb,
            )
            .unwrap();
            assert_eq!(fast, slow, "seed {seed}");
            // re-scan: no codebook pair beats the selection
            let groups = [(7u32, vec![(1u32, &ray_links[0][..]), (2u32, &ray_links[1][..])])];
            let best = beam_objective(&groups, &fast).unwrap();
            for &t in tx_cb.entries() {
                for &r in rx_cb.entries() {
                    let mut alt = fast.clone();
                    alt.tx.insert(7, t);
                    alt.rx.insert(1, r);
                    assert!(beam_objective(&groups, &alt).unwrap() <= best * (1.0 + 1e-12));
                }
            }
        }
    }

    #[test]
    fn los_selection_ignores_nlos() {
        let d0 = Direction::new(0.0, 0.0);
        let rays = los_only(c(1.0, 0.0), d0, d0);
        let reference = BTreeMap::from([(1, 1)]);
        let sel = select_beam_angles_los(&[LosUser { user: 1, group: 1, rays: &rays }], &reference).unwrap();
        assert_eq!(sel.tx[&1], d0);
        assert_eq!(sel.rx[&1], d0);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let none = AbsorptionModel::transparent();
        let aod = Direction::new(0.5, 0.6);
        let aoa = Direction::new(-0.5, 0.2);
        let full = crate::channel::sample_rays(&mut rng, aod, aoa, &NlosSpec::default(), 1e12, 1.0, &none).unwrap();
        let sel = select_beam_angles_los(&[LosUser { user: 1, group: 1, rays: &full }], &reference).unwrap();
        assert_eq!(sel.tx[&1], aod);
        assert_eq!(sel.rx[&1], aoa);
    }

    #[test]
    fn los_selection_uses_group_reference() {
        let a = los_only(c(1.0, 0.0), Direction::new(0.1, 0.2), Direction::new(0.3, 0.4));
        let b = los_only(c(1.0, 0.0), Direction::new(0.5, 0.6), Direction::new(0.7, 0.8));
        let users = [
            LosUser { user: 1, group: 1, rays: &a },
            LosUser { user: 3, group: 1, rays: &b },
        ];
        let sel = select_beam_angles_los(&users, &BTreeMap::from([(1, 3)])).unwrap();
        assert_eq!(sel.tx[&1], Direction::new(0.5, 0.6));
        assert_eq!(sel.rx[&1], Direction::new(0.3, 0.4));
        assert!(select_beam_angles_los(&users, &BTreeMap::from([(1, 9)])).is_err());
        assert!(select_beam_angles_los(&[LosUser { user: 1, group: 1, rays: &[] }], &BTreeMap::new()).is_err());
    }

    #[test]
    fn channel_matrix_assembly() {
        let one = assemble_channel_matrix(0, 1e12, vec![(1, vec![c(2.0, 0.0)])], vec![0]).unwrap();
        assert_eq!(one.matrix.shape(), (1, 1));
        let rows = vec![(2, vec![c(1.0, 0.0); 8]), (1, vec![c(0.0, 1.0); 8])];
        let m = assemble_channel_matrix(3, 0.65e12, rows.clone(), (0..8).collect()).unwrap();
        assert_eq!(m.matrix.shape(), (2, 8));
        assert_eq!(m.users, vec![1, 2]);
        assert_eq!(m.matrix[(0, 0)], c(0.0, 1.0));
        let rev: Vec<_> = rows.into_iter().rev().collect();
        assert_eq!(assemble_channel_matrix(3, 0.65e12, rev, (0..8).collect()).unwrap(), m);
        assert!(assemble_channel_matrix(0, 1e12, vec![(1, vec![c(1.0, 0.0); 3])], vec![0, 1]).is_err());
        assert!(assemble_channel_matrix(0, 1e12, vec![], vec![0]).is_err());
    }

    #[test]
    fn allocation_blocks() {
        let alloc = SubarrayAllocation::new(8, &BTreeMap::from([(1, 5), (2, 3)])).unwrap();
        assert_eq!(alloc.block(1), Some(0..5));
        assert_eq!(alloc.block(2), Some(5..8));
        assert_eq!(alloc.active(&BTreeSet::from([2])), vec![5, 6, 7]);
        assert_eq!(alloc.active(&BTreeSet::from([1, 2])), (0..8).collect::<Vec<_>>());
        assert!(SubarrayAllocation::new(7, &BTreeMap::from([(1, 5), (2, 3)])).is_err());
        assert!(SubarrayAllocation::new(7, &BTreeMap::from([(1, 0)])).is_err());
    }

    #[test]
    fn asymptotic_channel_blocks() {
        let g = 0.4;
        let eta: Vec<_> = [0.1, 0.7, 2.0].iter().map(|&t| Complex64::from_polar(g, t)).collect();
        let t = asymptotic_effective_channel(1, &[UserBlock { user: 1, columns: 0..3, los_gains: eta.clone() }], 3).unwrap();
        assert_eq!(t, eta);
        let blocks = [
            UserBlock { user: 1, columns: 0..1, los_gains: vec![c(1.0, 1.0)] },
            UserBlock { user: 2, columns: 1..2, los_gains: vec![c(2.0, 0.0)] },
        ];
        assert_eq!(asymptotic_effective_channel(1, &blocks, 2).unwrap(), vec![c(1.0, 1.0), c(0.0, 0.0)]);
        assert_eq!(asymptotic_effective_channel(2, &blocks, 2).unwrap(), vec![c(0.0, 0.0), c(2.0, 0.0)]);
        let overlap = [
            UserBlock { user: 1, columns: 0..2, los_gains: vec![c(1.0, 0.0); 2] },
            UserBlock { user: 2, columns: 1..2, los_gains: vec![c(1.0, 0.0)] },
        ];
        assert!(matches!(
            asymptotic_effective_channel(1, &overlap, 2),
            Err(Error::OverlappingAllocation(_))
        ));
    }

    #[test]
    fn normalized_effective_channel_converges_to_los_gains() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let none = AbsorptionModel::transparent();
        let f = 1e12;
        let lambda = crate::channel::wavelength(f);
        let aod = Direction::new(0.6, 0.5);
        let aoa = Direction::new(-1.1, 0.7);
        let p = PathProfile::sample(&mut rng, aod, aoa, &NlosSpec::default());
        let offsets = [0.0, 0.01, 0.02];
        let mut errors = Vec::new();
        for size in [8usize, 64] {
            let g = ArrayGeometry::new(size, size, lambda / 2.0, lambda).unwrap();
            let scale = array_scale(&g, &g, 10.0, 10.0);
            let mut worst = 0.0f64;
            for &x in &offsets {
                let rays = p.rays(f, 3.0, &none, x).unwrap();
                let h = ray_effective_channel(&rays, &g, &g, scale, aod, aoa) / scale;
                worst = worst.max((h - rays[0].gain).norm() / rays[0].gain.norm());
            }
            errors.push(worst);
        }
        assert!(errors[1] < 0.05, "{errors:?}");
        assert!(errors[1] < errors[0]);
    }

    proptest! {
        #[test]
        fn effective_channel_magnitude_is_phase_invariant(theta in 0.0f64..std::f64::consts::TAU, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = ArrayGeometry::new(2, 3, 0.5, 1.0).unwrap();
            let none = AbsorptionModel::transparent();
            let d = Direction::new(0.2, 0.3);
            let rays = crate::channel::sample_rays(&mut rng, d, d, &NlosSpec::default(), 1e12, 1.0, &none).unwrap();
            let mut ch = synthesize_subarray_channel(&rays, &g, &g, 1.0, 1.0, 1e12, 1.0).unwrap();
            let h = effective_channel(&ch, Direction::new(0.5, 0.5), d).unwrap();
            ch.matrix *= Complex64::from_polar(1.0, theta);
            let h2 = effective_channel(&ch, Direction::new(0.5, 0.5), d).unwrap();
            prop_assert!((h.norm() - h2.norm()).abs() <= 1e-12 * h.norm().max(1e-300));
        }

        #[test]
        fn asymptotic_blocks_partition_columns(sizes in proptest::collection::vec(1usize..4, 1..4)) {
            let mut blocks = Vec::new();
            let mut next = 0;
            for (u, &n) in sizes.iter().enumerate() {
                blocks.push(UserBlock { user: u as u32, columns: next..next + n, los_gains: vec![c(1.0, 0.5); n] });
                next += n;
            }
            let nnz: usize = blocks.iter().map(|b| {
                asymptotic_effective_channel(b.user, &blocks, next).unwrap().iter().filter(|z| z.norm() > 0.0).count()
            }).sum();
            prop_assert_eq!(nnz, next);
        }
    }
}
