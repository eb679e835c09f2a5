//! Periodic simulation cell, configurations, and potential energy models.
//!
//! Positions are flattened coordinate vectors of length `dim * particles`
//! (particle-major: `[x0, y0, z0, x1, ...]` in 3D). All potentials are
//! evaluated on wrapped coordinates with the minimum image convention, which
//! is exact here because every interaction cutoff stays below half the box.
//!
//! Three interaction models are provided:
//! * [`CosinePotential`] / [`TrigPolynomial`]: smooth one-dimensional
//!   periodic landscapes on the unit torus, one term per coordinate.
//! * [`SystemPotential`]: an O(N^2) sum of truncated, shifted, linearly
//!   splined Lennard-Jones pairs, optionally with a fixed ion at the box
//!   center attracting every particle.
//! * [`ZeroPotential`]: free diffusion, used to pin normalization.

use thiserror::Error;

/// Distances below `OVERLAP_FLOOR * sigma` are treated as a singular overlap
/// rather than evaluated, so r^-24 cores cannot silently produce infinities.
pub const OVERLAP_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("box length must be positive and finite, got {0}")]
    BadLength(f64),
    #[error("box dimension must be 1 or 3, got {0}")]
    BadDim(usize),
    #[error("box must hold at least one particle")]
    NoParticles,
    #[error("density must be positive and finite, got {0}")]
    BadDensity(f64),
    #[error("configuration has {got} coordinates, box expects {expected}")]
    WrongLength { got: usize, expected: usize },
    #[error("coordinate {index} = {value} outside [0, {length})")]
    OutOfRange {
        index: usize,
        value: f64,
        length: f64,
    },
    #[error("pair separation must be positive, got {0}")]
    BadSeparation(f64),
    #[error("{0}")]
    BadParams(String),
    #[error("particles {i} and {j} overlap at separation {r:.3e}")]
    PairOverlap { i: usize, j: usize, r: f64 },
    #[error("particle {i} overlaps the fixed ion at separation {r:.3e}")]
    IonOverlap { i: usize, r: f64 },
    #[error("potential {0} requires a unit box (length 1), got length {1}")]
    NeedsUnitBox(&'static str, f64),
}

/// Cubic periodic box: edge length, spatial dimension, particle count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimulationBox {
    length: f64,
    dim: usize,
    particles: usize,
}

impl SimulationBox {
    pub fn new(length: f64, dim: usize, particles: usize) -> Result<Self, ModelError> {
        if !(length.is_finite() && length > 0.0) {
            return Err(ModelError::BadLength(length));
        }
        if dim != 1 && dim != 3 {
            return Err(ModelError::BadDim(dim));
        }
        if particles == 0 {
            return Err(ModelError::NoParticles);
        }
        Ok(Self {
            length,
            dim,
            particles,
        })
    }

    /// Box edge from particle count and number density: L = (N / rho)^(1/d).
    pub fn from_density(particles: usize, density: f64, dim: usize) -> Result<Self, ModelError> {
        if !(density.is_finite() && density > 0.0) {
            return Err(ModelError::BadDensity(density));
        }
        let length = (particles as f64 / density).powf(1.0 / dim as f64);
        Self::new(length, dim, particles)
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    /// Number of scalar degrees of freedom, `dim * particles`.
    pub fn dof(&self) -> usize {
        self.dim * self.particles
    }

    pub fn center(&self) -> f64 {
        0.5 * self.length
    }
}

/// Fold a finite coordinate into [0, length). Total for finite input; NaN
/// stays NaN so callers that must reject non-finite values can do so.
#[inline]
pub(crate) fn fold(length: f64, x: f64) -> f64 {
    let m = x.rem_euclid(length);
    // rem_euclid can round up to exactly `length` when x is a tiny negative.
    if m >= length {
        0.0
    } else {
        m
    }
}

/// Minimum image representative of a coordinate difference in
/// [-length/2, length/2). The tie at exactly +length/2 maps to -length/2.
///
/// Built from `round`, which is an odd function, so the result is exactly
/// antisymmetric in `delta` (up to the tie); a fold-based reduction would
/// break that by one ulp whenever only one sign needs wrapping.
#[inline]
pub fn minimum_image(length: f64, delta: f64) -> f64 {
    let mut m = delta - length * (delta / length).round();
    if m >= 0.5 * length {
        m -= length;
    }
    if m < -0.5 * length {
        m += length;
    }
    m
}

/// Positions on the torus, all coordinates in [0, length).
#[derive(Clone, Debug, PartialEq)]
pub struct Configuration {
    cell: SimulationBox,
    positions: Vec<f64>,
}

impl Configuration {
    pub fn new(cell: SimulationBox, positions: Vec<f64>) -> Result<Self, ModelError> {
        if positions.len() != cell.dof() {
            return Err(ModelError::WrongLength {
                got: positions.len(),
                expected: cell.dof(),
            });
        }
        for (index, &value) in positions.iter().enumerate() {
            if !(value.is_finite() && (0.0..cell.length()).contains(&value)) {
                return Err(ModelError::OutOfRange {
                    index,
                    value,
                    length: cell.length(),
                });
            }
        }
        Ok(Self { cell, positions })
    }

    pub fn cell(&self) -> &SimulationBox {
        &self.cell
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }
}

/// A potential energy surface over configurations in a periodic box.
///
/// `energy_gradient_into` is the single required method so that hot loops can
/// evaluate V and grad V in one pass without allocating; the convenience
/// wrappers allocate.
pub trait PotentialModel: Sync {
    fn energy_gradient_into(
        &self,
        cell: &SimulationBox,
        positions: &[f64],
        grad: &mut [f64],
    ) -> Result<f64, ModelError>;

    fn energy(&self, c: &Configuration) -> Result<f64, ModelError> {
        let mut grad = vec![0.0; c.cell().dof()];
        self.energy_gradient_into(c.cell(), c.positions(), &mut grad)
    }

    fn gradient(&self, c: &Configuration) -> Result<Vec<f64>, ModelError> {
        let mut grad = vec![0.0; c.cell().dof()];
        self.energy_gradient_into(c.cell(), c.positions(), &mut grad)?;
        Ok(grad)
    }

    fn energy_gradient(&self, c: &Configuration) -> Result<(f64, Vec<f64>), ModelError> {
        let mut grad = vec![0.0; c.cell().dof()];
        let e = self.energy_gradient_into(c.cell(), c.positions(), &mut grad)?;
        Ok((e, grad))
    }
}

/// One-dimensional periodic potential with derivatives up to third order,
/// as needed by the semi-analytic oracles.
pub trait Scalar1D: Sync {
    fn v(&self, q: f64) -> f64;
    fn dv(&self, q: f64) -> f64;
    fn d2v(&self, q: f64) -> f64;
    fn d3v(&self, q: f64) -> f64;
}

/// V = 0 everywhere: free Brownian motion.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroPotential;

impl PotentialModel for ZeroPotential {
    fn energy_gradient_into(
        &self,
        _cell: &SimulationBox,
        _positions: &[f64],
        grad: &mut [f64],
    ) -> Result<f64, ModelError> {
        grad.fill(0.0);
        Ok(0.0)
    }
}

/// Cosine landscape value and slope at one coordinate:
/// V(q) = cos(2 pi q), dV(q) = -2 pi sin(2 pi q).
#[inline]
pub fn cosine_potential(q: f64) -> (f64, f64) {
    let (s, c) = (2.0 * std::f64::consts::PI * q).sin_cos();
    (c, -2.0 * std::f64::consts::PI * s)
}

/// V(q) = sum_i cos(2 pi q_i) on the unit torus.
#[derive(Clone, Copy, Debug, Default)]
pub struct CosinePotential;

impl PotentialModel for CosinePotential {
    fn energy_gradient_into(
        &self,
        cell: &SimulationBox,
        positions: &[f64],
        grad: &mut [f64],
    ) -> Result<f64, ModelError> {
        if cell.length() != 1.0 {
            return Err(ModelError::NeedsUnitBox("cosine", cell.length()));
        }
        let mut e = 0.0;
        for (g, &q) in grad.iter_mut().zip(positions) {
            let (v, dv) = cosine_potential(q);
            e += v;
            *g = dv;
        }
        Ok(e)
    }
}

impl Scalar1D for CosinePotential {
    fn v(&self, q: f64) -> f64 {
        cosine_potential(q).0
    }
    fn dv(&self, q: f64) -> f64 {
        cosine_potential(q).1
    }
    fn d2v(&self, q: f64) -> f64 {
        let tp = 2.0 * std::f64::consts::PI;
        -tp * tp * (tp * q).cos()
    }
    fn d3v(&self, q: f64) -> f64 {
        let tp = 2.0 * std::f64::consts::PI;
        tp * tp * tp * (tp * q).sin()
    }
}

/// Real trigonometric polynomial on the unit torus:
/// V(q) = sum_k a_k cos(2 pi k q) + b_k sin(2 pi k q).
#[derive(Clone, Debug)]
pub struct TrigPolynomial {
    /// (harmonic k, cosine coefficient, sine coefficient), k >= 1.
    pub terms: Vec<(u32, f64, f64)>,
}

impl TrigPolynomial {
    pub fn new(terms: Vec<(u32, f64, f64)>) -> Self {
        Self { terms }
    }

    /// d/dq applied n times, evaluated at q.
    fn deriv(&self, q: f64, n: u32) -> f64 {
        let tp = 2.0 * std::f64::consts::PI;
        let mut total = 0.0;
        for &(k, a, b) in &self.terms {
            let w = tp * f64::from(k);
            let (s, c) = (w * q).sin_cos();
            let scale = w.powi(n as i32);
            // Each derivative maps (cos, sin) -> (-sin, cos) and scales by w.
            let (cv, sv) = match n % 4 {
                0 => (c, s),
                1 => (-s, c),
                2 => (-c, -s),
                _ => (s, -c),
            };
            total += scale * (a * cv + b * sv);
        }
        total
    }
}

impl Scalar1D for TrigPolynomial {
    fn v(&self, q: f64) -> f64 {
        self.deriv(q, 0)
    }
    fn dv(&self, q: f64) -> f64 {
        self.deriv(q, 1)
    }
    fn d2v(&self, q: f64) -> f64 {
        self.deriv(q, 2)
    }
    fn d3v(&self, q: f64) -> f64 {
        self.deriv(q, 3)
    }
}

impl PotentialModel for TrigPolynomial {
    fn energy_gradient_into(
        &self,
        cell: &SimulationBox,
        positions: &[f64],
        grad: &mut [f64],
    ) -> Result<f64, ModelError> {
        if cell.length() != 1.0 {
            return Err(ModelError::NeedsUnitBox("trig polynomial", cell.length()));
        }
        let mut e = 0.0;
        for (g, &q) in grad.iter_mut().zip(positions) {
            e += self.v(q);
            *g = self.dv(q);
        }
        Ok(e)
    }
}

/// Lennard-Jones parameters for the truncated pair interaction. Fields
/// omitted from a configuration file fall back to [`LJParams::reference`].
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LJParams {
    pub epsilon: f64,
    pub sigma: f64,
    pub r_cut: f64,
}

impl Default for LJParams {
    fn default() -> Self {
        Self::reference()
    }
}

impl LJParams {
    /// The parameter set used throughout the numerical experiments:
    /// reduced units with the cutoff just inside half the reference box.
    pub fn reference() -> Self {
        Self {
            epsilon: 1.0,
            sigma: 1.0,
            r_cut: 1.76,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.epsilon > 0.0 && self.sigma > 0.0 && self.r_cut > self.sigma) {
            return Err(ModelError::BadParams(format!(
                "Lennard-Jones parameters need epsilon > 0, sigma > 0, r_cut > sigma; \
                 got epsilon = {}, sigma = {}, r_cut = {}",
                self.epsilon, self.sigma, self.r_cut
            )));
        }
        Ok(())
    }
}

/// Attractive ion parameters: a stiff r^-24 core plus a screened Coulomb
/// well of depth `e_min` at separation `sigma`. Fields omitted from a
/// configuration file fall back to [`IonParams::reference`].
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IonParams {
    pub e_min: f64,
    pub kappa: f64,
    pub sigma: f64,
    pub r_cut: f64,
}

impl Default for IonParams {
    fn default() -> Self {
        Self::reference()
    }
}

impl IonParams {
    /// The parameter set used throughout the numerical experiments.
    pub fn reference() -> Self {
        Self {
            e_min: 0.8347,
            kappa: 1.7025,
            sigma: 1.0,
            r_cut: 1.76,
        }
    }

    /// (1 + kappa sigma) / 24, the core weight in the normalized well.
    fn core_weight(&self) -> f64 {
        (1.0 + self.kappa * self.sigma) / 24.0
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.e_min > 0.0 && self.kappa > 0.0 && self.sigma > 0.0 && self.r_cut > self.sigma) {
            return Err(ModelError::BadParams(format!(
                "ion parameters need e_min > 0, kappa > 0, sigma > 0, r_cut > sigma; \
                 got e_min = {}, kappa = {}, sigma = {}, r_cut = {}",
                self.e_min, self.kappa, self.sigma, self.r_cut
            )));
        }
        if self.core_weight() >= 1.0 {
            return Err(ModelError::BadParams(format!(
                "ion parameters need (1 + kappa sigma) / 24 < 1, got {}",
                self.core_weight()
            )));
        }
        Ok(())
    }
}

/// Untruncated Lennard-Jones value and radial derivative at separation r.
pub fn lj_untruncated(r: f64, p: &LJParams) -> (f64, f64) {
    let s2 = (p.sigma / r) * (p.sigma / r);
    let s6 = s2 * s2 * s2;
    let s12 = s6 * s6;
    let u = 4.0 * p.epsilon * (s12 - s6);
    let du = 24.0 * p.epsilon * (s6 - 2.0 * s12) / r;
    (u, du)
}

/// Untruncated ion-particle value and radial derivative at separation r:
/// a normalized mix of an r^-24 core and a screened 1/r attraction whose
/// minimum sits exactly at (sigma, -e_min).
pub fn ion_untruncated(r: f64, p: &IonParams) -> (f64, f64) {
    let b = p.core_weight();
    let a = p.e_min / (1.0 - b);
    let s = p.sigma / r;
    let s24 = s.powi(24);
    let screen = s * (-p.kappa * (r - p.sigma)).exp();
    let u = a * (b * s24 - screen);
    // d/dr (sigma/r) = -sigma/r^2 = -s/r, so screen' = -screen/r - kappa*screen.
    let du = a * (-24.0 * b * s24 / r + screen / r + p.kappa * screen);
    (u, du)
}

/// Apply the shift and linear spline that make a radial potential vanish with
/// zero slope at the cutoff: v(r) = u(r) - u(rc) - u'(rc) (r - rc), r < rc.
#[inline]
fn truncate(r: f64, r_cut: f64, u: f64, du: f64, u_rc: f64, du_rc: f64) -> (f64, f64) {
    if r >= r_cut {
        (0.0, 0.0)
    } else {
        (u - u_rc - du_rc * (r - r_cut), du - du_rc)
    }
}

/// Truncated, shifted, splined Lennard-Jones pair value and radial derivative.
pub fn lj_pair(r: f64, p: &LJParams) -> Result<(f64, f64), ModelError> {
    if r.is_nan() || r <= 0.0 {
        return Err(ModelError::BadSeparation(r));
    }
    let (u_rc, du_rc) = lj_untruncated(p.r_cut, p);
    let (u, du) = lj_untruncated(r, p);
    Ok(truncate(r, p.r_cut, u, du, u_rc, du_rc))
}

/// Truncated, shifted, splined ion-particle pair value and radial derivative.
pub fn ion_pair(r: f64, p: &IonParams) -> Result<(f64, f64), ModelError> {
    if r.is_nan() || r <= 0.0 {
        return Err(ModelError::BadSeparation(r));
    }
    let (u_rc, du_rc) = ion_untruncated(p.r_cut, p);
    let (u, du) = ion_untruncated(r, p);
    Ok(truncate(r, p.r_cut, u, du, u_rc, du_rc))
}

/// Pairwise-additive system: optional Lennard-Jones pair term over all
/// particle pairs, optional ion term binding every particle to the box
/// center. At least one term must be present.
#[derive(Clone, Debug)]
pub struct SystemPotential {
    pair: Option<Radial>,
    ion: Option<Radial>,
    /// When set, the ion also interacts with the nearest periodic images of
    /// each particle, not only the minimum image. With the default cutoff
    /// below half the box this adds nothing; it exists for larger cutoffs.
    pub ion_images: bool,
}

/// A radial interaction with its cutoff data precomputed.
#[derive(Clone, Copy, Debug)]
struct Radial {
    kind: RadialKind,
    r_cut: f64,
    floor: f64,
    u_rc: f64,
    du_rc: f64,
}

#[derive(Clone, Copy, Debug)]
enum RadialKind {
    Lj(LJParams),
    Ion(IonParams),
}

impl Radial {
    fn lj(p: LJParams) -> Self {
        let (u_rc, du_rc) = lj_untruncated(p.r_cut, &p);
        Self {
            kind: RadialKind::Lj(p),
            r_cut: p.r_cut,
            floor: OVERLAP_FLOOR * p.sigma,
            u_rc,
            du_rc,
        }
    }

    fn ion(p: IonParams) -> Self {
        let (u_rc, du_rc) = ion_untruncated(p.r_cut, &p);
        Self {
            kind: RadialKind::Ion(p),
            r_cut: p.r_cut,
            floor: OVERLAP_FLOOR * p.sigma,
            u_rc,
            du_rc,
        }
    }

    #[inline]
    fn eval(&self, r: f64) -> (f64, f64) {
        let (u, du) = match &self.kind {
            RadialKind::Lj(p) => lj_untruncated(r, p),
            RadialKind::Ion(p) => ion_untruncated(r, p),
        };
        truncate(r, self.r_cut, u, du, self.u_rc, self.du_rc)
    }
}

impl SystemPotential {
    pub fn new(pair: Option<LJParams>, ion: Option<IonParams>) -> Result<Self, ModelError> {
        if pair.is_none() && ion.is_none() {
            return Err(ModelError::BadParams(
                "system potential needs at least one of the pair and ion terms".into(),
            ));
        }
        if let Some(p) = &pair {
            p.validate()?;
        }
        if let Some(p) = &ion {
            p.validate()?;
        }
        Ok(Self {
            pair: pair.map(Radial::lj),
            ion: ion.map(Radial::ion),
            ion_images: false,
        })
    }
}

impl PotentialModel for SystemPotential {
    fn energy_gradient_into(
        &self,
        cell: &SimulationBox,
        positions: &[f64],
        grad: &mut [f64],
    ) -> Result<f64, ModelError> {
        grad.fill(0.0);
        let d = cell.dim();
        let l = cell.length();
        let n = cell.particles();
        debug_assert_eq!(positions.len(), n * d);
        let mut energy = 0.0;
        let mut delta = [0.0f64; 3];

        if let Some(pair) = &self.pair {
            for i in 0..n {
                for j in (i + 1)..n {
                    let mut r2 = 0.0;
                    for k in 0..d {
                        let dx = minimum_image(l, positions[i * d + k] - positions[j * d + k]);
                        delta[k] = dx;
                        r2 += dx * dx;
                    }
                    if r2 >= pair.r_cut * pair.r_cut {
                        continue;
                    }
                    let r = r2.sqrt();
                    if r < pair.floor {
                        return Err(ModelError::PairOverlap { i, j, r });
                    }
                    let (v, dv) = pair.eval(r);
                    energy += v;
                    let scale = dv / r;
                    for k in 0..d {
                        grad[i * d + k] += scale * delta[k];
                        grad[j * d + k] -= scale * delta[k];
                    }
                }
            }
        }

        if let Some(ion) = &self.ion {
            let center = cell.center();
            // Image offsets in units of L per coordinate; {0} unless the
            // ion-images flag asks for the surrounding shells too.
            let offsets: &[f64] = if self.ion_images {
                &[0.0, -1.0, 1.0]
            } else {
                &[0.0]
            };
            for i in 0..n {
                for k in 0..d {
                    delta[k] = minimum_image(l, positions[i * d + k] - center);
                }
                let mut offset = [0usize; 3];
                loop {
                    let mut r2 = 0.0;
                    let mut image = [0.0f64; 3];
                    for k in 0..d {
                        image[k] = delta[k] + offsets[offset[k]] * l;
                        r2 += image[k] * image[k];
                    }
                    if r2 < ion.r_cut * ion.r_cut {
                        let r = r2.sqrt();
                        if r < ion.floor {
                            return Err(ModelError::IonOverlap { i, r });
                        }
                        let (v, dv) = ion.eval(r);
                        energy += v;
                        let scale = dv / r;
                        for k in 0..d {
                            grad[i * d + k] += scale * image[k];
                        }
                    }
                    // Advance the mixed-radix image counter.
                    let mut k = 0;
                    loop {
                        if k == d {
                            break;
                        }
                        offset[k] += 1;
                        if offset[k] < offsets.len() {
                            break;
                        }
                        offset[k] = 0;
                        k += 1;
                    }
                    if k == d {
                        break;
                    }
                }
            }
        }

        Ok(energy)
    }
}

/// Total energy and gradient of the pair + ion system on a configuration.
pub fn system_energy_gradient(
    c: &Configuration,
    pair: Option<LJParams>,
    ion: Option<IonParams>,
) -> Result<(f64, Vec<f64>), ModelError> {
    SystemPotential::new(pair, ion)?.energy_gradient(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lj_default() -> LJParams {
        LJParams {
            epsilon: 1.0,
            sigma: 1.0,
            r_cut: 1.76,
        }
    }

    fn ion_default() -> IonParams {
        IonParams {
            e_min: 0.8347,
            kappa: 1.7025,
            sigma: 1.0,
            r_cut: 1.76,
        }
    }

    #[test]
    fn box_from_density_matches_cube_root() {
        let cell = SimulationBox::from_density(20, 0.4, 3).unwrap();
        assert!((cell.length().powi(3) - 50.0).abs() < 1e-12);
        assert_eq!(cell.dof(), 60);
    }

    #[test]
    fn box_rejects_bad_inputs() {
        assert!(SimulationBox::new(0.0, 1, 1).is_err());
        assert!(SimulationBox::new(1.0, 2, 1).is_err());
        assert!(SimulationBox::new(1.0, 3, 0).is_err());
        assert!(SimulationBox::from_density(20, 0.0, 3).is_err());
    }

    #[test]
    fn configuration_validates_range_and_length() {
        let cell = SimulationBox::new(1.0, 1, 2).unwrap();
        assert!(Configuration::new(cell, vec![0.0, 0.5]).is_ok());
        assert!(Configuration::new(cell, vec![0.0]).is_err());
        assert!(Configuration::new(cell, vec![0.0, 1.0]).is_err());
        assert!(Configuration::new(cell, vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn cosine_values_at_reference_points() {
        let (v, dv) = cosine_potential(0.0);
        assert_eq!(v, 1.0);
        assert_eq!(dv, 0.0);
        let (v, dv) = cosine_potential(0.25);
        assert!(v.abs() < 1e-15);
        assert!((dv + 2.0 * std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn minimum_image_reference_values() {
        assert_eq!(minimum_image(1.0, 0.75), -0.25);
        assert_eq!(minimum_image(1.0, 0.5), -0.5);
        assert_eq!(minimum_image(1.0, -0.5), -0.5);
        assert_eq!(minimum_image(1.0, 0.25), 0.25);
        assert_eq!(minimum_image(1.0, 3.25), 0.25);
    }

    proptest::proptest! {
        #[test]
        fn minimum_image_is_idempotent_and_in_range(
            delta in -100.0f64..100.0,
            length in 0.1f64..10.0,
        ) {
            let m = minimum_image(length, delta);
            proptest::prop_assert!((-0.5 * length..0.5 * length).contains(&m));
            proptest::prop_assert_eq!(minimum_image(length, m), m);
            // Antisymmetry away from the tie at half the box.
            if m != -0.5 * length {
                proptest::prop_assert_eq!(minimum_image(length, -delta), -m);
            }
        }
    }

    #[test]
    fn lj_pair_vanishes_at_and_beyond_cutoff() {
        let p = lj_default();
        assert_eq!(lj_pair(p.r_cut, &p).unwrap(), (0.0, 0.0));
        assert_eq!(lj_pair(p.r_cut + 0.3, &p).unwrap(), (0.0, 0.0));
        assert!(lj_pair(0.0, &p).is_err());
        assert!(lj_pair(-1.0, &p).is_err());
    }

    /// Near the cutoff the truncated potential behaves like
    /// v(rc - h) ~ u''(rc)/2 h^2 and v'(rc - h) ~ -u''(rc) h, so the fitted
    /// quadratic and linear coefficients must be stable in h.
    #[test]
    fn truncation_is_c1_at_cutoff() {
        let lj = lj_default();
        let ion = ion_default();
        for (name, eval) in [
            (
                "lj",
                Box::new(move |r: f64| lj_pair(r, &lj).unwrap()) as Box<dyn Fn(f64) -> (f64, f64)>,
            ),
            ("ion", Box::new(move |r: f64| ion_pair(r, &ion).unwrap())),
        ] {
            let rc = 1.76;
            let mut k2 = Vec::new();
            let mut k1 = Vec::new();
            for h in [1e-3, 1e-4] {
                let (v, dv) = eval(rc - h);
                k2.push(v.abs() / (h * h));
                k1.push(dv.abs() / h);
            }
            let r2 = k2[0] / k2[1];
            let r1 = k1[0] / k1[1];
            assert!(
                (0.25..4.0).contains(&r2) && (0.25..4.0).contains(&r1),
                "{name}: coefficient ratios {r2} {r1} not stable, k2 = {k2:?}, k1 = {k1:?}"
            );
        }
    }

    #[test]
    fn ion_untruncated_minimum_sits_at_sigma() {
        let p = ion_default();
        let (u, du) = ion_untruncated(p.sigma, &p);
        assert!((u + p.e_min).abs() < 1e-12, "u(sigma) = {u}");
        assert!(du.abs() < 1e-12, "u'(sigma) = {du}");
    }

    #[test]
    fn lj_pair_two_particles_equal_opposite_gradient() {
        let cell = SimulationBox::new(10.0, 3, 2).unwrap();
        let c = Configuration::new(cell, vec![1.0, 1.0, 1.0, 2.2, 1.4, 1.1]).unwrap();
        let (e, g) = system_energy_gradient(&c, Some(lj_default()), None).unwrap();
        assert!(e.is_finite());
        for k in 0..3 {
            assert!(
                (g[k] + g[3 + k]).abs() < 1e-14,
                "component {k}: {} vs {}",
                g[k],
                g[3 + k]
            );
        }
        assert!(g.iter().any(|x| x.abs() > 1e-6));
    }

    #[test]
    fn overlap_reports_the_offending_pair() {
        let cell = SimulationBox::new(10.0, 3, 3).unwrap();
        let c = Configuration::new(
            cell,
            vec![1.0, 1.0, 1.0, 4.0, 4.0, 4.0, 1.0, 1.0, 1.0 + 1e-9],
        )
        .unwrap();
        match system_energy_gradient(&c, Some(lj_default()), None) {
            Err(ModelError::PairOverlap { i, j, .. }) => {
                assert_eq!((i, j), (0, 2));
            }
            other => panic!("expected pair overlap, got {other:?}"),
        }
        // Particle on top of the ion at the box center.
        let c =
            Configuration::new(cell, vec![5.0, 5.0, 5.0, 1.0, 1.0, 1.0, 2.0, 8.0, 2.0]).unwrap();
        match system_energy_gradient(&c, Some(lj_default()), Some(ion_default())) {
            Err(ModelError::IonOverlap { i, .. }) => assert_eq!(i, 0),
            other => panic!("expected ion overlap, got {other:?}"),
        }
    }

    #[test]
    fn system_needs_at_least_one_term() {
        assert!(SystemPotential::new(None, None).is_err());
    }

    /// Draw a configuration with no pair closer than `min_sep` so that
    /// finite differences stay in the smooth regime.
    fn random_config(rng: &mut ChaCha8Rng, cell: &SimulationBox, min_sep: f64) -> Configuration {
        'outer: loop {
            let positions: Vec<f64> = (0..cell.dof())
                .map(|_| rng.random::<f64>() * cell.length())
                .collect();
            let d = cell.dim();
            for i in 0..cell.particles() {
                for j in (i + 1)..cell.particles() {
                    let mut r2 = 0.0;
                    for k in 0..d {
                        let dx = minimum_image(
                            cell.length(),
                            positions[i * d + k] - positions[j * d + k],
                        );
                        r2 += dx * dx;
                    }
                    if r2.sqrt() < min_sep {
                        continue 'outer;
                    }
                }
                if d == 3 {
                    let mut r2 = 0.0;
                    for k in 0..d {
                        let dx = minimum_image(cell.length(), positions[i * d + k] - cell.center());
                        r2 += dx * dx;
                    }
                    if r2.sqrt() < min_sep {
                        continue 'outer;
                    }
                }
            }
            return Configuration::new(*cell, positions).unwrap();
        }
    }

    fn check_gradient_fd(pot: &dyn PotentialModel, c: &Configuration) {
        let h = 1e-5;
        let (_, grad) = {
            let mut g = vec![0.0; c.cell().dof()];
            let e = pot
                .energy_gradient_into(c.cell(), c.positions(), &mut g)
                .unwrap();
            (e, g)
        };
        let mut shifted = c.positions().to_vec();
        let mut scratch = vec![0.0; c.cell().dof()];
        for i in 0..shifted.len() {
            let orig = shifted[i];
            shifted[i] = fold(c.cell().length(), orig + h);
            let ep = pot
                .energy_gradient_into(c.cell(), &shifted, &mut scratch)
                .unwrap();
            shifted[i] = fold(c.cell().length(), orig - h);
            let em = pot
                .energy_gradient_into(c.cell(), &shifted, &mut scratch)
                .unwrap();
            shifted[i] = orig;
            let fd = (ep - em) / (2.0 * h);
            let tol = 1e-6 * grad[i].abs().max(1.0);
            assert!(
                (fd - grad[i]).abs() < tol,
                "coordinate {i}: fd {fd} vs analytic {}",
                grad[i]
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let unit = SimulationBox::new(1.0, 1, 1).unwrap();
        let trig = TrigPolynomial::new(vec![(1, 0.4, -0.2), (2, -0.1, 0.3), (3, 0.05, 0.0)]);
        for _ in 0..100 {
            let c = random_config(&mut rng, &unit, 0.0);
            check_gradient_fd(&CosinePotential, &c);
            check_gradient_fd(&trig, &c);
        }
        let cell = SimulationBox::from_density(8, 0.4, 3).unwrap();
        let lj_only = SystemPotential::new(Some(lj_default()), None).unwrap();
        let full = SystemPotential::new(Some(lj_default()), Some(ion_default())).unwrap();
        for _ in 0..100 {
            let c = random_config(&mut rng, &cell, 0.9);
            check_gradient_fd(&lj_only, &c);
            check_gradient_fd(&full, &c);
        }
    }

    /// Rigid translations leave the pair energy unchanged (the ion term is
    /// excluded: it pins the system to the box center).
    #[test]
    fn pair_energy_is_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let cell = SimulationBox::from_density(8, 0.4, 3).unwrap();
        let pot = SystemPotential::new(Some(lj_default()), None).unwrap();
        for _ in 0..20 {
            let c = random_config(&mut rng, &cell, 1.0);
            let e0 = pot.energy(&c).unwrap();
            let shift: Vec<f64> = (0..3)
                .map(|_| rng.random::<f64>() * cell.length())
                .collect();
            let moved: Vec<f64> = c
                .positions()
                .iter()
                .enumerate()
                .map(|(i, &x)| fold(cell.length(), x + shift[i % 3]))
                .collect();
            let moved = Configuration::new(cell, moved).unwrap();
            let e1 = pot.energy(&moved).unwrap();
            assert!(
                (e0 - e1).abs() < 1e-10,
                "energy changed under translation: {e0} vs {e1}"
            );
        }
    }
}
