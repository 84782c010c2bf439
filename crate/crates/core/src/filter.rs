//! Particle filter over a static object pose with injection on contact.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::contact::{Bounds, ContactSampler, Rejections};
use crate::ddpm::DiffusionModel;
use crate::error::{Error, Result};
use crate::eval::add_error;
use crate::geometry::{PlanarPose, Shape, Vec2};
use crate::rng;
use crate::sensor::{observe, observe_noiseless, Observation, TaxelArray};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub n_particles: usize,
    /// σ_w, in activation units.
    pub likelihood_std: f64,
    /// Resample after every this many contacts.
    pub resample_period: usize,
    /// Particles injected on the first contact.
    pub initial_injection: usize,
    /// Per-contact multiplier on the injection count.
    pub injection_decay: f64,
    pub seed: u64,
    pub placement: SensorPlacement,
}

/// Where the sensor touches the static object on successive contacts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorPlacement {
    /// Every contact repeats the first sensor pose.
    Fixed,
    /// Contact `k > 1` places the sensor at a fresh random contact
    /// configuration. The first contact's sensor frame is the world frame.
    #[default]
    Resample,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            n_particles: 100,
            likelihood_std: 0.1,
            resample_period: 3,
            initial_injection: 50,
            injection_decay: 0.8,
            seed: 0,
            placement: SensorPlacement::Resample,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 || self.resample_period == 0 {
            return Err(Error::Config(
                "n_particles and resample_period must be positive".into(),
            ));
        }
        if self.initial_injection == 0 || self.initial_injection > self.n_particles {
            return Err(Error::Config(format!(
                "initial_injection must lie in 1..={}, got {}",
                self.n_particles, self.initial_injection
            )));
        }
        if !(self.injection_decay > 0.0 && self.injection_decay <= 1.0) {
            return Err(Error::Config(format!(
                "injection_decay must lie in (0, 1], got {}",
                self.injection_decay
            )));
        }
        if !(self.likelihood_std.is_finite() && self.likelihood_std > 0.0) {
            return Err(Error::Config(format!(
                "likelihood_std must be positive, got {}",
                self.likelihood_std
            )));
        }
        Ok(())
    }

    /// `⌈S₀ · decay^k⌉` for the `k`-th contact, counting from zero.
    pub fn injection_count(&self, k: usize) -> usize {
        let s = self.initial_injection as f64 * self.injection_decay.powi(k as i32);
        // 50·0.8² evaluates to 32.000000000000007.
        ((s - 1e-9).ceil() as usize).min(self.n_particles)
    }
}

/// Weighted particle set. Weights are kept normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    particles: Vec<PlanarPose>,
    weights: Vec<f64>,
}

/// Outcome of a weight update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightUpdate {
    Normal,
    /// Every particle had zero posterior mass; weights were reset to uniform.
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedMean {
    pub pose: PlanarPose,
    /// The weighted heading sum vanished and the MAP heading was used.
    pub heading_fallback: bool,
}

impl Belief {
    /// Normalizes `weights`, which must be non-negative with positive sum.
    pub fn new(particles: Vec<PlanarPose>, weights: Vec<f64>) -> Result<Self> {
        if particles.is_empty() || particles.len() != weights.len() {
            return Err(Error::InvalidArgument(format!(
                "belief needs matching non-empty particles and weights, got {} and {}",
                particles.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument("weights must be finite and non-negative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::InvalidArgument("weights sum to zero".into()));
        }
        let weights = weights.into_iter().map(|w| w / sum).collect();
        Ok(Self { particles, weights })
    }

    pub fn uniform(particles: Vec<PlanarPose>) -> Result<Self> {
        let n = particles.len();
        Self::new(particles, vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn particles(&self) -> &[PlanarPose] {
        &self.particles
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `1 / Σ w_i²`.
    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    fn normalize(&mut self) {
        let sum: f64 = self.weights.iter().sum();
        for w in &mut self.weights {
            *w /= sum;
        }
    }

    /// Multiplies each weight by its likelihood and renormalizes.
    ///
    /// The product is formed in the log domain so that a sharp likelihood
    /// does not underflow every weight at once.
    pub fn update_weights(
        &mut self,
        z_obs: &Observation,
        object: &Shape,
        array: &TaxelArray,
        likelihood_std: f64,
    ) -> WeightUpdate {
        self.update_weights_at(&PlanarPose::IDENTITY, z_obs, object, array, likelihood_std)
    }

    /// [`Belief::update_weights`] for a sensor at `sensor` in the particle frame.
    pub fn update_weights_at(
        &mut self,
        sensor: &PlanarPose,
        z_obs: &Observation,
        object: &Shape,
        array: &TaxelArray,
        likelihood_std: f64,
    ) -> WeightUpdate {
        let inv = 1.0 / (2.0 * likelihood_std * likelihood_std);
        let to_sensor = sensor.inverse();
        let relative = |q: &PlanarPose| {
            if *sensor == PlanarPose::IDENTITY {
                *q
            } else {
                to_sensor.compose(q)
            }
        };
        let logs: Vec<f64> = self
            .particles
            .iter()
            .zip(&self.weights)
            .map(|(q, w)| {
                w.ln() - observe_noiseless(object, &relative(q), array).squared_distance(z_obs) * inv
            })
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            let n = self.len() as f64;
            self.weights.iter_mut().for_each(|w| *w = 1.0 / n);
            return WeightUpdate::Degenerate;
        }
        for (w, l) in self.weights.iter_mut().zip(&logs) {
            *w = (l - max).exp();
        }
        self.normalize();
        WeightUpdate::Normal
    }

    /// Particle injection on contact.
    ///
    /// Sorts particles by ascending weight, replaces the `s` lightest with
    /// proposals for `z`, gives each the mean weight of the incoming belief
    /// and renormalizes.
    pub fn inject_on_contact(
        &mut self,
        z: &Observation,
        s: usize,
        proposer: &dyn PoseProposer,
        rng: &mut dyn RngCore,
    ) -> Result<()> {
        let n = self.len();
        if s > n {
            return Err(Error::InvalidArgument(format!(
                "cannot inject {s} particles into a belief of {n}"
            )));
        }
        let samples = if s > 0 {
            proposer.propose(z, s, rng)?
        } else {
            Vec::new()
        };
        if samples.len() != s {
            return Err(Error::Numerical(format!(
                "proposer returned {} poses, expected {s}",
                samples.len()
            )));
        }
        self.replace_lightest(samples);
        Ok(())
    }

    fn replace_lightest(&mut self, samples: Vec<PlanarPose>) {
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| self.weights[a].total_cmp(&self.weights[b]));
        self.particles = order.iter().map(|&i| self.particles[i]).collect();
        self.weights = order.iter().map(|&i| self.weights[i]).collect();
        let w_bar = self.weights.iter().sum::<f64>() / n as f64;
        for (i, q) in samples.into_iter().enumerate() {
            self.particles[i] = q;
            self.weights[i] = w_bar;
        }
        self.normalize();
    }

    /// Low-variance resampling with one uniform offset; weights become `1/N`.
    pub fn systematic_resample<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let n = self.len();
        let step = 1.0 / n as f64;
        let u0 = rng.random_range(0.0..step);
        let mut out = Vec::with_capacity(n);
        let mut cum = self.weights[0];
        let mut i = 0;
        for k in 0..n {
            let u = u0 + k as f64 * step;
            while u > cum && i + 1 < n {
                i += 1;
                cum += self.weights[i];
            }
            out.push(self.particles[i]);
        }
        self.particles = out;
        self.weights = vec![step; n];
    }

    /// Index of the largest weight; the smallest index wins ties.
    pub fn map_index(&self) -> usize {
        let mut best = 0;
        for (i, w) in self.weights.iter().enumerate() {
            if *w > self.weights[best] {
                best = i;
            }
        }
        best
    }

    pub fn map_estimate(&self) -> PlanarPose {
        self.particles[self.map_index()]
    }

    /// Weighted mean position with circular-mean heading.
    pub fn weighted_mean_estimate(&self) -> WeightedMean {
        let (mut x, mut y, mut c, mut s) = (0.0, 0.0, 0.0, 0.0);
        for (q, w) in self.particles.iter().zip(&self.weights) {
            x += w * q.x;
            y += w * q.y;
            c += w * q.c;
            s += w * q.s;
        }
        let norm = c.hypot(s);
        if norm > 1e-12 {
            WeightedMean {
                pose: PlanarPose::new(x, y, c / norm, s / norm),
                heading_fallback: false,
            }
        } else {
            let map = self.map_estimate();
            WeightedMean {
                pose: PlanarPose::new(x, y, map.c, map.s),
                heading_fallback: true,
            }
        }
    }
}

/// `N` particles uniform over `bounds` and heading, each with weight `1/N`.
pub fn init_belief<R: Rng + ?Sized>(cfg: &FilterConfig, bounds: &Bounds, rng: &mut R) -> Result<Belief> {
    cfg.validate()?;
    bounds.validate()?;
    let particles = (0..cfg.n_particles).map(|_| bounds.sample_pose(rng)).collect();
    Belief::uniform(particles)
}

/// `exp(−‖ẑ(q) − z‖² / 2σ_w²)`.
pub fn likelihood(
    q: &PlanarPose,
    z_obs: &Observation,
    object: &Shape,
    array: &TaxelArray,
    sigma_w: f64,
) -> f64 {
    let d2 = observe_noiseless(object, q, array).squared_distance(z_obs);
    (-d2 / (2.0 * sigma_w * sigma_w)).exp()
}

/// Source of pose hypotheses for an observation.
pub trait PoseProposer: Sync {
    fn propose(&self, z: &Observation, s: usize, rng: &mut dyn RngCore) -> Result<Vec<PlanarPose>>;
}

impl PoseProposer for DiffusionModel {
    fn propose(&self, z: &Observation, s: usize, rng: &mut dyn RngCore) -> Result<Vec<PlanarPose>> {
        self.sample(z, s, rng)
    }
}

/// Contact poses from SDF projection of uniform draws, ignoring the observation.
#[derive(Debug, Clone)]
pub struct ProjectionProposer {
    pub sampler: ContactSampler,
}

impl PoseProposer for ProjectionProposer {
    fn propose(&self, _z: &Observation, s: usize, rng: &mut dyn RngCore) -> Result<Vec<PlanarPose>> {
        (0..s).map(|_| self.sampler.sample_pose(rng).map(|(q, _)| q)).collect()
    }
}

/// Maps sensor-frame proposals into the particle frame.
struct Placed<'a> {
    inner: &'a dyn PoseProposer,
    sensor: PlanarPose,
}

impl PoseProposer for Placed<'_> {
    fn propose(&self, z: &Observation, s: usize, rng: &mut dyn RngCore) -> Result<Vec<PlanarPose>> {
        let poses = self.inner.propose(z, s, rng)?;
        Ok(poses.iter().map(|r| self.sensor.compose(r)).collect())
    }
}

/// One row of a filter run log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactStep {
    pub contact_index: usize,
    pub map_add: f64,
    pub wmean_add: f64,
    pub effective_sample_size: f64,
    pub injected_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterRun {
    /// Estimates of the initial belief, logged as contact 0.
    pub prior: ContactStep,
    /// Contacts `1..=K`.
    pub steps: Vec<ContactStep>,
    pub degenerate_updates: usize,
}

impl FilterRun {
    /// First contact whose MAP ADD is at most `threshold`, or `K + 1`.
    pub fn contacts_to_threshold(&self, threshold: f64) -> usize {
        self.steps
            .iter()
            .find(|s| s.map_add <= threshold)
            .map_or(self.steps.len() + 1, |s| s.contact_index)
    }

    /// All rows, prior first.
    pub fn rows(&self) -> impl Iterator<Item = &ContactStep> {
        std::iter::once(&self.prior).chain(&self.steps)
    }
}

/// Everything [`run_filter`] needs besides the proposal source.
#[derive(Debug, Clone)]
pub struct FilterSetup<'a> {
    pub object: &'a Shape,
    pub array: &'a TaxelArray,
    pub bounds: Bounds,
    /// Points used by the ADD metric.
    pub model_points: &'a [Vec2],
    /// Draws sensor placements for contacts after the first.
    pub contacts: &'a ContactSampler,
}

/// Simulates `k` contacts with a static object at `ground_truth`, which must
/// be a contact configuration in the frame of the first sensor placement.
///
/// Per contact: sensor placement, noisy observation, weight update, injection of
/// `⌈S₀·decay^k⌉` proposals, estimate logging, then resampling when the
/// contact count is a multiple of the resample period.
///
/// The initial belief and resampling, the observation noise, the proposals
/// and the sensor placements use separate streams seeded from `rng`, so two
/// runs with equal seeds see the same contacts whatever the proposer consumes.
pub fn run_filter<R: Rng + ?Sized>(
    setup: &FilterSetup<'_>,
    proposer: &dyn PoseProposer,
    ground_truth: &PlanarPose,
    cfg: &FilterConfig,
    k: usize,
    rng: &mut R,
) -> Result<FilterRun> {
    let base: u64 = rng.random();
    let mut filter_rng = rng::stream(base, 0);
    let mut obs_rng = rng::stream(base, 1);
    let mut proposal_rng = rng::stream(base, 2);
    let mut placement_rng = rng::stream(base, 3);
    let mut belief = init_belief(cfg, &setup.bounds, &mut filter_rng)?;
    let log = |b: &Belief, index: usize, injected: usize| -> Result<ContactStep> {
        Ok(ContactStep {
            contact_index: index,
            map_add: add_error(setup.model_points, &b.map_estimate(), ground_truth)?,
            wmean_add: add_error(setup.model_points, &b.weighted_mean_estimate().pose, ground_truth)?,
            effective_sample_size: b.effective_sample_size(),
            injected_count: injected,
        })
    };
    let prior = log(&belief, 0, 0)?;
    let mut steps = Vec::with_capacity(k);
    let mut degenerate_updates = 0;
    for contact in 0..k {
        let (sensor, relative) = if contact == 0 || cfg.placement == SensorPlacement::Fixed {
            (PlanarPose::IDENTITY, *ground_truth)
        } else {
            let r = setup
                .contacts
                .sample_record(setup.array, &mut placement_rng, &mut Rejections::default())?
                .pose;
            (ground_truth.compose(&r.inverse()), r)
        };
        let z = observe(setup.object, &relative, setup.array, Some(&mut obs_rng));
        if belief.update_weights_at(&sensor, &z, setup.object, setup.array, cfg.likelihood_std)
            == WeightUpdate::Degenerate
        {
            degenerate_updates += 1;
        }
        let s = cfg.injection_count(contact);
        let placed = Placed {
            inner: proposer,
            sensor,
        };
        belief.inject_on_contact(&z, s, &placed, &mut proposal_rng)?;
        steps.push(log(&belief, contact + 1, s)?);
        if (contact + 1) % cfg.resample_period == 0 {
            belief.systematic_resample(&mut filter_rng);
        }
    }
    Ok(FilterRun {
        prior,
        steps,
        degenerate_updates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::sensor::SensorConfig;

    fn poses(n: usize) -> Vec<PlanarPose> {
        (0..n)
            .map(|i| PlanarPose::from_angle(i as f64 * 0.01, -(i as f64) * 0.02, i as f64 * 0.3))
            .collect()
    }

    struct Fixed(Vec<PlanarPose>);

    impl PoseProposer for Fixed {
        fn propose(&self, _: &Observation, s: usize, _: &mut dyn RngCore) -> Result<Vec<PlanarPose>> {
            Ok(self.0[..s].to_vec())
        }
    }

    fn setup() -> (Shape, TaxelArray) {
        (
            Shape::rect(0.04, 0.025).unwrap(),
            TaxelArray::new(SensorConfig::default().with_taxels(16)).unwrap(),
        )
    }

    #[test]
    fn init_is_uniform_and_reproducible() {
        let cfg = FilterConfig::default();
        let bounds = Bounds::around_sensor(0.05);
        let b = init_belief(&cfg, &bounds, &mut seeded(1)).unwrap();
        assert_eq!(b.len(), 100);
        assert!(b.weights().iter().all(|w| *w == 0.01));
        // Compensated summation recovers the correctly rounded total.
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for &w in b.weights() {
            let t = sum + w;
            comp += if sum.abs() >= w.abs() { (sum - t) + w } else { (w - t) + sum };
            sum = t;
        }
        assert_eq!(sum + comp, 1.0);
        assert_eq!(b, init_belief(&cfg, &bounds, &mut seeded(1)).unwrap());
    }

    #[test]
    fn likelihood_closed_forms() {
        let (object, array) = setup();
        let q = PlanarPose::from_angle(0.07, 0.0, 0.0);
        let z = observe_noiseless(&object, &q, &array);
        assert_eq!(likelihood(&q, &z, &object, &array, 0.1), 1.0);

        let mut shifted = z.activations.clone();
        shifted[3] = (shifted[3] + 0.1).min(1.0);
        let delta = (shifted[3] - z.activations[3]).abs();
        let z2 = Observation::new(shifted).unwrap();
        let l = likelihood(&q, &z2, &object, &array, delta);
        assert!((l - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn likelihood_ratio_matches_formula() {
        let (object, array) = setup();
        let z = Observation::new((0..16).map(|i| (i as f64 * 0.37).sin().abs()).collect()).unwrap();
        let a = PlanarPose::from_angle(0.07, 0.0, 0.2);
        let b = PlanarPose::from_angle(-0.01, 0.075, 1.0);
        let sq = |q: &PlanarPose| -> f64 {
            let p = observe_noiseless(&object, q, &array);
            p.activations.iter().zip(&z.activations).map(|(x, y)| (x - y).powi(2)).sum()
        };
        let sigma = 0.3;
        let ratio = likelihood(&a, &z, &object, &array, sigma) / likelihood(&b, &z, &object, &array, sigma);
        let direct = ((sq(&b) - sq(&a)) / (2.0 * sigma * sigma)).exp();
        assert!((ratio / direct - 1.0).abs() < 1e-12);
    }

    #[test]
    fn update_matches_normalized_products() {
        let (object, array) = setup();
        let mut rng = seeded(4);
        let bounds = Bounds {
            x_min: -0.1,
            x_max: 0.1,
            y_min: -0.1,
            y_max: 0.1,
        };
        let particles: Vec<_> = (0..30).map(|_| bounds.sample_pose(&mut rng)).collect();
        let weights: Vec<f64> = (0..30).map(|_| rng.random_range(0.01..1.0)).collect();
        let mut b = Belief::new(particles.clone(), weights.clone()).unwrap();
        let z = observe_noiseless(&object, &PlanarPose::from_angle(0.068, 0.0, 0.1), &array);
        let sigma = 0.5;
        assert_eq!(b.update_weights(&z, &object, &array, sigma), WeightUpdate::Normal);

        let wsum: f64 = weights.iter().sum();
        let products: Vec<f64> = particles
            .iter()
            .zip(&weights)
            .map(|(q, w)| w / wsum * likelihood(q, &z, &object, &array, sigma))
            .collect();
        let total: f64 = products.iter().sum();
        for (got, p) in b.weights().iter().zip(&products) {
            assert!((got - p / total).abs() < 1e-12);
        }
        assert!((b.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn update_edge_cases() {
        let (object, array) = setup();
        let z = Observation::new(vec![0.0; 16]).unwrap();
        // Far away from the sensor every particle predicts all zeros.
        let far: Vec<_> = (0..4).map(|i| PlanarPose::from_angle(1.0 + i as f64, 1.0, 0.0)).collect();
        let mut b = Belief::new(far.clone(), vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        b.update_weights(&z, &object, &array, 0.1);
        for (w, e) in b.weights().iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!((w - e).abs() < 1e-15);
        }

        let mut b = Belief::new(far, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        b.update_weights(&z, &object, &array, 0.1);
        assert_eq!(b.weights(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn four_particle_example() {
        let mut b = Belief::new(poses(4), vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let new = vec![PlanarPose::from_angle(9.0, 9.0, 0.0), PlanarPose::from_angle(8.0, 8.0, 0.0)];
        let z = Observation::new(vec![0.5]).unwrap();
        b.inject_on_contact(&z, 2, &Fixed(new.clone()), &mut seeded(0)).unwrap();
        let expected = [0.25 / 1.2, 0.25 / 1.2, 0.3 / 1.2, 0.4 / 1.2];
        for (w, e) in b.weights().iter().zip(expected) {
            assert!((w - e).abs() < 1e-15);
        }
        assert_eq!(&b.particles()[..2], &new[..]);
        assert_eq!(&b.particles()[2..], &poses(4)[2..]);
    }

    #[test]
    fn injection_extremes() {
        let z = Observation::new(vec![0.5]).unwrap();
        let mut b = Belief::new(poses(5), vec![0.3, 0.1, 0.2, 0.15, 0.25]).unwrap();
        let before = b.clone();
        b.inject_on_contact(&z, 0, &Fixed(vec![]), &mut seeded(0)).unwrap();
        let mut pairs: Vec<_> = before.particles().iter().zip(before.weights()).collect();
        pairs.sort_by(|a, b| a.1.total_cmp(b.1));
        for ((p, w), (q, v)) in pairs.iter().zip(b.particles().iter().zip(b.weights())) {
            assert_eq!(*p, q);
            assert!((*w - v).abs() < 1e-15);
        }

        let fresh = poses(5).into_iter().rev().collect::<Vec<_>>();
        b.inject_on_contact(&z, 5, &Fixed(fresh.clone()), &mut seeded(0)).unwrap();
        assert_eq!(b.particles(), &fresh[..]);
        assert!(b.weights().iter().all(|w| (w - 0.2).abs() < 1e-15));

        assert!(b.inject_on_contact(&z, 6, &Fixed(poses(6)), &mut seeded(0)).is_err());
    }

    #[test]
    fn resampling_extremes() {
        let mut b = Belief::uniform(poses(7)).unwrap();
        b.systematic_resample(&mut seeded(2));
        assert_eq!(b.particles(), &poses(7)[..]);

        let mut b = Belief::new(poses(5), vec![0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        b.systematic_resample(&mut seeded(2));
        assert!(b.particles().iter().all(|p| *p == poses(5)[2]));
        assert!(b.weights().iter().all(|w| *w == 0.2));
    }

    #[test]
    fn estimates() {
        let b = Belief::new(poses(3), vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(b.map_estimate(), poses(3)[1]);
        let m = b.weighted_mean_estimate();
        assert!(!m.heading_fallback);
        assert!((m.pose.x - poses(3)[1].x).abs() < 1e-15 && (m.pose.angle() - 0.3).abs() < 1e-12);

        let q = |t: f64| PlanarPose::from_angle(0.0, 0.0, t.to_radians());
        let b = Belief::uniform(vec![q(45.0), q(-45.0)]).unwrap();
        assert!(b.weighted_mean_estimate().pose.angle().abs() < 1e-12);
        assert_eq!(b.map_index(), 0);

        let b = Belief::uniform(vec![q(0.0), q(180.0)]).unwrap();
        let m = b.weighted_mean_estimate();
        assert!(m.heading_fallback);
        assert_eq!((m.pose.c, m.pose.s), (1.0, 0.0));
    }

    #[test]
    fn weighted_mean_matches_direct_sum() {
        let mut rng = seeded(9);
        let bounds = Bounds::around_sensor(0.05);
        for _ in 0..50 {
            let ps: Vec<_> = (0..20).map(|_| bounds.sample_pose(&mut rng)).collect();
            let ws: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
            let total: f64 = ws.iter().sum();
            let b = Belief::new(ps.clone(), ws.clone()).unwrap();
            let m = b.weighted_mean_estimate().pose;
            let mut acc = [0.0; 4];
            for (p, w) in ps.iter().zip(&ws) {
                acc[0] += w * p.x / total;
                acc[1] += w * p.y / total;
                acc[2] += w * p.c / total;
                acc[3] += w * p.s / total;
            }
            let theta = acc[3].atan2(acc[2]);
            assert!((m.x - acc[0]).abs() < 1e-12 && (m.y - acc[1]).abs() < 1e-12);
            assert!((m.angle() - theta).abs() < 1e-12);
            let map = b.map_estimate();
            let wmax = b.weights()[b.map_index()];
            assert!(b.weights().iter().all(|w| *w <= wmax));
            assert!(ps.contains(&map));
        }
    }

    #[test]
    fn injection_schedule() {
        let cfg = FilterConfig::default();
        let counts: Vec<_> = (0..5).map(|k| cfg.injection_count(k)).collect();
        assert_eq!(counts, vec![50, 40, 32, 26, 21]);
        assert!(FilterConfig { initial_injection: 101, ..cfg }.validate().is_err());
        assert!(FilterConfig { injection_decay: 0.0, ..cfg }.validate().is_err());
        assert!(FilterConfig { likelihood_std: 0.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn run_is_deterministic_and_k0_is_empty() {
        let (object, array) = setup();
        let pts = object.boundary_points(64).unwrap();
        let cfg = FilterConfig {
            n_particles: 20,
            initial_injection: 10,
            ..FilterConfig::default()
        };
        let sampler = ContactSampler::new(
            &object,
            &array,
            &crate::contact::SynthesisConfig::new(1, array.radius(), 0),
        )
        .unwrap();
        let gt = sampler.sample_pose(&mut seeded(11)).unwrap().0;
        let proposer = ProjectionProposer {
            sampler: sampler.clone(),
        };
        let s = FilterSetup {
            object: &object,
            array: &array,
            bounds: Bounds::around_sensor(array.radius()),
            model_points: &pts,
            contacts: &sampler,
        };
        let empty = run_filter(&s, &proposer, &gt, &cfg, 0, &mut seeded(1)).unwrap();
        assert!(empty.steps.is_empty());
        assert_eq!(empty.contacts_to_threshold(0.01), 1);
        let base: u64 = seeded(1).random();
        let prior_belief = init_belief(&cfg, &s.bounds, &mut rng::stream(base, 0)).unwrap();
        let expected = add_error(&pts, &prior_belief.map_estimate(), &gt).unwrap();
        assert_eq!(empty.prior.map_add, expected);

        let a = run_filter(&s, &proposer, &gt, &cfg, 6, &mut seeded(1)).unwrap();
        let b = run_filter(&s, &proposer, &gt, &cfg, 6, &mut seeded(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.steps.len(), 6);
        assert_eq!(a.prior, empty.prior);
        let injected: Vec<_> = a.steps.iter().map(|s| s.injected_count).collect();
        assert_eq!(injected, vec![10, 8, 7, 6, 5, 4]);
        assert!(a.steps.iter().all(|s| s.effective_sample_size >= 1.0 - 1e-9));
    }
}
