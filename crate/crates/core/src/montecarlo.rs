//! Fault-injection Monte Carlo of the fixed-point filter.
//!
//! Each trial draws a ground-truth trajectory in full precision and runs the
//! filter in fixed point with its state estimate kept in faulty memory: every
//! step reads the stored estimate through the bit-flip channel, multiplies
//! `[Q(D) | Q(K)]` by `[x̃; Q(y)]` exactly and writes the result back. The
//! returned error is the last read `x̃_N` minus `x_N`.
//!
//! Trial `t` uses ChaCha8 seeded with the base seed on stream `t`, so results
//! do not depend on thread count or scheduling.

use crate::error::{Error, Result};
use crate::fixedpoint::{quantize, FixedPointFormat, FixedPointValue, QuantizedMatrix};
use crate::kalman::{precompute_gains, GainSchedule, GaussianNoise, StateSpaceModel};
use crate::memory_model::{BitFlipChannel, EnergyVector, MemoryNoiseParams};
use crate::scalar::Scalar;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

/// Saturated fraction of stored values above which results are suspect.
pub const SATURATION_WARNING_RATE: f64 = 1e-3;

/// Trials accumulated sequentially before partial sums are merged.
const CHUNK: usize = 512;

/// Everything one Monte Carlo estimate depends on.
#[derive(Clone, Debug)]
pub struct TrialConfig<T: Scalar> {
    /// Preset name, for provenance only.
    pub scenario: String,
    pub model: StateSpaceModel<T>,
    pub x0_mean: DVector<T>,
    pub p0: DMatrix<T>,
    pub energies: EnergyVector<T>,
    pub params: MemoryNoiseParams<T>,
    pub steps: usize,
    pub trials: usize,
    pub base_seed: u64,
}

impl<T: Scalar> TrialConfig<T> {
    pub fn format(&self) -> FixedPointFormat {
        self.energies.format()
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidParameter {
                name: "trials",
                reason: "must be at least 1".into(),
            });
        }
        if self.steps == 0 {
            return Err(Error::InvalidParameter {
                name: "steps",
                reason: "must be at least 1".into(),
            });
        }
        let c = self.model.state_dim();
        if self.x0_mean.len() != c {
            return Err(Error::dims("x0_mean", (c, 1), (self.x0_mean.len(), 1)));
        }
        Ok(())
    }
}

/// Outcome of one trial.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialOutcome<T: Scalar> {
    pub error: DVector<T>,
    /// Saturated filter outputs and measurement conversions.
    pub saturations: usize,
    /// Filter outputs plus measurement conversions.
    pub conversions: usize,
}

/// The per-configuration state shared by all trials.
#[derive(Clone, Debug)]
pub struct FaultyFilter<T: Scalar> {
    model: StateSpaceModel<T>,
    x0_mean: DVector<T>,
    prior: GaussianNoise<T>,
    process: GaussianNoise<T>,
    sensor: GaussianNoise<T>,
    /// `[Q(D_k) | Q(K_k)]` for every step.
    updates: Vec<QuantizedMatrix<T>>,
    channel: BitFlipChannel,
    format: FixedPointFormat,
}

impl<T: Scalar> FaultyFilter<T> {
    pub fn new(
        model: &StateSpaceModel<T>,
        schedule: &GainSchedule<T>,
        x0_mean: &DVector<T>,
        energies: &EnergyVector<T>,
        params: &MemoryNoiseParams<T>,
    ) -> Result<Self> {
        let format = schedule.format();
        if energies.format() != format {
            return Err(Error::InvalidParameter {
                name: "energies",
                reason: format!("format {} differs from schedule format {format}", energies.format()),
            });
        }
        let updates = schedule
            .steps()
            .iter()
            .map(|s| s.transition_q.hcat(&s.gain_q))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model: model.clone(),
            x0_mean: x0_mean.clone(),
            prior: GaussianNoise::new(schedule.initial_covariance()),
            process: GaussianNoise::new(model.q()),
            sensor: GaussianNoise::new(model.r()),
            updates,
            channel: BitFlipChannel::new(energies, params),
            format,
        })
    }

    pub fn steps(&self) -> usize {
        self.updates.len()
    }

    /// One trial: true `x_0 ~ N(x̂_0, P_0)`, filter started from `Q(x̂_0)`.
    pub fn run<R: Rng + ?Sized>(&self, rng: &mut R) -> TrialOutcome<T>
    where
        StandardNormal: Distribution<T>,
    {
        let c = self.model.state_dim();
        let d = self.model.measurement_dim();
        let fmt = self.format;
        let mut zc = DVector::zeros(c);
        let mut zd = DVector::zeros(d);

        let mut x = self.x0_mean.clone();
        self.prior.add_sample(rng, &mut zc, &mut x);

        let mut saturations = 0;
        let mut stored: Vec<FixedPointValue> = self
            .x0_mean
            .iter()
            .map(|&v| {
                let r = quantize(v, fmt);
                saturations += r.saturated as usize;
                r.value
            })
            .collect();
        let mut input = vec![fmt.zero(); c + d];
        let mut sat = vec![false; c];
        let mut y = DVector::zeros(d);

        for update in &self.updates {
            let mut next = self.model.f() * &x;
            self.process.add_sample(rng, &mut zc, &mut next);
            x = next;
            y.gemv(T::one(), self.model.h(), &x, T::zero());
            self.sensor.add_sample(rng, &mut zd, &mut y);

            for (slot, v) in input.iter_mut().zip(&stored) {
                *slot = self.channel.corrupt(*v, rng);
            }
            for (slot, &v) in input[c..].iter_mut().zip(y.iter()) {
                let r = quantize(v, fmt);
                saturations += r.saturated as usize;
                *slot = r.value;
            }
            saturations += update
                .matvec_into(&input, &mut stored, &mut sat)
                .expect("update matrices match the state layout");
        }

        let error = DVector::from_iterator(
            c,
            stored
                .iter()
                .zip(x.iter())
                .map(|(v, &truth)| self.channel.corrupt(*v, rng).to_real::<T>() - truth),
        );
        TrialOutcome {
            error,
            saturations,
            conversions: c + self.updates.len() * (c + d),
        }
    }

    /// Trial `index` of a run with `base_seed`.
    pub fn run_trial(&self, base_seed: u64, index: u64) -> TrialOutcome<T>
    where
        StandardNormal: Distribution<T>,
    {
        let mut rng = trial_rng(base_seed, index);
        self.run(&mut rng)
    }
}

/// Independent generator for trial `index`.
pub fn trial_rng(base_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(index);
    rng
}

/// One faulty-filter run along `schedule`; returns `x̃_{N|N} - x_N`.
pub fn run_faulty_filter<T: Scalar, R: Rng + ?Sized>(
    model: &StateSpaceModel<T>,
    schedule: &GainSchedule<T>,
    x0_mean: &DVector<T>,
    energies: &EnergyVector<T>,
    params: &MemoryNoiseParams<T>,
    rng: &mut R,
) -> Result<TrialOutcome<T>>
where
    StandardNormal: Distribution<T>,
{
    let filter = FaultyFilter::new(model, schedule, x0_mean, energies, params)?;
    Ok(filter.run(rng))
}

/// Second-moment statistics of the final error over all trials.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalCovariance<T: Scalar> {
    /// `(1/T) Σ e eᵀ`, the mean squared error matrix (bias included), which
    /// is what `P*` predicts.
    pub cov: DMatrix<T>,
    pub mean: DVector<T>,
    /// Standard error of each entry of `cov`.
    pub std_error: DMatrix<T>,
    pub trials: usize,
    pub saturations: usize,
    pub conversions: usize,
}

impl<T: Scalar> EmpiricalCovariance<T> {
    pub fn saturation_rate(&self) -> f64 {
        self.saturations as f64 / self.conversions.max(1) as f64
    }

    /// Human-readable warning when the integer width looks too small.
    pub fn saturation_warning(&self) -> Option<String> {
        let rate = self.saturation_rate();
        (rate > SATURATION_WARNING_RATE).then(|| {
            format!(
                "{:.3}% of fixed-point conversions saturated; the integer width is probably too small",
                100.0 * rate
            )
        })
    }

    /// Covariance about the sample mean (`1/(T-1)` normalization).
    pub fn centered(&self) -> DMatrix<T> {
        let t = T::from_usize_lossy(self.trials);
        if self.trials < 2 {
            return DMatrix::zeros(self.cov.nrows(), self.cov.ncols());
        }
        (&self.cov - &self.mean * self.mean.transpose()) * (t / (t - T::one()))
    }
}

#[derive(Clone, Debug)]
struct Partial<T: Scalar> {
    sum: DVector<T>,
    outer: DMatrix<T>,
    outer_sq: DMatrix<T>,
    saturations: usize,
    conversions: usize,
}

impl<T: Scalar> Partial<T> {
    fn zeros(c: usize) -> Self {
        Self {
            sum: DVector::zeros(c),
            outer: DMatrix::zeros(c, c),
            outer_sq: DMatrix::zeros(c, c),
            saturations: 0,
            conversions: 0,
        }
    }

    fn push(&mut self, o: &TrialOutcome<T>) {
        let e = &o.error;
        self.sum += e;
        for j in 0..e.len() {
            for i in 0..e.len() {
                let z = e[i] * e[j];
                self.outer[(i, j)] += z;
                self.outer_sq[(i, j)] += z * z;
            }
        }
        self.saturations += o.saturations;
        self.conversions += o.conversions;
    }

    fn merge(mut self, other: &Self) -> Self {
        self.sum += &other.sum;
        self.outer += &other.outer;
        self.outer_sq += &other.outer_sq;
        self.saturations += other.saturations;
        self.conversions += other.conversions;
        self
    }
}

/// Pairwise merge in index order, so the result is fixed by the chunking.
fn pairwise<T: Scalar>(parts: &[Partial<T>]) -> Partial<T> {
    match parts {
        [one] => one.clone(),
        _ => {
            let (l, r) = parts.split_at(parts.len() / 2);
            pairwise(l).merge(&pairwise(r))
        }
    }
}

/// Runs `cfg.trials` independent trials (in parallel) and summarizes the
/// final errors.
pub fn estimate_error_covariance<T: Scalar>(cfg: &TrialConfig<T>) -> Result<EmpiricalCovariance<T>>
where
    StandardNormal: Distribution<T>,
{
    cfg.validate()?;
    let schedule = precompute_gains(&cfg.model, &cfg.p0, cfg.steps, cfg.format())?;
    let filter = FaultyFilter::new(&cfg.model, &schedule, &cfg.x0_mean, &cfg.energies, &cfg.params)?;
    estimate_with(&filter, cfg.trials, cfg.base_seed)
}

/// Same as [`estimate_error_covariance`] for a prepared filter.
pub fn estimate_with<T: Scalar>(
    filter: &FaultyFilter<T>,
    trials: usize,
    base_seed: u64,
) -> Result<EmpiricalCovariance<T>>
where
    StandardNormal: Distribution<T>,
{
    if trials == 0 {
        return Err(Error::InvalidParameter {
            name: "trials",
            reason: "must be at least 1".into(),
        });
    }
    let c = filter.model.state_dim();
    let chunks = trials.div_ceil(CHUNK);
    let parts: Vec<Partial<T>> = (0..chunks)
        .into_par_iter()
        .map(|k| {
            let mut p = Partial::zeros(c);
            for t in k * CHUNK..((k + 1) * CHUNK).min(trials) {
                p.push(&filter.run_trial(base_seed, t as u64));
            }
            p
        })
        .collect();
    let total = pairwise(&parts);
    let n = T::from_usize_lossy(trials);
    let cov = &total.outer / n;
    let second = &total.outer_sq / n;
    let std_error = DMatrix::from_fn(c, c, |i, j| {
        let var = (second[(i, j)] - cov[(i, j)] * cov[(i, j)]).max(T::zero());
        (var / n).sqrt()
    });
    Ok(EmpiricalCovariance {
        cov,
        mean: &total.sum / n,
        std_error,
        trials,
        saturations: total.saturations,
        conversions: total.conversions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::tracking2d;

    fn config(m: u32, trials: usize, seed: u64) -> TrialConfig<f64> {
        let s = tracking2d::<f64>();
        let fmt = FixedPointFormat::new(8, m).unwrap();
        TrialConfig {
            scenario: s.name,
            model: s.model,
            x0_mean: s.x0_mean,
            p0: s.p0,
            energies: EnergyVector::uniform_total(fmt, 15.0).unwrap(),
            params: MemoryNoiseParams::new(12.8, 0.1).unwrap(),
            steps: 50,
            trials,
            base_seed: seed,
        }
    }

    #[test]
    fn single_trial_is_rank_one() {
        let e = estimate_error_covariance(&config(12, 1, 7)).unwrap();
        let v = &e.mean;
        let outer = v * v.transpose();
        assert!((&e.cov - outer).abs().max() < 1e-12);
        assert!(e.cov.determinant().abs() < 1e-9 * e.cov.norm_squared().max(1e-300));
    }

    #[test]
    fn seeds_are_reproducible_and_distinct() {
        let a = estimate_error_covariance(&config(12, 700, 1)).unwrap();
        let b = estimate_error_covariance(&config(12, 700, 1)).unwrap();
        let c = estimate_error_covariance(&config(12, 700, 2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.cov, c.cov);
    }

    #[test]
    fn trial_streams_are_independent_of_chunking() {
        let cfg = config(10, 3, 11);
        let s = tracking2d::<f64>();
        let sched = precompute_gains(&s.model, &s.p0, cfg.steps, cfg.format()).unwrap();
        let f = FaultyFilter::new(&cfg.model, &sched, &cfg.x0_mean, &cfg.energies, &cfg.params).unwrap();
        let t2 = f.run_trial(11, 2);
        let mut rng = trial_rng(11, 2);
        assert_eq!(f.run(&mut rng), t2);
        assert_ne!(f.run_trial(11, 1).error, t2.error);
    }

    #[test]
    fn zero_trials_rejected() {
        assert!(estimate_error_covariance(&config(12, 0, 1)).is_err());
    }
}
