//! Closed-form and quadrature checks of the optimal-discriminator theory:
//! `D* = p / (p + q)`, the per-pair bound `L(a, b) ≥ -2 log 2`, and the
//! generator's optimum `-log 4` at `q = p`.

use std::f64::consts::LN_2;

use crate::autodiff::{sigmoid, Graph, Tensor};
use crate::error::{contract, Error, Result};
use crate::gan::{one_hot, MixtureWeights};
use crate::mixture::{histogram, MixtureSpec};
use crate::nn::DiscriminatorNet;

/// Integration window and step for composite Simpson quadrature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            lo: -15.0,
            hi: 15.0,
            step: 1e-3,
        }
    }
}

impl Grid {
    fn intervals(&self) -> usize {
        let n = ((self.hi - self.lo) / self.step).round() as usize;
        n + n % 2
    }
}

/// Composite Simpson rule with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / n as f64;
    let mut odd = 0.0;
    let mut even = 0.0;
    for i in 1..n {
        let v = f(lo + i as f64 * h);
        if i % 2 == 1 {
            odd += v;
        } else {
            even += v;
        }
    }
    (f(lo) + f(hi) + 4.0 * odd + 2.0 * even) * h / 3.0
}

/// Simpson on `grid`, certified by one halving of the step.
pub fn integrate(f: impl Fn(f64) -> f64, grid: &Grid) -> Result<f64> {
    let n = grid.intervals();
    let coarse = simpson(&f, grid.lo, grid.hi, n);
    let fine = simpson(&f, grid.lo, grid.hi, 2 * n);
    let delta = (fine - coarse).abs();
    if delta > 1e-6 {
        return Err(Error::Precision { delta });
    }
    Ok(fine)
}

type Density = Box<dyn Fn(f64, usize) -> f64 + Send + Sync>;

/// True conditional density `p(y|x)` and model density `q(y|x)`.
pub struct DensityPair {
    pub p: Density,
    pub q: Density,
    pub grid: Grid,
}

impl DensityPair {
    pub fn new(p: Density, q: Density) -> Self {
        Self {
            p,
            q,
            grid: Grid::default(),
        }
    }

    pub fn from_specs(p: MixtureSpec, q: MixtureSpec) -> Self {
        Self::new(
            Box::new(move |y, x| p.pdf(y, Some(x))),
            Box::new(move |y, x| q.pdf(y, Some(x))),
        )
    }

    pub fn optimal_discriminator(&self, y: f64, x: usize) -> Result<f64> {
        optimal_discriminator((self.p)(y, x), (self.q)(y, x))
    }
}

/// `p / (p + q)` for density values at one point.
pub fn optimal_discriminator(p: f64, q: f64) -> Result<f64> {
    if !(p >= 0.0 && q >= 0.0) {
        return Err(Error::Domain(format!("negative density ({p}, {q})")));
    }
    if p + q == 0.0 {
        return Err(Error::Domain("both densities vanish".into()));
    }
    Ok(p / (p + q))
}

fn xlogx_ratio(a: f64, s: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        a * (a / s).ln()
    }
}

/// `∫ a log(a/(a+b)) + b log(b/(a+b)) dy`, bounded below by `-2 log 2`.
pub fn pair_loss(a: impl Fn(f64) -> f64, b: impl Fn(f64) -> f64, grid: &Grid) -> Result<f64> {
    integrate(
        |y| {
            let (av, bv) = (a(y), b(y));
            let s = av + bv;
            if s == 0.0 {
                0.0
            } else {
                xlogx_ratio(av, s) + xlogx_ratio(bv, s)
            }
        },
        grid,
    )
}

/// Value of the generator objective under optimal discriminators:
/// `Σ_j π_j · pair_loss(p(·|j), q(·|j))`.
pub fn generator_value(p: &MixtureSpec, q: &MixtureSpec, weights: &MixtureWeights, grid: &Grid) -> Result<f64> {
    if p.len() != q.len() || weights.len() != p.len() {
        return Err(contract(format!(
            "component counts differ: p {}, q {}, weights {}",
            p.len(),
            q.len(),
            weights.len()
        )));
    }
    let mut total = 0.0;
    for j in 0..p.len() {
        let w = weights.get(j);
        if w == 0.0 {
            continue;
        }
        total += w * pair_loss(|y| p.pdf(y, Some(j)), |y| q.pdf(y, Some(j)), grid)?;
    }
    Ok(total)
}

/// `-log 4`.
pub fn optimal_value() -> f64 {
    -2.0 * LN_2
}

/// Evaluation points for the empirical check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckGrid {
    pub lo: f64,
    pub hi: f64,
    /// Histogram bin width used to estimate `q`; points sit at bin centres.
    pub bin: f64,
    /// Points where `p + q̂` is at or below this are excluded.
    pub min_density: f64,
}

impl Default for CheckGrid {
    fn default() -> Self {
        Self {
            lo: -15.0,
            hi: 15.0,
            bin: 0.05,
            min_density: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorCheck {
    /// `None` when no grid point passed the density restriction.
    pub max_abs_deviation: Option<f64>,
    pub points: usize,
    pub inconclusive: bool,
}

/// `true` if the mean loss over the last 100 entries is still more than
/// `1e-4` below the mean over the 100 before.
pub fn still_converging(loss_history: &[f64]) -> bool {
    if loss_history.len() < 200 {
        return true;
    }
    let n = loss_history.len();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    mean(&loss_history[n - 200..n - 100]) - mean(&loss_history[n - 100..]) > 1e-4
}

/// Compares a trained discriminator with `p / (p + q̂)`, where `q̂` is a
/// histogram estimate from frozen-generator samples (`q_samples[x]`).
pub fn empirical_discriminator_check(
    d: &DiscriminatorNet,
    spec: &MixtureSpec,
    q_samples: &[Vec<f32>],
    grid: &CheckGrid,
    loss_history: &[f64],
) -> Result<DiscriminatorCheck> {
    if q_samples.len() != spec.len() {
        return Err(contract("need one generated sample set per component"));
    }
    let bins = ((grid.hi - grid.lo) / grid.bin).round() as usize;
    let mut worst: Option<f64> = None;
    let mut points = 0;
    for (x, samples) in q_samples.iter().enumerate() {
        if samples.is_empty() {
            continue;
        }
        let ys: Vec<f64> = samples.iter().map(|&v| v as f64).collect();
        // Clamped edge bins would inflate the tails, so drop out-of-window samples.
        let inside: Vec<f64> = ys.into_iter().filter(|&v| v >= grid.lo && v < grid.hi).collect();
        let counts = histogram(&inside, bins, (grid.lo, grid.hi));
        let norm = samples.len() as f64 * grid.bin;
        let centres: Vec<f64> = (0..bins).map(|i| grid.lo + (i as f64 + 0.5) * grid.bin).collect();

        let mut g = Graph::new();
        let params = d.mlp.bind(&mut g, false);
        let y = g.constant(Tensor::matrix(bins, 1, centres.iter().map(|&c| c as f32).collect())?);
        let xv = g.constant(one_hot(&vec![x; bins], spec.len())?);
        let logits = d.forward(&mut g, &params, y, xv)?;
        let logits = g.value(logits).data().to_vec();

        for (i, &c) in centres.iter().enumerate() {
            let p = spec.pdf(c, Some(x));
            let q = counts[i] as f64 / norm;
            if p + q <= grid.min_density {
                continue;
            }
            let target = optimal_discriminator(p, q)?;
            let dev = (sigmoid(logits[i] as f64) - target).abs();
            worst = Some(worst.map_or(dev, |w: f64| w.max(dev)));
            points += 1;
        }
    }
    Ok(DiscriminatorCheck {
        max_abs_deviation: worst,
        points,
        inconclusive: worst.is_none() || still_converging(loss_history),
    })
}
