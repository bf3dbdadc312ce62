//! The synthetic conditional target: `x` picks one of K one-dimensional
//! Gaussians, `y` is drawn from it.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{contract, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Component {
    pub mean: f64,
    /// Variance, or standard deviation when `spread_is_variance` is false.
    pub spread: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    pub components: Vec<Component>,
    pub priors: Vec<f64>,
    pub spread_is_variance: bool,
}

impl MixtureSpec {
    pub fn new(components: Vec<Component>, priors: Vec<f64>, spread_is_variance: bool) -> Result<Self> {
        if components.is_empty() || components.len() != priors.len() {
            return Err(contract("mixture needs one prior per component"));
        }
        if components.iter().any(|c| !(c.spread > 0.0) || !c.mean.is_finite()) {
            return Err(contract("component spread must be positive"));
        }
        if priors.iter().any(|&p| !(p >= 0.0)) || (priors.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(contract(format!("priors {priors:?} must be nonnegative and sum to 1")));
        }
        Ok(Self {
            components,
            priors,
            spread_is_variance,
        })
    }

    /// Three equally likely components N(-3, 2), N(1, 1), N(3, 0.5).
    pub fn three_gaussians(spread_is_variance: bool) -> Self {
        let c = |mean, spread| Component { mean, spread };
        Self::new(
            vec![c(-3.0, 2.0), c(1.0, 1.0), c(3.0, 0.5)],
            vec![1.0 / 3.0; 3],
            spread_is_variance,
        )
        .expect("valid default mixture")
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn std_dev(&self, x: usize) -> f64 {
        let s = self.components[x].spread;
        if self.spread_is_variance {
            s.sqrt()
        } else {
            s
        }
    }

    /// Conditional density `p(y | x)`, or the prior-weighted marginal when `x` is `None`.
    pub fn pdf(&self, y: f64, x: Option<usize>) -> f64 {
        match x {
            Some(x) => normal_pdf(y, self.components[x].mean, self.std_dev(x)),
            None => (0..self.len()).map(|j| self.priors[j] * self.pdf(y, Some(j))).sum(),
        }
    }

    pub fn sample_component<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (j, p) in self.priors.iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        self.priors.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    pub fn sample_y<R: Rng + ?Sized>(&self, x: usize, rng: &mut R) -> f32 {
        let z: f64 = rng.sample(StandardNormal);
        (self.components[x].mean + self.std_dev(x) * z) as f32
    }
}

pub fn normal_pdf(y: f64, mean: f64, sd: f64) -> f64 {
    let z = (y - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * PI).sqrt())
}

/// One labelled record: component index and value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub x: usize,
    pub y: f32,
}

pub fn sample(spec: &MixtureSpec, n: usize, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(contract("sample size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let x = spec.sample_component(&mut rng);
            Sample {
                x,
                y: spec.sample_y(x, &mut rng),
            }
        })
        .collect())
}

/// Draws `n` values from a single component.
pub fn sample_conditional(spec: &MixtureSpec, x: usize, n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| spec.sample_y(x, &mut rng)).collect()
}

/// A node's private data.
#[derive(Clone, Debug, PartialEq)]
pub struct Shard {
    pub node_id: u16,
    pub samples: Vec<Sample>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShardMode {
    /// One shard per component value, ordered by component.
    PerComponent,
    /// Uniformly shuffled partition into `nodes` near-equal shards.
    RandomSplit { nodes: usize, seed: u64 },
}

pub fn make_shards(dataset: &[Sample], mode: ShardMode) -> Result<Vec<Shard>> {
    if dataset.is_empty() {
        return Err(contract("cannot shard an empty dataset"));
    }
    match mode {
        ShardMode::PerComponent => {
            let k = dataset.iter().map(|s| s.x).max().unwrap() + 1;
            let mut buckets = vec![Vec::new(); k];
            for s in dataset {
                buckets[s.x].push(*s);
            }
            Ok(buckets
                .into_iter()
                .filter(|b| !b.is_empty())
                .enumerate()
                .map(|(i, samples)| Shard {
                    node_id: i as u16,
                    samples,
                })
                .collect())
        }
        ShardMode::RandomSplit { nodes, seed } => {
            if nodes == 0 || nodes > dataset.len() {
                return Err(contract(format!(
                    "cannot split {} samples across {nodes} nodes",
                    dataset.len()
                )));
            }
            let mut order: Vec<usize> = (0..dataset.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let base = dataset.len() / nodes;
            let extra = dataset.len() % nodes;
            let mut start = 0;
            Ok((0..nodes)
                .map(|i| {
                    let len = base + usize::from(i < extra);
                    let samples = order[start..start + len].iter().map(|&j| dataset[j]).collect();
                    start += len;
                    Shard {
                        node_id: i as u16,
                        samples,
                    }
                })
                .collect())
        }
    }
}

/// Histogram counts over `[lo, hi)`; out-of-window values land in the edge bins.
pub fn histogram(samples: &[f64], bins: usize, range: (f64, f64)) -> Vec<u64> {
    let (lo, hi) = range;
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins];
    for &v in samples {
        let idx = ((v - lo) / width).floor();
        let idx = if idx.is_nan() {
            0
        } else {
            idx.clamp(0.0, (bins - 1) as f64) as usize
        };
        counts[idx] += 1;
    }
    counts
}

/// Jensen-Shannon divergence (natural log) between add-one smoothed histograms.
pub fn js_divergence(a: &[f64], b: &[f64], bins: usize, range: (f64, f64)) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(contract("js_divergence needs nonempty sample sets"));
    }
    if bins < 10 {
        return Err(contract(format!("need at least 10 bins, got {bins}")));
    }
    if !(range.1 > range.0) {
        return Err(contract(format!("empty histogram window {range:?}")));
    }
    let smooth = |counts: Vec<u64>, n: usize| -> Vec<f64> {
        let total = (n + bins) as f64;
        counts.into_iter().map(|c| (c + 1) as f64 / total).collect()
    };
    let p = smooth(histogram(a, bins, range), a.len());
    let q = smooth(histogram(b, bins, range), b.len());
    let js: f64 = p
        .iter()
        .zip(&q)
        .map(|(&pi, &qi)| {
            let m = 0.5 * (pi + qi);
            0.5 * pi * (pi / m).ln() + 0.5 * qi * (qi / m).ln()
        })
        .sum();
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

pub fn write_samples_csv<W: Write>(out: &mut W, samples: &[Sample]) -> Result<()> {
    writeln!(out, "x,y")?;
    for s in samples {
        writeln!(out, "{},{}", s.x, s.y)?;
    }
    Ok(())
}

pub fn read_samples_csv<R: BufRead>(input: R) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (i == 0 && line == "x,y") {
            continue;
        }
        let (x, y) = line
            .split_once(',')
            .ok_or_else(|| Error::Config(format!("line {}: expected `x,y`", i + 1)))?;
        let bad = |what: &str| Error::Config(format!("line {}: bad {what}", i + 1));
        out.push(Sample {
            x: x.trim().parse().map_err(|_| bad("x"))?,
            y: y.trim().parse().map_err(|_| bad("y"))?,
        });
    }
    Ok(out)
}

pub fn write_histogram_csv<W: Write>(out: &mut W, samples: &[f64], bins: usize, range: (f64, f64)) -> Result<()> {
    let width = (range.1 - range.0) / bins as f64;
    writeln!(out, "bin_left,count")?;
    for (i, c) in histogram(samples, bins, range).into_iter().enumerate() {
        writeln!(out, "{},{}", range.0 + i as f64 * width, c)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
        let h = (hi - lo) / n as f64;
        let mut s = f(lo) + f(hi);
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(lo + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn component_frequencies_and_means() {
        let spec = MixtureSpec::three_gaussians(true);
        let data = sample(&spec, 30_000, 0).unwrap();
        for j in 0..3 {
            let ys: Vec<f64> = data.iter().filter(|s| s.x == j).map(|s| s.y as f64).collect();
            let freq = ys.len() as f64 / 30_000.0;
            assert!((freq - 1.0 / 3.0).abs() < 0.01, "component {j} freq {freq}");
        }
        let big = sample_conditional(&spec, 2, 30_000, 1);
        let mean = big.iter().map(|&v| v as f64).sum::<f64>() / 30_000.0;
        assert!((mean - 3.0).abs() < 0.02, "{mean}");
        assert_eq!(sample(&spec, 100, 4).unwrap(), sample(&spec, 100, 4).unwrap());
        assert!(sample(&spec, 0, 4).is_err());
    }

    #[test]
    fn pdf_values() {
        let spec = MixtureSpec::three_gaussians(true);
        assert!((spec.pdf(1.0, Some(1)) - 0.398_942_280_4).abs() < 1e-9);
        assert!((spec.pdf(3.0, Some(2)) - 1.0 / PI.sqrt()).abs() < 1e-12);
        let total = simpson(|y| spec.pdf(y, None), -15.0, 15.0, 30_000);
        assert!((total - 1.0).abs() < 1e-6, "{total}");
        for j in 0..3 {
            let t = simpson(|y| spec.pdf(y, Some(j)), -15.0, 15.0, 30_000);
            assert!((t - 1.0).abs() < 1e-6);
        }
        // standard-deviation reading: N(-3, sd 2)
        let sd = MixtureSpec::three_gaussians(false);
        assert!((sd.std_dev(0) - 2.0).abs() < 1e-15);
        assert!((spec.std_dev(0) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn js_extremes() {
        let a: Vec<f64> = (0..1000).map(|i| i as f64 / 100.0 - 5.0).collect();
        assert_eq!(js_divergence(&a, &a, 100, (-10.0, 10.0)).unwrap(), 0.0);

        let p = vec![-5.0; 100_000];
        let q = vec![5.0; 100_000];
        let js = js_divergence(&p, &q, 100, (-10.0, 10.0)).unwrap();
        assert!((js - std::f64::consts::LN_2).abs() < 0.01, "{js}");
        assert!(js_divergence(&[], &q, 100, (-10.0, 10.0)).is_err());
        assert!(js_divergence(&p, &q, 5, (-10.0, 10.0)).is_err());
    }

    #[test]
    fn js_sampling_noise_floor() {
        let spec = MixtureSpec::three_gaussians(true);
        let ys = |seed| -> Vec<f64> {
            sample(&spec, 100_000, seed)
                .unwrap()
                .iter()
                .map(|s| s.y as f64)
                .collect()
        };
        let js = js_divergence(&ys(1), &ys(2), 100, (-10.0, 10.0)).unwrap();
        assert!(js < 0.01, "{js}");
    }

    #[test]
    fn shards() {
        let spec = MixtureSpec::three_gaussians(true);
        let data = sample(&spec, 300, 3).unwrap();
        let per = make_shards(&data, ShardMode::PerComponent).unwrap();
        assert_eq!(per.len(), 3);
        for (j, s) in per.iter().enumerate() {
            assert_eq!(s.node_id as usize, j);
            assert!(s.samples.iter().all(|r| r.x == j));
        }

        let hundred = &data[..100];
        let split = make_shards(hundred, ShardMode::RandomSplit { nodes: 2, seed: 9 }).unwrap();
        assert_eq!(split.iter().map(Shard::len).collect::<Vec<_>>(), vec![50, 50]);
        let mut union: Vec<(usize, u32)> = split
            .iter()
            .flat_map(|s| s.samples.iter().map(|r| (r.x, r.y.to_bits())))
            .collect();
        let mut orig: Vec<(usize, u32)> = hundred.iter().map(|r| (r.x, r.y.to_bits())).collect();
        union.sort_unstable();
        orig.sort_unstable();
        assert_eq!(union, orig);

        assert!(make_shards(&data[..2], ShardMode::RandomSplit { nodes: 3, seed: 0 }).is_err());
        assert!(make_shards(&[], ShardMode::PerComponent).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let spec = MixtureSpec::three_gaussians(true);
        let data = sample(&spec, 50, 3).unwrap();
        let mut buf = Vec::new();
        write_samples_csv(&mut buf, &data).unwrap();
        assert_eq!(read_samples_csv(buf.as_slice()).unwrap(), data);
    }

    #[test]
    fn invalid_specs() {
        let c = Component { mean: 0.0, spread: 1.0 };
        assert!(MixtureSpec::new(vec![c], vec![0.5], true).is_err());
        assert!(MixtureSpec::new(vec![Component { mean: 0.0, spread: 0.0 }], vec![1.0], true).is_err());
    }
}
