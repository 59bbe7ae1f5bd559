//! Tree-structured Parzen estimator over mixed real, categorical and
//! fixed-size subset dimensions.

use rand::distributions::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as StatNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Dim {
    Real { lo: f64, hi: f64 },
    Categorical { n: usize },
    /// `k` distinct indices out of `0..pool`.
    Subset { pool: usize, k: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Real(f64),
    Cat(usize),
    /// Sorted, distinct.
    Subset(Vec<usize>),
}

impl Value {
    pub fn real(&self) -> f64 {
        match self {
            Value::Real(x) => *x,
            _ => panic!("not a real value"),
        }
    }

    pub fn cat(&self) -> usize {
        match self {
            Value::Cat(c) => *c,
            _ => panic!("not a categorical value"),
        }
    }

    pub fn subset(&self) -> &[usize] {
        match self {
            Value::Subset(s) => s,
            _ => panic!("not a subset value"),
        }
    }
}

/// How a dimension is chosen on each suggestion.
#[derive(Debug, Clone, PartialEq)]
pub enum Mode {
    Model,
    /// Always uniform, never modelled.
    Random,
    Fixed(Value),
}

impl Dim {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Dim::Real { lo, hi } => lo.is_finite() && hi.is_finite() && lo < hi,
            Dim::Categorical { n } => n >= 1,
            Dim::Subset { pool, k } => k >= 1 && pool >= k,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid search dimension {self:?}")))
        }
    }

    pub fn contains(&self, v: &Value) -> bool {
        match (self, v) {
            (Dim::Real { lo, hi }, Value::Real(x)) => (*lo..=*hi).contains(x),
            (Dim::Categorical { n }, Value::Cat(c)) => c < n,
            (Dim::Subset { pool, k }, Value::Subset(s)) => {
                s.len() == *k && s.iter().all(|i| i < pool) && s.windows(2).all(|w| w[0] < w[1])
            }
            _ => false,
        }
    }

    pub fn sample_uniform<R: Rng>(&self, rng: &mut R) -> Value {
        match *self {
            Dim::Real { lo, hi } => Value::Real(rng.gen_range(lo..=hi)),
            Dim::Categorical { n } => Value::Cat(rng.gen_range(0..n)),
            Dim::Subset { pool, k } => {
                let mut s = rand::seq::index::sample(rng, pool, k).into_vec();
                s.sort_unstable();
                Value::Subset(s)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TpeConfig {
    pub gamma: f64,
    pub n_startup: usize,
    pub n_candidates: usize,
}

impl Default for TpeConfig {
    fn default() -> Self {
        Self { gamma: 0.25, n_startup: 10, n_candidates: 24 }
    }
}

impl TpeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) || self.n_startup == 0 || self.n_candidates == 0 {
            return Err(Error::Config(format!(
                "need 0 < gamma < 1, n_startup >= 1, n_candidates >= 1; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Indices of good and bad observations and the threshold `H*`.
///
/// `H*` is the `ceil(gamma * n)`-th smallest objective and good trials lie
/// strictly below it. If that leaves good empty, the best trial (lowest index
/// on ties) is promoted.
pub fn split(objectives: &[f64], gamma: f64) -> (Vec<usize>, Vec<usize>, f64) {
    assert!(!objectives.is_empty());
    let mut sorted = objectives.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((gamma * objectives.len() as f64).ceil() as usize).clamp(1, objectives.len());
    let h_star = sorted[rank - 1];
    let mut good: Vec<usize> = (0..objectives.len()).filter(|&i| objectives[i] < h_star).collect();
    if good.is_empty() {
        let best = (0..objectives.len())
            .min_by(|&a, &b| objectives[a].total_cmp(&objectives[b]).then(a.cmp(&b)))
            .unwrap();
        good.push(best);
    }
    let bad = (0..objectives.len()).filter(|i| !good.contains(i)).collect();
    (good, bad, h_star)
}

/// Expected-improvement score `(gamma + (1 - gamma) * bad / good)^-1`.
pub fn ei_score(good_density: f64, bad_density: f64, gamma: f64) -> f64 {
    1.0 / (gamma + (1.0 - gamma) * bad_density / good_density)
}

#[derive(Debug, Clone)]
enum Marginal {
    Real { lo: f64, hi: f64, centers: Vec<f64>, sigma: f64 },
    Categorical { probs: Vec<f64> },
    Subset { probs: Vec<f64>, k: usize },
}

/// Independent per-dimension Parzen density fitted to a set of observations.
/// Real dimensions mix one kernel per observation with a prior kernel spanning
/// the whole range, so regions away from the observations keep some mass.
#[derive(Debug, Clone)]
pub struct Parzen {
    marginals: Vec<Option<Marginal>>,
}

impl Parzen {
    /// Fits the dimensions whose mode is [`Mode::Model`]; others are ignored.
    pub fn fit(dims: &[Dim], modes: &[Mode], observations: &[&[Value]]) -> Self {
        let marginals = dims
            .iter()
            .enumerate()
            .map(|(d, dim)| {
                if modes[d] != Mode::Model {
                    return None;
                }
                let n = observations.len();
                Some(match *dim {
                    Dim::Real { lo, hi } => {
                        let centers: Vec<f64> = observations.iter().map(|o| o[d].real()).collect();
                        let sigma = bandwidth(&centers, hi - lo);
                        Marginal::Real { lo, hi, centers, sigma }
                    }
                    Dim::Categorical { n: c } => {
                        let mut counts = vec![1.0; c];
                        for o in observations {
                            counts[o[d].cat()] += 1.0;
                        }
                        let total = (n + c) as f64;
                        Marginal::Categorical { probs: counts.into_iter().map(|x| x / total).collect() }
                    }
                    Dim::Subset { pool, k } => {
                        let mut counts = vec![1.0; pool];
                        for o in observations {
                            for &i in o[d].subset() {
                                counts[i] += 1.0;
                            }
                        }
                        let total = (n * k + pool) as f64;
                        Marginal::Subset { probs: counts.into_iter().map(|x| x / total).collect(), k }
                    }
                })
            })
            .collect();
        Self { marginals }
    }

    /// Log density summed over modelled dimensions. Subsets contribute the sum
    /// of their members' log inclusion probabilities.
    pub fn log_density(&self, values: &[Value]) -> f64 {
        self.marginals
            .iter()
            .zip(values)
            .map(|(m, v)| match m {
                None => 0.0,
                Some(Marginal::Real { lo, hi, centers, sigma }) => {
                    let x = v.real();
                    let kernel = |c: f64, s: f64| {
                        let k = StatNormal::new(c, s).unwrap();
                        k.pdf(x) / (k.cdf(*hi) - k.cdf(*lo))
                    };
                    let (mid, range) = prior(*lo, *hi);
                    let sum: f64 = centers.iter().map(|&c| kernel(c, *sigma)).sum::<f64>() + kernel(mid, range);
                    (sum / (centers.len() + 1) as f64).max(f64::MIN_POSITIVE).ln()
                }
                Some(Marginal::Categorical { probs }) => probs[v.cat()].ln(),
                Some(Marginal::Subset { probs, .. }) => v.subset().iter().map(|&i| probs[i].ln()).sum(),
            })
            .sum()
    }

    /// Draws modelled dimensions from the density; other entries of `base` are kept.
    pub fn sample<R: Rng>(&self, base: &[Value], rng: &mut R) -> Vec<Value> {
        self.marginals
            .iter()
            .zip(base)
            .map(|(m, b)| match m {
                None => b.clone(),
                Some(Marginal::Real { lo, hi, centers, sigma }) => {
                    let j = rng.gen_range(0..=centers.len());
                    let (c, s) = if j == centers.len() { prior(*lo, *hi) } else { (centers[j], *sigma) };
                    let normal = Normal::new(c, s).unwrap();
                    loop {
                        let x = normal.sample(rng);
                        if (*lo..=*hi).contains(&x) {
                            break Value::Real(x);
                        }
                    }
                }
                Some(Marginal::Categorical { probs }) => {
                    Value::Cat(WeightedIndex::new(probs).unwrap().sample(rng))
                }
                Some(Marginal::Subset { probs, k }) => {
                    let dist = WeightedIndex::new(probs).unwrap();
                    let mut s: Vec<usize> = Vec::with_capacity(*k);
                    while s.len() < *k {
                        let i = dist.sample(rng);
                        if !s.contains(&i) {
                            s.push(i);
                        }
                    }
                    s.sort_unstable();
                    Value::Subset(s)
                }
            })
            .collect()
    }
}

/// Centre and width of the broad prior kernel mixed into every real density.
fn prior(lo: f64, hi: f64) -> (f64, f64) {
    ((lo + hi) / 2.0, hi - lo)
}

/// Kernel width: Scott-style `std * n^(-1/5)`, floored at 5% of the range.
pub fn bandwidth(centers: &[f64], range: f64) -> f64 {
    let n = centers.len() as f64;
    let mean = centers.iter().sum::<f64>() / n;
    let std = (centers.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n).sqrt();
    (std * n.powf(-0.2)).max(0.05 * range)
}

fn initial<R: Rng>(dims: &[Dim], modes: &[Mode], rng: &mut R) -> Vec<Value> {
    dims.iter()
        .zip(modes)
        .map(|(d, m)| match m {
            Mode::Fixed(v) => v.clone(),
            _ => d.sample_uniform(rng),
        })
        .collect()
}

/// Next configuration given `(values, objective)` history. Uses uniform
/// sampling until `n_startup` observations exist, then the EI argmax over
/// `n_candidates` draws from the good density.
pub fn suggest<R: Rng>(
    dims: &[Dim],
    modes: &[Mode],
    history: &[(Vec<Value>, f64)],
    config: &TpeConfig,
    rng: &mut R,
) -> Vec<Value> {
    let base = initial(dims, modes, rng);
    if history.len() < config.n_startup || !modes.contains(&Mode::Model) {
        return base;
    }
    let objectives: Vec<f64> = history.iter().map(|(_, h)| *h).collect();
    let (good, bad, _) = split(&objectives, config.gamma);
    let pick = |ids: &[usize]| ids.iter().map(|&i| history[i].0.as_slice()).collect::<Vec<_>>();
    let l = Parzen::fit(dims, modes, &pick(&good));
    let g = Parzen::fit(dims, modes, &pick(&bad));
    let mut best: Option<(f64, Vec<Value>)> = None;
    for _ in 0..config.n_candidates {
        let cand = l.sample(&base, rng);
        let score = l.log_density(&cand) - g.log_density(&cand);
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, cand));
        }
    }
    best.unwrap().1
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn split_examples() {
        let h: Vec<f64> = (0..10).map(|i| (9 - i) as f64).collect();
        let (good, bad, star) = split(&h, 0.2);
        assert_eq!(star, 1.0);
        assert_eq!(good, vec![9]);
        assert_eq!(bad.len(), 9);

        let (good, bad, _) = split(&[3.0; 5], 0.25);
        assert_eq!(good, vec![0]);
        assert_eq!(bad, vec![1, 2, 3, 4]);
    }

    #[test]
    fn infinite_objectives_land_in_bad() {
        let (good, bad, _) = split(&[f64::INFINITY, 1.0, 2.0, f64::INFINITY], 0.5);
        assert_eq!(good, vec![1]);
        assert!(bad.contains(&0) && bad.contains(&3));
    }

    #[test]
    fn ei_closed_form() {
        assert_eq!(ei_score(0.3, 0.3, 0.25), 1.0);
        assert!((ei_score(1.0, 1e-12, 0.25) - 4.0).abs() < 1e-9);
        assert!(ei_score(2.0, 1.0, 0.25) > ei_score(0.5, 1.0, 0.25));
    }

    #[test]
    fn two_point_categorical_ratio() {
        // good saw category 0 three times, bad saw category 1 three times.
        let dims = [Dim::Categorical { n: 2 }];
        let modes = [Mode::Model];
        let a = [Value::Cat(0)];
        let b = [Value::Cat(1)];
        let l = Parzen::fit(&dims, &modes, &[&a, &a, &a]);
        let g = Parzen::fit(&dims, &modes, &[&b, &b, &b]);
        let r0 = (l.log_density(&a) - g.log_density(&a)).exp();
        let r1 = (l.log_density(&b) - g.log_density(&b)).exp();
        assert!((r0 - 4.0).abs() < 1e-12 && (r1 - 0.25).abs() < 1e-12);
        assert!(ei_score(r0, 1.0, 0.25) > ei_score(r1, 1.0, 0.25));
    }

    #[test]
    fn bandwidth_floor() {
        assert_eq!(bandwidth(&[0.5], 1.0), 0.05);
        assert!(bandwidth(&[0.0, 1.0], 1.0) > 0.4);
    }

    #[test]
    fn fixed_dims_are_respected() {
        let dims = [Dim::Real { lo: 0.0, hi: 1.0 }, Dim::Categorical { n: 3 }];
        let modes = [Mode::Model, Mode::Fixed(Value::Cat(2))];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut hist = vec![];
        for i in 0..30 {
            let v = suggest(&dims, &modes, &hist, &TpeConfig::default(), &mut rng);
            assert_eq!(v[1], Value::Cat(2));
            hist.push((v, i as f64));
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(TpeConfig { gamma: 1.0, ..Default::default() }.validate().is_err());
        assert!(TpeConfig { n_startup: 0, ..Default::default() }.validate().is_err());
        assert!(Dim::Subset { pool: 3, k: 4 }.validate().is_err());
        assert!(Dim::Real { lo: 1.0, hi: 1.0 }.validate().is_err());
    }
}
