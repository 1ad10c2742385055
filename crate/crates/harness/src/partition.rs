//! Splitting an example pool across clients.

use std::fmt;
use std::str::FromStr;

use fedsim_core::rng::{self, Purpose};
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::{Error, Result};

/// Thirteen client sizes summing to 242 with a largest client of 77.
///
/// Only the total and the largest share are known exactly; the rest is an
/// approximation of a strongly skewed hospital-size distribution.
pub const DEFAULT_SHARES: [usize; 13] = [77, 30, 24, 20, 16, 14, 12, 11, 10, 9, 8, 6, 5];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionKind {
    Balanced,
    Powerlaw,
    Explicit,
}

impl fmt::Display for PartitionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PartitionKind::Balanced => "balanced",
            PartitionKind::Powerlaw => "powerlaw",
            PartitionKind::Explicit => "explicit",
        })
    }
}

impl FromStr for PartitionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balanced" | "iid" => Ok(PartitionKind::Balanced),
            "powerlaw" => Ok(PartitionKind::Powerlaw),
            "explicit" => Ok(PartitionKind::Explicit),
            other => Err(Error::Config(format!("unknown partition `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PartitionSpec {
    /// Sizes differ by at most one.
    Balanced,
    /// Sizes fall off as `rank^-α`, with α chosen so the largest client
    /// holds `max_share` of the pool.
    Powerlaw { max_share: f64 },
    /// Sizes proportional to the list, rescaled to the pool if needed.
    Explicit(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Partition {
    pub client_shares: Vec<usize>,
    /// Pool indices per client, ascending.
    pub assignments: Vec<Vec<usize>>,
}

impl Partition {
    pub fn clients(&self) -> usize {
        self.client_shares.len()
    }

    pub fn total(&self) -> usize {
        self.client_shares.iter().sum()
    }

    pub fn max_fraction(&self) -> f64 {
        let max = self.client_shares.iter().copied().max().unwrap_or(0);
        max as f64 / self.total().max(1) as f64
    }
}

/// Splits `0..n` into `k` disjoint, covering index sets.
pub fn make_partition(n: usize, k: usize, spec: &PartitionSpec, seed: u64) -> Result<Partition> {
    if k == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    if n < k {
        return Err(Error::Partition(format!("{n} examples cannot cover {k} clients")));
    }
    let shares = match spec {
        PartitionSpec::Balanced => (0..k).map(|i| n / k + usize::from(i < n % k)).collect(),
        PartitionSpec::Powerlaw { max_share } => {
            let alpha = powerlaw_exponent(k, *max_share)?;
            let weights: Vec<f64> = (1..=k).map(|r| (r as f64).powf(-alpha)).collect();
            apportion(n, &weights)
        }
        PartitionSpec::Explicit(list) => {
            if list.len() != k {
                return Err(Error::Partition(format!(
                    "{} shares listed for {k} clients",
                    list.len()
                )));
            }
            if list.contains(&0) {
                return Err(Error::Partition("explicit shares must be positive".into()));
            }
            if list.iter().sum::<usize>() == n {
                list.clone()
            } else {
                apportion(n, &list.iter().map(|&s| s as f64).collect::<Vec<_>>())
            }
        }
    };

    let mut order: Vec<usize> = (0..n).collect();
    if k > 1 {
        order.shuffle(&mut rng::stream(seed, Purpose::Partition, &[]));
    }
    let mut assignments = Vec::with_capacity(k);
    let mut start = 0;
    for &s in &shares {
        let mut idx = order[start..start + s].to_vec();
        idx.sort_unstable();
        assignments.push(idx);
        start += s;
    }
    Ok(Partition {
        client_shares: shares,
        assignments,
    })
}

fn powerlaw_exponent(k: usize, max_share: f64) -> Result<f64> {
    if k == 1 {
        return Ok(0.0);
    }
    let floor = 1.0 / k as f64;
    if !(max_share >= floor && max_share < 1.0) {
        return Err(Error::Partition(format!(
            "largest share {max_share} must lie in [{floor}, 1) for {k} clients"
        )));
    }
    let top = |alpha: f64| 1.0 / (1..=k).map(|r| (r as f64).powf(-alpha)).sum::<f64>();
    let (mut lo, mut hi) = (0.0, 64.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if top(mid) < max_share {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Largest-remainder rounding of `n·w/Σw`, then topping every client up
/// to one example at the expense of the largest.
fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut shares: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut left = n - shares.iter().sum::<usize>();
    let mut by_remainder: Vec<usize> = (0..weights.len()).collect();
    by_remainder.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    for &i in by_remainder.iter().cycle() {
        if left == 0 {
            break;
        }
        shares[i] += 1;
        left -= 1;
    }
    for i in 0..shares.len() {
        if shares[i] == 0 {
            let donor = (0..shares.len())
                .max_by_key(|&j| (shares[j], usize::MAX - j))
                .expect("non-empty");
            shares[donor] -= 1;
            shares[i] = 1;
        }
    }
    shares
}
