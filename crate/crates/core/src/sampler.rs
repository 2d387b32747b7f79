//! Per-round client selection.
//!
//! A static policy draws a fixed fraction of the fleet every round. A dynamic
//! policy starts from the full fleet and decays the participant count as
//! `M * exp(-phi * t)`, never going below a floor of five clients (or the
//! whole fleet, when it is smaller).

use rand::seq::index;

use crate::error::{Error, Result};
use crate::seed;

pub const DEFAULT_FLOOR: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplingPolicy {
    Static { fraction: f64 },
    Dynamic { phi: f64, floor: usize },
}

impl SamplingPolicy {
    pub fn dynamic(phi: f64) -> Self {
        SamplingPolicy::Dynamic {
            phi,
            floor: DEFAULT_FLOOR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SamplingPolicy::Static { fraction } if !(fraction > 0.0 && fraction <= 1.0) => Err(
                Error::invalid(format!("static fraction {fraction} outside (0, 1]")),
            ),
            SamplingPolicy::Dynamic { phi, .. } if !(phi.is_finite() && phi >= 0.0) => Err(
                Error::invalid(format!("decay rate {phi} must be finite and >= 0")),
            ),
            SamplingPolicy::Dynamic { floor: 0, .. } => Err(Error::invalid("floor must be >= 1")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundContext {
    /// 0-based round index.
    pub t: usize,
    pub num_clients: usize,
    pub seed: u64,
}

/// Number of participants in round `ctx.t`.
pub fn sample_size(policy: &SamplingPolicy, ctx: &RoundContext) -> usize {
    let m = ctx.num_clients;
    if m == 0 {
        return 0;
    }
    match *policy {
        SamplingPolicy::Static { fraction } => ((fraction * m as f64).round() as usize).clamp(1, m),
        SamplingPolicy::Dynamic { phi, floor } => {
            // f64::round rounds half away from zero.
            let raw = (m as f64 * (-phi * ctx.t as f64).exp()).round() as usize;
            raw.clamp(floor.min(m), m)
        }
    }
}

/// Uniform draw without replacement, sorted ascending. Deterministic in
/// `(ctx.seed, ctx.t)`.
pub fn sample_clients(policy: &SamplingPolicy, ctx: &RoundContext) -> Vec<usize> {
    let size = sample_size(policy, ctx);
    if size == ctx.num_clients {
        return (0..size).collect();
    }
    let mut rng = seed::rng(seed::derive(
        ctx.seed,
        &[seed::domain::SAMPLER, ctx.t as u64],
    ));
    let mut ids = index::sample(&mut rng, ctx.num_clients, size).into_vec();
    ids.sort_unstable();
    ids
}

/// Total participant slots over rounds `0..rounds`.
pub fn cumulative_participants(
    policy: &SamplingPolicy,
    num_clients: usize,
    rounds: usize,
) -> usize {
    (0..rounds)
        .map(|t| {
            sample_size(
                policy,
                &RoundContext {
                    t,
                    num_clients,
                    seed: 0,
                },
            )
        })
        .sum()
}
