//! Deterministic DDIM updates over a cumulative-alpha schedule.

use alloc::vec::Vec;

use crate::array::RealArray;
use crate::error::{Error, Result};

/// Cumulative signal rates `ᾱ_0 = 1 > ᾱ_1 > … > ᾱ_S > 0` and the training
/// timestep each index corresponds to.
#[derive(Debug, Clone, PartialEq)]
pub struct DdimSchedule {
    alpha_bars: Vec<f64>,
    timesteps: Vec<usize>,
}

impl DdimSchedule {
    // Negated comparisons so that NaN entries are rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn new(alpha_bars: Vec<f64>, timesteps: Vec<usize>) -> Result<Self> {
        if alpha_bars.len() < 2 {
            return Err(Error::config("schedule needs at least one step"));
        }
        if timesteps.len() != alpha_bars.len() {
            return Err(Error::config("one timestep per alpha_bar entry required"));
        }
        if alpha_bars[0] != 1.0 {
            return Err(Error::config("alpha_bars[0] must equal 1"));
        }
        if alpha_bars.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::config("alpha_bars must be strictly decreasing"));
        }
        if !(alpha_bars[alpha_bars.len() - 1] > 0.0) {
            return Err(Error::config("alpha_bars must stay positive"));
        }
        Ok(Self {
            alpha_bars,
            timesteps,
        })
    }

    /// `steps` evenly spaced indices into the usual 1000-step scaled-linear
    /// training schedule (β from 0.00085 to 0.012).
    pub fn scaled_linear(steps: usize) -> Result<Self> {
        const TRAIN_STEPS: usize = 1000;
        if steps == 0 || steps > TRAIN_STEPS {
            return Err(Error::config("steps must be in 1..=1000"));
        }
        let (b0, b1) = (libm::sqrt(0.00085), libm::sqrt(0.012));
        let mut cumulative = Vec::with_capacity(TRAIN_STEPS);
        let mut acc = 1.0;
        for i in 0..TRAIN_STEPS {
            let s = b0 + (b1 - b0) * i as f64 / (TRAIN_STEPS - 1) as f64;
            acc *= 1.0 - s * s;
            cumulative.push(acc);
        }
        let ratio = TRAIN_STEPS / steps;
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        let mut timesteps = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        timesteps.push(0);
        for k in 1..=steps {
            let t = k * ratio - 1;
            alpha_bars.push(cumulative[t]);
            timesteps.push(t + 1);
        }
        Self::new(alpha_bars, timesteps)
    }

    /// Number of denoising steps `S`.
    pub fn num_steps(&self) -> usize {
        self.alpha_bars.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or(Error::OutOfRange {
            what: "timestep index",
            index: t,
            bound: self.num_steps(),
        })
    }

    pub fn timestep(&self, t: usize) -> Result<usize> {
        self.timesteps.get(t).copied().ok_or(Error::OutOfRange {
            what: "timestep index",
            index: t,
            bound: self.num_steps(),
        })
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// A latent together with the schedule index it lives at.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub latent: RealArray,
    pub timestep_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `t → t−1`
    Denoise,
    /// `t → t+1`
    Invert,
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·noise`
pub fn forward_noise(x0: &RealArray, t: usize, noise: &RealArray, s: &DdimSchedule) -> Result<RealArray> {
    if noise.shape() != x0.shape() {
        return Err(Error::shape("forward_noise", x0.shape(), noise.shape()));
    }
    let a = s.alpha_bar(t)?;
    let (sa, sn) = (libm::sqrt(a), libm::sqrt(1.0 - a));
    x0.zip_map(noise, |x, n| sa * x + sn * n)
}

/// One η=0 DDIM update. Both directions predict `x̂0` from the current latent
/// and `eps`, then re-noise it to the neighbouring index with the same `eps`.
pub fn ddim_step(state: &LatentState, eps: &RealArray, s: &DdimSchedule, direction: Direction) -> Result<LatentState> {
    if eps.shape() != state.latent.shape() {
        return Err(Error::shape("ddim_step", state.latent.shape(), eps.shape()));
    }
    let t = state.timestep_index;
    let next = match direction {
        Direction::Denoise => t.checked_sub(1).ok_or(Error::OutOfRange {
            what: "denoise from timestep index",
            index: t,
            bound: s.num_steps(),
        })?,
        Direction::Invert if t < s.num_steps() => t + 1,
        Direction::Invert => {
            return Err(Error::OutOfRange {
                what: "invert from timestep index",
                index: t,
                bound: s.num_steps(),
            })
        }
    };
    let a_cur = s.alpha_bar(t)?;
    let a_next = s.alpha_bar(next)?;
    let (sa_cur, sn_cur) = (libm::sqrt(a_cur), libm::sqrt(1.0 - a_cur));
    let (sa_next, sn_next) = (libm::sqrt(a_next), libm::sqrt(1.0 - a_next));
    let latent = state.latent.zip_map(eps, |x, e| {
        let x0 = (x - sn_cur * e) / sa_cur;
        sa_next * x0 + sn_next * e
    })?;
    Ok(LatentState {
        latent,
        timestep_index: next,
    })
}
