//! Discretized Rayleigh-fading channel models.
//!
//! The instantaneous SNR of a Rayleigh envelope is exponentially distributed
//! around the mean SNR given by the path-loss law. A [`ChannelModel`] cuts that
//! distribution into `K` equal-probability bins, represents each bin by its
//! conditional mean, and maps it to an achievable rate with a 3 dB gap to the
//! Shannon bound.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Radio parameters shared by every user of a cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub bandwidth_hz: f64,
    /// Transmit power spectral density, W/MHz.
    pub tx_psd: f64,
    /// Noise power spectral density, W/MHz.
    pub noise_psd: f64,
    pub path_loss_exponent: f64,
    pub slot_s: f64,
    pub doppler_hz: f64,
    pub num_states: usize,
}

impl ChannelConfig {
    /// LTE 1.4 MHz small cell: 0.1 W and 1e-8 W over 1.4 MHz, urban path-loss
    /// exponent 3, 10 ms slots, 5 Hz Doppler (ITU Pedestrian A).
    pub fn table_one() -> Self {
        ChannelConfig {
            bandwidth_hz: 1.4e6,
            tx_psd: 0.1 / 1.4,
            noise_psd: 1e-8 / 1.4,
            path_loss_exponent: 3.0,
            slot_s: 0.01,
            doppler_hz: 5.0,
            num_states: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("bandwidth_hz", self.bandwidth_hz),
            ("tx_psd", self.tx_psd),
            ("noise_psd", self.noise_psd),
            ("slot_s", self.slot_s),
            ("doppler_hz", self.doppler_hz),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("channel.{name} must be positive, got {v}")));
            }
        }
        if !(self.path_loss_exponent >= 0.0 && self.path_loss_exponent.is_finite()) {
            return Err(invalid(format!(
                "channel.path_loss_exponent must be non-negative, got {}",
                self.path_loss_exponent
            )));
        }
        if self.num_states == 0 {
            return Err(invalid("channel.num_states must be at least 1"));
        }
        Ok(())
    }
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self::table_one()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelState {
    pub probability: f64,
    /// Linear SNR representing the state.
    pub snr: f64,
    pub rate_bps: f64,
}

/// Stationary law of one user's channel: probabilities `p^k` and rates `R^k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    pub distance_m: f64,
    states: Vec<ChannelState>,
    cdf: Vec<f64>,
    mean_rate: f64,
}

impl ChannelModel {
    /// Builds a model from `(probability, snr)` pairs; rates follow from
    /// [`rate_from_snr`].
    pub fn from_states(distance_m: f64, bandwidth_hz: f64, states: &[(f64, f64)]) -> Result<Self> {
        if states.is_empty() {
            return Err(invalid("a channel model needs at least one state"));
        }
        let mut out = Vec::with_capacity(states.len());
        for &(probability, snr) in states {
            if !(0.0..=1.0).contains(&probability) {
                return Err(invalid(format!("state probability {probability} outside [0, 1]")));
            }
            out.push(ChannelState {
                probability,
                snr,
                rate_bps: rate_from_snr(bandwidth_hz, snr)?,
            });
        }
        let total: f64 = out.iter().map(|s| s.probability).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid(format!("state probabilities sum to {total}, expected 1")));
        }
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = out
            .iter()
            .map(|s| {
                acc += s.probability;
                acc
            })
            .collect();
        *cdf.last_mut().expect("non-empty") = 1.0;
        let mean_rate = out.iter().map(|s| s.probability * s.rate_bps).sum();
        Ok(ChannelModel {
            distance_m,
            states: out,
            cdf,
            mean_rate,
        })
    }

    /// Two-state on/off channel: rate 0 with probability `1 - p_on`, otherwise
    /// the rate supported by `on_snr`.
    pub fn on_off(bandwidth_hz: f64, p_on: f64, on_snr: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_on) {
            return Err(invalid(format!("on probability {p_on} outside [0, 1]")));
        }
        Self::from_states(0.0, bandwidth_hz, &[(1.0 - p_on, 0.0), (p_on, on_snr)])
    }

    pub fn states(&self) -> &[ChannelState] {
        &self.states
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    #[inline]
    pub fn rate(&self, state: usize) -> f64 {
        self.states[state].rate_bps
    }

    #[inline]
    pub fn probability(&self, state: usize) -> f64 {
        self.states[state].probability
    }

    /// `Σ_k p^k R^k`, the rate a user sees when served in every slot.
    pub fn mean_rate(&self) -> f64 {
        self.mean_rate
    }

    pub fn mean_snr(&self) -> f64 {
        self.states.iter().map(|s| s.probability * s.snr).sum()
    }

    /// Inverse-CDF draw from the stationary law.
    #[inline]
    pub fn sample_stationary<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.cdf.iter().position(|&c| u < c).unwrap_or(self.cdf.len() - 1)
    }
}

/// Mean received SNR at `distance_m`, linear scale.
pub fn mean_snr(config: &ChannelConfig, distance_m: f64) -> Result<f64> {
    if !(distance_m > 0.0 && distance_m.is_finite()) {
        return Err(invalid(format!("distance must be positive, got {distance_m}")));
    }
    Ok(config.tx_psd / config.noise_psd * distance_m.powf(-config.path_loss_exponent))
}

/// Achievable rate in bits/s: `B · log2(1 + snr / 2)`.
pub fn rate_from_snr(bandwidth_hz: f64, snr: f64) -> Result<f64> {
    if !(snr >= 0.0) {
        return Err(invalid(format!("snr must be non-negative, got {snr}")));
    }
    Ok(bandwidth_hz * (1.0 + snr / 2.0).log2())
}

/// Cuts Exp(mean_snr) into `num_states` equal-probability bins, each
/// represented by its conditional mean.
pub fn discretize(config: &ChannelConfig, distance_m: f64) -> Result<ChannelModel> {
    config.validate()?;
    let mean = mean_snr(config, distance_m)?;
    let k = config.num_states;
    let kf = k as f64;
    // Bin b covers [lo, hi) with survival e^{-lo/m} = 1 - b/K, so
    // ∫_lo^hi x e^{-x/m}/m dx = (lo + m)(1 - b/K) - (hi + m)(1 - (b+1)/K).
    let edge = |b: usize| -> f64 {
        if b == 0 {
            0.0
        } else {
            -mean * (1.0 - b as f64 / kf).ln()
        }
    };
    let mut states = Vec::with_capacity(k);
    for b in 0..k {
        let lo = edge(b);
        let head = (lo + mean) * (1.0 - b as f64 / kf);
        let tail = if b + 1 == k {
            0.0
        } else {
            (edge(b + 1) + mean) * (1.0 - (b + 1) as f64 / kf)
        };
        states.push((1.0 / kf, kf * (head - tail)));
    }
    ChannelModel::from_states(distance_m, config.bandwidth_hz, &states)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FadingKind {
    #[default]
    Iid,
    GaussMarkov,
}

/// Per-slot evolution of a channel state index.
///
/// The Gauss-Markov variant keeps the previous state with probability
/// `correlation` and otherwise redraws from the stationary law, so the
/// model's `p^k` stay stationary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FadingProcess {
    pub kind: FadingKind,
    pub correlation: f64,
}

impl FadingProcess {
    pub fn iid() -> Self {
        FadingProcess {
            kind: FadingKind::Iid,
            correlation: 0.0,
        }
    }

    pub fn gauss_markov(correlation: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&correlation) {
            return Err(invalid(format!("correlation {correlation} outside [0, 1)")));
        }
        Ok(FadingProcess {
            kind: FadingKind::GaussMarkov,
            correlation,
        })
    }

    /// Stay probability `exp(-2π f_d T)`.
    pub fn from_config(kind: FadingKind, config: &ChannelConfig) -> Result<Self> {
        match kind {
            FadingKind::Iid => Ok(Self::iid()),
            FadingKind::GaussMarkov => {
                Self::gauss_markov((-2.0 * std::f64::consts::PI * config.doppler_hz * config.slot_s).exp())
            }
        }
    }

    fn stay_probability(&self) -> f64 {
        match self.kind {
            FadingKind::Iid => 0.0,
            FadingKind::GaussMarkov => self.correlation,
        }
    }

    #[inline]
    pub fn next_state<R: Rng + ?Sized>(&self, model: &ChannelModel, current: usize, rng: &mut R) -> usize {
        self.advance(model, current, 1, rng)
    }

    /// State after `slots` steps, drawn in one shot.
    #[inline]
    pub fn advance<R: Rng + ?Sized>(
        &self,
        model: &ChannelModel,
        current: usize,
        slots: u64,
        rng: &mut R,
    ) -> usize {
        let stay = self.stay_probability();
        if stay > 0.0 && slots > 0 {
            let keep = if slots == 1 { stay } else { stay.powf(slots as f64) };
            if rng.random::<f64>() < keep {
                return current;
            }
        }
        model.sample_stationary(rng)
    }
}
