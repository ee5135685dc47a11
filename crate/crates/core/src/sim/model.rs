//! Seeded layered velocity network standing in for a diffusion transformer.
//!
//! Each group maps its input through a structured random orthogonal mixing
//! matrix scaled by `mixing` (so its spectral norm is exactly `mixing ≤ 1`),
//! an optional squashing nonlinearity, and a time modulation:
//!
//! ```text
//! h_g = act(mixing_g · Q_g · h_{g-1}) ⊙ (1 + gain_g · m_g(σ)) + bias_g · m_g(σ) · u_g
//! v   = readout_scale · Q_out · h_{G-1}
//! ```
//!
//! with `h_{-1} = x`. `m_g` is the group's time profile and `u_g` a seeded
//! pattern vector.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::LatentState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    /// Disables squashing; the model becomes affine in its input.
    Identity,
}

/// Scalar time modulation `m(σ)` of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeProfile {
    /// `m = 0`.
    Constant,
    /// `amplitude · exp(-rate · (1 - σ))`.
    SmoothDecay { amplitude: f64, rate: f64 },
    /// `amplitude · sin(2π (1 - σ) / period + phase)`.
    Oscillatory {
        amplitude: f64,
        period: f64,
        #[serde(default)]
        phase: f64,
    },
    /// Narrow Gaussian bumps centred on the sigma level of each listed step
    /// of a linear `reference_steps` schedule. `width` is in steps.
    SpikeTrain {
        amplitude: f64,
        steps: Vec<usize>,
        #[serde(default = "default_spike_width")]
        width: f64,
    },
    /// `offset + slope · σ`; makes a mixing-free group affine in sigma.
    Ramp { slope: f64, offset: f64 },
}

fn default_spike_width() -> f64 {
    0.25
}

impl TimeProfile {
    pub fn value(&self, sigma: f64, reference_steps: usize) -> f64 {
        let progress = 1.0 - sigma;
        match self {
            TimeProfile::Constant => 0.0,
            TimeProfile::SmoothDecay { amplitude, rate } => amplitude * (-rate * progress).exp(),
            TimeProfile::Oscillatory {
                amplitude,
                period,
                phase,
            } => amplitude * (std::f64::consts::TAU * progress / period + phase).sin(),
            TimeProfile::SpikeTrain {
                amplitude,
                steps,
                width,
            } => {
                let n = reference_steps as f64;
                let w = width / n;
                amplitude
                    * steps
                        .iter()
                        .map(|&k| {
                            let centre = 1.0 - k as f64 / n;
                            (-((sigma - centre) / w).powi(2)).exp()
                        })
                        .sum::<f64>()
            }
            TimeProfile::Ramp { slope, offset } => offset + slope * sigma,
        }
    }

    /// Upper bound on `|m(σ)|` for `σ ∈ [0, 1]`.
    pub fn bound(&self) -> f64 {
        match self {
            TimeProfile::Constant => 0.0,
            TimeProfile::SmoothDecay { amplitude, rate } => amplitude.abs() * (-rate).exp().max(1.0),
            TimeProfile::Oscillatory { amplitude, .. } => amplitude.abs(),
            TimeProfile::SpikeTrain {
                amplitude, steps, ..
            } => amplitude.abs() * steps.len() as f64,
            TimeProfile::Ramp { slope, offset } => offset.abs() + slope.abs(),
        }
    }

    fn validate(&self) -> Result<()> {
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        let ok = match self {
            TimeProfile::Constant => true,
            TimeProfile::SmoothDecay { amplitude, rate } => finite(&[*amplitude, *rate]),
            TimeProfile::Oscillatory {
                amplitude,
                period,
                phase,
            } => finite(&[*amplitude, *period, *phase]) && *period > 0.0,
            TimeProfile::SpikeTrain {
                amplitude, width, ..
            } => finite(&[*amplitude, *width]) && *width > 0.0,
            TimeProfile::Ramp { slope, offset } => finite(&[*slope, *offset]),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid time profile {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupConfig {
    /// Transformer layers this group stands for; drives the default cost split.
    pub layers: usize,
    /// Spectral norm of the group's mixing matrix, in `[0, 1]`.
    pub mixing: f64,
    pub gain: f64,
    pub bias: f64,
    pub profile: TimeProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub seed: u64,
    pub state_dim: usize,
    /// Image shape used by the metrics; defaults to a square when possible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_shape: Option<Vec<usize>>,
    pub activation: Activation,
    pub readout_scale: f64,
    /// Step count the spike-train profiles are laid out on.
    pub reference_steps: usize,
    #[serde(default = "default_reflectors")]
    pub reflectors: usize,
    pub groups: Vec<GroupConfig>,
}

fn default_reflectors() -> usize {
    4
}

impl ModelConfig {
    /// The three-regime desk-scale model: smooth shallow group, oscillating
    /// middle group, spiking deep group.
    pub fn heterogeneous() -> Self {
        Self {
            seed: 2026,
            state_dim: 1024,
            latent_shape: None,
            activation: Activation::Tanh,
            readout_scale: 1.0,
            reference_steps: 50,
            reflectors: default_reflectors(),
            groups: vec![
                GroupConfig {
                    layers: 20,
                    mixing: 0.9,
                    gain: 0.1,
                    bias: 0.3,
                    profile: TimeProfile::SmoothDecay {
                        amplitude: 1.0,
                        rate: 3.0,
                    },
                },
                GroupConfig {
                    layers: 20,
                    mixing: 0.9,
                    gain: 0.5,
                    bias: 0.2,
                    profile: TimeProfile::Oscillatory {
                        amplitude: 1.0,
                        period: 0.5,
                        phase: 0.0,
                    },
                },
                GroupConfig {
                    layers: 20,
                    mixing: 0.5,
                    gain: 0.2,
                    bias: 2.0,
                    profile: TimeProfile::SpikeTrain {
                        amplitude: 1.0,
                        steps: vec![17, 33],
                        width: default_spike_width(),
                    },
                },
            ],
        }
    }

    /// Every group's output is affine in sigma and independent of `x`:
    /// the first group ignores its input and the rest are linear.
    pub fn affine_in_sigma(state_dim: usize, num_groups: usize, seed: u64) -> Self {
        let groups = (0..num_groups)
            .map(|g| GroupConfig {
                layers: 1,
                mixing: if g == 0 { 0.0 } else { 0.8 },
                gain: 0.0,
                bias: 1.0,
                profile: TimeProfile::Ramp {
                    slope: 0.5 + 0.25 * g as f64,
                    offset: 0.1 * g as f64,
                },
            })
            .collect();
        Self {
            seed,
            state_dim,
            latent_shape: None,
            activation: Activation::Identity,
            readout_scale: 1.0,
            reference_steps: 50,
            reflectors: default_reflectors(),
            groups,
        }
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn image_shape(&self) -> Vec<usize> {
        if let Some(shape) = &self.latent_shape {
            return shape.clone();
        }
        let side = (self.state_dim as f64).sqrt().round() as usize;
        if side * side == self.state_dim {
            vec![side, side]
        } else {
            vec![self.state_dim]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 {
            return Err(Error::config("state_dim must be positive"));
        }
        if self.groups.is_empty() {
            return Err(Error::config("the model needs at least one group"));
        }
        if self.reference_steps == 0 {
            return Err(Error::config("reference_steps must be positive"));
        }
        if !self.readout_scale.is_finite() {
            return Err(Error::config("readout_scale must be finite"));
        }
        if let Some(shape) = &self.latent_shape {
            if shape.iter().product::<usize>() != self.state_dim {
                return Err(Error::config(format!(
                    "latent_shape {shape:?} does not hold {} values",
                    self.state_dim
                )));
            }
        }
        for (g, group) in self.groups.iter().enumerate() {
            if group.layers == 0 {
                return Err(Error::config(format!("group {g} has no layers")));
            }
            if !(0.0..=1.0).contains(&group.mixing) {
                return Err(Error::config(format!(
                    "group {g}: mixing {} outside [0, 1]",
                    group.mixing
                )));
            }
            if !group.gain.is_finite() || !group.bias.is_finite() {
                return Err(Error::config(format!("group {g}: non-finite gain or bias")));
            }
            group.profile.validate()?;
        }
        Ok(())
    }
}

/// Signed permutation times a product of Householder reflections; orthogonal,
/// applied in `O(n · reflectors)`.
#[derive(Debug, Clone)]
struct OrthoMix {
    perm: Vec<usize>,
    signs: Vec<f64>,
    reflectors: Vec<Vec<f64>>,
}

impl OrthoMix {
    fn sample(n: usize, reflectors: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        let signs = (0..n)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let reflectors = (0..reflectors)
            .filter_map(|_| {
                let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                (norm > 0.0).then(|| v.into_iter().map(|x| x / norm).collect())
            })
            .collect();
        Self {
            perm,
            signs,
            reflectors,
        }
    }

    fn reflect(u: &[f64], z: &mut [f64]) {
        let dot: f64 = u.iter().zip(z.iter()).map(|(a, b)| a * b).sum();
        for (zi, ui) in z.iter_mut().zip(u) {
            *zi -= 2.0 * dot * ui;
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut z = x.to_vec();
        for u in self.reflectors.iter().rev() {
            Self::reflect(u, &mut z);
        }
        self.perm
            .iter()
            .zip(&self.signs)
            .map(|(&p, &s)| s * z[p])
            .collect()
    }

    fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; y.len()];
        for ((&p, &s), &yi) in self.perm.iter().zip(&self.signs).zip(y) {
            z[p] = s * yi;
        }
        for u in &self.reflectors {
            Self::reflect(u, &mut z);
        }
        z
    }
}

#[derive(Debug, Clone)]
struct GroupLayer {
    config: GroupConfig,
    mix: OrthoMix,
    pattern: Vec<f64>,
}

/// Output of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub velocity: LatentState,
    /// All group-boundary hidden states in order, when capture was requested.
    pub group_outputs: Option<Vec<LatentState>>,
}

#[derive(Debug, Clone)]
pub struct SyntheticModel {
    config: ModelConfig,
    layers: Vec<GroupLayer>,
    readout: OrthoMix,
}

impl SyntheticModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let n = config.state_dim;
        let g_count = config.groups.len();
        let layers = config
            .groups
            .iter()
            .enumerate()
            .map(|(g, gc)| {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(g as u64 + 1);
                let mix = OrthoMix::sample(n, config.reflectors, &mut rng);
                let pattern = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                GroupLayer {
                    config: gc.clone(),
                    mix,
                    pattern,
                }
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(g_count as u64 + 1);
        let readout = OrthoMix::sample(n, config.reflectors, &mut rng);
        Ok(Self {
            config,
            layers,
            readout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_groups(&self) -> usize {
        self.layers.len()
    }

    pub fn state_dim(&self) -> usize {
        self.config.state_dim
    }

    pub fn image_shape(&self) -> Vec<usize> {
        self.config.image_shape()
    }

    /// Default per-group cost split: proportional to layer counts.
    pub fn layer_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.config.layers).collect()
    }

    pub fn modulation(&self, group: usize, sigma: f64) -> f64 {
        self.layers[group]
            .config
            .profile
            .value(sigma, self.config.reference_steps)
    }

    fn check_input(&self, x: &LatentState) -> Result<()> {
        if x.len() != self.config.state_dim {
            return Err(Error::config(format!(
                "state has {} values, model expects {}",
                x.len(),
                self.config.state_dim
            )));
        }
        Ok(())
    }

    /// Evaluate a single group on its input.
    pub fn group_forward(&self, group: usize, input: &LatentState, sigma: f64) -> Result<LatentState> {
        self.check_input(input)?;
        let layer = self
            .layers
            .get(group)
            .ok_or_else(|| Error::config(format!("model has no group {group}")))?;
        let cfg = &layer.config;
        let m = cfg.profile.value(sigma, self.config.reference_steps);
        let scale = 1.0 + cfg.gain * m;
        let shift = cfg.bias * m;
        let mixed = layer.mix.apply(input.data());
        let out: Vec<f64> = mixed
            .iter()
            .zip(&layer.pattern)
            .map(|(&z, &u)| {
                let z = cfg.mixing * z;
                let a = match self.config.activation {
                    Activation::Tanh => z.tanh(),
                    Activation::Identity => z,
                };
                a * scale + shift * u
            })
            .collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                group: Some(group),
                step: None,
            });
        }
        Ok(LatentState::from_parts_unchecked(out, input.shape().to_vec()))
    }

    /// Linear read-out from the last group's hidden state to velocity.
    pub fn readout(&self, hidden: &LatentState) -> Result<LatentState> {
        self.check_input(hidden)?;
        let v: Vec<f64> = self
            .readout
            .apply(hidden.data())
            .into_iter()
            .map(|x| self.config.readout_scale * x)
            .collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                group: None,
                step: None,
            });
        }
        Ok(LatentState::from_parts_unchecked(v, hidden.shape().to_vec()))
    }

    /// Groups `first..G` followed by the read-out. `first = 0` is the whole
    /// network; `first = G` is the read-out alone.
    pub fn forward_from(&self, first: usize, input: &LatentState, sigma: f64) -> Result<LatentState> {
        let mut h = input.clone();
        for g in first..self.num_groups() {
            h = self.group_forward(g, &h, sigma)?;
        }
        self.readout(&h)
    }

    pub fn forward(&self, x: &LatentState, sigma: f64, capture: bool) -> Result<Forward> {
        self.check_input(x)?;
        let mut outputs = capture.then(|| Vec::with_capacity(self.num_groups()));
        let mut h = x.clone();
        for g in 0..self.num_groups() {
            h = self.group_forward(g, &h, sigma)?;
            if let Some(outs) = outputs.as_mut() {
                outs.push(h.clone());
            }
        }
        Ok(Forward {
            velocity: self.readout(&h)?,
            group_outputs: outputs,
        })
    }

    /// Transpose of the linear part of `forward_from(first, ..)` for
    /// identity-activation models. Used to cross-check Lipschitz estimates.
    pub fn linear_downstream_transpose(
        &self,
        first: usize,
        cotangent: &LatentState,
        sigma: f64,
    ) -> Result<LatentState> {
        if self.config.activation != Activation::Identity {
            return Err(Error::config(
                "downstream transpose is only defined for identity activation",
            ));
        }
        self.check_input(cotangent)?;
        let mut y: Vec<f64> = self
            .readout
            .apply_transpose(cotangent.data())
            .into_iter()
            .map(|v| v * self.config.readout_scale)
            .collect();
        for g in (first..self.num_groups()).rev() {
            let cfg = &self.layers[g].config;
            let scale = cfg.mixing * (1.0 + cfg.gain * self.modulation(g, sigma));
            y = self.layers[g]
                .mix
                .apply_transpose(&y)
                .into_iter()
                .map(|v| v * scale)
                .collect();
        }
        Ok(LatentState::from_parts_unchecked(y, cotangent.shape().to_vec()))
    }

    /// Bound on `max_i |v_i|` for `σ ∈ [0, 1]`; `None` when the activation
    /// does not squash.
    pub fn velocity_bound(&self) -> Option<f64> {
        if self.config.activation != Activation::Tanh {
            return None;
        }
        let last = &self.layers.last()?.config;
        let m = last.profile.bound();
        let pattern_max = self
            .layers
            .last()?
            .pattern
            .iter()
            .fold(0.0f64, |a, b| a.max(b.abs()));
        let hidden_max = (1.0 + last.gain.abs() * m) + last.bias.abs() * m * pattern_max;
        Some(self.config.readout_scale.abs() * (self.config.state_dim as f64).sqrt() * hidden_max)
    }
}
