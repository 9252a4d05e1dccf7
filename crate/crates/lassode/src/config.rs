//! Model/training configuration, presets, and ablation toggles.
//!
//! `full_scale` is the reference configuration; `desk_scale` is the small
//! CPU preset used by CI and the CLI default; `toy` is the gradient-check
//! configuration.

use serde::{Deserialize, Serialize};

use crate::error::LassError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationToggles {
    /// joint-channel GRU input instead of channel independence
    pub channel_dependent_encoder: bool,
    /// per-segment MLP embedding with additive time fusion instead of
    /// GRU summary + FiLM modulation
    pub mlp_tokenizer: bool,
    /// Fourier-feature time code instead of the RBF bank
    pub fourier_time: bool,
    /// rotary time code instead of the RBF bank
    pub rope_time: bool,
    pub no_channel_encoding: bool,
    pub no_csh: bool,
    /// dense single feed-forward instead of the sparse expert mixture
    pub single_mlp_ffn: bool,
    /// nonlinear MLP latent field instead of the token-wise affine field
    pub mlp_ode_field: bool,
}

impl AblationToggles {
    pub fn any(&self) -> bool {
        *self != AblationToggles::default()
    }

    pub fn active_names(&self) -> Vec<&'static str> {
        let mut names = Vec::new();
        if self.channel_dependent_encoder {
            names.push("channel_dependent_encoder");
        }
        if self.mlp_tokenizer {
            names.push("mlp_tokenizer");
        }
        if self.fourier_time {
            names.push("fourier_time");
        }
        if self.rope_time {
            names.push("rope_time");
        }
        if self.no_channel_encoding {
            names.push("no_channel_encoding");
        }
        if self.no_csh {
            names.push("no_csh");
        }
        if self.single_mlp_ffn {
            names.push("single_mlp_ffn");
        }
        if self.mlp_ode_field {
            names.push("mlp_ode_field");
        }
        names
    }

    pub fn from_name(name: &str) -> Result<Self, LassError> {
        let mut t = AblationToggles::default();
        match name {
            "channel_dependent_encoder" => t.channel_dependent_encoder = true,
            "mlp_tokenizer" => t.mlp_tokenizer = true,
            "fourier_time" => t.fourier_time = true,
            "rope_time" => t.rope_time = true,
            "no_channel_encoding" => t.no_channel_encoding = true,
            "no_csh" => t.no_csh = true,
            "single_mlp_ffn" => t.single_mlp_ffn = true,
            "mlp_ode_field" => t.mlp_ode_field = true,
            other => {
                return Err(LassError::Config(format!(
                    "unknown ablation toggle: {other}"
                )))
            }
        }
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_z: usize,
    pub k_token: usize,
    pub k_csh: usize,
    pub k_rbf: usize,
    pub rbf_sigma: f64,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub gru_hidden: usize,
    pub gru_layers: usize,
    /// hidden width of every utility MLP (modulation, experts, heads, field)
    pub hidden: usize,
    pub d_x_max: usize,
    /// RK4 steps per token interval in the latent solve
    pub n_step: usize,
    /// one shared hub bank across layers unless set
    pub per_layer_csh: bool,
    pub ablation: AblationToggles,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk_scale()
    }
}

impl ModelConfig {
    pub fn full_scale() -> Self {
        ModelConfig {
            d_model: 256,
            d_z: 15,
            k_token: 40,
            k_csh: 10,
            k_rbf: 64,
            rbf_sigma: 0.25,
            n_layers: 6,
            n_heads: 8,
            n_experts: 8,
            top_k: 2,
            gru_hidden: 256,
            gru_layers: 2,
            hidden: 512,
            d_x_max: 10,
            n_step: 20,
            per_layer_csh: false,
            ablation: AblationToggles::default(),
        }
    }

    pub fn desk_scale() -> Self {
        ModelConfig {
            d_model: 64,
            d_z: 8,
            k_token: 20,
            k_csh: 5,
            k_rbf: 16,
            rbf_sigma: 0.25,
            n_layers: 2,
            n_heads: 4,
            n_experts: 4,
            top_k: 2,
            gru_hidden: 32,
            gru_layers: 2,
            hidden: 64,
            d_x_max: 10,
            n_step: 4,
            per_layer_csh: false,
            ablation: AblationToggles::default(),
        }
    }

    pub fn toy() -> Self {
        ModelConfig {
            d_model: 16,
            d_z: 3,
            k_token: 4,
            k_csh: 2,
            k_rbf: 8,
            rbf_sigma: 0.25,
            n_layers: 1,
            n_heads: 2,
            n_experts: 1,
            top_k: 1,
            gru_hidden: 8,
            gru_layers: 2,
            hidden: 16,
            d_x_max: 10,
            n_step: 2,
            per_layer_csh: false,
            ablation: AblationToggles::default(),
        }
    }

    pub fn validate(&self) -> Result<(), LassError> {
        if self.d_model % self.n_heads != 0 {
            return Err(LassError::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(LassError::Config(format!(
                "top_k {} must be in 1..={}",
                self.top_k, self.n_experts
            )));
        }
        if self.k_token == 0 || self.d_z == 0 || self.n_layers == 0 || self.n_step == 0 {
            return Err(LassError::Config(
                "k_token, d_z, n_layers, n_step must be positive".into(),
            ));
        }
        if self.k_rbf < 2 || self.rbf_sigma <= 0.0 {
            return Err(LassError::Config(
                "need k_rbf >= 2 and rbf_sigma > 0".into(),
            ));
        }
        if self.ablation.fourier_time && self.ablation.rope_time {
            return Err(LassError::Config(
                "fourier_time and rope_time are mutually exclusive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub kl_weight: f64,
    /// prefix ratios sampled uniformly per trajectory per step
    pub prefix_ratios: Vec<f64>,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            betas: (0.9, 0.95),
            weight_decay: 0.05,
            batch_size: 16,
            epochs: 200,
            kl_weight: 1e-3,
            prefix_ratios: vec![0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            seed: 0,
            model: ModelConfig::desk_scale(),
        }
    }
}

impl TrainConfig {
    pub fn full_scale() -> Self {
        TrainConfig {
            epochs: 1500,
            model: ModelConfig::full_scale(),
            ..TrainConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub lr: f64,
    pub epochs: usize,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            alpha: 8.0,
            lr: 5e-3,
            epochs: 50,
        }
    }
}
