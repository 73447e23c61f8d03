use serde::{Deserialize, Serialize};

use crate::encoder::EncoderShape;
use crate::error::{Error, Result};
use crate::srd::LossWeights;

/// Training variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Both branches, full objective, shared branch federated.
    #[default]
    Feddcsr,
    /// Contrastive term switched off.
    FeddcsrNoCim,
    /// Contrastive and similarity terms switched off and the joint
    /// reconstruction replaced by one ELBO per branch.
    FeddcsrNoSrdCim,
    /// Every client trains alone; nothing is exchanged.
    LocalOnly,
    /// One branch plus predictor, every parameter averaged by the server.
    /// The branch is trained with the full objective minus the cross-branch
    /// similarity term.
    FedavgMonolithic,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Feddcsr,
        Variant::FeddcsrNoCim,
        Variant::FeddcsrNoSrdCim,
        Variant::LocalOnly,
        Variant::FedavgMonolithic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Feddcsr => "feddcsr",
            Variant::FeddcsrNoCim => "feddcsr_no_cim",
            Variant::FeddcsrNoSrdCim => "feddcsr_no_srd_cim",
            Variant::LocalOnly => "local_only",
            Variant::FedavgMonolithic => "fedavg_monolithic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }

    pub fn is_federated(self) -> bool {
        self != Variant::LocalOnly
    }

    pub fn is_monolithic(self) -> bool {
        self == Variant::FedavgMonolithic
    }

    /// Whether the reconstruction inside the α bracket decodes each branch
    /// on its own instead of their sum.
    pub fn per_branch_elbo(self) -> bool {
        self == Variant::FeddcsrNoSrdCim
    }

    /// Loss weights after switching off the terms this variant drops.
    pub fn effective_weights(self, w: LossWeights) -> LossWeights {
        match self {
            Variant::Feddcsr | Variant::LocalOnly => w,
            Variant::FeddcsrNoCim => LossWeights { lambda_: 0.0, ..w },
            Variant::FeddcsrNoSrdCim => LossWeights {
                beta: 0.0,
                lambda_: 0.0,
                ..w
            },
            Variant::FedavgMonolithic => LossWeights { beta: 0.0, ..w },
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub max_len: usize,
    pub gnn_layers: usize,
    pub attn_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            max_len: 16,
            gnn_layers: 2,
            attn_layers: 2,
            heads: 2,
            ffn_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn encoder_shape(&self, vocab_size: usize) -> EncoderShape {
        EncoderShape {
            vocab_size,
            dim: self.dim,
            max_len: self.max_len,
            gnn_layers: self.gnn_layers,
            attn_layers: self.attn_layers,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
        }
    }
}

/// Everything that controls one training run. Defaults are the desk-scale
/// preset; [`TrainConfig::full_scale`] gives the full-scale schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub rounds: usize,
    pub local_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub weights: LossWeights,
    pub eval_k: usize,
    pub negatives_per_eval: usize,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Feddcsr,
            rounds: 15,
            local_epochs: 2,
            patience: 5,
            batch_size: 8,
            lr: 0.005,
            dropout: 0.2,
            weights: LossWeights::default(),
            eval_k: 10,
            negatives_per_eval: 99,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// 40 rounds, 3 local epochs, patience 5, batch 256, lr 0.001, dropout 0.3,
    /// 999 negatives.
    pub fn full_scale() -> Self {
        Self {
            rounds: 40,
            local_epochs: 3,
            patience: 5,
            batch_size: 256,
            lr: 0.001,
            dropout: 0.3,
            negatives_per_eval: 999,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_owned()));
        if self.rounds == 0 {
            return fail("rounds must be at least 1");
        }
        if self.local_epochs == 0 {
            return fail("local_epochs must be at least 1");
        }
        if self.patience == 0 || self.batch_size == 0 || self.eval_k == 0 || self.negatives_per_eval == 0 {
            return fail("patience, batch_size, eval_k and negatives_per_eval must be positive");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return fail("lr must be a non-negative number");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        self.weights.validate()?;
        self.model.encoder_shape(2).validate()
    }

    /// Weights with this run's variant applied.
    pub fn weights(&self) -> LossWeights {
        self.variant.effective_weights(self.weights)
    }
}
