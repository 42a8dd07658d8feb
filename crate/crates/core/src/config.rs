//! Training configuration, JSON loading with per-key errors, and the
//! ablation variants.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::discriminator::{DiscConfig, RewardMode};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::OptimizerKind;
use crate::rules::MiningConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Episode length.
    pub max_steps: usize,
    pub max_actions: usize,
    pub d: usize,
    pub d_s: usize,
    pub j: usize,
    /// Feature widths; taken from the feature store when unset.
    pub d_i: Option<usize>,
    pub d_t: Option<usize>,
    pub layers: usize,
    pub attentive: bool,
    pub neighbor_state: bool,
    /// Demonstration paths per package.
    pub n_paths: usize,
    pub extra_relations: usize,
    pub cap_per_relation: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub channels: usize,
    pub conv_kernel: Option<usize>,
    pub conv_stride: Option<usize>,
    pub tair_on: bool,
    pub ugan_on: bool,
    pub augmentation_on: bool,
    pub reward_mode: RewardMode,
    pub rule_max_len: usize,
    pub rule_min_support: usize,
    pub rule_min_conf: f64,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub critic_lr: f64,
    /// Decoupled weight decay on the generator.
    pub weight_decay: f64,
    pub clip: f64,
    pub baseline_decay: f64,
    pub batch_size: usize,
    pub rollouts: usize,
    pub critic_steps: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a better validation MRR; 0 never stops.
    pub patience: usize,
    pub beam: usize,
    /// Validation queries per epoch; 0 uses all.
    pub valid_limit: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 3,
            max_actions: 200,
            d: 32,
            d_s: 32,
            j: 32,
            d_i: None,
            d_t: None,
            layers: 3,
            attentive: true,
            neighbor_state: false,
            n_paths: 5,
            extra_relations: 3,
            cap_per_relation: 10,
            alpha: 0.4,
            lambda: 10.0,
            channels: 8,
            conv_kernel: None,
            conv_stride: None,
            tair_on: true,
            ugan_on: true,
            augmentation_on: true,
            reward_mode: RewardMode::Adaptive,
            rule_max_len: 3,
            rule_min_support: 2,
            rule_min_conf: 0.1,
            optimizer: OptimizerKind::Sgd,
            lr: 0.1,
            critic_lr: 0.05,
            weight_decay: 0.0,
            clip: 5.0,
            baseline_decay: 0.95,
            batch_size: 64,
            rollouts: 4,
            critic_steps: 5,
            epochs: 50,
            patience: 0,
            beam: 16,
            valid_limit: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Applies `json` over the defaults one key at a time.
    pub fn from_json(json: &Value) -> Result<Self> {
        Self::default().merged(json)
    }

    pub fn merged(&self, json: &Value) -> Result<Self> {
        let Value::Object(over) = json else {
            return Err(Error::config("<root>", "config must be a JSON object"));
        };
        let Value::Object(mut base) = serde_json::to_value(self)? else {
            unreachable!("config serializes to an object");
        };
        for (key, value) in over {
            if !base.contains_key(key) {
                return Err(Error::config(key, "unknown key"));
            }
            let mut probe = base.clone();
            probe.insert(key.clone(), value.clone());
            if let Err(e) = serde_json::from_value::<Self>(Value::Object(probe)) {
                return Err(Error::config(key, e.to_string()));
            }
            base.insert(key.clone(), value.clone());
        }
        let cfg: Self = serde_json::from_value(Value::Object(base))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let json: Value = serde_json::from_str(&text).map_err(|e| Error::config("<file>", e.to_string()))?;
        Self::from_json(&json)
    }

    pub fn to_json(&self) -> Map<String, Value> {
        match serde_json::to_value(self) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("config serializes to an object"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("max_steps", self.max_steps),
            ("max_actions", self.max_actions),
            ("d", self.d),
            ("d_s", self.d_s),
            ("j", self.j),
            ("n_paths", self.n_paths),
            ("channels", self.channels),
            ("rule_max_len", self.rule_max_len),
            ("batch_size", self.batch_size),
            ("rollouts", self.rollouts),
            ("beam", self.beam),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        for (key, v) in [("d_i", self.d_i), ("d_t", self.d_t), ("conv_kernel", self.conv_kernel), ("conv_stride", self.conv_stride)] {
            if v == Some(0) {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if self.rule_max_len > 3 {
            return Err(Error::config("rule_max_len", "at most 3"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", "must lie in [0, 1]"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config("lambda", "must be non-negative"));
        }
        for (key, v) in [("lr", self.lr), ("critic_lr", self.critic_lr), ("clip", self.clip)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.lr * self.weight_decay < 1.0) {
            return Err(Error::config("weight_decay", "must be non-negative with lr * weight_decay < 1"));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::config("baseline_decay", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.rule_min_conf) {
            return Err(Error::config("rule_min_conf", "must lie in [0, 1]"));
        }
        let kernel = self.conv_kernel.unwrap_or(self.d);
        if kernel > self.n_paths * self.d {
            return Err(Error::config("conv_kernel", "wider than a path package"));
        }
        Ok(())
    }

    pub fn model(&self, d_i: usize, d_t: usize, d_p: usize) -> ModelConfig {
        ModelConfig {
            d: self.d,
            d_s: self.d_s,
            j: self.j,
            d_i,
            d_t,
            d_p,
            layers: self.layers,
            attentive: self.attentive,
            neighbor_state: self.neighbor_state,
            tair_on: self.tair_on,
            ugan_on: self.ugan_on,
            augmentation_on: self.augmentation_on,
            extra_relations: self.extra_relations,
            cap_per_relation: self.cap_per_relation,
        }
    }

    pub fn env(&self) -> EnvConfig {
        EnvConfig {
            max_steps: self.max_steps,
            max_actions: self.max_actions,
        }
    }

    pub fn disc(&self, entity_width: usize) -> DiscConfig {
        DiscConfig {
            channels: self.channels,
            kernel: self.conv_kernel.unwrap_or(self.d),
            stride: self.conv_stride.unwrap_or(self.d),
            ..DiscConfig::new(self.d, self.n_paths, self.max_steps, entity_width)
        }
    }

    pub fn mining(&self) -> MiningConfig {
        MiningConfig {
            max_body_len: self.rule_max_len,
            min_support: self.rule_min_support,
            min_conf: self.rule_min_conf,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Full,
    WithoutTair,
    WithoutUgan,
    WithoutRarl,
    /// Entity-level reward only.
    TmrR,
    /// Relation-level reward only.
    TmrE,
    /// No rule-guided augmentation.
    TmrAa,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::WithoutTair,
        Variant::WithoutUgan,
        Variant::WithoutRarl,
        Variant::TmrR,
        Variant::TmrE,
        Variant::TmrAa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "TMR",
            Variant::WithoutTair => "w/o TAIR",
            Variant::WithoutUgan => "w/o UGAN",
            Variant::WithoutRarl => "w/o RARL",
            Variant::TmrR => "TMR-R",
            Variant::TmrE => "TMR-E",
            Variant::TmrAa => "TMR-AA",
        }
    }

    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        match self {
            Variant::Full => {}
            Variant::WithoutTair => c.tair_on = false,
            Variant::WithoutUgan => c.ugan_on = false,
            Variant::WithoutRarl => c.reward_mode = RewardMode::ZeroOne,
            Variant::TmrR => c.reward_mode = RewardMode::EntityOnly,
            Variant::TmrE => c.reward_mode = RewardMode::RelationOnly,
            Variant::TmrAa => c.augmentation_on = false,
        }
        c
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        let v = match key.as_str() {
            "tmr" | "full" => Variant::Full,
            "wotair" => Variant::WithoutTair,
            "wougan" => Variant::WithoutUgan,
            "worarl" => Variant::WithoutRarl,
            "tmrr" => Variant::TmrR,
            "tmre" => Variant::TmrE,
            "tmraa" => Variant::TmrAa,
            _ => return Err(Error::UnknownVariant(s.to_owned())),
        };
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn keys_apply_over_defaults() {
        let c = TrainConfig::from_json(&json!({"d": 8, "reward_mode": "zero_one", "seed": 3})).unwrap();
        assert_eq!((c.d, c.seed, c.reward_mode), (8, 3, RewardMode::ZeroOne));
        assert_eq!(c.max_steps, 3);
    }

    #[test]
    fn errors_name_the_failing_key() {
        let key = |v: Value| match TrainConfig::from_json(&v) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("{other:?}"),
        };
        assert_eq!(key(json!({"bogus": 1})), "bogus");
        assert_eq!(key(json!({"d": "eight"})), "d");
        assert_eq!(key(json!({"alpha": 1.5})), "alpha");
        assert_eq!(key(json!({"reward_mode": "best"})), "reward_mode");
        assert_eq!(key(json!({"batch_size": 0})), "batch_size");
    }

    #[test]
    fn variants_flip_their_switch() {
        let base = TrainConfig::default();
        assert!(!Variant::TmrAa.apply(&base).augmentation_on);
        assert_eq!(Variant::TmrR.apply(&base).reward_mode, RewardMode::EntityOnly);
        assert_eq!(Variant::TmrE.apply(&base).reward_mode, RewardMode::RelationOnly);
        assert_eq!(Variant::WithoutRarl.apply(&base).reward_mode, RewardMode::ZeroOne);
        assert!(!Variant::WithoutTair.apply(&base).tair_on);
        assert!(!Variant::WithoutUgan.apply(&base).ugan_on);
        assert_eq!(Variant::Full.apply(&base), base);
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("w/o everything".parse::<Variant>().is_err());
    }
}
