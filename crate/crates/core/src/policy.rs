use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Precision;

/// Rounding applied when the update is written back into the weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRounding {
    Nearest,
    Stochastic,
    /// Weights stay in fp32 (master-weight configuration).
    None,
}

/// Precision assigned to each training role.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PrecisionPolicy {
    pub weights: Precision,
    pub gradients: Precision,
    pub moment1: Precision,
    pub moment2: Precision,
    pub update_arithmetic: Precision,
    pub update_rounding: UpdateRounding,
}

impl PrecisionPolicy {
    /// Everything in bf16; the update is computed in a binary32 buffer and
    /// written back with stochastic rounding.
    pub const fn bf16_sr() -> Self {
        Self {
            weights: Precision::Bf16,
            gradients: Precision::Bf16,
            moment1: Precision::Bf16,
            moment2: Precision::Bf16,
            update_arithmetic: Precision::Fp32,
            update_rounding: UpdateRounding::Stochastic,
        }
    }

    /// Plain bf16 training: every operation nearest-rounded.
    pub const fn bf16_nr() -> Self {
        Self {
            weights: Precision::Bf16,
            gradients: Precision::Bf16,
            moment1: Precision::Bf16,
            moment2: Precision::Bf16,
            update_arithmetic: Precision::Bf16,
            update_rounding: UpdateRounding::Nearest,
        }
    }

    /// fp32 master weights, states and gradient communication.
    pub const fn fp32_master() -> Self {
        Self {
            weights: Precision::Fp32,
            gradients: Precision::Fp32,
            moment1: Precision::Fp32,
            moment2: Precision::Fp32,
            update_arithmetic: Precision::Fp32,
            update_rounding: UpdateRounding::None,
        }
    }

    /// bf16 weights with stochastic-rounded updates and the given precision
    /// for gradients and both moments.
    pub const fn sr_with_states(gradients: Precision, moment1: Precision, moment2: Precision) -> Self {
        Self {
            weights: Precision::Bf16,
            gradients,
            moment1,
            moment2,
            update_arithmetic: Precision::Fp32,
            update_rounding: UpdateRounding::Stochastic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.update_rounding, self.weights) {
            (UpdateRounding::None, Precision::Bf16) => Err(Error::config(
                "policy.update_rounding",
                "`none` keeps fp32 master weights and requires weights = fp32",
            )),
            (UpdateRounding::Nearest | UpdateRounding::Stochastic, Precision::Fp32) => Err(Error::config(
                "policy.weights",
                "rounded updates produce bf16 weights; set weights = bf16",
            )),
            _ => Ok(()),
        }
    }

    /// Short stable identifier used in metrics output.
    pub fn id(&self) -> String {
        let p = |p: Precision| match p {
            Precision::Bf16 => "b",
            Precision::Fp32 => "f",
        };
        let r = match self.update_rounding {
            UpdateRounding::Nearest => "nr",
            UpdateRounding::Stochastic => "sr",
            UpdateRounding::None => "master",
        };
        format!(
            "w{}g{}m{}v{}a{}-{}",
            p(self.weights),
            p(self.gradients),
            p(self.moment1),
            p(self.moment2),
            p(self.update_arithmetic),
            r
        )
    }
}

/// Named presets accepted in experiment configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyPreset {
    Bf16Sr,
    Bf16Nr,
    Fp32Master,
}

impl PolicyPreset {
    pub fn policy(self) -> PrecisionPolicy {
        match self {
            PolicyPreset::Bf16Sr => PrecisionPolicy::bf16_sr(),
            PolicyPreset::Bf16Nr => PrecisionPolicy::bf16_nr(),
            PolicyPreset::Fp32Master => PrecisionPolicy::fp32_master(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PolicyPreset::Bf16Sr => "bf16_sr",
            PolicyPreset::Bf16Nr => "bf16_nr",
            PolicyPreset::Fp32Master => "fp32_master",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in [PolicyPreset::Bf16Sr, PolicyPreset::Bf16Nr, PolicyPreset::Fp32Master] {
            p.policy().validate().unwrap();
        }
    }

    #[test]
    fn master_rounding_requires_fp32_weights() {
        let mut p = PrecisionPolicy::fp32_master();
        p.weights = Precision::Bf16;
        assert!(p.validate().is_err());
        let mut p = PrecisionPolicy::bf16_sr();
        p.weights = Precision::Fp32;
        assert!(p.validate().is_err());
    }

    #[test]
    fn ids_are_distinct() {
        let ids: std::collections::HashSet<_> = [
            PrecisionPolicy::bf16_sr(),
            PrecisionPolicy::bf16_nr(),
            PrecisionPolicy::fp32_master(),
        ]
        .iter()
        .map(|p| p.id())
        .collect();
        assert_eq!(ids.len(), 3);
    }

    #[test]
    fn policy_json_shape() {
        let v = serde_json::to_value(PrecisionPolicy::bf16_sr()).unwrap();
        assert_eq!(v["weights"], "bf16");
        assert_eq!(v["update_rounding"], "stochastic");
    }
}
