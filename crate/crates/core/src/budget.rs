//! Parameter accounting, LoRA rank matching and the training-FLOP model.

use num_rational::Ratio;
use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AdapterKind, ModelConfig};

/// `4d²` attention + `8d²` gate/up + `4d²` down + `2d` norm gains.
pub fn cal_block_params(d: u64) -> u64 {
    16 * d * d + 2 * d
}

/// `8d²` gate/up + `4d²` down + `d` norm gain.
pub fn parallel_mlp_params(d: u64) -> u64 {
    12 * d * d + d
}

/// Trainable parameters of all adapters placed by `config`.
pub fn count_adapter_params(config: &ModelConfig) -> Result<u64> {
    let per_block = match config.adapter {
        AdapterKind::None => return Ok(0),
        AdapterKind::Cal => cal_block_params(config.d_model as u64),
        AdapterKind::ParallelMlp => parallel_mlp_params(config.d_model as u64),
    };
    Ok(config.placement()?.count() as u64 * per_block)
}

pub const DEFAULT_RANK_CAP: u64 = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraBudgetProblem {
    pub p_target: u64,
    pub n_layers: u64,
    pub hidden: u64,
    pub d_kv: u64,
    pub intermediate: u64,
    /// `None` disables the final clip.
    pub rank_cap: Option<u64>,
}

impl LoraBudgetProblem {
    fn validate(&self) -> Result<()> {
        if self.p_target == 0 {
            return Err(Error::NonPositiveBudget);
        }
        if self.n_layers == 0 || self.hidden == 0 || self.d_kv == 0 || self.intermediate == 0 {
            return Err(Error::Config("LoRA problem dimensions must be positive".into()));
        }
        if self.d_kv > self.hidden {
            return Err(Error::Config(format!("d_kv = {} exceeds H = {}", self.d_kv, self.hidden)));
        }
        Ok(())
    }

    /// Parameters added per layer by one unit of rank on all seven modules.
    pub fn per_layer_rank_cost(&self) -> u64 {
        let (h, kv, i) = (self.hidden, self.d_kv, self.intermediate);
        2 * (h + kv) + 4 * h + 3 * (h + i)
    }

    /// Per-rank cost of the five modules other than k/v.
    fn uncapped_cost(&self) -> u64 {
        7 * self.hidden + 3 * self.intermediate
    }

    /// Per-rank cost of the q, k, v, o, gate, up, down projections.
    fn module_costs(&self) -> [u64; 7] {
        let (h, kv, i) = (self.hidden, self.d_kv, self.intermediate);
        [2 * h, h + kv, h + kv, 2 * h, h + i, h + i, i + h]
    }
}

pub const LORA_MODULES: [&str; 7] = ["q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraSolution {
    /// Rank of the uncapped modules (all seven when no cap applied).
    pub r: u64,
    pub alpha: u64,
    /// Ranks in [`LORA_MODULES`] order.
    pub ranks: [u64; 7],
    /// Trainable parameters actually realized by `ranks`.
    pub realized: u64,
    pub kv_capped: bool,
    pub clipped: bool,
    /// Budget too small for rank 1.
    pub infeasible: bool,
}

/// `a / b` rounded to nearest, ties to even.
pub fn div_round_half_even(a: u64, b: u64) -> u64 {
    let (q, r) = (a / b, a % b);
    match (2 * r as u128).cmp(&(b as u128)) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + (q & 1),
    }
}

pub fn solve_lora_rank(problem: &LoraBudgetProblem) -> Result<LoraSolution> {
    problem.validate()?;
    let n = problem.n_layers;
    let r0 = div_round_half_even(problem.p_target, n * problem.per_layer_rank_cost());
    let mut ranks = [r0; 7];
    let mut r = r0;
    let kv_capped = r0 > problem.d_kv;
    if kv_capped {
        let kv = problem.d_kv;
        let kv_cost = n * 2 * kv * (problem.hidden + kv);
        let rest = problem.p_target.saturating_sub(kv_cost);
        r = div_round_half_even(rest, n * problem.uncapped_cost());
        ranks = [r, kv, kv, r, r, r, r];
    }
    let mut clipped = false;
    if let Some(cap) = problem.rank_cap {
        for x in ranks.iter_mut() {
            if *x > cap {
                *x = cap;
                clipped = true;
            }
        }
        r = r.min(cap);
    }
    let realized = n * ranks.iter().zip(problem.module_costs()).map(|(r, c)| r * c).sum::<u64>();
    let infeasible = r0 == 0;
    if infeasible {
        log::warn!(
            "LoRA budget {} is below half of one rank's cost {}",
            problem.p_target,
            n * problem.per_layer_rank_cost()
        );
    }
    Ok(LoraSolution {
        r,
        alpha: 2 * r,
        ranks,
        realized,
        kv_capped,
        clipped,
        infeasible,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AdapterMethod {
    /// Cross-attention adapters on a frozen backbone: backward cost only
    /// for the adapter parameters.
    Cal,
    Lora,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopBudget {
    pub pb: u128,
    pub pa: u128,
    pub seq: u128,
}

impl FlopBudget {
    pub fn new(pb: u128, pa: u128, seq: u128) -> Result<Self> {
        if pb == 0 || seq == 0 {
            return Err(Error::Config("P_b and S must be positive".into()));
        }
        Ok(Self { pb, pa, seq })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    pub forward: u128,
    pub backward: u128,
    pub total: u128,
}

pub fn flops(method: AdapterMethod, b: &FlopBudget) -> FlopCount {
    let forward = 2 * (b.pb + b.pa) * b.seq;
    let backward = match method {
        AdapterMethod::Cal => 2 * b.pa * b.seq,
        AdapterMethod::Lora => 4 * (b.pb + b.pa) * b.seq,
    };
    FlopCount {
        forward,
        backward,
        total: forward + backward,
    }
}

/// `ρ = 6(P_b + P_a) / (2(P_b + P_a) + 2P_a)` as an exact fraction.
pub fn speedup_ratio(b: &FlopBudget) -> Ratio<u128> {
    Ratio::new(3 * (b.pb + b.pa), b.pb + 2 * b.pa)
}

pub fn speedup_ratio_f64(b: &FlopBudget) -> f64 {
    speedup_ratio(b).to_f64().unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::placement::PlacementName;
    use proptest::prelude::*;

    fn fixture() -> LoraBudgetProblem {
        LoraBudgetProblem {
            p_target: 272,
            n_layers: 2,
            hidden: 4,
            d_kv: 4,
            intermediate: 8,
            rank_cap: Some(DEFAULT_RANK_CAP),
        }
    }

    #[test]
    fn hand_computed_rank() {
        let p = fixture();
        assert_eq!(p.per_layer_rank_cost(), 68);
        let s = solve_lora_rank(&p).unwrap();
        assert_eq!((s.r, s.alpha), (2, 4));
        assert_eq!(s.realized, 272);
    }

    #[test]
    fn tiny_budget_is_infeasible() {
        let s = solve_lora_rank(&LoraBudgetProblem { p_target: 60, ..fixture() }).unwrap();
        assert_eq!(s.r, 0);
        assert!(s.infeasible);
        assert!(matches!(
            solve_lora_rank(&LoraBudgetProblem { p_target: 0, ..fixture() }),
            Err(Error::NonPositiveBudget)
        ));
    }

    #[test]
    fn kv_cap_redistributes() {
        let p = LoraBudgetProblem { p_target: 10_000, n_layers: 1, hidden: 4, d_kv: 2, intermediate: 8, rank_cap: None };
        let s = solve_lora_rank(&p).unwrap();
        assert!(s.kv_capped);
        assert_eq!(s.ranks[1], 2);
        assert_eq!(s.ranks[2], 2);
        assert!(s.r > 2);
        assert!(s.realized <= p.p_target + p.per_layer_rank_cost());
    }

    #[test]
    fn ties_round_to_even() {
        assert_eq!(div_round_half_even(5, 2), 2);
        assert_eq!(div_round_half_even(7, 2), 4);
        assert_eq!(div_round_half_even(8, 3), 3);
    }

    #[test]
    fn cal_block_count() {
        assert_eq!(cal_block_params(4), 264);
        let cfg = ModelConfig {
            n_layers: 28,
            d_model: 1536,
            n_heads: 12,
            placement: PlacementName::Late8th,
            ..ModelConfig::default()
        };
        assert_eq!(count_adapter_params(&cfg).unwrap(), 5 * (16 * 1536 * 1536 + 2 * 1536));
        let none = ModelConfig { adapter: AdapterKind::None, ..cfg };
        assert_eq!(count_adapter_params(&none).unwrap(), 0);
    }

    #[test]
    fn flop_examples() {
        let b = FlopBudget::new(10, 2, 1).unwrap();
        assert_eq!(flops(AdapterMethod::Cal, &b).total, 28);
        assert_eq!(flops(AdapterMethod::Lora, &b).total, 72);
        assert_eq!(flops(AdapterMethod::Cal, &b).forward, flops(AdapterMethod::Lora, &b).forward);
        let r = speedup_ratio(&FlopBudget::new(100, 1, 1).unwrap());
        assert_eq!(r, Ratio::new(606, 204));
    }

    proptest! {
        #[test]
        fn ratio_decreases_in_adapter_size(pb in 2u128..1_000_000, a in 0u128..1_000_000, gap in 0u128..1_000_000) {
            let lo_pa = a % pb;
            let hi_pa = lo_pa + 1 + gap % (pb - lo_pa);
            let lo = speedup_ratio(&FlopBudget::new(pb, lo_pa, 1).unwrap());
            let hi = speedup_ratio(&FlopBudget::new(pb, hi_pa, 1).unwrap());
            prop_assert!(hi < lo);
        }

        #[test]
        fn flops_scale_linearly(pb in 1u128..1_000_000, pa in 0u128..1_000_000, s in 1u128..4096) {
            let one = FlopBudget::new(pb, pa, s).unwrap();
            let two = FlopBudget::new(pb, pa, 2 * s).unwrap();
            for m in [AdapterMethod::Cal, AdapterMethod::Lora] {
                prop_assert_eq!(flops(m, &two).total, 2 * flops(m, &one).total);
            }
        }
    }
}
