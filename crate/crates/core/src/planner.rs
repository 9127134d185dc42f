//! Parameter accounting for splitting a sparse budget between routed experts
//! and memory slots, plus a power-law fit helper.
//!
//! With `P_sparse = P_tot - P_act`, a fraction `rho` goes to inactive routed
//! experts and the rest to embedding slots. Experts are rounded to nearest,
//! slots are floored.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, EngramError, Result};

/// Inputs of [`split_budget`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocationSpec {
    pub p_tot: u64,
    pub p_act: u64,
    pub per_expert_params: u64,
    pub top_k: u64,
    #[serde(default)]
    pub shared_experts: u64,
    /// Parameters per embedding slot, i.e. `d_sub`.
    pub per_slot_params: u64,
    pub rho: f64,
}

impl AllocationSpec {
    /// Spec whose sparse budget equals a pure-MoE baseline with
    /// `baseline_routed` routed experts of which `top_k` are active.
    pub fn from_baseline(
        baseline_routed: u64,
        top_k: u64,
        per_expert_params: u64,
        p_act: u64,
        per_slot_params: u64,
        rho: f64,
    ) -> Result<Self> {
        if baseline_routed < top_k {
            return config_err("baseline has fewer routed experts than top_k");
        }
        let spec = Self {
            p_tot: p_act + (baseline_routed - top_k) * per_expert_params,
            p_act,
            per_expert_params,
            top_k,
            shared_experts: 0,
            per_slot_params,
            rho,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn p_sparse(&self) -> u64 {
        self.p_tot - self.p_act
    }

    pub fn validate(&self) -> Result<()> {
        if self.p_act > self.p_tot {
            return config_err(format!("P_act {} exceeds P_tot {}", self.p_act, self.p_tot));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return config_err(format!("rho must be in [0, 1], got {}", self.rho));
        }
        if self.per_expert_params == 0 {
            return config_err("per_expert_params must be positive");
        }
        if self.per_slot_params == 0 {
            return config_err("per_slot_params must be positive");
        }
        Ok(())
    }
}

/// Output of [`split_budget`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelPlan {
    pub inactive_experts: u64,
    pub routed_experts_total: u64,
    pub engram_slots: u64,
    pub realized_p_tot: u64,
    /// Share of the realized sparse parameters held by experts.
    pub realized_rho: f64,
}

pub fn split_budget(spec: &AllocationSpec) -> Result<ModelPlan> {
    spec.validate()?;
    let sparse = spec.p_sparse() as f64;
    let inactive = (spec.rho * sparse / spec.per_expert_params as f64).round() as u64;
    let slots = ((1.0 - spec.rho) * sparse / spec.per_slot_params as f64).floor() as u64;
    let expert_params = inactive * spec.per_expert_params;
    let slot_params = slots * spec.per_slot_params;
    let realized_sparse = expert_params + slot_params;
    let realized_rho = if realized_sparse == 0 {
        spec.rho
    } else {
        expert_params as f64 / realized_sparse as f64
    };
    Ok(ModelPlan {
        inactive_experts: inactive,
        routed_experts_total: inactive + spec.top_k,
        engram_slots: slots,
        realized_p_tot: spec.p_act + realized_sparse,
        realized_rho,
    })
}

/// Fraction of the baseline's inactive experts kept after reallocation.
pub fn realized_rho(baseline_routed: u64, engram_routed: u64, top_k: u64) -> Result<f64> {
    if baseline_routed <= top_k {
        return config_err(format!("baseline routed experts {baseline_routed} must exceed top_k {top_k}"));
    }
    if engram_routed > baseline_routed || engram_routed < top_k {
        return config_err("engram routed experts must lie between top_k and the baseline");
    }
    Ok((engram_routed - top_k) as f64 / (baseline_routed - top_k) as f64)
}

/// Embedding parameters of `layers` layers with `tables_per_layer` tables of
/// `slots_per_table` rows of width `d_sub`.
pub fn engram_param_count(layers: u64, tables_per_layer: u64, slots_per_table: u64, d_sub: u64) -> u64 {
    layers * tables_per_layer * slots_per_table * d_sub
}

/// Slots per table (floored) that fit `params` embedding parameters.
pub fn slots_for_params(params: u64, layers: u64, tables_per_layer: u64, d_sub: u64) -> Result<u64> {
    let per_slot = layers * tables_per_layer * d_sub;
    if per_slot == 0 {
        return config_err("layers, tables and d_sub must be positive");
    }
    Ok(params / per_slot)
}

/// Parameter count of a reported slot figure under both readings: slots per
/// table, or slots shared by all tables of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotAccounting {
    pub slots: u64,
    pub per_table_params: u64,
    pub per_layer_params: u64,
}

pub fn slot_accounting(layers: u64, tables_per_layer: u64, slots: u64, d_sub: u64) -> SlotAccounting {
    SlotAccounting {
        slots,
        per_table_params: engram_param_count(layers, tables_per_layer, slots, d_sub),
        per_layer_params: layers * slots * d_sub,
    }
}

/// Least-squares fit of `loss = intercept + slope * ln(slots)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Standard error of the slope; `None` with two points.
    pub slope_std_err: Option<f64>,
}

pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 2 {
        return config_err("power-law fit needs at least two points");
    }
    if points.iter().any(|&(m, l)| !(m > 0.0) || !l.is_finite() || !m.is_finite()) {
        return config_err("slot counts must be positive and losses finite");
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(EngramError::Validation("all slot counts are equal".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r_squared = if syy == 0.0 { 1.0 } else { (1.0 - sse / syy).clamp(0.0, 1.0) };
    let slope_std_err = (points.len() > 2).then(|| (sse / (n - 2.0) / sxx).sqrt());
    Ok(PowerLawFit {
        slope,
        intercept,
        r_squared,
        slope_std_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn baseline(routed: u64, rho: f64) -> ModelPlan {
        split_budget(&AllocationSpec::from_baseline(routed, 6, 1_000_000, 3_000_000_000, 80, rho).unwrap()).unwrap()
    }

    #[test]
    fn expert_counts() {
        assert_eq!(baseline(106, 0.4).routed_experts_total, 46);
        assert_eq!(baseline(99, 0.4).routed_experts_total, 43);
        let full = baseline(106, 1.0);
        assert_eq!(full.routed_experts_total, 106);
        assert_eq!(full.engram_slots, 0);
        let none = baseline(106, 0.0);
        assert_eq!(none.routed_experts_total, 6);
        assert_eq!(none.engram_slots, 100 * 1_000_000 / 80);
    }

    #[test]
    fn rho_from_expert_counts() {
        let r = realized_rho(72, 55, 6).unwrap();
        assert!((r - 49.0 / 66.0).abs() < 1e-15);
        assert_eq!(realized_rho(30, 30, 6).unwrap(), 1.0);
        assert_eq!(realized_rho(30, 6, 6).unwrap(), 0.0);
        assert!(realized_rho(6, 6, 6).is_err());
    }

    #[test]
    fn accounting() {
        assert_eq!(engram_param_count(2, 16, 2_262_400, 80), 5_791_744_000);
        assert_eq!(engram_param_count(1, 1, 1, 1), 1);
        assert_eq!(slots_for_params(18_500_000_000, 2, 16, 80).unwrap(), 7_226_562);
        let a = slot_accounting(2, 16, 2_262_400, 80);
        assert_eq!(a.per_layer_params * 16, a.per_table_params);
    }

    #[test]
    fn invalid_specs() {
        let mut s = AllocationSpec::from_baseline(10, 2, 5, 100, 1, 0.5).unwrap();
        s.per_expert_params = 0;
        assert!(split_budget(&s).is_err());
        s.per_expert_params = 5;
        s.rho = 1.5;
        assert!(split_budget(&s).is_err());
        s.rho = 0.5;
        s.p_act = s.p_tot + 1;
        assert!(split_budget(&s).is_err());
    }

    #[test]
    fn exact_log_fit() {
        let pts: Vec<_> = [1e3, 1e4, 3e5, 2e6].iter().map(|&m: &f64| (m, 2.0 - 0.05 * m.ln())).collect();
        let f = fit_power_law(&pts).unwrap();
        assert!((f.slope + 0.05).abs() < 1e-9);
        assert!((f.intercept - 2.0).abs() < 1e-9);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        let two = fit_power_law(&pts[..2]).unwrap();
        assert_eq!(two.r_squared, 1.0);
        assert!(fit_power_law(&[(5.0, 1.0), (5.0, 2.0)]).is_err());
        assert!(fit_power_law(&[(5.0, 1.0)]).is_err());
    }
}
