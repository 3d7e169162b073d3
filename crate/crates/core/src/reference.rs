//! Published reference values shipped for comparison reports. None of these
//! numbers can be regenerated here: they come from training runs.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelConfig {
    pub name: &'static str,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub params_millions: f64,
    pub svd_interval: u64,
}

pub const CUSTOM_MODELS: [ModelConfig; 3] = [
    ModelConfig {
        name: "D8",
        d_model: 512,
        layers: 8,
        heads: 8,
        params_millions: 30.4,
        svd_interval: 25,
    },
    ModelConfig {
        name: "D12",
        d_model: 768,
        layers: 12,
        heads: 12,
        params_millions: 92.8,
        svd_interval: 25,
    },
    ModelConfig {
        name: "D16",
        d_model: 1024,
        layers: 16,
        heads: 16,
        params_millions: 285.2,
        svd_interval: 50,
    },
];

/// Training length of the custom models; the gradient table's "final" column.
pub const FINAL_STEP: u64 = 10_000;

pub const GRADIENT_STEPS: [u64; 6] = [250, 500, 1000, 2000, 5000, FINAL_STEP];

/// First-minus-last mean stable rank at `GRADIENT_STEPS`.
pub const SR_GRADIENTS: [(&str, [f64; 6]); 3] = [
    ("D8", [-23.1, -15.0, 2.9, 14.4, 19.7, 22.1]),
    ("D12", [-42.2, -25.9, -2.6, 8.1, 17.0, 17.2]),
    ("D16", [-41.7, -59.6, -19.5, -2.6, 17.8, 18.8]),
];

pub fn gradient_series(model: &str) -> Option<Vec<(u64, f64)>> {
    SR_GRADIENTS
        .iter()
        .find(|(m, _)| *m == model)
        .map(|(_, g)| {
            GRADIENT_STEPS
                .iter()
                .copied()
                .zip(g.iter().copied())
                .collect()
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingRow {
    pub model: &'static str,
    pub layers: usize,
    pub alpha_max: f64,
    pub delta_alpha: f64,
    pub peak_ratio: f64,
    pub wave_velocity: f64,
}

pub const SCALING_ROWS: [ScalingRow; 3] = [
    ScalingRow {
        model: "D8",
        layers: 8,
        alpha_max: 0.461,
        delta_alpha: 0.259,
        peak_ratio: 0.43,
        wave_velocity: 102.0,
    },
    ScalingRow {
        model: "D12",
        layers: 12,
        alpha_max: 0.516,
        delta_alpha: 0.284,
        peak_ratio: 0.36,
        wave_velocity: 131.0,
    },
    ScalingRow {
        model: "D16",
        layers: 16,
        alpha_max: 0.567,
        delta_alpha: 0.310,
        peak_ratio: 0.13,
        wave_velocity: 142.0,
    },
];

/// Published fits over `SCALING_ROWS`: Δα and α_max exponents, and the
/// linear peak-position fit as (slope, intercept, R²).
pub const DELTA_ALPHA_EXPONENT: f64 = 0.26;
pub const ALPHA_MAX_EXPONENT: f64 = 0.30;
pub const PEAK_LINE: (f64, f64, f64) = (-0.037, 0.75, 0.91);

/// Per-layer Q-α and single-layer ablation ΔLoss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ImportanceTable {
    pub model: &'static str,
    pub alpha: &'static [f64],
    pub delta_loss: &'static [f64],
    /// Published Spearman ρ over layers 2 and up.
    pub rho_from_l2: f64,
}

pub const IMPORTANCE: [ImportanceTable; 3] = [
    ImportanceTable {
        model: "D8",
        alpha: &[0.453, 0.374, 0.415, 0.461, 0.450, 0.391, 0.280, 0.202],
        delta_loss: &[3.42, 1.72, 5.10, 0.096, 0.091, 0.092, 0.090, 0.085],
        rho_from_l2: 0.71,
    },
    ImportanceTable {
        model: "D12",
        alpha: &[
            0.418, 0.361, 0.506, 0.514, 0.516, 0.470, 0.399, 0.346, 0.298, 0.301, 0.273, 0.232,
        ],
        delta_loss: &[
            2.82, 3.08, 0.163, 0.058, 0.054, 0.031, 0.017, 0.009, 0.006, 0.009, 0.010, 0.007,
        ],
        rho_from_l2: 0.84,
    },
    ImportanceTable {
        model: "D16",
        alpha: &[
            0.417, 0.401, 0.567, 0.506, 0.502, 0.517, 0.488, 0.421, 0.411, 0.386, 0.341, 0.321,
            0.297, 0.256, 0.286, 0.278,
        ],
        delta_loss: &[
            3.56, 6.91, 0.083, 0.024, 0.022, 0.014, 0.018, 0.005, 0.006, 0.005, 0.004, 0.009,
            0.010, 0.010, 0.014, 0.016,
        ],
        rho_from_l2: 0.44,
    },
];

/// D16 ρ over layers 2 through 12.
pub const D16_CORE_RHO: f64 = 0.69;

pub fn importance(model: &str) -> Option<&'static ImportanceTable> {
    IMPORTANCE.iter().find(|t| t.model == model)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FamilyRow {
    pub family: &'static str,
    pub model: &'static str,
    pub layers: usize,
    pub delta_alpha: f64,
    pub peak_layer: usize,
    pub peak_ratio: f64,
}

pub const CROSS_FAMILY: [FamilyRow; 9] = [
    FamilyRow {
        family: "custom",
        model: "D8",
        layers: 8,
        delta_alpha: 0.259,
        peak_layer: 3,
        peak_ratio: 0.38,
    },
    FamilyRow {
        family: "custom",
        model: "D12",
        layers: 12,
        delta_alpha: 0.284,
        peak_layer: 4,
        peak_ratio: 0.33,
    },
    FamilyRow {
        family: "custom",
        model: "D16",
        layers: 16,
        delta_alpha: 0.310,
        peak_layer: 2,
        peak_ratio: 0.13,
    },
    FamilyRow {
        family: "gpt2",
        model: "Small",
        layers: 12,
        delta_alpha: 0.092,
        peak_layer: 11,
        peak_ratio: 0.92,
    },
    FamilyRow {
        family: "gpt2",
        model: "Medium",
        layers: 24,
        delta_alpha: 0.285,
        peak_layer: 0,
        peak_ratio: 0.00,
    },
    FamilyRow {
        family: "gpt2",
        model: "Large",
        layers: 36,
        delta_alpha: 0.107,
        peak_layer: 1,
        peak_ratio: 0.03,
    },
    FamilyRow {
        family: "pythia",
        model: "160M",
        layers: 12,
        delta_alpha: 0.333,
        peak_layer: 9,
        peak_ratio: 0.75,
    },
    FamilyRow {
        family: "pythia",
        model: "410M",
        layers: 24,
        delta_alpha: 0.320,
        peak_layer: 22,
        peak_ratio: 0.92,
    },
    FamilyRow {
        family: "pythia",
        model: "1B",
        layers: 16,
        delta_alpha: 0.061,
        peak_layer: 3,
        peak_ratio: 0.19,
    },
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tables_are_consistent() {
        for t in IMPORTANCE {
            assert_eq!(t.alpha.len(), t.delta_loss.len());
            let cfg = CUSTOM_MODELS.iter().find(|m| m.name == t.model).unwrap();
            assert_eq!(t.alpha.len(), cfg.layers);
        }
        for (row, t) in SCALING_ROWS.iter().zip(IMPORTANCE) {
            let max = t.alpha.iter().copied().fold(f64::MIN, f64::max);
            let min = t.alpha.iter().copied().fold(f64::MAX, f64::min);
            assert_eq!(row.alpha_max, max);
            assert!(
                (row.delta_alpha - (max - min)).abs() < 0.0015,
                "{}",
                row.model
            );
        }
        assert_eq!(gradient_series("D12").unwrap()[2], (1000, -2.6));
        assert!(gradient_series("D20").is_none());
    }
}
