//! Layer-removal plans and the three-zone layer classification.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fits::{self, FitError, RankCorr};
use crate::format::sig9;
use crate::timelapse::AlphaProfile;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PruneError {
    #[error("boundary {b} on each side leaves no interior in {layers} layers")]
    BoundaryTooLarge { layers: usize, b: usize },
    #[error("could only select {} of {k} layers under the gap constraint: {partial:?}", partial.len())]
    InfeasibleSelection { k: usize, partial: Vec<usize> },
    #[error("k = {k} exceeds the {layers} available layers")]
    TooManyLayers { k: usize, layers: usize },
    #[error("strategy {0} needs {1}")]
    MissingInput(Strategy, &'static str),
    #[error("input covers {got} layers, expected {expected}")]
    LayerCountMismatch { expected: usize, got: usize },
    #[error("min_gap must be at least 1")]
    InvalidGap,
    #[error(transparent)]
    Fit(#[from] FitError),
}

pub type Result<T, E = PruneError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Strategy {
    ZoneAware,
    LastN,
    Random,
    Magnitude,
    SpectralWorst,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::ZoneAware => "ZONE_AWARE",
            Strategy::LastN => "LAST_N",
            Strategy::Random => "RANDOM",
            Strategy::Magnitude => "MAGNITUDE",
            Strategy::SpectralWorst => "SPECTRAL_WORST",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "zone_aware" | "spectral" => Ok(Strategy::ZoneAware),
            "last_n" => Ok(Strategy::LastN),
            "random" => Ok(Strategy::Random),
            "magnitude" => Ok(Strategy::Magnitude),
            "spectral_worst" => Ok(Strategy::SpectralWorst),
            _ => Err(format!("unknown strategy {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Zone {
    InputBoundary,
    Core,
    OutputBoundary,
}

impl Zone {
    pub fn as_str(self) -> &'static str {
        match self {
            Zone::InputBoundary => "INPUT_BOUNDARY",
            Zone::Core => "CORE",
            Zone::OutputBoundary => "OUTPUT_BOUNDARY",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZoneMap {
    pub boundary: usize,
    pub zones: Vec<Zone>,
}

impl ZoneMap {
    pub fn layers(&self) -> usize {
        self.zones.len()
    }

    pub fn core_layers(&self) -> Vec<usize> {
        (self.boundary..self.zones.len() - self.boundary).collect()
    }
}

pub fn classify_zones(layers: usize, b: usize) -> Result<ZoneMap> {
    if 2 * b >= layers {
        return Err(PruneError::BoundaryTooLarge { layers, b });
    }
    let zones = (0..layers)
        .map(|l| {
            if l < b {
                Zone::InputBoundary
            } else if l >= layers - b {
                Zone::OutputBoundary
            } else {
                Zone::Core
            }
        })
        .collect();
    Ok(ZoneMap { boundary: b, zones })
}

/// 2 for 14 or more layers, else 1.
pub fn default_boundary(layers: usize) -> usize {
    if layers >= 14 {
        2
    } else {
        1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub strategy: Strategy,
    pub removed_layers: Vec<usize>,
    pub k: usize,
    pub b: Option<usize>,
    pub min_gap: Option<usize>,
    pub seed: Option<u64>,
    /// SHA-256 over the profile's α values (nine significant digits, one per line).
    pub alpha_profile_digest: Option<String>,
}

pub fn alpha_profile_digest(alphas: &[f64]) -> String {
    let mut h = Sha256::new();
    for a in alphas {
        h.update(sig9(*a).as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Indices sorted by ascending value, lower index first on ties.
fn ascending_order(values: &[f64], candidates: impl IntoIterator<Item = usize>) -> Vec<usize> {
    let mut order: Vec<usize> = candidates.into_iter().collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    order
}

/// Greedy pass over interior layers in ascending α; a layer is accepted when
/// it is at least `min_gap` away from every accepted layer.
pub fn zone_aware_select(
    profile: &AlphaProfile,
    k: usize,
    b: usize,
    min_gap: usize,
) -> Result<PrunePlan> {
    if min_gap == 0 {
        return Err(PruneError::InvalidGap);
    }
    let zones = classify_zones(profile.layer_count(), b)?;
    let mut accepted: Vec<usize> = Vec::with_capacity(k);
    if k > 0 {
        for l in ascending_order(&profile.alphas, zones.core_layers()) {
            if accepted.iter().all(|&a| a.abs_diff(l) >= min_gap) {
                accepted.push(l);
                if accepted.len() == k {
                    break;
                }
            }
        }
    }
    accepted.sort_unstable();
    if accepted.len() < k {
        return Err(PruneError::InfeasibleSelection {
            k,
            partial: accepted,
        });
    }
    Ok(PrunePlan {
        strategy: Strategy::ZoneAware,
        removed_layers: accepted,
        k,
        b: Some(b),
        min_gap: Some(min_gap),
        seed: None,
        alpha_profile_digest: Some(alpha_profile_digest(&profile.alphas)),
    })
}

/// Inputs consulted by the baseline strategies.
#[derive(Debug, Clone, Default)]
pub struct BaselineInputs<'a> {
    pub profile: Option<&'a AlphaProfile>,
    /// Per-layer sum of Frobenius norms over tracked matrices.
    pub frob_norms: Option<&'a [f64]>,
    pub seed: Option<u64>,
}

pub fn baseline_select(
    strategy: Strategy,
    layers: usize,
    k: usize,
    inputs: &BaselineInputs,
) -> Result<PrunePlan> {
    if k > layers {
        return Err(PruneError::TooManyLayers { k, layers });
    }
    let check_len = |got: usize| {
        if got == layers {
            Ok(())
        } else {
            Err(PruneError::LayerCountMismatch {
                expected: layers,
                got,
            })
        }
    };
    let mut plan = PrunePlan {
        strategy,
        removed_layers: Vec::new(),
        k,
        b: None,
        min_gap: None,
        seed: None,
        alpha_profile_digest: inputs.profile.map(|p| alpha_profile_digest(&p.alphas)),
    };
    let mut removed = match strategy {
        Strategy::LastN => (layers - k..layers).collect(),
        Strategy::Random => {
            let seed = inputs
                .seed
                .ok_or(PruneError::MissingInput(strategy, "a seed"))?;
            plan.seed = Some(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample(&mut rng, layers, k).into_vec()
        }
        Strategy::Magnitude => {
            let norms = inputs.frob_norms.ok_or(PruneError::MissingInput(
                strategy,
                "per-layer Frobenius norms",
            ))?;
            check_len(norms.len())?;
            ascending_order(norms, 0..layers)
                .into_iter()
                .take(k)
                .collect()
        }
        Strategy::SpectralWorst => {
            let p = inputs
                .profile
                .ok_or(PruneError::MissingInput(strategy, "an alpha profile"))?;
            check_len(p.layer_count())?;
            let mut order: Vec<usize> = (0..layers).collect();
            order.sort_by(|&a, &b| p.alphas[b].total_cmp(&p.alphas[a]).then(a.cmp(&b)));
            order.truncate(k);
            order
        }
        Strategy::ZoneAware => {
            let p = inputs
                .profile
                .ok_or(PruneError::MissingInput(strategy, "an alpha profile"))?;
            check_len(p.layer_count())?;
            return zone_aware_select(p, k, default_boundary(layers), 2);
        }
    };
    removed.sort_unstable();
    plan.removed_layers = removed;
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LayerFilter {
    CoreOnly,
    All,
    /// Inclusive layer range, independent of the zone map.
    Range {
        first: usize,
        last: usize,
    },
}

impl LayerFilter {
    fn keeps(&self, layer: usize, zones: &ZoneMap) -> bool {
        match *self {
            LayerFilter::CoreOnly => zones.zones[layer] == Zone::Core,
            LayerFilter::All => true,
            LayerFilter::Range { first, last } => (first..=last).contains(&layer),
        }
    }
}

/// Spearman correlation of α with importance over layers present in both
/// and kept by `include`.
pub fn importance_correlation(
    profile: &AlphaProfile,
    importance: &BTreeMap<usize, f64>,
    zones: &ZoneMap,
    include: LayerFilter,
    permutations: usize,
    seed: u64,
) -> Result<RankCorr> {
    if zones.layers() != profile.layer_count() {
        return Err(PruneError::LayerCountMismatch {
            expected: profile.layer_count(),
            got: zones.layers(),
        });
    }
    let (alphas, imps): (Vec<f64>, Vec<f64>) = importance
        .iter()
        .filter(|(&l, _)| l < profile.layer_count())
        .filter(|(&l, _)| include.keeps(l, zones))
        .map(|(&l, &v)| (profile.alphas[l], v))
        .unzip();
    Ok(fits::spearman(&alphas, &imps, permutations, seed)?)
}

#[cfg(test)]
mod tests {
    use super::Strategy;
    use super::*;
    use crate::tensor_io::MatrixType;
    use proptest::prelude::{
        prop, prop_assert, prop_assert_eq, prop_assume, proptest, ProptestConfig,
    };

    const D16: [f64; 16] = [
        0.417, 0.401, 0.567, 0.506, 0.502, 0.517, 0.488, 0.421, 0.411, 0.386, 0.341, 0.321, 0.297,
        0.256, 0.286, 0.278,
    ];

    fn profile(a: &[f64]) -> AlphaProfile {
        AlphaProfile::new(0, MatrixType::Q, a.to_vec()).unwrap()
    }

    #[test]
    fn zone_examples() {
        let z = classify_zones(12, 1).unwrap();
        assert_eq!(z.zones[0], Zone::InputBoundary);
        assert_eq!(z.zones[11], Zone::OutputBoundary);
        assert_eq!(z.core_layers(), (1..11).collect::<Vec<_>>());
        let z = classify_zones(16, 2).unwrap();
        let boundary: Vec<usize> = (0..16).filter(|&l| z.zones[l] != Zone::Core).collect();
        assert_eq!(boundary, vec![0, 1, 14, 15]);
        assert_eq!(
            classify_zones(4, 2),
            Err(PruneError::BoundaryTooLarge { layers: 4, b: 2 })
        );
    }

    #[test]
    fn d16_selection() {
        let plan = zone_aware_select(&profile(&D16), 3, 2, 2).unwrap();
        assert_eq!(plan.removed_layers, vec![9, 11, 13]);
        assert_eq!(plan.b, Some(2));
        assert_eq!(plan.alpha_profile_digest.as_ref().unwrap().len(), 64);
    }

    #[test]
    fn empty_and_tied_selections() {
        assert!(zone_aware_select(&profile(&D16), 0, 2, 2)
            .unwrap()
            .removed_layers
            .is_empty());
        let flat = profile(&[0.3; 10]);
        assert_eq!(
            zone_aware_select(&flat, 2, 1, 2).unwrap().removed_layers,
            vec![1, 3]
        );
    }

    #[test]
    fn infeasible_reports_partial() {
        // interior 1..4 holds at most two layers two apart
        let p = profile(&[0.5, 0.1, 0.2, 0.3, 0.5]);
        match zone_aware_select(&p, 3, 1, 2) {
            Err(PruneError::InfeasibleSelection { k: 3, partial }) => {
                assert_eq!(partial, vec![1, 3])
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn baselines() {
        let plan = baseline_select(Strategy::LastN, 24, 4, &BaselineInputs::default()).unwrap();
        assert_eq!(plan.removed_layers, vec![20, 21, 22, 23]);
        let p = profile(&D16);
        let worst = baseline_select(
            Strategy::SpectralWorst,
            16,
            2,
            &BaselineInputs {
                profile: Some(&p),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(worst.removed_layers, vec![2, 5]);
        let norms = [3.0, 1.0, 2.0, 0.5];
        let mag = baseline_select(
            Strategy::Magnitude,
            4,
            2,
            &BaselineInputs {
                frob_norms: Some(&norms),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(mag.removed_layers, vec![1, 3]);
        assert!(matches!(
            baseline_select(Strategy::Random, 4, 2, &BaselineInputs::default()),
            Err(PruneError::MissingInput(Strategy::Random, _))
        ));
        assert!(matches!(
            baseline_select(Strategy::Magnitude, 4, 2, &BaselineInputs::default()),
            Err(PruneError::MissingInput(..))
        ));
    }

    #[test]
    fn random_is_seeded() {
        let inputs = BaselineInputs {
            seed: Some(9),
            ..Default::default()
        };
        let a = baseline_select(Strategy::Random, 24, 5, &inputs).unwrap();
        let b = baseline_select(Strategy::Random, 24, 5, &inputs).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.seed, Some(9));
        let mut d = a.removed_layers.clone();
        d.dedup();
        assert_eq!(d.len(), 5);
        assert!(d.iter().all(|&l| l < 24));
    }

    #[test]
    fn last_n_coincides_when_lowest_alpha_sits_at_the_end() {
        let a = [0.6, 0.5, 0.7, 0.4, 0.45, 0.3, 0.2, 0.1];
        let zone = zone_aware_select(&profile(&a), 3, 0, 1).unwrap();
        let last = baseline_select(Strategy::LastN, 8, 3, &BaselineInputs::default()).unwrap();
        assert_eq!(zone.removed_layers, last.removed_layers);
        // the gap rule breaks the coincidence once adjacent layers are excluded
        let gapped = zone_aware_select(&profile(&a), 3, 0, 2).unwrap();
        assert_eq!(gapped.removed_layers, vec![3, 5, 7]);
    }

    #[test]
    fn constant_importance_gives_zero_rho() {
        let p = profile(&D16);
        let imp: BTreeMap<usize, f64> = (0..16).map(|l| (l, 1.0)).collect();
        let z = classify_zones(16, 2).unwrap();
        let rc = importance_correlation(&p, &imp, &z, LayerFilter::All, 99, 0).unwrap();
        assert_eq!(rc.rho, 0.0);
    }

    #[test]
    fn digest_is_stable() {
        assert_eq!(
            alpha_profile_digest(&[]),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            alpha_profile_digest(&[0.5]),
            "8d5c1b5a87c51f970807fc0c2057b3ab3aaf11638ab667dc5956edc8f5bcf138"
        );
    }

    fn brute_greedy(alphas: &[f64], k: usize, b: usize, gap: usize) -> Option<Vec<usize>> {
        let l = alphas.len();
        let mut cand: Vec<usize> = (b..l - b).collect();
        // selection sort by (alpha, index)
        for i in 0..cand.len() {
            let mut m = i;
            for j in i + 1..cand.len() {
                let (x, y) = (cand[j], cand[m]);
                if alphas[x] < alphas[y] || (alphas[x] == alphas[y] && x < y) {
                    m = j;
                }
            }
            cand.swap(i, m);
        }
        let mut out = Vec::new();
        for c in cand {
            if out.len() == k {
                break;
            }
            if out
                .iter()
                .all(|&o: &usize| (o as i64 - c as i64).abs() >= gap as i64)
            {
                out.push(c);
            }
        }
        out.sort();
        (out.len() == k).then_some(out)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn selection_respects_zones_and_gap(
            alphas in prop::collection::vec(0.0f64..1.0, 3..24),
            k in 0usize..6, b in 0usize..3, gap in 1usize..4,
        ) {
            prop_assume!(2 * b < alphas.len());
            let p = profile(&alphas);
            match zone_aware_select(&p, k, b, gap) {
                Ok(plan) => {
                    prop_assert_eq!(plan.removed_layers.len(), k);
                    prop_assert!(plan.removed_layers.iter().all(|&l| l >= b && l < alphas.len() - b));
                    for w in plan.removed_layers.windows(2) {
                        prop_assert!(w[1] - w[0] >= gap);
                    }
                    prop_assert_eq!(Some(plan.removed_layers.clone()), brute_greedy(&alphas, k, b, gap));
                    let raised = profile(&alphas.iter().map(|a| a + 0.25).collect::<Vec<_>>());
                    prop_assert_eq!(zone_aware_select(&raised, k, b, gap).unwrap().removed_layers, plan.removed_layers);
                }
                Err(PruneError::InfeasibleSelection { partial, .. }) => {
                    prop_assert!(partial.len() < k);
                    prop_assert_eq!(brute_greedy(&alphas, k, b, gap), None);
                }
                Err(e) => prop_assert!(false, "{e}"),
            }
        }
    }
}
