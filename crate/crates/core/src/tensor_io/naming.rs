use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The tracked per-layer matrix types plus the fused attention projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MatrixType {
    Q,
    K,
    V,
    O,
    MlpUp,
    MlpDown,
    FusedQkv,
    Other,
}

impl MatrixType {
    /// The six types every layer is expected to carry once fused blocks are split.
    pub const TRACKED: [MatrixType; 6] = [
        MatrixType::Q,
        MatrixType::K,
        MatrixType::V,
        MatrixType::O,
        MatrixType::MlpUp,
        MatrixType::MlpDown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MatrixType::Q => "Q",
            MatrixType::K => "K",
            MatrixType::V => "V",
            MatrixType::O => "O",
            MatrixType::MlpUp => "MLP_UP",
            MatrixType::MlpDown => "MLP_DOWN",
            MatrixType::FusedQkv => "FUSED_QKV",
            MatrixType::Other => "OTHER",
        }
    }
}

impl fmt::Display for MatrixType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MatrixType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "Q" => Ok(MatrixType::Q),
            "K" => Ok(MatrixType::K),
            "V" => Ok(MatrixType::V),
            "O" => Ok(MatrixType::O),
            "MLP_UP" | "UP" => Ok(MatrixType::MlpUp),
            "MLP_DOWN" | "DOWN" => Ok(MatrixType::MlpDown),
            "FUSED_QKV" => Ok(MatrixType::FusedQkv),
            "OTHER" => Ok(MatrixType::Other),
            other => Err(format!("unknown matrix type {other:?}")),
        }
    }
}

/// Which block of a fused QKV projection a split tensor came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FusedSlot {
    Q,
    K,
    V,
}

impl FusedSlot {
    pub const ALL: [FusedSlot; 3] = [FusedSlot::Q, FusedSlot::K, FusedSlot::V];

    pub fn as_str(self) -> &'static str {
        match self {
            FusedSlot::Q => "Q",
            FusedSlot::K => "K",
            FusedSlot::V => "V",
        }
    }

    pub fn matrix_type(self) -> MatrixType {
        match self {
            FusedSlot::Q => MatrixType::Q,
            FusedSlot::K => MatrixType::K,
            FusedSlot::V => MatrixType::V,
        }
    }
}

impl FromStr for FusedSlot {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "Q" => Ok(FusedSlot::Q),
            "K" => Ok(FusedSlot::K),
            "V" => Ok(FusedSlot::V),
            other => Err(format!("unknown fused slot {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamCoord {
    pub layer: usize,
    pub matrix_type: MatrixType,
    pub fused_slot: Option<FusedSlot>,
}

impl ParamCoord {
    pub fn new(layer: usize, matrix_type: MatrixType) -> Self {
        Self {
            layer,
            matrix_type,
            fused_slot: None,
        }
    }

    pub fn fused(layer: usize, slot: FusedSlot) -> Self {
        Self {
            layer,
            matrix_type: MatrixType::FusedQkv,
            fused_slot: Some(slot),
        }
    }

    /// The type used for analysis: a split fused block counts as its slot's type.
    pub fn effective_type(&self) -> MatrixType {
        match (self.matrix_type, self.fused_slot) {
            (MatrixType::FusedQkv, Some(slot)) => slot.matrix_type(),
            (t, _) => t,
        }
    }
}

impl fmt::Display for ParamCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.fused_slot {
            Some(slot) => write!(f, "L{}.{}[{}]", self.layer, self.matrix_type, slot.as_str()),
            None => write!(f, "L{}.{}", self.layer, self.matrix_type),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NamingScheme {
    #[serde(alias = "CUSTOM")]
    Custom,
    #[serde(alias = "GPT2", alias = "gpt-2")]
    Gpt2,
    #[serde(alias = "PYTHIA")]
    Pythia,
}

impl FromStr for NamingScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "custom" => Ok(NamingScheme::Custom),
            "gpt2" | "gpt-2" => Ok(NamingScheme::Gpt2),
            "pythia" => Ok(NamingScheme::Pythia),
            other => Err(format!("unknown naming scheme {other:?}")),
        }
    }
}

const LAYER_CONTAINERS: [&str; 3] = ["layers", "h", "blocks"];

/// Splits `name` into (layer index, the dotted suffix after it).
fn split_layer(name: &str) -> Option<(usize, String)> {
    let parts: Vec<&str> = name.split('.').collect();
    for i in 1..parts.len() {
        if LAYER_CONTAINERS.contains(&parts[i - 1]) {
            if let Ok(layer) = parts[i].parse::<usize>() {
                return Some((layer, parts[i + 1..].join(".")));
            }
        }
    }
    None
}

fn custom_type(suffix: &str) -> Option<MatrixType> {
    let t = match suffix {
        "attn.q_proj" | "attn.c_q" | "self_attn.q_proj" | "attention.wq" => MatrixType::Q,
        "attn.k_proj" | "attn.c_k" | "self_attn.k_proj" | "attention.wk" => MatrixType::K,
        "attn.v_proj" | "attn.c_v" | "self_attn.v_proj" | "attention.wv" => MatrixType::V,
        "attn.o_proj" | "attn.out_proj" | "attn.c_proj" | "self_attn.o_proj" | "attention.wo" => {
            MatrixType::O
        }
        "mlp.up_proj" | "mlp.c_fc" | "mlp.fc1" | "feed_forward.w1" => MatrixType::MlpUp,
        "mlp.down_proj" | "mlp.c_proj" | "mlp.fc2" | "feed_forward.w2" => MatrixType::MlpDown,
        "attn.qkv_proj" | "attn.qkv" | "attn.c_attn" => MatrixType::FusedQkv,
        "mlp.gate_proj" | "feed_forward.w3" => MatrixType::Other,
        _ => return None,
    };
    Some(t)
}

fn gpt2_type(suffix: &str) -> Option<MatrixType> {
    let t = match suffix {
        "attn.c_attn" => MatrixType::FusedQkv,
        "attn.c_proj" => MatrixType::O,
        "mlp.c_fc" => MatrixType::MlpUp,
        "mlp.c_proj" => MatrixType::MlpDown,
        _ => return None,
    };
    Some(t)
}

fn pythia_type(suffix: &str) -> Option<MatrixType> {
    let t = match suffix {
        "attention.query_key_value" => MatrixType::FusedQkv,
        "attention.dense" => MatrixType::O,
        "mlp.dense_h_to_4h" => MatrixType::MlpUp,
        "mlp.dense_4h_to_h" => MatrixType::MlpDown,
        _ => return None,
    };
    Some(t)
}

/// Maps a checkpoint parameter name to its layer coordinate.
///
/// Embeddings, norms, biases and anything not nested under a numbered layer
/// map to `None`. Fused attention projections come back as `FUSED_QKV` with
/// no slot; [`split_fused_qkv`](super::split_fused_qkv) produces the slots.
pub fn map_parameter_name(name: &str, scheme: NamingScheme) -> Option<ParamCoord> {
    let stem = name.strip_suffix(".weight")?;
    let (layer, suffix) = split_layer(stem)?;
    let matrix_type = match scheme {
        NamingScheme::Custom => custom_type(&suffix),
        NamingScheme::Gpt2 => gpt2_type(&suffix),
        NamingScheme::Pythia => pythia_type(&suffix),
    }?;
    Some(ParamCoord::new(layer, matrix_type))
}

/// Name under the `Custom` scheme that maps back to `coord` (fused slots
/// resolve to their plain Q/K/V name).
pub fn canonical_name(coord: &ParamCoord) -> String {
    let suffix = match coord.effective_type() {
        MatrixType::Q => "attn.q_proj",
        MatrixType::K => "attn.k_proj",
        MatrixType::V => "attn.v_proj",
        MatrixType::O => "attn.o_proj",
        MatrixType::MlpUp => "mlp.up_proj",
        MatrixType::MlpDown => "mlp.down_proj",
        MatrixType::FusedQkv => "attn.qkv_proj",
        MatrixType::Other => "mlp.gate_proj",
    };
    format!("layers.{}.{}.weight", coord.layer, suffix)
}
